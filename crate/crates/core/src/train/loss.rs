use rand::Rng;

use super::TrainError;
use crate::autograd::{grad, Var};
use crate::tensor::{Real, Tensor};

/// Added under the square root of the gradient norm so the penalty stays
/// differentiable where the gradient vanishes.
pub const GP_NORM_EPS: f64 = 1e-12;

/// Gradient penalty and the per-sample gradient norms it was built from.
pub struct Penalty<T: Real> {
    pub value: Var<T>,
    pub grad_norms: Vec<f64>,
}

/// `mean_i (||d critic / d x̂_i|| - 1)^2` at `x̂ = u·real + (1-u)·fake`, with
/// one `u ~ U[0,1]` per pair drawn from `rng`.
pub fn gradient_penalty<T: Real>(
    critic: &dyn Fn(&Var<T>) -> Var<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<Penalty<T>, TrainError> {
    let u: Vec<f64> = (0..real.shape()[0]).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_at(critic, real, fake, &u)
}

/// [`gradient_penalty`] with explicit interpolation weights.
pub fn gradient_penalty_at<T: Real>(
    critic: &dyn Fn(&Var<T>) -> Var<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    u: &[f64],
) -> Result<Penalty<T>, TrainError> {
    if real.shape() != fake.shape() || real.shape().first() != Some(&u.len()) {
        return Err(TrainError::Shape(format!(
            "penalty batches {:?} / {:?} with {} weights",
            real.shape(),
            fake.shape(),
            u.len()
        )));
    }
    let n = u.len();
    let per = real.len() / n.max(1);
    let mut mixed = Vec::with_capacity(real.len());
    for (i, &ui) in u.iter().enumerate() {
        let ui = T::c(ui);
        for j in i * per..(i + 1) * per {
            mixed.push(ui * real.data()[j] + (T::one() - ui) * fake.data()[j]);
        }
    }
    let x_hat = Var::leaf(Tensor::new(real.shape().to_vec(), mixed));
    let scores = critic(&x_hat);
    let g = grad(&scores.sum_all(), std::slice::from_ref(&x_hat), true).remove(0);
    if !g.value().all_finite() {
        return Err(TrainError::NonFinite {
            what: "gradient penalty input gradient".into(),
            step: None,
            last_checkpoint: None,
        });
    }
    let axes: Vec<usize> = (1..real.ndim()).collect();
    let norms = g.square().sum_axes(&axes, false).add_scalar(GP_NORM_EPS).sqrt();
    let grad_norms = norms.value().to_f64_vec();
    let value = norms.add_scalar(-1.0).square().mean_all();
    Ok(Penalty { value, grad_norms })
}

/// `mean(D(fake)) - mean(D(real)) + gp_weight·gp + drift_weight·mean(D(real)^2)`.
pub fn d_loss<T: Real>(
    real_scores: &Var<T>,
    fake_scores: &Var<T>,
    gp: &Var<T>,
    gp_weight: f64,
    drift_weight: f64,
) -> Var<T> {
    fake_scores
        .mean_all()
        .sub(&real_scores.mean_all())
        .add(&gp.scale(gp_weight))
        .add(&real_scores.square().mean_all().scale(drift_weight))
}

/// `-mean(D(fake))`.
pub fn g_loss<T: Real>(fake_scores: &Var<T>) -> Var<T> {
    fake_scores.mean_all().neg()
}
