//! Non-local and simplified non-local (global context) attention blocks.
//!
//! The full block
//!
//! ```text
//! z_i = x_i + W_z Σ_j softmax_j(θ(x_i)·φ(x_j)) (W_v x_j)
//! ```
//!
//! is quadratic in the number of positions. The simplified block shares one
//! query-independent attention map across positions,
//!
//! ```text
//! z_i = x_i + Σ_j softmax_j(W_k x_j) (W_v x_j)          (naive)
//!     = x_i + W_v Σ_j softmax_j(W_k x_j) x_j            (factored)
//! ```
//!
//! and the factored form pools once and transforms once, so its cost is
//! linear in the number of positions.
//!
//! The `*_var` functions are the differentiable, batched (`[N,C,H,W]`) forms
//! used inside the networks; the [`FeatureMap`] functions wrap them for a
//! single map in double precision.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Var;
use crate::gradcheck::{self, GradReport};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: &'static str },
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("unsupported gradient check: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

fn ensure_finite(name: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite { tensor: name })
    }
}

fn ensure_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(AttentionError::Shape {
            what,
            expected: expected.to_string(),
            actual: v.len().to_string(),
        })
    }
}

/// A `C x H x W` feature map in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(AttentionError::Shape {
                what: "feature map",
                expected: "C, H, W >= 1".into(),
                actual: format!("{channels}x{height}x{width}"),
            });
        }
        ensure_len("feature map data", &data, channels * height * width)?;
        ensure_finite("x", &data)?;
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a map from position vectors (`positions[j]` has `C` entries)
    /// laid out row-major over a `height x width` grid.
    pub fn from_positions(height: usize, width: usize, positions: &[Vec<f64>]) -> Result<Self> {
        let c = positions.first().map_or(0, |p| p.len());
        if positions.len() != height * width || positions.iter().any(|p| p.len() != c) {
            return Err(AttentionError::Shape {
                what: "position list",
                expected: format!("{} vectors of equal length", height * width),
                actual: positions.len().to_string(),
            });
        }
        let np = height * width;
        let mut data = vec![0.0; c * np];
        for (j, p) in positions.iter().enumerate() {
            for (ch, &v) in p.iter().enumerate() {
                data[ch * np + j] = v;
            }
        }
        Self::new(c, height, width, data)
    }

    pub fn random(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel vector at flattened position `j`.
    pub fn position(&self, j: usize) -> Vec<f64> {
        let np = self.n_positions();
        (0..self.channels).map(|c| self.data[c * np + j]).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, self.channels, self.height, self.width], &self.data)
    }

    fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        FeatureMap {
            channels: s[1],
            height: s[2],
            width: s[3],
            data: t.data().to_vec(),
        }
    }

    /// Reorders positions: output position `j` takes input position `perm[j]`.
    pub fn permute_positions(&self, perm: &[usize]) -> Self {
        let np = self.n_positions();
        assert_eq!(perm.len(), np);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for (j, &src) in perm.iter().enumerate() {
                data[c * np + j] = self.data[c * np + src];
            }
        }
        FeatureMap { data, ..*self }
    }
}

/// `W_k` (C→1 logit projection) and `W_v` (C→C value transform).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub channels: usize,
    pub w_k: Vec<f64>,
    /// Row-major `C x C`, `out x in`.
    pub w_v: Vec<f64>,
    pub b_k: Option<f64>,
    pub b_v: Option<Vec<f64>>,
}

impl AttentionParams {
    pub fn new(w_k: Vec<f64>, w_v: Vec<f64>) -> Result<Self> {
        let c = w_k.len();
        let p = AttentionParams {
            channels: c,
            w_k,
            w_v,
            b_k: None,
            b_v: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// `W_k` unit-variance, `W_v = 0` so the block starts as the identity.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            channels,
            w_k: (0..channels).map(|_| rng.sample(StandardNormal)).collect(),
            w_v: vec![0.0; channels * channels],
            b_k: None,
            b_v: None,
        }
    }

    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::init(channels, rng);
        p.w_v = (0..channels * channels).map(|_| rng.sample(StandardNormal)).collect();
        p
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        ensure_len("w_k", &self.w_k, c)?;
        ensure_len("w_v", &self.w_v, c * c)?;
        ensure_finite("w_k", &self.w_k)?;
        ensure_finite("w_v", &self.w_v)?;
        if let Some(b) = self.b_k {
            ensure_finite("b_k", &[b])?;
        }
        if let Some(b) = &self.b_v {
            ensure_len("b_v", b, c)?;
            ensure_finite("b_v", b)?;
        }
        Ok(())
    }

    fn check_against(&self, x: &FeatureMap) -> Result<()> {
        self.validate()?;
        if x.channels != self.channels {
            return Err(AttentionError::Shape {
                what: "attention params vs feature map channels",
                expected: self.channels.to_string(),
                actual: x.channels.to_string(),
            });
        }
        Ok(())
    }

    fn vars<T: Real>(&self, leaf: bool) -> SnlVars<T> {
        let mk = |t: Tensor<T>| if leaf { Var::leaf(t) } else { Var::constant(t) };
        let c = self.channels;
        SnlVars {
            w_k: mk(Tensor::from_f64(&[1, c, 1, 1], &self.w_k)),
            w_v: mk(Tensor::from_f64(&[c, c, 1, 1], &self.w_v)),
            b_k: self.b_k.map(|b| mk(Tensor::from_f64(&[1, 1, 1, 1], &[b]))),
            b_v: self.b_v.as_ref().map(|b| mk(Tensor::from_f64(&[1, c, 1, 1], b))),
        }
    }
}

/// Parameters of the full non-local block with embedded-Gaussian pairwise function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NLParams {
    pub channels: usize,
    pub embed: usize,
    /// `embed x C`
    pub theta: Vec<f64>,
    /// `embed x C`
    pub phi: Vec<f64>,
    /// `C x C`
    pub w_v: Vec<f64>,
    /// `C x C`
    pub w_z: Vec<f64>,
}

impl NLParams {
    pub fn default_embed(channels: usize) -> usize {
        (channels / 8).max(1)
    }

    /// Unit-variance embeddings and value map, `W_z = 0`.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let e = Self::default_embed(channels);
        let mut n = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        NLParams {
            channels,
            embed: e,
            theta: n(e * channels),
            phi: n(e * channels),
            w_v: n(channels * channels),
            w_z: vec![0.0; channels * channels],
        }
    }

    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::init(channels, rng);
        p.w_z = (0..channels * channels).map(|_| rng.sample(StandardNormal)).collect();
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (c, e) = (self.channels, self.embed);
        if e == 0 {
            return Err(AttentionError::Shape {
                what: "embedding width",
                expected: ">= 1".into(),
                actual: "0".into(),
            });
        }
        ensure_len("theta", &self.theta, e * c)?;
        ensure_len("phi", &self.phi, e * c)?;
        ensure_len("w_v", &self.w_v, c * c)?;
        ensure_len("w_z", &self.w_z, c * c)?;
        ensure_finite("theta", &self.theta)?;
        ensure_finite("phi", &self.phi)?;
        ensure_finite("w_v", &self.w_v)?;
        ensure_finite("w_z", &self.w_z)
    }

    fn check_against(&self, x: &FeatureMap) -> Result<()> {
        self.validate()?;
        if x.channels != self.channels {
            return Err(AttentionError::Shape {
                what: "non-local params vs feature map channels",
                expected: self.channels.to_string(),
                actual: x.channels.to_string(),
            });
        }
        Ok(())
    }

    fn vars<T: Real>(&self, leaf: bool) -> NlVars<T> {
        let mk = |t: Tensor<T>| if leaf { Var::leaf(t) } else { Var::constant(t) };
        let (c, e) = (self.channels, self.embed);
        NlVars {
            theta: mk(Tensor::from_f64(&[e, c, 1, 1], &self.theta)),
            phi: mk(Tensor::from_f64(&[e, c, 1, 1], &self.phi)),
            w_v: mk(Tensor::from_f64(&[c, c, 1, 1], &self.w_v)),
            w_z: mk(Tensor::from_f64(&[c, c, 1, 1], &self.w_z)),
        }
    }
}

/// Normalised attention weights: one global row for the simplified block,
/// an `N_p x N_p` matrix for the full block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn is_global(&self) -> bool {
        self.rows == 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest deviation of a row sum from 1, or `f64::INFINITY` if any weight is negative.
    pub fn stochasticity_error(&self) -> f64 {
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return f64::INFINITY;
        }
        (0..self.rows)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Differentiable SNL parameters as graph nodes (`W_k: [1,C,1,1]`, `W_v: [C,C,1,1]`).
pub struct SnlVars<T: Real> {
    pub w_k: Var<T>,
    pub w_v: Var<T>,
    pub b_k: Option<Var<T>>,
    pub b_v: Option<Var<T>>,
}

pub struct NlVars<T: Real> {
    pub theta: Var<T>,
    pub phi: Var<T>,
    pub w_v: Var<T>,
    pub w_z: Var<T>,
}

fn conv1x1<T: Real>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
    let y = x.conv2d(w, 0);
    match b {
        Some(b) => y.add(b),
        None => y,
    }
}

/// Global attention weights `[N,1,HW]` for `x: [N,C,H,W]`.
pub fn snl_weights_var<T: Real>(x: &Var<T>, w_k: &Var<T>, b_k: Option<&Var<T>>) -> Var<T> {
    let s = x.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    conv1x1(x, w_k, b_k).reshape(&[n, 1, hw]).softmax(2)
}

/// Factored simplified non-local block: pool once, transform once.
pub fn snl_forward_var<T: Real>(x: &Var<T>, p: &SnlVars<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let w = snl_weights_var(x, &p.w_k, p.b_k.as_ref());
    let pooled = x.reshape(&[n, c, hw]).bmm(&w.transpose_last()); // [n,c,1]
    let ctx = conv1x1(&pooled.reshape(&[n, c, 1, 1]), &p.w_v, p.b_v.as_ref());
    x.add(&ctx)
}

/// Full non-local block with embedded-Gaussian affinities.
pub fn nl_forward_var<T: Real>(x: &Var<T>, p: &NlVars<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let e = p.theta.shape()[0];
    let q = x.conv2d(&p.theta, 0).reshape(&[n, e, hw]);
    let k = x.conv2d(&p.phi, 0).reshape(&[n, e, hw]);
    let attn = q.transpose_last().bmm(&k).softmax(2); // [n, i, j]
    let v = x.conv2d(&p.w_v, 0).reshape(&[n, c, hw]);
    let y = v.bmm(&attn.transpose_last()).reshape(&[n, c, s[2], s[3]]);
    x.add(&y.conv2d(&p.w_z, 0))
}

/// Softmax over positions of `W_k·x_j`.
pub fn snl_attention_weights(x: &FeatureMap, p: &AttentionParams) -> Result<AttentionMap> {
    p.check_against(x)?;
    let v = p.vars::<f64>(false);
    let w = snl_weights_var(&Var::constant(x.to_tensor()), &v.w_k, v.b_k.as_ref());
    Ok(AttentionMap {
        rows: 1,
        cols: x.n_positions(),
        weights: w.value().data().to_vec(),
    })
}

/// Per-query affinity rows of the full non-local block.
pub fn nl_attention_weights(x: &FeatureMap, p: &NLParams) -> Result<AttentionMap> {
    p.check_against(x)?;
    let v = p.vars::<f64>(false);
    let xv = Var::constant(x.to_tensor());
    let (e, np) = (p.embed, x.n_positions());
    let q = xv.conv2d(&v.theta, 0).reshape(&[1, e, np]);
    let k = xv.conv2d(&v.phi, 0).reshape(&[1, e, np]);
    let attn = q.transpose_last().bmm(&k).softmax(2);
    Ok(AttentionMap {
        rows: np,
        cols: np,
        weights: attn.value().data().to_vec(),
    })
}

/// Simplified block evaluated literally: every position's value vector is
/// transformed by `W_v` inside the weighted sum.
pub fn snl_forward_naive(x: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    let weights = snl_attention_weights(x, p)?;
    let (c, np) = (x.channels, x.n_positions());
    let mut ctx = vec![0.0; c];
    for j in 0..np {
        let xj = x.position(j);
        for o in 0..c {
            let mut v = p.b_v.as_ref().map_or(0.0, |b| b[o]);
            for (i, xji) in xj.iter().enumerate() {
                v += p.w_v[o * c + i] * xji;
            }
            ctx[o] += weights.weights[j] * v;
        }
    }
    let mut data = x.data.clone();
    for o in 0..c {
        for j in 0..np {
            data[o * np + j] += ctx[o];
        }
    }
    Ok(FeatureMap { data, ..*x })
}

/// Simplified block in factored form (the form used by the networks).
pub fn snl_forward(x: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    p.check_against(x)?;
    let out = snl_forward_var(&Var::constant(x.to_tensor()), &p.vars::<f64>(false));
    Ok(FeatureMap::from_tensor(out.value()))
}

pub fn nl_forward(x: &FeatureMap, p: &NLParams) -> Result<FeatureMap> {
    p.check_against(x)?;
    let out = nl_forward_var(&Var::constant(x.to_tensor()), &p.vars::<f64>(false));
    Ok(FeatureMap::from_tensor(out.value()))
}

/// Which block a gradient check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionOp {
    SnlForward,
    NlForward,
}

#[derive(Debug, Clone, Copy)]
pub enum BlockParams<'a> {
    Snl(&'a AttentionParams),
    Nl(&'a NLParams),
}

/// Compares analytic input and parameter gradients of `sum(op(x))` against
/// central finite differences with step `step`.
pub fn check_gradients(op: AttentionOp, x: &FeatureMap, params: BlockParams<'_>, step: f64) -> Result<GradReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(AttentionError::Unsupported(format!("finite-difference step {step}")));
    }
    let shape = [1, x.channels, x.height, x.width];
    match (op, params) {
        (AttentionOp::SnlForward, BlockParams::Snl(p)) => {
            p.check_against(x)?;
            if p.b_k.is_some() || p.b_v.is_some() {
                return Err(AttentionError::Unsupported(
                    "gradient check of biased attention maps".into(),
                ));
            }
            let c = p.channels;
            let inputs = [
                ("x", Tensor::from_f64(&shape, &x.data)),
                ("w_k", Tensor::from_f64(&[1, c, 1, 1], &p.w_k)),
                ("w_v", Tensor::from_f64(&[c, c, 1, 1], &p.w_v)),
            ];
            Ok(gradcheck::check("snl_forward", &inputs, step, |v| {
                let pv = SnlVars {
                    w_k: v[1].clone(),
                    w_v: v[2].clone(),
                    b_k: None,
                    b_v: None,
                };
                snl_forward_var(&v[0], &pv)
            }))
        }
        (AttentionOp::NlForward, BlockParams::Nl(p)) => {
            p.check_against(x)?;
            let (c, e) = (p.channels, p.embed);
            let inputs = [
                ("x", Tensor::from_f64(&shape, &x.data)),
                ("theta", Tensor::from_f64(&[e, c, 1, 1], &p.theta)),
                ("phi", Tensor::from_f64(&[e, c, 1, 1], &p.phi)),
                ("w_v", Tensor::from_f64(&[c, c, 1, 1], &p.w_v)),
                ("w_z", Tensor::from_f64(&[c, c, 1, 1], &p.w_z)),
            ];
            Ok(gradcheck::check("nl_forward", &inputs, step, |v| {
                let pv = NlVars {
                    theta: v[1].clone(),
                    phi: v[2].clone(),
                    w_v: v[3].clone(),
                    w_z: v[4].clone(),
                };
                nl_forward_var(&v[0], &pv)
            }))
        }
        (op, _) => Err(AttentionError::Unsupported(format!(
            "{op:?} with mismatched parameter kind"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    fn two_by_two() -> (FeatureMap, AttentionParams) {
        // positions x_1 = (1,0), x_2 = (0,1)
        let x = FeatureMap::from_positions(1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = AttentionParams::new(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        (x, p)
    }

    #[test]
    fn hand_evaluated_softmax() {
        let (x, p) = two_by_two();
        let w = snl_attention_weights(&x, &p).unwrap();
        let a = E / (E + 1.0);
        assert!((w.weights[0] - a).abs() < 1e-12);
        assert!((w.weights[1] - 1.0 / (E + 1.0)).abs() < 1e-12);
        assert!((w.weights[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn hand_evaluated_naive_block() {
        let (x, p) = two_by_two();
        let z = snl_forward_naive(&x, &p).unwrap();
        let a = E / (E + 1.0);
        let b = 1.0 / (E + 1.0);
        let z1 = z.position(0);
        let z2 = z.position(1);
        for (got, want) in z1.iter().zip([1.0 + a, b]).chain(z2.iter().zip([a, 1.0 + b])) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((z1[0] - 1.7311).abs() < 1e-4 && (z2[1] - 1.2689).abs() < 1e-4);
    }

    #[test]
    fn uniform_weights_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = vec![0.3, -1.2, 0.7];
        let x = FeatureMap::from_positions(2, 2, &vec![same; 4]).unwrap();
        let p = AttentionParams::random(3, &mut rng);
        let w = snl_attention_weights(&x, &p).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = FeatureMap::random(3, 2, 3, &mut rng);
        let mut p = AttentionParams::random(3, &mut rng);
        p.w_k = vec![0.0; 3];
        let w = snl_attention_weights(&x, &p).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        // z_i = x_i + W_v mean_j x_j
        let z = snl_forward(&x, &p).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..6).map(|j| x.position(j)[c]).sum::<f64>() / 6.0)
            .collect();
        for i in 0..6 {
            let xi = x.position(i);
            let zi = z.position(i);
            for o in 0..3 {
                let want = xi[o] + (0..3).map(|c| p.w_v[o * 3 + c] * mean[c]).sum::<f64>();
                assert!((zi[o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_map_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMap::random(4, 3, 3, &mut rng);
        let p = AttentionParams::init(4, &mut rng);
        assert_eq!(snl_forward(&x, &p).unwrap(), x);
        assert_eq!(snl_forward_naive(&x, &p).unwrap(), x);
        let nl = NLParams::init(4, &mut rng);
        assert_eq!(nl_forward(&x, &nl).unwrap(), x);
    }

    #[test]
    fn single_position_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureMap::random(3, 1, 1, &mut rng);
        let p = AttentionParams::random(3, &mut rng);
        let z = snl_forward(&x, &p).unwrap();
        let xs = x.data();
        for o in 0..3 {
            let want = xs[o] + (0..3).map(|c| p.w_v[o * 3 + c] * xs[c]).sum::<f64>();
            assert!((z.data()[o] - want).abs() < 1e-12);
        }
        let nl = NLParams::random(3, &mut rng);
        let z = nl_forward(&x, &nl).unwrap();
        let v: Vec<f64> = (0..3)
            .map(|o| (0..3).map(|c| nl.w_v[o * 3 + c] * xs[c]).sum())
            .collect();
        for o in 0..3 {
            let want = xs[o] + (0..3).map(|c| nl.w_z[o * 3 + c] * v[c]).sum::<f64>();
            assert!((z.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, _) = two_by_two();
        let bad = AttentionParams::new(vec![f64::NAN, 0.0], vec![0.0; 4]);
        assert_eq!(bad.unwrap_err(), AttentionError::NonFinite { tensor: "w_k" });
        let p3 = AttentionParams::new(vec![0.0; 3], vec![0.0; 9]).unwrap();
        assert!(matches!(snl_forward(&x, &p3), Err(AttentionError::Shape { .. })));
        assert_eq!(
            FeatureMap::new(1, 1, 1, vec![f64::INFINITY]).unwrap_err(),
            AttentionError::NonFinite { tensor: "x" }
        );
        let nl = NLParams::init(2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            check_gradients(AttentionOp::SnlForward, &x, BlockParams::Nl(&nl), 1e-5),
            Err(AttentionError::Unsupported(_))
        ));
    }

    #[test]
    fn zero_everything_gives_zero_value_gradient() {
        let x = FeatureMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
        let p = AttentionParams::new(vec![0.0; 2], vec![0.0; 4]).unwrap();
        let r = check_gradients(AttentionOp::SnlForward, &x, BlockParams::Snl(&p), 1e-5).unwrap();
        assert!(r.max_abs_error < 1e-12);
        // analytic gradient wrt w_v is pooled(x) summed over positions = 0
        let v = p.vars::<f64>(true);
        let out = snl_forward_var(&Var::constant(x.to_tensor::<f64>()), &v).sum_all();
        let g = crate::autograd::grad(&out, std::slice::from_ref(&v.w_v), false);
        assert_eq!(g[0].value().max_abs(), 0.0);
    }
}
