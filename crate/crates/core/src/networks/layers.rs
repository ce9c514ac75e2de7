//! Parameter storage and the PGAN building blocks: equalized-learning-rate
//! layers, pixel normalisation, minibatch standard deviation and 2x resampling.

use rand::Rng;
use rand_distr::StandardNormal;

use super::NetworkError;
use crate::attention::{self, SnlVars};
use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
pub const PIXEL_NORM_EPS: f64 = 1e-8;
pub const MBSTD_EPS: f64 = 1e-8;

/// Runtime He multiplier `sqrt(2 / fan_in)`.
pub fn equalized_scale(fan_in: usize) -> Result<f64, NetworkError> {
    if fan_in == 0 {
        return Err(NetworkError::Structure("equalized scale of a layer with fan_in = 0".into()));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

fn scale_with_gain(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Unit-variance normal; the runtime scale does the rest.
    Normal,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of the parameters a network expects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut set = ParamSet::default();
        for s in &self.specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Normal => (0..n).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect(),
            };
            set.push(s.name.clone(), Tensor::new(s.shape.clone(), data));
        }
        set
    }

    /// Verifies names and shapes before any compute happens.
    pub fn check<T: Real>(&self, params: &ParamSet<T>) -> Result<(), NetworkError> {
        if params.len() != self.specs.len() {
            return Err(NetworkError::Params(format!(
                "expected {} parameter tensors, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in self.specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(NetworkError::Params(format!(
                    "parameter {} expected shape {:?}, got {name} with shape {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: String, t: Tensor<T>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Differentiable leaves, one per tensor.
    pub fn bind(&self) -> Vec<Var<T>> {
        self.tensors.iter().map(|t| Var::leaf(t.clone())).collect()
    }

    /// Constant (non-differentiable) nodes.
    pub fn bind_const(&self) -> Vec<Var<T>> {
        self.tensors.iter().map(|t| Var::constant(t.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Square-kernel stride-1 convolution with "same" padding and runtime weight scaling.
#[derive(Debug, Clone)]
pub struct EqConv2d {
    pub weight: usize,
    pub bias: usize,
    pub kernel: usize,
    pub scale: f64,
}

impl EqConv2d {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize, kernel: usize, gain: f64) -> Self {
        let weight = layout.add(format!("{name}.w"), &[cout, cin, kernel, kernel], Init::Normal);
        let bias = layout.add(format!("{name}.b"), &[1, cout, 1, 1], Init::Zeros);
        EqConv2d {
            weight,
            bias,
            kernel,
            scale: scale_with_gain(cin * kernel * kernel, gain),
        }
    }

    pub fn forward<T: Real>(&self, p: &[Var<T>], x: &Var<T>) -> Var<T> {
        x.conv2d(&p[self.weight].scale(self.scale), self.kernel / 2)
            .add(&p[self.bias])
    }
}

/// Fully connected layer `[N,in] -> [N,out]` with runtime weight scaling.
#[derive(Debug, Clone)]
pub struct EqLinear {
    pub weight: usize,
    pub bias: usize,
    pub scale: f64,
}

impl EqLinear {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize, gain: f64) -> Self {
        let weight = layout.add(format!("{name}.w"), &[cout, cin], Init::Normal);
        let bias = layout.add(format!("{name}.b"), &[cout], Init::Zeros);
        EqLinear {
            weight,
            bias,
            scale: scale_with_gain(cin, gain),
        }
    }

    pub fn forward<T: Real>(&self, p: &[Var<T>], x: &Var<T>) -> Var<T> {
        x.matmul(&p[self.weight].scale(self.scale).transpose_last())
            .add(&p[self.bias])
    }
}

/// Simplified non-local block with equalized-learning-rate maps.
/// `W_v` starts at zero so an inserted block is the identity.
#[derive(Debug, Clone)]
pub struct SnlLayer {
    pub w_k: usize,
    pub w_v: usize,
    pub channels: usize,
    pub scale: f64,
}

impl SnlLayer {
    pub fn new(layout: &mut Layout, name: &str, channels: usize) -> Self {
        let w_k = layout.add(format!("{name}.wk"), &[1, channels, 1, 1], Init::Normal);
        let w_v = layout.add(format!("{name}.wv"), &[channels, channels, 1, 1], Init::Zeros);
        SnlLayer {
            w_k,
            w_v,
            channels,
            scale: scale_with_gain(channels, std::f64::consts::SQRT_2),
        }
    }

    pub fn forward<T: Real>(&self, p: &[Var<T>], x: &Var<T>) -> Var<T> {
        let vars = SnlVars {
            w_k: p[self.w_k].scale(self.scale),
            w_v: p[self.w_v].scale(self.scale),
            b_k: None,
            b_v: None,
        };
        attention::snl_forward_var(x, &vars)
    }
}

/// `b = a / sqrt(mean_c(a^2) + eps)` at every position of `[N,C,...]`.
pub fn pixel_norm<T: Real>(x: &Var<T>, eps: f64) -> Var<T> {
    let ms = x.square().mean_axes(&[1], true);
    x.mul(&ms.add_scalar(eps).powf(-0.5))
}

/// Appends one constant channel holding the batch-wide mean of per-feature
/// standard deviations (`sqrt(var + eps)`, population variance over the batch).
pub fn minibatch_stddev<T: Real>(x: &Var<T>, eps: f64) -> Var<T> {
    let s = x.shape().to_vec();
    let mu = x.mean_axes(&[0], true);
    let var = x.sub(&mu).square().mean_axes(&[0], true);
    let sd = var.add_scalar(eps).sqrt().mean_all();
    let mut cs = s.clone();
    cs[1] = 1;
    let chan = sd.reshape(&[1, 1, 1, 1]).broadcast_to(&cs);
    Var::concat(&[x.clone(), chan], 1)
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
    if x.ndim() != 4 {
        return Err(NetworkError::Structure(format!("upsample of non-NCHW shape {:?}", x.shape())));
    }
    Ok(x.upsample2x())
}

pub fn downsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
    if x.ndim() != 4 {
        return Err(NetworkError::Structure(format!("downsample of non-NCHW shape {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetworkError::OddExtent { height: h, width: w });
    }
    Ok(x.downsample2x())
}

/// One-hot rows `[N, K]`.
pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * n_classes + l] = T::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn pixel_norm_examples() {
        let ones = Var::constant(Tensor::<f64>::ones(&[1, 4, 2, 2]));
        let out = pixel_norm(&ones, PIXEL_NORM_EPS);
        assert!(out.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
        let zeros = Var::constant(Tensor::<f64>::zeros(&[1, 4, 2, 2]));
        assert_eq!(pixel_norm(&zeros, PIXEL_NORM_EPS).value().max_abs(), 0.0);
        let v = Var::constant(Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[3.0, 4.0]));
        let out = pixel_norm(&v, PIXEL_NORM_EPS);
        let d = 12.5f64.sqrt();
        assert!((out.value().data()[0] - 3.0 / d).abs() < 1e-8);
        assert!((out.value().data()[1] - 4.0 / d).abs() < 1e-8);
        assert!((out.value().data()[0] - 0.8485).abs() < 1e-4);
        assert!((out.value().data()[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn equalized_scale_values() {
        assert_eq!(equalized_scale(2).unwrap(), 1.0);
        assert_eq!(equalized_scale(8).unwrap(), 0.5);
        assert!(equalized_scale(0).is_err());
    }

    #[test]
    fn minibatch_stddev_examples() {
        let same = Tensor::<f64>::from_f64(&[3, 2, 1, 1], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let out = minibatch_stddev(&Var::constant(same), MBSTD_EPS);
        assert_eq!(out.shape(), &[3, 3, 1, 1]);
        for n in 0..3 {
            assert!((out.value().data()[n * 3 + 2] - 1e-4).abs() < 1e-12);
        }
        let single = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[5.0, -1.0, 0.3, 2.0]);
        let out = minibatch_stddev(&Var::constant(single), MBSTD_EPS);
        assert!(out.value().narrow(1, 1, 1).data().iter().all(|&v| (v - 1e-4).abs() < 1e-12));
        let pair = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[0.0, 2.0]);
        let out = minibatch_stddev(&Var::constant(pair), MBSTD_EPS);
        assert!((out.value().data()[1] - (1.0f64 + 1e-8).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn runtime_scaling_equals_prescaled_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layout = Layout::default();
        let conv = EqConv2d::new(&mut layout, "c", 3, 4, 3, 2f64.sqrt());
        let lin = EqLinear::new(&mut layout, "l", 6, 5, 1.0);
        let ps = layout.init::<f64>(&mut rng);
        let p = ps.bind_const();
        let x = Var::constant(randn(&[2, 3, 5, 5], &mut rng));
        let pre_w = Var::constant(ps.tensors()[conv.weight].map(|w| w * conv.scale));
        let plain = x.conv2d(&pre_w, 1).add(&p[conv.bias]);
        let diff = conv.forward(&p, &x).value().zip_with(plain.value(), |a, b| a - b).max_abs();
        assert!(diff < 1e-12);
        let x = Var::constant(randn(&[3, 6], &mut rng));
        let pre_w = Var::constant(ps.tensors()[lin.weight].map(|w| w * lin.scale));
        let plain = x.matmul(&pre_w.transpose_last()).add(&p[lin.bias]);
        let diff = lin.forward(&p, &x).value().zip_with(plain.value(), |a, b| a - b).max_abs();
        assert!(diff < 1e-12);
    }

    #[test]
    fn resample_errors_and_examples() {
        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(downsample2x(&odd), Err(NetworkError::OddExtent { .. })));
        let one = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[7.0]);
        assert_eq!(upsample2x(&one).unwrap().data(), &[7.0; 4]);
        let b = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(downsample2x(&b).unwrap().data(), &[4.0]);
    }

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&[3, 4, 2, 2], &mut rng);
        let r = gradcheck::check("pixel_norm", &[("x", x.clone())], 1e-5, |v| {
            pixel_norm(&v[0], PIXEL_NORM_EPS).mul(&Var::constant(x.map(|a| a.sin())))
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = gradcheck::check("minibatch_stddev", &[("x", x.clone())], 1e-5, |v| {
            minibatch_stddev(&v[0], MBSTD_EPS).square()
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
