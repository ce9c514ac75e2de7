use std::f64::consts::SQRT_2;

use super::layers::{minibatch_stddev, one_hot, EqConv2d, EqLinear, Layout, ParamSet, SnlLayer, LRELU_SLOPE, MBSTD_EPS};
use super::{check_bound, check_labels, FadeState, NetworkError, NetworkSpec};
use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
struct Block {
    conv1: EqConv2d,
    conv2: EqConv2d,
    attention: Option<SnlLayer>,
}

/// Conditional progressive critic.
///
/// The one-hot label is broadcast to constant planes and concatenated with
/// the RGB input of every from-RGB projection. Each stage runs
/// `conv -> conv -> [SNL] -> downsample`; the 4x4 head appends the minibatch
/// standard deviation channel before its conv and two dense layers.
#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: NetworkSpec,
    layout: Layout,
    from_rgb: Vec<EqConv2d>,
    blocks: Vec<Block>,
    head_conv: EqConv2d,
    head_dense: EqLinear,
    head_out: EqLinear,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut layout = Layout::default();
        let k = spec.n_classes;
        let from_rgb = spec
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| EqConv2d::new(&mut layout, &format!("d.s{s}.from_rgb"), 3 + k, st.channels, 1, SQRT_2))
            .collect();
        let mut blocks = Vec::new();
        for s in 1..spec.stages.len() {
            let (cin, cout) = (spec.stages[s].channels, spec.stages[s - 1].channels);
            let conv1 = EqConv2d::new(&mut layout, &format!("d.s{s}.conv1"), cin, cin, 3, SQRT_2);
            let conv2 = EqConv2d::new(&mut layout, &format!("d.s{s}.conv2"), cin, cout, 3, SQRT_2);
            let attention = (spec.stages[s].has_attention && spec.attention_in_discriminator)
                .then(|| SnlLayer::new(&mut layout, &format!("d.s{s}.attn"), cout));
            blocks.push(Block { conv1, conv2, attention });
        }
        let c0 = spec.stages[0].channels;
        let head_conv = EqConv2d::new(&mut layout, "d.s0.conv", c0 + 1, c0, 3, SQRT_2);
        let head_dense = EqLinear::new(&mut layout, "d.s0.dense", c0 * 16, c0, SQRT_2);
        let head_out = EqLinear::new(&mut layout, "d.s0.out", c0, 1, 1.0);
        Ok(Discriminator {
            spec: spec.clone(),
            layout,
            from_rgb,
            blocks,
            head_conv,
            head_dense,
            head_out,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Layer sequence of the full-resolution path, for structural checks.
    pub fn describe(&self) -> Vec<String> {
        let top = self.blocks.len();
        let mut ops = vec![format!("s{top}.from_rgb")];
        for s in (1..=top).rev() {
            let b = &self.blocks[s - 1];
            ops.push(format!("s{s}.conv1"));
            ops.push(format!("s{s}.conv2"));
            if b.attention.is_some() {
                ops.push(format!("s{s}.attention"));
            }
            ops.push(format!("s{s}.downsample"));
        }
        ops.extend(["s0.minibatch_stddev", "s0.conv", "s0.dense", "s0.out"].map(String::from));
        ops
    }

    #[allow(clippy::wrong_self_convention)]
    fn from_rgb<T: Real>(&self, p: &[Var<T>], stage: usize, img: &Var<T>, labels: &[usize]) -> Var<T> {
        let s = img.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let k = self.spec.n_classes;
        let planes = one_hot::<T>(labels, k).reshape(&[n, k, 1, 1]).broadcast_to(&[n, k, h, w]);
        let x = Var::concat(&[img.clone(), Var::constant(planes)], 1);
        self.from_rgb[stage].forward(p, &x).leaky_relu(LRELU_SLOPE)
    }

    fn block<T: Real>(&self, p: &[Var<T>], stage: usize, h: &Var<T>) -> Var<T> {
        let b = &self.blocks[stage - 1];
        let mut h = b.conv1.forward(p, h).leaky_relu(LRELU_SLOPE);
        h = b.conv2.forward(p, &h).leaky_relu(LRELU_SLOPE);
        if let Some(a) = &b.attention {
            h = a.forward(p, &h);
        }
        h.downsample2x()
    }

    /// Critic scores `[N]` for images `[N,3,r,r]` at the active stage.
    pub fn forward<T: Real>(
        &self,
        p: &[Var<T>],
        images: &Var<T>,
        labels: &[usize],
        fade: FadeState,
    ) -> Result<Var<T>, NetworkError> {
        check_bound(&self.layout, p)?;
        fade.check(&self.spec)?;
        check_labels(labels, self.spec.n_classes)?;
        let s = fade.stage_index;
        let res = self.spec.stages[s].resolution;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(NetworkError::Structure(format!(
                "expected [N,3,H,W] images, got {shape:?}"
            )));
        }
        if shape[2] != res as usize || shape[3] != res as usize {
            return Err(NetworkError::Resolution {
                expected: res,
                actual_h: shape[2],
                actual_w: shape[3],
            });
        }
        if shape[0] != labels.len() {
            return Err(NetworkError::Structure(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        let n = labels.len();
        let mut h = if s == 0 {
            self.from_rgb(p, 0, images, labels)
        } else {
            let new = || self.block(p, s, &self.from_rgb(p, s, images, labels));
            let old = || self.from_rgb(p, s - 1, &images.downsample2x(), labels);
            if fade.alpha >= 1.0 {
                new()
            } else if fade.alpha <= 0.0 {
                old()
            } else {
                old().scale(1.0 - fade.alpha).add(&new().scale(fade.alpha))
            }
        };
        for t in (1..s).rev() {
            h = self.block(p, t, &h);
        }
        let h = minibatch_stddev(&h, MBSTD_EPS);
        let h = self.head_conv.forward(p, &h).leaky_relu(LRELU_SLOPE);
        let c0 = self.spec.stages[0].channels;
        let h = h.reshape(&[n, c0 * 16]);
        let h = self.head_dense.forward(p, &h).leaky_relu(LRELU_SLOPE);
        Ok(self.head_out.forward(p, &h).reshape(&[n]))
    }

    /// Non-differentiable scoring.
    pub fn score<T: Real>(
        &self,
        params: &ParamSet<T>,
        images: &Tensor<T>,
        labels: &[usize],
        fade: FadeState,
    ) -> Result<Tensor<T>, NetworkError> {
        self.layout.check(params)?;
        let out = self.forward(&params.bind_const(), &Var::constant(images.clone()), labels, fade)?;
        Ok(out.value().clone())
    }
}
