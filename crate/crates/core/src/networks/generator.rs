use std::f64::consts::SQRT_2;

use super::layers::{one_hot, pixel_norm, EqConv2d, EqLinear, Layout, ParamSet, SnlLayer, LRELU_SLOPE, PIXEL_NORM_EPS};
use super::{check_bound, check_labels, FadeState, LatentCode, NetworkError, NetworkSpec};
use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
struct Block {
    attention: Option<SnlLayer>,
    conv1: EqConv2d,
    conv2: EqConv2d,
}

/// Conditional progressive generator.
///
/// `[z ; one_hot(label)] -> pixel_norm -> dense 4x4 -> conv` then, per stage,
/// `upsample -> [SNL] -> conv -> conv`, each conv followed by leaky ReLU and
/// pixel norm. Every stage owns a 1x1 to-RGB projection.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: NetworkSpec,
    layout: Layout,
    latent: EqLinear,
    conv0: EqConv2d,
    blocks: Vec<Block>,
    to_rgb: Vec<EqConv2d>,
}

impl Generator {
    pub fn new(spec: &NetworkSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut layout = Layout::default();
        let c0 = spec.stages[0].channels;
        let latent = EqLinear::new(
            &mut layout,
            "g.s0.dense",
            spec.latent_dim + spec.n_classes,
            c0 * 16,
            SQRT_2 / 4.0,
        );
        let conv0 = EqConv2d::new(&mut layout, "g.s0.conv", c0, c0, 3, SQRT_2);
        let mut blocks = Vec::new();
        for s in 1..spec.stages.len() {
            let (cin, cout) = (spec.stages[s - 1].channels, spec.stages[s].channels);
            let attention = (spec.stages[s].has_attention && spec.attention_in_generator)
                .then(|| SnlLayer::new(&mut layout, &format!("g.s{s}.attn"), cin));
            let conv1 = EqConv2d::new(&mut layout, &format!("g.s{s}.conv1"), cin, cout, 3, SQRT_2);
            let conv2 = EqConv2d::new(&mut layout, &format!("g.s{s}.conv2"), cout, cout, 3, SQRT_2);
            blocks.push(Block { attention, conv1, conv2 });
        }
        let to_rgb = spec
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| EqConv2d::new(&mut layout, &format!("g.s{s}.to_rgb"), st.channels, 3, 1, 1.0))
            .collect();
        Ok(Generator {
            spec: spec.clone(),
            layout,
            latent,
            conv0,
            blocks,
            to_rgb,
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
        let mut ops = vec!["s0.dense".to_string(), "s0.conv".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            let s = i + 1;
            ops.push(format!("s{s}.upsample"));
            if b.attention.is_some() {
                ops.push(format!("s{s}.attention"));
            }
            ops.push(format!("s{s}.conv1"));
            ops.push(format!("s{s}.conv2"));
        }
        ops.push(format!("s{}.to_rgb", self.blocks.len()));
        ops
    }

    fn act<T: Real>(x: &Var<T>) -> Var<T> {
        pixel_norm(&x.leaky_relu(LRELU_SLOPE), PIXEL_NORM_EPS)
    }

    fn features<T: Real>(&self, p: &[Var<T>], z: &Var<T>, labels: &[usize], upto: usize) -> Vec<Var<T>> {
        let n = labels.len();
        let c0 = self.spec.stages[0].channels;
        let cond = Var::constant(one_hot::<T>(labels, self.spec.n_classes));
        let x = Var::concat(&[z.clone(), cond], 1);
        let x = pixel_norm(&x, PIXEL_NORM_EPS);
        let h = self.latent.forward(p, &x).reshape(&[n, c0, 4, 4]);
        let h = Self::act(&h);
        let mut h = Self::act(&self.conv0.forward(p, &h));
        let mut feats = vec![h.clone()];
        for b in &self.blocks[..upto] {
            h = h.upsample2x();
            if let Some(a) = &b.attention {
                h = a.forward(p, &h);
            }
            h = Self::act(&b.conv1.forward(p, &h));
            h = Self::act(&b.conv2.forward(p, &h));
            feats.push(h.clone());
        }
        feats
    }

    /// Images `[N,3,r,r]` at the active stage resolution.
    ///
    /// During a fade the output is `(1-α)·upsample(rgb_{s-1}) + α·rgb_s`;
    /// the endpoints evaluate only the corresponding path.
    pub fn forward<T: Real>(
        &self,
        p: &[Var<T>],
        z: &Var<T>,
        labels: &[usize],
        fade: FadeState,
    ) -> Result<Var<T>, NetworkError> {
        check_bound(&self.layout, p)?;
        fade.check(&self.spec)?;
        check_labels(labels, self.spec.n_classes)?;
        if z.shape() != [labels.len(), self.spec.latent_dim] {
            return Err(NetworkError::Structure(format!(
                "latent batch has shape {:?}, expected [{}, {}]",
                z.shape(),
                labels.len(),
                self.spec.latent_dim
            )));
        }
        let s = fade.stage_index;
        let feats = self.features(p, z, labels, s);
        let new = || self.to_rgb[s].forward(p, &feats[s]);
        if s == 0 || fade.alpha >= 1.0 {
            return Ok(new());
        }
        let old = self.to_rgb[s - 1].forward(p, &feats[s - 1]).upsample2x();
        if fade.alpha <= 0.0 {
            return Ok(old);
        }
        Ok(old.scale(1.0 - fade.alpha).add(&new().scale(fade.alpha)))
    }

    /// Non-differentiable generation from latent codes.
    pub fn generate<T: Real>(
        &self,
        params: &ParamSet<T>,
        codes: &[LatentCode],
        fade: FadeState,
    ) -> Result<Tensor<T>, NetworkError> {
        self.layout.check(params)?;
        let labels: Vec<usize> = codes.iter().map(|c| c.label).collect();
        let mut zs = Vec::with_capacity(codes.len() * self.spec.latent_dim);
        for c in codes {
            if c.z.len() != self.spec.latent_dim {
                return Err(NetworkError::Structure(format!(
                    "latent code of length {}, expected {}",
                    c.z.len(),
                    self.spec.latent_dim
                )));
            }
            zs.extend(c.z.iter().map(|&v| T::c(v)));
        }
        let z = Var::constant(Tensor::new(vec![codes.len(), self.spec.latent_dim], zs));
        Ok(self.forward(&params.bind_const(), &z, &labels, fade)?.value().clone())
    }
}
