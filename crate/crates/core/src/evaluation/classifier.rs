use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autograd::{grad, Var};
use crate::data::{normalize_for_classifier, resize_area, LabeledDataset, Provenance};
use crate::networks::layers::Init;
use crate::networks::{one_hot, Layout, ParamSet};
use crate::tensor::Tensor;

/// Classifier family. Only the compact convolutional network ships; the enum
/// is the slot where a deeper model would plug in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Architecture {
    /// `blocks` x (3x3 conv, ReLU, 2x2 average pool), global average pool,
    /// linear head. Widths start at `width` and double per block up to `4 * width`.
    Compact { blocks: usize, width: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Compact { blocks: 4, width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub input_resolution: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            architecture: Architecture::default(),
            epochs: 50,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 64,
            input_resolution: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if self.input_resolution < 4 {
            bad.push(format!("input_resolution {} must be >= 4", self.input_resolution));
        }
        let Architecture::Compact { blocks, width } = self.architecture;
        if blocks == 0 || width == 0 {
            bad.push("architecture blocks and width must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Config(bad.join("; ")))
        }
    }
}

/// Anything that maps images to class predictions.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn predict(&self, ds: &LabeledDataset) -> Vec<usize>;
}

/// Always predicts the same class; the degenerate reference model.
pub struct ConstantClassifier {
    pub class: usize,
    pub n_classes: usize,
}

impl Classifier for ConstantClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict(&self, ds: &LabeledDataset) -> Vec<usize> {
        vec![self.class; ds.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub n: usize,
}

pub fn accuracy(model: &dyn Classifier, ds: &LabeledDataset) -> Accuracy {
    let pred = model.predict(ds);
    let k = model.n_classes().max(ds.n_classes());
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (p, &l) in pred.iter().zip(ds.labels()) {
        tot[l] += 1;
        if *p == l {
            hit[l] += 1;
        }
    }
    let n = ds.len();
    Accuracy {
        overall: if n == 0 {
            0.0
        } else {
            hit.iter().sum::<usize>() as f64 / n as f64
        },
        per_class: hit
            .iter()
            .zip(&tot)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        n,
    }
}

#[derive(Debug, Clone)]
struct Net {
    layout: Layout,
    convs: Vec<(usize, usize)>,
    head: (usize, usize),
    input_resolution: usize,
    n_classes: usize,
}

impl Net {
    fn new(arch: Architecture, input_resolution: usize, n_classes: usize) -> Self {
        let Architecture::Compact { blocks, width } = arch;
        let mut layout = Layout::default();
        let mut convs = Vec::new();
        let mut cin = 3;
        for b in 0..blocks {
            let cout = (width << b).min(4 * width);
            let w = layout.add(format!("c.b{b}.w"), &[cout, cin, 3, 3], Init::Normal);
            let bias = layout.add(format!("c.b{b}.b"), &[1, cout, 1, 1], Init::Zeros);
            convs.push((w, bias));
            cin = cout;
        }
        let w = layout.add("c.head.w", &[n_classes, cin], Init::Normal);
        let b = layout.add("c.head.b", &[n_classes], Init::Zeros);
        Net {
            layout,
            convs,
            head: (w, b),
            input_resolution,
            n_classes,
        }
    }

    /// He-normal weights, zero biases.
    fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet<f32> {
        let mut p = self.layout.init::<f32>(rng);
        for (spec, t) in self.layout.specs().iter().zip(p.tensors_mut()) {
            if spec.init == Init::Normal {
                let fan_in: usize = spec.shape[1..].iter().product();
                let s = (2.0 / fan_in as f64).sqrt() as f32;
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        p
    }

    fn logits(&self, p: &[Var<f32>], x: &Var<f32>) -> Var<f32> {
        let mut h = x.clone();
        for &(w, b) in &self.convs {
            h = h.conv2d(&p[w], 1).add(&p[b]).relu();
            if h.shape()[2] >= 2 && h.shape()[2].is_multiple_of(2) {
                h = h.downsample2x();
            }
        }
        let n = h.shape()[0];
        let c = h.shape()[1];
        let pooled = h.mean_axes(&[2, 3], false).reshape(&[n, c]);
        pooled.matmul(&p[self.head.0].transpose_last()).add(&p[self.head.1])
    }
}

/// Images resized to the input resolution and normalized, `[N,3,r,r]`.
pub(crate) fn prepare(ds: &LabeledDataset, resolution: usize) -> Tensor<f32> {
    let per = 3 * resolution * resolution;
    let mut data = Vec::with_capacity(ds.len() * per);
    for im in ds.images() {
        let t = if im.height() == resolution && im.width() == resolution {
            normalize_for_classifier::<f32>(im)
        } else {
            normalize_for_classifier::<f32>(&resize_area(im, resolution))
        };
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![ds.len(), 3, resolution, resolution], data)
}

fn gather(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// A trained compact classifier plus its training record.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    net: Net,
    params: ParamSet<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_history: Vec<f64>,
    /// Provenance tags of every image the model was fitted on.
    pub seen: BTreeSet<Provenance>,
    pub n_train: usize,
}

impl TrainedClassifier {
    fn predict_tensor(&self, x: &Tensor<f32>) -> Vec<usize> {
        predict_with(&self.net, &self.params, x)
    }
}

fn predict_with(net: &Net, params: &ParamSet<f32>, x: &Tensor<f32>) -> Vec<usize> {
    let n = x.shape()[0];
    let k = net.n_classes;
    let pc = params.bind_const();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let logits = net.logits(&pc, &Var::constant(gather(x, &idx)));
        for row in logits.value().data().chunks(k) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    out
}

impl Classifier for TrainedClassifier {
    fn n_classes(&self) -> usize {
        self.net.n_classes
    }

    fn predict(&self, ds: &LabeledDataset) -> Vec<usize> {
        self.predict_tensor(&prepare(ds, self.net.input_resolution))
    }
}

/// Momentum SGD on softmax cross-entropy; keeps the parameters of the epoch
/// with the best validation accuracy (earliest on ties).
pub fn train_classifier(
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &ClassifierConfig,
) -> Result<TrainedClassifier, EvalError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(EvalError::Data("classifier train and validation sets must be non-empty".into()));
    }
    if train.class_names() != val.class_names() {
        return Err(EvalError::Data("train and validation class spaces differ".into()));
    }
    if let Some(c) = train.class_histogram().iter().position(|&n| n == 0) {
        return Err(EvalError::MissingClass(train.class_names()[c].clone()));
    }
    let k = train.n_classes();
    let net = Net::new(cfg.architecture, cfg.input_resolution, k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.init(&mut rng);
    let mut velocity: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let xs = prepare(train, cfg.input_resolution);
    let xv = prepare(val, cfg.input_resolution);
    let targets: Tensor<f32> = one_hot(train.labels(), k);
    let (lr, mu) = (cfg.lr as f32, cfg.momentum as f32);
    let mut best = (params.clone(), 0, -1.0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let leaves = params.bind();
            let logits = net.logits(&leaves, &Var::constant(gather(&xs, batch)));
            let y = Var::constant(gather(&targets, batch));
            let loss = logits.log_softmax(1).mul(&y).sum_all().scale(-1.0 / batch.len() as f64);
            let grads = grad(&loss, &leaves, false);
            for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vel), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.value().data()) {
                    *vel = mu * *vel + gi;
                    *w -= lr * *vel;
                }
            }
        }
        let pred = predict_with(&net, &params, &xv);
        let acc = pred.iter().zip(val.labels()).filter(|(p, l)| p == l).count() as f64 / val.len() as f64;
        history.push(acc);
        if acc > best.2 {
            best = (params.clone(), epoch, acc);
        }
    }
    Ok(TrainedClassifier {
        net,
        params: best.0,
        best_epoch: best.1,
        best_val_accuracy: best.2,
        val_history: history,
        seen: train.provenance().iter().copied().collect(),
        n_train: train.len(),
    })
}
