//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written in terms of differentiable [`Var`]
//! operations, so gradients can be differentiated again (`create_graph`).
//! The gradient penalty of the critic loss relies on this.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Real, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<T> = Box<dyn Fn(&[Var<T>], &Var<T>) -> Vec<Option<Var<T>>>>;

struct Node<T: Real> {
    id: u64,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in the computation graph. Cheap to clone.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> Var<T> {
    fn make(value: Rc<Tensor<T>>, requires_grad: bool, parents: Vec<Var<T>>, backward: Option<BackwardFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A value that is never differentiated.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(Rc::new(value), false, Vec::new(), None)
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(Rc::new(value), true, Vec::new(), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&[Var<T>], &Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(Rc::new(value), true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(Rc::clone(&self.0.value), false, Vec::new(), None)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().zip_with(other.value(), |a, b| a + b);
        Var::from_op(v, vec![self.clone(), other.clone()], |p, g| {
            vec![Some(g.sum_to(p[0].shape())), Some(g.sum_to(p[1].shape()))]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().zip_with(other.value(), |a, b| a - b);
        Var::from_op(v, vec![self.clone(), other.clone()], |p, g| {
            vec![
                Some(g.sum_to(p[0].shape())),
                Some(g.neg().sum_to(p[1].shape())),
            ]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().zip_with(other.value(), |a, b| a * b);
        Var::from_op(v, vec![self.clone(), other.clone()], |p, g| {
            vec![
                Some(g.mul(&p[1]).sum_to(p[0].shape())),
                Some(g.mul(&p[0]).sum_to(p[1].shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        self.mul(&other.powf(-1.0))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, k: f64) -> Var<T> {
        let kt = T::c(k);
        let v = self.value().map(|a| a * kt);
        Var::from_op(v, vec![self.clone()], move |_, g| vec![Some(g.scale(k))])
    }

    pub fn add_scalar(&self, k: f64) -> Var<T> {
        let kt = T::c(k);
        let v = self.value().map(|a| a + kt);
        Var::from_op(v, vec![self.clone()], |_, g| vec![Some(g.clone())])
    }

    pub fn powf(&self, e: f64) -> Var<T> {
        let et = T::c(e);
        let v = self.value().map(|a| a.powf(et));
        Var::from_op(v, vec![self.clone()], move |p, g| {
            vec![Some(g.mul(&p[0].powf(e - 1.0)).scale(e))]
        })
    }

    pub fn sqrt(&self) -> Var<T> {
        self.powf(0.5)
    }

    pub fn square(&self) -> Var<T> {
        let v = self.value().map(|a| a * a);
        Var::from_op(v, vec![self.clone()], |p, g| vec![Some(g.mul(&p[0]).scale(2.0))])
    }

    pub fn exp(&self) -> Var<T> {
        let v = self.value().map(|a| a.exp());
        Var::from_op(v, vec![self.clone()], |p, g| vec![Some(g.mul(&p[0].exp()))])
    }

    pub fn ln(&self) -> Var<T> {
        let v = self.value().map(|a| a.ln());
        Var::from_op(v, vec![self.clone()], |p, g| vec![Some(g.div(&p[0]))])
    }

    /// `max(x, slope·x)`; the mask is locally constant so higher derivatives vanish.
    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::c(slope);
        let v = self.value().map(|a| if a > T::zero() { a } else { a * s });
        Var::from_op(v, vec![self.clone()], move |p, g| {
            let mask = p[0].value().map(|a| if a > T::zero() { T::one() } else { s });
            vec![Some(g.mul(&Var::constant(mask)))]
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(0.0)
    }

    // ---- shape & reduction -------------------------------------------------

    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().sum_to(shape);
        let full = self.shape().to_vec();
        Var::from_op(v, vec![self.clone()], move |_, g| vec![Some(g.broadcast_to(&full))])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().broadcast_to(shape);
        Var::from_op(v, vec![self.clone()], |p, g| vec![Some(g.sum_to(p[0].shape()))])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().reshape(shape);
        Var::from_op(v, vec![self.clone()], |p, g| vec![Some(g.reshape(p[0].shape()))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let v = self.value().permute(axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Var::from_op(v, vec![self.clone()], move |_, g| vec![Some(g.permute(&inv))])
    }

    pub fn transpose_last(&self) -> Var<T> {
        let n = self.shape().len();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn sum_all(&self) -> Var<T> {
        self.sum_to(&[]).reshape(&[])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axes`; reduced axes are kept with extent 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Var<T> {
        let mut kept = self.shape().to_vec();
        for &a in axes {
            kept[a] = 1;
        }
        let s = self.sum_to(&kept);
        if keepdim {
            s
        } else {
            let squeezed: Vec<usize> = self
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            s.reshape(&squeezed)
        }
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Var<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / n as f64)
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat(&tensors, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(v, parts.to_vec(), move |_, g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&len| {
                    let s = g.narrow(axis, off, len);
                    off += len;
                    Some(s)
                })
                .collect()
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let v = self.value().narrow(axis, start, len);
        let full = self.shape()[axis];
        Var::from_op(v, vec![self.clone()], move |_, g| {
            vec![Some(g.pad_axis(axis, start, full))]
        })
    }

    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var<T> {
        let v = self.value().pad_axis(axis, start, full);
        let len = self.shape()[axis];
        Var::from_op(v, vec![self.clone()], move |_, g| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().matmul(other.value());
        Var::from_op(v, vec![self.clone(), other.clone()], |p, g| {
            vec![
                Some(g.matmul(&p[1].transpose_last())),
                Some(p[0].transpose_last().matmul(g)),
            ]
        })
    }

    pub fn bmm(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().bmm(other.value());
        Var::from_op(v, vec![self.clone(), other.clone()], |p, g| {
            vec![
                Some(g.bmm(&p[1].transpose_last())),
                Some(p[0].transpose_last().bmm(g)),
            ]
        })
    }

    /// Stride-1 convolution of `self: [N,I,H,W]` with `weight: [O,I,k,k]`.
    pub fn conv2d(&self, weight: &Var<T>, pad: usize) -> Var<T> {
        let k = weight.shape()[2];
        assert!(pad < k, "conv2d padding {pad} must be smaller than kernel {k}");
        let v = self.value().conv2d(weight.value(), pad);
        Var::from_op(v, vec![self.clone(), weight.clone()], move |p, g| {
            vec![
                Some(g.conv2d(&p[1].flip_transpose(), k - 1 - pad)),
                Some(p[0].conv2d_weight_grad(g, pad, k)),
            ]
        })
    }

    fn conv2d_weight_grad(&self, g: &Var<T>, pad: usize, k: usize) -> Var<T> {
        let v = self.value().conv2d_weight_grad(g.value(), pad, k);
        Var::from_op(v, vec![self.clone(), g.clone()], move |p, h| {
            vec![
                Some(p[1].conv2d(&h.flip_transpose(), k - 1 - pad)),
                Some(p[0].conv2d(h, pad)),
            ]
        })
    }

    pub fn flip_transpose(&self) -> Var<T> {
        let v = self.value().flip_transpose();
        Var::from_op(v, vec![self.clone()], |_, g| vec![Some(g.flip_transpose())])
    }

    pub fn upsample2x(&self) -> Var<T> {
        let v = self.value().upsample2x();
        Var::from_op(v, vec![self.clone()], |_, g| vec![Some(g.downsample2x().scale(4.0))])
    }

    pub fn downsample2x(&self) -> Var<T> {
        let v = self.value().downsample2x();
        Var::from_op(v, vec![self.clone()], |_, g| vec![Some(g.upsample2x().scale(0.25))])
    }

    // ---- composites --------------------------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the (constant) max.
    pub fn softmax(&self, axis: usize) -> Var<T> {
        let m = Var::constant(self.value().max_axis_keepdim(axis));
        let e = self.sub(&m).exp();
        let s = e.sum_axes(&[axis], true);
        e.div(&s)
    }

    pub fn log_softmax(&self, axis: usize) -> Var<T> {
        let m = Var::constant(self.value().max_axis_keepdim(axis));
        let shifted = self.sub(&m);
        let lse = shifted.exp().sum_axes(&[axis], true).ln();
        shifted.sub(&lse)
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs the output does not depend on get zero gradients.
pub fn grad<T: Real>(output: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(
        output.value().len(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let order = topo_order(output);
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    }
    for node in order.iter().rev() {
        let Some(backward) = node.0.backward.as_ref() else {
            continue;
        };
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let parents: Vec<Var<T>> = if create_graph {
            node.0.parents.clone()
        } else {
            node.0.parents.iter().map(|p| p.detach()).collect()
        };
        let g = if create_graph { g } else { g.detach() };
        let pgrads = backward(&parents, &g);
        debug_assert_eq!(pgrads.len(), parents.len());
        for (parent, pg) in node.0.parents.iter().zip(pgrads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }
    wrt.iter()
        .map(|w| {
            let g = grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())));
            if create_graph {
                g
            } else {
                g.detach()
            }
        })
        .collect()
}

fn topo_order<T: Real>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited: HashMap<u64, ()> = HashMap::new();
    // (node, expanded?)
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if visited.insert(node.id(), ()).is_some() {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.0.parents {
            if p.requires_grad() && !visited.contains_key(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: &[usize], v: &[f64]) -> Var<f64> {
        Var::leaf(Tensor::from_f64(shape, v))
    }

    fn fd<F: Fn(&Tensor<f64>) -> f64>(x: &Tensor<f64>, f: F) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn product_rule_and_broadcast() {
        let a = leaf(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = leaf(&[3], &[0.5, -1., 2.]);
        let y = a.mul(&b).sum_all();
        let g = grad(&y, &[a.clone(), b.clone()], false);
        assert_eq!(g[0].value().data(), &[0.5, -1., 2., 0.5, -1., 2.]);
        assert_eq!(g[1].value().data(), &[5., 7., 9.]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let xs: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let ws: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
        let x = leaf(&[2, 2, 4, 4], &xs);
        let w = leaf(&[3, 2, 3, 3], &ws);
        let loss = |x: &Var<f64>, w: &Var<f64>| x.conv2d(w, 1).square().sum_all();
        let g = grad(&loss(&x, &w), &[x.clone(), w.clone()], false);
        let wc = w.detach();
        let num_x = fd(x.value(), |t| loss(&Var::constant(t.clone()), &wc).value().item());
        assert_close(g[0].value().data(), &num_x, 1e-6);
        let xc = x.detach();
        let num_w = fd(w.value(), |t| loss(&xc, &Var::constant(t.clone())).value().item());
        assert_close(g[1].value().data(), &num_w, 1e-6);
    }

    #[test]
    fn double_backward_through_conv() {
        // h(w) = || d/dx sum(tanh-free conv(x,w)^2) ||^2, differentiated w.r.t. w.
        let xs: Vec<f64> = (0..2 * 3 * 3).map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0).collect();
        let ws: Vec<f64> = (0..2 * 2 * 9).map(|i| ((i * 5 % 11) as f64 - 5.0) / 9.0).collect();
        let penalty = |w: &Var<f64>| {
            let x = Var::leaf(Tensor::from_f64(&[1, 2, 3, 3], &xs));
            let out = x.conv2d(w, 1).leaky_relu(0.2).square().sum_all();
            let gx = grad(&out, &[x], true).remove(0);
            gx.square().sum_all()
        };
        let w = leaf(&[2, 2, 3, 3], &ws);
        let g = grad(&penalty(&w), std::slice::from_ref(&w), false).remove(0);
        let num = fd(w.value(), |t| penalty(&Var::constant(t.clone())).value().item());
        assert_close(g.value().data(), &num, 1e-5);
    }

    #[test]
    fn softmax_and_matmul_gradients() {
        let a = leaf(&[2, 3], &[0.1, -0.4, 0.3, 1.2, 0.0, -0.7]);
        let b = leaf(&[3, 2], &[0.5, 0.2, -0.3, 0.8, 0.1, -0.6]);
        let loss = |a: &Var<f64>, b: &Var<f64>| {
            a.matmul(b).softmax(1).mul(&Var::constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]))).sum_all()
        };
        let g = grad(&loss(&a, &b), &[a.clone(), b.clone()], false);
        let bc = b.detach();
        let num = fd(a.value(), |t| loss(&Var::constant(t.clone()), &bc).value().item());
        assert_close(g[0].value().data(), &num, 1e-6);
        let ac = a.detach();
        let num = fd(b.value(), |t| loss(&ac, &Var::constant(t.clone())).value().item());
        assert_close(g[1].value().data(), &num, 1e-6);
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let a = leaf(&[2], &[1., 2.]);
        let b = leaf(&[3], &[1., 2., 3.]);
        let g = grad(&a.square().sum_all(), &[b], false);
        assert_eq!(g[0].value().data(), &[0., 0., 0.]);
    }

    #[test]
    fn constant_ops_do_not_build_a_graph() {
        let a = Var::constant(Tensor::<f64>::ones(&[3]));
        let y = a.exp().mul(&a).sum_all();
        assert!(!y.requires_grad());
    }
}
