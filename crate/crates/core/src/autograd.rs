//! A small reverse-mode autodiff tape over NCHW tensors.
//!
//! Every forward computation records one node per operation. `backward`
//! walks the nodes in reverse creation order, so gradient accumulation order
//! is fixed and results are bit-reproducible.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::Result;
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::vdvae::dmol;
use crate::vdvae::gaussian::{kl_elem, kl_elem_grad};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddBatchBroadcast { x: Var, bias: Var },
    BroadcastBatch { x: Var },
    ScaleBy { x: Var, alpha: Var },
    MulConst { x: Var, c: T },
    Gelu(Var),
    Clamp { x: Var, lo: T, hi: T },
    AvgPool { x: Var, factor: usize },
    Upsample { x: Var, factor: usize },
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Reparam { mean: Var, log_std: Var, eps: Tensor<T> },
    KlSum { qm: Var, qls: Var, pm: Var, pls: Var },
    DmolLogLik { params: Var, target: Tensor<T>, components: usize },
    Sum(Vec<Var>),
    MaxConst { x: Var, c: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients but is not a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for parameter `name`, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.variable(store.get(name)?.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradients of every parameter leaf touched by this tape, by name.
    /// Parameters that did not influence the output get zero gradients.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Conv2d { x, w, b }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `x + bias` where `bias` has batch size 1.
    pub fn add_batch_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (n, c, h, w) = vx.dims4();
        assert_eq!(vb.shape(), &[1, c, h, w], "bias shape mismatch");
        let sz = c * h * w;
        let mut data = vx.data().to_vec();
        for i in 0..n {
            for (d, &b) in data[i * sz..(i + 1) * sz].iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::AddBatchBroadcast { x, bias }, &[x, bias])
    }

    /// Repeat a batch-1 tensor `n` times along the batch axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let items: Vec<_> = (0..n).map(|_| v.clone()).collect();
        let out = Tensor::stack_batch(&items);
        self.push(out, Op::BroadcastBatch { x }, &[x])
    }

    /// `alpha * x` for a one-element `alpha`.
    pub fn scale_by(&mut self, x: Var, alpha: Var) -> Var {
        let a = self.value(alpha).item();
        let out = self.value(x).map(|v| a * v);
        self.push(out, Op::ScaleBy { x, alpha }, &[x, alpha])
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::MulConst { x, c }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = kernels::avg_pool(self.value(x), factor);
        self.push(out, Op::AvgPool { x, factor }, &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = kernels::upsample_nearest(self.value(x), factor);
        self.push(out, Op::Upsample { x, factor }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let out = kernels::concat_channels(self.value(a), self.value(b));
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = kernels::slice_channels(self.value(x), start, end);
        self.push(out, Op::Slice { x, start }, &[x])
    }

    /// `mean + exp(log_std) * eps` with `eps` held constant.
    pub fn reparam(&mut self, mean: Var, log_std: Var, eps: Tensor<T>) -> Var {
        let (m, s) = (self.value(mean), self.value(log_std));
        assert_eq!(m.shape(), s.shape());
        assert_eq!(m.shape(), eps.shape());
        let data = m
            .data()
            .iter()
            .zip(s.data())
            .zip(eps.data())
            .map(|((&mu, &ls), &e)| mu + ls.exp() * e)
            .collect();
        let out = Tensor::new(m.shape().to_vec(), data);
        self.push(out, Op::Reparam { mean, log_std, eps }, &[mean, log_std])
    }

    /// Summed elementwise KL between diagonal Gaussians, as a one-element tensor.
    pub fn kl_sum(&mut self, qm: Var, qls: Var, pm: Var, pls: Var) -> Var {
        let shape = self.value(qm).shape().to_vec();
        for v in [qls, pm, pls] {
            assert_eq!(self.value(v).shape(), &shape[..], "KL operand shape mismatch");
        }
        let mut total = T::zero();
        let (a, b, c, d) = (
            self.value(qm).data(),
            self.value(qls).data(),
            self.value(pm).data(),
            self.value(pls).data(),
        );
        for i in 0..a.len() {
            total += kl_elem(a[i], b[i], c[i], d[i]);
        }
        self.push(Tensor::scalar(total), Op::KlSum { qm, qls, pm, pls }, &[qm, qls, pm, pls])
    }

    /// Summed discretized-logistic-mixture log-likelihood of `target`.
    pub fn dmol_log_likelihood(&mut self, params: Var, target: Tensor<T>, components: usize) -> Var {
        let ll = dmol::log_likelihood(self.value(params), &target, components);
        self.push(
            Tensor::scalar(ll),
            Op::DmolLogLik {
                params,
                target,
                components,
            },
            &[params],
        )
    }

    /// Sum of one-element tensors.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut total = T::zero();
        for &x in xs {
            total += self.value(x).item();
        }
        self.push(Tensor::scalar(total), Op::Sum(xs.to_vec()), xs)
    }

    /// `max(x, c)` for a one-element `x`; the gradient is zero below `c`.
    pub fn max_const(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).item().max(c);
        self.push(Tensor::scalar(v), Op::MaxConst { x, c }, &[x])
    }

    /// Reverse pass from a one-element output, seeded with gradient 1.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                let shape = self.value(*b).shape().to_vec();
                acc(*b, db.reshape(shape));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBatchBroadcast { x, bias } => {
                acc(*x, g.clone());
                acc(*bias, sum_batch(g));
            }
            Op::BroadcastBatch { x } => acc(*x, sum_batch(g)),
            Op::ScaleBy { x, alpha } => {
                let a = self.value(*alpha).item();
                let dot: T = g.data().iter().zip(self.value(*x).data()).map(|(&p, &q)| p * q).sum();
                acc(*x, g.map(|v| a * v));
                let shape = self.value(*alpha).shape().to_vec();
                acc(*alpha, Tensor::new(shape, vec![dot]));
            }
            Op::MulConst { x, c } => acc(*x, g.map(|v| *c * v)),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * kernels::gelu_grad(v))
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v < *lo || v > *hi { T::zero() } else { gv })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data));
            }
            Op::AvgPool { x, factor } => acc(*x, kernels::avg_pool_backward(g, *factor)),
            Op::Upsample { x, factor } => acc(*x, kernels::upsample_nearest_backward(g, *factor)),
            Op::Concat(a, b) => {
                let ca = self.value(*a).dims4().1;
                let c = g.dims4().1;
                acc(*a, kernels::slice_channels(g, 0, ca));
                acc(*b, kernels::slice_channels(g, ca, c));
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let gc = g.dims4().1;
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..n {
                    let dst = &mut dx.data_mut()[(i * c + start) * hw..(i * c + start + gc) * hw];
                    dst.copy_from_slice(&g.data()[i * gc * hw..(i + 1) * gc * hw]);
                }
                acc(*x, dx);
            }
            Op::Reparam { mean, log_std, eps } => {
                let s = self.value(*log_std);
                let data = g
                    .data()
                    .iter()
                    .zip(s.data())
                    .zip(eps.data())
                    .map(|((&gv, &ls), &e)| gv * ls.exp() * e)
                    .collect();
                acc(*mean, g.clone());
                acc(*log_std, Tensor::new(s.shape().to_vec(), data));
            }
            Op::KlSum { qm, qls, pm, pls } => {
                let up = g.item();
                let (a, b, c, d) = (
                    self.value(*qm),
                    self.value(*qls),
                    self.value(*pm),
                    self.value(*pls),
                );
                let shape = a.shape().to_vec();
                let n = a.len();
                let mut out: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
                for i in 0..n {
                    let gr = kl_elem_grad(a.data()[i], b.data()[i], c.data()[i], d.data()[i]);
                    for (o, gv) in out.iter_mut().zip(gr) {
                        o.push(up * gv);
                    }
                }
                let [o0, o1, o2, o3] = out;
                acc(*qm, Tensor::new(shape.clone(), o0));
                acc(*qls, Tensor::new(shape.clone(), o1));
                acc(*pm, Tensor::new(shape.clone(), o2));
                acc(*pls, Tensor::new(shape, o3));
            }
            Op::DmolLogLik {
                params,
                target,
                components,
            } => {
                let d = dmol::log_likelihood_grad(self.value(*params), target, *components, g.item());
                acc(*params, d);
            }
            Op::Sum(xs) => {
                for &x in xs {
                    acc(x, g.clone());
                }
            }
            Op::MaxConst { x, c } => {
                let pass = self.value(*x).item() >= *c;
                acc(*x, if pass { g.clone() } else { Tensor::zeros(g.shape()) });
            }
        }
    }
}

fn sum_batch<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = g.dims4();
    let sz = c * h * w;
    let mut out = vec![T::zero(); sz];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(&g.data()[i * sz..(i + 1) * sz]) {
            *o += v;
        }
    }
    Tensor::new(vec![1, c, h, w], out)
}
