//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep simply walks it in reverse.
//! A node may carry a user-registered backward rule which then replaces the
//! op's built-in rule; the spike nonlinearity uses this to install its
//! surrogate derivative.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BnMode, ConvGeom, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward rule: `(grad_out, parent_values, out_value) -> grad per parent`.
pub type BackwardFn<S> =
    Box<dyn Fn(&Tensor<S>, &[&Tensor<S>], &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>>>;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<S> {
    op: &'static str,
    value: Tensor<S>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    is_leaf: bool,
}

/// Gradient tape. Single writer; backward may run once.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    recording: bool,
    custom: HashMap<usize, BackwardFn<S>>,
    consumed: bool,
}

/// Result of a backward sweep: gradients of every leaf that required one.
pub struct Gradients<S> {
    grads: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.remove(&v.0)
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// Tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            custom: HashMap::new(),
            consumed: false,
        }
    }

    /// Forward-only evaluation: values are kept, no backward rules stored.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            op: "constant",
            value: t,
            parents: vec![],
            backward: None,
            requires_grad: false,
            is_leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            op: "param",
            value: t,
            parents: vec![],
            backward: None,
            requires_grad: self.recording,
            is_leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        parents: &[Var],
        backward: impl Fn(&Tensor<S>, &[&Tensor<S>], &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>>
            + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad =
            self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            is_leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Replace the built-in backward rule of `v` with `rule`.
    pub fn set_custom_grad(&mut self, v: Var, rule: BackwardFn<S>) {
        if self.nodes[v.0].requires_grad {
            self.custom.insert(v.0, rule);
        }
    }

    pub fn has_custom_grad(&self, v: Var) -> bool {
        self.custom.contains_key(&v.0)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::Tape("backward already run on this tape".into()));
        }
        if !self.recording {
            return Err(Error::Tape("tape is in inference mode".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::arg(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), S::one()));
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.is_leaf {
                out.insert(i, g);
                continue;
            }
            let parent_vals: Vec<&Tensor<S>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let rule = match self.custom.get(&i) {
                Some(r) => r,
                None => node.backward.as_ref().expect("recorded node without rule"),
            };
            let pg = rule(&g, &parent_vals, &node.value)?;
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if gp.shape() != self.nodes[p].value.shape() {
                    return Err(Error::Tape(format!(
                        "{} produced gradient {:?} for input {:?}",
                        node.op,
                        gp.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, &[a, b], |g, _, _| Ok(vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, &[a, b], |g, _, _| {
            Ok(vec![Some(g.clone()), Some(g.map(|x| -x))])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, &[a, b], |g, p, _| {
            Ok(vec![
                Some(g.zip_map(p[1], |g, y| g * y)?),
                Some(g.zip_map(p[0], |g, x| g * x)?),
            ])
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push("div", v, &[a, b], |g, p, out| {
            let ga = g.zip_map(p[1], |g, y| g / y)?;
            let q = out.zip_map(p[1], |o, y| o / y)?;
            let gb = g.zip_map(&q, |g, q| -g * q)?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::of(c);
        let v = self.value(a).map(|x| x * cs);
        self.push("scale", v, &[a], move |g, _, _| Ok(vec![Some(g.map(|x| x * cs))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::of(c);
        let v = self.value(a).map(|x| x + cs);
        self.push("add_scalar", v, &[a], |g, _, _| Ok(vec![Some(g.clone())]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push("exp", v, &[a], |g, _, out| Ok(vec![Some(g.zip_map(out, |g, o| g * o)?)]))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        self.push("ln", v, &[a], |g, p, _| Ok(vec![Some(g.zip_map(p[0], |g, x| g / x)?)]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.sqrt());
        self.push("sqrt", v, &[a], |g, _, out| {
            let half = S::of(0.5);
            Ok(vec![Some(g.zip_map(out, |g, o| g * half / o)?)])
        })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, &[a], |g, p, _| {
            let two = S::of(2.0);
            Ok(vec![Some(g.zip_map(p[0], |g, x| g * two * x)?)])
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push("relu", v, &[a], |g, p, _| {
            Ok(vec![Some(g.zip_map(p[0], |g, x| if x > S::zero() { g } else { S::zero() })?)])
        })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { x.exp() - S::one() });
        self.push("elu", v, &[a], |g, p, _| {
            Ok(vec![Some(g.zip_map(p[0], |g, x| if x > S::zero() { g } else { g * x.exp() })?)])
        })
    }

    /// Closed step: 1 where `x >= 0`, else 0. Built-in derivative is zero.
    pub fn heaviside(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x >= S::zero() { S::one() } else { S::zero() });
        self.push("heaviside", v, &[a], |g, _, _| Ok(vec![Some(Tensor::zeros(g.shape()))]))
    }

    /// Smooth step `atan(pi/2 * alpha * x)/pi + 1/2` with its exact derivative.
    pub fn arctan_step(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let k = std::f64::consts::FRAC_PI_2 * alpha;
        let v = self
            .value(a)
            .map(|x| S::of((k * x.as_f64()).atan() / std::f64::consts::PI + 0.5));
        self.push("arctan_step", v, &[a], move |g, p, _| {
            let d = crate::spiking::surrogate_grad_tensor(p[0], alpha);
            Ok(vec![Some(g.zip_map(&d, |g, d| g * d)?)])
        })
    }

    /// Treat `a` as a constant from here on.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---- reductions and layout --------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = S::of(self.value(a).sum_f64());
        self.push("sum", Tensor::scalar(s), &[a], |g, p, _| {
            Ok(vec![Some(Tensor::full(p[0].shape(), g.data()[0]))])
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::arg("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis_keep(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).sum_axis_keep(axis)?;
        self.push("sum_axis", v, &[a], |g, p, _| Ok(vec![Some(g.expand(p[0].shape())?)]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(axis, "mean over empty or missing axis"));
        }
        let n = shape[axis];
        let s = self.sum_axis_keep(a, axis)?;
        let mut out_shape = shape;
        out_shape.remove(axis);
        let r = self.reshape(s, &out_shape)?;
        self.scale(r, 1.0 / n as f64)
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).expand(shape)?;
        self.push("expand", v, &[a], |g, p, _| Ok(vec![Some(g.reduce_to(p[0].shape())?)]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push("reshape", v, &[a], |g, p, _| Ok(vec![Some(g.reshape(p[0].shape())?)]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push("permute", v, &[a], move |g, _, _| Ok(vec![Some(g.permute(&inv)?)]))
    }

    pub fn index0(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a).index0(i)?;
        self.push("index0", v, &[a], move |g, p, _| {
            let mut full = Tensor::zeros(p[0].shape());
            let n = g.numel();
            full.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
            Ok(vec![Some(full)])
        })
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::stack(&vals)?;
        let k = parts.len();
        self.push("stack", v, parts, move |g, _, _| {
            (0..k).map(|i| g.index0(i).map(Some)).collect()
        })
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        self.push("narrow", v, &[a], move |g, p, _| {
            let shape = p[0].shape();
            let mut parts = Vec::new();
            let before = Tensor::zeros(&with_axis(shape, axis, start));
            let after = Tensor::zeros(&with_axis(shape, axis, shape[axis] - start - len));
            if start > 0 {
                parts.push(&before);
            }
            parts.push(g);
            if shape[axis] > start + len {
                parts.push(&after);
            }
            Ok(vec![Some(Tensor::concat(&parts, axis)?)])
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        let sizes: Vec<usize> = vals.iter().map(|t| t.shape()[axis]).collect();
        self.push("concat", v, parts, move |g, _, _| {
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for &s in &sizes {
                out.push(Some(g.narrow(axis, start, s)?));
                start += s;
            }
            Ok(out)
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, &[a, b], |g, p, _| {
            let ga = kernels::matmul(g, &kernels::transpose2(p[1])?)?;
            let gb = kernels::matmul(&kernels::transpose2(p[0])?, g)?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    // ---- network layers ----------------------------------------------

    /// 3-D cross-correlation. Accepts `[C,T,H,W]` or batched `[B,C,T,H,W]`.
    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let unbatched = self.shape(x).len() == 4;
        let xb = if unbatched {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            self.reshape(x, &s)?
        } else {
            x
        };
        let v = kernels::conv3d_forward(self.value(xb), self.value(w), geom)?;
        let y = self.push("conv3d", v, &[xb, w], move |g, p, _| {
            let (gx, gw) = kernels::conv3d_backward(p[0], p[1], geom, g, true, true)?;
            Ok(vec![gx, gw])
        })?;
        if unbatched {
            let s = self.shape(y)[1..].to_vec();
            self.reshape(y, &s)
        } else {
            Ok(y)
        }
    }

    /// 2-D cross-correlation over `[C,H,W]` or `[B,C,H,W]` with a
    /// `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || !(xs.len() == 3 || xs.len() == 4) {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let mut x5 = xs.clone();
        if x5.len() == 3 {
            x5.insert(0, 1);
        }
        x5.insert(2, 1);
        let xr = self.reshape(x, &x5)?;
        let wr = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let geom = ConvGeom {
            stride: [1, stride[0], stride[1]],
            pad: [0, pad[0], pad[1]],
        };
        let y = self.conv3d(xr, wr, geom)?;
        let ys = self.shape(y).to_vec();
        let mut out = vec![ys[0], ys[1], ys[3], ys[4]];
        if xs.len() == 3 {
            out.remove(0);
        }
        self.reshape(y, &out)
    }

    /// Max pooling over the trailing three axes of a rank-5 (or rank-4) tensor.
    pub fn maxpool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let unbatched = self.shape(x).len() == 4;
        let xb = if unbatched {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            self.reshape(x, &s)?
        } else {
            x
        };
        let (v, arg) = kernels::maxpool3d_forward(self.value(xb), window, stride)?;
        let y = self.push("maxpool3d", v, &[xb], move |g, p, _| {
            Ok(vec![Some(kernels::maxpool3d_backward(p[0].shape(), &arg, g)?)])
        })?;
        if unbatched {
            let s = self.shape(y)[1..].to_vec();
            self.reshape(y, &s)
        } else {
            Ok(y)
        }
    }

    /// Batch normalisation over every axis except `axis`. Train mode updates
    /// `stats` in place.
    pub fn batchnorm(
        &mut self,
        x: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let (v, saved) = kernels::batchnorm_forward(
            self.value(x),
            axis,
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        self.push("batchnorm", v, &[x, gamma, beta], move |g, p, _| {
            let (gx, gg, gb) = kernels::batchnorm_backward(axis, p[1], &saved, g)?;
            Ok(vec![Some(gx), Some(gg), Some(gb)])
        })
    }

    /// Nearest-neighbour temporal upsampling of `[..., C, T, H, W]`.
    pub fn upsample_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 3 {
            return Err(Error::Shape("upsample_time needs a [.., T, H, W] tensor".into()));
        }
        self.repeat_axis(x, nd - 3, factor)
    }

    pub fn repeat_axis(&mut self, x: Var, axis: usize, factor: usize) -> Result<Var> {
        let v = kernels::repeat_axis(self.value(x), axis, factor)?;
        self.push("repeat_axis", v, &[x], move |g, _, _| {
            Ok(vec![Some(kernels::repeat_axis_backward(g, axis, factor)?)])
        })
    }
}

fn with_axis(shape: &[usize], axis: usize, n: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = n;
    s
}
