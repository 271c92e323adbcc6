//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Leaves are
//! either trainable (named parameters or free inputs) or constants; an
//! operation node requires a gradient only when one of its parents does, so
//! constant and detached sub-graphs cost nothing on the backward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product: given the upstream gradient, the parent values
/// and the node's own value, returns one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    op: &'static str,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}: {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a named parameter; zeros when the loss does
    /// not depend on it.
    pub fn get(&self, name: &str) -> Option<Tensor> {
        let &(_, id) = self.params.iter().find(|(n, _)| n == name)?;
        Some(self.node(id))
    }

    /// Gradient with respect to any trainable leaf.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.node(v.id)
    }

    fn node(&self, id: usize) -> Tensor {
        self.by_node[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    /// All parameter gradients keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, id)| (n.clone(), self.node(*id)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, op: &'static str) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            op,
        })
    }

    /// Trainable named leaf.
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        let v = self.leaf(value, true, "param");
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    /// Trainable unnamed leaf (e.g. an input whose Jacobian is wanted).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true, "input")
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false, "constant")
    }

    /// Records an operation node. `backward` is dropped when no parent
    /// requires a gradient.
    pub fn custom(
        &self,
        op: &'static str,
        parents: &[Var<'_>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            op,
        })
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1],
            });
        }
        if !lv.item().is_finite() {
            drop(nodes);
            return Err(self.first_non_finite(loss.id));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = bw(&g, &inputs, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "op {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            by_node: grads,
            params: self.params.borrow().clone(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Error naming the earliest non-finite node at or before `upto`.
    pub fn first_non_finite(&self, upto: usize) -> Error {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate().take(upto + 1) {
            if !n.value.all_finite() {
                return Error::NonFinite { op: n.op, node: i };
            }
        }
        Error::NonFinite {
            op: nodes[upto].op,
            node: upto,
        }
    }
}

macro_rules! with_value {
    ($v:expr, |$t:ident| $body:expr) => {{
        let nodes = $v.g.nodes.borrow();
        let $t = &nodes[$v.id].value;
        $body
    }};
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in {op}");
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        with_value!(self, |t| t.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        with_value!(self, |t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        with_value!(self, |t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    /// Ok when every value is finite, otherwise the earliest offending node.
    pub fn ensure_finite(&self) -> Result<Self> {
        if with_value!(self, |t| t.all_finite()) {
            Ok(*self)
        } else {
            Err(self.g.first_non_finite(self.id))
        }
    }

    /// Value-identical leaf through which no gradient flows.
    pub fn detach(self) -> Var<'g> {
        let v = self.value();
        self.g.leaf(v, false, "detach")
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let out = with_value!(self, |t| t.map(&f));
        self.g.custom(
            op,
            &[self],
            out,
            Box::new(move |g, ins, out| {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ins[0].data().iter().zip(out.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Tensor::from_parts(g.shape().to_vec(), d)]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `ln(1 + e^x)` without overflow.
    pub fn softplus(self) -> Var<'g> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// `ln sigmoid(x) = -softplus(-x)`, finite for every finite `x`.
    pub fn log_sigmoid(self) -> Var<'g> {
        self.unary("log_sigmoid", |x| -softplus(-x), |x, _| sigmoid(-x))
    }

    pub fn sin(self) -> Var<'g> {
        self.unary("sin", f64::sin, |x, _| x.cos())
    }

    fn binary(
        self,
        rhs: Var<'g>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Var<'g> {
        let out = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            same_shape(a, b, op);
            a.zip_map(b, &f).expect("checked")
        };
        self.g.custom(
            op,
            &[self, rhs],
            out,
            Box::new(move |g, ins, _| {
                let (ga, gb) = back(g, ins[0], ins[1]);
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "add", |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(
            rhs,
            "sub",
            |a, b| a - b,
            |g, _, _| (g.clone(), g.scaled(-1.0)),
        )
    }

    pub fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(
            rhs,
            "mul",
            |a, b| a * b,
            |g, a, b| {
                (
                    g.zip_map(b, |g, b| g * b).expect("same shape"),
                    g.zip_map(a, |g, a| g * a).expect("same shape"),
                )
            },
        )
    }

    /// Adds `b` (one value per trailing position of a row) to every row.
    pub fn add_row(self, b: Var<'g>) -> Var<'g> {
        let out = {
            let nodes = self.g.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[b.id].value);
            assert_eq!(x.row_len(), b.len(), "add_row width");
            let mut out = x.clone();
            for i in 0..x.rows() {
                for (o, bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        self.g.custom(
            "add_row",
            &[self, b],
            out,
            Box::new(|g, ins, _| {
                let mut gb = vec![0.0; ins[1].len()];
                for i in 0..g.rows() {
                    for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                vec![
                    g.clone(),
                    Tensor::from_parts(ins[1].shape().to_vec(), gb),
                ]
            }),
        )
    }

    /// Multiplies row `i` by `s[i]`; `s` holds one value per row.
    pub fn scale_rows(self, s: Var<'g>) -> Var<'g> {
        let out = {
            let nodes = self.g.nodes.borrow();
            let (x, s) = (&nodes[self.id].value, &nodes[s.id].value);
            assert_eq!(x.rows(), s.len(), "scale_rows length");
            let mut out = x.clone();
            for i in 0..x.rows() {
                let c = s.data()[i];
                out.row_mut(i).iter_mut().for_each(|v| *v *= c);
            }
            out
        };
        self.g.custom(
            "scale_rows",
            &[self, s],
            out,
            Box::new(|g, ins, _| {
                let (x, s) = (ins[0], ins[1]);
                let mut gx = g.clone();
                let mut gs = vec![0.0; s.len()];
                for i in 0..x.rows() {
                    let c = s.data()[i];
                    gs[i] = g.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
                    gx.row_mut(i).iter_mut().for_each(|v| *v *= c);
                }
                vec![gx, Tensor::from_parts(s.shape().to_vec(), gs)]
            }),
        )
    }

    /// Multiplies every value by the single value held in `s`.
    pub fn mul_scalar(self, s: Var<'g>) -> Var<'g> {
        let out = {
            let nodes = self.g.nodes.borrow();
            let (x, s) = (&nodes[self.id].value, &nodes[s.id].value);
            assert_eq!(s.len(), 1, "mul_scalar expects a scalar");
            x.scaled(s.item())
        };
        self.g.custom(
            "mul_scalar",
            &[self, s],
            out,
            Box::new(|g, ins, _| {
                let c = ins[1].item();
                let gs: f64 = g.data().iter().zip(ins[0].data()).map(|(a, b)| a * b).sum();
                vec![g.scaled(c), Tensor::from_parts(ins[1].shape().to_vec(), vec![gs])]
            }),
        )
    }

    /// `x[n x k] * w[f x k]^T`, the affine-map convention of a linear layer.
    pub fn matmul_t(self, w: Var<'g>) -> Var<'g> {
        let (out, n, k, f) = {
            let nodes = self.g.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[w.id].value);
            let (n, k) = (x.rows(), x.row_len());
            let f = w.rows();
            assert_eq!(w.row_len(), k, "matmul_t inner extent");
            let out = matmul_nt(x.data(), w.data(), n, k, f);
            (Tensor::from_parts(vec![n, f], out), n, k, f)
        };
        self.g.custom(
            "matmul_t",
            &[self, w],
            out,
            Box::new(move |g, ins, _| {
                let gx = matmul_nn(g.data(), ins[1].data(), n, f, k);
                let gw = matmul_tn(g.data(), ins[0].data(), n, f, k);
                vec![
                    Tensor::from_parts(ins[0].shape().to_vec(), gx),
                    Tensor::from_parts(ins[1].shape().to_vec(), gw),
                ]
            }),
        )
    }

    /// Sum of all values, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let out = with_value!(self, |t| Tensor::scalar(t.sum()));
        self.g.custom(
            "sum",
            &[self],
            out,
            Box::new(|g, ins, _| vec![Tensor::full(ins[0].shape(), g.item())]),
        )
    }

    /// Per-row sum, shape `[n]`.
    pub fn sum_rows(self) -> Var<'g> {
        let out = with_value!(self, |t| {
            Tensor::vector((0..t.rows()).map(|i| t.row(i).iter().sum()).collect())
        });
        self.g.custom(
            "sum_rows",
            &[self],
            out,
            Box::new(|g, ins, _| {
                let x = ins[0];
                let w = x.row_len();
                let d = (0..x.len()).map(|j| g.data()[j / w]).collect();
                vec![Tensor::from_parts(x.shape().to_vec(), d)]
            }),
        )
    }

    /// Per-row mean, shape `[n]`.
    pub fn mean_rows(self) -> Var<'g> {
        let w = with_value!(self, |t| t.row_len());
        self.sum_rows().scale(1.0 / w as f64)
    }

    /// Average over the channel axis of an `[n, c, s...]` tensor, giving
    /// `[n, s]` where `s` is the flattened trailing extent.
    pub fn mean_channels(self) -> Var<'g> {
        let (out, c, s) = with_value!(self, |t| {
            let shape = t.shape();
            assert!(shape.len() >= 2, "mean_channels needs [n, c, ...]");
            let (n, c) = (shape[0], shape[1]);
            let s: usize = shape[2..].iter().product();
            let mut out = vec![0.0; n * s];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * s;
                    for p in 0..s {
                        out[i * s + p] += t.data()[base + p];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= c as f64);
            (Tensor::from_parts(vec![n, s], out), c, s)
        });
        self.g.custom(
            "mean_channels",
            &[self],
            out,
            Box::new(move |g, ins, _| {
                let x = ins[0];
                let n = x.rows();
                let mut d = vec![0.0; x.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for p in 0..s {
                            d[base + p] = g.data()[i * s + p] / c as f64;
                        }
                    }
                }
                vec![Tensor::from_parts(x.shape().to_vec(), d)]
            }),
        )
    }

    /// Replaces each entry of a length-`n` vector by the mean of its group of
    /// `group` consecutive entries.
    pub fn group_mean(self, group: usize) -> Var<'g> {
        let out = with_value!(self, |t| {
            assert!(group > 0 && t.len() % group == 0, "group_mean divisibility");
            let mut d = t.data().to_vec();
            for chunk in d.chunks_mut(group) {
                let m = chunk.iter().sum::<f64>() / group as f64;
                chunk.iter_mut().for_each(|v| *v = m);
            }
            Tensor::from_parts(t.shape().to_vec(), d)
        });
        self.g.custom(
            "group_mean",
            &[self],
            out,
            Box::new(move |g, _, _| {
                let mut d = g.data().to_vec();
                for chunk in d.chunks_mut(group) {
                    let m = chunk.iter().sum::<f64>() / group as f64;
                    chunk.iter_mut().for_each(|v| *v = m);
                }
                vec![Tensor::from_parts(g.shape().to_vec(), d)]
            }),
        )
    }

    /// Scales each row to unit root-mean-square: `w / (eps + |w| / sqrt(k))`.
    pub fn normalize_rows(self, eps: f64) -> Var<'g> {
        let out = with_value!(self, |w| {
            let k = w.row_len();
            let mut out = w.clone();
            for i in 0..w.rows() {
                let r = eps + row_norm(w.row(i)) / (k as f64).sqrt();
                out.row_mut(i).iter_mut().for_each(|v| *v /= r);
            }
            out
        });
        self.g.custom(
            "normalize_rows",
            &[self],
            out,
            Box::new(move |g, ins, _| {
                let w = ins[0];
                let k = w.row_len();
                let sk = (k as f64).sqrt();
                let mut gw = g.clone();
                for i in 0..w.rows() {
                    let wr = w.row(i);
                    let nrm = row_norm(wr);
                    let r = eps + nrm / sk;
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    let coef = if nrm > 0.0 { dot / (r * r * sk * nrm) } else { 0.0 };
                    for (o, (&gi, &wi)) in gw.row_mut(i).iter_mut().zip(gr.iter().zip(wr)) {
                        *o = gi / r - coef * wi;
                    }
                }
                vec![gw]
            }),
        )
    }

    /// Concatenates `[n, c1, s]` and `[n, c2, s]` along the channel axis
    /// (for plain `[n, f]` matrices this is column concatenation).
    pub fn concat_channels(self, other: Var<'g>) -> Var<'g> {
        let (out, c1, c2, s) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            assert_eq!(sa[0], sb[0], "concat batch");
            assert_eq!(sa[2..], sb[2..], "concat spatial");
            let s: usize = sa[2..].iter().product();
            let (c1, c2) = (sa[1], sb[1]);
            let mut shape = sa.to_vec();
            shape[1] = c1 + c2;
            let mut d = Vec::with_capacity(a.len() + b.len());
            for i in 0..sa[0] {
                d.extend_from_slice(a.row(i));
                d.extend_from_slice(b.row(i));
            }
            (Tensor::from_parts(shape, d), c1, c2, s)
        };
        self.g.custom(
            "concat_channels",
            &[self, other],
            out,
            Box::new(move |g, ins, _| {
                let (w1, w2) = (c1 * s, c2 * s);
                let mut ga = Vec::with_capacity(ins[0].len());
                let mut gb = Vec::with_capacity(ins[1].len());
                for i in 0..g.rows() {
                    let r = g.row(i);
                    ga.extend_from_slice(&r[..w1]);
                    gb.extend_from_slice(&r[w1..w1 + w2]);
                }
                vec![
                    Tensor::from_parts(ins[0].shape().to_vec(), ga),
                    Tensor::from_parts(ins[1].shape().to_vec(), gb),
                ]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = with_value!(self, |t| t.clone().reshape(shape).expect("reshape extent"));
        self.g.custom(
            "reshape",
            &[self],
            out,
            Box::new(|g, ins, _| {
                vec![g.clone().reshape(ins[0].shape()).expect("same extent")]
            }),
        )
    }

    /// Adds a per-channel bias `b[c]` to `[n, c, h, w]`.
    pub fn add_channel_bias(self, b: Var<'g>) -> Var<'g> {
        let (out, c, s) = {
            let nodes = self.g.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[b.id].value);
            let c = x.shape()[1];
            assert_eq!(b.len(), c, "channel bias length");
            let s = x.row_len() / c;
            let mut out = x.clone();
            for i in 0..x.rows() {
                let r = out.row_mut(i);
                for ch in 0..c {
                    r[ch * s..(ch + 1) * s].iter_mut().for_each(|v| *v += b.data()[ch]);
                }
            }
            (out, c, s)
        };
        self.g.custom(
            "add_channel_bias",
            &[self, b],
            out,
            Box::new(move |g, ins, _| {
                let mut gb = vec![0.0; c];
                for i in 0..g.rows() {
                    let r = g.row(i);
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        *acc += r[ch * s..(ch + 1) * s].iter().sum::<f64>();
                    }
                }
                vec![g.clone(), Tensor::from_parts(ins[1].shape().to_vec(), gb)]
            }),
        )
    }

    /// Adds `e[n, c]` to every spatial position of `[n, c, h, w]`.
    pub fn add_sample_channel(self, e: Var<'g>) -> Var<'g> {
        let (out, c, s) = {
            let nodes = self.g.nodes.borrow();
            let (x, e) = (&nodes[self.id].value, &nodes[e.id].value);
            let c = x.shape()[1];
            assert_eq!(e.shape(), [x.rows(), c], "sample-channel shape");
            let s = x.row_len() / c;
            let mut out = x.clone();
            for i in 0..x.rows() {
                let r = out.row_mut(i);
                for ch in 0..c {
                    let add = e.data()[i * c + ch];
                    r[ch * s..(ch + 1) * s].iter_mut().for_each(|v| *v += add);
                }
            }
            (out, c, s)
        };
        self.g.custom(
            "add_sample_channel",
            &[self, e],
            out,
            Box::new(move |g, ins, _| {
                let n = g.rows();
                let mut ge = vec![0.0; n * c];
                for i in 0..n {
                    let r = g.row(i);
                    for ch in 0..c {
                        ge[i * c + ch] = r[ch * s..(ch + 1) * s].iter().sum();
                    }
                }
                vec![g.clone(), Tensor::from_parts(ins[1].shape().to_vec(), ge)]
            }),
        )
    }

    /// 2-D convolution of `[n, c, h, w]` with `w[o, c*k*k]`, zero padding
    /// `k/2` and the given stride.
    pub fn conv2d(self, w: Var<'g>, k: usize, stride: usize) -> Var<'g> {
        let (out, geo) = {
            let nodes = self.g.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[w.id].value);
            let s = x.shape();
            assert_eq!(s.len(), 4, "conv2d input must be [n, c, h, w]");
            let geo = ConvGeom::new(s[1], s[2], s[3], k, stride);
            assert_eq!(w.row_len(), geo.c * k * k, "conv2d weight fan-in");
            let o = w.rows();
            let hw = geo.ho * geo.wo;
            let mut out = Vec::with_capacity(s[0] * o * hw);
            for i in 0..s[0] {
                let cols = geo.im2col(x.row(i));
                out.extend(matmul_nn(w.data(), &cols, o, geo.c * k * k, hw));
            }
            (Tensor::from_parts(vec![s[0], o, geo.ho, geo.wo], out), geo)
        };
        self.g.custom(
            "conv2d",
            &[self, w],
            out,
            Box::new(move |g, ins, _| {
                let (x, w) = (ins[0], ins[1]);
                let o = w.rows();
                let ckk = w.row_len();
                let hw = geo.ho * geo.wo;
                let mut gx = Vec::with_capacity(x.len());
                let mut gw = vec![0.0; w.len()];
                for i in 0..x.rows() {
                    let gi = g.row(i);
                    let cols = geo.im2col(x.row(i));
                    // gw += g_i[o x hw] * cols[ckk x hw]^T
                    let part = matmul_nt(gi, &cols, o, hw, ckk);
                    gw.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                    // gcols = w^T[ckk x o] * g_i[o x hw]
                    let gcols = matmul_tn(w.data(), gi, o, ckk, hw);
                    gx.extend(geo.col2im(&gcols));
                }
                vec![
                    Tensor::from_parts(x.shape().to_vec(), gx),
                    Tensor::from_parts(w.shape().to_vec(), gw),
                ]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(self) -> Var<'g> {
        let (out, c, h, w) = with_value!(self, |x| {
            let s = x.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let mut d = vec![0.0; n * c * 4 * h * w];
            for i in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[i * 4 * h * w + y * 2 * w + xx] = x.data()[i * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
            (Tensor::from_parts(vec![n, c, 2 * h, 2 * w], d), c, h, w)
        });
        self.g.custom(
            "upsample2",
            &[self],
            out,
            Box::new(move |g, ins, _| {
                let n = ins[0].rows();
                let mut d = vec![0.0; ins[0].len()];
                for i in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[i * h * w + (y / 2) * w + xx / 2] += g.data()[i * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                vec![Tensor::from_parts(ins[0].shape().to_vec(), d)]
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// `[c*k*k, ho*wo]` patch matrix for one sample.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * self.k * self.k * hw];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            cols[row * hw + oy * self.wo + ox] =
                                x[(ch * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            x[(ch * self.h + iy as usize) * self.w + ix as usize] +=
                                cols[row * hw + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
        x
    }
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
