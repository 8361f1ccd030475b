//! Reverse-mode automatic differentiation over tensor-valued nodes.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents are already on the tape, so insertion order is a topological
//! order and [`Graph::backward`] simply walks the tape in reverse.
//!
//! Besides the primitive ops defined here, other modules register fused
//! operations (mesh deformation, rigging, splatting, SSIM) through
//! [`Graph::custom`] with a hand-written vector-Jacobian product.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::math;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Identifier of a trainable parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node of a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("loss must be a scalar node, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    ForeignNode(usize),
    #[error("non-finite gradient reached node {0}")]
    NonFiniteGradient(usize),
}

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Parent values, in registration order.
    pub inputs: Vec<&'a Tensor>,
    /// This node's forward value.
    pub output: &'a Tensor,
    needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    /// Whether parent `i` (transitively) leads to a parameter.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Vector-Jacobian product: one optional gradient per parent, each shaped
/// like that parent.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }
}

pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let needs_grad = backward.is_some() && parents.iter().any(|&p| self.nodes[p].needs_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            param: None,
            needs_grad,
        });
        Var {
            graph: self.id,
            idx: idx as u32,
        }
    }

    fn check(&self, v: Var) -> Result<usize, GraphError> {
        let i = v.idx as usize;
        if v.graph != self.id || i >= self.nodes.len() {
            return Err(GraphError::ForeignNode(i));
        }
        Ok(i)
    }

    fn ix(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable from another graph");
        v.idx as usize
    }

    /// Register a trainable leaf. Registering the same id twice returns the
    /// original node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var {
                graph: self.id,
                idx: idx as u32,
            };
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: value.clone(),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
            needs_grad: true,
        });
        self.params.insert(id, idx);
        Var {
            graph: self.id,
            idx: idx as u32,
        }
    }

    /// Register a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.ix(v)].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.ix(v)].needs_grad
    }

    /// Register a fused operation with its own vector-Jacobian product.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let parents = parents.iter().map(|&p| self.ix(p)).collect();
        self.push(value, parents, Some(Box::new(backward)))
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(GraphError::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(li + 1, || None);
        grads[li] = Some(Tensor::full(lv.dims(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(GraphError::NonFiniteGradient(i));
            }
            if let Some(pid) = node.param {
                out.map.insert(pid, g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect(),
            };
            let pg = bw(&ctx);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (k, pgrad) in pg.into_iter().enumerate() {
                let p = node.parents[k];
                let Some(pgrad) = pgrad else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    pgrad.dims(),
                    self.nodes[p].value.dims(),
                    "gradient shape mismatch at node {i} parent {k}"
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_scaled(&pgrad, 1.0),
                    slot @ None => *slot = Some(pgrad),
                }
            }
        }
        for (&pid, &idx) in &self.params {
            out.map
                .entry(pid)
                .or_insert_with(|| Tensor::zeros(self.nodes[idx].value.dims()));
        }
        Ok(out)
    }

    // ----------------------------------------------------------------- //
    // Elementwise

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.value(a);
        let value = x.map(f);
        self.custom(&[a], value, move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let d = (0..x.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, |x| x + c, |_, _| 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_unary(a, math::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, math::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map_unary(a, math::ln, |x, _| 1.0 / x)
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Rectifier; subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(
            a,
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, math::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, math::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.map_unary(
            a,
            |x| 0.5 * x * (1.0 + math::tanh(C * (x + 0.044715 * x * x * x))),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = math::tanh(u);
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// `max(a, floor)`; gradient passes only where the input is above the floor.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map_unary(
            a,
            |x| if x > floor { x } else { floor },
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    fn zip_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dims(), y.dims(), "elementwise op on mismatched shapes");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(x.dims().to_vec(), data);
        self.custom(&[a, b], value, move |ctx| {
            let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let dims = ctx.inputs[0].dims().to_vec();
            let ga = ctx
                .needs(0)
                .then(|| Tensor::from_parts(dims.clone(), (0..x.len()).map(|i| g[i] * da(x[i], y[i])).collect()));
            let gb = ctx
                .needs(1)
                .then(|| Tensor::from_parts(dims.clone(), (0..x.len()).map(|i| g[i] * db(x[i], y[i])).collect()));
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            acc.add_scaled(self.value(x), 1.0);
        }
        let n = xs.len();
        self.custom(xs, acc, move |ctx| {
            (0..n).map(|i| ctx.needs(i).then(|| ctx.grad.clone())).collect()
        })
    }

    // ----------------------------------------------------------------- //
    // Broadcasting over a 2-D view (rows x cols)

    /// `a[r, c] + b[c]` where `b` has `cols(a)` elements.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let c = x.cols();
        assert_eq!(y.len(), c, "add_row: row vector length");
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += y.data()[i % c];
        }
        let value = Tensor::from_parts(x.dims().to_vec(), data);
        self.custom(&[a, b], value, move |ctx| {
            let g = ctx.grad;
            let gb = ctx.needs(1).then(|| {
                let mut s = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    s[i % c] += v;
                }
                Tensor::from_parts(ctx.inputs[1].dims().to_vec(), s)
            });
            vec![ctx.needs(0).then(|| g.clone()), gb]
        })
    }

    /// `a[r, c] * b[c]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let c = x.cols();
        assert_eq!(y.len(), c, "mul_row: row vector length");
        let data = x.data().iter().enumerate().map(|(i, v)| v * y.data()[i % c]).collect();
        let value = Tensor::from_parts(x.dims().to_vec(), data);
        self.custom(&[a, b], value, move |ctx| {
            let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let ga = ctx.needs(0).then(|| {
                Tensor::from_parts(
                    ctx.inputs[0].dims().to_vec(),
                    g.iter().enumerate().map(|(i, v)| v * y[i % c]).collect(),
                )
            });
            let gb = ctx.needs(1).then(|| {
                let mut s = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    s[i % c] += v * x[i];
                }
                Tensor::from_parts(ctx.inputs[1].dims().to_vec(), s)
            });
            vec![ga, gb]
        })
    }

    /// `a[r, c] * b[r]` where `b` has `rows(a)` elements.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let c = x.cols();
        assert_eq!(y.len(), x.rows(), "mul_col: column vector length");
        let data = x.data().iter().enumerate().map(|(i, v)| v * y.data()[i / c]).collect();
        let value = Tensor::from_parts(x.dims().to_vec(), data);
        self.custom(&[a, b], value, move |ctx| {
            let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let ga = ctx.needs(0).then(|| {
                Tensor::from_parts(
                    ctx.inputs[0].dims().to_vec(),
                    g.iter().enumerate().map(|(i, v)| v * y[i / c]).collect(),
                )
            });
            let gb = ctx.needs(1).then(|| {
                let mut s = vec![0.0; y.len()];
                for (i, v) in g.iter().enumerate() {
                    s[i / c] += v * x[i];
                }
                Tensor::from_parts(ctx.inputs[1].dims().to_vec(), s)
            });
            vec![ga, gb]
        })
    }

    // ----------------------------------------------------------------- //
    // Reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.custom(&[a], Tensor::scalar(s), |ctx| {
            vec![Some(Tensor::full(ctx.inputs[0].dims(), ctx.grad.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a 2-D view: `R x C -> R x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let data = (0..r).map(|i| x.row(i).iter().sum()).collect();
        self.custom(&[a], Tensor::from_parts(vec![r, 1], data), move |ctx| {
            let g = ctx.grad.data();
            let d = (0..r * c).map(|i| g[i / c]).collect();
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    // ----------------------------------------------------------------- //
    // Linear algebra

    /// Matrix product of 2-D views `R x K` and `K x C`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (r, k) = (x.rows(), x.cols());
        let (k2, c) = (y.rows(), y.cols());
        assert_eq!(k, k2, "matmul inner dims");
        let value = Tensor::from_parts(vec![r, c], matmul_raw(x.data(), y.data(), r, k, c));
        self.custom(&[a, b], value, move |ctx| {
            let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            // dA = G B^T, dB = A^T G
            let ga = ctx.needs(0).then(|| {
                let mut d = vec![0.0; r * k];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for kk in 0..k {
                        let yr = &y[kk * c..(kk + 1) * c];
                        d[i * k + kk] = dot(gr, yr);
                    }
                }
                Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d)
            });
            let gb = ctx.needs(1).then(|| {
                let mut d = vec![0.0; k * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for kk in 0..k {
                        let s = x[i * k + kk];
                        if s != 0.0 {
                            let dr = &mut d[kk * c..(kk + 1) * c];
                            for j in 0..c {
                                dr[j] += s * gr[j];
                            }
                        }
                    }
                }
                Tensor::from_parts(ctx.inputs[1].dims().to_vec(), d)
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let value = Tensor::from_parts(vec![c, r], transpose_raw(x.data(), r, c));
        self.custom(&[a], value, move |ctx| {
            vec![Some(Tensor::from_parts(
                ctx.inputs[0].dims().to_vec(),
                transpose_raw(ctx.grad.data(), c, r),
            ))]
        })
    }

    // ----------------------------------------------------------------- //
    // Shape manipulation

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(dims.iter().product::<usize>(), x.len(), "reshape length");
        let value = Tensor::from_parts(dims.to_vec(), x.data().to_vec());
        self.custom(&[a], value, |ctx| {
            vec![Some(Tensor::from_parts(
                ctx.inputs[0].dims().to_vec(),
                ctx.grad.data().to_vec(),
            ))]
        })
    }

    /// Columns `start..start+len` of a 2-D view.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.custom(&[a], Tensor::from_parts(vec![r, len], data), move |ctx| {
            let mut d = vec![0.0; r * c];
            let g = ctx.grad.data();
            for i in 0..r {
                d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    /// Rows of a 2-D view selected by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(x.row(i));
        }
        let rows = rows.to_vec();
        let n = rows.len();
        self.custom(&[a], Tensor::from_parts(vec![n, c], data), move |ctx| {
            let mut d = vec![0.0; ctx.inputs[0].len()];
            let g = ctx.grad.data();
            for (k, &i) in rows.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g[k * c + j];
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &rows)
    }

    /// Horizontal concatenation of 2-D views with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let r = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        assert!(
            xs.iter().all(|&x| self.value(x).rows() == r),
            "concat_cols row mismatch"
        );
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        self.custom(xs, Tensor::from_parts(vec![r, total], data), move |ctx| {
            let g = ctx.grad.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (k, &w) in widths.iter().enumerate() {
                if ctx.needs(k) {
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    out.push(Some(Tensor::from_parts(ctx.inputs[k].dims().to_vec(), d)));
                } else {
                    out.push(None);
                }
                off += w;
            }
            out
        })
    }

    /// Vertical concatenation of 2-D views with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let c = self.value(xs[0]).cols();
        assert!(
            xs.iter().all(|&x| self.value(x).cols() == c),
            "concat_rows col mismatch"
        );
        let heights: Vec<usize> = xs.iter().map(|&x| self.value(x).rows()).collect();
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let total: usize = heights.iter().sum();
        self.custom(xs, Tensor::from_parts(vec![total, c], data), move |ctx| {
            let g = ctx.grad.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(heights.len());
            for (k, &h) in heights.iter().enumerate() {
                out.push(
                    ctx.needs(k)
                        .then(|| Tensor::from_parts(ctx.inputs[k].dims().to_vec(), g[off * c..(off + h) * c].to_vec())),
                );
                off += h;
            }
            out
        })
    }

    /// `out[t] = a[t - offset]`, zero outside the sequence.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = vec![0.0; r * c];
        for t in 0..r {
            let s = t as isize - offset;
            if s >= 0 && (s as usize) < r {
                let s = s as usize;
                data[t * c..(t + 1) * c].copy_from_slice(x.row(s));
            }
        }
        self.custom(&[a], Tensor::from_parts(vec![r, c], data), move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0; r * c];
            for t in 0..r {
                let s = t as isize - offset;
                if s >= 0 && (s as usize) < r {
                    let s = s as usize;
                    for j in 0..c {
                        d[s * c + j] += g[t * c + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    // ----------------------------------------------------------------- //
    // Normalisation and softmax

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax(x.row(i)));
        }
        self.custom(&[a], Tensor::from_parts(x.dims().to_vec(), data), move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                let s = dot(yr, gr);
                for j in 0..c {
                    d[i * c + j] = yr[j] * (gr[j] - s);
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    /// Log-softmax along each row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(log_softmax(x.row(i)));
        }
        self.custom(&[a], Tensor::from_parts(x.dims().to_vec(), data), move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let s: f64 = gr.iter().sum();
                for j in 0..c {
                    d[i * c + j] = gr[j] - math::exp(y[i * c + j]) * s;
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    /// Zero-mean, unit-variance normalisation of every row (layer norm
    /// without affine terms). Variance is the biased estimator plus `eps`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let (y, inv) = normalize_lanes(x.data(), r, c, 1, c, eps);
        self.custom(&[a], Tensor::from_parts(x.dims().to_vec(), y), move |ctx| {
            let d = normalize_lanes_backward(ctx.output.data(), ctx.grad.data(), &inv, r, c, 1, c);
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }

    /// Zero-mean, unit-variance normalisation of every column over the row
    /// axis (instance norm over time for a `T x C` sequence).
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let (y, inv) = normalize_lanes(x.data(), c, r, c, 1, eps);
        self.custom(&[a], Tensor::from_parts(x.dims().to_vec(), y), move |ctx| {
            let d = normalize_lanes_backward(ctx.output.data(), ctx.grad.data(), &inv, c, r, c, 1);
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), d))]
        })
    }
}

// --------------------------------------------------------------------- //
// Raw kernels shared with other modules

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(x: &[f64], y: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let s = x[i * k + kk];
            if s == 0.0 {
                continue;
            }
            let yr = &y[kk * c..(kk + 1) * c];
            for j in 0..c {
                orow[j] += s * yr[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| math::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|&v| math::exp(v - m)).sum();
    let lse = m + math::ln(s);
    x.iter().map(|&v| v - lse).collect()
}

/// Normalise `lanes` lanes of `n` elements; element `j` of lane `l` lives at
/// `l * lane_stride + j * elem_stride`. Returns values and per-lane 1/sigma.
fn normalize_lanes(
    x: &[f64],
    lanes: usize,
    n: usize,
    elem_stride: usize,
    lane_stride: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(lanes);
    for l in 0..lanes {
        let at = |j: usize| l * lane_stride + j * elem_stride;
        let mean = (0..n).map(|j| x[at(j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|j| (x[at(j)] - mean) * (x[at(j)] - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / math::sqrt(var + eps);
        for j in 0..n {
            y[at(j)] = (x[at(j)] - mean) * is;
        }
        inv.push(is);
    }
    (y, inv)
}

fn normalize_lanes_backward(
    y: &[f64],
    g: &[f64],
    inv: &[f64],
    lanes: usize,
    n: usize,
    elem_stride: usize,
    lane_stride: usize,
) -> Vec<f64> {
    let mut d = vec![0.0; y.len()];
    for l in 0..lanes {
        let at = |j: usize| l * lane_stride + j * elem_stride;
        let mg = (0..n).map(|j| g[at(j)]).sum::<f64>() / n as f64;
        let mgy = (0..n).map(|j| g[at(j)] * y[at(j)]).sum::<f64>() / n as f64;
        for j in 0..n {
            d[at(j)] = inv[l] * (g[at(j)] - mg - y[at(j)] * mgy);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradcheckError};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &t(&[3], &[1.0, -2.0, 5.0]));
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_square() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &t(&[1], &[2.0]));
        let sq = g.mul(p, p);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn untouched_params_get_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &t(&[2], &[1.0, 2.0]));
        let _q = g.param(ParamId(1), &t(&[2, 2], &[1.0; 4]));
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn rejects_non_scalar_and_foreign_nodes() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(GraphError::NonScalarLoss(_))));
        let mut other = Graph::new();
        let q = other.param(ParamId(0), &t(&[1], &[1.0]));
        assert!(matches!(g.backward(q), Err(GraphError::ForeignNode(_))));
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random three-layer perceptron.
    fn three_layer(g: &mut Graph, x: Var, w1: Var, w2: Var, w3: Var, b: Var) -> Var {
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b);
        let h = g.tanh(h);
        let h = g.matmul(h, w2);
        let h = g.tanh(h);
        let h = g.matmul(h, w3);
        let sq = g.square(h);
        g.mean(sq)
    }

    /// Longer chain touching the normalisation and attention-style primitives.
    fn mixed_chain(g: &mut Graph, x: Var, w1: Var, w2: Var, w3: Var, b: Var) -> Var {
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b);
        let h = g.gelu(h);
        let h = g.normalize_rows(h, 1e-5);
        let h = g.matmul(h, w2);
        let h = g.tanh(h);
        let s = g.softmax_rows(h);
        let h = g.mul(h, s);
        let h = g.normalize_cols(h, 1e-5);
        let h = g.matmul(h, w3);
        let h = g.sigmoid(h);
        let sq = g.square(h);
        g.mean(sq)
    }

    type Chain = fn(&mut Graph, Var, Var, Var, Var, Var) -> Var;

    fn worst_error(chain: Chain, seed: u64, h: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[5, 4]);
        let ps = [
            random_tensor(&mut rng, &[4, 6]),
            random_tensor(&mut rng, &[6, 3]),
            random_tensor(&mut rng, &[3, 2]),
            random_tensor(&mut rng, &[6]),
        ];
        let mut worst: f64 = 0.0;
        for which in 0..4 {
            let f = |p: &Tensor| -> (f64, Tensor) {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let vars: Vec<Var> = (0..4)
                    .map(|i| {
                        if i == which {
                            g.param(ParamId(0), p)
                        } else {
                            g.constant(ps[i].clone())
                        }
                    })
                    .collect();
                let l = chain(&mut g, xv, vars[0], vars[1], vars[2], vars[3]);
                let grads = g.backward(l).unwrap();
                (g.value(l).item(), grads.get(ParamId(0)).unwrap().clone())
            };
            let err = finite_diff_check(|p| Ok(f(p).0), |p| f(p).1, &ps[which], h).unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn random_three_layer_matches_finite_differences() {
        for seed in 0..5 {
            let err = worst_error(three_layer, seed, 1e-4);
            assert!(err < 1e-6, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn mixed_chain_matches_finite_differences() {
        let err = worst_error(mixed_chain, 7, 1e-5);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn primitive_ops_pass_gradcheck() {
        type Op = fn(&mut Graph, Var) -> Var;
        let ops: &[(&str, Op)] = &[
            ("exp", |g, x| g.exp(x)),
            ("sqrt", |g, x| {
                let s = g.square(x);
                let s = g.add_scalar(s, 0.5);
                g.sqrt(s)
            }),
            ("ln", |g, x| {
                let s = g.square(x);
                let s = g.add_scalar(s, 0.5);
                g.ln(s)
            }),
            ("transpose", |g, x| {
                let t = g.transpose(x);
                g.matmul(x, t)
            }),
            ("slice/concat", |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.slice_rows(x, 0, 2);
                let b = g.transpose(b);
                let b = g.slice_rows(b, 0, 3);
                let c = g.concat_rows(&[a, b]);
                let e = g.exp(c);
                g.concat_cols(&[e, c])
            }),
            ("gather", |g, x| g.gather_rows(x, &[2, 0, 2])),
            ("shift", |g, x| {
                let a = g.shift_rows(x, 1);
                let b = g.shift_rows(x, -1);
                let m = g.mul(a, b);
                g.add(m, x)
            }),
            ("mul_col", |g, x| {
                let c = g.slice_cols(x, 0, 1);
                g.mul_col(x, c)
            }),
            ("mul_row", |g, x| {
                let r = g.slice_rows(x, 1, 1);
                g.mul_row(x, r)
            }),
            ("sum_cols", |g, x| {
                let s = g.sum_cols(x);
                g.square(s)
            }),
            ("log_softmax", |g, x| g.log_softmax_rows(x)),
            ("div", |g, x| {
                let d = g.square(x);
                let d = g.add_scalar(d, 1.0);
                g.div(x, d)
            }),
            ("add_n", |g, x| {
                let e = g.exp(x);
                let s = g.sigmoid(x);
                g.add_n(&[x, e, s])
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, op) in ops {
            let x0 = random_tensor(&mut rng, &[3, 3]);
            let w = random_tensor(&mut rng, &[3, 3]);
            let eval = |x: &Tensor| -> (f64, Tensor) {
                let mut g = Graph::new();
                let xv = g.param(ParamId(0), x);
                let y = op(&mut g, xv);
                let wv = g.constant(if g.value(y).dims() == w.dims() {
                    w.clone()
                } else {
                    Tensor::full(g.value(y).dims(), 0.7)
                });
                let prod = g.mul(y, wv);
                let l = g.sum(prod);
                let grads = g.backward(l).unwrap();
                (g.value(l).item(), grads.get(ParamId(0)).unwrap().clone())
            };
            let err = finite_diff_check(|x| Ok(eval(x).0), |x| eval(x).1, &x0, 1e-4).unwrap();
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = random_tensor(&mut rng, &[4, 4]);
            let w1 = random_tensor(&mut rng, &[4, 6]);
            let w2 = random_tensor(&mut rng, &[6, 3]);
            let w3 = random_tensor(&mut rng, &[3, 2]);
            let b = random_tensor(&mut rng, &[6]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let vs = [
                g.param(ParamId(0), &w1),
                g.param(ParamId(1), &w2),
                g.param(ParamId(2), &w3),
                g.param(ParamId(3), &b),
            ];
            let l = three_layer(&mut g, xv, vs[0], vs[1], vs[2], vs[3]);
            let grads = g.backward(l).unwrap();
            grads
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradcheck_error_type_is_reachable() {
        let e = finite_diff_check(|_| Ok(f64::NAN), |x| x.clone(), &Tensor::scalar(1.0), 1e-4);
        assert!(matches!(e, Err(GradcheckError::NonFinite { .. })));
    }
}
