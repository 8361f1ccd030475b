//! Parameter storage and the small layer vocabulary used by the motion
//! network.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::math;
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Shared motion-network weights.
    Network,
    /// Identity-specific modulation MLP of identity `i`.
    AdaIn(usize),
    /// Gaussian appearance and placement of identity `i`.
    Gaussians(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Every trainable tensor, addressed by `ParamId` (its insertion index).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].group == group).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count of the given parameters.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    /// Id in `self` of the parameter called like `other`'s `id`, when the
    /// shapes agree.
    pub fn matching(&self, other: &ParamStore, id: ParamId) -> Option<ParamId> {
        let e = other.entry(id);
        let found = self.find(&e.name)?;
        (self.get(found).dims() == e.value.dims() && self.entry(found).group == e.group).then_some(found)
    }

    /// Register a parameter on the graph.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id, self.get(id))
    }
}

/// Random matrix with orthonormal rows or columns (whichever are fewer),
/// from Gram-Schmidt on Gaussian draws.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let (n, m) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    // n vectors of length m
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vs.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| math::randn(rng)).collect();
        for _ in 0..2 {
            for u in &vs {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= d * b;
                }
            }
        }
        let norm = math::sqrt(v.iter().map(|a| a * a).sum());
        if norm > 1e-6 {
            vs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (k, v) in vs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows >= cols {
                data[j * cols + k] = x;
            } else {
                data[k * cols + j] = x;
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Orthogonal weights times `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, group, input, output, gain, true, rng)
    }

    /// Like [`Linear::new`], optionally without a bias (for layers whose
    /// output feeds a normalisation that would cancel it).
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = orthogonal(input, output, rng).map(|v| v * gain);
        let weight = store.add(alloc::format!("{name}.weight"), group, w, true);
        let bias = bias.then(|| store.add(alloc::format!("{name}.bias"), group, Tensor::zeros(&[1, output]), false));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.var(g, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = store.var(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn remap(&mut self, f: &mut dyn FnMut(ParamId) -> ParamId) {
        self.weight = f(self.weight);
        self.bias = self.bias.map(&mut *f);
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.weight];
        p.extend(self.bias);
        p
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; the last layer's weights are scaled
    /// by `head_gain`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        widths: &[usize],
        head_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, group, widths, head_gain, true, rng)
    }

    /// Like [`Mlp::new`], optionally without a bias on the last layer.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        widths: &[usize],
        head_gain: f64,
        head_bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                let gain = if last { head_gain } else { 1.0 };
                let bias = !last || head_bias;
                Linear::build(
                    store,
                    &alloc::format!("{name}.{i}"),
                    group,
                    widths[i],
                    widths[i + 1],
                    gain,
                    bias,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }

    /// Hidden activations before the last layer.
    pub fn trunk(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for l in &self.layers[..self.layers.len() - 1] {
            h = l.forward(g, store, h);
            h = g.gelu(h);
        }
        h
    }

    pub fn remap(&mut self, f: &mut dyn FnMut(ParamId) -> ParamId) {
        for l in &mut self.layers {
            l.remap(f);
        }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Layer normalisation with learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gain: store.add(
                alloc::format!("{name}.gain"),
                group,
                Tensor::full(&[1, width], 1.0),
                false,
            ),
            shift: store.add(alloc::format!("{name}.shift"), group, Tensor::zeros(&[1, width]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.normalize_rows(x, LAYER_NORM_EPS);
        let gain = store.var(g, self.gain);
        let shift = store.var(g, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }

    pub fn remap(&mut self, f: &mut dyn FnMut(ParamId) -> ParamId) {
        self.gain = f(self.gain);
        self.shift = f(self.shift);
    }
}

/// Sinusoidal position table, `len x width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for t in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = math::powf(10_000.0, -2.0 * pair / width as f64);
            let angle = t as f64 * freq;
            data[t * width + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    Tensor::from_parts(vec![len, width], data)
}
