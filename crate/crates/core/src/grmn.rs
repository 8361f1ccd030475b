//! Gated residual motion network.
//!
//! Audio features pass through a temporal convolution, a pointwise MLP and a
//! transformer encoder; action-unit features through a pointwise MLP. Both
//! streams are instance-normalised over time and re-modulated with a gain
//! and shift predicted from the identity embedding by an identity-specific
//! MLP. Three decoder branches read the modulated streams:
//!
//! * base: modulated audio to neutral face and mouth offsets,
//! * residual: both streams to a 7-way emotion latent `z_e`, then to
//!   emotion offsets,
//! * gate: `z_e` and modulated audio to a scalar `g` in (0, 1).
//!
//! The fused motion is `base + g * residual`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::nn::{sinusoidal_positions, LayerNorm, Linear, Mlp, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Emotion classes of the teacher, in order.
pub const EMOTIONS: [&str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];
pub const NUM_EMOTIONS: usize = 7;
pub const NEUTRAL: usize = 6;
/// Variance floor of the instance normalisation.
pub const ADAIN_EPS: f64 = 1e-5;
/// Values per mouth Gaussian offset: position, axis-angle, scale.
pub const MOUTH_STRIDE: usize = 9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrmnError {
    #[error("{which} features have width {got}, expected {expected}")]
    FeatureDim {
        which: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("audio has {audio} frames but action units have {au}")]
    LengthMismatch { audio: usize, au: usize },
    #[error("sequence is empty")]
    Empty,
    #[error("identity {0} has no modulation parameters")]
    UnknownIdentity(usize),
    #[error("mouth row {row} is outside a {frames}-frame sequence")]
    MouthRow { row: usize, frames: usize },
    #[error("{what}: shapes disagree")]
    Shape { what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrmnConfig {
    pub d_audio: usize,
    pub d_au: usize,
    pub d_identity: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub adain_hidden: usize,
    /// Expression coefficients K; face offsets have K + 3 entries.
    pub num_expr: usize,
    /// Intra-oral Gaussians; mouth offsets have 9 per Gaussian.
    pub num_mouth: usize,
    /// Initial scale of the motion output heads.
    pub head_gain: f64,
}

impl Default for GrmnConfig {
    fn default() -> Self {
        Self {
            d_audio: 64,
            d_au: 17,
            d_identity: 512,
            d_hidden: 64,
            layers: 2,
            heads: 4,
            adain_hidden: 64,
            num_expr: 10,
            num_mouth: 0,
            head_gain: 1e-2,
        }
    }
}

impl GrmnConfig {
    pub fn face_dim(&self) -> usize {
        self.num_expr + 3
    }

    pub fn mouth_dim(&self) -> usize {
        self.num_mouth * MOUTH_STRIDE
    }
}

/// Identity-specific modulation MLPs for the audio and action-unit streams.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaInParams {
    pub audio: Mlp,
    pub au: Mlp,
}

impl AdaInParams {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.audio.params();
        p.extend(self.au.params());
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TransformerLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ffn: Mlp,
}

/// Shared trunk plus separate face and mouth output layers.
#[derive(Debug, Clone, PartialEq)]
struct MotionHead {
    trunk: Linear,
    face: Linear,
    mouth: Option<Linear>,
}

impl MotionHead {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, c: &GrmnConfig, rng: &mut R) -> Self {
        let group = ParamGroup::Network;
        let trunk = Linear::new(
            store,
            &alloc::format!("{name}.trunk"),
            group,
            input,
            c.d_hidden,
            1.0,
            rng,
        );
        let face = Linear::new(
            store,
            &alloc::format!("{name}.face"),
            group,
            c.d_hidden,
            c.face_dim(),
            c.head_gain,
            rng,
        );
        let mouth = (c.num_mouth > 0).then(|| {
            Linear::new(
                store,
                &alloc::format!("{name}.mouth"),
                group,
                c.d_hidden,
                c.mouth_dim(),
                c.head_gain,
                rng,
            )
        });
        Self { trunk, face, mouth }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mouth_rows: &[usize]) -> (Var, Option<Var>) {
        let h = self.trunk.forward(g, store, x);
        let h = g.gelu(h);
        let face = self.face.forward(g, store, h);
        let mouth = match &self.mouth {
            Some(m) if !mouth_rows.is_empty() => {
                let rows = g.gather_rows(h, mouth_rows);
                Some(m.forward(g, store, rows))
            }
            _ => None,
        };
        (face, mouth)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.face.params());
        if let Some(m) = &self.mouth {
            p.extend(m.params());
        }
        p
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MotionVars {
    /// `T x (K + 3)` each.
    pub face_base: Var,
    pub face_residual: Var,
    pub face: Var,
    /// `R x 9M` for the requested mouth rows, when the model has a mouth.
    pub mouth_base: Option<Var>,
    pub mouth_residual: Option<Var>,
    pub mouth: Option<Var>,
    /// `T x 7` emotion logits.
    pub z_e: Var,
    /// `T x 1` gate.
    pub gate: Var,
}

/// Per-frame motion values.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionOutput {
    pub frames: usize,
    pub face_dim: usize,
    pub mouth_dim: usize,
    pub face_base: Vec<f64>,
    pub face_residual: Vec<f64>,
    pub face: Vec<f64>,
    /// Rows follow the `mouth_rows` of the forward call.
    pub mouth_base: Vec<f64>,
    pub mouth_residual: Vec<f64>,
    pub mouth: Vec<f64>,
    pub z_e: Vec<f64>,
    pub gate: Vec<f64>,
}

impl MotionOutput {
    pub fn from_graph(g: &Graph, v: &MotionVars, config: &GrmnConfig) -> Self {
        let data = |x: Option<Var>| x.map_or_else(Vec::new, |x| g.value(x).data().to_vec());
        Self {
            frames: g.value(v.gate).len(),
            face_dim: config.face_dim(),
            mouth_dim: config.mouth_dim(),
            face_base: g.value(v.face_base).data().to_vec(),
            face_residual: g.value(v.face_residual).data().to_vec(),
            face: g.value(v.face).data().to_vec(),
            mouth_base: data(v.mouth_base),
            mouth_residual: data(v.mouth_residual),
            mouth: data(v.mouth),
            z_e: g.value(v.z_e).data().to_vec(),
            gate: g.value(v.gate).data().to_vec(),
        }
    }

    pub fn face_row(&self, t: usize) -> &[f64] {
        &self.face[t * self.face_dim..(t + 1) * self.face_dim]
    }

    pub fn mouth_row(&self, r: usize) -> &[f64] {
        &self.mouth[r * self.mouth_dim..(r + 1) * self.mouth_dim]
    }

    pub fn z_row(&self, t: usize) -> &[f64] {
        &self.z_e[t * NUM_EMOTIONS..(t + 1) * NUM_EMOTIONS]
    }

    /// Index of the largest emotion logit of frame `t`.
    pub fn emotion_argmax(&self, t: usize) -> usize {
        argmax(self.z_row(t))
    }
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `base + g * residual`, row by row (`g` has one entry per row).
pub fn fuse(base: &[f64], residual: &[f64], gate: &[f64]) -> Result<Vec<f64>, GrmnError> {
    if base.len() != residual.len() || gate.is_empty() || !base.len().is_multiple_of(gate.len()) {
        return Err(GrmnError::Shape { what: "fuse" });
    }
    let width = base.len() / gate.len();
    Ok(base
        .iter()
        .zip(residual)
        .enumerate()
        .map(|(i, (b, r))| b + gate[i / width] * r)
        .collect())
}

/// Differentiable [`fuse`]: `base, residual: R x C`, `gate: R x 1`.
pub fn fuse_op(g: &mut Graph, base: Var, residual: Var, gate: Var) -> Var {
    let scaled = g.mul_col(residual, gate);
    g.add(base, scaled)
}

/// Instance-normalise `stream` over time, then apply the gain and shift
/// predicted by `mlp` from the identity embedding `s` (`1 x D_s`).
pub fn adain(g: &mut Graph, store: &ParamStore, mlp: &Mlp, stream: Var, s: Var) -> Var {
    let c = g.value(stream).cols();
    let gb = mlp.forward(g, store, s);
    let gamma = g.slice_cols(gb, 0, c);
    let beta = g.slice_cols(gb, c, c);
    let n = g.normalize_cols(stream, ADAIN_EPS);
    let y = g.mul_row(n, gamma);
    g.add_row(y, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grmn {
    pub config: GrmnConfig,
    conv: Linear,
    proj: Mlp,
    layers: Vec<TransformerLayer>,
    au_enc: Mlp,
    base: MotionHead,
    emo_enc: Mlp,
    emo_dec: MotionHead,
    gate: Mlp,
    adain: Vec<AdaInParams>,
}

impl Grmn {
    /// Build the shared network and `identities` modulation MLPs, adding all
    /// parameters to `store`.
    pub fn new<R: Rng + ?Sized>(config: GrmnConfig, identities: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let c = config;
        let net = ParamGroup::Network;
        let dh = c.d_hidden;
        assert!(
            c.heads > 0 && dh.is_multiple_of(c.heads),
            "hidden width must split evenly across heads"
        );
        let conv = Linear::new(store, "audio.conv", net, 3 * c.d_audio, dh, 1.0, rng);
        let proj = Mlp::build(store, "audio.proj", net, &[dh, dh, dh], 1.0, c.layers > 0, rng);
        // Key biases cancel in the softmax, and constant shifts at the end of
        // either encoder cancel in the instance normalisation, so those
        // layers carry no bias.
        let layers = (0..c.layers)
            .map(|l| {
                let name = |s: &str| alloc::format!("audio.layer{l}.{s}");
                let top = l + 1 == c.layers;
                TransformerLayer {
                    ln1: LayerNorm::new(store, &name("ln1"), net, dh),
                    q: Linear::new(store, &name("q"), net, dh, dh, 1.0, rng),
                    k: Linear::build(store, &name("k"), net, dh, dh, 1.0, false, rng),
                    v: Linear::new(store, &name("v"), net, dh, dh, 1.0, rng),
                    o: Linear::build(store, &name("o"), net, dh, dh, 1.0, !top, rng),
                    ln2: LayerNorm::new(store, &name("ln2"), net, dh),
                    ffn: Mlp::build(store, &name("ffn"), net, &[dh, 2 * dh, dh], 1.0, !top, rng),
                }
            })
            .collect();
        let au_enc = Mlp::build(store, "au.enc", net, &[c.d_au, dh, dh], 1.0, false, rng);
        let base = MotionHead::new(store, "base", dh, &c, rng);
        let emo_enc = Mlp::new(store, "emo.enc", net, &[2 * dh, dh, NUM_EMOTIONS], 1.0, rng);
        let emo_dec = MotionHead::new(store, "emo.dec", NUM_EMOTIONS, &c, rng);
        let gate = Mlp::new(store, "gate", net, &[NUM_EMOTIONS + dh, dh, 1], 1.0, rng);
        let mut grmn = Self {
            config,
            conv,
            proj,
            layers,
            au_enc,
            base,
            emo_enc,
            emo_dec,
            gate,
            adain: Vec::new(),
        };
        for _ in 0..identities {
            grmn.add_identity(store, rng);
        }
        grmn
    }

    /// New identity with freshly initialised modulation (gain 1, shift 0
    /// plus a small learned correction). Returns its index.
    pub fn add_identity<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R) -> usize {
        let i = self.adain.len();
        let c = self.config;
        let group = ParamGroup::AdaIn(i);
        let mut make = |stream: &str| {
            let mlp = Mlp::new(
                store,
                &alloc::format!("adain{i}.{stream}"),
                group,
                &[c.d_identity, c.adain_hidden, 2 * c.d_hidden],
                c.head_gain,
                rng,
            );
            let bias = mlp.last().bias.expect("modulation head has a bias");
            let mut b = vec![0.0; 2 * c.d_hidden];
            b[..c.d_hidden].fill(1.0);
            *store.get_mut(bias) = Tensor::from_parts(vec![1, 2 * c.d_hidden], b);
            mlp
        };
        let audio = make("audio");
        let au = make("au");
        self.adain.push(AdaInParams { audio, au });
        i
    }

    /// New identity whose modulation starts at the elementwise mean of the
    /// given identities' parameters.
    pub fn add_identity_from_mean<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        sources: &[usize],
        rng: &mut R,
    ) -> Result<usize, GrmnError> {
        if let Some(&bad) = sources.iter().find(|&&s| s >= self.adain.len()) {
            return Err(GrmnError::UnknownIdentity(bad));
        }
        let i = self.add_identity(store, rng);
        if sources.is_empty() {
            return Ok(i);
        }
        let target = self.adain[i].params();
        for (k, &id) in target.iter().enumerate() {
            let mut acc = Tensor::zeros(store.get(id).dims());
            for &s in sources {
                acc.add_scaled(store.get(self.adain[s].params()[k]), 1.0 / sources.len() as f64);
            }
            *store.get_mut(id) = acc;
        }
        Ok(i)
    }

    /// Point every parameter id at the same-named parameter of `store`;
    /// `built` is the store this network was constructed into.
    pub fn rebind(&mut self, built: &ParamStore, store: &ParamStore) -> Result<(), String> {
        let mut missing = None;
        let mut f = |id: ParamId| match store.matching(built, id) {
            Some(found) => found,
            None => {
                missing.get_or_insert_with(|| built.entry(id).name.clone());
                id
            }
        };
        self.conv.remap(&mut f);
        self.proj.remap(&mut f);
        for l in &mut self.layers {
            l.ln1.remap(&mut f);
            for lin in [&mut l.q, &mut l.k, &mut l.v, &mut l.o] {
                lin.remap(&mut f);
            }
            l.ln2.remap(&mut f);
            l.ffn.remap(&mut f);
        }
        self.au_enc.remap(&mut f);
        for h in [&mut self.base, &mut self.emo_dec] {
            h.trunk.remap(&mut f);
            h.face.remap(&mut f);
            if let Some(m) = &mut h.mouth {
                m.remap(&mut f);
            }
        }
        self.emo_enc.remap(&mut f);
        self.gate.remap(&mut f);
        for a in &mut self.adain {
            a.audio.remap(&mut f);
            a.au.remap(&mut f);
        }
        match missing {
            Some(name) => Err(alloc::format!("parameter {name} is missing or has the wrong shape")),
            None => Ok(()),
        }
    }

    pub fn identities(&self) -> usize {
        self.adain.len()
    }

    pub fn adain_params(&self, identity: usize) -> Option<&AdaInParams> {
        self.adain.get(identity)
    }

    /// Shared network parameters (everything but the modulation MLPs).
    pub fn network_params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.proj.params());
        for l in &self.layers {
            p.extend(l.ln1.params());
            for lin in [&l.q, &l.k, &l.v, &l.o] {
                p.extend(lin.params());
            }
            p.extend(l.ln2.params());
            p.extend(l.ffn.params());
        }
        p.extend(self.au_enc.params());
        p.extend(self.base.params());
        p.extend(self.emo_enc.params());
        p.extend(self.emo_dec.params());
        p.extend(self.gate.params());
        p
    }

    fn check(&self, g: &Graph, audio: Var, au: Var, s: Var, identity: usize) -> Result<usize, GrmnError> {
        let c = &self.config;
        let (a, e, sv) = (g.value(audio), g.value(au), g.value(s));
        if a.cols() != c.d_audio {
            return Err(GrmnError::FeatureDim {
                which: "audio",
                expected: c.d_audio,
                got: a.cols(),
            });
        }
        if e.cols() != c.d_au {
            return Err(GrmnError::FeatureDim {
                which: "action-unit",
                expected: c.d_au,
                got: e.cols(),
            });
        }
        if sv.len() != c.d_identity {
            return Err(GrmnError::FeatureDim {
                which: "identity",
                expected: c.d_identity,
                got: sv.len(),
            });
        }
        if a.rows() != e.rows() {
            return Err(GrmnError::LengthMismatch {
                audio: a.rows(),
                au: e.rows(),
            });
        }
        if identity >= self.adain.len() {
            return Err(GrmnError::UnknownIdentity(identity));
        }
        Ok(a.rows())
    }

    /// `T x D_a` audio to `T x D_h` hidden sequence.
    pub fn encode_audio(&self, g: &mut Graph, store: &ParamStore, audio: Var) -> Var {
        let t = g.value(audio).rows();
        let prev = g.shift_rows(audio, 1);
        let next = g.shift_rows(audio, -1);
        let window = g.concat_cols(&[prev, audio, next]);
        let h = self.conv.forward(g, store, window);
        let h = g.gelu(h);
        let h = self.proj.forward(g, store, h);
        let pos = g.constant(sinusoidal_positions(t, self.config.d_hidden));
        let mut x = g.add(h, pos);
        for layer in &self.layers {
            x = self.transformer_layer(g, store, layer, x);
        }
        x
    }

    fn transformer_layer(&self, g: &mut Graph, store: &ParamStore, l: &TransformerLayer, x: Var) -> Var {
        let heads = self.config.heads;
        let dk = self.config.d_hidden / heads;
        let n = l.ln1.forward(g, store, x);
        let q = l.q.forward(g, store, n);
        let k = l.k.forward(g, store, n);
        let v = l.v.forward(g, store, n);
        let scale = 1.0 / crate::math::sqrt(dk as f64);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&outs);
        let o = l.o.forward(g, store, cat);
        let x = g.add(x, o);
        let n2 = l.ln2.forward(g, store, x);
        let f = l.ffn.forward(g, store, n2);
        g.add(x, f)
    }

    /// `T x D_e` action units to `T x D_h`, frame by frame.
    pub fn encode_au(&self, g: &mut Graph, store: &ParamStore, au: Var) -> Var {
        self.au_enc.forward(g, store, au)
    }

    /// Full forward pass. Mouth offsets are produced only for the frames in
    /// `mouth_rows` (in that order).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        audio: Var,
        au: Var,
        s: Var,
        identity: usize,
        mouth_rows: &[usize],
    ) -> Result<MotionVars, GrmnError> {
        let frames = self.check(g, audio, au, s, identity)?;
        if frames == 0 {
            return Err(GrmnError::Empty);
        }
        if let Some(&row) = mouth_rows.iter().find(|&&r| r >= frames) {
            return Err(GrmnError::MouthRow { row, frames });
        }
        let s = if g.value(s).dims().len() == 1 {
            g.reshape(s, &[1, self.config.d_identity])
        } else {
            s
        };
        let ada = &self.adain[identity];
        let a = self.encode_audio(g, store, audio);
        let e = self.encode_au(g, store, au);
        let a = adain(g, store, &ada.audio, a, s);
        let e = adain(g, store, &ada.au, e, s);

        let (face_base, mouth_base) = self.base.forward(g, store, a, mouth_rows);
        let ae = g.concat_cols(&[a, e]);
        let z_e = self.emo_enc.forward(g, store, ae);
        let (face_residual, mouth_residual) = self.emo_dec.forward(g, store, z_e, mouth_rows);
        let gate_in = g.concat_cols(&[z_e, a]);
        let pre = self.gate.forward(g, store, gate_in);
        let gate = g.sigmoid(pre);

        let face = fuse_op(g, face_base, face_residual, gate);
        let mouth = match (mouth_base, mouth_residual) {
            (Some(b), Some(r)) => {
                let gm = g.gather_rows(gate, mouth_rows);
                Some(fuse_op(g, b, r, gm))
            }
            _ => None,
        };
        Ok(MotionVars {
            face_base,
            face_residual,
            face,
            mouth_base,
            mouth_residual,
            mouth,
            z_e,
            gate,
        })
    }

    /// Convenience wrapper on constant inputs.
    pub fn run(
        &self,
        store: &ParamStore,
        audio: &Tensor,
        au: &Tensor,
        s: &Tensor,
        identity: usize,
        mouth_rows: &[usize],
    ) -> Result<MotionOutput, GrmnError> {
        let mut g = Graph::new();
        let a = g.constant(audio.clone());
        let e = g.constant(au.clone());
        let sv = g.constant(s.clone());
        let v = self.forward(&mut g, store, a, e, sv, identity, mouth_rows)?;
        Ok(MotionOutput::from_graph(&g, &v, &self.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_report;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> GrmnConfig {
        GrmnConfig {
            d_audio: 6,
            d_au: 4,
            d_identity: 5,
            d_hidden: 8,
            layers: 2,
            heads: 2,
            adain_hidden: 6,
            num_expr: 3,
            num_mouth: 2,
            head_gain: 1e-2,
        }
    }

    fn randt(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| scale * crate::math::randn(rng)).collect()).unwrap()
    }

    fn fixture(seed: u64, identities: usize) -> (Grmn, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Grmn::new(small_config(), identities, &mut store, &mut rng);
        (net, store, rng)
    }

    #[test]
    fn fusion_identities() {
        let base = [1.0, 2.0, 0.3, -7.25];
        let res = [2.0, -2.0, 0.1, 1e-3];
        assert_eq!(fuse(&base, &res, &[0.0, 0.0]).unwrap(), base);
        let one = fuse(&base, &res, &[1.0, 1.0]).unwrap();
        for i in 0..4 {
            assert_eq!(one[i], base[i] + res[i]);
        }
        assert_eq!(fuse(&[1.0, 2.0], &[2.0, -2.0], &[0.5]).unwrap(), [2.0, 1.0]);
        assert!(fuse(&base, &res[..3], &[1.0]).is_err());
    }

    #[test]
    fn adain_modulation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "a", ParamGroup::AdaIn(0), &[3, 4, 4], 1.0, &mut rng);
        let last = *mlp.last();
        let stream = {
            let mut t = randt(&mut rng, &[10, 2], 1.0);
            // Channel 1 constant in time.
            for r in 0..10 {
                t.data_mut()[r * 2 + 1] = 0.7;
            }
            t
        };
        let s = randt(&mut rng, &[1, 3], 1.0);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.constant(stream.clone());
            let sv = g.constant(s.clone());
            let y = adain(&mut g, store, &mlp, x, sv);
            g.value(y).clone()
        };
        // gamma = 1, beta = 0
        *store.get_mut(last.weight) = Tensor::zeros(&[4, 4]);
        let last_bias = last.bias.unwrap();
        *store.get_mut(last_bias) = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let y = run(&store);
        let col: Vec<f64> = (0..10).map(|r| y.at2(r, 0)).collect();
        let mean = col.iter().sum::<f64>() / 10.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        for r in 0..10 {
            assert!(y.at2(r, 1).abs() < 1e-9);
        }
        // gamma = 0: output is beta whatever the input.
        *store.get_mut(last_bias) = Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.25, -1.5]).unwrap();
        let y = run(&store);
        for r in 0..10 {
            assert_eq!(y.at2(r, 0), 0.25);
            assert_eq!(y.at2(r, 1), -1.5);
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let (net, store, mut rng) = fixture(1, 2);
        let s = randt(&mut rng, &[5], 1.0);
        for t in [1usize, 25, 100] {
            let a = randt(&mut rng, &[t, 6], 1.0);
            let e = randt(&mut rng, &[t, 4], 1.0).map(f64::abs);
            let out = net.run(&store, &a, &e, &s, 0, &[0]).unwrap();
            assert_eq!(out.face.len(), t * 6);
            assert_eq!(out.z_e.len(), t * 7);
            assert_eq!(out.gate.len(), t);
            assert_eq!(out.mouth.len(), 18);
            assert!(out.gate.iter().all(|&g| g > 0.0 && g < 1.0));
            let again = net.run(&store, &a, &e, &s, 0, &[0]).unwrap();
            assert_eq!(out, again);
            let fused = fuse(&out.face_base, &out.face_residual, &out.gate).unwrap();
            for (x, y) in fused.iter().zip(&out.face) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let a = randt(&mut rng, &[3, 7], 1.0);
        let e = randt(&mut rng, &[3, 4], 1.0);
        assert!(matches!(
            net.run(&store, &a, &e, &s, 0, &[]),
            Err(GrmnError::FeatureDim { which: "audio", .. })
        ));
        let a = randt(&mut rng, &[4, 6], 1.0);
        assert!(matches!(
            net.run(&store, &a, &e, &s, 0, &[]),
            Err(GrmnError::LengthMismatch { .. })
        ));
        let a = randt(&mut rng, &[3, 6], 1.0);
        assert!(matches!(
            net.run(&store, &a, &e, &s, 5, &[]),
            Err(GrmnError::UnknownIdentity(5))
        ));
    }

    #[test]
    fn audio_attention_is_global_and_au_is_local() {
        let (net, store, mut rng) = fixture(2, 1);
        let a = randt(&mut rng, &[12, 6], 1.0);
        let mut a2 = a.clone();
        a2.data_mut()[5 * 6 + 2] += 0.5;
        let enc = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = net.encode_audio(&mut g, &store, v);
            g.value(y).clone()
        };
        let (y1, y2) = (enc(&a), enc(&a2));
        for t in 0..12 {
            let d: f64 = (0..8).map(|j| (y1.at2(t, j) - y2.at2(t, j)).abs()).fold(0.0, f64::max);
            assert!(d > 0.0, "frame {t} unaffected");
        }
        let e = randt(&mut rng, &[6, 4], 1.0);
        let mut e2 = e.clone();
        e2.data_mut()[3 * 4] += 1.0;
        let au = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = net.encode_au(&mut g, &store, v);
            g.value(y).clone()
        };
        let (y1, y2) = (au(&e), au(&e2));
        for t in 0..6 {
            let same = (0..8).all(|j| y1.at2(t, j) == y2.at2(t, j));
            assert_eq!(same, t != 3);
        }
        let zero = au(&Tensor::zeros(&[2, 4]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_range_and_zero_weight_midpoint() {
        let (net, mut store, mut rng) = fixture(4, 1);
        for _ in 0..100 {
            let t = 10;
            let a = randt(&mut rng, &[t, 6], 3.0);
            let e = randt(&mut rng, &[t, 4], 3.0);
            let s = randt(&mut rng, &[5], 3.0);
            let out = net.run(&store, &a, &e, &s, 0, &[]).unwrap();
            assert!(out.gate.iter().all(|&g| g > 0.0 && g < 1.0));
        }
        for id in net.gate.params() {
            let dims = store.get(id).dims().to_vec();
            *store.get_mut(id) = Tensor::zeros(&dims);
        }
        let a = randt(&mut rng, &[4, 6], 1.0);
        let e = randt(&mut rng, &[4, 4], 1.0);
        let s = randt(&mut rng, &[5], 1.0);
        let out = net.run(&store, &a, &e, &s, 0, &[]).unwrap();
        assert!(out.gate.iter().all(|&g| g == 0.5));
        // Monotone in the final bias.
        let bias = net.gate.last().bias.unwrap();
        let mut prev = 0.0;
        for k in -5..=5 {
            *store.get_mut(bias) = Tensor::new(vec![1, 1], vec![k as f64]).unwrap();
            let out = net.run(&store, &a, &e, &s, 0, &[]).unwrap();
            assert!(out.gate[0] > prev);
            prev = out.gate[0];
        }
    }

    #[test]
    fn identities_differ_only_through_modulation() {
        let (mut net, mut store, mut rng) = fixture(5, 2);
        let a = randt(&mut rng, &[6, 6], 1.0);
        let e = randt(&mut rng, &[6, 4], 1.0);
        let s = randt(&mut rng, &[5], 1.0);
        let o0 = net.run(&store, &a, &e, &s, 0, &[1]).unwrap();
        let o1 = net.run(&store, &a, &e, &s, 1, &[1]).unwrap();
        assert_ne!(o0.face, o1.face);
        assert_ne!(o0.gate, o1.gate);
        let mean = net.add_identity_from_mean(&mut store, &[0, 1], &mut rng).unwrap();
        for (k, &id) in net.adain_params(mean).unwrap().params().iter().enumerate() {
            let x = store.get(net.adain_params(0).unwrap().params()[k]);
            let y = store.get(net.adain_params(1).unwrap().params()[k]);
            for i in 0..x.len() {
                assert!((store.get(id).data()[i] - 0.5 * (x.data()[i] + y.data()[i])).abs() < 1e-15);
            }
        }
    }

    fn total(net: &Grmn, store: &ParamStore, g: &mut Graph, a: &Tensor, e: &Tensor, s: &Tensor) -> Var {
        let av = g.constant(a.clone());
        let ev = g.constant(e.clone());
        let sv = g.constant(s.clone());
        let v = net.forward(g, store, av, ev, sv, 0, &[0, 1]).unwrap();
        let mut parts = Vec::new();
        for (x, w) in [(v.face, 3.0), (v.mouth.unwrap(), 5.0), (v.z_e, 1.0), (v.gate, 2.0)] {
            let sq = g.square(x);
            let s = g.sum(sq);
            parts.push(g.scale(s, w));
        }
        // Separate terms on the branch outputs keep every head reachable.
        for x in [
            v.face_base,
            v.face_residual,
            v.mouth_base.unwrap(),
            v.mouth_residual.unwrap(),
        ] {
            let sin = g.tanh(x);
            parts.push(g.sum(sin));
        }
        g.add_n(&parts)
    }

    #[test]
    fn every_parameter_is_reachable() {
        let (net, store, mut rng) = fixture(6, 1);
        let a = randt(&mut rng, &[3, 6], 1.0);
        let e = randt(&mut rng, &[3, 4], 1.0);
        let s = randt(&mut rng, &[5], 1.0);
        let mut g = Graph::new();
        let l = total(&net, &store, &mut g, &a, &e, &s);
        let grads = g.backward(l).unwrap();
        for id in store.ids() {
            let gr = grads.get(id).unwrap();
            // Rounding noise alone stays far below this.
            assert!(gr.max_abs() > 1e-12, "{} has no gradient", store.entry(id).name);
        }
    }

    #[test]
    fn end_to_end_gradcheck_two_frames() {
        let (net, store, mut rng) = fixture(7, 1);
        let a = randt(&mut rng, &[2, 6], 1.0);
        let e = randt(&mut rng, &[2, 4], 1.0);
        let s = randt(&mut rng, &[5], 1.0);
        let mut g = Graph::new();
        let l = total(&net, &store, &mut g, &a, &e, &s);
        let grads = g.backward(l).unwrap();
        let mut worst: f64 = 0.0;
        for id in store.ids() {
            let x0 = store.get(id).clone();
            for i in (0..x0.len()).step_by(1 + x0.len() / 6) {
                let rep = finite_diff_report(
                    |x| {
                        let mut st = store.clone();
                        *st.get_mut(id) = x.clone();
                        let mut g = Graph::new();
                        let l = total(&net, &st, &mut g, &a, &e, &s);
                        Ok(g.value(l).item())
                    },
                    grads.get(id).unwrap(),
                    &x0,
                    1e-5,
                    &[i],
                )
                .unwrap();
                // Relative error, with an absolute floor for entries whose
                // true gradient is tiny.
                let err = (rep.analytic - rep.numeric).abs() / (rep.analytic.abs().max(rep.numeric.abs()) + 1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
