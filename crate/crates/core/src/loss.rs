//! Training losses and evaluation metrics.
//!
//! Images are `HW x C` row-major tensors (pixel-major, channels last) with
//! values in [0, 1]. SSIM uses an 11x11 Gaussian window (sigma 1.5) with
//! zero padding, so border pixels see a truncated window.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{log_softmax, Graph, Var};
use crate::grmn::{NEUTRAL, NUM_EMOTIONS};
use crate::math;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_C1: f64 = SSIM_K1 * SSIM_K1;
const SSIM_C2: f64 = SSIM_K2 * SSIM_K2;
/// Reported PSNR when the mean squared error falls below [`PSNR_MIN_MSE`].
pub const PSNR_CAP: f64 = 99.0;
pub const PSNR_MIN_MSE: f64 = 1e-10;
/// Tolerance on teacher distributions.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("emotion distribution is not normalised (sum {sum})")]
    NotDistribution { sum: f64 },
    #[error("emotion distribution has {0} entries, expected 7")]
    Classes(usize),
    #[error("{what}: shapes disagree")]
    Shape { what: &'static str },
    #[error("geometry mask selects no pixels")]
    EmptyMask,
    #[error("{term} loss is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("loss weight {name} is negative or not finite")]
    Weight { name: &'static str },
    #[error("teacher score {score} at frame {frame} disagrees with the distribution ({expected})")]
    ScoreMismatch { frame: usize, score: f64, expected: f64 },
}

/// `e = 1 - p[neutral]` for a valid 7-way distribution.
pub fn emotion_score(p: &[f64]) -> Result<f64, LossError> {
    check_distribution(p)?;
    Ok(1.0 - p[NEUTRAL])
}

fn check_distribution(p: &[f64]) -> Result<(), LossError> {
    if p.len() != NUM_EMOTIONS {
        return Err(LossError::Classes(p.len()));
    }
    let sum: f64 = p.iter().sum();
    if !(sum - 1.0).abs().le(&DISTRIBUTION_TOL) || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(LossError::NotDistribution { sum });
    }
    Ok(())
}

/// Per-frame teacher supervision. Frames with `present[t] == false` carry no
/// signal and are skipped by the distillation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignals {
    p_emo: Vec<[f64; NUM_EMOTIONS]>,
    score: Vec<f64>,
    present: Vec<bool>,
}

impl TeacherSignals {
    pub fn new(p_emo: Vec<[f64; NUM_EMOTIONS]>, score: Vec<f64>, present: Vec<bool>) -> Result<Self, LossError> {
        if p_emo.len() != score.len() || p_emo.len() != present.len() {
            return Err(LossError::Shape {
                what: "teacher signals",
            });
        }
        for (t, p) in p_emo.iter().enumerate() {
            if !present[t] {
                continue;
            }
            check_distribution(p)?;
            let expected = 1.0 - p[NEUTRAL];
            if (score[t] - expected).abs() > DISTRIBUTION_TOL {
                return Err(LossError::ScoreMismatch {
                    frame: t,
                    score: score[t],
                    expected,
                });
            }
        }
        Ok(Self { p_emo, score, present })
    }

    /// Fully present signals with scores derived from the distributions.
    pub fn from_distributions(p_emo: Vec<[f64; NUM_EMOTIONS]>) -> Result<Self, LossError> {
        let score = p_emo.iter().map(|p| emotion_score(p)).collect::<Result<Vec<_>, _>>()?;
        let present = vec![true; p_emo.len()];
        Ok(Self { p_emo, score, present })
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    pub fn p_emo(&self, t: usize) -> &[f64; NUM_EMOTIONS] {
        &self.p_emo[t]
    }

    pub fn score(&self, t: usize) -> f64 {
        self.score[t]
    }

    pub fn present(&self, t: usize) -> bool {
        self.present[t]
    }

    pub fn set_missing(&mut self, t: usize) {
        self.present[t] = false;
    }

    /// Window of `len` frames starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let r = start..start + len;
        Self {
            p_emo: self.p_emo[r.clone()].to_vec(),
            score: self.score[r.clone()].to_vec(),
            present: self.present[r].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dssim: f64,
    pub depth: f64,
    pub normal: f64,
    pub kl: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dssim: 0.2,
            depth: 1e-2,
            normal: 1e-3,
            kl: 1.0,
            score: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("dssim", self.dssim),
            ("depth", self.depth),
            ("normal", self.normal),
            ("kl", self.kl),
            ("score", self.score),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Weight { name });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adapt,
}

// SSIM ---------------------------------------------------------------------

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "same" filtering of one `h x w` plane with zero padding. The
/// kernel is symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &[f64], c: usize, channels: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    cxy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> SsimStats {
    let mx = blur(x, w, h, k);
    let my = blur(y, w, h, k);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = blur(&xx, w, h, k);
    let eyy = blur(&yy, w, h, k);
    let exy = blur(&xy, w, h, k);
    let n = w * h;
    SsimStats {
        vx: (0..n).map(|i| exx[i] - mx[i] * mx[i]).collect(),
        vy: (0..n).map(|i| eyy[i] - my[i] * my[i]).collect(),
        cxy: (0..n).map(|i| exy[i] - mx[i] * my[i]).collect(),
        mx,
        my,
    }
}

fn ssim_at(s: &SsimStats, i: usize) -> f64 {
    let a1 = 2.0 * s.mx[i] * s.my[i] + SSIM_C1;
    let a2 = 2.0 * s.cxy[i] + SSIM_C2;
    let b1 = s.mx[i] * s.mx[i] + s.my[i] * s.my[i] + SSIM_C1;
    let b2 = s.vx[i] + s.vy[i] + SSIM_C2;
    a1 * a2 / (b1 * b2)
}

fn check_image(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<usize, LossError> {
    let n = width * height;
    if n == 0 || a.len() != b.len() || !a.len().is_multiple_of(n) {
        return Err(LossError::Shape { what: "image" });
    }
    Ok(a.len() / n)
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, LossError> {
    let channels = check_image(a, b, width, height)?;
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..channels {
        let s = stats(&plane(a, c, channels), &plane(b, c, channels), width, height, &k);
        total += (0..width * height).map(|i| ssim_at(&s, i)).sum::<f64>();
    }
    Ok(total / a.len() as f64)
}

/// d(sum of the SSIM map)/dx for one channel.
fn ssim_grad_plane(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let s = stats(x, y, w, h, k);
    let n = w * h;
    let mut g_mu = vec![0.0; n];
    let mut g_xx = vec![0.0; n];
    let mut g_xy = vec![0.0; n];
    for i in 0..n {
        let (mx, my) = (s.mx[i], s.my[i]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * s.cxy[i] + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = s.vx[i] + s.vy[i] + SSIM_C2;
        let v = a1 * a2 / (b1 * b2);
        let d_mx = 2.0 * my * a2 / (b1 * b2) - v * 2.0 * mx / b1;
        let d_vx = -v / b2;
        let d_cxy = 2.0 * a1 / (b1 * b2);
        // vx = E[x^2] - mx^2 and cxy = E[xy] - mx my.
        g_mu[i] = d_mx - 2.0 * mx * d_vx - my * d_cxy;
        g_xx[i] = d_vx;
        g_xy[i] = d_cxy;
    }
    let bm = blur(&g_mu, w, h, k);
    let bxx = blur(&g_xx, w, h, k);
    let bxy = blur(&g_xy, w, h, k);
    (0..n).map(|i| bm[i] + 2.0 * x[i] * bxx[i] + y[i] * bxy[i]).collect()
}

/// Differentiable mean SSIM of two `HW x C` images.
pub fn ssim_op(g: &mut Graph, a: Var, b: Var, width: usize, height: usize) -> Result<Var, LossError> {
    let (av, bv) = (g.value(a), g.value(b));
    if av.dims() != bv.dims() {
        return Err(LossError::Shape { what: "image" });
    }
    let value = ssim(av.data(), bv.data(), width, height)?;
    let channels = av.len() / (width * height);
    Ok(g.custom(&[a, b], Tensor::scalar(value), move |ctx| {
        let k = gaussian_window();
        let up = ctx.grad.item() / ctx.inputs[0].len() as f64;
        let grad_of = |x: &Tensor, y: &Tensor| {
            let mut out = vec![0.0; x.len()];
            for c in 0..channels {
                let gp = ssim_grad_plane(
                    &plane(x.data(), c, channels),
                    &plane(y.data(), c, channels),
                    width,
                    height,
                    &k,
                );
                for (i, v) in gp.into_iter().enumerate() {
                    out[i * channels + c] = up * v;
                }
            }
            Tensor::from_parts(x.dims().to_vec(), out)
        };
        let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
        vec![
            ctx.needs(0).then(|| grad_of(x, y)),
            // SSIM is symmetric in its arguments.
            ctx.needs(1).then(|| grad_of(y, x)),
        ]
    }))
}

// Losses -------------------------------------------------------------------

/// `mean|I - I_gt| + lambda * (1 - SSIM(I, I_gt))`.
pub fn loss_render(
    g: &mut Graph,
    img: Var,
    gt: Var,
    width: usize,
    height: usize,
    dssim: f64,
) -> Result<Var, LossError> {
    if g.value(img).dims() != g.value(gt).dims() {
        return Err(LossError::Shape { what: "render loss" });
    }
    let d = g.sub(img, gt);
    let ad = g.abs(d);
    let l1 = g.mean(ad);
    if dssim == 0.0 {
        return Ok(l1);
    }
    let s = ssim_op(g, img, gt, width, height)?;
    let ds = g.scale(s, -dssim);
    let ds = g.add_scalar(ds, dssim);
    Ok(g.add(l1, ds))
}

/// Present frames of `teacher` among `0..frames`.
fn supervised(teacher: &TeacherSignals, frames: usize) -> Result<Vec<usize>, LossError> {
    if teacher.len() != frames {
        return Err(LossError::Shape { what: "teacher length" });
    }
    Ok((0..frames).filter(|&t| teacher.present(t)).collect())
}

/// Mean over supervised frames of `KL(p_emo || softmax(z_e))`, or `None`
/// when no frame carries a teacher signal.
pub fn loss_kl(g: &mut Graph, z_e: Var, teacher: &TeacherSignals) -> Result<Option<Var>, LossError> {
    let zv = g.value(z_e);
    if zv.cols() != NUM_EMOTIONS {
        return Err(LossError::Shape { what: "emotion logits" });
    }
    let rows = supervised(teacher, zv.rows())?;
    if rows.is_empty() {
        return Ok(None);
    }
    let n = rows.len() as f64;
    let mut p = Vec::with_capacity(rows.len() * NUM_EMOTIONS);
    let mut entropy = 0.0;
    for &t in &rows {
        for &v in teacher.p_emo(t) {
            p.push(v);
            if v > 0.0 {
                entropy += v * math::ln(v);
            }
        }
    }
    let z = g.gather_rows(z_e, &rows);
    let ls = g.log_softmax_rows(z);
    let pt = g.constant(Tensor::from_parts(vec![rows.len(), NUM_EMOTIONS], p));
    let cross = g.mul(pt, ls);
    let s = g.sum(cross);
    let s = g.scale(s, -1.0 / n);
    Ok(Some(g.add_scalar(s, entropy / n)))
}

/// Plain KL divergence `KL(p || softmax(z))` with `0 log 0 = 0`.
pub fn kl_value(z: &[f64], p: &[f64]) -> f64 {
    let ls = log_softmax(z);
    p.iter()
        .zip(&ls)
        .map(|(&pv, &l)| if pv > 0.0 { pv * (math::ln(pv) - l) } else { 0.0 })
        .sum()
}

/// Mean over supervised frames of `|g - e|`, or `None` when no frame
/// carries a teacher signal.
pub fn loss_score(g: &mut Graph, gate: Var, teacher: &TeacherSignals) -> Result<Option<Var>, LossError> {
    let gv = g.value(gate);
    if gv.cols() != 1 {
        return Err(LossError::Shape { what: "gate" });
    }
    let rows = supervised(teacher, gv.rows())?;
    if rows.is_empty() {
        return Ok(None);
    }
    let e: Vec<f64> = rows.iter().map(|&t| teacher.score(t)).collect();
    let gg = g.gather_rows(gate, &rows);
    let et = g.constant(Tensor::from_parts(vec![rows.len(), 1], e));
    let d = g.sub(gg, et);
    let a = g.abs(d);
    Ok(Some(g.mean(a)))
}

/// Pseudo-ground-truth depth (`HW`) and unit normals (`HW x 3`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTarget {
    pub depth: Vec<f64>,
    pub normals: Vec<[f64; 3]>,
    /// Pixels that take part in the loss.
    pub mask: Vec<bool>,
}

impl GeometryTarget {
    /// Target from stored maps: pixels with a zero normal or background
    /// depth are left out.
    pub fn from_maps(depth: Vec<f64>, normals: Vec<[f64; 3]>) -> Self {
        let mask = depth
            .iter()
            .zip(&normals)
            .map(|(&d, n)| d.is_finite() && d < 0.5 * crate::render::BACKGROUND_DEPTH && *n != [0.0; 3])
            .collect();
        Self { depth, normals, mask }
    }
}

/// `lambda_d * mean|D - D_gt| + lambda_n * mean(1 - N . N_gt)` over masked
/// pixels. `depth` is `HW x 1`, `normals` is `HW x 3`.
pub fn loss_geo(
    g: &mut Graph,
    depth: Var,
    normals: Var,
    target: &GeometryTarget,
    lambda_d: f64,
    lambda_n: f64,
) -> Result<Var, LossError> {
    let n = target.mask.len();
    if g.value(depth).len() != n
        || g.value(normals).len() != 3 * n
        || target.depth.len() != n
        || target.normals.len() != n
    {
        return Err(LossError::Shape { what: "geometry loss" });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| target.mask[i]).collect();
    if rows.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let m = rows.len();
    let depth = g.reshape(depth, &[n, 1]);
    let d = g.gather_rows(depth, &rows);
    let dgt = g.constant(Tensor::from_parts(
        vec![m, 1],
        rows.iter().map(|&i| target.depth[i]).collect(),
    ));
    let dd = g.sub(d, dgt);
    let ad = g.abs(dd);
    let ld = g.mean(ad);
    let ld = g.scale(ld, lambda_d);

    let normals = g.reshape(normals, &[n, 3]);
    let nr = g.gather_rows(normals, &rows);
    let ngt = g.constant(Tensor::from_parts(
        vec![m, 3],
        rows.iter().flat_map(|&i| target.normals[i]).collect(),
    ));
    let dot = g.mul(nr, ngt);
    let cos = g.sum(dot);
    // lambda_n * (1 - sum(cos) / m)
    let ln = g.scale(cos, -lambda_n / m as f64);
    let ln = g.add_scalar(ln, lambda_n);
    Ok(g.add(ld, ln))
}

/// Individual loss terms of one step. Distillation terms are `None` when
/// the window has no teacher signal.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub render: Var,
    pub kl: Option<Var>,
    pub score: Option<Var>,
    pub geo: Option<Var>,
}

/// Scalar values of [`LossTerms`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub render: f64,
    pub kl: Option<f64>,
    pub score: Option<f64>,
    pub geo: Option<f64>,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item());
        LossValues {
            render: g.value(self.render).item(),
            kl: v(self.kl),
            score: v(self.score),
            geo: v(self.geo),
        }
    }
}

fn finite(term: &'static str, value: f64) -> Result<(), LossError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite { term, value })
    }
}

/// `L_render + w_kl L_kl + w_score L_score`, plus `L_geo` in the adapt
/// phase only.
pub fn total_loss(parts: &LossValues, weights: &LossWeights, phase: Phase) -> Result<f64, LossError> {
    finite("render", parts.render)?;
    let mut total = parts.render;
    if let Some(kl) = parts.kl {
        finite("kl", kl)?;
        total += weights.kl * kl;
    }
    if let Some(s) = parts.score {
        finite("score", s)?;
        total += weights.score * s;
    }
    if phase == Phase::Adapt {
        if let Some(geo) = parts.geo {
            finite("geo", geo)?;
            total += geo;
        }
    }
    Ok(total)
}

/// Graph form of [`total_loss`].
pub fn total_loss_op(g: &mut Graph, terms: &LossTerms, weights: &LossWeights, phase: Phase) -> Result<Var, LossError> {
    total_loss(&terms.values(g), weights, phase)?;
    let mut parts = vec![terms.render];
    if let Some(kl) = terms.kl {
        parts.push(g.scale(kl, weights.kl));
    }
    if let Some(s) = terms.score {
        parts.push(g.scale(s, weights.score));
    }
    if phase == Phase::Adapt {
        if let Some(geo) = terms.geo {
            parts.push(geo);
        }
    }
    Ok(g.add_n(&parts))
}

// Metrics ------------------------------------------------------------------

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LossError::Shape { what: "image" });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    let m = mse(a, b)?;
    if m < PSNR_MIN_MSE {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * math::log10(1.0 / m)).min(PSNR_CAP))
}

/// Mean Euclidean distance between matched 2D landmarks.
pub fn lmd(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64, LossError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(LossError::Shape { what: "landmarks" });
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| math::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1])))
        .sum();
    Ok(s / pred.len() as f64)
}
