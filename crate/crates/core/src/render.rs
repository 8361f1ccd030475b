//! Differentiable splatting of world-space Gaussians.
//!
//! Gaussians are projected with a pinhole camera, sorted once by camera
//! depth (ties broken by index) and composited front to back per pixel.
//! Pixel `(x, y)` samples the image plane at its integer coordinates.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::geometry::{self, Mat3, Vec3};
use crate::math;
use crate::rig::{self, GlobalGaussian, GEOM_COLS, GEOM_MU, GEOM_ROT, GEOM_SCALE};
use crate::tensor::Tensor;

/// Camera z reported where nothing was drawn.
pub const BACKGROUND_DEPTH: f64 = 1.0e3;
/// Added to the diagonal of every projected covariance, in pixels squared.
pub const COV2D_BLUR: f64 = 0.3;
/// Per-splat opacity cap.
pub const MAX_ALPHA: f64 = 0.99;
/// Splat contributions below this opacity are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Accumulated weight below which a pixel counts as background.
pub const MIN_WEIGHT: f64 = 1e-6;

/// Columns of the rendered image tensor (`H*W x RENDER_COLS`).
pub const RENDER_COLS: usize = 5;
pub const OUT_ALPHA: usize = 3;
pub const OUT_DEPTH: usize = 4;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("camera: {0}")]
    Camera(&'static str),
    #[error("Gaussian {index} has a non-finite attribute")]
    NonFinite { index: usize },
    #[error("spherical-harmonic width {0} is not 3 (d + 1)^2 with d <= 3")]
    ShWidth(usize),
    #[error("input shapes disagree: {0}")]
    Shape(&'static str),
}

/// Pinhole camera with world-to-camera extrinsics. The camera looks down
/// its +z axis; +x is right and +y is down in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: Mat3,
    pub trans: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rot: Mat3,
        trans: Vec3,
        width: usize,
        height: usize,
        near: f64,
    ) -> Result<Self, RenderError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(RenderError::Camera("focal lengths must be positive"));
        }
        if !(near > 0.0) {
            return Err(RenderError::Camera("near plane must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(RenderError::Camera("image must have positive size"));
        }
        if geometry::orthonormality_error(&rot) > 1e-9 || (geometry::det(&rot) - 1.0).abs() > 1e-9 {
            return Err(RenderError::Camera("rotation must be orthonormal with det 1"));
        }
        if !(cx.is_finite() && cy.is_finite() && trans.iter().all(|t| t.is_finite())) {
            return Err(RenderError::Camera("non-finite intrinsics or translation"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rot,
            trans,
            width,
            height,
            near,
        })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        geometry::scale(geometry::mat_t_vec(&self.rot, self.trans), -1.0)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        geometry::add(geometry::mat_vec(&self.rot, p), self.trans)
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_camera(&self, pc: Vec3) -> [f64; 2] {
        [self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy]
    }

    pub fn project(&self, p: Vec3) -> [f64; 2] {
        self.project_camera(self.to_camera(p))
    }

    /// World-space direction of the ray through a pixel (not normalized).
    pub fn pixel_ray(&self, px: [f64; 2]) -> Vec3 {
        let d = [(px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0];
        geometry::mat_t_vec(&self.rot, d)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// A Gaussian after projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    /// `[xx, xy, yy]`.
    pub cov2d: [f64; 3],
    pub camera_z: f64,
}

/// Result of projecting one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(Projected),
    Culled,
}

impl Projection {
    pub fn visible(self) -> Option<Projected> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::Culled => None,
        }
    }
}

/// Image planes produced by [`render`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`, row-major.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-weighted expected camera z, [`BACKGROUND_DEPTH`] where empty.
    pub depth: Vec<f64>,
    /// Number of splats composited into each pixel.
    pub count: Vec<u32>,
}

impl RenderOutput {
    fn from_planes(width: usize, height: usize, planes: &[f64], count: Vec<u32>) -> Self {
        let n = width * height;
        let mut color = Vec::with_capacity(3 * n);
        let mut alpha = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for px in planes.chunks(RENDER_COLS) {
            color.extend_from_slice(&px[..3]);
            alpha.push(px[OUT_ALPHA]);
            depth.push(px[OUT_DEPTH]);
        }
        Self {
            width,
            height,
            color,
            alpha,
            depth,
            count,
        }
    }

    pub fn pixel_color(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Number of SH coefficients per channel for a flattened width.
pub fn sh_coeffs(width: usize) -> Result<usize, RenderError> {
    match width {
        3 => Ok(1),
        12 => Ok(4),
        27 => Ok(9),
        48 => Ok(16),
        w => Err(RenderError::ShWidth(w)),
    }
}

/// Real SH basis values along a unit direction.
pub fn sh_basis(dir: Vec3, coeffs: usize) -> [f64; 16] {
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if coeffs > 1 {
        let [x, y, z] = dir;
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
        if coeffs > 4 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            b[4] = SH_C2[0] * x * y;
            b[5] = SH_C2[1] * y * z;
            b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
            b[7] = SH_C2[3] * x * z;
            b[8] = SH_C2[4] * (xx - yy);
            if coeffs > 9 {
                b[9] = SH_C3[0] * y * (3.0 * xx - yy);
                b[10] = SH_C3[1] * x * y * z;
                b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
                b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
                b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
                b[14] = SH_C3[5] * z * (xx - yy);
                b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
            }
        }
    }
    b
}

/// SH DC coefficient that renders as `color` (degree 0, inverse of the
/// `C0 dc + 0.5` mapping).
pub fn dc_from_color(color: f64) -> f64 {
    (color - 0.5) / SH_C0
}

fn covariance(rot: &Mat3, scale: Vec3) -> (Mat3, Mat3) {
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            m[a][b] = rot[a][b] * scale[b];
        }
    }
    (geometry::mat_mul(&m, &geometry::transpose(&m)), m)
}

// Projection with every intermediate the backward pass needs.
#[derive(Clone, Copy)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    z: f64,
    color: [f64; 3],
    opacity: f64,
    bbox: [usize; 4],
}

fn project_raw(mu: Vec3, rot: &Mat3, scale: Vec3, cam: &Camera) -> Option<(Projected, [usize; 4])> {
    let pc = cam.to_camera(mu);
    let z = pc[2];
    if !(z >= cam.near) {
        return None;
    }
    let (sigma, _) = covariance(rot, scale);
    let t2 = jacobian_w(pc, cam);
    let cov = cov2d_of(&t2, &sigma);
    let mean = cam.project_camera(pc);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (cov[0] + cov[2]);
    let lambda = mid + math::sqrt((mid * mid - det).max(0.0));
    let r = 3.0 * math::sqrt(lambda);
    let x0 = math::ceil(mean[0] - r).max(0.0);
    let x1 = math::floor(mean[0] + r).min(cam.width as f64 - 1.0);
    let y0 = math::ceil(mean[1] - r).max(0.0);
    let y1 = math::floor(mean[1] + r).min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((
        Projected {
            mean2d: mean,
            cov2d: cov,
            camera_z: z,
        },
        [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    ))
}

// T = J W, the 2x3 map from world offsets to pixel offsets.
fn jacobian_w(pc: Vec3, cam: &Camera) -> [[f64; 3]; 2] {
    let [x, y, z] = pc;
    let j = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    let mut t = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t[r][c] = (0..3).map(|k| j[r][k] * cam.rot[k][c]).sum();
        }
    }
    t
}

fn cov2d_of(t: &[[f64; 3]; 2], sigma: &Mat3) -> [f64; 3] {
    let mut ts = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ts[r][c] = (0..3).map(|k| t[r][k] * sigma[k][c]).sum();
        }
    }
    let e = |a: usize, b: usize| (0..3).map(|k| ts[a][k] * t[b][k]).sum::<f64>();
    [e(0, 0) + COV2D_BLUR, e(0, 1), e(1, 1) + COV2D_BLUR]
}

/// Project one Gaussian: 2D mean, blurred 2D covariance and camera z, or
/// culled when behind the near plane or when its 3-sigma ellipse misses
/// the image.
pub fn project_gaussian(g: &GlobalGaussian, cam: &Camera) -> Projection {
    let rot = geometry::quat_to_mat(geometry::quat_normalize(g.rot));
    match project_raw(g.mu, &rot, g.scale, cam) {
        Some((p, _)) => Projection::Visible(p),
        None => Projection::Culled,
    }
}

fn splat_color(sh: &[f64], coeffs: usize, mu: Vec3, cam: &Camera) -> ([f64; 3], [f64; 16]) {
    let dir = if coeffs > 1 {
        geometry::normalize(geometry::sub(mu, cam.center()))
    } else {
        [0.0, 0.0, 1.0]
    };
    let basis = sh_basis(dir, coeffs);
    let mut c = [0.5; 3];
    for k in 0..coeffs {
        for ch in 0..3 {
            c[ch] += basis[k] * sh[3 * k + ch];
        }
    }
    (c, basis)
}

// Sorted splats and per-pixel candidate lists (CSR).
struct Raster {
    splats: Vec<Splat>,
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

fn check_inputs(geom: &[f64], opacity: &[f64], sh: &[f64], sh_width: usize) -> Result<usize, RenderError> {
    let n = geom.len() / GEOM_COLS;
    if geom.len() != n * GEOM_COLS || opacity.len() != n || sh.len() != n * sh_width {
        return Err(RenderError::Shape("geometry, opacity and color rows must match"));
    }
    sh_coeffs(sh_width)?;
    for i in 0..n {
        let finite = geom[i * GEOM_COLS..(i + 1) * GEOM_COLS].iter().all(|v| v.is_finite())
            && opacity[i].is_finite()
            && sh[i * sh_width..(i + 1) * sh_width].iter().all(|v| v.is_finite());
        if !finite {
            return Err(RenderError::NonFinite { index: i });
        }
    }
    Ok(n)
}

fn row_parts(geom: &[f64], i: usize) -> (Vec3, Mat3, Vec3) {
    let r = &geom[i * GEOM_COLS..(i + 1) * GEOM_COLS];
    (
        [r[GEOM_MU], r[GEOM_MU + 1], r[GEOM_MU + 2]],
        geometry::mat_from_flat(&r[GEOM_ROT..GEOM_ROT + 9]),
        [r[GEOM_SCALE], r[GEOM_SCALE + 1], r[GEOM_SCALE + 2]],
    )
}

fn rasterize(geom: &[f64], opacity: &[f64], sh: &[f64], sh_width: usize, n: usize, cam: &Camera) -> Raster {
    let coeffs = sh_width / 3;
    let mut splats = Vec::new();
    for i in 0..n {
        let (mu, rot, scale) = row_parts(geom, i);
        if let Some((p, bbox)) = project_raw(mu, &rot, scale, cam) {
            let [a, b, c] = p.cov2d;
            let det = a * c - b * b;
            let (color, _) = splat_color(&sh[i * sh_width..(i + 1) * sh_width], coeffs, mu, cam);
            splats.push(Splat {
                index: i,
                mean: p.mean2d,
                conic: [c / det, -b / det, a / det],
                z: p.camera_z,
                color: color.map(|v| v.clamp(0.0, 1.0)),
                opacity: opacity[i],
                bbox,
            });
        }
    }
    splats.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.index.cmp(&b.index)));
    let npix = cam.num_pixels();
    let mut counts = vec![0usize; npix + 1];
    for s in &splats {
        for y in s.bbox[2]..=s.bbox[3] {
            for x in s.bbox[0]..=s.bbox[1] {
                counts[y * cam.width + x + 1] += 1;
            }
        }
    }
    for i in 0..npix {
        counts[i + 1] += counts[i];
    }
    let mut fill = counts.clone();
    let mut entries = vec![0u32; counts[npix]];
    for (k, s) in splats.iter().enumerate() {
        for y in s.bbox[2]..=s.bbox[3] {
            for x in s.bbox[0]..=s.bbox[1] {
                let p = y * cam.width + x;
                entries[fill[p]] = k as u32;
                fill[p] += 1;
            }
        }
    }
    Raster {
        splats,
        offsets: counts,
        entries,
    }
}

// One composited splat of one pixel.
struct Hit {
    splat: usize,
    alpha: f64,
    transmit: f64,
    falloff: f64,
    clamped: bool,
    d: [f64; 2],
}

fn composite_pixel(r: &Raster, p: usize, x: usize, y: usize, hits: &mut Vec<Hit>) {
    hits.clear();
    let mut t = 1.0;
    for &k in &r.entries[r.offsets[p]..r.offsets[p + 1]] {
        let s = &r.splats[k as usize];
        let d = [x as f64 - s.mean[0], y as f64 - s.mean[1]];
        let q = s.conic[0] * d[0] * d[0] + 2.0 * s.conic[1] * d[0] * d[1] + s.conic[2] * d[1] * d[1];
        let falloff = math::exp(-0.5 * q);
        let raw = s.opacity * falloff;
        if raw < MIN_ALPHA {
            continue;
        }
        let clamped = raw > MAX_ALPHA;
        let alpha = if clamped { MAX_ALPHA } else { raw };
        hits.push(Hit {
            splat: k as usize,
            alpha,
            transmit: t,
            falloff,
            clamped,
            d,
        });
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
}

fn shade(r: &Raster, hits: &[Hit], out: &mut [f64]) {
    let (mut c, mut a, mut dn) = ([0.0; 3], 0.0, 0.0);
    for h in hits {
        let s = &r.splats[h.splat];
        let w = h.alpha * h.transmit;
        for ch in 0..3 {
            c[ch] += w * s.color[ch];
        }
        a += w;
        dn += w * s.z;
    }
    out[..3].copy_from_slice(&c);
    out[OUT_ALPHA] = a;
    out[OUT_DEPTH] = if a >= MIN_WEIGHT { dn / a } else { BACKGROUND_DEPTH };
}

fn forward(r: &Raster, cam: &Camera) -> (Vec<f64>, Vec<u32>) {
    let mut out = vec![0.0; cam.num_pixels() * RENDER_COLS];
    let mut count = vec![0u32; cam.num_pixels()];
    let mut hits = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = y * cam.width + x;
            composite_pixel(r, p, x, y, &mut hits);
            count[p] = hits.len() as u32;
            shade(r, &hits, &mut out[p * RENDER_COLS..(p + 1) * RENDER_COLS]);
        }
    }
    (out, count)
}

/// Render world-space Gaussians. An empty scene gives a black, fully
/// transparent image.
pub fn render(globals: &[GlobalGaussian], cam: &Camera) -> Result<RenderOutput, RenderError> {
    let sh_width = globals.first().map_or(3, |g| g.sh.len());
    let mut geom = Vec::with_capacity(globals.len() * GEOM_COLS);
    let mut opacity = Vec::with_capacity(globals.len());
    let mut sh = Vec::with_capacity(globals.len() * sh_width);
    for (i, g) in globals.iter().enumerate() {
        if g.sh.len() != sh_width {
            return Err(RenderError::Shape("all Gaussians must share one SH width"));
        }
        if !(g.mu.iter().chain(&g.rot).chain(&g.scale).all(|v| v.is_finite()) && g.alpha.is_finite()) {
            return Err(RenderError::NonFinite { index: i });
        }
        geom.extend_from_slice(&g.mu);
        geom.extend_from_slice(&geometry::mat_to_flat(&geometry::quat_to_mat(
            geometry::quat_normalize(g.rot),
        )));
        geom.extend_from_slice(&g.scale);
        opacity.push(g.alpha);
        sh.extend_from_slice(&g.sh);
    }
    render_raw(&geom, &opacity, &sh, sh_width, cam)
}

/// Render from flat rigged geometry (`G x GEOM_COLS`), opacities and SH.
pub fn render_raw(
    geom: &[f64],
    opacity: &[f64],
    sh: &[f64],
    sh_width: usize,
    cam: &Camera,
) -> Result<RenderOutput, RenderError> {
    let n = check_inputs(geom, opacity, sh, sh_width)?;
    let r = rasterize(geom, opacity, sh, sh_width, n, cam);
    let (planes, count) = forward(&r, cam);
    Ok(RenderOutput::from_planes(cam.width, cam.height, &planes, count))
}

/// Differentiable render. Inputs: `geom` (G x GEOM_COLS), `opacity` (G x 1,
/// values in [0, 1]), `sh` (G x 3 (d + 1)^2). Output: `H*W x RENDER_COLS`
/// rows of `[r, g, b, alpha, depth]`.
///
/// Colors see gradients through their SH coefficients only; the viewing
/// direction of higher-degree terms is treated as constant.
pub fn render_op(g: &mut Graph, cam: &Arc<Camera>, geom: Var, opacity: Var, sh: Var) -> Result<Var, RenderError> {
    let sh_width = g.value(sh).cols();
    let (gv, ov, sv) = (g.value(geom).data(), g.value(opacity).data(), g.value(sh).data());
    let n = check_inputs(gv, ov, sv, sh_width)?;
    let raster = rasterize(gv, ov, sv, sh_width, n, cam);
    let (planes, _) = forward(&raster, cam);
    let value = Tensor::from_parts(vec![cam.num_pixels(), RENDER_COLS], planes);
    let cam = cam.clone();
    let raster = Arc::new(raster);
    Ok(g.custom(&[geom, opacity, sh], value, move |ctx| {
        let grads = backward(
            &raster,
            &cam,
            ctx.inputs[0].data(),
            ctx.inputs[2].data(),
            sh_width,
            ctx.grad.data(),
            ctx.output.data(),
        );
        let [gg, go, gs] = grads;
        vec![
            Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), gg)),
            Some(Tensor::from_parts(ctx.inputs[1].dims().to_vec(), go)),
            Some(Tensor::from_parts(ctx.inputs[2].dims().to_vec(), gs)),
        ]
    }))
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    z: f64,
    color: [f64; 3],
    opacity: f64,
}

fn backward(
    r: &Raster,
    cam: &Camera,
    geom: &[f64],
    sh: &[f64],
    sh_width: usize,
    gout: &[f64],
    out: &[f64],
) -> [Vec<f64>; 3] {
    let mut sg = vec![SplatGrad::default(); r.splats.len()];
    let mut hits = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = y * cam.width + x;
            let go = &gout[p * RENDER_COLS..(p + 1) * RENDER_COLS];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            composite_pixel(r, p, x, y, &mut hits);
            let o = &out[p * RENDER_COLS..(p + 1) * RENDER_COLS];
            let a_tot = o[OUT_ALPHA];
            let (g_dn, g_a) = if a_tot >= MIN_WEIGHT {
                let dn = o[OUT_DEPTH] * a_tot;
                (
                    go[OUT_DEPTH] / a_tot,
                    go[OUT_ALPHA] - go[OUT_DEPTH] * dn / (a_tot * a_tot),
                )
            } else {
                (0.0, go[OUT_ALPHA])
            };
            let mut suffix = 0.0;
            for h in hits.iter().rev() {
                let s = &r.splats[h.splat];
                let w = h.alpha * h.transmit;
                let value = go[0] * s.color[0] + go[1] * s.color[1] + go[2] * s.color[2] + g_a + g_dn * s.z;
                let g_alpha = h.transmit * value - suffix / (1.0 - h.alpha);
                suffix += w * value;
                let acc = &mut sg[h.splat];
                for ch in 0..3 {
                    acc.color[ch] += w * go[ch];
                }
                acc.z += w * g_dn;
                if h.clamped {
                    continue;
                }
                acc.opacity += g_alpha * h.falloff;
                let g_q = -0.5 * g_alpha * s.opacity * h.falloff;
                let [dx, dy] = h.d;
                acc.conic[0] += g_q * dx * dx;
                acc.conic[1] += g_q * 2.0 * dx * dy;
                acc.conic[2] += g_q * dy * dy;
                acc.mean[0] -= g_q * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                acc.mean[1] -= g_q * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
            }
        }
    }
    let n = geom.len() / GEOM_COLS;
    let mut g_geom = vec![0.0; geom.len()];
    let mut g_opacity = vec![0.0; n];
    let mut g_sh = vec![0.0; sh.len()];
    let coeffs = sh_width / 3;
    for (s, acc) in r.splats.iter().zip(&sg) {
        let i = s.index;
        g_opacity[i] = acc.opacity;
        let (mu, rot, scale) = row_parts(geom, i);
        let (raw_color, basis) = splat_color(&sh[i * sh_width..(i + 1) * sh_width], coeffs, mu, cam);
        for ch in 0..3 {
            if raw_color[ch] < 0.0 || raw_color[ch] > 1.0 {
                continue;
            }
            for k in 0..coeffs {
                g_sh[i * sh_width + 3 * k + ch] = basis[k] * acc.color[ch];
            }
        }
        let row = &mut g_geom[i * GEOM_COLS..(i + 1) * GEOM_COLS];
        projection_vjp(mu, &rot, scale, cam, acc, row);
    }
    [g_geom, g_opacity, g_sh]
}

fn projection_vjp(mu: Vec3, rot: &Mat3, scale: Vec3, cam: &Camera, acc: &SplatGrad, row: &mut [f64]) {
    let pc = cam.to_camera(mu);
    let [x, y, z] = pc;
    let (sigma, m) = covariance(rot, scale);
    let t2 = jacobian_w(pc, cam);
    let cov = cov2d_of(&t2, &sigma);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let k = [[cov[2] / det, -cov[1] / det], [-cov[1] / det, cov[0] / det]];
    // Conic gradient as a symmetric matrix, then through the inverse.
    let gk = [[acc.conic[0], 0.5 * acc.conic[1]], [0.5 * acc.conic[1], acc.conic[2]]];
    let mut gcov = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut v = 0.0;
            for c in 0..2 {
                for d in 0..2 {
                    v += k[a][c] * gk[c][d] * k[d][b];
                }
            }
            gcov[a][b] = -v;
        }
    }
    // cov = T Sigma T^T + blur
    let mut g_sigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut v = 0.0;
            for c in 0..2 {
                for d in 0..2 {
                    v += t2[c][a] * gcov[c][d] * t2[d][b];
                }
            }
            g_sigma[a][b] = v;
        }
    }
    let mut g_t = [[0.0; 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            let mut v = 0.0;
            for c in 0..2 {
                for d in 0..3 {
                    v += gcov[a][c] * t2[c][d] * sigma[d][b];
                }
            }
            g_t[a][b] = 2.0 * v;
        }
    }
    // T = J W
    let mut g_j = [[0.0; 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            g_j[a][b] = (0..3).map(|c| g_t[a][c] * cam.rot[b][c]).sum();
        }
    }
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = [0.0; 3];
    g_pc[0] += acc.mean[0] * fx / z - g_j[0][2] * fx / z2;
    g_pc[1] += acc.mean[1] * fy / z - g_j[1][2] * fy / z2;
    g_pc[2] += acc.z - acc.mean[0] * fx * x / z2 - acc.mean[1] * fy * y / z2 - g_j[0][0] * fx / z2
        + g_j[0][2] * 2.0 * fx * x / z3
        - g_j[1][1] * fy / z2
        + g_j[1][2] * 2.0 * fy * y / z3;
    let g_mu = geometry::mat_t_vec(&cam.rot, g_pc);
    row[GEOM_MU..GEOM_MU + 3].copy_from_slice(&g_mu);
    // Sigma = M M^T, M = R diag(s)
    let mut g_m = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g_m[a][b] = (0..3).map(|c| (g_sigma[a][c] + g_sigma[c][a]) * m[c][b]).sum();
        }
    }
    for a in 0..3 {
        for b in 0..3 {
            row[GEOM_ROT + 3 * a + b] = g_m[a][b] * scale[b];
        }
    }
    for b in 0..3 {
        row[GEOM_SCALE + b] = (0..3).map(|a| g_m[a][b] * rot[a][b]).sum();
    }
}

fn is_background(z: f64) -> bool {
    !(z < 0.5 * BACKGROUND_DEPTH)
}

fn back_project(cam: &Camera, x: usize, y: usize, z: f64) -> Vec3 {
    [z * (x as f64 - cam.cx) / cam.fx, z * (y as f64 - cam.cy) / cam.fy, z]
}

// Interior pixels whose 4-neighborhood is entirely foreground.
fn normal_support(depth: &[f64], cam: &Camera, x: usize, y: usize) -> bool {
    let w = cam.width;
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= cam.height {
        return false;
    }
    let p = y * w + x;
    [p, p - 1, p + 1, p - w, p + w]
        .iter()
        .all(|&q| !is_background(depth[q]))
}

/// Camera-space unit normals from a depth map, facing the camera. Border
/// and background pixels (and their neighbors) get the zero vector.
pub fn depth_to_normals(depth: &[f64], cam: &Camera) -> Vec<Vec3> {
    let w = cam.width;
    let mut out = vec![[0.0; 3]; cam.num_pixels()];
    for y in 0..cam.height {
        for x in 0..w {
            if !normal_support(depth, cam, x, y) {
                continue;
            }
            let p = y * w + x;
            let dx = geometry::sub(
                back_project(cam, x + 1, y, depth[p + 1]),
                back_project(cam, x - 1, y, depth[p - 1]),
            );
            let dy = geometry::sub(
                back_project(cam, x, y + 1, depth[p + w]),
                back_project(cam, x, y - 1, depth[p - w]),
            );
            let m = geometry::cross(dx, dy);
            let mn = geometry::norm(m);
            if !(mn > 1e-300) {
                continue;
            }
            let center = back_project(cam, x, y, depth[p]);
            let sign = if geometry::dot(m, center) > 0.0 { -1.0 } else { 1.0 };
            out[p] = geometry::scale(m, sign / mn);
        }
    }
    out
}

/// Differentiable [`depth_to_normals`]: `depth` with `H*W` entries to an
/// `H*W x 3` tensor.
pub fn depth_normals_op(g: &mut Graph, cam: &Arc<Camera>, depth: Var) -> Var {
    let d = g.value(depth).data();
    assert_eq!(d.len(), cam.num_pixels(), "depth must have one entry per pixel");
    let normals = depth_to_normals(d, cam);
    let value = Tensor::from_parts(vec![cam.num_pixels(), 3], normals.into_iter().flatten().collect());
    let cam = cam.clone();
    g.custom(&[depth], value, move |ctx| {
        let depth = ctx.inputs[0].data();
        let gn = ctx.grad.data();
        let w = cam.width;
        let mut gd = vec![0.0; depth.len()];
        for y in 0..cam.height {
            for x in 0..w {
                let p = y * w + x;
                if !normal_support(depth, &cam, x, y) {
                    continue;
                }
                let g3 = [gn[3 * p], gn[3 * p + 1], gn[3 * p + 2]];
                if g3 == [0.0; 3] {
                    continue;
                }
                let (xr, xl) = (
                    back_project(&cam, x + 1, y, depth[p + 1]),
                    back_project(&cam, x - 1, y, depth[p - 1]),
                );
                let (yd, yu) = (
                    back_project(&cam, x, y + 1, depth[p + w]),
                    back_project(&cam, x, y - 1, depth[p - w]),
                );
                let dx = geometry::sub(xr, xl);
                let dy = geometry::sub(yd, yu);
                let m = geometry::cross(dx, dy);
                let mn = geometry::norm(m);
                if !(mn > 1e-300) {
                    continue;
                }
                let nhat = geometry::scale(m, 1.0 / mn);
                let center = back_project(&cam, x, y, depth[p]);
                let sign = if geometry::dot(m, center) > 0.0 { -1.0 } else { 1.0 };
                let proj = geometry::dot(nhat, g3);
                let g_m = geometry::scale(geometry::sub(g3, geometry::scale(nhat, proj)), sign / mn);
                let g_dx = geometry::cross(dy, g_m);
                let g_dy = geometry::cross(g_m, dx);
                let ray = |px: usize, py: usize| back_project(&cam, px, py, 1.0);
                gd[p + 1] += geometry::dot(g_dx, ray(x + 1, y));
                gd[p - 1] -= geometry::dot(g_dx, ray(x - 1, y));
                gd[p + w] += geometry::dot(g_dy, ray(x, y + 1));
                gd[p - w] -= geometry::dot(g_dy, ray(x, y - 1));
            }
        }
        vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), gd))]
    })
}

/// Opacity, SH and geometry tensors of plain world-space Gaussians.
pub fn globals_to_tensors(globals: &[GlobalGaussian]) -> (Tensor, Tensor, Tensor) {
    let n = globals.len().max(1);
    let sh_width = globals.first().map_or(3, |g| g.sh.len());
    let mut opacity: Vec<f64> = globals.iter().map(|g| g.alpha).collect();
    let mut sh: Vec<f64> = globals.iter().flat_map(|g| g.sh.iter().copied()).collect();
    if globals.is_empty() {
        opacity.push(0.0);
        sh.resize(sh_width, 0.0);
    }
    (
        rig::globals_to_geom(globals),
        Tensor::from_parts(vec![n, 1], opacity),
        Tensor::from_parts(vec![n, sh_width], sh),
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::gradcheck::finite_diff_report;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn cam(w: usize, h: usize) -> Camera {
        Camera::new(100.0, 100.0, 32.0, 32.0, geometry::IDENTITY, [0.0; 3], w, h, 0.1).unwrap()
    }

    fn gaussian(mu: Vec3, scale: f64, alpha: f64, color: [f64; 3]) -> GlobalGaussian {
        GlobalGaussian {
            mu,
            rot: geometry::QUAT_IDENTITY,
            scale: [scale; 3],
            alpha,
            sh: color.iter().map(|&c| dc_from_color(c)).collect(),
        }
    }

    pub(crate) fn random_scene(n: usize, seed: u64) -> Vec<GlobalGaussian> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| GlobalGaussian {
                mu: [
                    r.random_range(-0.25..0.25),
                    r.random_range(-0.25..0.25),
                    r.random_range(1.5..2.5),
                ],
                rot: geometry::quat_normalize([
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ]),
                scale: [
                    r.random_range(0.01..0.05),
                    r.random_range(0.01..0.05),
                    r.random_range(0.01..0.05),
                ],
                alpha: r.random_range(0.2..0.9),
                sh: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn projection_examples() {
        let c = cam(64, 64);
        let p = project_gaussian(&gaussian([0.0, 0.0, 1.0], 0.02, 0.5, [0.5; 3]), &c)
            .visible()
            .unwrap();
        assert_eq!(p.mean2d, [32.0, 32.0]);
        let s = 0.02;
        let z = 2.0;
        let p = project_gaussian(&gaussian([0.0, 0.0, z], s, 0.5, [0.5; 3]), &c)
            .visible()
            .unwrap();
        let expect = (100.0 * s / z) * (100.0 * s / z) + 0.3;
        assert!((p.cov2d[0] - expect).abs() < 1e-12 && (p.cov2d[2] - expect).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-15);
        assert_eq!(
            project_gaussian(&gaussian([0.0, 0.0, -1.0], s, 0.5, [0.5; 3]), &c),
            Projection::Culled
        );
        assert_eq!(
            project_gaussian(&gaussian([50.0, 0.0, 1.0], s, 0.5, [0.5; 3]), &c),
            Projection::Culled
        );
    }

    #[test]
    fn empty_scene_is_black() {
        let out = render(&[], &cam(16, 16)).unwrap();
        assert!(out.color.iter().all(|&c| c == 0.0));
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        assert!(out.depth.iter().all(|&d| d == BACKGROUND_DEPTH));
    }

    #[test]
    fn single_splat_closed_form() {
        let c = cam(64, 64);
        let color = [0.8, 0.3, 0.1];
        let g = gaussian([0.0, 0.0, 1.0], 0.01, 0.6, color);
        let out = render(&[g], &c).unwrap();
        let px = out.pixel_color(32, 32);
        for ch in 0..3 {
            assert!((px[ch] - 0.6 * color[ch]).abs() < 1e-5);
        }
        assert!((out.alpha[32 * 64 + 32] - 0.6).abs() < 1e-12);
        assert!((out.depth[32 * 64 + 32] - 1.0).abs() < 1e-12);
        // One pixel over: falloff exp(-0.5 / var) with var = 1 + 0.3.
        let expect = 0.6 * libm::exp(-0.5 / 1.3);
        assert!((out.alpha[32 * 64 + 33] - expect).abs() < 1e-12);
    }

    #[test]
    fn front_splat_occludes() {
        let c = cam(64, 64);
        let red = gaussian([0.0, 0.0, 1.0], 0.05, 1.0, [1.0, 0.0, 0.0]);
        let blue = gaussian([0.0, 0.0, 2.0], 0.1, 1.0, [0.0, 0.0, 1.0]);
        let out = render(&[blue, red], &c).unwrap();
        let px = out.pixel_color(32, 32);
        assert!(px[0] > 0.98 && px[2] < 0.01, "{px:?}");
    }

    #[test]
    fn order_invariance_and_repeatability() {
        let c = cam(64, 64);
        let scene = random_scene(40, 1);
        let a = render(&scene, &c).unwrap();
        let mut rev = scene.clone();
        rev.reverse();
        let b = render(&rev, &c).unwrap();
        let again = render(&scene, &c).unwrap();
        assert_eq!(a, again);
        for (x, y) in a.color.iter().zip(&b.color) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn non_finite_reports_index() {
        let mut scene = random_scene(5, 2);
        scene[3].mu[1] = f64::NAN;
        assert_eq!(render(&scene, &cam(8, 8)), Err(RenderError::NonFinite { index: 3 }));
    }

    #[test]
    fn plane_normals() {
        let c = cam(16, 16);
        let flat = vec![2.0; 256];
        let n = depth_to_normals(&flat, &c);
        for y in 1..15 {
            for x in 1..15 {
                assert_eq!(n[y * 16 + x], [0.0, 0.0, -1.0]);
            }
        }
        assert_eq!(n[0], [0.0; 3]);
        // Plane z = 2 + 0.5 X: depth per pixel solves z = 2 + 0.5 z u.
        let mut tilted = vec![0.0; 256];
        for y in 0..16 {
            for x in 0..16 {
                let u = (x as f64 - c.cx) / c.fx;
                tilted[y * 16 + x] = 2.0 / (1.0 - 0.5 * u);
            }
        }
        tilted[5 * 16 + 5] = BACKGROUND_DEPTH;
        let n = depth_to_normals(&tilted, &c);
        let k = 1.0 / libm::sqrt(1.25);
        let expect = [0.5 * k, 0.0, -k];
        for y in 1..15 {
            for x in 1..15 {
                let v = n[y * 16 + x];
                let near_hole = (x as i32 - 5).abs() + (y as i32 - 5).abs() <= 1;
                if near_hole {
                    assert_eq!(v, [0.0; 3]);
                } else {
                    for a in 0..3 {
                        assert!((v[a] - expect[a]).abs() < 1e-3, "{v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn normals_op_gradcheck() {
        let c = Arc::new(cam(8, 8));
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let d0 = Tensor::new(vec![64], (0..64).map(|_| r.random_range(1.8..2.2)).collect()).unwrap();
        let w = Tensor::new(vec![64, 3], (0..192).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let eval = |d: &Tensor| {
            let mut g = Graph::new();
            let dv = g.param(ParamId(0), d);
            let n = depth_normals_op(&mut g, &c, dv);
            let wv = g.constant(w.clone());
            let p = g.mul(n, wv);
            let l = g.sum(p);
            let gr = g.backward(l).unwrap();
            (g.value(l).item(), gr.get(ParamId(0)).unwrap().clone())
        };
        let (_, an) = eval(&d0);
        let coords: Vec<usize> = (0..64).collect();
        let rep = finite_diff_report(|d| Ok(eval(d).0), &an, &d0, 1e-6, &coords).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    /// Loss over a fixed random weighting of all output channels.
    fn render_loss(c: &Arc<Camera>, xs: &[Tensor; 3], w: &Tensor, which: usize) -> (f64, Tensor) {
        let mut g = Graph::new();
        let v: Vec<Var> = xs.iter().enumerate().map(|(i, x)| g.param(ParamId(i), x)).collect();
        let out = render_op(&mut g, c, v[0], v[1], v[2]).unwrap();
        // Depth only counts where the pixel is opaque enough to be stable.
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv);
        let l = g.sum(p);
        let gr = g.backward(l).unwrap();
        (g.value(l).item(), gr.get(ParamId(which)).unwrap().clone())
    }

    #[test]
    fn render_op_gradcheck() {
        let c = Arc::new(cam(64, 64));
        let scene = random_scene(12, 4);
        let (geom, opac, sh) = globals_to_tensors(&scene);
        let xs = [geom, opac, sh];
        let out = render_raw(xs[0].data(), xs[1].data(), xs[2].data(), 3, &c).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut w = vec![0.0; 64 * 64 * RENDER_COLS];
        for p in 0..64 * 64 {
            for k in 0..RENDER_COLS {
                // Depth is only weighted where alpha is clearly nonzero.
                if k == OUT_DEPTH && out.alpha[p] < 0.05 {
                    continue;
                }
                w[p * RENDER_COLS + k] = r.random_range(-1.0..1.0);
            }
        }
        let w = Tensor::new(vec![64 * 64, RENDER_COLS], w).unwrap();
        for which in 0..3 {
            let (_, an) = render_loss(&c, &xs, &w, which);
            assert!(an.max_abs() > 1e-3);
            let coords: Vec<usize> = (0..xs[which].len()).collect();
            let rep = finite_diff_report(
                |x| {
                    let mut ys = xs.clone();
                    ys[which] = x.clone();
                    Ok(render_loss(&c, &ys, &w, which).0)
                },
                &an,
                &xs[which],
                1e-6,
                &coords,
            )
            .unwrap();
            assert!(rep.max_rel_err < 5e-3, "input {which}: {rep:?}");
        }
    }
}
