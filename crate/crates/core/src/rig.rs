//! Gaussians bound to mesh triangles.
//!
//! Each Gaussian lives in the local frame of its parent triangle and is
//! carried to world space as the mesh deforms:
//! `mu = k R mu_l + p`, `rot = quat(R) * rot_l`, `scale = k scale_l`,
//! where `p` is the Gaussian's barycentric binding point on the triangle.
//! Intra-oral Gaussians additionally receive per-frame residual offsets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::geometry::{self, Mat3, Quat, Vec3};
use crate::head::{Mesh, MIN_TRIANGLE_AREA};
use crate::math;
use crate::render::Camera;
use crate::tensor::Tensor;

/// Lower bound applied to scales after a residual update.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Column layout of the rigged geometry tensor (`G x GEOM_COLS`):
/// position, row-major rotation matrix, scale.
pub const GEOM_COLS: usize = 15;
pub const GEOM_MU: usize = 0;
pub const GEOM_ROT: usize = 3;
pub const GEOM_SCALE: usize = 12;

/// Columns of a mouth residual row: position, axis-angle rotation, scale.
pub const RESIDUAL_COLS: usize = 9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RigError {
    #[error("{total} Gaussians requested for {tris} triangles")]
    TooFewGaussians { total: usize, tris: usize },
    #[error("triangle {tri} is degenerate (area {area:e})")]
    DegenerateTriangle { tri: usize, area: f64 },
    #[error("cloud is bound to {expected} triangles, mesh has {got}")]
    TopologyMismatch { expected: usize, got: usize },
    #[error("{got} mouth residuals for {expected} mouth Gaussians")]
    ResidualCount { expected: usize, got: usize },
    #[error("mouth mask has {got} entries for {expected} Gaussians")]
    MaskLength { expected: usize, got: usize },
    #[error("Gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: &'static str },
    #[error("no seed points given")]
    NoSeeds,
    #[error("seed triangle {0} does not exist")]
    BadSeed(usize),
    #[error("mouth region is empty")]
    EmptyRegion,
}

/// A Gaussian in the frame of its parent triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGaussian {
    pub mu_l: Vec3,
    pub rot_l: Quat,
    pub scale_l: Vec3,
    pub alpha_l: f64,
    /// Spherical-harmonic coefficients, `[coefficient][channel]` flattened.
    pub sh_l: Vec<f64>,
    pub parent_tri: usize,
    pub bary: Vec3,
}

impl LocalGaussian {
    fn check(&self, index: usize, tris: usize, sh_len: usize) -> Result<(), RigError> {
        let bad = |reason| Err(RigError::InvalidGaussian { index, reason });
        if self.parent_tri >= tris {
            return bad("parent triangle out of range");
        }
        if self.bary.iter().any(|&b| !(b >= 0.0)) || (self.bary.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("barycentric weights must be nonnegative and sum to 1");
        }
        if (geometry::quat_norm(self.rot_l) - 1.0).abs() > 1e-9 {
            return bad("rotation is not a unit quaternion");
        }
        if self.scale_l.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("scales must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha_l) {
            return bad("opacity outside [0, 1]");
        }
        if self.sh_l.len() != sh_len || !sh_len_valid(sh_len) {
            return bad("spherical-harmonic length must be 3 (d + 1)^2, d <= 3, shared by the cloud");
        }
        if self.mu_l.iter().chain(&self.sh_l).any(|v| !v.is_finite()) {
            return bad("non-finite attribute");
        }
        Ok(())
    }

    fn binding_point(&self, mesh: &Mesh) -> Vec3 {
        binding_point(mesh, self.parent_tri, self.bary)
    }
}

fn sh_len_valid(len: usize) -> bool {
    matches!(len, 3 | 12 | 27 | 48)
}

fn binding_point(mesh: &Mesh, tri: usize, bary: Vec3) -> Vec3 {
    let f = mesh.faces[tri];
    let mut p = [0.0; 3];
    for j in 0..3 {
        let v = mesh.vertices[f[j]];
        for a in 0..3 {
            p[a] += bary[j] * v[a];
        }
    }
    p
}

/// All Gaussians of a head with their mouth membership.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    gaussians: Vec<LocalGaussian>,
    mouth_mask: Vec<bool>,
    num_tris: usize,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<LocalGaussian>, mouth_mask: Vec<bool>, num_tris: usize) -> Result<Self, RigError> {
        if mouth_mask.len() != gaussians.len() {
            return Err(RigError::MaskLength {
                expected: gaussians.len(),
                got: mouth_mask.len(),
            });
        }
        let sh_len = gaussians.first().map_or(3, |g| g.sh_l.len());
        for (i, g) in gaussians.iter().enumerate() {
            g.check(i, num_tris, sh_len)?;
        }
        Ok(Self {
            gaussians,
            mouth_mask,
            num_tris,
        })
    }

    pub fn gaussians(&self) -> &[LocalGaussian] {
        &self.gaussians
    }

    pub fn mouth_mask(&self) -> &[bool] {
        &self.mouth_mask
    }

    pub fn num_tris(&self) -> usize {
        self.num_tris
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn mouth_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mouth_mask[i]).collect()
    }

    pub fn with_mouth_mask(mut self, mask: Vec<bool>) -> Result<Self, RigError> {
        if mask.len() != self.gaussians.len() {
            return Err(RigError::MaskLength {
                expected: self.gaussians.len(),
                got: mask.len(),
            });
        }
        self.mouth_mask = mask;
        Ok(self)
    }

    /// `(parent_tri, bary)` of every Gaussian.
    pub fn bindings(&self) -> Vec<(usize, Vec3)> {
        self.gaussians.iter().map(|g| (g.parent_tri, g.bary)).collect()
    }

    fn check_topology(&self, mesh: &Mesh) -> Result<(), RigError> {
        if mesh.num_faces() != self.num_tris {
            return Err(RigError::TopologyMismatch {
                expected: self.num_tris,
                got: mesh.num_faces(),
            });
        }
        Ok(())
    }
}

/// Rotation, center and isotropic scale of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFrame {
    pub rot: Mat3,
    pub center: Vec3,
    pub scale: f64,
}

/// A Gaussian in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGaussian {
    pub mu: Vec3,
    pub rot: Quat,
    pub scale: Vec3,
    pub alpha: f64,
    pub sh: Vec<f64>,
}

/// Place `total` Gaussians on the mesh: `total / T` per triangle, the
/// remainder on the lowest triangle indices.
pub fn sample_bindings(mesh: &Mesh, total: usize, seed: u64) -> Result<GaussianCloud, RigError> {
    let tris = mesh.num_faces();
    if total < tris || tris == 0 {
        return Err(RigError::TooFewGaussians { total, tris });
    }
    let all: Vec<usize> = (0..tris).collect();
    let counts = spread(&all, total, tris);
    place(mesh, &counts, &vec![false; tris], seed)
}

/// Like [`sample_bindings`], but exactly `mouth_count` Gaussians go to the
/// `region` triangles (spread evenly over them) and the rest to the other
/// triangles. The returned cloud's mouth mask marks the region Gaussians,
/// so every head gets the same number of mouth Gaussians.
pub fn sample_bindings_split(
    mesh: &Mesh,
    total: usize,
    region: &[usize],
    mouth_count: usize,
    seed: u64,
) -> Result<GaussianCloud, RigError> {
    let tris = mesh.num_faces();
    if let Some(&t) = region.iter().find(|&&t| t >= tris) {
        return Err(RigError::BadSeed(t));
    }
    let mut in_region = vec![false; tris];
    for &t in region {
        in_region[t] = true;
    }
    let inside: Vec<usize> = (0..tris).filter(|&t| in_region[t]).collect();
    let outside: Vec<usize> = (0..tris).filter(|&t| !in_region[t]).collect();
    if inside.is_empty() {
        return Err(RigError::EmptyRegion);
    }
    if mouth_count < inside.len() || total < mouth_count || total - mouth_count < outside.len() {
        return Err(RigError::TooFewGaussians { total, tris });
    }
    let mut counts = spread(&inside, mouth_count, tris);
    for (c, o) in counts.iter_mut().zip(spread(&outside, total - mouth_count, tris)) {
        *c += o;
    }
    place(mesh, &counts, &in_region, seed)
}

fn spread(tris: &[usize], total: usize, num_tris: usize) -> Vec<usize> {
    let mut counts = vec![0; num_tris];
    if tris.is_empty() {
        return counts;
    }
    let (base, extra) = (total / tris.len(), total % tris.len());
    for (i, &t) in tris.iter().enumerate() {
        counts[t] = base + usize::from(i < extra);
    }
    counts
}

fn place(mesh: &Mesh, counts: &[usize], mouth_tri: &[bool], seed: u64) -> Result<GaussianCloud, RigError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = counts.iter().sum();
    let mut gaussians = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    for (tri, &count) in counts.iter().enumerate() {
        let frame = compute_triangle_frame(mesh, tri)?;
        let area = crate::head::triangle_area(&mesh.vertices, &mesh.faces[tri]);
        // Mean spacing of `count` points spread over the triangle, in frame units.
        let spacing = math::sqrt(area / count.max(1) as f64) / frame.scale;
        for _ in 0..count {
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = math::sqrt(r1);
            gaussians.push(LocalGaussian {
                mu_l: [0.0; 3],
                rot_l: geometry::QUAT_IDENTITY,
                scale_l: [spacing; 3],
                alpha_l: 0.5,
                sh_l: vec![0.0; 3],
                parent_tri: tri,
                bary: [1.0 - s, s * (1.0 - r2), s * r2],
            });
            mask.push(mouth_tri[tri]);
        }
    }
    GaussianCloud::new(gaussians, mask, mesh.num_faces())
}

/// Frame of triangle `tri`: center = centroid, rotation columns = first
/// edge direction, normal x edge, unit normal; scale = mean of the first
/// edge length and the height of the third vertex over it.
pub fn compute_triangle_frame(mesh: &Mesh, tri: usize) -> Result<TriangleFrame, RigError> {
    let f = mesh.faces[tri];
    let [v1, v2, v3] = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
    frame_from_vertices(v1, v2, v3).ok_or_else(|| RigError::DegenerateTriangle {
        tri,
        area: 0.5 * geometry::norm(geometry::cross(geometry::sub(v2, v1), geometry::sub(v3, v1))),
    })
}

fn frame_from_vertices(v1: Vec3, v2: Vec3, v3: Vec3) -> Option<TriangleFrame> {
    let e = geometry::sub(v2, v1);
    let f = geometry::sub(v3, v1);
    let m = geometry::cross(e, f);
    let mn = geometry::norm(m);
    let a = geometry::norm(e);
    if !(0.5 * mn > MIN_TRIANGLE_AREA) {
        return None;
    }
    let e1 = geometry::scale(e, 1.0 / a);
    let n = geometry::scale(m, 1.0 / mn);
    let b = geometry::cross(n, e1);
    let rot = [[e1[0], b[0], n[0]], [e1[1], b[1], n[1]], [e1[2], b[2], n[2]]];
    let center = geometry::scale(geometry::add(geometry::add(v1, v2), v3), 1.0 / 3.0);
    Some(TriangleFrame {
        rot,
        center,
        scale: 0.5 * (a + mn / a),
    })
}

/// `dL/d(v1, v2, v3)` of a triangle frame given `dL/dR` and `dL/dk`.
fn frame_vjp(v1: Vec3, v2: Vec3, v3: Vec3, g_rot: &Mat3, g_scale: f64) -> [Vec3; 3] {
    use geometry::{cross, dot, scale, sub};
    let e = sub(v2, v1);
    let f = sub(v3, v1);
    let m = cross(e, f);
    let mn = geometry::norm(m);
    let a = geometry::norm(e);
    let e1 = scale(e, 1.0 / a);
    let n = scale(m, 1.0 / mn);
    let col = |j: usize| [g_rot[0][j], g_rot[1][j], g_rot[2][j]];
    let (mut g_e1, g_b, mut g_n) = (col(0), col(1), col(2));
    // b = n x e1
    g_n = geometry::add(g_n, cross(e1, g_b));
    g_e1 = geometry::add(g_e1, cross(g_b, n));
    // k = (a + |m| / a) / 2
    let g_mn = 0.5 * g_scale / a;
    let g_a = 0.5 * g_scale - 0.5 * g_scale * mn / (a * a);
    let g_m = geometry::add(scale(sub(g_n, scale(n, dot(n, g_n))), 1.0 / mn), scale(n, g_mn));
    let mut g_e = geometry::add(scale(sub(g_e1, scale(e1, dot(e1, g_e1))), 1.0 / a), scale(e1, g_a));
    // m = e x f
    g_e = geometry::add(g_e, cross(f, g_m));
    let g_f = cross(g_m, e);
    [scale(geometry::add(g_e, g_f), -1.0), g_e, g_f]
}

/// World-space Gaussians for a deformed mesh.
pub fn rig_to_global(cloud: &GaussianCloud, mesh: &Mesh) -> Result<Vec<GlobalGaussian>, RigError> {
    cloud.check_topology(mesh)?;
    let frames = (0..mesh.num_faces())
        .map(|t| compute_triangle_frame(mesh, t))
        .collect::<Result<Vec<_>, _>>()?;
    let qframes: Vec<Quat> = frames.iter().map(|f| geometry::quat_from_mat(&f.rot)).collect();
    Ok(cloud
        .gaussians
        .iter()
        .map(|g| {
            let fr = &frames[g.parent_tri];
            let offset = geometry::scale(geometry::mat_vec(&fr.rot, g.mu_l), fr.scale);
            GlobalGaussian {
                mu: geometry::add(offset, g.binding_point(mesh)),
                rot: geometry::quat_normalize(geometry::quat_mul(qframes[g.parent_tri], g.rot_l)),
                scale: geometry::scale(g.scale_l, fr.scale),
                alpha: g.alpha_l,
                sh: g.sh_l.clone(),
            }
        })
        .collect())
}

/// Per-Gaussian offsets predicted for the intra-oral region.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MouthResidual {
    pub d_mu: Vec3,
    pub d_rot: Vec3,
    pub d_scale: Vec3,
}

/// Apply residuals to the masked Gaussians (in index order). Returns the
/// updated Gaussians and how many scale components hit the floor.
pub fn apply_mouth_residual(
    globals: &[GlobalGaussian],
    mouth_mask: &[bool],
    residuals: &[MouthResidual],
) -> Result<(Vec<GlobalGaussian>, usize), RigError> {
    if mouth_mask.len() != globals.len() {
        return Err(RigError::MaskLength {
            expected: globals.len(),
            got: mouth_mask.len(),
        });
    }
    let mouth = mouth_mask.iter().filter(|&&m| m).count();
    if residuals.len() != mouth {
        return Err(RigError::ResidualCount {
            expected: mouth,
            got: residuals.len(),
        });
    }
    let mut out = globals.to_vec();
    let mut clamped = 0;
    let mut next = residuals.iter();
    for (g, _) in out.iter_mut().zip(mouth_mask).filter(|(_, &m)| m) {
        let r = next.next().expect("counted above");
        g.mu = geometry::add(g.mu, r.d_mu);
        let dq = geometry::quat_from_axis_angle(r.d_rot);
        g.rot = geometry::quat_normalize(geometry::quat_mul(dq, g.rot));
        for a in 0..3 {
            let s = g.scale[a] + r.d_scale[a];
            if s < SCALE_FLOOR {
                clamped += 1;
                g.scale[a] = SCALE_FLOOR;
            } else {
                g.scale[a] = s;
            }
        }
    }
    Ok((out, clamped))
}

/// Differentiable rigging of a Gaussian cloud.
///
/// Inputs: `verts` (N x 3), `mu_l` (G x 3), `quat_l` (G x 4, normalized
/// inside), `scale_l` (G x 3). Output: `G x GEOM_COLS`.
pub fn rig_op(
    g: &mut Graph,
    faces: &Arc<[[usize; 3]]>,
    bindings: &Arc<[(usize, Vec3)]>,
    verts: Var,
    mu_l: Var,
    quat_l: Var,
    scale_l: Var,
) -> Result<Var, RigError> {
    let frames = frames_of(faces, g.value(verts).data())?;
    let (mv, qv, sv) = (g.value(mu_l).data(), g.value(quat_l).data(), g.value(scale_l).data());
    let vd = g.value(verts).data();
    let n = bindings.len();
    assert_eq!(mv.len(), 3 * n, "mu_l must be G x 3");
    assert_eq!(qv.len(), 4 * n, "quat_l must be G x 4");
    assert_eq!(sv.len(), 3 * n, "scale_l must be G x 3");
    let mut out = vec![0.0; n * GEOM_COLS];
    for (i, &(tri, bary)) in bindings.iter().enumerate() {
        let fr = &frames[tri];
        let row = &mut out[i * GEOM_COLS..(i + 1) * GEOM_COLS];
        let mu = [mv[3 * i], mv[3 * i + 1], mv[3 * i + 2]];
        let rm = geometry::mat_vec(&fr.rot, mu);
        let p = bary_point(vd, &faces[tri], bary);
        for a in 0..3 {
            row[GEOM_MU + a] = fr.scale * rm[a] + p[a];
            row[GEOM_SCALE + a] = fr.scale * sv[3 * i + a];
        }
        let q = geometry::quat_normalize([qv[4 * i], qv[4 * i + 1], qv[4 * i + 2], qv[4 * i + 3]]);
        let r = geometry::mat_mul(&fr.rot, &geometry::quat_to_mat(q));
        row[GEOM_ROT..GEOM_ROT + 9].copy_from_slice(&geometry::mat_to_flat(&r));
    }
    let value = Tensor::from_parts(vec![n, GEOM_COLS], out);
    let faces = faces.clone();
    let bindings = bindings.clone();
    Ok(g.custom(&[verts, mu_l, quat_l, scale_l], value, move |ctx| {
        let vd = ctx.inputs[0].data();
        let (mv, qv, sv) = (ctx.inputs[1].data(), ctx.inputs[2].data(), ctx.inputs[3].data());
        let frames = frames_of(&faces, vd).expect("frames were valid in the forward pass");
        let gout = ctx.grad.data();
        let mut g_rot = vec![[[0.0; 3]; 3]; faces.len()];
        let mut g_k = vec![0.0; faces.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut gmu = vec![0.0; mv.len()];
        let mut gq = vec![0.0; qv.len()];
        let mut gs = vec![0.0; sv.len()];
        for (i, &(tri, bary)) in bindings.iter().enumerate() {
            let fr = &frames[tri];
            let row = &gout[i * GEOM_COLS..(i + 1) * GEOM_COLS];
            let g_mu = [row[GEOM_MU], row[GEOM_MU + 1], row[GEOM_MU + 2]];
            let g_r = geometry::mat_from_flat(&row[GEOM_ROT..GEOM_ROT + 9]);
            let mu = [mv[3 * i], mv[3 * i + 1], mv[3 * i + 2]];
            let q_raw = [qv[4 * i], qv[4 * i + 1], qv[4 * i + 2], qv[4 * i + 3]];
            let qm = geometry::quat_to_mat(geometry::quat_normalize(q_raw));
            // mu = k R mu_l + p
            let rt = geometry::mat_t_vec(&fr.rot, g_mu);
            let rm = geometry::mat_vec(&fr.rot, mu);
            for a in 0..3 {
                gmu[3 * i + a] = fr.scale * rt[a];
                for b in 0..3 {
                    g_rot[tri][a][b] += fr.scale * g_mu[a] * mu[b];
                }
            }
            g_k[tri] += geometry::dot(g_mu, rm);
            for (j, &vi) in faces[tri].iter().enumerate() {
                for a in 0..3 {
                    gv[3 * vi + a] += bary[j] * g_mu[a];
                }
            }
            // R_g = R Q
            g_rot[tri] = geometry::mat_add(&g_rot[tri], &geometry::mat_mul(&g_r, &geometry::transpose(&qm)));
            let g_qm = geometry::mat_mul(&geometry::transpose(&fr.rot), &g_r);
            let dq = geometry::quat_to_mat_vjp(q_raw, &g_qm);
            gq[4 * i..4 * i + 4].copy_from_slice(&dq);
            // s = k s_l
            for a in 0..3 {
                let gsa = row[GEOM_SCALE + a];
                gs[3 * i + a] = fr.scale * gsa;
                g_k[tri] += gsa * sv[3 * i + a];
            }
        }
        if ctx.needs(0) {
            for (t, f) in faces.iter().enumerate() {
                if g_k[t] == 0.0 && g_rot[t] == [[0.0; 3]; 3] {
                    continue;
                }
                let vs = [vert(vd, f[0]), vert(vd, f[1]), vert(vd, f[2])];
                let gvs = frame_vjp(vs[0], vs[1], vs[2], &g_rot[t], g_k[t]);
                for j in 0..3 {
                    for a in 0..3 {
                        gv[3 * f[j] + a] += gvs[j][a];
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), gv)),
            Some(Tensor::from_parts(ctx.inputs[1].dims().to_vec(), gmu)),
            Some(Tensor::from_parts(ctx.inputs[2].dims().to_vec(), gq)),
            Some(Tensor::from_parts(ctx.inputs[3].dims().to_vec(), gs)),
        ]
    }))
}

#[inline]
fn vert(vd: &[f64], i: usize) -> Vec3 {
    [vd[3 * i], vd[3 * i + 1], vd[3 * i + 2]]
}

fn bary_point(vd: &[f64], f: &[usize; 3], bary: Vec3) -> Vec3 {
    let mut p = [0.0; 3];
    for j in 0..3 {
        let v = vert(vd, f[j]);
        for a in 0..3 {
            p[a] += bary[j] * v[a];
        }
    }
    p
}

fn frames_of(faces: &[[usize; 3]], vd: &[f64]) -> Result<Vec<TriangleFrame>, RigError> {
    faces
        .iter()
        .enumerate()
        .map(|(tri, f)| {
            let (v1, v2, v3) = (vert(vd, f[0]), vert(vd, f[1]), vert(vd, f[2]));
            frame_from_vertices(v1, v2, v3).ok_or_else(|| RigError::DegenerateTriangle {
                tri,
                area: 0.5 * geometry::norm(geometry::cross(geometry::sub(v2, v1), geometry::sub(v3, v1))),
            })
        })
        .collect()
}

/// Differentiable mouth residual: `geom` (G x GEOM_COLS) and `residual`
/// (M x RESIDUAL_COLS) rows applied to the Gaussians listed in `mouth`.
pub fn mouth_residual_op(g: &mut Graph, geom: Var, residual: Var, mouth: &Arc<[usize]>) -> Result<Var, RigError> {
    let rv = g.value(residual);
    if rv.len() != mouth.len() * RESIDUAL_COLS {
        return Err(RigError::ResidualCount {
            expected: mouth.len(),
            got: rv.len() / RESIDUAL_COLS,
        });
    }
    let mut out = g.value(geom).clone();
    {
        let rd = rv.data();
        let od = out.data_mut();
        for (m, &i) in mouth.iter().enumerate() {
            let r = &rd[m * RESIDUAL_COLS..(m + 1) * RESIDUAL_COLS];
            let row = &mut od[i * GEOM_COLS..(i + 1) * GEOM_COLS];
            apply_residual_row(row, r);
        }
    }
    let mouth = mouth.clone();
    Ok(g.custom(&[geom, residual], out, move |ctx| {
        let geom_in = ctx.inputs[0].data();
        let rd = ctx.inputs[1].data();
        let mut g_geom = ctx.grad.data().to_vec();
        let mut g_res = vec![0.0; rd.len()];
        for (m, &i) in mouth.iter().enumerate() {
            let r = &rd[m * RESIDUAL_COLS..(m + 1) * RESIDUAL_COLS];
            let row_in = &geom_in[i * GEOM_COLS..(i + 1) * GEOM_COLS];
            let grow = &mut g_geom[i * GEOM_COLS..(i + 1) * GEOM_COLS];
            let gr = &mut g_res[m * RESIDUAL_COLS..(m + 1) * RESIDUAL_COLS];
            gr[..3].copy_from_slice(&grow[GEOM_MU..GEOM_MU + 3]);
            let theta = [r[3], r[4], r[5]];
            let d = geometry::rodrigues(theta);
            let rin = geometry::mat_from_flat(&row_in[GEOM_ROT..GEOM_ROT + 9]);
            let g_out = geometry::mat_from_flat(&grow[GEOM_ROT..GEOM_ROT + 9]);
            let g_in = geometry::mat_mul(&geometry::transpose(&d), &g_out);
            grow[GEOM_ROT..GEOM_ROT + 9].copy_from_slice(&geometry::mat_to_flat(&g_in));
            let g_d = geometry::mat_mul(&g_out, &geometry::transpose(&rin));
            gr[3..6].copy_from_slice(&geometry::rodrigues_vjp(theta, &g_d));
            for a in 0..3 {
                if row_in[GEOM_SCALE + a] + r[6 + a] < SCALE_FLOOR {
                    grow[GEOM_SCALE + a] = 0.0;
                } else {
                    gr[6 + a] = grow[GEOM_SCALE + a];
                }
            }
        }
        vec![
            Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), g_geom)),
            Some(Tensor::from_parts(ctx.inputs[1].dims().to_vec(), g_res)),
        ]
    }))
}

fn apply_residual_row(row: &mut [f64], r: &[f64]) {
    for a in 0..3 {
        row[GEOM_MU + a] += r[a];
        let s = row[GEOM_SCALE + a] + r[6 + a];
        row[GEOM_SCALE + a] = if s < SCALE_FLOOR { SCALE_FLOOR } else { s };
    }
    let d = geometry::rodrigues([r[3], r[4], r[5]]);
    let rin = geometry::mat_from_flat(&row[GEOM_ROT..GEOM_ROT + 9]);
    row[GEOM_ROT..GEOM_ROT + 9].copy_from_slice(&geometry::mat_to_flat(&geometry::mat_mul(&d, &rin)));
}

/// Rigged geometry tensor of plain world-space Gaussians.
pub fn globals_to_geom(globals: &[GlobalGaussian]) -> Tensor {
    let mut out = Vec::with_capacity(globals.len() * GEOM_COLS);
    for g in globals {
        out.extend_from_slice(&g.mu);
        out.extend_from_slice(&geometry::mat_to_flat(&geometry::quat_to_mat(
            geometry::quat_normalize(g.rot),
        )));
        out.extend_from_slice(&g.scale);
    }
    Tensor::from_parts(
        vec![globals.len().max(1), GEOM_COLS],
        if globals.is_empty() { vec![0.0; GEOM_COLS] } else { out },
    )
}

/// A point on the mesh surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub tri: usize,
    pub bary: Vec3,
}

/// Lift pixel landmarks onto the mesh by casting camera rays. Each entry is
/// the nearest front-facing hit, or `None` when the ray misses.
pub fn anchor_landmarks(landmarks: &[[f64; 2]], cam: &Camera, mesh: &Mesh) -> Vec<Option<SurfacePoint>> {
    let origin = cam.center();
    landmarks
        .iter()
        .map(|&px| {
            let dir = cam.pixel_ray(px);
            let mut best: Option<(f64, SurfacePoint)> = None;
            for (tri, f) in mesh.faces.iter().enumerate() {
                let [a, b, c] = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
                if let Some((t, bary)) = ray_triangle(origin, dir, a, b, c) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, SurfacePoint { tri, bary }));
                    }
                }
            }
            best.map(|(_, p)| p)
        })
        .collect()
}

// Moller-Trumbore, front faces only (normal opposing the ray).
fn ray_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<(f64, Vec3)> {
    let e1 = geometry::sub(b, a);
    let e2 = geometry::sub(c, a);
    let normal = geometry::cross(e1, e2);
    if geometry::dot(normal, d) >= 0.0 {
        return None;
    }
    let p = geometry::cross(d, e2);
    let det = geometry::dot(e1, p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = geometry::sub(o, a);
    let u = geometry::dot(s, p) * inv;
    let q = geometry::cross(s, e1);
    let v = geometry::dot(d, q) * inv;
    let tol = 1e-12;
    if u < -tol || v < -tol || u + v > 1.0 + tol {
        return None;
    }
    let t = geometry::dot(e2, q) * inv;
    if t <= 0.0 {
        return None;
    }
    let (u, v) = (u.max(0.0), v.max(0.0));
    let w = (1.0 - u - v).max(0.0);
    let sum = u + v + w;
    Some((t, [w / sum, u / sum, v / sum]))
}

/// Triangles sharing an edge with each triangle, sorted.
pub fn edge_adjacency(faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut edges: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (t, f) in faces.iter().enumerate() {
        for j in 0..3 {
            let (a, b) = (f[j], f[(j + 1) % 3]);
            edges.entry((a.min(b), a.max(b))).or_default().push(t);
        }
    }
    let mut adj = vec![Vec::new(); faces.len()];
    for tris in edges.values() {
        for &t in tris {
            for &u in tris {
                if t != u {
                    adj[t].push(u);
                }
            }
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// Grow the mouth region from seed points over edge-adjacent triangles,
/// admitting a triangle when its centroid lies within `radius` of a seed
/// point. Seed triangles are always admitted. Returns the admitted
/// triangles in ascending order.
pub fn grow_region(mesh: &Mesh, seeds: &[SurfacePoint], radius: f64) -> Result<Vec<usize>, RigError> {
    if seeds.is_empty() {
        return Err(RigError::NoSeeds);
    }
    if let Some(s) = seeds.iter().find(|s| s.tri >= mesh.num_faces()) {
        return Err(RigError::BadSeed(s.tri));
    }
    let points: Vec<Vec3> = seeds.iter().map(|s| binding_point(mesh, s.tri, s.bary)).collect();
    let admits = |t: usize| {
        let c = mesh.centroid(t);
        points.iter().any(|p| geometry::norm(geometry::sub(c, *p)) <= radius)
    };
    let adj = edge_adjacency(&mesh.faces);
    let mut region: BTreeSet<usize> = seeds.iter().map(|s| s.tri).collect();
    let mut frontier: BTreeSet<usize> = region.clone();
    while let Some(t) = frontier.pop_first() {
        for &u in &adj[t] {
            if !region.contains(&u) && admits(u) {
                region.insert(u);
                frontier.insert(u);
            }
        }
    }
    if region.is_empty() {
        return Err(RigError::EmptyRegion);
    }
    Ok(region.into_iter().collect())
}

/// Mouth mask over the cloud: Gaussians whose parent triangle lies in the
/// grown region.
pub fn select_mouth_region(
    mesh: &Mesh,
    cloud: &GaussianCloud,
    seeds: &[SurfacePoint],
    radius: f64,
) -> Result<Vec<bool>, RigError> {
    cloud.check_topology(mesh)?;
    let region: BTreeSet<usize> = grow_region(mesh, seeds, radius)?.into_iter().collect();
    let mask: Vec<bool> = cloud.gaussians.iter().map(|g| region.contains(&g.parent_tri)).collect();
    if !mask.iter().any(|&m| m) {
        return Err(RigError::EmptyRegion);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::gradcheck::finite_diff_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_tri_mesh() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            Arc::from(vec![[0, 1, 2]]),
        )
    }

    fn random_rotation(r: &mut ChaCha8Rng) -> Mat3 {
        let v = [
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
        ];
        geometry::rodrigues(v)
    }

    /// A wavy grid strip.
    pub(crate) fn strip_mesh(cols: usize, rows: usize) -> Mesh {
        let mut v = Vec::new();
        for r in 0..=rows {
            for c in 0..=cols {
                let (x, y) = (c as f64 * 0.1, r as f64 * 0.1);
                v.push([x, y, 0.02 * libm::sin(7.0 * x + 3.0 * y)]);
            }
        }
        let w = cols + 1;
        let mut f = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let a = r * w + c;
                f.push([a, a + w, a + 1]);
                f.push([a + 1, a + w, a + w + 1]);
            }
        }
        Mesh::new(v, Arc::from(f))
    }

    fn random_cloud(mesh: &Mesh, total: usize, seed: u64) -> GaussianCloud {
        let mut r = rng(seed);
        let base = sample_bindings(mesh, total, seed).unwrap();
        let gs = base
            .gaussians()
            .iter()
            .map(|g| LocalGaussian {
                mu_l: [
                    r.random_range(-0.5..0.5),
                    r.random_range(-0.5..0.5),
                    r.random_range(-0.5..0.5),
                ],
                rot_l: geometry::quat_normalize([
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ]),
                scale_l: [
                    r.random_range(0.1..1.0),
                    r.random_range(0.1..1.0),
                    r.random_range(0.1..1.0),
                ],
                ..g.clone()
            })
            .collect();
        GaussianCloud::new(gs, vec![false; total], mesh.num_faces()).unwrap()
    }

    #[test]
    fn unit_right_triangle_frame() {
        let f = compute_triangle_frame(&unit_tri_mesh(), 0).unwrap();
        assert_eq!(f.rot, geometry::IDENTITY);
        assert!((f.center[0] - 1.0 / 3.0).abs() < 1e-15 && (f.center[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.center[2], 0.0);
        assert_eq!(f.scale, 1.0);
    }

    #[test]
    fn frame_homogeneity_and_degenerate_error() {
        let m = strip_mesh(2, 1);
        let big = Mesh::new(
            m.vertices.iter().map(|&v| geometry::scale(v, 2.0)).collect(),
            m.faces.clone(),
        );
        for t in 0..m.num_faces() {
            let a = compute_triangle_frame(&m, t).unwrap();
            let b = compute_triangle_frame(&big, t).unwrap();
            assert!((b.scale - 2.0 * a.scale).abs() < 1e-12);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a.rot[i][j] - b.rot[i][j]).abs() < 1e-12);
                }
            }
        }
        let flat = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            Arc::from(vec![[0, 1, 2]]),
        );
        assert!(matches!(
            compute_triangle_frame(&flat, 0),
            Err(RigError::DegenerateTriangle { tri: 0, .. })
        ));
    }

    #[test]
    fn binding_corners_and_centroid() {
        let m = strip_mesh(1, 1);
        let g = |bary| LocalGaussian {
            mu_l: [0.0; 3],
            rot_l: geometry::QUAT_IDENTITY,
            scale_l: [0.1; 3],
            alpha_l: 0.5,
            sh_l: vec![0.0; 3],
            parent_tri: 1,
            bary,
        };
        let third = 1.0 / 3.0;
        let cloud = GaussianCloud::new(
            vec![g([1.0, 0.0, 0.0]), g([third, third, 1.0 - 2.0 * third])],
            vec![false; 2],
            2,
        )
        .unwrap();
        let out = rig_to_global(&cloud, &m).unwrap();
        assert_eq!(out[0].mu, m.vertices[m.faces[1][0]]);
        let c = m.centroid(1);
        for a in 0..3 {
            assert!((out[1].mu[a] - c[a]).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_counts_and_monte_carlo_centroid() {
        let m = strip_mesh(2, 1);
        let cloud = sample_bindings(&m, 4 * 3 + 2, 1).unwrap();
        let counts: Vec<usize> = (0..4)
            .map(|t| cloud.gaussians().iter().filter(|g| g.parent_tri == t).count())
            .collect();
        assert_eq!(counts, [4, 4, 3, 3]);
        assert!(matches!(
            sample_bindings(&m, 3, 0),
            Err(RigError::TooFewGaussians { total: 3, tris: 4 })
        ));

        let tri = unit_tri_mesh();
        let cloud = sample_bindings(&tri, 10_000, 7).unwrap();
        let globals = rig_to_global(&cloud, &tri).unwrap();
        let mean = globals.iter().fold([0.0; 3], |acc, g| geometry::add(acc, g.mu));
        let mean = geometry::scale(mean, 1.0 / 10_000.0);
        let c = tri.centroid(0);
        assert!(geometry::norm(geometry::sub(mean, c)) < 0.01);
    }

    #[test]
    fn identity_and_translation_frames() {
        // A triangle whose frame is exactly R = I, k = 1.
        let mesh = unit_tri_mesh();
        let cloud = random_cloud(&mesh, 5, 3);
        let out = rig_to_global(&cloud, &mesh).unwrap();
        for (l, g) in cloud.gaussians().iter().zip(&out) {
            let p = l.binding_point(&mesh);
            for a in 0..3 {
                assert!((g.mu[a] - (l.mu_l[a] + p[a])).abs() < 1e-12);
                assert!((g.scale[a] - l.scale_l[a]).abs() < 1e-12);
            }
            assert!(geometry::quat_distance(g.rot, l.rot_l) < 1e-12);
        }
        let t = [0.3, -1.0, 2.0];
        let moved = Mesh::new(
            mesh.vertices.iter().map(|&v| geometry::add(v, t)).collect(),
            mesh.faces.clone(),
        );
        let out2 = rig_to_global(&cloud, &moved).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            for i in 0..3 {
                assert!((b.mu[i] - a.mu[i] - t[i]).abs() < 1e-12);
            }
            assert_eq!(a.scale, b.scale);
            assert!(geometry::quat_distance(a.rot, b.rot) < 1e-12);
        }
    }

    #[test]
    fn local_global_round_trip() {
        let mesh = strip_mesh(3, 2);
        let cloud = random_cloud(&mesh, 40, 4);
        let out = rig_to_global(&cloud, &mesh).unwrap();
        for (l, g) in cloud.gaussians().iter().zip(&out) {
            let fr = compute_triangle_frame(&mesh, l.parent_tri).unwrap();
            let back = geometry::scale(
                geometry::mat_t_vec(&fr.rot, geometry::sub(g.mu, l.binding_point(&mesh))),
                1.0 / fr.scale,
            );
            let qback = geometry::quat_mul(geometry::quat_conj(geometry::quat_from_mat(&fr.rot)), g.rot);
            for a in 0..3 {
                assert!((back[a] - l.mu_l[a]).abs() < 1e-9);
                assert!((g.scale[a] / fr.scale - l.scale_l[a]).abs() < 1e-9);
            }
            assert!(geometry::quat_distance(qback, l.rot_l) < 1e-9);
        }
    }

    #[test]
    fn rigid_equivariance() {
        let mesh = strip_mesh(2, 2);
        let cloud = random_cloud(&mesh, 16, 5);
        let base = rig_to_global(&cloud, &mesh).unwrap();
        let mut r = rng(6);
        for _ in 0..200 {
            let q = random_rotation(&mut r);
            let t = [
                r.random_range(-3.0..3.0),
                r.random_range(-3.0..3.0),
                r.random_range(-3.0..3.0),
            ];
            let moved = mesh.transformed(&q, t);
            let out = rig_to_global(&cloud, &moved).unwrap();
            let qq = geometry::quat_from_mat(&q);
            for (a, b) in base.iter().zip(&out) {
                let expect = geometry::add(geometry::mat_vec(&q, a.mu), t);
                for i in 0..3 {
                    assert!((b.mu[i] - expect[i]).abs() < 1e-9);
                    assert!((b.scale[i] - a.scale[i]).abs() < 1e-9);
                }
                assert!(geometry::quat_distance(b.rot, geometry::quat_mul(qq, a.rot)) < 1e-9);
            }
        }
    }

    #[test]
    fn mouth_residual_semantics() {
        let mesh = strip_mesh(2, 1);
        let cloud = random_cloud(&mesh, 8, 8);
        let globals = rig_to_global(&cloud, &mesh).unwrap();
        let mask: Vec<bool> = (0..8).map(|i| i % 3 == 1).collect();
        let zeros = vec![MouthResidual::default(); 3];
        let (same, clamped) = apply_mouth_residual(&globals, &mask, &zeros).unwrap();
        assert_eq!(clamped, 0);
        for (a, b) in globals.iter().zip(&same) {
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.scale, b.scale);
            assert!(geometry::quat_distance(a.rot, b.rot) < 1e-15);
        }
        let mut res = zeros.clone();
        res[1].d_mu = [0.0, 0.0, 0.01];
        res[2].d_scale = [-0.5 - globals[7].scale[0], 0.0, 0.0];
        let (out, clamped) = apply_mouth_residual(&globals, &mask, &res).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(out[7].scale[0], SCALE_FLOOR);
        for i in 0..8 {
            assert_eq!(out[i].alpha.to_bits(), globals[i].alpha.to_bits());
            assert_eq!(out[i].sh, globals[i].sh);
            if i == 4 {
                assert_eq!(out[i].mu, geometry::add(globals[i].mu, [0.0, 0.0, 0.01]));
            } else {
                assert_eq!(out[i].mu, globals[i].mu);
            }
        }
        assert!(matches!(
            apply_mouth_residual(&globals, &mask, &res[..2]),
            Err(RigError::ResidualCount { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn rig_op_matches_plain_rig() {
        let mesh = strip_mesh(3, 1);
        let cloud = random_cloud(&mesh, 12, 9);
        let plain = rig_to_global(&cloud, &mesh).unwrap();
        let mut g = Graph::new();
        let (mu, q, s) = local_tensors(&cloud);
        let bindings: Arc<[(usize, Vec3)]> = cloud.bindings().into();
        let v = g.constant(mesh.to_tensor());
        let (mu, q, s) = (g.constant(mu), g.constant(q), g.constant(s));
        let out = rig_op(&mut g, &mesh.faces, &bindings, v, mu, q, s).unwrap();
        let expect = globals_to_geom(&plain);
        for (a, b) in g.value(out).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn local_tensors(cloud: &GaussianCloud) -> (Tensor, Tensor, Tensor) {
        let n = cloud.len();
        let gs = cloud.gaussians();
        (
            Tensor::new(vec![n, 3], gs.iter().flat_map(|g| g.mu_l).collect()).unwrap(),
            Tensor::new(vec![n, 4], gs.iter().flat_map(|g| g.rot_l).collect()).unwrap(),
            Tensor::new(vec![n, 3], gs.iter().flat_map(|g| g.scale_l).collect()).unwrap(),
        )
    }

    #[test]
    fn rig_and_residual_ops_pass_gradcheck() {
        let mesh = strip_mesh(2, 2);
        let cloud = random_cloud(&mesh, 10, 11);
        let bindings: Arc<[(usize, Vec3)]> = cloud.bindings().into();
        let mouth: Arc<[usize]> = Arc::from(vec![1usize, 4, 8]);
        let mut r = rng(12);
        let w = Tensor::new(
            vec![10, GEOM_COLS],
            (0..10 * GEOM_COLS).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let res0 = Tensor::new(
            vec![3, RESIDUAL_COLS],
            (0..27).map(|_| r.random_range(-0.05..0.05)).collect(),
        )
        .unwrap();
        let (mu0, q0, s0) = local_tensors(&cloud);
        let inputs = [mesh.to_tensor(), mu0, q0, s0, res0];
        let eval = |xs: &[Tensor], which: usize| -> (f64, Tensor) {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().enumerate().map(|(i, x)| g.param(ParamId(i), x)).collect();
            let geom = rig_op(&mut g, &mesh.faces, &bindings, vars[0], vars[1], vars[2], vars[3]).unwrap();
            let geom = mouth_residual_op(&mut g, geom, vars[4], &mouth).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(geom, wv);
            let p = g.square(p);
            let l = g.sum(p);
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.get(ParamId(which)).unwrap().clone())
        };
        for which in 0..5 {
            let err = finite_diff_check(
                |x| {
                    let mut xs = inputs.clone();
                    xs[which] = x.clone();
                    Ok(eval(&xs, which).0)
                },
                |_| eval(&inputs, which).1,
                &inputs[which],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "input {which}: {err}");
        }
    }

    fn two_lobe_mesh() -> Mesh {
        // Two strips joined by one long thin bridge of triangles.
        let mut v = Vec::new();
        let mut f = Vec::new();
        let xs = [0.0, 0.1, 0.2, 1.2, 1.3, 1.4];
        for &x in &xs {
            v.push([x, 0.0, 0.0]);
            v.push([x, 0.1, 0.0]);
        }
        for c in 0..xs.len() - 1 {
            let a = 2 * c;
            f.push([a, a + 2, a + 1]);
            f.push([a + 1, a + 2, a + 3]);
        }
        Mesh::new(v, Arc::from(f))
    }

    #[test]
    fn region_growing_fixtures() {
        let m = two_lobe_mesh();
        let seed = SurfacePoint {
            tri: 0,
            bary: [0.2, 0.3, 0.5],
        };
        assert_eq!(grow_region(&m, &[seed], 1e-9).unwrap(), vec![0]);
        // Lobe one spans x in [0, 0.2]; the bridge and lobe two are far away.
        assert_eq!(grow_region(&m, &[seed], 0.3).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(grow_region(&m, &[seed], 100.0).unwrap(), (0..10).collect::<Vec<_>>());
        let seed2 = SurfacePoint {
            tri: 9,
            bary: [0.3, 0.3, 0.4],
        };
        let a = grow_region(&m, &[seed, seed2], 0.3).unwrap();
        let b = grow_region(&m, &[seed2, seed], 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0, 1, 2, 3, 6, 7, 8, 9]);
        assert_eq!(grow_region(&m, &[], 1.0), Err(RigError::NoSeeds));

        let cloud = sample_bindings(&m, 20, 0).unwrap();
        let mask = select_mouth_region(&m, &cloud, &[seed], 1e-9).unwrap();
        for (g, &inside) in cloud.gaussians().iter().zip(&mask) {
            assert_eq!(inside, g.parent_tri == 0);
        }
    }

    #[test]
    fn landmark_rays() {
        use crate::render::Camera;
        // Two stacked copies of a triangle facing a camera that looks down +z.
        let near = [[-1.0, -1.0, 2.0], [-1.0, 1.0, 2.0], [1.0, -1.0, 2.0]];
        let far = [[-1.0, -1.0, 3.0], [-1.0, 1.0, 3.0], [1.0, -1.0, 3.0]];
        let mut v = far.to_vec();
        v.extend_from_slice(&near);
        let mesh = Mesh::new(v, Arc::from(vec![[0, 1, 2], [3, 4, 5]]));
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0, geometry::IDENTITY, [0.0; 3], 64, 64, 0.1).unwrap();
        let project = |p: Vec3| [100.0 * p[0] / p[2] + 32.0, 100.0 * p[1] / p[2] + 32.0];
        let hits = anchor_landmarks(
            &[project([-0.5, -0.5, 2.0]), project(near[1]), [63.0, 63.0]],
            &cam,
            &mesh,
        );
        let h0 = hits[0].unwrap();
        assert_eq!(h0.tri, 1);
        let h1 = hits[1].unwrap();
        assert_eq!(h1.tri, 1);
        assert!((h1.bary[1] - 1.0).abs() < 1e-6 && h1.bary[0].abs() < 1e-6);
        assert!(hits[2].is_none());
    }

    #[test]
    fn split_sampling_fixes_mouth_budget() {
        let mesh = strip_mesh(6, 3);
        let tris = mesh.num_faces();
        let region = [4usize, 5, 10];
        let cloud = sample_bindings_split(&mesh, 100, &region, 12, 3).unwrap();
        assert_eq!(cloud.len(), 100);
        assert_eq!(cloud.mouth_indices().len(), 12);
        for (g, &m) in cloud.gaussians().iter().zip(cloud.mouth_mask()) {
            assert_eq!(m, region.contains(&g.parent_tri));
        }
        // Every triangle gets at least one Gaussian.
        let mut seen = vec![false; tris];
        for g in cloud.gaussians() {
            seen[g.parent_tri] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert!(sample_bindings_split(&mesh, 100, &region, 2, 3).is_err());
        assert!(sample_bindings_split(&mesh, 100, &[], 2, 3).is_err());
    }
}
