//! Finite-difference checks of every differentiable operation, bundled so
//! the command line and the acceptance tests run the same probes.
//!
//! Each entry builds a scalar on a fresh graph from a list of leaf
//! tensors (leaf `i` is registered as `ParamId(i)`), takes the analytic
//! gradient by reverse mode and compares it with central differences on
//! a strided subset of coordinates under the mixed error.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::geometry::{self, Vec3};
use crate::gradcheck::finite_diff_mixed;
use crate::grmn::{adain, Grmn, GrmnConfig, NUM_EMOTIONS};
use crate::head::{deform_mesh_op, rigid_transform_op, HeadModelAssets};
use crate::loss::{loss_geo, loss_kl, loss_render, loss_score, GeometryTarget, TeacherSignals};
use crate::math;
use crate::nn::{Mlp, ParamGroup, ParamStore};
use crate::render::{depth_normals_op, globals_to_tensors, render_op, Camera, OUT_ALPHA, OUT_DEPTH, RENDER_COLS};
use crate::rig::{mouth_residual_op, rig_op, GlobalGaussian, GEOM_COLS, RESIDUAL_COLS};
use crate::tensor::Tensor;

/// Tolerance of every check except the renderer's.
pub const TOLERANCE: f64 = 1e-4;
pub const RENDER_TOLERANCE: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
    /// Coordinates probed.
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{check}: {reason}")]
pub struct SuiteError {
    pub check: &'static str,
    pub reason: String,
}

type Build<'a> = dyn Fn(&mut Graph, &[Tensor]) -> Result<Var, String> + 'a;

fn err(check: &'static str) -> impl Fn(String) -> SuiteError {
    move |reason| SuiteError { check, reason }
}

fn s<E: ToString>(e: E) -> String {
    e.to_string()
}

/// Probe up to `per_leaf` coordinates of each leaf.
fn check(
    name: &'static str,
    leaves: &[Tensor],
    build: &Build,
    h: f64,
    per_leaf: usize,
    tolerance: f64,
) -> Result<CheckResult, SuiteError> {
    let e = err(name);
    let mut g = Graph::new();
    let l = build(&mut g, leaves).map_err(&e)?;
    let grads = g.backward(l).map_err(|x| e(s(x)))?;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (i, x0) in leaves.iter().enumerate() {
        let zero = Tensor::zeros(x0.dims());
        let analytic = grads.get(ParamId(i)).unwrap_or(&zero);
        let stride = 1 + x0.len() / per_leaf.max(1);
        let coords: Vec<usize> = (i % stride..x0.len()).step_by(stride).collect();
        for &c in &coords {
            let rep = finite_diff_mixed(
                |x| {
                    let mut ys = leaves.to_vec();
                    ys[i] = x.clone();
                    let mut g = Graph::new();
                    let l = build(&mut g, &ys).map_err(|_| crate::gradcheck::GradcheckError::NonFinite {
                        coord: c,
                        value: f64::NAN,
                    })?;
                    Ok(g.value(l).item())
                },
                analytic,
                x0,
                h,
                &[c],
            )
            .map_err(|x| e(s(x)))?;
            worst = worst.max(rep.max_rel_err);
            probes += 1;
        }
    }
    Ok(CheckResult {
        name,
        max_err: worst,
        tolerance,
        probes,
    })
}

fn params(g: &mut Graph, leaves: &[Tensor]) -> Vec<Var> {
    leaves.iter().enumerate().map(|(i, t)| g.param(ParamId(i), t)).collect()
}

fn randt(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_parts(dims.to_vec(), (0..n).map(|_| scale * math::randn(rng)).collect())
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_parts(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Sum of `w * x^2` style read-out so every output entry matters.
fn readout(g: &mut Graph, x: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv);
    let q = g.square(p);
    let lin = g.sum(p);
    let quad = g.sum(q);
    g.add(lin, quad)
}

fn primitives(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let leaves = [
        randt(rng, &[3, 4], 1.0),
        randt(rng, &[4, 5], 1.0),
        uniform(rng, &[3, 5], 0.5, 2.0),
    ];
    let w = randt(rng, &[3, 5], 1.0);
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let v = params(g, xs);
        let m = g.matmul(v[0], v[1]);
        let a = g.gelu(m);
        let b = g.softmax_rows(m);
        let c = g.log_softmax_rows(m);
        let d = g.tanh(m);
        let e = g.normalize_rows(a, 1e-5);
        let f = g.normalize_cols(d, 1e-5);
        let r = g.sqrt(v[2]);
        let q = g.div(b, v[2]);
        let ln = g.ln(v[2]);
        let sig = g.sigmoid(m);
        let t = g.transpose(m);
        let tt = g.transpose(t);
        let ex = g.exp(c);
        let sum = g.add_n(&[a, b, c, d, e, f, r, q, ln, sig, tt, ex]);
        Ok(readout(g, sum, &w))
    };
    check("autodiff primitives", &leaves, &build, 1e-6, 20, TOLERANCE)
}

fn grid_head(rng: &mut ChaCha8Rng) -> Result<HeadModelAssets, String> {
    let n = 4;
    let k = 3;
    let mut template = Vec::new();
    let mut skin = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let (u, v) = (c as f64 / 3.0 - 0.5, r as f64 / 3.0 - 0.5);
            template.push([0.2 * u, 0.2 * v, 1.0 + 0.05 * (u * u + v * v)]);
            let w = if r >= 2 { 0.3 * r as f64 - 0.2 } else { 0.0 };
            skin.push([1.0 - w.min(1.0), w.min(1.0)]);
        }
    }
    let mut faces = Vec::new();
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let a = r * n + c;
            faces.push([a, a + n, a + 1]);
            faces.push([a + 1, a + n, a + n + 1]);
        }
    }
    let basis = (0..n * n * 3 * k).map(|_| 0.02 * math::randn(rng)).collect();
    HeadModelAssets::new(template, basis, k, skin, [0.0, -0.05, 1.1], faces).map_err(s)
}

fn deform(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let head = Arc::new(grid_head(rng).map_err(err("deform_mesh"))?);
    let rot = geometry::rodrigues([0.1, -0.2, 0.05]);
    let trans = [0.01, 0.02, -0.03];
    let w = randt(rng, &[head.num_vertices(), 3], 1.0);
    let leaves = [
        randt(rng, &[3], 1.0),
        Tensor::from_parts(vec![3], vec![0.2, -0.1, 0.05]),
    ];
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let v = params(g, xs);
        let verts = deform_mesh_op(g, &head, v[0], v[1]).map_err(s)?;
        let posed = rigid_transform_op(g, verts, &rot, trans);
        Ok(readout(g, posed, &w))
    };
    check("deform_mesh", &leaves, &build, 1e-6, 3, TOLERANCE)
}

fn rig(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let name = "rig_to_global";
    let head = grid_head(rng).map_err(err(name))?;
    let mesh = head.rest_mesh();
    let g_count = 12;
    let bindings: Arc<[(usize, Vec3)]> = (0..g_count)
        .map(|i| {
            let r = math::sqrt(rng.random_range(0.05..0.95));
            let t: f64 = rng.random_range(0.05..0.95);
            (i % mesh.num_faces(), [1.0 - r, r * (1.0 - t), r * t])
        })
        .collect();
    let mouth: Arc<[usize]> = Arc::from(vec![1usize, 5, 9]);
    let quat = Tensor::from_parts(
        vec![g_count, 4],
        (0..g_count)
            .flat_map(|_| {
                geometry::quat_from_axis_angle([0.3 * math::randn(rng), 0.3 * math::randn(rng), 0.3 * math::randn(rng)])
            })
            .collect(),
    );
    let leaves = [
        mesh.to_tensor(),
        randt(rng, &[g_count, 3], 0.1),
        quat,
        uniform(rng, &[g_count, 3], 0.05, 0.3),
        randt(rng, &[3, RESIDUAL_COLS], 0.03),
    ];
    let w = randt(rng, &[g_count, GEOM_COLS], 1.0);
    let faces = mesh.faces.clone();
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let v = params(g, xs);
        let geom = rig_op(g, &faces, &bindings, v[0], v[1], v[2], v[3]).map_err(s)?;
        let geom = mouth_residual_op(g, geom, v[4], &mouth).map_err(s)?;
        Ok(readout(g, geom, &w))
    };
    check(name, &leaves, &build, 1e-6, 12, TOLERANCE)
}

fn adain_check(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "adain", ParamGroup::AdaIn(0), &[3, 6, 8], 1.0, rng);
    let n = store.len();
    let mut leaves: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    leaves.push(randt(rng, &[5, 4], 1.0));
    leaves.push(randt(rng, &[1, 3], 1.0));
    let w = randt(rng, &[5, 4], 1.0);
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let mut st = store.clone();
        for (k, id) in store.ids().enumerate() {
            *st.get_mut(id) = xs[k].clone();
        }
        let stream = g.param(ParamId(n), &xs[n]);
        let sv = g.param(ParamId(n + 1), &xs[n + 1]);
        let y = adain(g, &st, &mlp, stream, sv);
        Ok(readout(g, y, &w))
    };
    check("adain", &leaves, &build, 1e-6, 8, TOLERANCE)
}

fn motion_network(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let config = GrmnConfig {
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
    };
    let mut store = ParamStore::new();
    let net = Grmn::new(config, 1, &mut store, rng);
    // Move the modulation away from its identity initialisation.
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v += 0.1 * math::randn(rng);
        }
    }
    let n = store.len();
    let mut leaves: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    leaves.push(randt(rng, &[2, config.d_audio], 1.0));
    leaves.push(randt(rng, &[2, config.d_au], 1.0));
    leaves.push(randt(rng, &[config.d_identity], 1.0));
    let w_face = randt(rng, &[2, config.face_dim()], 1.0);
    let w_mouth = randt(rng, &[2, config.mouth_dim()], 1.0);
    let w_z = randt(rng, &[2, NUM_EMOTIONS], 1.0);
    let w_g = randt(rng, &[2, 1], 1.0);
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let mut st = store.clone();
        for (k, id) in store.ids().enumerate() {
            *st.get_mut(id) = xs[k].clone();
        }
        let a = g.param(ParamId(n), &xs[n]);
        let e = g.param(ParamId(n + 1), &xs[n + 1]);
        let sv = g.param(ParamId(n + 2), &xs[n + 2]);
        let m = net.forward(g, &st, a, e, sv, 0, &[0, 1]).map_err(s)?;
        let mouth = m.mouth.ok_or("no mouth output")?;
        let parts = [
            readout(g, m.face, &w_face),
            readout(g, mouth, &w_mouth),
            readout(g, m.z_e, &w_z),
            readout(g, m.gate, &w_g),
        ];
        Ok(g.add_n(&parts))
    };
    check("motion network heads", &leaves, &build, 1e-5, 4, TOLERANCE)
}

fn teacher(rng: &mut ChaCha8Rng, t: usize) -> Result<TeacherSignals, String> {
    let p = (0..t)
        .map(|_| {
            let mut p: [f64; NUM_EMOTIONS] = core::array::from_fn(|_| rng.random_range(0.05..1.0));
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
            p
        })
        .collect();
    TeacherSignals::from_distributions(p).map_err(s)
}

fn losses(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>, SuiteError> {
    let (w, h) = (7, 6);
    let gt = uniform(rng, &[w * h, 3], 0.0, 1.0);
    let render = check(
        "loss_render",
        &[uniform(rng, &[w * h, 3], 0.0, 1.0)],
        &|g: &mut Graph, xs: &[Tensor]| {
            let v = params(g, xs);
            let t = g.constant(gt.clone());
            loss_render(g, v[0], t, w, h, 0.2).map_err(s)
        },
        1e-6,
        40,
        TOLERANCE,
    )?;
    let tk = teacher(rng, 4).map_err(err("loss_kl"))?;
    let kl = check(
        "loss_kl",
        &[randt(rng, &[4, NUM_EMOTIONS], 1.0)],
        &|g: &mut Graph, xs: &[Tensor]| {
            let v = params(g, xs);
            loss_kl(g, v[0], &tk)
                .map_err(s)?
                .ok_or_else(|| "no supervised frames".into())
        },
        1e-6,
        28,
        TOLERANCE,
    )?;
    let score = check(
        "loss_score",
        &[uniform(rng, &[4, 1], 0.05, 0.95)],
        &|g: &mut Graph, xs: &[Tensor]| {
            let v = params(g, xs);
            loss_score(g, v[0], &tk)
                .map_err(s)?
                .ok_or_else(|| "no supervised frames".into())
        },
        1e-6,
        4,
        TOLERANCE,
    )?;
    let cam = Arc::new(
        Camera::new(10.0, 10.0, 5.0, 5.0, geometry::IDENTITY, [0.0; 3], 10, 10, 0.1)
            .map_err(|x| err("loss_geo")(s(x)))?,
    );
    let depth = |rng: &mut ChaCha8Rng| {
        Tensor::from_parts(
            vec![100, 1],
            (0..100)
                .map(|p| 2.0 + 0.02 * (p % 10) as f64 + 0.01 * (p / 10) as f64 + 0.002 * math::randn(rng))
                .collect(),
        )
    };
    let target_depth = depth(rng);
    let target_normals = crate::render::depth_to_normals(target_depth.data(), &cam);
    let target = GeometryTarget::from_maps(target_depth.data().to_vec(), target_normals);
    let geo = check(
        "loss_geo",
        &[depth(rng)],
        &|g: &mut Graph, xs: &[Tensor]| {
            let v = params(g, xs);
            let n = depth_normals_op(g, &cam, v[0]);
            loss_geo(g, v[0], n, &target, 1e-2, 1e-3).map_err(s)
        },
        1e-7,
        30,
        TOLERANCE,
    )?;
    Ok(vec![render, kl, score, geo])
}

fn renderer(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let name = "render interior pixels";
    let size = 24;
    let cam = Arc::new(
        Camera::new(24.0, 24.0, 12.0, 12.0, geometry::IDENTITY, [0.0; 3], size, size, 0.1)
            .map_err(|x| err(name)(s(x)))?,
    );
    let scene: Vec<GlobalGaussian> = (0..10)
        .map(|_| GlobalGaussian {
            mu: [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(1.8..2.6),
            ],
            rot: geometry::quat_from_axis_angle([math::randn(rng), math::randn(rng), math::randn(rng)]),
            scale: [
                rng.random_range(0.08..0.25),
                rng.random_range(0.08..0.25),
                rng.random_range(0.08..0.25),
            ],
            alpha: rng.random_range(0.3..0.8),
            sh: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
        })
        .collect();
    let (geom, opacity, sh) = globals_to_tensors(&scene);
    let reference = crate::render::render(&scene, &cam).map_err(|x| err(name)(s(x)))?;
    let mut w = vec![0.0; size * size * RENDER_COLS];
    for y in 2..size - 2 {
        for x in 2..size - 2 {
            let p = y * size + x;
            for k in 0..RENDER_COLS {
                if k == OUT_DEPTH && reference.alpha[p] < 0.05 {
                    continue;
                }
                let scale = if k == OUT_DEPTH || k == OUT_ALPHA { 0.3 } else { 1.0 };
                w[p * RENDER_COLS + k] = scale * rng.random_range(-1.0..1.0);
            }
        }
    }
    let w = Tensor::from_parts(vec![size * size, RENDER_COLS], w);
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let v = params(g, xs);
        let out = render_op(g, &cam, v[0], v[1], v[2]).map_err(s)?;
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv);
        Ok(g.sum(p))
    };
    check(name, &[geom, opacity, sh], &build, 1e-6, 40, RENDER_TOLERANCE)
}

fn normals(rng: &mut ChaCha8Rng) -> Result<CheckResult, SuiteError> {
    let name = "depth normals";
    let cam = Arc::new(
        Camera::new(8.0, 8.0, 4.0, 4.0, geometry::IDENTITY, [0.0; 3], 8, 8, 0.1).map_err(|x| err(name)(s(x)))?,
    );
    let d = Tensor::from_parts(
        vec![64, 1],
        (0..64)
            .map(|p| 1.5 + 0.03 * (p % 8) as f64 + 0.01 * math::randn(rng))
            .collect(),
    );
    let w = randt(rng, &[64, 3], 1.0);
    let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
        let v = params(g, xs);
        let n = depth_normals_op(g, &cam, v[0]);
        Ok(readout(g, n, &w))
    };
    check(name, &[d], &build, 1e-7, 64, TOLERANCE)
}

/// Run every check with a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        primitives(&mut rng)?,
        deform(&mut rng)?,
        rig(&mut rng)?,
        adain_check(&mut rng)?,
        motion_network(&mut rng)?,
    ];
    out.extend(losses(&mut rng)?);
    out.push(normals(&mut rng)?);
    out.push(renderer(&mut rng)?);
    Ok(out)
}

/// One line per check.
pub fn format_results(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| {
            format!(
                "{} {:<24} max err {:.3e} (tol {:.0e}, {} probes)\n",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.max_err,
                r.tolerance,
                r.probes
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(0).unwrap();
        assert_eq!(results.len(), 11);
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.probes > 0);
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        let leaves = [Tensor::from_parts(vec![3], vec![0.5, -1.0, 2.0])];
        let build = |g: &mut Graph, xs: &[Tensor]| -> Result<Var, String> {
            let v = params(g, xs);
            // x^2 with a constant (wrong) gradient.
            let c = g.custom(&[v[0]], xs[0].map(|x| x * x), |ctx| {
                alloc::vec![Some(ctx.grad.map(|g| 3.0 * g))]
            });
            Ok(g.sum(c))
        };
        let r = check("broken", &leaves, &build, 1e-6, 3, TOLERANCE).unwrap();
        assert!(!r.passed());
    }
}
