//! Procedural corpus: heads, scripted motion, features, teacher signals
//! and reference renders.
//!
//! Each head is a curved grid with a slit mouth and a recessed cavity
//! behind it; the lower face follows the jaw. Expression components 0..4
//! are speech shapes, 4..10 emotion shapes. A clip starts with a few rest
//! frames, then runs one emotion episode per class (intensity ramping
//! 0 -> 1 -> 0) over continuous speech. Audio features are a fixed linear
//! read-out of the speech shapes and jaw, with a per-identity channel
//! affine; action units are a nonnegative read-out of the emotion shapes.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{self, Vec3};
use crate::grmn::{NEUTRAL, NUM_EMOTIONS};
use crate::head::{HeadModelAssets, HeadModelError, Mesh};
use crate::loss::{GeometryTarget, LossError, TeacherSignals};
use crate::math;
use crate::render::{self, depth_to_normals, Camera, RenderError};
use crate::rig::{self, sample_bindings_split, GaussianCloud, RigError};
use crate::tensor::Tensor;
use crate::train::{mouth_triangles, Clip, Frame, Pose, Subject, TrainError};

/// Expression components of the procedural head.
pub const SYNTH_EXPR: usize = 10;
const SPEECH: usize = 4;
const EMO: usize = 6;
const GRID: usize = 21;
const MOUTH_ROW: usize = 14;
const SLIT: core::ops::Range<usize> = 7..13;
const CAVITY_ROWS: usize = 4;
const CAVITY_COLS: usize = 7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    Spec(&'static str),
    #[error(transparent)]
    Head(#[from] HeadModelError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub frames: usize,
    /// Frames of the extra feature-only clip per identity.
    pub heldout_frames: usize,
    pub rest_frames: usize,
    pub episode_len: usize,
    pub width: usize,
    pub height: usize,
    pub gaussians: usize,
    pub mouth_gaussians: usize,
    pub mouth_radius: f64,
    pub binding_seed: u64,
    pub d_audio: usize,
    pub d_au: usize,
    pub d_identity: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 4,
            frames: 125,
            heldout_frames: 125,
            rest_frames: 5,
            episode_len: 20,
            width: 64,
            height: 64,
            gaussians: 2000,
            mouth_gaussians: 120,
            mouth_radius: 0.03,
            binding_seed: 7,
            d_audio: 64,
            d_au: 17,
            d_identity: 512,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.identities == 0 || self.frames == 0 {
            return Err(SynthError::Spec("need at least one identity and one frame"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SynthError::Spec("images must be at least 8x8"));
        }
        if self.episode_len == 0 || self.d_audio == 0 || self.d_au == 0 || self.d_identity == 0 {
            return Err(SynthError::Spec("zero-sized episode or feature"));
        }
        Ok(())
    }
}

/// Scripted motion of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub psi: Vec<Vec<f64>>,
    pub jaw: Vec<Vec3>,
    /// Emotion intensity `e` per frame.
    pub intensity: Vec<f64>,
    /// Emotion class per frame (neutral outside episodes).
    pub class: Vec<usize>,
    pub poses: Vec<Pose>,
}

/// Generator-side knowledge not visible to training.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub script: Script,
    pub heldout: Script,
    pub cloud: GaussianCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthIdentity {
    pub subject: Subject,
    /// Features and teacher only.
    pub heldout: Clip,
    pub truth: GroundTruth,
}

/// Per-vertex texture coordinates of the procedural head.
struct HeadLayout {
    uv: Vec<[f64; 2]>,
    cavity: Vec<bool>,
    landmarks: Vec<usize>,
    mouth_points: Vec<usize>,
}

fn grid(r: usize, c: usize) -> usize {
    r * GRID + c
}

fn cavity_vertex(r: usize, c: usize) -> usize {
    GRID * GRID + r * CAVITY_COLS + c
}

fn uv_of(r: usize, c: usize) -> [f64; 2] {
    let s = 2.0 / (GRID - 1) as f64;
    [-1.0 + s * c as f64, -1.0 + s * r as f64]
}

fn mouth_v() -> f64 {
    uv_of(MOUTH_ROW, 0)[1]
}

fn bump(du: f64, dv: f64) -> f64 {
    math::exp(-(du * du + dv * dv))
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Displacement of expression component `k` at texture position `(u, v)`.
fn basis_field(k: usize, u: f64, v: f64) -> Vec3 {
    let a = 0.012;
    let vm = mouth_v() + 0.05;
    let mouth = bump(u / 0.45, (v - vm) / 0.22);
    let brow = bump((u.abs() - 0.4) / 0.35, (v + 0.55) / 0.18);
    let corner = bump((u.abs() - 0.38) / 0.22, (v - vm) / 0.25);
    let eye = bump((u.abs() - 0.4) / 0.22, (v + 0.25) / 0.16);
    let cheek = bump((u.abs() - 0.55) / 0.25, (v - 0.15) / 0.3);
    let side = if u >= 0.0 { 1.0 } else { -1.0 };
    let below = if v >= vm { 1.0 } else { -1.0 };
    match k {
        0 => [-a * u / 0.45 * mouth, 0.0, -0.5 * a * mouth],
        1 => [0.0, a * below * mouth, 0.0],
        2 => [0.0, 0.0, -a * mouth],
        3 => [a * u / 0.45 * mouth, -0.3 * a * mouth, 0.0],
        4 => [0.0, -a * brow, 0.0],
        5 => [-0.7 * a * side * brow, 0.7 * a * brow, 0.0],
        6 => [0.5 * a * side * corner, -a * corner, 0.0],
        7 => [0.0, a * corner, 0.2 * a * corner],
        8 => [0.0, -a * (v + 0.25) / 0.16 * eye, 0.0],
        _ => [0.0, 0.0, -a * cheek],
    }
}

/// Procedural head with identity variation drawn from `rng`.
fn build_head<R: Rng + ?Sized>(rng: &mut R) -> Result<(HeadModelAssets, HeadLayout), SynthError> {
    let sx = rng.random_range(0.92..1.08);
    let sy = rng.random_range(0.92..1.08);
    let depth = rng.random_range(0.05..0.07);
    let z0 = rng.random_range(0.60..0.64);
    let wob: [f64; 4] = core::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let surface = |u: f64, v: f64| -> Vec3 {
        let bulge = math::sqrt((1.0 - 0.85 * u * u - 0.5 * v * v).max(0.02));
        let jitter =
            0.002 * (math::sin(3.0 * u + wob[0]) * math::cos(2.0 * v + wob[1]) + math::sin(2.0 * u + 3.0 * v + wob[2]));
        [0.10 * sx * u, 0.13 * sy * v, z0 - depth * bulge + jitter]
    };
    let mut template = Vec::new();
    let mut uv = Vec::new();
    let mut cavity = Vec::new();
    for r in 0..GRID {
        for c in 0..GRID {
            let [u, v] = uv_of(r, c);
            template.push(surface(u, v));
            uv.push([u, v]);
            cavity.push(false);
        }
    }
    let vm = mouth_v();
    let cav_v = |r: usize| vm - 0.1 + 0.1 * r as f64;
    for r in 0..CAVITY_ROWS {
        for c in 0..CAVITY_COLS {
            let u = uv_of(0, SLIT.start + c)[0];
            let v = cav_v(r);
            let p = surface(u, v);
            template.push([p[0], p[1], p[2] + 0.012 + 0.004 * math::cos(PI * u / 0.6)]);
            uv.push([u, v]);
            cavity.push(true);
        }
    }

    let mut faces = Vec::new();
    let mut quad = |a: usize, b: usize, c: usize, d: usize| {
        // a b / c d with y growing downward: (a, c, b) faces the camera.
        faces.push([a, c, b]);
        faces.push([b, c, d]);
    };
    for r in 0..GRID - 1 {
        for c in 0..GRID - 1 {
            if r == MOUTH_ROW && SLIT.contains(&c) {
                continue;
            }
            quad(grid(r, c), grid(r, c + 1), grid(r + 1, c), grid(r + 1, c + 1));
        }
    }
    for r in 0..CAVITY_ROWS - 1 {
        for c in 0..CAVITY_COLS - 1 {
            quad(
                cavity_vertex(r, c),
                cavity_vertex(r, c + 1),
                cavity_vertex(r + 1, c),
                cavity_vertex(r + 1, c + 1),
            );
        }
    }

    let n = template.len();
    let mut basis = vec![0.0; n * 3 * SYNTH_EXPR];
    let mut skin = Vec::with_capacity(n);
    for i in 0..n {
        let [u, v] = uv[i];
        if !cavity[i] {
            for k in 0..SYNTH_EXPR {
                let d = basis_field(k, u, v);
                for a in 0..3 {
                    basis[(i * 3 + a) * SYNTH_EXPR + k] = d[a];
                }
            }
        }
        let lower = if cavity[i] { v > vm + 0.05 } else { v > vm + 0.01 };
        let w = if lower {
            1.0 - smoothstep(0.45, 0.85, u.abs())
        } else {
            0.0
        };
        skin.push([1.0 - w, w]);
    }
    let pivot = [0.0, -0.01, z0 + 0.05];
    let head = HeadModelAssets::new(template, basis, SYNTH_EXPR, skin, pivot, faces)?;
    let landmarks = vec![
        grid(3, 4),
        grid(3, 7),
        grid(3, 13),
        grid(3, 16),
        grid(7, 5),
        grid(7, 8),
        grid(7, 12),
        grid(7, 15),
        grid(10, 10),
        grid(MOUTH_ROW, 6),
        grid(MOUTH_ROW, 14),
        grid(MOUTH_ROW, 10),
        grid(MOUTH_ROW + 1, 10),
        grid(19, 10),
        grid(12, 3),
        grid(12, 17),
    ];
    let mouth_points = vec![
        grid(MOUTH_ROW, 8),
        grid(MOUTH_ROW, 10),
        grid(MOUTH_ROW, 12),
        grid(MOUTH_ROW + 1, 8),
        grid(MOUTH_ROW + 1, 10),
        grid(MOUTH_ROW + 1, 12),
    ];
    Ok((
        head,
        HeadLayout {
            uv,
            cavity,
            landmarks,
            mouth_points,
        },
    ))
}

/// Identity-specific colours.
struct Palette {
    skin: [f64; 3],
    lips: [f64; 3],
    brows: [f64; 3],
    iris: [f64; 3],
    freckle: f64,
}

fn palette<R: Rng + ?Sized>(rng: &mut R) -> Palette {
    let tone = rng.random_range(0.45..0.95);
    Palette {
        skin: [
            tone,
            tone * rng.random_range(0.7..0.8),
            tone * rng.random_range(0.55..0.7),
        ],
        lips: [
            rng.random_range(0.6..0.85),
            rng.random_range(0.15..0.3),
            rng.random_range(0.2..0.35),
        ],
        brows: [
            rng.random_range(0.1..0.35),
            rng.random_range(0.07..0.2),
            rng.random_range(0.03..0.1),
        ],
        iris: [
            rng.random_range(0.05..0.3),
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.5),
        ],
        freckle: rng.random_range(0.03..0.07),
    }
}

fn texture(p: &Palette, u: f64, v: f64, in_cavity: bool) -> [f64; 3] {
    let vm = mouth_v() + 0.05;
    if in_cavity {
        return if v < vm - 0.06 {
            [0.92, 0.9, 0.85]
        } else {
            [0.35, 0.07, 0.09]
        };
    }
    let shade = 0.75 + 0.25 * (1.0 - 0.85 * u * u - 0.5 * v * v).max(0.0);
    let mut c = p.skin.map(|s| s * shade);
    let speck = p.freckle * math::sin(17.0 * u) * math::sin(19.0 * v);
    c = c.map(|x| x + speck);
    let sq = |x: f64| x * x;
    let eye = sq((u.abs() - 0.4) / 0.17) + sq((v + 0.25) / 0.07);
    if eye < 1.0 {
        let iris = sq((u.abs() - 0.4) / 0.06) + sq((v + 0.25) / 0.06);
        c = if iris < 1.0 { p.iris } else { [0.95, 0.95, 0.93] };
    } else if (-0.62..-0.48).contains(&v) && (0.15..0.7).contains(&u.abs()) {
        c = p.brows;
    } else if u.abs() < 0.36 && (v - vm).abs() < 0.09 {
        c = p.lips;
    } else if u.abs() < 0.08 && (-0.1..0.2).contains(&v) {
        c = c.map(|x| x * 0.85);
    }
    c.map(|x| x.clamp(0.0, 1.0))
}

/// Reference Gaussians: the trainer's binding layout with a painted
/// appearance and surface-flattened splats.
fn reference_cloud(
    mesh: &Mesh,
    layout: &HeadLayout,
    pal: &Palette,
    region: &[usize],
    spec: &SynthSpec,
) -> Result<GaussianCloud, SynthError> {
    let cloud = sample_bindings_split(mesh, spec.gaussians, region, spec.mouth_gaussians, spec.binding_seed)?;
    let gs = cloud
        .gaussians()
        .iter()
        .map(|g| {
            let f = mesh.faces[g.parent_tri];
            let mut uv = [0.0; 2];
            for j in 0..3 {
                uv[0] += g.bary[j] * layout.uv[f[j]][0];
                uv[1] += g.bary[j] * layout.uv[f[j]][1];
            }
            let in_cavity = layout.cavity[f[0]];
            let color = texture(pal, uv[0], uv[1], in_cavity);
            let s = g.scale_l[0];
            let mut out = g.clone();
            out.scale_l = [1.5 * s, 1.5 * s, 0.3 * s];
            out.alpha_l = 0.95;
            out.sh_l = color.map(render::dc_from_color).to_vec();
            out
        })
        .collect();
    Ok(GaussianCloud::new(gs, cloud.mouth_mask().to_vec(), cloud.num_tris())?)
}

/// Shared read-out matrices, identical for every identity of a corpus.
struct Readout {
    audio: Vec<f64>,
    au: Vec<f64>,
    proto: [[f64; EMO]; EMO],
}

fn readout(seed: u64, spec: &SynthSpec) -> Readout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0fa_0d10);
    let inputs = SPEECH + 1;
    let audio = (0..spec.d_audio * inputs)
        .map(|_| math::randn(&mut rng) / math::sqrt(inputs as f64))
        .collect();
    let au = (0..spec.d_au * EMO).map(|_| rng.random_range(0.0..1.0)).collect();
    let proto = core::array::from_fn(|c| {
        core::array::from_fn(|j| {
            if j == c {
                1.5
            } else if j == (c + 1) % EMO {
                0.3
            } else {
                0.0
            }
        })
    });
    Readout { audio, au, proto }
}

fn script<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &SynthSpec,
    frames: usize,
    gain: f64,
    proto: &[[f64; EMO]; EMO],
) -> Script {
    let fps = 25.0;
    let waves: Vec<[(f64, f64, f64); 3]> = (0..SPEECH)
        .map(|_| {
            core::array::from_fn(|j| {
                let amp = [0.7, 0.35, 0.18][j];
                (amp, rng.random_range(0.4..2.5), rng.random_range(0.0..2.0 * PI))
            })
        })
        .collect();
    let (jf, jp) = (rng.random_range(1.0..3.0), rng.random_range(0.0..2.0 * PI));
    let pose_w: [(f64, f64); 3] =
        core::array::from_fn(|_| (rng.random_range(0.2..0.8), rng.random_range(0.0..2.0 * PI)));
    let mut order: Vec<usize> = (0..EMO).collect();
    order.shuffle(rng);
    let center = [0.0, 0.0, 0.62];
    let mut s = Script {
        psi: Vec::with_capacity(frames),
        jaw: Vec::with_capacity(frames),
        intensity: Vec::with_capacity(frames),
        class: Vec::with_capacity(frames),
        poses: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let time = t as f64 / fps;
        let mut psi = vec![0.0; SYNTH_EXPR];
        let (mut jaw, mut e, mut class, mut pose) = ([0.0; 3], 0.0, NEUTRAL, Pose::IDENTITY);
        if t >= spec.rest_frames {
            for (k, w) in waves.iter().enumerate() {
                psi[k] = gain
                    * w.iter()
                        .map(|&(a, f, p)| a * math::sin(2.0 * PI * f * time + p))
                        .sum::<f64>();
            }
            jaw[0] = gain * 0.12 * (0.5 + 0.5 * math::sin(2.0 * PI * jf * time + jp));
            let k = t - spec.rest_frames;
            let ep = k / spec.episode_len;
            let j = k % spec.episode_len;
            let c = order[ep % EMO];
            let r = math::sin(PI * (j as f64 + 0.5) / spec.episode_len as f64);
            e = r * r;
            class = c;
            for (i, p) in proto[c].iter().enumerate() {
                psi[SPEECH + i] = e * p;
            }
            let angles: [f64; 3] = core::array::from_fn(|a| {
                let (f, p) = pose_w[a];
                [0.03, 0.05, 0.02][a] * math::sin(2.0 * PI * f * time + p)
            });
            let rot = geometry::rodrigues(angles);
            let rc = geometry::mat_vec(&rot, center);
            pose = Pose {
                rot,
                trans: geometry::sub(center, rc),
            };
        }
        s.psi.push(psi);
        s.jaw.push(jaw);
        s.intensity.push(e);
        s.class.push(class);
        s.poses.push(pose);
    }
    s
}

fn teacher_of(s: &Script) -> Result<TeacherSignals, LossError> {
    let p = s
        .intensity
        .iter()
        .zip(&s.class)
        .map(|(&e, &c)| {
            let mut p = [0.0; NUM_EMOTIONS];
            if c != NEUTRAL {
                for (i, v) in p.iter_mut().enumerate() {
                    *v = if i == c { 0.9 * e } else { 0.02 * e };
                }
            }
            p[NEUTRAL] = 1.0 - e;
            p
        })
        .collect();
    TeacherSignals::from_distributions(p)
}

struct Channels {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

fn features<R: Rng + ?Sized>(
    rng: &mut R,
    s: &Script,
    ro: &Readout,
    ch: &Channels,
    spec: &SynthSpec,
) -> (Tensor, Tensor) {
    let t = s.psi.len();
    let inputs = SPEECH + 1;
    let mut audio = Vec::with_capacity(t * spec.d_audio);
    let mut au = Vec::with_capacity(t * spec.d_au);
    for f in 0..t {
        let mut x = [0.0; SPEECH + 1];
        x[..SPEECH].copy_from_slice(&s.psi[f][..SPEECH]);
        x[SPEECH] = 8.0 * s.jaw[f][0];
        for c in 0..spec.d_audio {
            let lin: f64 = (0..inputs).map(|j| ro.audio[c * inputs + j] * x[j]).sum();
            audio.push(ch.gain[c] * lin + ch.bias[c] + 0.03 * math::randn(rng));
        }
        for c in 0..spec.d_au {
            let lin: f64 = (0..EMO).map(|j| ro.au[c * EMO + j] * s.psi[f][SPEECH + j]).sum();
            au.push(lin + 0.01 * rng.random_range(0.0..1.0));
        }
    }
    (
        Tensor::from_parts(vec![t, spec.d_audio], audio),
        Tensor::from_parts(vec![t, spec.d_au], au),
    )
}

/// Camera shared by all synthetic identities.
pub fn synth_camera(width: usize, height: usize) -> Result<Camera, RenderError> {
    let f = 110.0 * width as f64 / 64.0;
    Camera::new(
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        geometry::IDENTITY,
        [0.0; 3],
        width,
        height,
        0.1,
    )
}

/// Posed mesh of a scripted frame.
pub fn scripted_mesh(head: &HeadModelAssets, s: &Script, t: usize) -> Result<Mesh, HeadModelError> {
    let verts = head.deform_vertices(&s.psi[t], s.jaw[t])?;
    let p = s.poses[t];
    Ok(Mesh::new(verts, head.faces().clone()).transformed(&p.rot, p.trans))
}

/// Reference render of a scripted frame.
pub fn render_truth(
    head: &HeadModelAssets,
    cloud: &GaussianCloud,
    s: &Script,
    t: usize,
    cam: &Camera,
) -> Result<render::RenderOutput, SynthError> {
    let mesh = scripted_mesh(head, s, t)?;
    let globals = rig::rig_to_global(cloud, &mesh)?;
    Ok(render::render(&globals, cam)?)
}

/// Generate the whole corpus in memory.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthIdentity>, SynthError> {
    spec.validate()?;
    let ro = readout(seed, spec);
    let cam = Arc::new(synth_camera(spec.width, spec.height)?);
    (0..spec.identities)
        .map(|i| generate_identity(spec, seed, i, &ro, &cam))
        .collect()
}

fn generate_identity(
    spec: &SynthSpec,
    seed: u64,
    i: usize,
    ro: &Readout,
    cam: &Arc<Camera>,
) -> Result<SynthIdentity, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    let (head, layout) = build_head(&mut rng)?;
    let head = Arc::new(head);
    let pal = palette(&mut rng);
    let gain = rng.random_range(0.85..1.15);
    let channels = Channels {
        gain: (0..spec.d_audio).map(|_| rng.random_range(0.7..1.3)).collect(),
        bias: (0..spec.d_audio).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let mut embedding: Vec<f64> = (0..spec.d_identity).map(|_| math::randn(&mut rng)).collect();
    let norm = math::sqrt(embedding.iter().map(|v| v * v).sum());
    embedding.iter_mut().for_each(|v| *v /= norm);

    let main = script(&mut rng, spec, spec.frames, gain, &ro.proto);
    let held = script(&mut rng, spec, spec.heldout_frames.max(1), gain, &ro.proto);
    let (audio, au) = features(&mut rng, &main, ro, &channels, spec);
    let (h_audio, h_au) = features(&mut rng, &held, ro, &channels, spec);

    let first = scripted_mesh(&head, &main, 0)?;
    let mouth_landmarks = layout
        .mouth_points
        .iter()
        .map(|&v| cam.project(first.vertices[v]))
        .collect();
    let frames = (0..spec.frames)
        .map(|t| Frame {
            pose: main.poses[t],
            image: None,
            rest: t < spec.rest_frames,
            geometry: None,
            landmarks: None,
        })
        .collect();
    let mut subject = Subject {
        name: alloc::format!("id{i}"),
        embedding: Tensor::from_parts(vec![spec.d_identity], embedding),
        head: head.clone(),
        camera: cam.clone(),
        mouth_landmarks,
        landmark_vertices: layout.landmarks.clone(),
        clip: Clip {
            audio,
            au,
            teacher: teacher_of(&main)?,
            frames,
        },
    };
    let region = mouth_triangles(&subject, spec.mouth_radius)?;
    let cloud = reference_cloud(&head.rest_mesh(), &layout, &pal, &region, spec)?;
    for t in 0..spec.frames {
        let out = render_truth(&head, &cloud, &main, t, cam)?;
        let mesh = scripted_mesh(&head, &main, t)?;
        let mut normals = depth_to_normals(&out.depth, cam);
        for (n, &a) in normals.iter_mut().zip(&out.alpha) {
            if a <= 0.5 {
                *n = [0.0; 3];
            }
        }
        let frame = &mut subject.clip.frames[t];
        frame.landmarks = Some(
            layout
                .landmarks
                .iter()
                .map(|&v| cam.project(mesh.vertices[v]))
                .collect(),
        );
        frame.geometry = Some(GeometryTarget::from_maps(out.depth.clone(), normals));
        frame.image = Some(Tensor::from_parts(vec![cam.num_pixels(), 3], out.color));
    }
    let heldout = Clip {
        audio: h_audio,
        au: h_au,
        teacher: teacher_of(&held)?,
        frames: held
            .poses
            .iter()
            .map(|&pose| Frame {
                pose,
                image: None,
                rest: false,
                geometry: None,
                landmarks: None,
            })
            .collect(),
    };
    Ok(SynthIdentity {
        subject,
        heldout,
        truth: GroundTruth {
            script: main,
            heldout: held,
            cloud,
        },
    })
}

/// Identity names of a generated corpus.
pub fn names(ids: &[SynthIdentity]) -> Vec<String> {
    ids.iter().map(|s| s.subject.name.clone()).collect()
}
