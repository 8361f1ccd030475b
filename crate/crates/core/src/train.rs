//! Pretraining over several identities, few-shot adaptation to a new one,
//! and inference.
//!
//! Every iteration draws its randomness from a ChaCha stream keyed by
//! `(seed, iteration)`, so a run resumed from a checkpoint replays the
//! uninterrupted run bit for bit.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, GraphError, ParamId, Var};
use crate::geometry::{self, Mat3, Vec3};
use crate::grmn::{argmax, Grmn, GrmnConfig, GrmnError, MotionOutput, NUM_EMOTIONS};
use crate::head::{deform_mesh_op, rigid_transform_op, HeadModelAssets, HeadModelError};
use crate::loss::{
    self, loss_geo, loss_kl, loss_render, loss_score, total_loss_op, GeometryTarget, LossError, LossTerms, LossValues,
    LossWeights, Phase, TeacherSignals,
};
use crate::math;
use crate::nn::{ParamGroup, ParamStore};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::render::{self, depth_normals_op, render_op, Camera, RenderError, RenderOutput, OUT_DEPTH};
use crate::rig::{self, anchor_landmarks, grow_region, mouth_residual_op, rig_op, sample_bindings_split, RigError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("pretraining needs at least 2 identities, got {0}")]
    TooFewIdentities(usize),
    #[error("identity {0} does not exist")]
    UnknownIdentity(usize),
    #[error("identity {identity}: {reason}")]
    Data { identity: String, reason: &'static str },
    #[error("identity {identity}: frame {frame} has no pseudo ground-truth geometry")]
    MissingGeometry { identity: String, frame: usize },
    #[error("non-finite loss at iteration {iteration} (identity {identity}, frames {frames:?})")]
    NonFinite {
        iteration: usize,
        identity: usize,
        frames: Vec<usize>,
    },
    #[error("checkpoint was written by the {found:?} stage, expected {expected:?}")]
    Stage { expected: Stage, found: Stage },
    #[error("sequence has {0} frames; at least one is required")]
    EmptySequence(usize),
    #[error(transparent)]
    Grmn(#[from] GrmnError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Head(#[from] HeadModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Rigid head pose of one frame: `x -> rot x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rot: geometry::IDENTITY,
        trans: [0.0; 3],
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pose: Pose,
    /// Observed image, `HW x 3`. Feature-only clips have none.
    pub image: Option<Tensor>,
    /// Neutral expression with a closed jaw.
    pub rest: bool,
    pub geometry: Option<GeometryTarget>,
    /// Tracked 2D landmarks matching the subject's landmark vertices.
    pub landmarks: Option<Vec<[f64; 2]>>,
}

/// Length-aligned features, teacher signals and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub audio: Tensor,
    pub au: Tensor,
    pub teacher: TeacherSignals,
    pub frames: Vec<Frame>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn image_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.frames[t].image.is_some()).collect()
    }

    fn rest_frames(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| self.frames[t].rest && self.frames[t].image.is_some())
            .collect()
    }
}

/// Everything known about one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub name: String,
    pub embedding: Tensor,
    pub head: Arc<HeadModelAssets>,
    pub camera: Arc<Camera>,
    /// Pixel positions of the mouth landmarks in the first frame.
    pub mouth_landmarks: Vec<[f64; 2]>,
    /// Mesh vertices whose projections are the tracked landmarks.
    pub landmark_vertices: Vec<usize>,
    pub clip: Clip,
}

impl Subject {
    fn data_error(&self, reason: &'static str) -> TrainError {
        TrainError::Data {
            identity: self.name.clone(),
            reason,
        }
    }

    /// Check that features, teacher, frames and images agree with the model.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), TrainError> {
        let c = &self.clip;
        let g = &config.grmn;
        if c.is_empty() {
            return Err(self.data_error("clip has no frames"));
        }
        if c.audio.rows() != c.len() || c.au.rows() != c.len() || c.teacher.len() != c.len() {
            return Err(self.data_error("features, teacher and frames differ in length"));
        }
        if c.audio.cols() != g.d_audio || c.au.cols() != g.d_au {
            return Err(self.data_error("feature width differs from the model"));
        }
        if self.embedding.len() != g.d_identity {
            return Err(self.data_error("identity embedding width differs from the model"));
        }
        if self.head.num_expr() != g.num_expr {
            return Err(self.data_error("head model expression count differs from the model"));
        }
        let pixels = self.camera.num_pixels();
        for f in &c.frames {
            if let Some(img) = &f.image {
                if img.dims() != [pixels, 3] {
                    return Err(self.data_error("image size differs from the camera"));
                }
            }
            if let Some(lm) = &f.landmarks {
                if lm.len() != self.landmark_vertices.len() {
                    return Err(self.data_error("landmark count differs from the landmark vertices"));
                }
            }
            if let Some(geo) = &f.geometry {
                if geo.mask.len() != pixels {
                    return Err(self.data_error("geometry target size differs from the camera"));
                }
            }
        }
        if self.landmark_vertices.iter().any(|&v| v >= self.head.num_vertices()) {
            return Err(self.data_error("landmark vertex out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub grmn: GrmnConfig,
    /// Gaussians per identity.
    pub gaussians: usize,
    pub sh_degree: usize,
    /// Growth radius of the mouth region around its seeds, world units.
    pub mouth_radius: f64,
    pub binding_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grmn: GrmnConfig {
                num_mouth: 120,
                ..GrmnConfig::default()
            },
            gaussians: 2000,
            sh_degree: 0,
            mouth_radius: 0.03,
            binding_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn sh_width(&self) -> usize {
        3 * (self.sh_degree + 1) * (self.sh_degree + 1)
    }
}

/// Parameters of one identity's Gaussian cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    /// `G x 3` offsets in the parent triangle frame.
    pub mu: ParamId,
    /// `G x 4` unnormalised quaternions.
    pub quat: ParamId,
    /// `G x 3` log scales in triangle units.
    pub log_scale: ParamId,
    /// `G x 1` opacity logits.
    pub opacity: ParamId,
    /// `G x 3 (d + 1)^2` colour coefficients.
    pub sh: ParamId,
}

impl GaussianParams {
    pub fn ids(&self) -> [ParamId; 5] {
        [self.mu, self.quat, self.log_scale, self.opacity, self.sh]
    }

    const NAMES: [&'static str; 5] = ["mu", "quat", "log_scale", "opacity", "sh"];

    fn lookup(store: &ParamStore, identity: usize) -> Option<Self> {
        let f = |n: &str| store.find(&alloc::format!("gauss{identity}.{n}"));
        Some(Self {
            mu: f(Self::NAMES[0])?,
            quat: f(Self::NAMES[1])?,
            log_scale: f(Self::NAMES[2])?,
            opacity: f(Self::NAMES[3])?,
            sh: f(Self::NAMES[4])?,
        })
    }
}

/// One identity of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityModel {
    pub name: String,
    pub embedding: Tensor,
    pub head: Arc<HeadModelAssets>,
    pub bindings: Arc<[(usize, Vec3)]>,
    /// Gaussians driven by the mouth offsets, in offset order.
    pub mouth: Arc<[usize]>,
    pub gaussians: GaussianParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub grmn: Grmn,
    pub store: ParamStore,
    pub identities: Vec<IdentityModel>,
}

/// Mouth triangles of a subject: its mouth landmarks lifted onto the
/// first-frame mesh and grown by the configured radius.
pub fn mouth_triangles(subject: &Subject, radius: f64) -> Result<Vec<usize>, TrainError> {
    let pose = subject.clip.frames.first().map_or(Pose::IDENTITY, |f| f.pose);
    let mesh = subject.head.rest_mesh().transformed(&pose.rot, pose.trans);
    let seeds: Vec<_> = anchor_landmarks(&subject.mouth_landmarks, &subject.camera, &mesh)
        .into_iter()
        .flatten()
        .collect();
    Ok(grow_region(&mesh, &seeds, radius)?)
}

impl Model {
    /// Fresh model with one modulation MLP and one Gaussian cloud per
    /// subject.
    pub fn new(config: ModelConfig, subjects: &[&Subject], seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let grmn = Grmn::new(config.grmn, subjects.len(), &mut store, &mut rng);
        let mut model = Self {
            config,
            grmn,
            store,
            identities: Vec::new(),
        };
        for s in subjects {
            model.push_identity(s)?;
        }
        Ok(model)
    }

    /// Rebuild the layer structure around a stored parameter set.
    pub fn from_parts(config: ModelConfig, store: ParamStore, identities: Vec<IdentityMeta>) -> Result<Self, String> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grmn = Grmn::new(config.grmn, identities.len(), &mut scratch, &mut rng);
        grmn.rebind(&scratch, &store)?;
        let identities = identities
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let gaussians =
                    GaussianParams::lookup(&store, i).ok_or_else(|| alloc::format!("identity {i} has no Gaussians"))?;
                check_identity(&config, &store, i, &m, &gaussians)?;
                Ok(IdentityModel {
                    name: m.name,
                    embedding: m.embedding,
                    head: m.head,
                    bindings: m.bindings,
                    mouth: m.mouth,
                    gaussians,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Self {
            config,
            grmn,
            store,
            identities,
        })
    }

    fn push_identity(&mut self, subject: &Subject) -> Result<usize, TrainError> {
        subject.validate(&self.config)?;
        let i = self.identities.len();
        let region = mouth_triangles(subject, self.config.mouth_radius)?;
        let rest = subject.head.rest_mesh();
        let cloud = sample_bindings_split(
            &rest,
            self.config.gaussians,
            &region,
            self.config.grmn.num_mouth,
            self.config.binding_seed,
        )?;
        let n = cloud.len();
        let group = ParamGroup::Gaussians(i);
        let mut add = |name: &str, t: Tensor| self.store.add(alloc::format!("gauss{i}.{name}"), group, t, false);
        let gs = cloud.gaussians();
        let mu = add("mu", Tensor::zeros(&[n, 3]));
        let quat = add(
            "quat",
            Tensor::from_parts(vec![n, 4], gs.iter().flat_map(|g| g.rot_l).collect()),
        );
        let log_scale = add(
            "log_scale",
            Tensor::from_parts(vec![n, 3], gs.iter().flat_map(|g| g.scale_l.map(math::ln)).collect()),
        );
        let opacity = add("opacity", Tensor::zeros(&[n, 1]));
        let sh = add("sh", Tensor::zeros(&[n, self.config.sh_width()]));
        self.identities.push(IdentityModel {
            name: subject.name.clone(),
            embedding: subject.embedding.clone(),
            head: subject.head.clone(),
            bindings: cloud.bindings().into(),
            mouth: cloud.mouth_indices().into(),
            gaussians: GaussianParams {
                mu,
                quat,
                log_scale,
                opacity,
                sh,
            },
        });
        Ok(i)
    }

    fn identity(&self, i: usize) -> Result<&IdentityModel, TrainError> {
        self.identities.get(i).ok_or(TrainError::UnknownIdentity(i))
    }

    /// Metadata needed, next to the parameter store, to rebuild the model.
    pub fn identity_meta(&self) -> Vec<IdentityMeta> {
        self.identities
            .iter()
            .map(|m| IdentityMeta {
                name: m.name.clone(),
                embedding: m.embedding.clone(),
                head: m.head.clone(),
                bindings: m.bindings.clone(),
                mouth: m.mouth.clone(),
            })
            .collect()
    }

    /// Run the motion network on constant inputs.
    pub fn motion(
        &self,
        identity: usize,
        audio: &Tensor,
        au: &Tensor,
        mouth_rows: &[usize],
    ) -> Result<MotionOutput, TrainError> {
        let id = self.identity(identity)?;
        Ok(self
            .grmn
            .run(&self.store, audio, au, &id.embedding, identity, mouth_rows)?)
    }
}

fn check_identity(
    config: &ModelConfig,
    store: &ParamStore,
    i: usize,
    m: &IdentityMeta,
    p: &GaussianParams,
) -> Result<(), String> {
    let n = m.bindings.len();
    let widths = [3, 4, 3, 1, config.sh_width()];
    for ((id, w), name) in p.ids().into_iter().zip(widths).zip(GaussianParams::NAMES) {
        let e = store.entry(id);
        if e.value.dims() != [n, w] || e.group != ParamGroup::Gaussians(i) {
            return Err(alloc::format!("parameter gauss{i}.{name} has the wrong shape or group"));
        }
    }
    if m.embedding.len() != config.grmn.d_identity || m.head.num_expr() != config.grmn.num_expr {
        return Err(alloc::format!("identity {i} does not match the model dimensions"));
    }
    if m.bindings.iter().any(|&(t, _)| t >= m.head.num_faces()) || m.mouth.iter().any(|&g| g >= n) {
        return Err(alloc::format!("identity {i} has out-of-range bindings"));
    }
    if config.grmn.num_mouth > 0 && m.mouth.len() != config.grmn.num_mouth {
        return Err(alloc::format!(
            "identity {i} has {} mouth Gaussians, expected {}",
            m.mouth.len(),
            config.grmn.num_mouth
        ));
    }
    Ok(())
}

/// Identity data stored next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMeta {
    pub name: String,
    pub embedding: Tensor,
    pub head: Arc<HeadModelAssets>,
    pub bindings: Arc<[(usize, Vec3)]>,
    pub mouth: Arc<[usize]>,
}

// Per-frame graph ----------------------------------------------------------

/// Activated Gaussian attributes of one identity on a graph.
struct CloudVars {
    mu: Var,
    quat: Var,
    scale: Var,
    opacity: Var,
    sh: Var,
}

fn cloud_vars(g: &mut Graph, model: &Model, id: &IdentityModel) -> CloudVars {
    let p = id.gaussians;
    let mu = model.store.var(g, p.mu);
    let quat = model.store.var(g, p.quat);
    let ls = model.store.var(g, p.log_scale);
    let scale = g.exp(ls);
    let ol = model.store.var(g, p.opacity);
    let opacity = g.sigmoid(ol);
    let sh = model.store.var(g, p.sh);
    CloudVars {
        mu,
        quat,
        scale,
        opacity,
        sh,
    }
}

/// Vertices (`N x 3`) from one face-offset row (`1 x (K + 3)`), posed.
fn posed_vertices(g: &mut Graph, id: &IdentityModel, face_row: Var, pose: &Pose) -> Result<Var, TrainError> {
    let k = id.head.num_expr();
    let psi = g.slice_cols(face_row, 0, k);
    let psi = g.reshape(psi, &[k]);
    let jaw = g.slice_cols(face_row, k, 3);
    let jaw = g.reshape(jaw, &[3]);
    let verts = deform_mesh_op(g, &id.head, psi, jaw)?;
    Ok(rigid_transform_op(g, verts, &pose.rot, pose.trans))
}

/// Render one frame: `HW x 5` rows of `[r, g, b, alpha, depth]`.
fn render_frame(
    g: &mut Graph,
    id: &IdentityModel,
    cloud: &CloudVars,
    face_row: Var,
    mouth_row: Option<Var>,
    pose: &Pose,
    camera: &Arc<Camera>,
) -> Result<Var, TrainError> {
    let verts = posed_vertices(g, id, face_row, pose)?;
    let mut geom = rig_op(
        g,
        id.head.faces(),
        &id.bindings,
        verts,
        cloud.mu,
        cloud.quat,
        cloud.scale,
    )?;
    if let Some(row) = mouth_row {
        let m = id.mouth.len();
        let residual = g.reshape(row, &[m, rig::RESIDUAL_COLS]);
        geom = mouth_residual_op(g, geom, residual, &id.mouth)?;
    }
    Ok(render_op(g, camera, geom, cloud.opacity, cloud.sh)?)
}

// Trainability -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    /// Appearance warm-up: Gaussian attributes only.
    Stage1,
    /// Joint training of everything.
    Stage2,
    /// Modulation MLP of `identity`, plus its Gaussians when `appearance`.
    Adapt { identity: usize, appearance: bool },
}

/// One flag per parameter of `model`, in store order.
pub fn set_trainable(model: &Model, phase: TrainPhase) -> Vec<bool> {
    model
        .store
        .entries()
        .iter()
        .map(|e| match phase {
            TrainPhase::Stage1 => matches!(e.group, ParamGroup::Gaussians(_)),
            TrainPhase::Stage2 => true,
            TrainPhase::Adapt { identity, appearance } => {
                e.group == ParamGroup::AdaIn(identity) || (appearance && e.group == ParamGroup::Gaussians(identity))
            }
        })
        .collect()
}

// Training -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub pretrain_iters: usize,
    /// Leading pretraining iterations that fit appearance only.
    pub stage1_iters: usize,
    pub adapt_iters: usize,
    /// Leading adaptation iterations that fit appearance only (used when
    /// `adapt_appearance` is on).
    pub adapt_warmup_iters: usize,
    pub lr_pretrain: f64,
    pub lr_adapt: f64,
    /// Learning rate of the new identity's Gaussians during adaptation.
    pub lr_appearance: f64,
    pub weight_decay: f64,
    /// Frames rendered per iteration.
    pub frames_per_iter: usize,
    pub adapt_appearance: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_iters: 2500,
            stage1_iters: 500,
            adapt_iters: 1500,
            adapt_warmup_iters: 300,
            lr_pretrain: 5e-3,
            lr_adapt: 5e-4,
            lr_appearance: 5e-3,
            weight_decay: 1e-2,
            frames_per_iter: 2,
            adapt_appearance: false,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    /// Adapting identity `identity` of the model.
    Adapt {
        identity: usize,
    },
}

/// Model plus optimiser state and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed iterations of the current stage.
    pub iteration: usize,
    pub stage: Stage,
    pub config: TrainConfig,
}

/// What one iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub identity: usize,
    pub frames: Vec<usize>,
    pub phase: TrainPhase,
    pub losses: LossValues,
    pub total: f64,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

fn optimizer(config: &TrainConfig) -> AdamW {
    AdamW::new(AdamWConfig {
        lr: config.lr_pretrain,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    })
}

/// Fresh pretraining checkpoint.
pub fn init_pretrain(subjects: &[Subject], model: ModelConfig, config: TrainConfig) -> Result<Checkpoint, TrainError> {
    if subjects.len() < 2 {
        return Err(TrainError::TooFewIdentities(subjects.len()));
    }
    config.weights.validate()?;
    let refs: Vec<&Subject> = subjects.iter().collect();
    let model = Model::new(model, &refs, config.seed)?;
    for s in subjects {
        if s.clip.image_frames().is_empty() {
            return Err(s.data_error("clip has no images"));
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: optimizer(&config),
        iteration: 0,
        stage: Stage::Pretrain,
        config,
    })
}

/// Full pretraining run.
pub fn pretrain(
    subjects: &[Subject],
    model: ModelConfig,
    config: TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint, TrainError> {
    let mut ck = init_pretrain(subjects, model, config)?;
    run(&mut ck, subjects, config.pretrain_iters, log)?;
    Ok(ck)
}

/// Add `subject` to a pretrained model and prepare to adapt to it.
pub fn init_adapt(pretrained: &Checkpoint, subject: &Subject, config: TrainConfig) -> Result<Checkpoint, TrainError> {
    if pretrained.stage != Stage::Pretrain {
        return Err(TrainError::Stage {
            expected: Stage::Pretrain,
            found: pretrained.stage,
        });
    }
    config.weights.validate()?;
    if subject.clip.image_frames().is_empty() {
        return Err(subject.data_error("clip has no images"));
    }
    if config.weights.depth > 0.0 || config.weights.normal > 0.0 {
        if let Some(t) = subject
            .clip
            .image_frames()
            .into_iter()
            .find(|&t| subject.clip.frames[t].geometry.is_none())
        {
            return Err(TrainError::MissingGeometry {
                identity: subject.name.clone(),
                frame: t,
            });
        }
    }
    let mut model = pretrained.model.clone();
    let sources: Vec<usize> = (0..model.identities.len()).collect();
    let mut rng = iteration_rng(config.seed, 0);
    let adain = model
        .grmn
        .add_identity_from_mean(&mut model.store, &sources, &mut rng)?;
    let identity = model.push_identity(subject)?;
    debug_assert_eq!(adain, identity);
    Ok(Checkpoint {
        model,
        optimizer: optimizer(&config),
        iteration: 0,
        stage: Stage::Adapt { identity },
        config,
    })
}

/// Full adaptation run.
pub fn adapt(
    pretrained: &Checkpoint,
    subject: &Subject,
    config: TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint, TrainError> {
    let mut ck = init_adapt(pretrained, subject, config)?;
    run(&mut ck, core::slice::from_ref(subject), config.adapt_iters, log)?;
    Ok(ck)
}

/// Advance `ck` until `until` iterations of its stage are done. For
/// pretraining `subjects` are the model's identities in order; for
/// adaptation it is the single new subject.
pub fn run(
    ck: &mut Checkpoint,
    subjects: &[Subject],
    until: usize,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(), TrainError> {
    let expected = match ck.stage {
        Stage::Pretrain => ck.model.identities.len(),
        Stage::Adapt { .. } => 1,
    };
    if subjects.len() != expected {
        return Err(TrainError::TooFewIdentities(subjects.len()));
    }
    while ck.iteration < until {
        let entry = step(ck, subjects)?;
        log(&entry);
        ck.iteration += 1;
    }
    Ok(())
}

fn step(ck: &mut Checkpoint, subjects: &[Subject]) -> Result<StepLog, TrainError> {
    let cfg = ck.config;
    let i = ck.iteration;
    let mut rng = iteration_rng(cfg.seed, i);
    let (identity, subject, phase) = match ck.stage {
        Stage::Pretrain => {
            let identity = rng.random_range(0..subjects.len());
            let phase = if i < cfg.stage1_iters {
                TrainPhase::Stage1
            } else {
                TrainPhase::Stage2
            };
            (identity, &subjects[identity], phase)
        }
        Stage::Adapt { identity } => (
            identity,
            &subjects[0],
            TrainPhase::Adapt {
                identity,
                appearance: cfg.adapt_appearance,
            },
        ),
    };
    let warmup = match phase {
        TrainPhase::Stage1 => true,
        TrainPhase::Adapt { appearance: true, .. } => i < cfg.adapt_warmup_iters,
        _ => false,
    };
    let rest = subject.clip.rest_frames();
    let mut g = Graph::new();
    let (frames, terms) = if warmup && !rest.is_empty() {
        let t = rest[rng.random_range(0..rest.len())];
        (
            vec![t],
            appearance_terms(&mut g, &ck.model, identity, subject, t, &cfg)?,
        )
    } else {
        let pool = subject.clip.image_frames();
        let n = cfg.frames_per_iter.clamp(1, pool.len());
        let mut frames: Vec<usize> = index::sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        frames.sort_unstable();
        let loss_phase = if matches!(ck.stage, Stage::Adapt { .. }) {
            Phase::Adapt
        } else {
            Phase::Pretrain
        };
        let terms = full_terms(&mut g, &ck.model, identity, subject, &frames, &cfg, loss_phase)?;
        (frames, terms)
    };
    let loss_phase = if matches!(ck.stage, Stage::Adapt { .. }) {
        Phase::Adapt
    } else {
        Phase::Pretrain
    };
    let values = terms.values(&g);
    let non_finite = |_| TrainError::NonFinite {
        iteration: i,
        identity,
        frames: frames.clone(),
    };
    let total = total_loss_op(&mut g, &terms, &cfg.weights, loss_phase).map_err(non_finite)?;
    let total_value = g.value(total).item();
    let grads = g.backward(total)?;

    // In the adaptation warm-up only appearance moves.
    let mask = match phase {
        TrainPhase::Adapt { identity, .. } if warmup => set_trainable(&ck.model, TrainPhase::Stage1)
            .into_iter()
            .zip(ck.model.store.entries())
            .map(|(m, e)| m && e.group == ParamGroup::Gaussians(identity))
            .collect(),
        _ => set_trainable(&ck.model, phase),
    };
    for (k, &trainable) in mask.iter().enumerate() {
        let id = ParamId(k);
        if !trainable {
            continue;
        }
        let Some(grad) = grads.get(id) else { continue };
        let entry = ck.model.store.entry(id);
        let lr = match (ck.stage, entry.group) {
            (Stage::Pretrain, _) => cfg.lr_pretrain,
            (Stage::Adapt { .. }, ParamGroup::Gaussians(_)) => cfg.lr_appearance,
            (Stage::Adapt { .. }, _) => cfg.lr_adapt,
        };
        let wd = if entry.decay { cfg.weight_decay } else { 0.0 };
        ck.optimizer.step_param(id, ck.model.store.get_mut(id), grad, lr, wd)?;
    }
    Ok(StepLog {
        iteration: i,
        identity,
        frames,
        phase,
        losses: values,
        total: total_value,
    })
}

/// Render loss of one rest frame with the motion network bypassed.
fn appearance_terms(
    g: &mut Graph,
    model: &Model,
    identity: usize,
    subject: &Subject,
    t: usize,
    cfg: &TrainConfig,
) -> Result<LossTerms, TrainError> {
    let id = model.identity(identity)?;
    let cloud = cloud_vars(g, model, id);
    let zero = g.constant(Tensor::zeros(&[1, id.head.num_expr() + 3]));
    let frame = &subject.clip.frames[t];
    let out = render_frame(g, id, &cloud, zero, None, &frame.pose, &subject.camera)?;
    let rgb = g.slice_cols(out, 0, 3);
    let gt = g.constant(frame.image.clone().expect("rest frames have images"));
    let cam = &subject.camera;
    let render = loss_render(g, rgb, gt, cam.width, cam.height, cfg.weights.dssim)?;
    Ok(LossTerms {
        render,
        kl: None,
        score: None,
        geo: None,
    })
}

/// All loss terms of one iteration over the full clip.
fn full_terms(
    g: &mut Graph,
    model: &Model,
    identity: usize,
    subject: &Subject,
    frames: &[usize],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<LossTerms, TrainError> {
    let id = model.identity(identity)?;
    let clip = &subject.clip;
    let audio = g.constant(clip.audio.clone());
    let au = g.constant(clip.au.clone());
    let s = g.constant(id.embedding.clone());
    let motion = model.grmn.forward(g, &model.store, audio, au, s, identity, frames)?;
    let cloud = cloud_vars(g, model, id);
    let cam = &subject.camera;
    let with_geo = phase == Phase::Adapt && (cfg.weights.depth > 0.0 || cfg.weights.normal > 0.0);
    let mut renders = Vec::with_capacity(frames.len());
    let mut geos = Vec::new();
    for (r, &t) in frames.iter().enumerate() {
        let frame = &clip.frames[t];
        let face = g.slice_rows(motion.face, t, 1);
        let mouth = motion.mouth.map(|m| g.slice_rows(m, r, 1));
        let out = render_frame(g, id, &cloud, face, mouth, &frame.pose, cam)?;
        let rgb = g.slice_cols(out, 0, 3);
        let gt = g.constant(frame.image.clone().expect("sampled frames have images"));
        renders.push(loss_render(g, rgb, gt, cam.width, cam.height, cfg.weights.dssim)?);
        if with_geo {
            let target = frame.geometry.as_ref().ok_or_else(|| TrainError::MissingGeometry {
                identity: subject.name.clone(),
                frame: t,
            })?;
            let depth = g.slice_cols(out, OUT_DEPTH, 1);
            let normals = depth_normals_op(g, cam, depth);
            geos.push(loss_geo(
                g,
                depth,
                normals,
                target,
                cfg.weights.depth,
                cfg.weights.normal,
            )?);
        }
    }
    let render = mean_of(g, &renders);
    let geo = (!geos.is_empty()).then(|| mean_of(g, &geos));
    Ok(LossTerms {
        render,
        kl: loss_kl(g, motion.z_e, &clip.teacher)?,
        score: loss_score(g, motion.gate, &clip.teacher)?,
        geo,
    })
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Var {
    let s = g.add_n(xs);
    g.scale(s, 1.0 / xs.len() as f64)
}

// Inference ----------------------------------------------------------------

/// Driving signals for [`infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct DriveInputs {
    /// `T x D_a`; defines the output length.
    pub audio: Tensor,
    /// `T' x D_e`; looped when shorter than the audio.
    pub au: Tensor,
    /// Looped when shorter than the audio.
    pub poses: Vec<Pose>,
    pub camera: Arc<Camera>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLog {
    pub gate: f64,
    pub emotion: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub frames: Vec<RenderOutput>,
    pub log: Vec<FrameLog>,
    pub motion: MotionOutput,
    /// Whether action units or poses had to be looped.
    pub looped: bool,
    /// Posed vertices of every frame.
    pub vertices: Vec<Vec<Vec3>>,
}

fn loop_rows(t: &Tensor, len: usize) -> Tensor {
    let c = t.cols();
    let data = (0..len).flat_map(|r| t.row(r % t.rows()).iter().copied()).collect();
    Tensor::from_parts(vec![len, c], data)
}

/// Drive identity `identity` with new audio, action units and poses.
pub fn infer(model: &Model, identity: usize, drive: &DriveInputs) -> Result<InferOutput, TrainError> {
    let id = model.identity(identity)?;
    let t = drive.audio.rows();
    if t == 0 || drive.au.rows() == 0 || drive.poses.is_empty() {
        return Err(TrainError::EmptySequence(t));
    }
    let looped = drive.au.rows() < t || drive.poses.len() < t;
    let au = if drive.au.rows() == t {
        drive.au.clone()
    } else {
        loop_rows(&drive.au, t)
    };
    let rows: Vec<usize> = (0..t).collect();
    let has_mouth = !id.mouth.is_empty() && model.config.grmn.num_mouth > 0;
    let mut g = Graph::new();
    let audio = g.constant(drive.audio.clone());
    let auv = g.constant(au);
    let s = g.constant(id.embedding.clone());
    let mouth_rows: &[usize] = if has_mouth { &rows } else { &[] };
    let motion = model
        .grmn
        .forward(&mut g, &model.store, audio, auv, s, identity, mouth_rows)?;
    let log_out = MotionOutput::from_graph(&g, &motion, &model.config.grmn);
    let cloud = cloud_vars(&mut g, model, id);
    let mut frames = Vec::with_capacity(t);
    let mut vertices = Vec::with_capacity(t);
    for f in 0..t {
        let pose = drive.poses[f % drive.poses.len()];
        let face = g.slice_rows(motion.face, f, 1);
        let mouth = motion.mouth.map(|m| g.slice_rows(m, f, 1));
        let verts = posed_vertices(&mut g, id, face, &pose)?;
        vertices.push(g.value(verts).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
        let out = render_frame(&mut g, id, &cloud, face, mouth, &pose, &drive.camera)?;
        frames.push(planes_to_output(g.value(out), &drive.camera));
    }
    let log = (0..t)
        .map(|f| FrameLog {
            gate: log_out.gate[f],
            emotion: log_out.emotion_argmax(f),
        })
        .collect();
    Ok(InferOutput {
        frames,
        log,
        motion: log_out,
        looped,
        vertices,
    })
}

/// Render one identity at explicit expression coefficients, jaw rotation
/// and pose, bypassing the motion network (no mouth residual).
pub fn render_params(
    model: &Model,
    identity: usize,
    psi: &[f64],
    jaw: Vec3,
    pose: &Pose,
    camera: &Arc<Camera>,
) -> Result<RenderOutput, TrainError> {
    let id = model.identity(identity)?;
    let k = id.head.num_expr();
    if psi.len() != k {
        return Err(HeadModelError::ExpressionDim {
            expected: k,
            got: psi.len(),
        }
        .into());
    }
    let row: Vec<f64> = psi.iter().copied().chain(jaw).collect();
    let row = Tensor::new(vec![1, k + 3], row).map_err(|_| HeadModelError::NonFinite("render parameters"))?;
    let mut g = Graph::new();
    let cloud = cloud_vars(&mut g, model, id);
    let face = g.constant(row);
    let out = render_frame(&mut g, id, &cloud, face, None, pose, camera)?;
    Ok(planes_to_output(g.value(out), camera))
}

fn planes_to_output(planes: &Tensor, cam: &Camera) -> RenderOutput {
    let n = cam.num_pixels();
    let mut color = Vec::with_capacity(3 * n);
    let mut alpha = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    for px in planes.data().chunks(render::RENDER_COLS) {
        color.extend_from_slice(&px[..3]);
        alpha.push(px[render::OUT_ALPHA]);
        depth.push(px[OUT_DEPTH]);
    }
    RenderOutput {
        width: cam.width,
        height: cam.height,
        color,
        alpha,
        depth,
        count: vec![0; n],
    }
}

// Evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub lmd: Option<f64>,
}

/// Re-render a subject's own clip and compare with its images.
pub fn evaluate_clip(model: &Model, identity: usize, subject: &Subject) -> Result<Vec<FrameMetrics>, TrainError> {
    let clip = &subject.clip;
    let drive = DriveInputs {
        audio: clip.audio.clone(),
        au: clip.au.clone(),
        poses: clip.frames.iter().map(|f| f.pose).collect(),
        camera: subject.camera.clone(),
    };
    let out = infer(model, identity, &drive)?;
    let cam = &subject.camera;
    let mut metrics = Vec::new();
    for (t, frame) in clip.frames.iter().enumerate() {
        let Some(img) = &frame.image else { continue };
        let pred = &out.frames[t].color;
        let lmd = match &frame.landmarks {
            Some(gt) => {
                let p: Vec<[f64; 2]> = subject
                    .landmark_vertices
                    .iter()
                    .map(|&v| cam.project(out.vertices[t][v]))
                    .collect();
                Some(loss::lmd(&p, gt)?)
            }
            None => None,
        };
        metrics.push(FrameMetrics {
            frame: t,
            psnr: loss::psnr(pred, img.data())?,
            ssim: loss::ssim(pred, img.data(), cam.width, cam.height)?,
            lmd,
        });
    }
    Ok(metrics)
}

/// Gate and emotion-latent agreement with a teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateReport {
    /// Mean `|g - e|` over supervised frames.
    pub mae: f64,
    /// Fraction of frames with `e > 0.5` whose latent argmax matches the
    /// teacher's.
    pub argmax_agreement: f64,
    pub frames: usize,
    pub emotional_frames: usize,
}

pub fn gate_report(
    model: &Model,
    identity: usize,
    audio: &Tensor,
    au: &Tensor,
    teacher: &TeacherSignals,
) -> Result<GateReport, TrainError> {
    let out = model.motion(identity, audio, au, &[])?;
    if teacher.len() != out.frames {
        return Err(LossError::Shape { what: "teacher length" }.into());
    }
    let (mut err, mut n, mut hits, mut emo) = (0.0, 0usize, 0usize, 0usize);
    for t in 0..out.frames {
        if !teacher.present(t) {
            continue;
        }
        n += 1;
        err += (out.gate[t] - teacher.score(t)).abs();
        if teacher.score(t) > 0.5 {
            emo += 1;
            let z = out.z_row(t);
            debug_assert_eq!(z.len(), NUM_EMOTIONS);
            if argmax(z) == argmax(teacher.p_emo(t)) {
                hits += 1;
            }
        }
    }
    Ok(GateReport {
        mae: if n > 0 { err / n as f64 } else { 0.0 },
        argmax_agreement: if emo > 0 { hits as f64 / emo as f64 } else { 1.0 },
        frames: n,
        emotional_frames: emo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthIdentity, SynthSpec};

    fn spec() -> SynthSpec {
        SynthSpec {
            identities: 3,
            frames: 10,
            heldout_frames: 6,
            rest_frames: 3,
            episode_len: 3,
            width: 16,
            height: 16,
            gaussians: 900,
            mouth_gaussians: 100,
            mouth_radius: 0.02,
            d_audio: 8,
            d_au: 5,
            d_identity: 8,
            ..SynthSpec::default()
        }
    }

    fn model_config() -> ModelConfig {
        let s = spec();
        ModelConfig {
            grmn: GrmnConfig {
                d_audio: s.d_audio,
                d_au: s.d_au,
                d_identity: s.d_identity,
                d_hidden: 12,
                layers: 1,
                heads: 2,
                adain_hidden: 8,
                num_expr: crate::synth::SYNTH_EXPR,
                num_mouth: s.mouth_gaussians,
                head_gain: 1e-2,
            },
            gaussians: s.gaussians,
            sh_degree: 0,
            mouth_radius: s.mouth_radius,
            binding_seed: s.binding_seed,
        }
    }

    fn corpus() -> Vec<SynthIdentity> {
        generate(&spec(), 3).unwrap()
    }

    fn subjects(ids: &[SynthIdentity], n: usize) -> Vec<Subject> {
        ids[..n].iter().map(|s| s.subject.clone()).collect()
    }

    fn train_config() -> TrainConfig {
        TrainConfig {
            pretrain_iters: 6,
            stage1_iters: 3,
            adapt_iters: 4,
            adapt_warmup_iters: 2,
            ..TrainConfig::default()
        }
    }

    fn quiet(_: &StepLog) {}

    #[test]
    fn masks_partition_the_store() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let ck = init_pretrain(&subs, model_config(), train_config()).unwrap();
        let m = &ck.model;
        let entries = m.store.entries();
        let s1 = set_trainable(m, TrainPhase::Stage1);
        let s2 = set_trainable(m, TrainPhase::Stage2);
        assert_eq!(s1.len(), entries.len());
        assert!(s2.iter().all(|&b| b));
        for (e, &t) in entries.iter().zip(&s1) {
            assert_eq!(t, matches!(e.group, ParamGroup::Gaussians(_)), "{}", e.name);
        }
        // Every parameter belongs to exactly one of the disjoint groups.
        let mut covered = vec![0usize; entries.len()];
        for i in 0..2 {
            for (k, &t) in set_trainable(
                m,
                TrainPhase::Adapt {
                    identity: i,
                    appearance: true,
                },
            )
            .iter()
            .enumerate()
            {
                covered[k] += usize::from(t);
            }
        }
        for (k, e) in entries.iter().enumerate() {
            let expected = usize::from(e.group != ParamGroup::Network);
            assert_eq!(covered[k], expected, "{}", e.name);
        }
        let adapt = set_trainable(
            m,
            TrainPhase::Adapt {
                identity: 1,
                appearance: false,
            },
        );
        let count: usize = adapt
            .iter()
            .zip(entries)
            .filter(|(&t, _)| t)
            .map(|(_, e)| e.value.len())
            .sum();
        let a = m.grmn.adain_params(1).unwrap();
        let adain: usize = a
            .audio
            .params()
            .into_iter()
            .chain(a.au.params())
            .map(|id| m.store.get(id).len())
            .sum();
        assert_eq!(count, adain);
        assert!(count > 0);
    }

    #[test]
    fn needs_two_identities() {
        let ids = corpus();
        let subs = subjects(&ids, 1);
        assert!(matches!(
            init_pretrain(&subs, model_config(), train_config()),
            Err(TrainError::TooFewIdentities(1))
        ));
    }

    #[test]
    fn stage_one_leaves_network_untouched() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let mut ck = init_pretrain(&subs, model_config(), train_config()).unwrap();
        let before = ck.model.store.clone();
        let mut phases = Vec::new();
        run(&mut ck, &subs, 3, &mut |l| phases.push(l.phase)).unwrap();
        assert!(phases.iter().all(|&p| p == TrainPhase::Stage1));
        let mut moved = 0;
        for (a, b) in before.entries().iter().zip(ck.model.store.entries()) {
            if matches!(a.group, ParamGroup::Gaussians(_)) {
                moved += usize::from(a.value != b.value);
            } else {
                assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let cfg = train_config();
        let mut straight = init_pretrain(&subs, model_config(), cfg).unwrap();
        run(&mut straight, &subs, 6, &mut quiet).unwrap();
        let mut first = init_pretrain(&subs, model_config(), cfg).unwrap();
        run(&mut first, &subs, 4, &mut quiet).unwrap();
        let mut resumed = first.clone();
        run(&mut resumed, &subs, 6, &mut quiet).unwrap();
        assert_eq!(straight, resumed);
        let again = pretrain(&subs, model_config(), cfg, &mut quiet).unwrap();
        assert_eq!(straight, again);
    }

    #[test]
    fn adaptation_freezes_everything_else() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let cfg = train_config();
        let pre = pretrain(&subs, model_config(), cfg, &mut quiet).unwrap();
        let new = &ids[2].subject;
        for appearance in [false, true] {
            let cfg = TrainConfig {
                adapt_appearance: appearance,
                ..cfg
            };
            let start = init_adapt(&pre, new, cfg).unwrap();
            assert_eq!(start.stage, Stage::Adapt { identity: 2 });
            let mut ck = start.clone();
            run(&mut ck, core::slice::from_ref(new), cfg.adapt_iters, &mut quiet).unwrap();
            let mut adain_moved = false;
            for (a, b) in start.model.store.entries().iter().zip(ck.model.store.entries()) {
                match a.group {
                    ParamGroup::AdaIn(2) => adain_moved |= a.value != b.value,
                    ParamGroup::Gaussians(2) if appearance => {}
                    _ => assert_eq!(a.value.data(), b.value.data(), "{}", a.name),
                }
            }
            assert!(adain_moved);
            // The pretrained part of the store is exactly the pretrained model.
            for (a, b) in pre.model.store.entries().iter().zip(ck.model.store.entries()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
            }
        }
    }

    #[test]
    fn adaptation_geometry_requirements() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let pre = init_pretrain(&subs, model_config(), train_config()).unwrap();
        let mut bare = ids[2].subject.clone();
        for f in &mut bare.clip.frames {
            f.geometry = None;
        }
        assert!(matches!(
            init_adapt(&pre, &bare, train_config()),
            Err(TrainError::MissingGeometry { .. })
        ));
        let mut cfg = train_config();
        cfg.weights.depth = 0.0;
        cfg.weights.normal = 0.0;
        let ck = adapt(&pre, &bare, cfg, &mut quiet).unwrap();
        assert_eq!(ck.iteration, cfg.adapt_iters);
    }

    #[test]
    fn adaptation_needs_a_pretrained_checkpoint() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let pre = init_pretrain(&subs, model_config(), train_config()).unwrap();
        let ad = init_adapt(&pre, &ids[2].subject, train_config()).unwrap();
        assert!(matches!(
            init_adapt(&ad, &ids[2].subject, train_config()),
            Err(TrainError::Stage { .. })
        ));
    }

    fn zero_heads(model: &mut Model) {
        let ids: Vec<ParamId> = model
            .store
            .ids()
            .filter(|&id| {
                let n = &model.store.entry(id).name;
                ["base.face", "base.mouth", "emo.dec.face", "emo.dec.mouth"]
                    .iter()
                    .any(|p| n.starts_with(p))
            })
            .collect();
        assert!(!ids.is_empty());
        for id in ids {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn drive(subject: &Subject, frames: usize, zero: bool) -> DriveInputs {
        let c = &subject.clip;
        let rows = |t: &Tensor| {
            let cols = t.cols();
            let data = (0..frames)
                .flat_map(|r| t.row(r % t.rows()).iter().map(|&v| if zero { 0.0 } else { v }))
                .collect();
            Tensor::new(vec![frames, cols], data).unwrap()
        };
        DriveInputs {
            audio: rows(&c.audio),
            au: rows(&c.au),
            poses: c.frames.iter().map(|f| f.pose).collect(),
            camera: subject.camera.clone(),
        }
    }

    #[test]
    fn zero_heads_render_the_rest_pose() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let mut model = init_pretrain(&subs, model_config(), train_config()).unwrap().model;
        zero_heads(&mut model);
        let d = drive(&subs[0], 4, true);
        let out = infer(&model, 0, &d).unwrap();
        let id = &model.identities[0];
        let p = id.gaussians;
        let get = |pid| model.store.get(pid);
        let (mu, quat, ls, op, sh) = (get(p.mu), get(p.quat), get(p.log_scale), get(p.opacity), get(p.sh));
        let gs: Vec<rig::LocalGaussian> = id
            .bindings
            .iter()
            .enumerate()
            .map(|(i, &(tri, bary))| rig::LocalGaussian {
                mu_l: [mu.at2(i, 0), mu.at2(i, 1), mu.at2(i, 2)],
                rot_l: crate::geometry::quat_normalize([
                    quat.at2(i, 0),
                    quat.at2(i, 1),
                    quat.at2(i, 2),
                    quat.at2(i, 3),
                ]),
                scale_l: [0, 1, 2].map(|a| math::exp(ls.at2(i, a))),
                alpha_l: math::sigmoid(op.at2(i, 0)),
                sh_l: sh.row(i).to_vec(),
                parent_tri: tri,
                bary,
            })
            .collect();
        let cloud = rig::GaussianCloud::new(gs, vec![false; id.bindings.len()], id.head.num_faces()).unwrap();
        for (f, frame) in out.frames.iter().enumerate() {
            let pose = d.poses[f];
            let mesh = id.head.rest_mesh().transformed(&pose.rot, pose.trans);
            let globals = rig::rig_to_global(&cloud, &mesh).unwrap();
            let reference = render::render(&globals, &d.camera).unwrap();
            let err = frame
                .color
                .iter()
                .zip(&reference.color)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "frame {f}: {err}");
            for (v, r) in out.vertices[f].iter().zip(&mesh.vertices) {
                for a in 0..3 {
                    assert!((v[a] - r[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inference_is_deterministic_and_gates_stay_open() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let model = init_pretrain(&subs, model_config(), train_config()).unwrap().model;
        let mut d = drive(&subs[1], 100, false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        d.audio
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 3.0 * math::randn(&mut rng));
        d.au.data_mut()
            .iter_mut()
            .for_each(|v| *v = 3.0 * math::randn(&mut rng));
        let a = infer(&model, 1, &d).unwrap();
        let b = infer(&model, 1, &d).unwrap();
        assert_eq!(a, b);
        assert!(a.looped);
        assert_eq!(a.frames.len(), 100);
        assert!(a
            .log
            .iter()
            .all(|l| l.gate > 0.0 && l.gate < 1.0 && l.emotion < NUM_EMOTIONS));
    }

    #[test]
    fn inference_rejects_bad_inputs() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let model = init_pretrain(&subs, model_config(), train_config()).unwrap().model;
        let mut d = drive(&subs[0], 3, false);
        assert!(matches!(infer(&model, 5, &d), Err(TrainError::UnknownIdentity(5))));
        d.audio = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            infer(&model, 0, &d),
            Err(TrainError::Grmn(GrmnError::FeatureDim { .. }))
        ));
        d.poses.clear();
        assert!(infer(&model, 0, &d).is_err());
    }

    #[test]
    fn model_survives_rebuilding_from_parts() {
        let ids = corpus();
        let subs = subjects(&ids, 2);
        let model = pretrain(&subs, model_config(), train_config(), &mut quiet)
            .unwrap()
            .model;
        let rebuilt = Model::from_parts(model.config, model.store.clone(), model.identity_meta()).unwrap();
        assert_eq!(model, rebuilt);
        let mut broken = model.store.clone();
        let id = broken.find("gauss1.sh").unwrap();
        *broken.get_mut(id) = Tensor::zeros(&[2, 3]);
        assert!(Model::from_parts(model.config, broken, model.identity_meta()).is_err());
    }
}
