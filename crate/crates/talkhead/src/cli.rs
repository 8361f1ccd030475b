//! Command-line surface. Exit codes: 0 success, 1 usage or validation
//! error, 2 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use talkhead_core::geometry;
use talkhead_core::gradsuite;
use talkhead_core::loss;
use talkhead_core::nn::ParamGroup;
use talkhead_core::optim::OptimError;
use talkhead_core::render::Camera;
use talkhead_core::synth::{self, SynthError};
use talkhead_core::tensor::Tensor;
use talkhead_core::train::{self, Checkpoint, DriveInputs, FrameMetrics, Pose, Stage, Subject, TrainError};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, Corpus};
use crate::etg::{self, Dtype};
use crate::fsio::{self, IoError};
use crate::image;
use crate::report::{self, RunReport};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TALKHEAD_OUT";

#[derive(Debug, Parser)]
#[command(name = "talkhead", version, about = "Audio-driven Gaussian head avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-identity corpus.
    GenData(GenData),
    /// Pretrain on several identities.
    Pretrain(Pretrain),
    /// Adapt a pretrained checkpoint to a new identity.
    Adapt(Adapt),
    /// Drive an identity with audio, action units and poses.
    Infer(Infer),
    /// Render one identity at explicit expression and pose.
    Render(Render),
    /// Compare two frame directories.
    Eval(Eval),
    /// Run the gradient check suite.
    Gradcheck(Gradcheck),
    /// Describe a checkpoint, asset, tensor or config file.
    Inspect(Inspect),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (key = value lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory [default: $TALKHEAD_OUT/data].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Skip the PNG frame previews.
    #[arg(long)]
    no_previews: bool,
}

#[derive(Debug, Args)]
struct Pretrain {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus directory holding manifest.toml.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated identity names [default: all].
    #[arg(long, value_delimiter = ',')]
    identities: Vec<String>,
    /// Checkpoint to write [default: $TALKHEAD_OUT/pretrain.etgc].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save the checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 500)]
    save_every: usize,
    /// Stop (and save) once this many iterations are done.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Debug, Args)]
struct Adapt {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Name of the new identity in the corpus.
    #[arg(long)]
    identity: String,
    /// Checkpoint to write [default: $TALKHEAD_OUT/adapt.etgc].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    save_every: usize,
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Debug, Args)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Identity name inside the checkpoint.
    #[arg(long)]
    identity: String,
    /// Corpus to take driving signals, camera and landmark vertices from.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which corpus clip drives the identity.
    #[arg(long, default_value = "train", value_parser = ["train", "heldout"])]
    clip: String,
    /// Audio features (T x D_a); overrides the corpus clip.
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Action units (T' x D_e).
    #[arg(long)]
    au: Option<PathBuf>,
    /// Poses (T' x 12).
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Camera (19 values).
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Output directory [default: $TALKHEAD_OUT/infer].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Render {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    identity: String,
    /// Comma-separated expression coefficients [default: zeros].
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    expr: Vec<f64>,
    /// Jaw rotation vector, radians.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    jaw: Vec<f64>,
    /// Head yaw, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    /// Head pitch, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch: f64,
    /// Camera (19 values) [default: the synthetic camera at the configured size].
    #[arg(long)]
    camera: Option<PathBuf>,
    /// PNG to write; a float copy goes next to it as .etgt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    /// Predicted frames: `frame_*.etgt` files or a stacked `images.etgt`.
    #[arg(long)]
    pred: PathBuf,
    /// Reference frames, same layout.
    #[arg(long)]
    truth: PathBuf,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Inspect {
    file: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

fn invalid(m: impl Into<String>) -> CliError {
    CliError::Invalid(m.into())
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        invalid(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        invalid(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        invalid(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Optim(OptimError::NonFiniteGradient(_)) => {
                CliError::Numeric(e.to_string())
            }
            _ => invalid(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        invalid(e.to_string())
    }
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Pretrain(a) => pretrain(a, out, err),
        Command::Adapt(a) => adapt(a, out, err),
        Command::Infer(a) => infer(a, out, err),
        Command::Render(a) => render(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn default_out(name: &str) -> PathBuf {
    let base = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from);
    base.join(name)
}

fn load_config(a: &ConfigArg) -> Result<RunConfig, CliError> {
    Ok(match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

// gen-data -----------------------------------------------------------------

fn gen_data(a: GenData, out: &mut dyn Write) -> Result<(), CliError> {
    let run = load_config(&a.config)?;
    let dir = a.out.unwrap_or_else(|| default_out("data"));
    let t0 = Instant::now();
    let ids = synth::generate(&run.corpus(), a.seed)?;
    let m = corpus::write(&dir, &ids, a.seed, run.frame_rate, !a.no_previews)?;
    say(
        out,
        format!(
            "wrote {} identities x {} frames ({}x{}) to {} in {:.1} s",
            m.identities.len(),
            run.frames,
            run.width,
            run.height,
            dir.display(),
            t0.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

// Training -----------------------------------------------------------------

fn select(corpus: &Corpus, names: &[String]) -> Result<Vec<Subject>, CliError> {
    if names.is_empty() {
        return Ok(corpus.identities.iter().map(|i| i.subject.clone()).collect());
    }
    names
        .iter()
        .map(|n| {
            corpus
                .find(n)
                .map(|i| corpus.identities[i].subject.clone())
                .ok_or_else(|| invalid(format!("identity '{n}' is not in {}", corpus.root.display())))
        })
        .collect()
}

/// Run `ck` to `target` iterations, saving along the way.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    ck: &mut Checkpoint,
    subjects: &[Subject],
    run: &RunConfig,
    target: usize,
    save_every: usize,
    path: &Path,
    rep: &mut RunReport,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let t0 = Instant::now();
    while ck.iteration < target {
        let next = match ck.iteration.checked_div(save_every) {
            Some(q) => ((q + 1) * save_every).min(target),
            None => target,
        };
        train::run(ck, subjects, next, &mut |l| {
            if let Some(row) = rep.record(l, t0.elapsed().as_secs_f64()) {
                let _ = writeln!(err, "{row}");
            }
        })?;
        checkpoint::save(path, ck, run)?;
    }
    if let Some(row) = rep.flush(t0.elapsed().as_secs_f64()) {
        let _ = writeln!(err, "{row}");
    }
    if ck.iteration == 0 || target == 0 {
        checkpoint::save(path, ck, run)?;
    }
    Ok(())
}

fn report_path(ck: &Path) -> PathBuf {
    ck.with_extension("report.txt")
}

fn pretrain(a: Pretrain, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let t0 = Instant::now();
    let run = load_config(&a.config)?;
    let corpus = corpus::load(&a.data)?;
    let subjects = select(&corpus, &a.identities)?;
    let path = a.out.unwrap_or_else(|| default_out("pretrain.etgc"));
    let mut ck = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p, &run)?;
            if ck.stage != Stage::Pretrain {
                return Err(invalid(format!("{} is not a pretraining checkpoint", p.display())));
            }
            let names: Vec<&str> = ck.model.identities.iter().map(|i| i.name.as_str()).collect();
            let want: Vec<&str> = subjects.iter().map(|s| s.name.as_str()).collect();
            if names != want {
                return Err(invalid(format!("checkpoint identities {names:?} differ from {want:?}")));
            }
            ck
        }
        None => train::init_pretrain(&subjects, run.model(), run.train())?,
    };
    let target = a.stop_at.unwrap_or(run.pretrain_iters).min(run.pretrain_iters);
    let mut rep = RunReport::new(100);
    train_loop(&mut ck, &subjects, &run, target, a.save_every, &path, &mut rep, err)?;
    if ck.iteration < run.pretrain_iters {
        say(
            out,
            format!(
                "stopped at iteration {} of {}; saved {}",
                ck.iteration,
                run.pretrain_iters,
                path.display()
            ),
        );
        return Ok(());
    }
    for (i, s) in subjects.iter().enumerate() {
        let m = train::evaluate_clip(&ck.model, i, s)?;
        rep.add_metrics(&s.name, &m);
        let held = &corpus.identities[corpus.find(&s.name).expect("selected from corpus")].heldout;
        let g = train::gate_report(&ck.model, i, &held.audio, &held.au, &held.teacher)?;
        rep.add_gate(&format!("{} (held-out)", s.name), &g);
    }
    let rp = report_path(&path);
    rep.save(&rp, "pretrain", &run, t0.elapsed().as_secs_f64())?;
    say(
        out,
        format!(
            "pretrained {} iterations; saved {} and {}",
            ck.iteration,
            path.display(),
            rp.display()
        ),
    );
    Ok(())
}

fn adapt(a: Adapt, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let t0 = Instant::now();
    let run = load_config(&a.config)?;
    let corpus = corpus::load(&a.data)?;
    let subject = select(&corpus, std::slice::from_ref(&a.identity))?.remove(0);
    let pre = checkpoint::load(&a.checkpoint, &run)?;
    let path = a.out.unwrap_or_else(|| default_out("adapt.etgc"));
    let mut ck = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p, &run)?;
            match ck.stage {
                Stage::Adapt { identity } if ck.model.identities[identity].name == subject.name => ck,
                _ => {
                    return Err(invalid(format!(
                        "{} is not an adaptation to '{}'",
                        p.display(),
                        subject.name
                    )))
                }
            }
        }
        None => train::init_adapt(&pre, &subject, run.train())?,
    };
    let Stage::Adapt { identity } = ck.stage else {
        unreachable!("checked above")
    };
    let target = a.stop_at.unwrap_or(run.adapt_iters).min(run.adapt_iters);
    let mut rep = RunReport::new(100);
    train_loop(
        &mut ck,
        std::slice::from_ref(&subject),
        &run,
        target,
        a.save_every,
        &path,
        &mut rep,
        err,
    )?;
    if ck.iteration < run.adapt_iters {
        say(
            out,
            format!(
                "stopped at iteration {} of {}; saved {}",
                ck.iteration,
                run.adapt_iters,
                path.display()
            ),
        );
        return Ok(());
    }
    let changed = changed_frozen(&pre, &ck, identity);
    rep.add_line(if changed.is_empty() {
        "frozen parameters: all bitwise unchanged".to_string()
    } else {
        format!("frozen parameters CHANGED: {}", changed.join(", "))
    });
    let m = train::evaluate_clip(&ck.model, identity, &subject)?;
    rep.add_metrics(&subject.name, &m);
    let rp = report_path(&path);
    rep.save(&rp, "adapt", &run, t0.elapsed().as_secs_f64())?;
    if !changed.is_empty() {
        return Err(CliError::Numeric(format!(
            "parameters outside the trainable set changed: {}",
            changed.join(", ")
        )));
    }
    say(
        out,
        format!(
            "adapted '{}' for {} iterations; saved {} and {}",
            subject.name,
            ck.iteration,
            path.display(),
            rp.display()
        ),
    );
    Ok(())
}

/// Names of pretrained parameters that adaptation modified.
pub fn changed_frozen(pre: &Checkpoint, post: &Checkpoint, identity: usize) -> Vec<String> {
    pre.model
        .store
        .entries()
        .iter()
        .zip(post.model.store.entries())
        .filter(|(a, b)| {
            let own = a.group == ParamGroup::AdaIn(identity) || a.group == ParamGroup::Gaussians(identity);
            !own && a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|(a, _)| a.name.clone())
        .collect()
}

// Inference ----------------------------------------------------------------

fn find_identity(ck: &Checkpoint, name: &str) -> Result<usize, CliError> {
    ck.model.identities.iter().position(|i| i.name == name).ok_or_else(|| {
        let have: Vec<&str> = ck.model.identities.iter().map(|i| i.name.as_str()).collect();
        invalid(format!("identity '{name}' is not in the checkpoint (has {have:?})"))
    })
}

fn infer(a: Infer, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (ck, run, _) = checkpoint::load_any(&a.checkpoint)?;
    let identity = find_identity(&ck, &a.identity)?;
    let corpus = a.data.as_deref().map(corpus::load).transpose()?;
    let entry = corpus.as_ref().and_then(|c| c.find(&a.identity).map(|i| (c, i)));
    let clip = entry.map(|(c, i)| {
        let id = &c.identities[i];
        (
            if a.clip == "train" {
                &id.subject.clip
            } else {
                &id.heldout
            },
            id,
        )
    });
    let audio = match (&a.audio, clip) {
        (Some(p), _) => fsio::load_shaped(p, &[None, Some(run.d_audio)])?,
        (None, Some((c, _))) => c.audio.clone(),
        (None, None) => return Err(invalid("give --audio or a --data corpus holding the identity")),
    };
    let au = match (&a.au, clip) {
        (Some(p), _) => fsio::load_shaped(p, &[None, Some(run.d_au)])?,
        (None, Some((c, _))) => c.au.clone(),
        (None, None) => Tensor::zeros(&[1, run.d_au]),
    };
    let poses = match (&a.poses, clip) {
        (Some(p), _) => corpus::load_poses(p, None)?,
        (None, Some((c, _))) => c.frames.iter().map(|f| f.pose).collect(),
        (None, None) => vec![Pose::IDENTITY],
    };
    let camera = match (&a.camera, clip) {
        (Some(p), _) => Arc::new(corpus::load_camera(p)?),
        (None, Some((_, id))) => id.subject.camera.clone(),
        (None, None) => Arc::new(synth::synth_camera(run.width, run.height).map_err(|e| invalid(e.to_string()))?),
    };
    let drive = DriveInputs {
        audio,
        au,
        poses,
        camera: camera.clone(),
    };
    let res = train::infer(&ck.model, identity, &drive)?;
    if res.looped {
        say(
            err,
            "note: action units or poses were shorter than the audio and were looped",
        );
    }
    let dir = a.out.unwrap_or_else(|| default_out("infer"));
    let (w, h) = (camera.width, camera.height);
    let mut log = String::from("frame\tgate\temotion\n");
    for (t, f) in res.frames.iter().enumerate() {
        fsio::save_raw(
            &dir.join(format!("frame_{t:04}.etgt")),
            &[h, w, 3],
            &f.color,
            Dtype::F32,
        )?;
        image::save_png(&dir.join(format!("frame_{t:04}.png")), w, h, 3, &f.color)?;
        log.push_str(&format!("{t}\t{:.6}\t{}\n", res.log[t].gate, res.log[t].emotion));
    }
    fsio::write_atomic(&dir.join("motion.tsv"), log.as_bytes())?;
    if let Some((_, id)) = clip {
        let lv = &id.subject.landmark_vertices;
        let lm: Vec<f64> = res
            .vertices
            .iter()
            .flat_map(|v| lv.iter().flat_map(|&i| camera.project(v[i])))
            .collect();
        fsio::save_raw(
            &dir.join("landmarks.etgt"),
            &[res.frames.len(), lv.len(), 2],
            &lm,
            Dtype::F64,
        )?;
    }
    say(
        out,
        format!(
            "rendered {} frames of '{}' to {}",
            res.frames.len(),
            a.identity,
            dir.display()
        ),
    );
    Ok(())
}

fn render(a: Render, out: &mut dyn Write) -> Result<(), CliError> {
    let (ck, run, _) = checkpoint::load_any(&a.checkpoint)?;
    let identity = find_identity(&ck, &a.identity)?;
    let k = ck.model.identities[identity].head.num_expr();
    let psi = if a.expr.is_empty() { vec![0.0; k] } else { a.expr };
    let jaw: [f64; 3] = match a.jaw.len() {
        0 => [0.0; 3],
        3 => [a.jaw[0], a.jaw[1], a.jaw[2]],
        n => return Err(invalid(format!("--jaw needs 3 values, got {n}"))),
    };
    let rad = std::f64::consts::PI / 180.0;
    let rot = geometry::mat_mul(
        &geometry::rodrigues([0.0, a.yaw * rad, 0.0]),
        &geometry::rodrigues([a.pitch * rad, 0.0, 0.0]),
    );
    let pose = Pose { rot, trans: [0.0; 3] };
    let camera: Arc<Camera> = match &a.camera {
        Some(p) => Arc::new(corpus::load_camera(p)?),
        None => Arc::new(synth::synth_camera(run.width, run.height).map_err(|e| invalid(e.to_string()))?),
    };
    let f = train::render_params(&ck.model, identity, &psi, jaw, &pose, &camera)?;
    image::save_png(&a.out, f.width, f.height, 3, &f.color)?;
    fsio::save_raw(
        &a.out.with_extension("etgt"),
        &[f.height, f.width, 3],
        &f.color,
        Dtype::F32,
    )?;
    say(out, format!("rendered '{}' to {}", a.identity, a.out.display()));
    Ok(())
}

// Evaluation ---------------------------------------------------------------

/// Frames of a directory, by name, as `(name, H x W x 3 tensor)`.
fn frames_of(dir: &Path) -> Result<Vec<(String, Tensor)>, CliError> {
    let stacked = dir.join("images.etgt");
    if stacked.exists() {
        let t = fsio::load_shaped(&stacked, &[None, None, None, Some(3)])?;
        let d = t.dims().to_vec();
        let n = d[1] * d[2] * 3;
        return Ok((0..d[0])
            .map(|i| {
                let data = t.data()[i * n..(i + 1) * n].to_vec();
                (
                    format!("frame_{i:04}"),
                    Tensor::new(vec![d[1], d[2], 3], data).expect("finite slice"),
                )
            })
            .collect());
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| invalid(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("frame_") && n.ends_with(".etgt"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(invalid(format!(
            "{}: no frame_*.etgt files or images.etgt",
            dir.display()
        )));
    }
    names
        .into_iter()
        .map(|n| {
            let t = fsio::load_shaped(&dir.join(&n), &[None, None, Some(3)])?;
            Ok((n.trim_end_matches(".etgt").to_string(), t))
        })
        .collect()
}

/// Per-frame metrics between two frame directories.
pub fn compare_dirs(pred: &Path, truth: &Path) -> Result<Vec<FrameMetrics>, CliError> {
    let p = frames_of(pred)?;
    let t = frames_of(truth)?;
    if p.len() != t.len() {
        return Err(invalid(format!("{} frames against {}", p.len(), t.len())));
    }
    let landmarks = |d: &Path| -> Result<Option<Tensor>, CliError> {
        let f = d.join("landmarks.etgt");
        Ok(if f.exists() {
            Some(fsio::load_shaped(&f, &[Some(p.len()), None, Some(2)])?)
        } else {
            None
        })
    };
    let lm = match (landmarks(pred)?, landmarks(truth)?) {
        (Some(a), Some(b)) if a.dims() == b.dims() => Some((a, b)),
        _ => None,
    };
    p.iter()
        .zip(&t)
        .enumerate()
        .map(|(i, ((pn, pt), (tn, tt)))| {
            if pt.dims() != tt.dims() {
                return Err(invalid(format!("{pn} is {:?} but {tn} is {:?}", pt.dims(), tt.dims())));
            }
            let (h, w) = (pt.dims()[0], pt.dims()[1]);
            let num = |e: loss::LossError| CliError::Numeric(e.to_string());
            let lmd = match &lm {
                Some((a, b)) => {
                    let n = a.dims()[1] * 2;
                    let pts = |x: &Tensor| -> Vec<[f64; 2]> {
                        x.data()[i * n..(i + 1) * n]
                            .chunks_exact(2)
                            .map(|c| [c[0], c[1]])
                            .collect()
                    };
                    Some(loss::lmd(&pts(a), &pts(b)).map_err(num)?)
                }
                None => None,
            };
            Ok(FrameMetrics {
                frame: i,
                psnr: loss::psnr(pt.data(), tt.data()).map_err(num)?,
                ssim: loss::ssim(pt.data(), tt.data(), w, h).map_err(num)?,
                lmd,
            })
        })
        .collect()
}

fn eval(a: Eval, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = compare_dirs(&a.pred, &a.truth)?;
    let table = report::metrics_table(&rows);
    if let Some(p) = &a.out {
        fsio::write_atomic(p, table.as_bytes())?;
    }
    let _ = write!(out, "{table}");
    Ok(())
}

fn gradcheck(a: Gradcheck, out: &mut dyn Write) -> Result<(), CliError> {
    let t0 = Instant::now();
    let results = gradsuite::run_suite(a.seed).map_err(|e| CliError::Numeric(e.to_string()))?;
    let _ = write!(out, "{}", gradsuite::format_results(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    say(
        out,
        format!(
            "{} of {} checks passed in {:.2} s",
            results.len() - failed,
            results.len(),
            t0.elapsed().as_secs_f64()
        ),
    );
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

// inspect ------------------------------------------------------------------

fn inspect(a: Inspect, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = fsio::read(&a.file)?;
    let path = a.file.display();
    match bytes.get(..4) {
        Some(m) if m == checkpoint::CHECKPOINT_MAGIC => {
            let (ck, run, meta) = checkpoint::decode(&bytes).map_err(|e| invalid(format!("{path}: {e}")))?;
            say(out, format!("checkpoint {path}"));
            say(out, format!("stage {:?}, iteration {}", meta.stage, meta.iteration));
            say(out, format!("config hash {:016x}", meta.config_hash));
            let store = &ck.model.store;
            let count = |f: &dyn Fn(ParamGroup) -> bool| -> usize {
                store
                    .entries()
                    .iter()
                    .filter(|e| f(e.group))
                    .map(|e| e.value.len())
                    .sum()
            };
            say(
                out,
                format!("parameters {} tensors, {} values", store.len(), count(&|_| true)),
            );
            say(out, format!("  network {}", count(&|g| g == ParamGroup::Network)));
            for (i, id) in ck.model.identities.iter().enumerate() {
                say(
                    out,
                    format!(
                        "identity {i} '{}': adain {} values, {} Gaussians ({} mouth), head {} vertices {} faces",
                        id.name,
                        count(&|g| g == ParamGroup::AdaIn(i)),
                        id.bindings.len(),
                        id.mouth.len(),
                        id.head.num_vertices(),
                        id.head.num_faces()
                    ),
                );
            }
            say(
                out,
                format!("optimizer moments for {} tensors", ck.optimizer.moments.len()),
            );
            say(out, "config:");
            let _ = write!(out, "{}", run.canonical());
        }
        Some(m) if m == crate::asset::ASSET_MAGIC => {
            let h = crate::asset::decode_head(&bytes, 0).map_err(|e| invalid(format!("{path}: {e}")))?;
            say(
                out,
                format!(
                    "head model {path}: {} vertices, {} faces, {} expression components",
                    h.num_vertices(),
                    h.num_faces(),
                    h.num_expr()
                ),
            );
        }
        Some(m) if m == etg::TENSOR_MAGIC => {
            let t = etg::decode_tensor(&bytes).map_err(|e| invalid(format!("{path}: {e}")))?;
            let finite = t.data.iter().filter(|v| v.is_finite());
            let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            say(
                out,
                format!("tensor {path}: {:?} dims {:?}, min {lo} max {hi}", t.dtype, t.dims),
            );
        }
        _ => {
            let text = std::str::from_utf8(&bytes).map_err(|_| invalid(format!("{path}: unrecognised file")))?;
            let run = RunConfig::parse(text)?;
            say(out, format!("config {path}, hash {:016x}", run.hash()));
            let _ = write!(out, "{}", run.canonical());
        }
    }
    Ok(())
}
