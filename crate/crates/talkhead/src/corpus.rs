//! On-disk corpora: a `manifest.toml` plus one directory per identity.
//!
//! ```text
//! manifest.toml
//! <id>/head.etga                 head model
//! <id>/embedding.etgt            D_id
//! <id>/camera.etgt               [fx, fy, cx, cy, R (9), t (3), width, height, near]
//! <id>/mouth_landmarks.etgt      M x 2 pixels, first frame
//! <id>/<clip>/audio.etgt         T x D_a
//! <id>/<clip>/au.etgt            T x D_e
//! <id>/<clip>/teacher.etgt       T x 7, all-zero rows are missing frames
//! <id>/<clip>/score.etgt         T x 1
//! <id>/<clip>/poses.etgt         T x 12, [R (9), t (3)]
//! <id>/train/images.etgt         T x H x W x 3 (f32)
//! <id>/train/depth.etgt          T x H x W (f32)
//! <id>/train/normals.etgt        T x H x W x 3 (f32), zero where unused
//! <id>/train/landmarks.etgt      T x L x 2
//! <id>/train/preview/NNNN.png    frame previews
//! <id>/truth/<clip>_{psi,jaw,intensity,class}.etgt  generating trajectories
//! ```
//!
//! `<clip>` is `train` or `heldout`; held-out clips have no frames.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use talkhead_core::grmn::NUM_EMOTIONS;
use talkhead_core::loss::{GeometryTarget, TeacherSignals};
use talkhead_core::render::Camera;
use talkhead_core::synth::{Script, SynthIdentity};
use talkhead_core::tensor::Tensor;
use talkhead_core::train::{Clip, Frame, Pose, Subject};

use crate::asset;
use crate::etg::Dtype;
use crate::fsio::{self, IoError};
use crate::image;

pub const MANIFEST: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub frame_rate: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "identity")]
    pub identities: Vec<IdentityEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityEntry {
    pub name: String,
    /// Directory relative to the manifest.
    pub dir: String,
    pub frames: usize,
    pub heldout_frames: usize,
    /// Frames with a neutral face and closed jaw.
    pub rest: Vec<usize>,
    pub landmark_vertices: Vec<usize>,
}

/// One identity read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub subject: Subject,
    pub heldout: Clip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub identities: Vec<Identity>,
}

impl Corpus {
    pub fn find(&self, name: &str) -> Option<usize> {
        self.identities.iter().position(|i| i.subject.name == name)
    }
}

// Writing ------------------------------------------------------------------

fn camera_values(c: &Camera) -> Vec<f64> {
    let mut v = vec![c.fx, c.fy, c.cx, c.cy];
    v.extend(c.rot.iter().flatten());
    v.extend(c.trans);
    v.extend([c.width as f64, c.height as f64, c.near]);
    v
}

fn pose_values(poses: impl Iterator<Item = Pose>) -> Vec<f64> {
    poses
        .flat_map(|p| p.rot.iter().flatten().copied().chain(p.trans).collect::<Vec<_>>())
        .collect()
}

fn save(path: &Path, dims: &[usize], data: &[f64], dtype: Dtype) -> Result<(), IoError> {
    fsio::save_raw(path, dims, data, dtype)
}

fn write_clip_signals(dir: &Path, clip: &Clip) -> Result<(), IoError> {
    let t = clip.len();
    fsio::save_tensor(&dir.join("audio.etgt"), &clip.audio, Dtype::F64)?;
    fsio::save_tensor(&dir.join("au.etgt"), &clip.au, Dtype::F64)?;
    let teacher = &clip.teacher;
    let rows: Vec<f64> = (0..t)
        .flat_map(|i| {
            if teacher.present(i) {
                *teacher.p_emo(i)
            } else {
                [0.0; NUM_EMOTIONS]
            }
        })
        .collect();
    save(&dir.join("teacher.etgt"), &[t, NUM_EMOTIONS], &rows, Dtype::F64)?;
    let score: Vec<f64> = (0..t)
        .map(|i| if teacher.present(i) { teacher.score(i) } else { 0.0 })
        .collect();
    save(&dir.join("score.etgt"), &[t, 1], &score, Dtype::F64)?;
    save(
        &dir.join("poses.etgt"),
        &[t, 12],
        &pose_values(clip.frames.iter().map(|f| f.pose)),
        Dtype::F64,
    )
}

fn write_script(dir: &Path, prefix: &str, s: &Script) -> Result<(), IoError> {
    let t = s.psi.len();
    let k = s.psi.first().map_or(0, Vec::len);
    let psi: Vec<f64> = s.psi.iter().flatten().copied().collect();
    save(&dir.join(format!("{prefix}_psi.etgt")), &[t, k], &psi, Dtype::F64)?;
    let jaw: Vec<f64> = s.jaw.iter().flatten().copied().collect();
    save(&dir.join(format!("{prefix}_jaw.etgt")), &[t, 3], &jaw, Dtype::F64)?;
    save(
        &dir.join(format!("{prefix}_intensity.etgt")),
        &[t],
        &s.intensity,
        Dtype::F64,
    )?;
    let class: Vec<f64> = s.class.iter().map(|&c| c as f64).collect();
    save(&dir.join(format!("{prefix}_class.etgt")), &[t], &class, Dtype::F64)
}

/// Write a generated corpus under `root`; `previews` adds PNG frames.
pub fn write(
    root: &Path,
    ids: &[SynthIdentity],
    seed: u64,
    frame_rate: f64,
    previews: bool,
) -> Result<Manifest, IoError> {
    let first = ids
        .first()
        .ok_or_else(|| IoError::invalid(root, "no identities to write"))?;
    let cam = &first.subject.camera;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        frame_rate,
        width: cam.width,
        height: cam.height,
        identities: Vec::new(),
    };
    for id in ids {
        let s = &id.subject;
        let dir = root.join(&s.name);
        asset::save_head(&dir.join("head.etga"), &s.head)?;
        fsio::save_tensor(&dir.join("embedding.etgt"), &s.embedding, Dtype::F64)?;
        let cv = camera_values(&s.camera);
        save(&dir.join("camera.etgt"), &[cv.len()], &cv, Dtype::F64)?;
        let ml: Vec<f64> = s.mouth_landmarks.iter().flatten().copied().collect();
        save(
            &dir.join("mouth_landmarks.etgt"),
            &[s.mouth_landmarks.len(), 2],
            &ml,
            Dtype::F64,
        )?;

        let train = dir.join("train");
        write_clip_signals(&train, &s.clip)?;
        write_clip_signals(&dir.join("heldout"), &id.heldout)?;
        let (h, w) = (s.camera.height, s.camera.width);
        let t = s.clip.len();
        let missing = |what: &str| IoError::invalid(&train, format!("generated frame lacks {what}"));
        let mut images = Vec::with_capacity(t * h * w * 3);
        let mut depth = Vec::with_capacity(t * h * w);
        let mut normals = Vec::with_capacity(t * h * w * 3);
        let mut landmarks = Vec::new();
        for (i, f) in s.clip.frames.iter().enumerate() {
            let img = f.image.as_ref().ok_or_else(|| missing("an image"))?;
            let geo = f.geometry.as_ref().ok_or_else(|| missing("geometry"))?;
            let lm = f.landmarks.as_ref().ok_or_else(|| missing("landmarks"))?;
            images.extend_from_slice(img.data());
            depth.extend_from_slice(&geo.depth);
            normals.extend(geo.normals.iter().flatten());
            landmarks.extend(lm.iter().flatten());
            if previews {
                image::save_png(&train.join("preview").join(format!("{i:04}.png")), w, h, 3, img.data())?;
            }
        }
        save(&train.join("images.etgt"), &[t, h, w, 3], &images, Dtype::F32)?;
        save(&train.join("depth.etgt"), &[t, h, w], &depth, Dtype::F32)?;
        save(&train.join("normals.etgt"), &[t, h, w, 3], &normals, Dtype::F32)?;
        save(
            &train.join("landmarks.etgt"),
            &[t, s.landmark_vertices.len(), 2],
            &landmarks,
            Dtype::F64,
        )?;

        let truth = dir.join("truth");
        write_script(&truth, "train", &id.truth.script)?;
        write_script(&truth, "heldout", &id.truth.heldout)?;

        manifest.identities.push(IdentityEntry {
            name: s.name.clone(),
            dir: s.name.clone(),
            frames: t,
            heldout_frames: id.heldout.len(),
            rest: (0..t).filter(|&i| s.clip.frames[i].rest).collect(),
            landmark_vertices: s.landmark_vertices.clone(),
        });
    }
    let text = toml::to_string(&manifest).map_err(|e| IoError::invalid(root, e.to_string()))?;
    fsio::write_atomic(&root.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

// Reading ------------------------------------------------------------------

pub fn load_manifest(root: &Path) -> Result<Manifest, IoError> {
    let path = root.join(MANIFEST);
    let bytes = fsio::read(&path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| IoError::invalid(&path, "not UTF-8"))?;
    let m: Manifest = toml::from_str(text).map_err(|e| IoError::invalid(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(IoError::invalid(
            &path,
            format!("unsupported manifest version {}", m.version),
        ));
    }
    Ok(m)
}

pub fn load_camera(path: &Path) -> Result<Camera, IoError> {
    let v = fsio::load_shaped(path, &[Some(19)])?;
    let v = v.data();
    let size = |x: f64, what: &str| {
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(IoError::invalid(
                path,
                format!("camera {what} {x} is not a positive integer"),
            ))
        }
    };
    Camera::new(
        v[0],
        v[1],
        v[2],
        v[3],
        [[v[4], v[5], v[6]], [v[7], v[8], v[9]], [v[10], v[11], v[12]]],
        [v[13], v[14], v[15]],
        size(v[16], "width")?,
        size(v[17], "height")?,
        v[18],
    )
    .map_err(|e| IoError::invalid(path, e.to_string()))
}

/// Poses from a `T x 12` file. Rotations must be orthonormal.
pub fn load_poses(path: &Path, frames: Option<usize>) -> Result<Vec<Pose>, IoError> {
    let t = fsio::load_shaped(path, &[frames, Some(12)])?;
    (0..t.rows())
        .map(|r| {
            let v = t.row(r);
            let rot = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
            if talkhead_core::geometry::orthonormality_error(&rot) > 1e-6 || talkhead_core::geometry::det(&rot) < 0.0 {
                return Err(IoError::invalid(
                    path,
                    format!("row {r}: rotation is not a proper rotation"),
                ));
            }
            Ok(Pose {
                rot,
                trans: [v[9], v[10], v[11]],
            })
        })
        .collect()
}

pub fn load_teacher(dir: &Path, frames: usize) -> Result<TeacherSignals, IoError> {
    let path = dir.join("teacher.etgt");
    let p = fsio::load_shaped(&path, &[Some(frames), Some(NUM_EMOTIONS)])?;
    let score = fsio::load_shaped(&dir.join("score.etgt"), &[Some(frames), Some(1)])?;
    let rows: Vec<[f64; NUM_EMOTIONS]> = (0..frames)
        .map(|r| p.row(r).try_into().expect("row width checked"))
        .collect();
    let present = rows.iter().map(|r| r.iter().any(|&v| v != 0.0)).collect();
    TeacherSignals::new(rows, score.data().to_vec(), present).map_err(|e| IoError::invalid(&path, e.to_string()))
}

fn load_clip_signals(dir: &Path, frames: usize) -> Result<(Tensor, Tensor, TeacherSignals, Vec<Pose>), IoError> {
    let audio = fsio::load_shaped(&dir.join("audio.etgt"), &[Some(frames), None])?;
    let au = fsio::load_shaped(&dir.join("au.etgt"), &[Some(frames), None])?;
    let teacher = load_teacher(dir, frames)?;
    let poses = load_poses(&dir.join("poses.etgt"), Some(frames))?;
    Ok((audio, au, teacher, poses))
}

fn load_identity(root: &Path, e: &IdentityEntry, m: &Manifest) -> Result<Identity, IoError> {
    let dir = root.join(&e.dir);
    let head = asset::load_head(&dir.join("head.etga"))?;
    if let Some(&v) = e.landmark_vertices.iter().find(|&&v| v >= head.num_vertices()) {
        return Err(IoError::invalid(
            &dir,
            format!("landmark vertex {v} is outside the head model"),
        ));
    }
    let embedding = fsio::load_shaped(&dir.join("embedding.etgt"), &[None])?;
    let camera = load_camera(&dir.join("camera.etgt"))?;
    if (camera.width, camera.height) != (m.width, m.height) {
        return Err(IoError::invalid(&dir, "camera size differs from the manifest"));
    }
    let ml = fsio::load_shaped(&dir.join("mouth_landmarks.etgt"), &[None, Some(2)])?;

    let train = dir.join("train");
    let t = e.frames;
    let (h, w) = (m.height, m.width);
    let (audio, au, teacher, poses) = load_clip_signals(&train, t)?;
    let images = fsio::load_shaped(&train.join("images.etgt"), &[Some(t), Some(h), Some(w), Some(3)])?;
    let depth = fsio::load_shaped(&train.join("depth.etgt"), &[Some(t), Some(h), Some(w)])?;
    let normals = fsio::load_shaped(&train.join("normals.etgt"), &[Some(t), Some(h), Some(w), Some(3)])?;
    let l = e.landmark_vertices.len();
    let landmarks = fsio::load_shaped(&train.join("landmarks.etgt"), &[Some(t), Some(l), Some(2)])?;
    if let Some(&r) = e.rest.iter().find(|&&r| r >= t) {
        return Err(IoError::invalid(&dir, format!("rest frame {r} is past the clip end")));
    }
    let px = h * w;
    let frames = (0..t)
        .map(|i| {
            let img = Tensor::new(vec![px, 3], images.data()[i * px * 3..(i + 1) * px * 3].to_vec())
                .expect("finite slice of a finite tensor");
            let d = depth.data()[i * px..(i + 1) * px].to_vec();
            let n = normals.data()[i * px * 3..(i + 1) * px * 3]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let lm = landmarks.data()[i * l * 2..(i + 1) * l * 2]
                .chunks_exact(2)
                .map(|c| [c[0], c[1]])
                .collect();
            Frame {
                pose: poses[i],
                image: Some(img),
                rest: e.rest.contains(&i),
                geometry: Some(GeometryTarget::from_maps(d, n)),
                landmarks: Some(lm),
            }
        })
        .collect();
    let subject = Subject {
        name: e.name.clone(),
        embedding,
        head: Arc::new(head),
        camera: Arc::new(camera),
        mouth_landmarks: ml.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        landmark_vertices: e.landmark_vertices.clone(),
        clip: Clip {
            audio,
            au,
            teacher,
            frames,
        },
    };

    let (h_audio, h_au, h_teacher, h_poses) = load_clip_signals(&dir.join("heldout"), e.heldout_frames)?;
    let heldout = Clip {
        audio: h_audio,
        au: h_au,
        teacher: h_teacher,
        frames: h_poses
            .into_iter()
            .map(|pose| Frame {
                pose,
                image: None,
                rest: false,
                geometry: None,
                landmarks: None,
            })
            .collect(),
    };
    Ok(Identity { subject, heldout })
}

pub fn load(root: &Path) -> Result<Corpus, IoError> {
    let manifest = load_manifest(root)?;
    let identities = manifest
        .identities
        .iter()
        .map(|e| load_identity(root, e, &manifest))
        .collect::<Result<_, _>>()?;
    Ok(Corpus {
        root: root.to_path_buf(),
        manifest,
        identities,
    })
}
