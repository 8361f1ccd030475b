use proptest::prelude::*;
use talkhead::checkpoint::{self, CheckpointError};
use talkhead::config::RunConfig;
use talkhead::corpus;
use talkhead::etg::{self, Dtype};
use talkhead_core::grmn::NEUTRAL;
use talkhead_core::synth;
use talkhead_core::train;

fn tiny() -> RunConfig {
    RunConfig::parse(
        "identities = 3\nframes = 10\nheldout_frames = 6\nrest_frames = 3\nepisode_len = 3\n\
         width = 16\nheight = 16\nd_audio = 8\nd_au = 5\nd_identity = 8\nd_hidden = 12\n\
         layers = 1\nheads = 2\nadain_hidden = 8\ngaussians = 900\nmouth_gaussians = 100\n\
         mouth_radius = 0.02\npretrain_iters = 6\nstage1_iters = 2\nadapt_iters = 4\n\
         adapt_warmup_iters = 1\nadapt_appearance = true\n",
    )
    .unwrap()
}

fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_is_byte_identical_under_a_fixed_seed() {
    let run = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let ids = synth::generate(&run.corpus(), 5).unwrap();
        corpus::write(d.path(), &ids, 5, 25.0, true).unwrap();
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 30);
    assert_eq!(ta, tb);
}

#[test]
fn corpus_round_trips_through_the_manifest() {
    let run = tiny();
    let dir = tempfile::tempdir().unwrap();
    let ids = synth::generate(&run.corpus(), 2).unwrap();
    corpus::write(dir.path(), &ids, 2, 25.0, false).unwrap();
    let c = corpus::load(dir.path()).unwrap();
    assert_eq!(c.identities.len(), 3);
    for (mem, disk) in ids.iter().zip(&c.identities) {
        let (m, d) = (&mem.subject, &disk.subject);
        assert_eq!(m.name, d.name);
        assert_eq!(m.head, d.head);
        assert_eq!(m.embedding, d.embedding);
        assert_eq!(m.camera, d.camera);
        assert_eq!(m.clip.audio, d.clip.audio);
        assert_eq!(m.clip.au, d.clip.au);
        assert_eq!(m.clip.teacher, d.clip.teacher);
        assert_eq!(mem.heldout.audio, disk.heldout.audio);
        assert_eq!(mem.heldout.teacher, disk.heldout.teacher);
        for (fm, fd) in m.clip.frames.iter().zip(&d.clip.frames) {
            assert_eq!(fm.pose, fd.pose);
            assert_eq!(fm.rest, fd.rest);
            assert_eq!(fm.landmarks, fd.landmarks);
            // Images are stored as f32.
            let (im, id) = (fm.image.as_ref().unwrap(), fd.image.as_ref().unwrap());
            assert!(im.data().iter().zip(id.data()).all(|(a, b)| (*a as f32) as f64 == *b));
        }
        m.validate(&run.model()).unwrap();
    }
}

#[test]
fn teacher_files_satisfy_the_score_identity() {
    let run = tiny();
    let dir = tempfile::tempdir().unwrap();
    let ids = synth::generate(&run.corpus(), 3).unwrap();
    corpus::write(dir.path(), &ids, 3, 25.0, false).unwrap();
    for id in &ids {
        for clip in ["train", "heldout"] {
            let d = dir.path().join(&id.subject.name).join(clip);
            let p = talkhead::fsio::load_tensor(&d.join("teacher.etgt")).unwrap();
            let e = talkhead::fsio::load_tensor(&d.join("score.etgt")).unwrap();
            for t in 0..p.rows() {
                let row = p.row(t);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!((e.data()[t] - (1.0 - row[NEUTRAL])).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn first_ground_truth_frame_replays_bitwise() {
    let run = tiny();
    let dir = tempfile::tempdir().unwrap();
    let ids = synth::generate(&run.corpus(), 4).unwrap();
    corpus::write(dir.path(), &ids, 4, 25.0, false).unwrap();
    let stored = talkhead::fsio::load_raw(&dir.path().join("id1/train/images.etgt")).unwrap();
    let id = &ids[1];
    let cam = &id.subject.camera;
    let replay = synth::render_truth(&id.subject.head, &id.truth.cloud, &id.truth.script, 0, cam).unwrap();
    let n = cam.num_pixels() * 3;
    let frame0 = &stored.data[..n];
    assert!(replay
        .color
        .iter()
        .zip(frame0)
        .all(|(a, b)| ((*a as f32) as f64).to_bits() == b.to_bits()));
}

fn trained_checkpoint(run: &RunConfig) -> train::Checkpoint {
    let ids = synth::generate(&run.corpus(), 1).unwrap();
    let subjects: Vec<_> = ids[..2].iter().map(|s| s.subject.clone()).collect();
    train::pretrain(&subjects, run.model(), run.train(), &mut |_| {}).unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let run = tiny();
    let ck = trained_checkpoint(&run);
    let bytes = checkpoint::encode(&ck, &run).unwrap();
    let (back, run2, meta) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(run2, run);
    assert_eq!(meta.iteration, run.pretrain_iters);
    assert_eq!(checkpoint::encode(&back, &run).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.etgc");
    checkpoint::save(&p, &ck, &run).unwrap();
    let loaded = checkpoint::load(&p, &run).unwrap();
    checkpoint::save(&dir.path().join("b.etgc"), &loaded, &run).unwrap();
    assert_eq!(
        std::fs::read(&p).unwrap(),
        std::fs::read(dir.path().join("b.etgc")).unwrap()
    );

    let mut other = run.clone();
    other.lambda_kl = 0.5;
    assert!(matches!(
        checkpoint::load(&p, &other),
        Err(CheckpointError::ConfigMismatch { .. })
    ));
    assert!(checkpoint::encode(&ck, &other).is_err());
}

#[test]
fn every_truncation_is_diagnosed_with_an_offset() {
    let run = tiny();
    let ck = trained_checkpoint(&run);
    let bytes = checkpoint::encode(&ck, &run).unwrap();
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step) {
        let e = checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert!(e.offset <= cut as u64, "cut {cut}: {e}");
    }
}

proptest! {
    #[test]
    fn tensor_files_round_trip_bitwise(
        dims in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2) * 1e-300).collect();
        let b = etg::encode_tensor(&dims, &data, Dtype::F64);
        let t = etg::decode_tensor(&b).unwrap();
        prop_assert_eq!(&t.dims, &dims);
        prop_assert!(t.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let f: Vec<f64> = data.iter().map(|&v| (v as f32) as f64).collect();
        let b32 = etg::encode_tensor(&dims, &f, Dtype::F32);
        prop_assert_eq!(b32.len(), 12 + 8 * dims.len() + 4 * n);
        let t32 = etg::decode_tensor(&b32).unwrap();
        prop_assert!(t32.data.iter().zip(&f).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(etg::encode_tensor(&t32.dims, &t32.data, Dtype::F32), b32);
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = etg::decode_tensor(&bytes);
        let _ = checkpoint::decode(&bytes);
        let mut tagged = b"ETGC\x01\x00\x00\x00".to_vec();
        tagged.extend(&bytes);
        if let Err(e) = checkpoint::decode(&tagged) {
            prop_assert!(e.offset <= tagged.len() as u64);
        }
    }
}
