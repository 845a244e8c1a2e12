mod common;

use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use tailgen_core::backends::clock::SimulatedClock;
use tailgen_core::backends::mock::MockBackend;
use tailgen_core::backends::{Backends, Kind};
use tailgen_core::pipeline::{emit_mix, Pipeline};
use tailgen_core::Error;

use common::*;

#[test]
fn summary_conserves_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[60, 12, 3]);
    let out = dir.path().join("run");
    let summary = Pipeline::new(config("", ""), &out)
        .unwrap()
        .run(&manifest)
        .unwrap();
    assert_eq!(summary.classes.len(), 3);
    for c in &summary.classes {
        assert_eq!(c.captioned + c.expanded_kept, c.list_size);
        assert_eq!(c.generated, c.list_size - c.original);
        assert_eq!(c.accepted + c.rejected, c.generated);
        assert_eq!(c.list_size, c.original.max(50));
    }
    assert_eq!(summary.classes[0].generated, 0);
    assert_eq!(summary.mix_samples, 48);
    assert!(summary.stalled_classes.is_empty());
    let pool = std::fs::read_to_string(out.join("pool.tsv")).unwrap();
    assert_eq!(pool.lines().count(), summary.accepted);
    let labels = std::fs::read_to_string(out.join("mix/labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 48);
    for line in labels.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let lam: f64 = f[1].parse().unwrap();
        let wi: f64 = f[2].split(':').nth(1).unwrap().parse().unwrap();
        let wj: f64 = f[3].split(':').nth(1).unwrap().parse().unwrap();
        assert_eq!(wi, lam);
        assert!((wi + wj - 1.0).abs() < 1e-12);
    }
}

#[test]
fn resuming_a_finished_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[8, 3]);
    let out = dir.path().join("run");
    let first = Pipeline::new(config("", ""), &out)
        .unwrap()
        .run(&manifest)
        .unwrap();
    let journal_before = std::fs::read(out.join("journal.jsonl")).unwrap();
    let mut again = Pipeline::open(&out).unwrap();
    let second = again.resume().unwrap();
    assert_eq!(first, second);
    assert!(again.backends().tallies().is_empty());
    assert_eq!(
        std::fs::read(out.join("journal.jsonl")).unwrap(),
        journal_before
    );
    // a second `run` into the same directory is refused
    let err = Pipeline::new(config("", ""), &out)
        .unwrap()
        .run(&manifest)
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tampered_journal_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[5, 2]);
    let out = dir.path().join("run");
    Pipeline::new(config("", ""), &out)
        .unwrap()
        .run(&manifest)
        .unwrap();
    let path = out.join("journal.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("class_0001", "class_0007", 1)).unwrap();
    let err = Pipeline::open(&out).unwrap().resume().unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");

    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"seq\":3,";
    std::fs::write(&path, lines.join("\n")).unwrap();
    match Pipeline::open(&out).unwrap().resume().unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 4),
        other => panic!("{other}"),
    }
}

#[test]
fn tampered_checkpoint_is_detected_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[6, 2]);
    let out = dir.path().join("run");
    let cfg = config("", "");
    let killer = Arc::new(KillAfter {
        inner: Arc::new(MockBackend::new(cfg.mock.clone()).unwrap()),
        kind: Kind::GenerateImage,
        after: 0,
        seen: AtomicUsize::new(0),
    });
    let hub = Backends::uniform(killer, Arc::new(SimulatedClock::new()));
    let err = Pipeline::with_backends(cfg, hub, &out)
        .unwrap()
        .run(&manifest)
        .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let ckpt = out.join("checkpoints/expand/class_0001.json");
    let text = std::fs::read_to_string(&ckpt).unwrap();
    std::fs::write(
        &ckpt,
        text.replacen("\"rounds_used\": ", "\"rounds_used\": 1", 1),
    )
    .unwrap();
    let err = Pipeline::open(&out).unwrap().resume().unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn shared_cache_makes_a_rerun_free() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[9, 4, 1]);
    let cache = dir.path().join("shared-cache");
    let table = format!(
        "[cache]\nmode = \"disk\"\ndir = {:?}",
        cache.to_str().unwrap()
    );
    let cfg = config("", &table);
    let first = Pipeline::new(cfg.clone(), dir.path().join("a"))
        .unwrap()
        .run(&manifest)
        .unwrap();
    assert!(first.tallies.values().any(|t| t.calls > 0));
    let second = Pipeline::new(cfg, dir.path().join("b"))
        .unwrap()
        .run(&manifest)
        .unwrap();
    assert!(
        second.tallies.values().all(|t| t.calls == 0),
        "{:?}",
        second.tallies
    );
    assert_eq!(
        artifacts(&dir.path().join("a")),
        artifacts(&dir.path().join("b"))
    );
}

#[test]
fn disabled_cache_calls_again() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[3]);
    let cfg = config("", "\n[cache]\nmode = \"off\"");
    let mut p = Pipeline::new(cfg, dir.path().join("run")).unwrap();
    p.run(&manifest).unwrap();
    // every caption is asked once; the text embedding of a template repeats
    let t = p.backends().tallies();
    assert!(t.values().all(|t| t.cache_hits == 0));
    assert!(t[&Kind::EmbedText].calls > 1);
}

#[test]
fn emit_mix_writes_a_separate_batch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[7, 2]);
    let out = dir.path().join("run");
    Pipeline::new(config("", ""), &out)
        .unwrap()
        .run(&manifest)
        .unwrap();
    let a = emit_mix(&out, 10, 3).unwrap();
    assert_eq!(a, out.join("mix_s3_n10"));
    let labels = std::fs::read_to_string(a.join("labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 10);
    let b = emit_mix(&out, 10, 3).unwrap();
    assert_eq!(
        std::fs::read(b.join("labels.tsv")).unwrap(),
        labels.as_bytes()
    );
    let c = emit_mix(&out, 10, 4).unwrap();
    assert_ne!(
        std::fs::read(c.join("labels.tsv")).unwrap(),
        labels.as_bytes()
    );
}

#[test]
fn empty_class_with_mixing_is_rejected_at_start() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[4, 0]);
    let out = dir.path().join("run");
    let err = Pipeline::new(config("", ""), &out)
        .unwrap()
        .run(&manifest)
        .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(!out.join("journal.jsonl").exists());
    // without mixing, an empty class is filled from expansion alone
    let mut cfg = config("", "");
    cfg.num_mix_samples = 0;
    let s = Pipeline::new(cfg, dir.path().join("ok"))
        .unwrap()
        .run(&manifest)
        .unwrap();
    assert_eq!(s.classes[1].captioned, 0);
    assert_eq!(s.classes[1].generated, 50);
    assert_eq!(s.mix_samples, 0);
}

#[test]
fn files_originals_are_read_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let img_dir = dir.path().join("imgs");
    std::fs::create_dir_all(&img_dir).unwrap();
    for name in ["a.ppm", "b.ppm"] {
        let img = tailgen_core::imaging::RgbImage::from_pixel(30, 20, image_rgb());
        tailgen_core::imaging::write_ppm(&img_dir.join(name), &img).unwrap();
    }
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "0\tred fox\timgs/a.ppm,imgs/b.ppm\n").unwrap();
    let mut cfg = config("", "");
    cfg.original_images = tailgen_core::pipeline::config::OriginalSource::Files;
    let s = Pipeline::new(cfg, dir.path().join("run"))
        .unwrap()
        .run(&manifest)
        .unwrap();
    assert_eq!(s.mix_samples, 48);
}

fn image_rgb() -> image::Rgb<u8> {
    image::Rgb([200, 10, 10])
}
