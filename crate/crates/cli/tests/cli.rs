use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pathbench_core::embed::{read_embedding_dir, EmbeddingSidecar};
use pathbench_core::eval::read_report;
use pathbench_core::slide_io::write_pyramid;
use pathbench_core::synth::synthetic_slide;
use pathbench_core::tissue::PatchManifest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pathbench"));
    c.env_remove("PATHBENCH_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pathbench")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_slides(dir: &Path, n: usize, size: u32) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let p = dir.join(format!("slide{i:02}.png"));
            synthetic_slide(size, 6, i as u64).unwrap().save_png(&p).unwrap();
            p
        })
        .collect()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn help_exits_zero() {
    let out = run(&["tile", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--min-tissue"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    write_slides(&dir.path().join("slides"), 1, 512);
    let out_path = dir.path().join("out").join("m.jsonl");
    let slides = dir.path().join("slides");
    for args in [
        vec!["tile", "--input", s(&slides), "--out", s(&out_path), "--min-tissue", "1.5"],
        vec!["tile", "--input", s(&slides), "--out", s(&out_path), "--bogus"],
        vec!["tile", "--input", s(&slides), "--out", s(&out_path), "--tiling.nope=3"],
        vec!["tile", "--input", s(&slides), "--out", s(&out_path), "--probe.epochs=0"],
        vec!["frobnicate"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["tile", "--input", s(&dir.path().join("nope.png")), "--out", s(&dir.path().join("m.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("m.jsonl").exists());
}

#[test]
fn env_seed_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let slides = dir.path().join("slides");
    write_slides(&slides, 1, 512);
    let m = dir.path().join("m.jsonl");
    let status = bin()
        .args(["tile", "--input", s(&slides), "--out", s(&m)])
        .env("PATHBENCH_SEED", "42")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(PatchManifest::read(&m).unwrap().seed, 42);
    ok(&["tile", "--input", s(&slides), "--out", s(&m), "--seed", "7"]);
    assert_eq!(PatchManifest::read(&m).unwrap().seed, 7);
}

#[test]
fn patch_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let slides = d.join("slides");
    write_slides(&slides, 2, 1024);
    let pyramid_src = synthetic_slide(1024, 6, 9).unwrap();
    let half = pathbench_core::slide_io::area_resize(&pyramid_src, 512, 512).unwrap();
    write_pyramid(&slides.join("pyr"), "pyr", &[pyramid_src, half]).unwrap();

    let cfg = d.join("cfg.toml");
    std::fs::write(&cfg, "[tiling]\npatch_size = 128\n[probe]\nepochs = 5\n[encoder]\ndim = 16\n").unwrap();
    let m = d.join("manifest.jsonl");
    ok(&["tile", "--config", s(&cfg), "--seed", "3", "--input", s(&slides), "--out", s(&m), "--jobs", "2"]);
    let manifest = PatchManifest::read(&m).unwrap();
    assert_eq!(manifest.slide_ids(), vec!["pyr", "slide00", "slide01"]);
    assert!(manifest.records.iter().all(|r| r.size == 128));

    let tpl = d.join("template.json");
    ok(&["stainfit", "--config", s(&cfg), "--seed", "3", "--manifest", s(&m), "--slides", s(&slides), "--space", "lab", "--max-patches", "20", "--out", s(&tpl)]);
    let tpl_json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&tpl).unwrap()).unwrap();
    assert_eq!(tpl_json["color_space"], "lab");
    assert_eq!(tpl_json["n_fitted"], 20);

    let patch = d.join("patch.png");
    synthetic_slide(512, 3, 1).unwrap().save_png(&patch).unwrap();
    let (v1, v2) = (d.join("v1.png"), d.join("v2.png"));
    ok(&["augment", "--in", s(&patch), "--template", s(&tpl), "--seed", "7", "--out", s(&v1)]);
    ok(&["augment", "--in", s(&patch), "--template", s(&tpl), "--seed", "7", "--out", s(&v2)]);
    assert_eq!(std::fs::read(&v1).unwrap(), std::fs::read(&v2).unwrap());

    let feats = d.join("feats");
    ok(&["embed", "--config", s(&cfg), "--seed", "3", "--manifest", s(&m), "--slides", s(&slides), "--encoder", "toy", "--out", s(&feats)]);
    let sets = read_embedding_dir(&feats).unwrap();
    assert_eq!(sets.len(), 3);
    assert!(sets.values().all(|s| s.dim == 16));
    let sidecar: EmbeddingSidecar =
        serde_json::from_str(&std::fs::read_to_string(feats.join("slide00.hemb.json")).unwrap()).unwrap();
    assert_eq!(sidecar.config_hash, manifest.config_hash);
    assert_eq!(sidecar.n, sets["slide00"].len());

    // Label patches by slide; the pyramid slide's patches go to test only.
    let mut ds = String::new();
    for r in &manifest.records {
        let label = if r.slide_id == "slide01" { "b" } else { "a" };
        let split = if r.slide_id == "pyr" { "test" } else { "train" };
        ds.push_str(&format!(
            "{{\"key\":\"{}\",\"slide_id\":\"{}\",\"label\":\"{label}\",\"split\":\"{split}\"}}\n",
            r.key(),
            r.slide_id
        ));
    }
    let ds_path = d.join("ds.jsonl");
    std::fs::write(&ds_path, ds).unwrap();
    let (r1, r2, ck) = (d.join("r1.json"), d.join("r2.json"), d.join("probe.ckpt"));
    ok(&["probe", "--config", s(&cfg), "--seed", "3", "--features", s(&feats), "--dataset", s(&ds_path), "--out", s(&r1), "--checkpoint", s(&ck)]);
    ok(&["probe", "--config", s(&cfg), "--seed", "3", "--features", s(&feats), "--dataset", s(&ds_path), "--out", s(&r2)]);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report = read_report(&r1).unwrap();
    assert_eq!(report.epochs, 5);
    assert_eq!(report.config_hash, manifest.config_hash);
    assert!(ck.exists());

    let out = ok(&["report", "--in", s(&r1)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("protocol: linear_probe"));

    // A different config yields a different hash.
    let r3 = d.join("r3.json");
    ok(&["probe", "--config", s(&cfg), "--seed", "3", "--probe.lr=0.05", "--features", s(&feats), "--dataset", s(&ds_path), "--out", s(&r3)]);
    assert_ne!(read_report(&r3).unwrap().config_hash, report.config_hash);

    // No stray temp files from atomic writes.
    assert!(files_in(d).iter().all(|p| !p.file_name().unwrap().to_string_lossy().contains(".tmp-")));
}

#[test]
fn mil_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let slides = d.join("slides");
    write_slides(&slides, 10, 512);
    let m = d.join("m.jsonl");
    ok(&["tile", "--input", s(&slides), "--out", s(&m), "--patch-size", "64"]);
    let feats = d.join("feats");
    ok(&["embed", "--manifest", s(&m), "--slides", s(&slides), "--dim", "8", "--out", s(&feats)]);

    let labels: serde_json::Map<String, serde_json::Value> = (0..10)
        .map(|i| (format!("slide{i:02}"), serde_json::Value::from(if i % 2 == 0 { "x" } else { "y" })))
        .collect();
    let lp = d.join("labels.json");
    std::fs::write(&lp, serde_json::Value::Object(labels).to_string()).unwrap();

    let (r1, r2, ck) = (d.join("mil1.json"), d.join("mil2.json"), d.join("mil.ckpt"));
    let common = ["mil", "--bags", s(&feats), "--labels", s(&lp), "--ratios", "0.6,0.2,0.2", "--seed", "1", "--mil.epochs=3", "--mil.hidden=4"];
    let mut a1 = common.to_vec();
    a1.extend(["--out", s(&r1), "--checkpoint", s(&ck)]);
    ok(&a1);
    let mut a2 = common.to_vec();
    a2.extend(["--out", s(&r2), "--manifest", s(&m)]);
    ok(&a2);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report = read_report(&r1).unwrap();
    assert_eq!((report.split_sizes.train, report.split_sizes.val, report.split_sizes.test), (6, 2, 2));
    assert_eq!(report.per_class_auc.as_ref().unwrap().len(), 2);
    let ckpt = pathbench_core::nn::Checkpoint::read(&ck).unwrap();
    assert_eq!(ckpt.to_mil().unwrap().dim(), 8);

    let bad = d.join("bad.json");
    let out = run(&["mil", "--bags", s(&feats), "--labels", s(&lp), "--ratios", "0.5,0.5,0.5", "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!bad.exists());
}

#[test]
fn report_rejects_invalid_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    std::fs::write(&p, "{\"protocol\": \"mil\"}").unwrap();
    assert_eq!(run(&["report", "--in", s(&p)]).status.code(), Some(2));
}

#[test]
fn selftest_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["selftest", "--out", s(out), "--size", "2048", "--seed", "5", "--probe.epochs=10"]);
    }
    for f in ["report.json", "manifest.jsonl", "dataset.jsonl", "features/synthetic.hemb"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
