use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asd_core::data::{load_manifest, write_manifest, ClipRecord, Domain, Label, Split};
use asd_core::dsp::{extract_raw, read_wav};
use asd_core::explain::{nth_mask, read_csv_grid, MaskParams};
use asd_core::net::load_checkpoint;
use asd_core::pipeline::{ClipScorer, ModelMeta};
use asd_core::score::ReferenceModel;

const SMALL_SYNTH: &str = "\
n_machine_types = 1
sections_per_type = 2
attributes_per_section = 2
source_train_count = 6
target_train_count = 2
test_count_per_domain = 2
clip_seconds = 1.1
";

fn asd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = asd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs synth, features, train, score and eval in `dir`; returns the report
/// path.
fn pipeline(dir: &Path, seed: &str) -> PathBuf {
    let cfg = dir.join("synth.toml");
    std::fs::write(&cfg, SMALL_SYNTH).unwrap();
    let data = dir.join("data");
    let manifest = data.join("manifest.jsonl");
    let feats = dir.join("feats");
    let model = dir.join("model.bin");
    let report = dir.join("report.json");
    run_ok(&["synth", "--out", s(&data), "--config", s(&cfg), "--seed", seed]);
    run_ok(&["features", "--manifest", s(&manifest), "--features-dir", s(&feats)]);
    run_ok(&[
        "train", "--manifest", s(&manifest), "--features-dir", s(&feats), "--model", s(&model),
        "--loss", "sc-adacos", "--classes", "type-section-attr", "--subclusters", "2",
        "--epochs", "2", "--batch", "4", "--seed", seed,
    ]);
    run_ok(&[
        "score", "--manifest", s(&manifest), "--features-dir", s(&feats), "--model", s(&model),
        "--refs", s(&dir.join("refs.bin")), "--scores", s(&dir.join("scores.csv")), "--k", "2",
        "--seed", seed,
    ]);
    run_ok(&[
        "eval", "--manifest", s(&manifest), "--scores", s(&dir.join("scores.csv")), "--report",
        s(&report),
    ]);
    report
}

#[test]
fn verify_reports_small_discrepancies() {
    let out = run_ok(&["verify", "--trials", "100", "--seed", "7"]);
    let line = out.lines().find(|l| l.starts_with("decomposition")).unwrap();
    let value: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(value <= 1e-6, "{line}");
    assert!(!out.contains("FAILED"), "{out}");
}

#[test]
fn usage_errors_exit_one() {
    let out = asd(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(asd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(asd(&[]).status.code(), Some(1));
    assert_eq!(asd(&["verify", "--trials", "0"]).status.code(), Some(1));
    assert_eq!(asd(&["train", "--loss", "softmax"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_one_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = asd(&[
        "eval", "--manifest", s(&dir.path().join("none.jsonl")), "--scores", "x.csv", "--report",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    std::fs::write(&cfg, SMALL_SYNTH).unwrap();
    let data = dir.path().join("data");
    run_ok(&["synth", "--out", s(&data), "--config", s(&cfg)]);
    // features dir exists but holds no cached features
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = asd(&[
        "train", "--manifest", s(&data.join("manifest.jsonl")), "--features-dir", s(&empty),
        "--model", s(&dir.path().join("m.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_a_perfect_scorer_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    let mut scores = String::from("clip_id,section,score\n");
    for section in ["00", "01"] {
        for domain in [Domain::Source, Domain::Target] {
            for (label, score) in [(Label::Normal, 0.1), (Label::Anomalous, 0.9)] {
                for i in 0..3 {
                    let id = format!("{section}_{domain}_{label:?}_{i}");
                    scores += &format!("{id},m/{section},{}\n", score + i as f64 * 0.01);
                    records.push(ClipRecord {
                        clip_id: id,
                        path: PathBuf::from("unused.wav"),
                        machine_type: "m".into(),
                        section: section.into(),
                        domain,
                        split: Split::Test,
                        label,
                        attributes: Default::default(),
                    });
                }
            }
        }
    }
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&manifest, &records).unwrap();
    let scores_path = dir.path().join("scores.csv");
    std::fs::write(&scores_path, scores).unwrap();
    let report = dir.path().join("report.json");
    run_ok(&["eval", "--manifest", s(&manifest), "--scores", s(&scores_path), "--report", s(&report)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let mut cells = 0;
    for sec in json["sections"].as_array().unwrap() {
        for slice in ["source", "target", "both"] {
            for metric in ["auc", "pauc"] {
                assert_eq!(sec[slice][metric].as_f64(), Some(1.0), "{sec}");
                cells += 1;
            }
        }
    }
    assert_eq!(cells, 12);
    for (_, v) in json["hmean"].as_object().unwrap() {
        assert_eq!(v.as_f64(), Some(1.0));
    }
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn pipeline_is_deterministic_and_explain_matches_single_mask() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = std::fs::read(pipeline(a.path(), "5")).unwrap();
    let rb = std::fs::read(pipeline(b.path(), "5")).unwrap();
    assert_eq!(ra, rb);

    let dir = a.path();
    let manifest = dir.join("data/manifest.jsonl");
    let records = load_manifest(&manifest).unwrap();
    let clip = records.iter().find(|r| r.split == Split::Test).unwrap();
    let maps = dir.join("maps");
    run_ok(&[
        "explain", "--manifest", s(&manifest), "--model", s(&dir.join("model.bin")), "--refs",
        s(&dir.join("refs.bin")), "--out", s(&maps), "--iters", "1", "--seed", "3", "--clip",
        &clip.clip_id,
    ]);
    let map = read_csv_grid(&maps.join(format!("{}.csv", clip.clip_id))).unwrap();
    assert!(maps.join(format!("{}.pgm", clip.clip_id)).exists());

    let (net, _): (_, ModelMeta) = load_checkpoint(&dir.join("model.bin")).unwrap();
    let refs = ReferenceModel::load(&dir.join("refs.bin")).unwrap();
    let (mag, spectrum) = extract_raw(&read_wav(&clip.path).unwrap(), net.spec().spectrum_len).unwrap();
    let params = MaskParams {
        iters: 1,
        seed: 3,
        ..MaskParams::default()
    };
    let mask = nth_mask(&params, mag.n_freq(), mag.n_time(), 0);
    let scorer = ClipScorer {
        net: &net,
        refs: &refs,
        section: clip.section_key(),
        spectrum,
    };
    let score = scorer.score(&mask.apply(&mag)).unwrap();
    let expected = mask.to_grid();
    assert_eq!((map.n_freq(), map.n_time()), (mag.n_freq(), mag.n_time()));
    for (got, m) in map.values().iter().zip(expected.values()) {
        assert!((got - score * m / 0.5625).abs() <= 1e-9 * score.abs().max(1.0));
    }
}
