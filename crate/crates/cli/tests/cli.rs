use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keyframe_core::io::{
    load_scores, load_selections, save_annotations, save_embeddings, save_scores, AnnotationRecord,
    EmbeddingMatrix, ScoreRecord,
};

fn keyframe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyframe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn keyframe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn golden(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/golden")
        .join(name)
        .display()
        .to_string()
}

const SMALL_CONFIG: &str = r#"
[scorer]
dim = 8
subspaces = 2
window = 3
lambda_init = 0.5
seed = 1

[train]
learning_rate = 0.01
epochs = 4
batch_size = 4
seed = 9
"#;

/// Planted dataset plus config in a fresh directory.
fn small_dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(
        &[
            "synth",
            "--out",
            "data",
            "--videos",
            "12",
            "--frames",
            "48",
            "--dim",
            "8",
            "--segment-min",
            "4",
            "--segment-max",
            "6",
            "--seed",
            "5",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(dir.path().join("cfg.toml"), SMALL_CONFIG).unwrap();
    dir
}

fn train_small(dir: &Path, out: &str) -> Output {
    keyframe(
        &[
            "train",
            "--embeddings",
            "data",
            "--annotations",
            "data/annotations.jsonl",
            "--config",
            "cfg.toml",
            "--out",
            out,
        ],
        dir,
    )
}

#[test]
fn oracle_copy_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(
        &[
            "oracle",
            "--model-fixture",
            &fixture("copy.json"),
            "--budget",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("exhaustive: {f1}"), "{out}");
    assert!(out.contains("greedy:     {f1}"), "{out}");
    assert!(out.contains("submodularity violations: 0"), "{out}");
    assert!(out.contains("# resolved config: oracle"), "{out}");
}

#[test]
fn oracle_xor_fixture_reports_expected_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(
        &[
            "oracle",
            "--model-fixture",
            &fixture("xor.json"),
            "--budget",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let line = out
        .lines()
        .find(|l| l.starts_with("submodularity violations:"))
        .unwrap();
    let count: usize = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(count >= 1);
    assert!(out.contains("expected counterexample"), "{out}");
}

#[test]
fn oracle_random_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(
        &["oracle", "--random", "6", "--seed", "7", "--budget", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let line = out
        .lines()
        .find(|l| l.starts_with("greedy/OPT ratio:"))
        .unwrap();
    let ratio: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(ratio >= 1.0 - (-1.0f64).exp(), "{line}");
}

#[test]
fn oracle_guard_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(
        &["oracle", "--random", "15", "--seed", "1", "--budget", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("guard"), "{}", stderr(&o));

    let o = keyframe(&["oracle", "--random", "4", "--seed", "1"], dir.path());
    assert_eq!(code(&o), 2);
    let o = keyframe(
        &[
            "oracle", "--random", "4", "--seed", "1", "--budget", "1", "--bogus",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn train_logs_decreasing_losses() {
    let dir = small_dataset();
    let o = train_small(dir.path(), "m.evck");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# resolved config: train.run"));
    let log = std::fs::read_to_string(dir.path().join("m.loss.txt")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            it.next().unwrap();
            it.next().unwrap().parse().unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 4);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn train_is_byte_deterministic() {
    let dir = small_dataset();
    assert_eq!(code(&train_small(dir.path(), "a.evck")), 0);
    assert_eq!(code(&train_small(dir.path(), "b.evck")), 0);
    let a = std::fs::read(dir.path().join("a.evck")).unwrap();
    let b = std::fs::read(dir.path().join("b.evck")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("a.loss.txt")).unwrap(),
        std::fs::read(dir.path().join("b.loss.txt")).unwrap()
    );
}

#[test]
fn train_input_errors() {
    let dir = small_dataset();
    let o = keyframe(
        &[
            "train",
            "--embeddings",
            "data",
            "--annotations",
            "nope.jsonl",
            "--config",
            "cfg.toml",
            "--out",
            "m.evck",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.jsonl"), "{}", stderr(&o));
    assert!(!dir.path().join("m.evck").exists());

    // every example lacks positives
    let ann = dir.path().join("data/annotations.jsonl");
    let text = std::fs::read_to_string(&ann).unwrap();
    let mut recs = keyframe_core::io::parse_annotations(&text).unwrap();
    for r in &mut recs {
        r.segments.clear();
    }
    save_annotations(&dir.path().join("empty.jsonl"), &recs).unwrap();
    let o = keyframe(
        &[
            "train",
            "--embeddings",
            "data",
            "--annotations",
            "empty.jsonl",
            "--config",
            "cfg.toml",
            "--out",
            "m.evck",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("12 skipped"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "[scorer]\nwidth = 3\n").unwrap();
    let o = keyframe(
        &[
            "train",
            "--embeddings",
            "data",
            "--annotations",
            "data/annotations.jsonl",
            "--config",
            "bad.toml",
            "--out",
            "m.evck",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn train_divergence_is_an_invariant_failure() {
    let dir = small_dataset();
    let cfg = SMALL_CONFIG.replace("learning_rate = 0.01", "learning_rate = 1e308");
    std::fs::write(dir.path().join("cfg.toml"), cfg).unwrap();
    let o = train_small(dir.path(), "m.evck");
    assert_eq!(code(&o), 4, "{}\n{}", stdout(&o), stderr(&o));
    assert!(!dir.path().join("m.evck").exists());
}

#[test]
fn score_golden_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(
        &[
            "score",
            "--ckpt",
            &golden("scorer.evck"),
            "--video-emb",
            &golden("video.evsb"),
            "--query-emb",
            &golden("query.evsb"),
            "--out",
            "s.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs = load_scores(&dir.path().join("s.jsonl")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].video_id, "video");
    assert_eq!(recs[0].query_id, "query");
    let text = std::fs::read_to_string(golden("scores.json")).unwrap();
    let want: serde_json::Value = serde_json::from_str(&text).unwrap();
    let want: Vec<f64> = want["scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(recs[0].scores.len(), want.len());
    for (a, b) in recs[0].scores.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn score_single_frame_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let one = EmbeddingMatrix::new(1, 8, (0..8).map(|i| i as f32 - 3.5).collect()).unwrap();
    save_embeddings(&p.join("one.evsb"), &one).unwrap();
    let o = keyframe(
        &[
            "score",
            "--ckpt",
            &golden("scorer.evck"),
            "--video-emb",
            "one.evsb",
            "--query-emb",
            &golden("query.evsb"),
            "--out",
            "s.jsonl",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_scores(&p.join("s.jsonl")).unwrap()[0].scores.len(), 1);

    let mut bytes = std::fs::read(golden("video.evsb")).unwrap();
    bytes[20] ^= 0x40;
    std::fs::write(p.join("bad.evsb"), bytes).unwrap();
    let o = keyframe(
        &[
            "score",
            "--ckpt",
            &golden("scorer.evck"),
            "--video-emb",
            "bad.evsb",
            "--query-emb",
            &golden("query.evsb"),
            "--out",
            "s.jsonl",
        ],
        p,
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    let wide = EmbeddingMatrix::new(2, 6, vec![1.0; 12]).unwrap();
    save_embeddings(&p.join("wide.evsb"), &wide).unwrap();
    let o = keyframe(
        &[
            "score",
            "--ckpt",
            &golden("scorer.evck"),
            "--video-emb",
            "wide.evsb",
            "--query-emb",
            &golden("query.evsb"),
            "--out",
            "s.jsonl",
        ],
        p,
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("config mismatch"), "{}", stderr(&o));
}

fn write_scores(dir: &Path, scores: Vec<f64>) {
    save_scores(
        &dir.join("s.jsonl"),
        &[ScoreRecord {
            query_id: "q".into(),
            video_id: "v".into(),
            scores,
        }],
    )
    .unwrap();
}

#[test]
fn select_per_bin_argmax() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(dir.path(), vec![3.0, 1.0, 2.0, 5.0]);
    let o = keyframe(
        &[
            "select",
            "--scores",
            "s.jsonl",
            "--bins",
            "2",
            "--per-bin",
            "1",
            "--out",
            "sel.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sel = load_selections(&dir.path().join("sel.jsonl")).unwrap();
    assert_eq!(sel[0].indices, vec![0, 3]);
    assert_eq!(sel[0].scores, Some(vec![3.0, 5.0]));

    let o = keyframe(
        &[
            "select",
            "--scores",
            "s.jsonl",
            "--bins",
            "5",
            "--out",
            "sel.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("bins"), "{}", stderr(&o));
}

#[test]
fn coverage_all_covered() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_scores(p, vec![0.0, 1.0, 0.0, 0.0]);
    save_annotations(
        &p.join("ann.jsonl"),
        &[AnnotationRecord {
            query_id: "q".into(),
            video_id: "v".into(),
            fps: 2.0,
            n_frames: 4,
            segments: vec![[0.5, 0.5]],
        }],
    )
    .unwrap();
    let o = keyframe(
        &[
            "select",
            "--scores",
            "s.jsonl",
            "--bins",
            "1",
            "--out",
            "sel.jsonl",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let o = keyframe(
        &[
            "eval-coverage",
            "--selections",
            "sel.jsonl",
            "--annotations",
            "ann.jsonl",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(
        stdout(&o).contains("coverage: 100.00% (1/1)"),
        "{}",
        stdout(&o)
    );
}

fn coverage_percent(o: &Output) -> f64 {
    let out = stdout(o);
    let line = out.lines().find(|l| l.starts_with("coverage:")).unwrap();
    line.split_whitespace()
        .nth(1)
        .unwrap()
        .trim_end_matches('%')
        .parse()
        .unwrap()
}

#[test]
fn trained_beats_uniform_on_planted_corpus() {
    let dir = small_dataset();
    let p = dir.path();
    assert_eq!(code(&train_small(p, "m.evck")), 0);
    let o = keyframe(
        &[
            "synth",
            "--out",
            "held",
            "--videos",
            "16",
            "--frames",
            "48",
            "--dim",
            "8",
            "--segment-min",
            "2",
            "--segment-max",
            "3",
            "--seed",
            "77",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let o = keyframe(
        &[
            "score",
            "--ckpt",
            "m.evck",
            "--annotations",
            "held/annotations.jsonl",
            "--embeddings",
            "held",
            "--out",
            "s.jsonl",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for (mode, out) in [(None, "sel.jsonl"), (Some("--uniform"), "uni.jsonl")] {
        let mut args = vec!["select", "--scores", "s.jsonl", "--bins", "4", "--out", out];
        args.extend(mode);
        assert_eq!(code(&keyframe(&args, p)), 0);
    }
    let eval = |f: &str| {
        keyframe(
            &[
                "eval-coverage",
                "--selections",
                f,
                "--annotations",
                "held/annotations.jsonl",
            ],
            p,
        )
    };
    let trained = coverage_percent(&eval("sel.jsonl"));
    let uniform = coverage_percent(&eval("uni.jsonl"));
    assert!(trained > uniform, "trained {trained} vs uniform {uniform}");
}

#[test]
fn gradcheck_passes_and_catches_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(&["gradcheck"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("gradcheck: pass"));

    let o = keyframe(
        &["gradcheck", "--seed", "100", "--instances", "10"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let o = keyframe(&["gradcheck", "--flip-sign-of", "gate.hidden"], dir.path());
    assert_eq!(code(&o), 4, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn every_command_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = keyframe(&["gradcheck", "--frames", "3"], dir.path());
    let out = stdout(&o);
    assert!(out.starts_with("# resolved config: gradcheck\n"), "{out}");
    assert!(out.contains("frames = 3"));
    assert!(out.contains("eps = 0.00001"), "{out}");
}
