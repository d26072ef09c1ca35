use std::fs;
use std::path::{Path, PathBuf};

use ucoh_cli::{run, CliError, RunManifest};
use ucoh_core::pairs_io::read_pairs;
use ucoh_core::permgen::check_pair;
use ucoh_core::{CoherenceModel, EvalResult, Task};

const TINY: [&str; 10] = ["--d-emb", "8", "--hidden", "4", "--q", "4", "--k", "3", "--groups", "2"];

fn ucoh(args: &[&str]) -> (Result<(), CliError>, String) {
    let mut out = Vec::new();
    let r = run(std::iter::once("ucoh").chain(args.iter().copied()), &mut out);
    (r, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (r, out) = ucoh(args);
    if let Err(e) = r {
        panic!("{args:?} failed: {e}\n{out}");
    }
    out
}

fn code(args: &[&str]) -> i32 {
    ucoh(args).0.map_or_else(|e| e.exit_code(), |_| 0)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path, docs: usize, sentences: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    for d in 0..docs {
        let text: String = (0..sentences).map(|i| format!("doc{d} line {i} word{}\n", i % 4)).collect();
        fs::write(dir.join(format!("doc{d}.txt")), text).unwrap();
    }
    dir.to_path_buf()
}

fn gen_synthetic(out: &Path, task: &str, seed: &str) {
    ok(&["gen", "--task", task, "--synthetic", "20,12,60", "--out", p(out), "--seed", seed]);
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--pairs"];
    let train = data.join("train.jsonl");
    let dev = data.join("dev.jsonl");
    args.extend([p(&train), "--dev", p(&dev), "--out", p(out), "--epochs", "2"]);
    args.extend(TINY);
    args.extend(extra);
    ok(&args);
    out.join("model.ckpt")
}

fn results(dir: &Path) -> Vec<EvalResult> {
    fs::read_to_string(dir.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn inverse_on_three_documents() {
    let t = tempfile::tempdir().unwrap();
    let c = corpus(&t.path().join("c"), 3, 4);
    let out = t.path().join("o");
    ok(&["gen", "--task", "inverse", "--corpus", p(&c), "--out", p(&out), "--test-frac", "0", "--dev-frac", "0"]);
    assert_eq!(read_pairs(out.join("train.jsonl")).unwrap().len(), 3);
    assert!(read_pairs(out.join("test.jsonl")).unwrap().is_empty());
    for f in ["vocab.txt", "stats.json", "manifest.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn short_documents_are_skipped_for_local() {
    let t = tempfile::tempdir().unwrap();
    let c = corpus(&t.path().join("c"), 3, 10);
    let out = t.path().join("o");
    let text = ok(&["gen", "--task", "local", "--windows", "1", "--corpus", p(&c), "--out", p(&out), "--test-frac", "0", "--dev-frac", "0"]);
    assert!(read_pairs(out.join("train.jsonl")).unwrap().is_empty());
    assert!(text.contains("skipped 3 document(s)"), "{text}");
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["train"]["skipped"].as_array().unwrap().len(), 3);
}

#[test]
fn synthetic_global_pairs_are_valid() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    ok(&["gen", "--task", "global", "--synthetic", "200,12,500", "--out", p(&out)]);
    let mut total = 0;
    for split in ["train", "dev", "test"] {
        let pairs = read_pairs(out.join(format!("{split}.jsonl"))).unwrap();
        for pair in &pairs {
            check_pair(pair, 3, None).unwrap();
        }
        total += pairs.len();
    }
    assert!(total > 0 && total <= 4000);
}

#[test]
fn invalid_flag_combinations_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let c = corpus(&t.path().join("c"), 2, 3);
    let out = t.path().join("o");
    let (c, out) = (p(&c), p(&out));
    assert_eq!(code(&["gen", "--task", "global", "--corpus", c, "--synthetic", "5,12,60", "--out", out]), 2);
    assert_eq!(code(&["gen", "--task", "global", "--out", out]), 2);
    assert_eq!(code(&["gen", "--task", "global", "--corpus", c, "--out", out, "--windows", "1"]), 2);
    assert_eq!(code(&["gen", "--task", "global", "--corpus", c, "--out", out, "--test-frac", "1.5"]), 2);
    assert_eq!(code(&["gen", "--task", "sideways", "--corpus", c, "--out", out]), 2);
    assert_eq!(code(&["gen", "--task", "local", "--corpus", c, "--out", out, "--windows", "0"]), 2);
    assert_eq!(code(&["gen", "--task", "global", "--synthetic", "5,8,60", "--out", out]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn bad_pair_line_is_reported() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "1");
    let path = data.join("train.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"task\":\"global\",\"oops\":1}\n");
    let line = text.lines().count();
    fs::write(&path, text).unwrap();
    let (r, _) = ucoh(&["train", "--pairs", p(&path), "--out", p(&t.path().join("m"))]);
    let err = r.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains(&format!(":{line}:")), "{err}");
}

#[test]
fn ablation_flags_select_variants() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "2");
    let full = CoherenceModel::load(train_tiny(&data, &t.path().join("full"), &[])).unwrap();
    assert!(full.config().use_global);
    assert!(full.metadata["train.config"].contains("use_lm=true"));
    let local = CoherenceModel::load(train_tiny(&data, &t.path().join("local"), &["--no-global", "--no-lm"])).unwrap();
    assert!(!local.config().use_global);
    assert!(local.metadata["train.config"].contains("use_lm=false"));
    assert_eq!(local.provenance, Some(Task::Global));
}

#[test]
fn training_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "3");
    let a = train_tiny(&data, &t.path().join("a"), &["--seed", "7"]);
    let b = train_tiny(&data, &t.path().join("b"), &["--seed", "7"]);
    let c = train_tiny(&data, &t.path().join("c"), &["--seed", "8"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let m = RunManifest::read(t.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!((m.command.as_str(), m.seed), ("train", 7));
    assert_eq!(m.config["epochs"], "2");
    assert_eq!(fs::read_to_string(t.path().join("a/train_report.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "4");
    let cfg = t.path().join("cfg.txt");
    fs::write(&cfg, "# tiny run\nepochs = 3\nlr=0.01\ntau=0.5\n").unwrap();
    train_tiny(&data, &t.path().join("m"), &["--config", p(&cfg), "--set", "tau=0.25"]);
    let m = RunManifest::read(t.path().join("m/manifest.jsonl")).unwrap();
    // --epochs 2 from the helper wins over the file.
    assert_eq!((m.config["epochs"].as_str(), m.config["lr"].as_str(), m.config["tau"].as_str()), ("2", "0.01", "0.25"));

    fs::write(&cfg, "epochs=3\nwidth=4\n").unwrap();
    let (r, _) = ucoh(&["train", "--pairs", p(&data.join("train.jsonl")), "--config", p(&cfg), "--out", p(&t.path().join("x"))]);
    let err = r.unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("line 2"), "{err}");
    assert_eq!(code(&["train", "--pairs", p(&data.join("train.jsonl")), "--out", "x", "--batch-size", "7"]), 2);
}

#[test]
fn multiple_seeds() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "5");
    let out = t.path().join("m");
    train_tiny(&data, &out, &["--seeds", "1,2"]);
    for s in [1, 2] {
        assert!(out.join(format!("seed-{s}/model.ckpt")).exists());
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("multi_seed.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["best_dev_accuracy"]["values"].as_array().unwrap().len(), 2);
    assert_eq!(code(&["train", "--pairs", p(&data.join("train.jsonl")), "--out", p(&out), "--seeds", "1"]), 2);
}

#[test]
fn evaluation_and_transfer() {
    let t = tempfile::tempdir().unwrap();
    let (g, i) = (t.path().join("g"), t.path().join("i"));
    gen_synthetic(&g, "global", "6");
    gen_synthetic(&i, "inverse", "6");
    let ckpt = train_tiny(&g, &t.path().join("m"), &["--lr", "0.01", "--epochs", "4"]);

    ok(&["eval", "--ckpt", p(&ckpt), "--pairs", p(&g.join("train.jsonl"))]);
    let r = results(&t.path().join("m/eval-train"));
    assert_eq!(r.len(), 1);
    assert!(r[0].accuracy >= 0.9, "{}", r[0].accuracy);

    let out = t.path().join("transfer");
    ok(&["eval", "--ckpt", p(&ckpt), "--pairs", p(&i.join("test.jsonl")), "--transfer", "--out", p(&out)]);
    let r = results(&out);
    assert_eq!((r[0].task, r[0].provenance), (Some(Task::Inverse), Some(Task::Global)));
    assert!(r[0].warning.is_none());
    assert_eq!(RunManifest::read(out.join("manifest.jsonl")).unwrap().command, "eval");
    // Training outputs keep their own manifest.
    assert_eq!(RunManifest::read(t.path().join("m/manifest.jsonl")).unwrap().command, "train");
}

#[test]
fn local_results_are_grouped_by_window_count() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen", "--task", "local", "--synthetic", "10,12,60", "--out", p(&data), "--windows", "1,2,3", "--max-neg", "4"]);
    let ckpt = train_tiny(&data, &t.path().join("m"), &["--epochs", "1"]);
    let text = ok(&["eval", "--ckpt", p(&ckpt), "--pairs", p(&data.join("test.jsonl"))]);
    let labels: Vec<String> = results(&t.path().join("m/eval-test")).into_iter().map(|r| r.dataset).collect();
    assert_eq!(labels, ["w=1", "w=2", "w=3", "test"]);
    assert!(text.contains("difficulty trend"));
}

#[test]
fn zero_checkpoint_scores_zero() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "7");
    let ckpt = train_tiny(&data, &t.path().join("m"), &["--epochs", "1"]);
    let mut model = CoherenceModel::load(&ckpt).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).data_mut().fill(0.0);
    }
    let zero = t.path().join("zero.ckpt");
    model.save(&zero).unwrap();
    ok(&["eval", "--ckpt", p(&zero), "--pairs", p(&data.join("test.jsonl")), "--out", p(&t.path().join("z"))]);
    let r = results(&t.path().join("z"));
    assert_eq!(r[0].accuracy, 0.0);
    assert_eq!(r[0].ties, r[0].pairs);
}

#[test]
fn vocabulary_mismatch_is_refused() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen_synthetic(&a, "global", "8");
    ok(&["gen", "--task", "global", "--synthetic", "20,12,90", "--out", p(&b), "--seed", "9"]);
    let ckpt = train_tiny(&a, &t.path().join("m"), &["--epochs", "1"]);
    let (r, _) = ucoh(&["eval", "--ckpt", p(&ckpt), "--pairs", p(&b.join("test.jsonl"))]);
    let err = r.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("vocabulary mismatch"), "{err}");
}

#[test]
fn scoring_documents() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen_synthetic(&data, "global", "10");
    let ckpt = train_tiny(&data, &t.path().join("m"), &["--epochs", "1"]);
    let doc = t.path().join("doc.txt");
    fs::write(&doc, "c0 t1 w2 c1\nc1 t1 w7 c2\n\nc2 t1 w3 c3\nc3 t1 unseen c4\n").unwrap();
    let first = ok(&["score", "--ckpt", p(&ckpt), p(&doc)]);
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("y_4\t") && lines[4].starts_with("total\t"));
    let parse = |l: &str| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap();
    let sum: f64 = lines[..4].iter().map(|l| parse(l)).sum();
    assert!((sum - parse(lines[4])).abs() < 1e-12);
    assert_eq!(first, ok(&["score", "--ckpt", p(&ckpt), p(&doc)]));

    let empty = t.path().join("empty.txt");
    fs::write(&empty, "\n  \n").unwrap();
    assert_eq!(code(&["score", "--ckpt", p(&ckpt), p(&empty)]), 3);
    assert_eq!(code(&["score", "--ckpt", p(&ckpt), p(&t.path().join("missing.txt"))]), 3);
}

#[test]
fn verify_command() {
    let out = ok(&["verify"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7);
    match ucoh(&["verify", "--corrupt-softmax"]) {
        (Err(CliError::Verify(failed)), out) => {
            assert_eq!(failed, ["kernel_normalization"]);
            assert!(out.contains("FAIL kernel_normalization"));
        }
        other => panic!("{other:?}"),
    }
    match ucoh(&["verify", "--reduced-precision"]).0 {
        Err(e @ CliError::Verify(_)) => {
            assert_eq!(e.exit_code(), 4);
            assert!(e.to_string().contains("gradient"));
        }
        other => panic!("{other:?}"),
    }
}
