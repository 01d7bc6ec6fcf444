use std::path::Path;
use std::process::{Command, Output};

fn plugd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plugd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = plugd(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "d_model = 16\nn_heads = 2\nd_ff = 32\nn_enc_layers = 2\nn_dec_layers = 2\nn_plug = 1\nmax_len = 128\n";

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = d.join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let data = d.join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--docs",
        "10",
        "--pairs",
        "2",
        "--distractors",
        "1",
    ]);
    let corpus = data.join("corpus.jsonl");

    let pre = d.join("pre");
    ok(&[
        "pretrain",
        "--config",
        p(&conf),
        "--corpus",
        p(&corpus),
        "--out",
        p(&pre),
        "--steps",
        "3",
    ]);
    let ckpt = pre.join("model.ckpt");
    let vocab = pre.join("vocab.txt");
    let run = std::fs::read_to_string(pre.join("run.conf")).unwrap();
    assert!(
        run.contains("seed = 42") && run.contains("steps = 3") && run.contains("d_model = 16"),
        "{run}"
    );

    let (e1, e2) = (d.join("enc1"), d.join("enc2"));
    for e in [&e1, &e2] {
        ok(&[
            "encode",
            "--checkpoint",
            p(&ckpt),
            "--vocab",
            p(&vocab),
            "--corpus",
            p(&corpus),
            "--out",
            p(e),
        ]);
    }
    let store = e1.join("plugins.store");
    let bytes = std::fs::read(&store).unwrap();
    assert_eq!(bytes, std::fs::read(e2.join("plugins.store")).unwrap());

    let ft = d.join("ft");
    let train = data.join("qa_train.jsonl");
    ok(&[
        "finetune",
        "--checkpoint",
        p(&ckpt),
        "--vocab",
        p(&vocab),
        "--train",
        p(&train),
        "--store",
        p(&store),
        "--out",
        p(&ft),
        "--mode",
        "pet",
        "--plugging",
        "during",
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--adapter-rank",
        "4",
    ]);
    assert_eq!(bytes, std::fs::read(&store).unwrap());
    let tuned = ft.join("model.ckpt");

    let ev = d.join("ev");
    let test = data.join("qa_test.jsonl");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        p(&tuned),
        "--vocab",
        p(&vocab),
        "--data",
        p(&test),
        "--store",
        p(&store),
        "--plug-at-inference",
        "--out",
        p(&ev),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["exact_match"].as_f64().is_some());
    assert_eq!(metrics["mode"], "plugged");
    assert!(stdout.contains("exact_match"));

    ok(&[
        "infer",
        "--checkpoint",
        p(&tuned),
        "--vocab",
        p(&vocab),
        "--query",
        "what is the code of k1 ?",
        "--max-new",
        "3",
    ]);
    ok(&[
        "infer",
        "--checkpoint",
        p(&tuned),
        "--vocab",
        p(&vocab),
        "--query",
        "what is the code of k1 ?",
        "--store",
        p(&store),
        "--doc-id",
        "doc0000",
        "--max-new",
        "3",
    ]);

    // a store built from a different backbone is rejected with code 2
    let other = d.join("other");
    ok(&[
        "pretrain",
        "--config",
        p(&conf),
        "--corpus",
        p(&corpus),
        "--out",
        p(&other),
        "--steps",
        "1",
        "--seed",
        "7",
    ]);
    let out = plugd(&[
        "finetune",
        "--checkpoint",
        p(&other.join("model.ckpt")),
        "--vocab",
        p(&vocab),
        "--train",
        p(&train),
        "--store",
        p(&store),
        "--out",
        p(&d.join("bad")),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(!d.join("bad").join("model.ckpt").exists());
}

#[test]
fn missing_file_exits_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = plugd(&[
        "encode",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--vocab",
        "/nonexistent/v.txt",
        "--corpus",
        "/nonexistent/c",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        String::from_utf8(out.stderr)
            .unwrap()
            .trim()
            .lines()
            .count(),
        1
    );
    assert!(!dir.path().join("plugins.store").exists());
}

#[test]
fn missing_required_flag_fails() {
    let out = plugd(&["encode", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reference_config() {
    let out = ok(&["bench", "--paper-config"]);
    let json_end = out.find("\n}\n").unwrap() + 2;
    let report: serde_json::Value = serde_json::from_str(&out[..json_end]).unwrap();
    let ratio = report["ratio"].as_f64().unwrap();
    assert!((2.6..=3.9).contains(&ratio), "{ratio}");
    assert!(report["savings"].as_f64().unwrap() >= 0.6);
    assert!(out.contains("total"));

    let csv = ok(&["bench", "--paper-config", "--sweep"]);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "l_q,l_d,l_ans,coupled_flops,plugged_flops,ratio,savings"
    );
    assert_eq!(lines.count(), 3 * 5 * 2);
}

#[test]
fn bench_overrides_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "bench",
        "--l-d",
        "2048",
        "--validate",
        "--out",
        p(dir.path()),
    ]);
    assert!(out.contains("deviation 0.000000"));
    let saved = std::fs::read_to_string(dir.path().join("run.conf")).unwrap();
    assert!(saved.contains("l_d = 2048") && saved.contains("seed = 42"));
    assert!(dir.path().join("cost.json").exists() && dir.path().join("engine_check.json").exists());
}

#[test]
fn help_lists_subcommands() {
    let out = ok(&["--help"]);
    for s in ["pretrain", "encode", "finetune", "eval", "infer", "bench"] {
        assert!(out.contains(s));
    }
}
