//! End-to-end tests of the `fasda` binary: artifact determinism, the
//! degenerate-confusion equivalence, exit codes, and a full pipeline smoke.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fasda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fasda"))
        .args(args)
        .output()
        .expect("spawn fasda")
}

fn ok(args: &[&str]) -> Output {
    let out = fasda(args);
    assert!(
        out.status.success(),
        "fasda {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Shrink the model so tests run in seconds.
fn tiny_sets() -> Vec<String> {
    [
        "feature_dim=8",
        "decoder_hidden=16",
        "attention_hidden=8",
        "embed_dim=4",
        "conv1_channels=2",
        "conv2_channels=4",
        "mcd_hidden=16",
        "max_len=3",
        "batch_size=2",
        "pairs_per_group=8",
        "pretrain_steps=5",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect()
}

fn gen(dir: &Path, n: usize, seed: u64, extra: &[&str]) {
    let mut args = vec![
        "gen-data".to_string(),
        "--out".into(),
        dir.display().to_string(),
        "--n".into(),
        n.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--max-len".into(),
        "3".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
}

fn pretrain(src: &Path, out: &Path) {
    let mut args = vec![
        "train-source".to_string(),
        "--data".into(),
        src.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(tiny_sets());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_for_equal_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen(&a, 12, 7, &["--shear", "0.2", "--noise", "0.1", "--invert"]);
    gen(&b, 12, 7, &["--shear", "0.2", "--noise", "0.1", "--invert"]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn zero_gamma_adaptation_logs_match_attention_only() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    let tgt = tmp.path().join("tgt");
    gen(&src, 8, 1, &[]);
    gen(&tgt, 4, 2, &["--invert", "--domain", "dark"]);
    let base = tmp.path().join("base.ckpt");
    pretrain(&src, &base);

    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "adapt".to_string(),
            "--source".into(),
            src.display().to_string(),
            "--target".into(),
            tgt.display().to_string(),
            "--ckpt".into(),
            base.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--rounds".into(),
            "4".into(),
            "--mcd-steps".into(),
            "2".into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    let zero = tmp.path().join("zero.ckpt");
    let only = tmp.path().join("only.ckpt");
    run(&zero, &["--gamma", "0"]);
    run(&only, &["--att-only"]);

    let zero_log = fs::read(tmp.path().join("zero.ckpt.log.tsv")).unwrap();
    let only_log = fs::read(tmp.path().join("only.ckpt.log.tsv")).unwrap();
    assert!(!zero_log.is_empty());
    assert_eq!(zero_log, only_log);
}

#[test]
fn pipeline_smoke_produces_report_and_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    let tgt = tmp.path().join("tgt");
    gen(&src, 8, 3, &[]);
    gen(
        &tgt,
        4,
        4,
        &["--invert", "--noise", "0.1", "--domain", "dark"],
    );
    let base = tmp.path().join("base.ckpt");
    pretrain(&src, &base);

    let adapted = tmp.path().join("adapted.ckpt");
    ok(&[
        "adapt",
        "--source",
        &src.display().to_string(),
        "--target",
        &tgt.display().to_string(),
        "--ckpt",
        &base.display().to_string(),
        "--out",
        &adapted.display().to_string(),
        "--rounds",
        "2",
        "--mcd-steps",
        "2",
        "--feature",
        "cr+",
    ]);

    let report = tmp.path().join("report.tsv");
    let out = ok(&[
        "eval",
        "--ckpt",
        &adapted.display().to_string(),
        "--data",
        &tgt.display().to_string(),
        "--out",
        &report.display().to_string(),
        "--threads",
        "2",
    ]);
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("sequence accuracy"), "{summary}");

    let tsv = fs::read_to_string(&report).unwrap();
    assert_eq!(
        tsv.lines().count(),
        5,
        "header + one row per sample:\n{tsv}"
    );
    for p in [
        tmp.path().join("base.ckpt.config"),
        tmp.path().join("adapted.ckpt.config"),
        tmp.path().join("adapted.ckpt.log.tsv"),
        tmp.path().join("report.tsv.config"),
    ] {
        assert!(p.exists(), "missing artifact {}", p.display());
    }

    let pairs = ok(&[
        "inspect-pairs",
        "--ckpt",
        &adapted.display().to_string(),
        "--source",
        &src.display().to_string(),
        "--target",
        &tgt.display().to_string(),
    ]);
    let text = String::from_utf8(pairs.stdout).unwrap();
    assert!(text.starts_with("source\t"), "{text}");
    assert!(text.contains("counts\t"), "{text}");

    let attn_dir = tmp.path().join("attn");
    ok(&[
        "dump-attention",
        "--ckpt",
        &adapted.display().to_string(),
        "--data",
        &tgt.display().to_string(),
        "--sample",
        "1",
        "--out",
        &attn_dir.display().to_string(),
    ]);
    assert!(attn_dir.join("attention.pgm").exists());
    let tsv = fs::read_to_string(attn_dir.join("attention.tsv")).unwrap();
    assert!(tsv.lines().all(|l| l.split('\t').count() == 3));
}

#[test]
fn identical_train_runs_write_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    gen(&src, 8, 5, &[]);
    let a = tmp.path().join("a.ckpt");
    let b = tmp.path().join("b.ckpt");
    pretrain(&src, &a);
    pretrain(&src, &b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("a.ckpt.log.tsv")).unwrap(),
        fs::read(tmp.path().join("b.ckpt.log.tsv")).unwrap()
    );
}

#[test]
fn exit_codes_distinguish_usage_data_and_checkpoint_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    gen(&src, 4, 6, &[]);

    let usage = fasda(&[
        "train-source",
        "--data",
        &src.display().to_string(),
        "--out",
        &tmp.path().join("x.ckpt").display().to_string(),
        "--set",
        "not_a_key=1",
    ]);
    assert_eq!(usage.status.code(), Some(2));

    let data = fasda(&[
        "train-source",
        "--data",
        &tmp.path().join("missing").display().to_string(),
        "--out",
        &tmp.path().join("x.ckpt").display().to_string(),
    ]);
    assert_eq!(data.status.code(), Some(3));

    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let ckpt = fasda(&[
        "eval",
        "--ckpt",
        &garbage.display().to_string(),
        "--data",
        &src.display().to_string(),
        "--out",
        &tmp.path().join("r.tsv").display().to_string(),
    ]);
    assert_eq!(ckpt.status.code(), Some(4));
}
