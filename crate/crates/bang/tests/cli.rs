//! End-to-end checks of the binary: flag precedence, directory locking,
//! error exit codes, and the render subcommand.

use std::path::Path;
use std::process::Command;

fn bang() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bang"));
    c.env("BANG_LOG", "quiet");
    c
}

fn write_corpus(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("corpus.txt");
    let line: String = (0..64).map(|i| format!("t{} ", i % 18)).collect();
    std::fs::write(&p, format!("{line}\n{line}\n")).unwrap();
    p
}

#[test]
fn flag_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"enc_layers":1,"dec_layers":1,"d_model":32,"n_heads":2,"d_ffn":64,
            "vocab_size":64,"max_positions":128,"n_streams":4,"rel_buckets":32,
            "rel_max_distance":64,"dropout":0.0,"seed":1}, "max_steps": 999}"#,
    )
    .unwrap();
    let corpus = write_corpus(tmp.path());
    let ck = tmp.path().join("ck");
    // flag wins over the file's max_steps
    let out = bang()
        .args([
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint-dir",
            ck.to_str().unwrap(),
            "--max-steps",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 2, "expected exactly 2 step logs: {lines:?}");
    // the saved run config reflects the override
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ck.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(saved["max_steps"], 2);
    assert_eq!(saved["model"]["d_model"], 32);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"max_stepz": 5}"#).unwrap();
    let out = bang()
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_stepz"));
}

#[test]
fn lock_file_blocks_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck");
    std::fs::create_dir_all(&ck).unwrap();
    std::fs::write(ck.join("LOCK"), "1\n").unwrap();
    let corpus = write_corpus(tmp.path());
    let out = bang()
        .args([
            "pretrain",
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint-dir",
            ck.to_str().unwrap(),
            "--max-steps",
            "1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn lock_is_released_after_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck");
    let corpus = write_corpus(tmp.path());
    for _ in 0..2 {
        let out = bang()
            .args([
                "pretrain",
                "--corpus",
                corpus.to_str().unwrap(),
                "--checkpoint-dir",
                ck.to_str().unwrap(),
                "--max-steps",
                "1",
                "--d-model",
                "32",
                "--n-heads",
                "2",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!ck.join("LOCK").exists());
}

#[test]
fn eval_empty_corpus_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = bang()
        .args([
            "eval",
            "--hyp",
            empty.to_str().unwrap(),
            "--ref",
            empty.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty corpus"));
}

#[test]
fn mask_render_writes_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let svg = tmp.path().join("mask.svg");
    let out = bang()
        .args([
            "mask-render",
            "--target-len",
            "4",
            "--streams",
            "4",
            "--svg",
            svg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let body = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(body.matches("<rect ").count(), 20 * 20);
}

#[test]
fn mask_render_text_matches_library() {
    let out = bang()
        .args(["mask-render", "--target-len", "3", "--streams", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let layout = bang::masking::StreamLayout::new(3, 2).unwrap();
    let want = bang::masking::render_mask_text(&layout).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), want);
}

#[test]
fn overlong_decode_line_is_skipped_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let ck = tmp.path().join("ck");
    let out = bang()
        .args([
            "pretrain",
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint-dir",
            ck.to_str().unwrap(),
            "--max-steps",
            "1",
            "--d-model",
            "32",
            "--n-heads",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let input = tmp.path().join("in.txt");
    // first line longer than the model's position table (128)
    let long: String = (0..200).map(|i| format!("t{} ", i % 18)).collect();
    std::fs::write(&input, format!("{long}\nt1 t2\n")).unwrap();
    let out = bang()
        .args([
            "decode",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--decode-mode",
            "nar",
            "--max-len",
            "4",
        ])
        .env("BANG_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1, "only the short line decodes");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
