use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_layers=1\nn_heads=2\nd_model=16\nd_ff=32\nd_emb=8\nn_train=20\nn_val=4\nn_test=4\nbatch_size=8\nepochs=1\nwarmup=2\n";

fn mmfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfuse")).current_dir(dir).env("RUST_LOG", "warn").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small corpus in `c` and a one-epoch run in `r`.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.cfg"), SMALL).unwrap();
    assert_eq!(code(&mmfuse(p, &["corpus", "--config", "small.cfg", "--out", "c"])), 0);
    let o = mmfuse(p, &["train", "--config", "small.cfg", "--seed", "1", "--corpus", "c", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmfuse(dir.path(), &["corpus", "--out", "c", "--set", "bogus=1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(code(&mmfuse(dir.path(), &["train", "--corpus", "c", "--out", "r"])), 2);
    assert_eq!(code(&mmfuse(dir.path(), &["corpus", "--out", "c", "--ablation", "sideways"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = trained();
    let o = mmfuse(
        dir.path(),
        &["train", "--config", "small.cfg", "--seed", "1", "--corpus", "c", "--out", "x", "--set", "lr=1e30"],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn vocabulary_mismatch_exits_4() {
    let dir = trained();
    let p = dir.path();
    std::fs::create_dir(p.join("other")).unwrap();
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let text = std::fs::read_to_string(p.join("c").join(f)).unwrap();
        std::fs::write(p.join("other").join(f), text.replacen("\"red\"", "\"crimson\"", 1)).unwrap();
    }
    let o = mmfuse(p, &["evaluate", "--config", "small.cfg", "--corpus", "other", "--checkpoint", "r/final.ckpt"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_instance_exits_5() {
    let dir = trained();
    let o = mmfuse(
        dir.path(),
        &["generate", "nope/0", "--config", "small.cfg", "--corpus", "c", "--checkpoint", "r/final.ckpt"],
    );
    assert_eq!(code(&o), 5);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mmfuse(dir.path(), &["gradcheck"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).starts_with("gradcheck PASS"));
    let bad = mmfuse(dir.path(), &["gradcheck", "--inject-fault"]);
    assert_eq!(code(&bad), 6);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn training_is_deterministic() {
    let dir = trained();
    let p = dir.path();
    let o = mmfuse(p, &["train", "--config", "small.cfg", "--seed", "1", "--corpus", "c", "--out", "again"]);
    assert_eq!(code(&o), 0);
    for f in ["loss.tsv", "final.ckpt", "best.ckpt"] {
        assert_eq!(std::fs::read(p.join("r").join(f)).unwrap(), std::fs::read(p.join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluate_and_generate_write_reports() {
    let dir = trained();
    let p = dir.path();
    let o =
        mmfuse(p, &["evaluate", "--config", "small.cfg", "--corpus", "c", "--checkpoint", "r/best.ckpt", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(p.join("e").join("report.txt")).unwrap();
    for key in ["bleu4=", "rouge_l=", "cider=", "grounding_accuracy=", "shuffled_video_accuracy=", "chance="] {
        assert!(text.contains(key), "{key} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("e").join("report.json")).unwrap()).unwrap();
    assert!(json["metrics"]["cider"].is_number());

    let g = mmfuse(
        p,
        &["generate", "test00000/0", "--config", "small.cfg", "--corpus", "c", "--checkpoint", "r/best.ckpt"],
    );
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    assert_eq!(stdout(&g).lines().count(), 1);
}

#[test]
fn gold_references_score_perfectly() {
    let dir = trained();
    let o = mmfuse(dir.path(), &["evaluate", "--config", "small.cfg", "--corpus", "c", "--gold"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for line in ["bleu1=1.0", "bleu4=1.0", "rouge_l=1.0", "cider=10.0"] {
        assert!(out.lines().any(|l| l.starts_with(line)), "{line} not in\n{out}");
    }
}
