use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn brst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brst"))
        .args(args)
        .env("BRST_THREADS", "1")
        .output()
        .expect("spawn brst")
}

fn ok(args: &[&str]) -> Output {
    let out = brst(args);
    assert!(
        out.status.success(),
        "brst {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_corpus(dir: &Path, n: usize) -> std::path::PathBuf {
    let corpus = dir.join("corpus");
    ok(&["gen-corpus", "--num-utterances", &n.to_string(), "--out", s(&corpus)]);
    corpus.join("manifest.tsv")
}

#[test]
fn invalid_preset_lists_valid_ones() {
    let out = brst(&["count-params", "--preset", "BRX"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("BRA-E-S18") && err.contains("toy-BRA-ED"), "{err}");
}

#[test]
fn missing_manifest_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = brst(&[
        "train", "--preset", "toy-BR", "--manifest", s(&dir.path().join("absent.tsv")), "--out", s(&run),
    ]);
    assert!(!out.status.success());
    assert!(!run.exists());
}

#[test]
fn count_params_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    ok(&["count-params", "--preset", "BRA-E", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("component,params,baseline_params,ratio_vs_baseline"));
    let adapters = text.lines().find(|l| l.starts_with("encoder_adapters,")).unwrap();
    assert_eq!(adapters, "encoder_adapters,789504,0,");
    let total: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(total[0], "total");
    let ratio: f64 = total[3].parse().unwrap();
    assert!(ratio > 0.2 && ratio < 0.4, "{ratio}");
}

#[test]
fn empty_manifest_decodes_to_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 2);
    let run = dir.path().join("run");
    ok(&["train", "--preset", "toy-BR", "--manifest", s(&manifest), "--max-steps", "1", "--out", s(&run)]);
    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let hyps = dir.path().join("hyps.txt");
    let out = ok(&[
        "decode", "--checkpoint", s(&run.join("final.brst")), "--manifest", s(&empty), "--method", "cp", "--out", s(&hyps),
    ]);
    assert_eq!(fs::read_to_string(&hyps).unwrap(), "");
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn train_decode_evaluate_analyze_warm_start() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 6);
    let run = dir.path().join("run");
    ok(&[
        "train", "--preset", "toy-BR", "--manifest", s(&manifest), "--max-steps", "4", "--lambda", "0.5",
        "--grad-clip", "1.0", "--seed", "3", "--out", s(&run),
    ]);
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("lambda = 0.5") && config.contains("grad_clip = 1"), "{config}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,ctc_loss,att_loss,lr,grad_norm\n"));
    assert_eq!(metrics.lines().count(), 5);
    let ckpt = run.join("final.brst");

    for method in ["cg", "cp", "att", "att-re"] {
        let hyps = dir.path().join(format!("{method}.txt"));
        ok(&[
            "decode", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--method", method, "--beam", "3",
            "--out", s(&hyps),
        ]);
        let text = fs::read_to_string(&hyps).unwrap();
        assert_eq!(text.lines().count(), 6);
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f.len(), 3, "{line}");
            f[2].parse::<f64>().unwrap();
        }
        let cer = fs::read_to_string(dir.path().join(format!("{method}.txt.cer.csv"))).unwrap();
        assert!(cer.starts_with("utt_id,S,I,D,ref_len,cer\n"));

        let eval = dir.path().join(format!("{method}.eval.csv"));
        ok(&["evaluate", "--hyps", s(&hyps), "--manifest", s(&manifest), "--out", s(&eval)]);
        assert_eq!(fs::read_to_string(&eval).unwrap(), cer);
    }

    let warm = dir.path().join("warm/bra.brst");
    ok(&["warm-start", "--checkpoint", s(&ckpt), "--preset", "toy-BRA-E", "--out", s(&warm)]);
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("warm/bra.brst.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["fresh_adapters"], 4);
    assert!(prov["unused"].as_array().unwrap().is_empty());

    let vert = dir.path().join("vert");
    ok(&["analyze", "--checkpoint", s(&warm), "--manifest", s(&manifest), "--mode", "vertical", "--out", s(&vert)]);
    let cka = fs::read_to_string(vert.join("cka.csv")).unwrap();
    assert!(cka.starts_with("site_a,site_b,cka\n"));
    assert!(fs::read_to_string(vert.join("linearity.csv")).unwrap().starts_with("site,cka,linear\n"));
    assert!(fs::read_to_string(vert.join("cka.svg")).unwrap().contains("<svg"));

    let horiz = dir.path().join("horiz");
    let out = brst(&["analyze", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--mode", "horizontal", "--out", s(&horiz)]);
    assert!(!out.status.success());
    ok(&[
        "analyze", "--checkpoint", s(&ckpt), "--checkpoint-b", s(&warm), "--manifest", s(&manifest), "--mode",
        "horizontal", "--out", s(&horiz),
    ]);
    assert!(fs::read_to_string(horiz.join("push_away.csv")).unwrap().starts_with("site,push_away\n"));
}
