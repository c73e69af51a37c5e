use std::path::Path;
use std::process::{Command, Output};

fn chunkattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const MODEL: &str = r#"{"n_layers": 1, "n_heads": 2, "d_head": 8, "d_model": 16,
"vocab_size": 32, "pretrain_length": 256, "seed": 5}"#;

#[test]
fn equivalence_passes_when_saturated_and_refuses_otherwise() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", MODEL);
    let base = ["equivalence", "--model-config", &model, "--chunk-size", "16", "--n", "64", "--steps", "8"];
    let ok = chunkattn(&[&base[..], &["--k", "4"]].concat());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["pass"], true);

    let refused = chunkattn(&[&base[..], &["--k", "3"]].concat());
    assert_eq!(refused.status.code(), Some(2));
    assert!(stderr(&refused).contains("not saturated"));
}

#[test]
fn corrupted_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "model.json", "{\n  \"n_layers\": 1,\n  \"n_heads\": ,\n}");
    let o = chunkattn(&["equivalence", "--model-config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_policy_is_a_config_error() {
    let o = chunkattn(&["passkey", "--policy", "best-k", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("best-k"));
}

#[test]
fn passkey_warns_on_mandatory_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = chunkattn(&["passkey", "--target", "0", "--trials", "2", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    for f in ["metrics.json", "trace.json", "heatmap.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", MODEL);
    let engine = write(dir.path(), "engine.json", r#"{"chunk_size": 8, "num_selected": 4, "policy": "random", "seed": 3}"#);
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = chunkattn(&[
                "run",
                "--model-config",
                &model,
                "--engine-config",
                &engine,
                "--n",
                "120",
                "--steps",
                "6",
                "--residency",
                "budget:64",
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            out
        })
        .collect();
    for f in ["metrics.json", "trace.json", "heatmap.csv", "tokens.json"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let counters: serde_json::Value =
        serde_json::from_slice(&std::fs::read(outs[0].join("counters.json")).unwrap()).unwrap();
    assert_eq!(counters["residency"], "budget:64");
    assert_eq!(counters["decode_steps"], 6);
}

#[test]
fn run_from_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "tokens.json", &serde_json::to_string(&(0..40u32).map(|t| t % 32).collect::<Vec<_>>()).unwrap());
    let desc = format!(
        r#"{{"model": {MODEL}, "engine": {{"chunk_size": 8, "num_selected": 3}}, "input": "tokens.json", "steps": 2}}"#
    );
    let path = write(dir.path(), "run.json", &desc);
    let out = dir.path().join("out");
    let o = chunkattn(&["run", "--descriptor", &path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tokens: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("tokens.json")).unwrap()).unwrap();
    assert_eq!(tokens["input"].as_array().unwrap().len(), 40);
    assert_eq!(tokens["generated"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_tokens_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", MODEL);
    let tokens = write(dir.path(), "tokens.json", "[1, 2, 99]");
    let out = dir.path().join("out");
    let o = chunkattn(&["run", "--model-config", &model, "--chunk-size", "8", "--k", "3", "--input", &tokens, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("99"));
}

#[test]
fn scaling_and_ablate_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", MODEL);
    let out = dir.path().join("scaling");
    let o = chunkattn(&[
        "scaling", "--model-config", &model, "--chunk-size", "16", "--k", "4", "--n", "128,512", "--steps", "4",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("scaling.json").exists());

    let out = dir.path().join("ablate");
    let o = chunkattn(&[
        "ablate", "--policy", "top-k,random,last-k,no-first", "--trials", "40", "--k-sweep", "4,8", "--l-sweep",
        "8,16", "--window", "64", "--sweep-trials", "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("no-first is degenerate"));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 2 + 2);
}
