use std::path::Path;
use std::process::{Command, Output};

fn promptkp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptkp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(o)).expect("json output")
}

#[test]
fn help_exits_zero_everywhere() {
    assert!(promptkp(&["--help"]).status.success());
    for sub in [
        "ingest",
        "train",
        "eval",
        "interpolate-texts",
        "synth-prompts",
        "parse",
        "score-parsing",
        "plot-heatmaps",
    ] {
        let o = promptkp(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
}

#[test]
fn invalid_config_key_exits_two_and_names_it() {
    let o = promptkp(&["train", "--set", "optim.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("optim.learning_rate"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"eval": {"episodez": 3}}"#).unwrap();
    let o = promptkp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("episodez"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = promptkp(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

fn small_checkpoint(dir: &Path) -> String {
    let ck = dir.join("ck.json");
    let o = promptkp(&[
        "train",
        "--set",
        "train.steps=5",
        "--set",
        "data.synthetic_per_species=4",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(json(&o)["steps"], 5);
    ck.to_str().unwrap().to_string()
}

#[test]
fn eval_repeats_bit_identically_and_prompts_flow_through() {
    let dir = tempfile::tempdir().unwrap();
    let ck = small_checkpoint(dir.path());
    let args = [
        "eval",
        "--checkpoint",
        &ck,
        "--mode",
        "k_shot_with_text",
        "--split",
        "base",
        "--episodes",
        "40",
        "--seed",
        "3",
    ];
    let a = promptkp(&args);
    let b = promptkp(&args);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(json(&a)["episodes"], 40);

    let prompts = dir.path().join("p.jsonl");
    let parsed = dir.path().join("parsed.jsonl");
    let p = prompts.to_str().unwrap();
    json(&promptkp(&[
        "synth-prompts",
        "--set",
        "data.synthetic_per_species=4",
        "--count",
        "30",
        "--out",
        p,
    ]));
    json(&promptkp(&[
        "parse",
        "--prompts",
        p,
        "--mode",
        "fallback",
        "--out",
        parsed.to_str().unwrap(),
    ]));
    let score = json(&promptkp(&[
        "score-parsing",
        "--prompts",
        p,
        "--parsed",
        parsed.to_str().unwrap(),
    ]));
    assert_eq!(score["acc_kp"], 1.0);
    let drop = json(&promptkp(&["eval", "--checkpoint", &ck, "--prompts", p]));
    assert_eq!(drop["drop"], 0.0);

    let plots = dir.path().join("plots");
    let out = json(&promptkp(&[
        "plot-heatmaps",
        "--checkpoint",
        &ck,
        "--keypoints",
        "nose,tail",
        "--out",
        plots.to_str().unwrap(),
    ]));
    assert_eq!(out["written"].as_array().unwrap().len(), 2);
    assert!(plots.join("nose.pfm").exists());
}

#[test]
fn interpolation_uses_the_canned_backend() {
    let out = json(&promptkp(&[
        "interpolate-texts",
        "--llm-mode",
        "mock",
        "--path",
        "nose,left ear",
    ]));
    let first = &out[0]["pool"]["candidates"][0]["text"];
    assert_eq!(first, "left eye");
}

#[test]
fn replay_without_a_cache_is_a_config_error() {
    let o = promptkp(&["interpolate-texts", "--llm-mode", "replay"]);
    assert_eq!(o.status.code(), Some(2));
}
