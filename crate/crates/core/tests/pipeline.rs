//! End-to-end training and evaluation on a reduced synthetic benchmark.

use std::sync::OnceLock;

use promptkp_core::corpus::split_dataset;
use promptkp_core::corpus::Dataset;
use promptkp_core::harness::{evaluate, EvalConfig, KeypointSplit, RunConfig, Trainer};
use promptkp_core::llm::Gateway;
use promptkp_core::model::{EvalMode, Model};
use promptkp_core::raster::ImageBank;
use promptkp_core::synth::{generate, mock_table, BenchmarkConfig};

struct Fixture {
    train: Dataset,
    test: Dataset,
    bank: ImageBank,
    cfg: RunConfig,
    model: Model,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = RunConfig::default()
            .with_overrides(&["optim.lr_head=0.001", "train.steps=250", "train.seed=5"])
            .unwrap();
        let (ds, bank) = generate(&BenchmarkConfig {
            per_species: 12,
            ..Default::default()
        })
        .unwrap();
        let (train, _, test) = split_dataset(&ds, &cfg.data.split).unwrap();
        let gw = Gateway::mock(mock_table());
        let model = Model::new(cfg.model.clone()).unwrap();
        let model = Trainer::new(cfg.clone(), model, &train, &bank, &gw)
            .unwrap()
            .run()
            .unwrap()
            .model;
        Fixture {
            train,
            test,
            bank,
            cfg,
            model,
        }
    })
}

fn pck(f: &Fixture, mode: EvalMode, split: KeypointSplit, seed: u64) -> f64 {
    let ec = EvalConfig {
        episodes: 150,
        mode,
        split,
        seed,
        ..f.cfg.eval.clone()
    };
    evaluate(&f.model, &f.test, &f.bank, &ec).unwrap().pck
}

#[test]
fn fused_prompts_never_fall_far_below_either_modality() {
    let f = fixture();
    for seed in 0..5 {
        let v = pck(f, EvalMode::KShot, KeypointSplit::All, seed);
        let t = pck(f, EvalMode::ZeroShot, KeypointSplit::All, seed);
        let both = pck(f, EvalMode::KShotWithText, KeypointSplit::All, seed);
        assert!(
            both >= v.min(t) - 2.0,
            "seed {seed}: fused {both} visual {v} text {t}"
        );
    }
}

#[test]
fn training_beats_an_untrained_model() {
    let f = fixture();
    let fresh = Model::new(f.cfg.model.clone()).unwrap();
    let ec = EvalConfig {
        episodes: 150,
        split: KeypointSplit::Base,
        ..f.cfg.eval.clone()
    };
    let before = evaluate(&fresh, &f.test, &f.bank, &ec).unwrap().pck;
    let after = evaluate(&f.model, &f.test, &f.bank, &ec).unwrap().pck;
    assert!(after > before + 30.0, "before {before} after {after}");
}

#[test]
fn fixed_episode_loss_falls_window_by_window() {
    let f = fixture();
    let cfg = f
        .cfg
        .clone()
        .with_overrides(&[
            "train.fixed_episode=true",
            "train.use_aux_kp=false",
            "train.use_aux_text=false",
            "train.steps=500",
        ])
        .unwrap();
    let gw = Gateway::mock(mock_table());
    let model = Model::new(cfg.model.clone()).unwrap();
    let out = Trainer::new(cfg, model, &f.train, &f.bank, &gw)
        .unwrap()
        .run()
        .unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
    let initial = losses[0];
    let windows: Vec<f64> = losses
        .chunks(100)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mut reached = false;
    for w in windows.windows(2) {
        if w[0] < 0.1 * initial {
            reached = true;
            break;
        }
        assert!(w[1] < w[0], "window means {windows:?}");
    }
    let last = *losses.last().unwrap();
    assert!(
        reached || last < 0.1 * initial,
        "final {last} initial {initial}"
    );
}
