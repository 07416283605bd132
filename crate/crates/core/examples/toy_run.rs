//! Trains one regime on the synthetic benchmark and prints zero-shot scores.
//! Usage: toy_run [key=value overrides...]

use std::time::Instant;

use promptkp_core::corpus::split_dataset;
use promptkp_core::harness::{evaluate, train, EvalConfig, KeypointSplit, RunConfig};
use promptkp_core::llm::Gateway;
use promptkp_core::model::EvalMode;
use promptkp_core::synth::{generate, mock_table, BenchmarkConfig};

fn main() -> promptkp_core::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    let (ds, bank) = generate(&BenchmarkConfig::default())?;
    let (tr, _, te) = split_dataset(&ds, &cfg.data.split)?;
    let gw = Gateway::mock(mock_table());
    let t0 = Instant::now();
    let out = train(&cfg, &tr, &bank, &gw)?;
    let secs = t0.elapsed().as_secs_f64();
    let h = &out.history;
    let win = |a: usize, b: usize| h[a..b].iter().map(|r| r.l_kp).sum::<f64>() / (b - a) as f64;
    let n = h.len();
    println!(
        "steps {n} in {secs:.1}s; heatmap loss first50 {:.5} last50 {:.5}",
        win(0, 50.min(n)),
        win(n.saturating_sub(50), n)
    );
    for (mode, split) in [
        (EvalMode::ZeroShot, KeypointSplit::Novel),
        (EvalMode::ZeroShot, KeypointSplit::Base),
        (EvalMode::KShot, KeypointSplit::Base),
        (EvalMode::KShot, KeypointSplit::Novel),
    ] {
        let ec = EvalConfig {
            episodes: 200,
            mode,
            split,
            ..cfg.eval.clone()
        };
        let r = evaluate(&out.model, &te, &bank, &ec)?;
        println!("{mode:?} {split:?}: {:.2}", r.pck);
    }
    Ok(())
}
