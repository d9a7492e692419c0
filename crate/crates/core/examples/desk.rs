//! Desk-scale 4-2 comparison of CRISP against its baselines and ablations.
//!
//! cargo run --release -p crisp --example desk -- [seeds] [first-seed]
//!
//! Training settings come from the default experiment config; `ITERS`, `LR`,
//! `BATCH`, `CLIP`, `PSCALE`, `LISC`, `LIC` override them and `ONLY` (comma list)
//! selects configurations.

use std::time::Instant;

use crisp::config::ExperimentConfig;
use crisp::continual_engine::{run_protocol, InitStrategy, Regime, RunOptions};
use crisp::synthbench::generate_dataset;

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok().and_then(|s| s.parse().ok())
}

fn main() -> crisp::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let first: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let only: Vec<String> = std::env::var("ONLY")
        .map(|s| s.split(',').map(String::from).collect())
        .unwrap_or_default();
    // (name, regime, arsp, isc, pi, ic)
    let combos = [
        ("finetune", Regime::Finetune, false, false, false, false),
        ("none", Regime::PromptTuning, false, false, false, false),
        ("PI", Regime::PromptTuning, false, false, true, false),
        ("IC", Regime::PromptTuning, false, false, false, true),
        ("ISC", Regime::PromptTuning, false, true, false, false),
        ("ARSP", Regime::PromptTuning, true, false, false, false),
        ("ARSP+PI+IC", Regime::PromptTuning, true, false, true, true),
        ("ARSP+ISC", Regime::PromptTuning, true, true, false, false),
        ("ARSP+ISC+PI", Regime::PromptTuning, true, true, true, false),
        ("crisp", Regime::PromptTuning, true, true, true, true),
    ];
    for seed in first..first + seeds {
        let mut base = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        if let Some(v) = env("ITERS") {
            base.train.iterations_per_step = v;
        }
        if let Some(v) = env("LR") {
            base.train.learning_rate = v;
        }
        if let Some(v) = env("BATCH") {
            base.train.batch_size = v;
        }
        if let Some(v) = env("CLIP") {
            base.train.grad_clip = v;
        }
        if let Some(v) = env("PSCALE") {
            base.train.prompt_scale = v;
        }
        if let Some(v) = env("LISC") {
            base.train.lambda_isc = v;
        }
        if let Some(v) = env("LIC") {
            base.train.lambda_ic = v;
        }
        let protocol = base.protocol()?;
        let datasets = (0..protocol.steps)
            .map(|t| generate_dataset(&base.generator_config(&protocol, t), &protocol.class_sets[t]))
            .collect::<crisp::Result<Vec<_>>>()?;
        for (name, regime, arsp, isc, pi, ic) in combos {
            if !only.is_empty() && !only.iter().any(|o| o == name) {
                continue;
            }
            let mut config = base.clone();
            config.train.regime = regime;
            config.ablation.use_arsp = arsp;
            config.ablation.use_isc = isc;
            config.ablation.use_ic = ic;
            config.ablation.init_strategy = if pi {
                InitStrategy::Pca
            } else {
                InitStrategy::ReplicateAverage
            };
            let start = Instant::now();
            let run = run_protocol(
                &protocol,
                &datasets,
                &config.train_config(),
                RunOptions::default(),
                |_, _, _| Ok(()),
            )?;
            let steps: Vec<String> = run.report.steps.iter().map(|s| format!("{:.3}", s.map)).collect();
            println!(
                "seed {seed} {name:12} mAP/step [{}] FR {:.4} ({:.1}s)",
                steps.join(" "),
                run.report.fr,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
