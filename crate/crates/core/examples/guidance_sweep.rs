//! Trains a model (and the noisy classifier) and sweeps the guidance scale,
//! printing the CSV written by the `sweep` subcommand.
//!
//! `cargo run --release --example guidance_sweep [steps] [cfg|cg]`

use emoguide::config::ExperimentConfig;
use emoguide::diffusion::GuidanceMode;
use emoguide::eval::{spearman, sweep_csv, EvalConfig, SpeakerGroup};
use emoguide::pipeline::Experiment;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let mode = args
        .next()
        .and_then(|m| GuidanceMode::parse(&m))
        .unwrap_or(GuidanceMode::ClassifierFree);
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = steps;
    cfg.train.w_dat = 0.0;
    let ex = Experiment::new(cfg)?;
    let (model, out) = ex.train(None)?;
    let clf = match mode {
        GuidanceMode::Classifier => Some(ex.train_classifier(&model, &out.store)?),
        _ => None,
    };
    let bank = ex.bank()?;
    let eval = EvalConfig {
        n_samples: 100,
        steps: 50,
        ..Default::default()
    };
    let ev = ex.evaluator(
        &model,
        &out.store,
        clf.as_ref().map(|(c, s, _)| (c, s)),
        &bank,
        eval,
    );
    let gammas: Vec<f64> = match mode {
        GuidanceMode::Classifier => vec![0.0, 10.0, 25.0, 50.0, 100.0],
        _ => vec![0.0, 0.5, 1.0, 1.5, 2.0],
    };
    let rows = ev.guidance_sweep(&gammas, mode, SpeakerGroup::Seen, 0)?;
    print!("{}", sweep_csv(&rows));
    let eca: Vec<f64> = rows.iter().map(|r| r.eca).collect();
    let ce: Vec<f64> = rows.iter().map(|r| r.content_error).collect();
    println!("spearman(gamma, eca) = {:.2}", spearman(&gammas, &eca));
    println!(
        "spearman(gamma, content_error) = {:.2}",
        spearman(&gammas, &ce)
    );
    Ok(())
}
