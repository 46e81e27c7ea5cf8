//! Trains a model and samples one speaker with classifier-free guidance at
//! several scales, scoring the samples with the exact emotion oracle.
//!
//! `cargo run --release --example cfg_sampling [steps]`

use emoguide::config::ExperimentConfig;
use emoguide::diffusion::GuidanceMode;
use emoguide::eval::{EvalConfig, SpeakerGroup};
use emoguide::pipeline::Experiment;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(5000);
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = steps;
    cfg.train.w_dat = 0.0;
    let ex = Experiment::new(cfg)?;
    let (model, out) = ex.train(None)?;
    let bank = ex.bank()?;
    let eval = EvalConfig {
        n_samples: 100,
        n_seeds: 1,
        steps: 50,
        ..Default::default()
    };
    let ev = ex.evaluator(&model, &out.store, None, &bank, eval);
    for gamma in [0.0, 0.5, 1.25, 1.75, 3.0] {
        let c = ev.cell(GuidanceMode::ClassifierFree, gamma, SpeakerGroup::Seen, 0)?;
        println!(
            "gamma {gamma:<5} oracle ECA {:5.1}%  content error {:.3}",
            c.eca, c.content_error
        );
    }
    Ok(())
}
