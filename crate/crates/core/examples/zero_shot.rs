//! Zero-shot speaker adaptation: unseen speakers are conditioned only on a
//! Neutral reference utterance, with no parameter updates.
//!
//! `cargo run --release --example zero_shot [steps]`

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
    let ex = Experiment::new(cfg)?;
    println!(
        "seen speakers {:?}, unseen {:?}",
        ex.split.seen, ex.split.unseen
    );
    let (model, out) = ex.train(None)?;
    let bank = ex.bank()?;
    let eval = EvalConfig {
        n_samples: 100,
        n_seeds: 1,
        steps: 50,
        ..Default::default()
    };
    let ev = ex.evaluator(&model, &out.store, None, &bank, eval);
    for group in [SpeakerGroup::Seen, SpeakerGroup::Unseen] {
        let c = ev.cell(GuidanceMode::None, 0.0, group, 0)?;
        println!(
            "{:<6} nearest-speaker {:5.1}%  oracle ECA {:5.1}%  speaker similarity {:.3}",
            group.name(),
            c.nearest_speaker,
            c.eca,
            c.secs_mean_frame
        );
    }
    Ok(())
}
