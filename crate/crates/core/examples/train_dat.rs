//! Trains the joint model with and without domain adversarial training and
//! compares how much emotion a post-hoc probe recovers from style vectors.
//!
//! `cargo run --release --example train_dat [steps]`

use emoguide::config::ExperimentConfig;
use emoguide::eval::probe_disentanglement;
use emoguide::pipeline::Experiment;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(5000);
    for (name, w_dat) in [("with DAT", 0.5), ("without DAT", 0.0)] {
        let mut cfg = ExperimentConfig::default();
        cfg.train.steps = steps;
        cfg.train.w_dat = w_dat;
        let ex = Experiment::new(cfg)?;
        let (model, out) = ex.train(None)?;
        let last = &out.trace[out.trace.len().saturating_sub(100)..];
        let dsm = last.iter().map(|r| r.dsm).sum::<f64>() / last.len() as f64;
        let styles = ex.style_set(&model, &out.store, 400, 1)?;
        let acc = probe_disentanglement(&styles.vectors, &styles.emotions, ex.world.emotions(), 0)?;
        println!(
            "{name:<12} steps {steps}  dsm loss {dsm:.3}  emotion probe {acc:.1}% (chance 25%)"
        );
    }
    Ok(())
}
