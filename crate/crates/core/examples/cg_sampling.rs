//! Classifier guidance with exact ingredients: the analytic unconditional
//! score of one speaker plus the analytic emotion posterior. At scale 1 the
//! guided sampler targets the emotion-conditional distribution; larger
//! scales sharpen it.
//!
//! `cargo run --release --example cg_sampling`

use emoguide::diffusion::{sample_reverse, CgScore, NoiseSchedule, SamplerOptions};
use emoguide::eval::{eca_oracle, EvalSample};
use emoguide::synthworld::{
    analytic_score, make_world, EmotionPrior, WorldConfig, WorldPosterior, NEUTRAL,
};

fn main() -> anyhow::Result<()> {
    let world = make_world(&WorldConfig::default(), 0)?;
    let schedule = NoiseSchedule::default();
    let opts = SamplerOptions {
        steps: 200,
        stochastic: true,
    };
    let (speaker, target, n) = (2, 3, 200);
    let tokens = vec![3, 1, 4, 1, 5];
    let mu = world.mean_frames(speaker, NEUTRAL, &tokens)?;
    for gamma in [0.0, 1.0, 2.0, 5.0] {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut uncond = |y: &emoguide::autodiff::FrameMatrix, t: f64| {
                analytic_score(
                    &world,
                    &[speaker],
                    EmotionPrior::All,
                    &tokens,
                    &mu,
                    y,
                    t,
                    &schedule,
                )
            };
            let mut post = WorldPosterior {
                world: &world,
                speakers: vec![speaker],
                tokens: vec![tokens.clone()],
                mu: mu.clone(),
                schedule,
            };
            let mut score = CgScore::new(
                &mut uncond,
                &mut post,
                vec![tokens.len()],
                vec![target],
                gamma,
            );
            let y = sample_reverse(
                &mut score,
                &mu,
                &[tokens.len()],
                &[i as u64],
                &schedule,
                &opts,
                None,
            )?;
            samples.push(EvalSample {
                frames: y,
                speaker,
                target,
                tokens: tokens.clone(),
            });
        }
        println!(
            "gamma {gamma:<4} oracle ECA for emotion {target}: {:5.1}%",
            eca_oracle(&world, &samples)?
        );
    }
    Ok(())
}
