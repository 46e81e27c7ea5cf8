//! Builds the default world, prints its structure and checks the exact
//! score and emotion posterior against numeric differentiation.
//!
//! `cargo run --release --example world_oracles`

use emoguide::diffusion::{perturb, NoiseSchedule};
use emoguide::synthworld::{
    analytic_emotion_posterior, make_world, sample_utterance, WorldConfig, NEUTRAL,
};
use emoguide::verify::{check_bayes_identity, check_score_oracle};

fn main() -> anyhow::Result<()> {
    let world = make_world(&WorldConfig::default(), 0)?;
    let schedule = NoiseSchedule::default();
    println!(
        "{}",
        world
            .to_text()
            .lines()
            .take(12)
            .collect::<Vec<_>>()
            .join("\n")
    );
    println!("... world hash {}", world.hash());

    // The posterior over emotions sharpens as noise is removed.
    let tokens = [1, 4, 2, 7, 3, 0];
    let u = sample_utterance(&world, 3, 2, &tokens, 11)?;
    let mu = world.mean_frames(3, NEUTRAL, &tokens)?;
    for t in [1.0, 0.5, 0.2, 0.05] {
        let (y, _) = perturb(&u.frames, &mu, t, &schedule, 5)?;
        let p = analytic_emotion_posterior(&world, 3, &tokens, &mu, &y, t, &schedule)?;
        let shown: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "t = {t:<4} p(e | Y_t) = [{}]  (true emotion 2)",
            shown.join(", ")
        );
    }

    for check in [
        check_score_oracle(&world, &schedule, 0)?,
        check_bayes_identity(&world, &schedule, 0)?,
    ] {
        println!("{}", check.line());
    }
    Ok(())
}
