//! Oracle self-tests: the autodiff gradcheck suite, the analytic score
//! against numeric gradients of the analytic log-density, and the Bayes
//! identity linking conditional scores to the emotion posterior gradient.

use crate::autodiff::{gradcheck_suite, FrameMatrix, SUITE_OPS};
use crate::diffusion::{perturb, NoiseSchedule};
use crate::error::Result;
use crate::rng::{derive_seed, seeded};
use crate::synthworld::{
    analytic_log_density, analytic_posterior_log_grad, analytic_score, make_world,
    sample_utterance, EmotionPrior, World, WorldConfig, NEUTRAL,
};

/// Noise levels of the oracle grid.
pub const ORACLE_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];
/// Points per noise level.
pub const ORACLE_POINTS: usize = 20;

/// Outcome of one self-test: the worst observed error against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        format!(
            "{:<14} {verdict:<6} max_error={:.3e} tolerance={:.0e} cases={}",
            self.name, self.max_error, self.tolerance, self.cases
        )
    }
}

/// Gradchecks every supported op and a composed network on `instances`
/// random instances each (`epsilon` 1e-5, tolerance 1e-4 relative).
pub fn check_gradients(instances: usize, seed: u64) -> Result<Check> {
    let cases = gradcheck_suite(instances, seed, 1e-5)?;
    let max_error = cases
        .iter()
        .map(|c| c.report.max_rel_error())
        .fold(0.0, f64::max);
    Ok(Check {
        name: "gradcheck".into(),
        max_error,
        tolerance: 1e-4,
        cases: cases.len(),
    })
}

/// One grid point: a noised utterance with its speaker, script and prior mean.
struct GridPoint {
    speaker: usize,
    tokens: Vec<usize>,
    mu: FrameMatrix,
    y: FrameMatrix,
    t: f64,
}

fn oracle_grid(world: &World, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<GridPoint>> {
    use rand::Rng as _;
    let mut rng = seeded(derive_seed(seed, "oracle-grid"));
    let mut out = Vec::with_capacity(ORACLE_TIMES.len() * ORACLE_POINTS);
    for &t in &ORACLE_TIMES {
        for _ in 0..ORACLE_POINTS {
            let speaker = rng.random_range(0..world.speakers());
            let emotion = rng.random_range(0..world.emotions());
            let len = rng.random_range(2..6);
            let tokens = world.random_script(len, &mut rng);
            let u = sample_utterance(world, speaker, emotion, &tokens, rng.random())?;
            let mu = world.mean_frames(speaker, NEUTRAL, &tokens)?;
            let (y, _) = perturb(&u.frames, &mu, t, schedule, rng.random())?;
            out.push(GridPoint {
                speaker,
                tokens,
                mu,
                y,
                t,
            });
        }
    }
    Ok(out)
}

/// Relative L2 error between the analytic score of the all-speaker,
/// all-emotion mixture and central differences of its log-density.
pub fn check_score_oracle(world: &World, schedule: &NoiseSchedule, seed: u64) -> Result<Check> {
    let h = 1e-5;
    let speakers: Vec<usize> = (0..world.speakers()).collect();
    let mut worst: f64 = 0.0;
    let grid = oracle_grid(world, schedule, seed)?;
    for p in &grid {
        let logp = |y: &FrameMatrix| {
            analytic_log_density(
                world,
                &speakers,
                EmotionPrior::All,
                &p.tokens,
                &p.mu,
                y,
                p.t,
                schedule,
            )
        };
        let score = analytic_score(
            world,
            &speakers,
            EmotionPrior::All,
            &p.tokens,
            &p.mu,
            &p.y,
            p.t,
            schedule,
        )?;
        let mut y = p.y.clone();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            let orig = y.data()[i];
            y.data_mut()[i] = orig + h;
            let up = logp(&y)?;
            y.data_mut()[i] = orig - h;
            let down = logp(&y)?;
            y.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            num += (score.data()[i] - numeric).powi(2);
            den += numeric * numeric;
        }
        worst = worst.max((num / den.max(1e-300)).sqrt());
    }
    Ok(Check {
        name: "score_oracle".into(),
        max_error: worst,
        tolerance: 1e-5,
        cases: grid.len(),
    })
}

/// Max absolute deviation of `∇log p(Y|e) - ∇log p(Y)` from the analytic
/// `∇log p(e|Y)`, over every emotion at every grid point.
pub fn check_bayes_identity(world: &World, schedule: &NoiseSchedule, seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let grid = oracle_grid(world, schedule, derive_seed(seed, "bayes"))?;
    for p in &grid {
        let spk = [p.speaker];
        let marginal = analytic_score(
            world,
            &spk,
            EmotionPrior::All,
            &p.tokens,
            &p.mu,
            &p.y,
            p.t,
            schedule,
        )?;
        for e in 0..world.emotions() {
            let cond = analytic_score(
                world,
                &spk,
                EmotionPrior::One(e),
                &p.tokens,
                &p.mu,
                &p.y,
                p.t,
                schedule,
            )?;
            let post = analytic_posterior_log_grad(
                world, p.speaker, &p.tokens, &p.mu, &p.y, p.t, schedule, e,
            )?;
            for ((c, m), g) in cond.data().iter().zip(marginal.data()).zip(post.data()) {
                worst = worst.max((c - m - g).abs());
            }
        }
    }
    Ok(Check {
        name: "bayes_identity".into(),
        max_error: worst,
        tolerance: 1e-8,
        cases: grid.len(),
    })
}

/// Runs every self-test on the default world built from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let world = make_world(&WorldConfig::default(), seed)?;
    let schedule = NoiseSchedule::default();
    Ok(vec![
        check_gradients(20, seed)?,
        check_score_oracle(&world, &schedule, seed)?,
        check_bayes_identity(&world, &schedule, seed)?,
    ])
}

/// Number of ops exercised by [`check_gradients`].
pub fn gradcheck_op_count() -> usize {
    SUITE_OPS.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_default_world() {
        let checks = run_all(0).unwrap();
        assert_eq!(checks.len(), 3);
        for c in &checks {
            assert!(c.passed(), "{}", c.line());
        }
        assert_eq!(checks[0].cases, 20 * gradcheck_op_count());
        assert_eq!(checks[1].cases, ORACLE_TIMES.len() * ORACLE_POINTS);
    }

    #[test]
    fn a_failing_check_reports_failure() {
        let c = Check {
            name: "x".into(),
            max_error: 1.0,
            tolerance: 0.5,
            cases: 1,
        };
        assert!(!c.passed());
        assert!(c.line().contains("FAILED"));
    }
}
