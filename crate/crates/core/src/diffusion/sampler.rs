use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{FrameMatrix, Tensor};
use crate::error::{invalid, Result};
use crate::rng::{normals, seeded, Rng};

use super::schedule::NoiseSchedule;
use super::scorenet::T_MIN;

/// Anything that can estimate `∇ log p_t(Y)` for a stack of utterance rows.
pub trait ScoreFn {
    fn score(&mut self, y: &FrameMatrix, t: f64) -> Result<FrameMatrix>;

    /// Norm of the guidance term added by the last [`ScoreFn::score`] call, if any.
    fn guidance_norm(&self) -> Option<f64> {
        None
    }
}

impl<F: FnMut(&FrameMatrix, f64) -> Result<FrameMatrix>> ScoreFn for F {
    fn score(&mut self, y: &FrameMatrix, t: f64) -> Result<FrameMatrix> {
        self(y, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    #[serde(alias = "cg")]
    Classifier,
    #[serde(alias = "cfg")]
    ClassifierFree,
}

impl GuidanceMode {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Classifier => "classifier",
            GuidanceMode::ClassifierFree => "classifier_free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(GuidanceMode::None),
            "classifier" | "cg" => Some(GuidanceMode::Classifier),
            "classifier_free" | "cfg" => Some(GuidanceMode::ClassifierFree),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub gamma: f64,
    /// Inject reverse-time noise; otherwise integrate the drift only.
    pub stochastic: bool,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return invalid(format!("guidance scale must be >= 0, got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub stochastic: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            stochastic: true,
        }
    }
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub t: f64,
    pub score_norm: f64,
    pub guidance_norm: Option<f64>,
    pub y: Vec<Vec<f64>>,
}

/// Integrates the reverse process from `t = T` to `0` on a uniform grid:
///
/// `Y <- Y - h beta_t (0.5 (mu - Y) - score(Y, t))`, plus `sqrt(beta_t h) z`
/// when `opts.stochastic` is set. The prior draw is `Y_T ~ N(mu, I)`.
///
/// `mu` stacks several utterances of the given `lengths`; each utterance
/// draws all of its noise from its own seed, so results do not depend on
/// how utterances are batched.
pub fn sample_reverse(
    score: &mut dyn ScoreFn,
    mu: &FrameMatrix,
    lengths: &[usize],
    seeds: &[u64],
    schedule: &NoiseSchedule,
    opts: &SamplerOptions,
    mut trace: Option<&mut dyn Write>,
) -> Result<FrameMatrix> {
    if opts.steps == 0 {
        return invalid("sampler needs at least one step");
    }
    schedule.validate()?;
    if lengths.len() != seeds.len()
        || lengths.iter().sum::<usize>() != mu.nrows()
        || lengths.contains(&0)
    {
        return invalid(format!(
            "lengths {lengths:?} / {} seeds do not match {} rows",
            seeds.len(),
            mu.nrows()
        ));
    }
    let d = mu.ncols();
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| seeded(s)).collect();
    let draw = |rngs: &mut [Rng]| -> Vec<f64> {
        rngs.iter_mut()
            .zip(lengths)
            .flat_map(|(r, &n)| normals(r, n * d))
            .collect()
    };
    let z = draw(&mut rngs);
    let mut y = mu.zip(&Tensor::new(mu.shape().to_vec(), z)?, |m, z| m + z)?;
    let h = schedule.t_end / opts.steps as f64;
    for i in 0..opts.steps {
        let t = (schedule.t_end - i as f64 * h).max(T_MIN);
        let s = score.score(&y, t)?;
        if s.shape() != y.shape() {
            return invalid(format!(
                "score shape {:?} vs state {:?}",
                s.shape(),
                y.shape()
            ));
        }
        if let Some(w) = trace.as_deref_mut() {
            let rec = TrajectoryRecord {
                step: i,
                t,
                score_norm: s.norm(),
                guidance_norm: score.guidance_norm(),
                y: y.rows().map(<[f64]>::to_vec).collect(),
            };
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        let beta = schedule.beta(t);
        let data = y.data_mut();
        for ((yv, &m), &sv) in data.iter_mut().zip(mu.data()).zip(s.data()) {
            *yv -= h * beta * (0.5 * (m - *yv) - sv);
        }
        if opts.stochastic {
            let c = (beta * h).sqrt();
            for (yv, z) in y.data_mut().iter_mut().zip(draw(&mut rngs)) {
                *yv += c * z;
            }
        }
        if !y.is_finite() {
            return Err(crate::Error::NonFinite {
                node: format!("sampler state at step {i}, t = {t}"),
            });
        }
    }
    Ok(y)
}

/// Single-utterance convenience wrapper around [`sample_reverse`].
pub fn sample_one(
    score: &mut dyn ScoreFn,
    mu: &FrameMatrix,
    schedule: &NoiseSchedule,
    opts: &SamplerOptions,
    seed: u64,
) -> Result<FrameMatrix> {
    sample_reverse(score, mu, &[mu.nrows()], &[seed], schedule, opts, None)
}
