//! Synthetic "speakers x emotions" world.
//!
//! Each frame row is drawn independently as
//! `speaker_base[spk] + emotion_offset[emo] + token_effect[token] + tau * z`.
//! Because the forward diffusion kernel maps Gaussians to Gaussians, the
//! score of every noised marginal and the emotion posterior are available
//! in closed form; those are the oracles used throughout the test suite.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{log_sum_exp, FrameMatrix, Tensor};
use crate::diffusion::{EmotionPosterior, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, normal, normals, seeded, Rng};
use crate::stylegen::split_rows;

/// Emotion id 0 is Neutral; its offset is the zero vector.
pub const NEUTRAL: usize = 0;

const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Frame dimension `D`.
    pub frame_dim: usize,
    /// Token vocabulary size `V`.
    pub vocab: usize,
    pub speakers: usize,
    pub emotions: usize,
    /// Per-frame noise scale.
    pub tau: f64,
    pub max_len: usize,
    /// Standard deviation of speaker base entries.
    pub speaker_scale: f64,
    /// Standard deviation of non-neutral emotion offset entries.
    pub emotion_scale: f64,
    /// Standard deviation of token effect entries.
    pub token_scale: f64,
    /// When nonzero, emotion offsets live only in the last `emotion_dims`
    /// coordinates and speaker bases only in the others. Zero lets both use
    /// every coordinate.
    pub emotion_dims: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            vocab: 10,
            speakers: 10,
            emotions: 4,
            tau: 0.3,
            max_len: 16,
            speaker_scale: 0.7,
            emotion_scale: 1.0,
            token_scale: 0.5,
            emotion_dims: 3,
        }
    }
}

/// Ground-truth generative model.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    /// `K_spk x D`
    pub speaker_base: Tensor,
    /// `K_emo x D`, row 0 is zero.
    pub emotion_offset: Tensor,
    /// `V x D`
    pub token_effect: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub emotion: usize,
    pub tokens: Vec<usize>,
    pub frames: FrameMatrix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl SpeakerSplit {
    pub fn is_seen(&self, speaker: usize) -> bool {
        self.seen.contains(&speaker)
    }
}

fn min_pairwise_distance(t: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..t.nrows() {
        for j in i + 1..t.nrows() {
            let d: f64 = t
                .row(i)
                .iter()
                .zip(t.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

fn gaussian_table(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Builds a world deterministically from `seed`, resampling speaker bases and
/// emotion offsets until both are separated by at least `4 tau`.
pub fn make_world(config: &WorldConfig, seed: u64) -> Result<World> {
    let c = config;
    if c.speakers < 4 || c.emotions < 2 || c.frame_dim < 2 || c.vocab < 1 || c.max_len < 1 {
        return invalid(format!(
            "world needs speakers >= 4, emotions >= 2, frame_dim >= 2, vocab >= 1, max_len >= 1 (got {} / {} / {} / {} / {})",
            c.speakers, c.emotions, c.frame_dim, c.vocab, c.max_len
        ));
    }
    if !(c.tau > 0.0 && c.tau.is_finite()) {
        return invalid(format!("tau must be positive, got {}", c.tau));
    }
    if c.emotion_dims >= c.frame_dim {
        return invalid(format!(
            "emotion_dims must be below frame_dim ({} >= {})",
            c.emotion_dims, c.frame_dim
        ));
    }
    let sep = 4.0 * c.tau;
    let d = c.frame_dim;
    let split = d - c.emotion_dims;
    let (speaker_cols, emotion_cols) = if c.emotion_dims == 0 {
        (0..d, 0..d)
    } else {
        (0..split, split..d)
    };
    let mask = |mut t: Tensor, keep: &std::ops::Range<usize>| {
        for r in 0..t.nrows() {
            for (j, v) in t.row_mut(r).iter_mut().enumerate() {
                if !keep.contains(&j) {
                    *v = 0.0;
                }
            }
        }
        t
    };

    let mut rng = seeded(derive_seed(seed, "speaker_base"));
    let speaker_base = (0..MAX_RESAMPLES)
        .map(|_| mask(gaussian_table(&mut rng, c.speakers, d, c.speaker_scale), &speaker_cols))
        .find(|t| min_pairwise_distance(t) >= sep)
        .ok_or_else(|| {
            Error::World(format!(
                "speaker bases not separated by {sep} after {MAX_RESAMPLES} resamples; increase frame_dim or speaker_scale, or decrease tau"
            ))
        })?;

    let mut rng = seeded(derive_seed(seed, "emotion_offset"));
    let emotion_offset = (0..MAX_RESAMPLES)
        .map(|_| {
            let mut t = mask(gaussian_table(&mut rng, c.emotions, d, c.emotion_scale), &emotion_cols);
            t.row_mut(NEUTRAL).fill(0.0);
            t
        })
        .find(|t| min_pairwise_distance(t) >= sep)
        .ok_or_else(|| {
            Error::World(format!(
                "emotion offsets not separated by {sep} after {MAX_RESAMPLES} resamples; increase frame_dim or emotion_scale, or decrease tau"
            ))
        })?;

    let mut rng = seeded(derive_seed(seed, "token_effect"));
    let token_effect = gaussian_table(&mut rng, c.vocab, d, c.token_scale);

    Ok(World {
        config: c.clone(),
        seed,
        speaker_base,
        emotion_offset,
        token_effect,
    })
}

impl World {
    pub fn frame_dim(&self) -> usize {
        self.config.frame_dim
    }

    pub fn emotions(&self) -> usize {
        self.config.emotions
    }

    pub fn speakers(&self) -> usize {
        self.config.speakers
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn check_speaker(&self, s: usize) -> Result<()> {
        if s >= self.config.speakers {
            return invalid(format!(
                "speaker {s} out of range 0..{}",
                self.config.speakers
            ));
        }
        Ok(())
    }

    pub fn check_emotion(&self, e: usize) -> Result<()> {
        if e >= self.config.emotions {
            return invalid(format!(
                "emotion {e} out of range 0..{}",
                self.config.emotions
            ));
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return invalid(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return invalid(format!(
                "token {t} out of vocabulary 0..{}",
                self.config.vocab
            ));
        }
        Ok(())
    }

    /// Analytic frame means for `(speaker, emotion, tokens)`.
    pub fn mean_frames(
        &self,
        speaker: usize,
        emotion: usize,
        tokens: &[usize],
    ) -> Result<FrameMatrix> {
        self.check_speaker(speaker)?;
        self.check_emotion(emotion)?;
        self.check_tokens(tokens)?;
        let d = self.frame_dim();
        let base = self.speaker_base.row(speaker);
        let off = self.emotion_offset.row(emotion);
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            let te = self.token_effect.row(tok);
            data.extend((0..d).map(|j| base[j] + off[j] + te[j]));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    pub fn random_script(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        (0..len)
            .map(|_| rng.random_range(0..self.config.vocab))
            .collect()
    }

    /// Versioned text serialization; reals use 17 significant digits.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "emoguide-world v1");
        let _ = writeln!(s, "frame_dim {}", c.frame_dim);
        let _ = writeln!(s, "vocab {}", c.vocab);
        let _ = writeln!(s, "speakers {}", c.speakers);
        let _ = writeln!(s, "emotions {}", c.emotions);
        let _ = writeln!(s, "max_len {}", c.max_len);
        let _ = writeln!(s, "emotion_dims {}", c.emotion_dims);
        let _ = writeln!(s, "seed {}", self.seed);
        for (k, v) in [
            ("tau", c.tau),
            ("speaker_scale", c.speaker_scale),
            ("emotion_scale", c.emotion_scale),
            ("token_scale", c.token_scale),
        ] {
            let _ = writeln!(s, "{k} {v:.16e}");
        }
        for (name, t) in [
            ("speaker_base", &self.speaker_base),
            ("emotion_offset", &self.emotion_offset),
            ("token_effect", &self.token_effect),
        ] {
            let _ = writeln!(s, "{name} {} {}", t.nrows(), t.ncols());
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<World> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            let (i, l) = lines.next().ok_or_else(|| {
                Error::Format(format!("unexpected end of world file, expected {what}"))
            })?;
            Ok((i + 1, l.split_whitespace().collect()))
        };
        let (_, header) = next("header")?;
        if header != ["emoguide-world", "v1"] {
            return Err(Error::Format("not an emoguide-world v1 file".into()));
        }
        fn field<T: std::str::FromStr>(line: (usize, Vec<&str>), key: &str) -> Result<T> {
            let (n, parts) = line;
            if parts.len() != 2 || parts[0] != key {
                return Err(Error::Format(format!("line {n}: expected `{key} <value>`")));
            }
            parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("line {n}: bad value for {key}")))
        }
        let frame_dim = field(next("frame_dim")?, "frame_dim")?;
        let vocab = field(next("vocab")?, "vocab")?;
        let speakers = field(next("speakers")?, "speakers")?;
        let emotions = field(next("emotions")?, "emotions")?;
        let max_len = field(next("max_len")?, "max_len")?;
        let emotion_dims = field(next("emotion_dims")?, "emotion_dims")?;
        let seed = field(next("seed")?, "seed")?;
        let tau = field(next("tau")?, "tau")?;
        let speaker_scale = field(next("speaker_scale")?, "speaker_scale")?;
        let emotion_scale = field(next("emotion_scale")?, "emotion_scale")?;
        let token_scale = field(next("token_scale")?, "token_scale")?;
        let mut read_matrix = |name: &str, rows: usize, cols: usize| -> Result<Tensor> {
            let (n, h) = next(name)?;
            if h.len() != 3 || h[0] != name || h[1].parse() != Ok(rows) || h[2].parse() != Ok(cols)
            {
                return Err(Error::Format(format!(
                    "line {n}: expected `{name} {rows} {cols}`"
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (n, vals) = next(name)?;
                if vals.len() != cols {
                    return Err(Error::Format(format!("line {n}: expected {cols} values")));
                }
                for v in vals {
                    data.push(
                        v.parse::<f64>()
                            .map_err(|_| Error::Format(format!("line {n}: bad number `{v}`")))?,
                    );
                }
            }
            Tensor::matrix(rows, cols, data)
        };
        let speaker_base = read_matrix("speaker_base", speakers, frame_dim)?;
        let emotion_offset = read_matrix("emotion_offset", emotions, frame_dim)?;
        let token_effect = read_matrix("token_effect", vocab, frame_dim)?;
        let config = WorldConfig {
            frame_dim,
            vocab,
            speakers,
            emotions,
            tau,
            max_len,
            speaker_scale,
            emotion_scale,
            token_scale,
            emotion_dims,
        };
        Ok(World {
            config,
            seed,
            speaker_base,
            emotion_offset,
            token_effect,
        })
    }

    /// Short content hash of the serialized world.
    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Draws an utterance; deterministic given `seed`.
pub fn sample_utterance(
    world: &World,
    speaker: usize,
    emotion: usize,
    tokens: &[usize],
    seed: u64,
) -> Result<Utterance> {
    let mean = world.mean_frames(speaker, emotion, tokens)?;
    let mut rng = seeded(seed);
    let tau = world.tau();
    let z = normals(&mut rng, mean.len());
    let data = mean
        .data()
        .iter()
        .zip(z)
        .map(|(m, z)| m + tau * z)
        .collect();
    Ok(Utterance {
        speaker,
        emotion,
        tokens: tokens.to_vec(),
        frames: Tensor::matrix(tokens.len(), world.frame_dim(), data)?,
    })
}

/// Deterministic disjoint split with `n_seen` seen speakers.
pub fn split_speakers(world: &World, n_seen: usize, seed: u64) -> Result<SpeakerSplit> {
    let k = world.speakers();
    if n_seen < 1 || n_seen >= k {
        return invalid(format!("n_seen must be in 1..{k}, got {n_seen}"));
    }
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(&mut seeded(derive_seed(seed, "split")));
    let mut seen = ids[..n_seen].to_vec();
    let mut unseen = ids[n_seen..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(SpeakerSplit { seen, unseen })
}

/// Equal-weight mixture of isotropic Gaussians over whole frame matrices:
/// component `c` has mean `means[c]` (shape `L x D`) and covariance `tau² I`.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub means: Vec<FrameMatrix>,
    pub tau: f64,
}

/// A [`GaussianMixture`] pushed through the forward kernel to time `t`.
#[derive(Clone, Debug)]
pub struct PerturbedMixture {
    pub means: Vec<FrameMatrix>,
    pub var: f64,
}

impl GaussianMixture {
    /// Marginal at time `t` of the mean-reverting forward process toward `mu`:
    /// component means become `mu + (m - mu) rho(t)`, variances
    /// `tau² rho² + 1 - rho²`.
    pub fn perturbed(
        &self,
        mu: &FrameMatrix,
        t: f64,
        schedule: &NoiseSchedule,
    ) -> Result<PerturbedMixture> {
        if self.means.is_empty() {
            return invalid("mixture has no components");
        }
        if !(0.0..=schedule.t_end).contains(&t) {
            return invalid(format!("t = {t} outside [0, {}]", schedule.t_end));
        }
        let rho = schedule.rho(t);
        let var = self.tau * self.tau * rho * rho + schedule.var(t);
        if var <= 0.0 {
            return invalid("degenerate density: zero variance at t = 0 with tau = 0");
        }
        let means = self
            .means
            .iter()
            .map(|m| m.zip(mu, |m, u| u + (m - u) * rho))
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbedMixture { means, var })
    }
}

impl PerturbedMixture {
    /// Log-likelihood of `y` under each component.
    pub fn component_log_likelihoods(&self, y: &FrameMatrix) -> Result<Vec<f64>> {
        let norm = -0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI * self.var).ln();
        self.means
            .iter()
            .map(|m| {
                if m.shape() != y.shape() {
                    return invalid(format!(
                        "frames {:?} vs component {:?}",
                        y.shape(),
                        m.shape()
                    ));
                }
                let sq: f64 = y
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Ok(norm - 0.5 * sq / self.var)
            })
            .collect()
    }

    /// Posterior component weights given `y`.
    pub fn responsibilities(&self, y: &FrameMatrix) -> Result<Vec<f64>> {
        let ll = self.component_log_likelihoods(y)?;
        let lse = log_sum_exp(&ll);
        Ok(ll.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn log_density(&self, y: &FrameMatrix) -> Result<f64> {
        let ll = self.component_log_likelihoods(y)?;
        Ok(log_sum_exp(&ll) - (ll.len() as f64).ln())
    }

    /// `∇_y log p(y)`.
    pub fn score(&self, y: &FrameMatrix) -> Result<FrameMatrix> {
        let w = self.responsibilities(y)?;
        let mut out = Tensor::zeros(y.shape());
        for (wc, m) in w.iter().zip(&self.means) {
            for ((o, yv), mv) in out.data_mut().iter_mut().zip(y.data()).zip(m.data()) {
                *o -= wc * (yv - mv) / self.var;
            }
        }
        Ok(out)
    }
}

/// Which emotions a frame distribution mixes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmotionPrior {
    One(usize),
    All,
}

/// Data-space mixture over `speakers x emotions` for a token sequence, equal weights.
pub fn world_mixture(
    world: &World,
    speakers: &[usize],
    emotion: EmotionPrior,
    tokens: &[usize],
) -> Result<GaussianMixture> {
    if speakers.is_empty() {
        return invalid("speaker prior is empty");
    }
    let emotions: Vec<usize> = match emotion {
        EmotionPrior::One(e) => vec![e],
        EmotionPrior::All => (0..world.emotions()).collect(),
    };
    let mut means = Vec::with_capacity(speakers.len() * emotions.len());
    for &s in speakers {
        for &e in &emotions {
            means.push(world.mean_frames(s, e, tokens)?);
        }
    }
    Ok(GaussianMixture {
        means,
        tau: world.tau(),
    })
}

/// Exact score `∇ log p_t(Y_t)` of the noised frame distribution.
#[allow(clippy::too_many_arguments)]
pub fn analytic_score(
    world: &World,
    speakers: &[usize],
    emotion: EmotionPrior,
    tokens: &[usize],
    mu: &FrameMatrix,
    y_t: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<FrameMatrix> {
    world_mixture(world, speakers, emotion, tokens)?
        .perturbed(mu, t, schedule)?
        .score(y_t)
}

#[allow(clippy::too_many_arguments)]
pub fn analytic_log_density(
    world: &World,
    speakers: &[usize],
    emotion: EmotionPrior,
    tokens: &[usize],
    mu: &FrameMatrix,
    y_t: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    world_mixture(world, speakers, emotion, tokens)?
        .perturbed(mu, t, schedule)?
        .log_density(y_t)
}

/// Exact `p(e | Y_t)` for a known speaker under a uniform emotion prior;
/// rows are combined by summing their log-likelihoods.
pub fn analytic_emotion_posterior(
    world: &World,
    speaker: usize,
    tokens: &[usize],
    mu: &FrameMatrix,
    y_t: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    world_mixture(world, &[speaker], EmotionPrior::All, tokens)?
        .perturbed(mu, t, schedule)?
        .responsibilities(y_t)
}

/// Exact `∇_{Y_t} log p(e | Y_t)`.
#[allow(clippy::too_many_arguments)]
pub fn analytic_posterior_log_grad(
    world: &World,
    speaker: usize,
    tokens: &[usize],
    mu: &FrameMatrix,
    y_t: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
    emotion: usize,
) -> Result<FrameMatrix> {
    world.check_emotion(emotion)?;
    let pm =
        world_mixture(world, &[speaker], EmotionPrior::All, tokens)?.perturbed(mu, t, schedule)?;
    let w = pm.responsibilities(y_t)?;
    // ∇ log p(e|y) = ∇ log p(y|e) - Σ_c w_c ∇ log p(y|c) = (m_e - Σ_c w_c m_c) / v
    let mut out = Tensor::zeros(y_t.shape());
    for (c, (wc, m)) in w.iter().zip(&pm.means).enumerate() {
        let coef = if c == emotion { 1.0 - wc } else { -wc };
        for (o, mv) in out.data_mut().iter_mut().zip(m.data()) {
            *o += coef * mv / pm.var;
        }
    }
    Ok(out)
}

/// Exact emotion posterior for stacked utterances with known speakers and
/// scripts, usable as the classifier in guided sampling.
pub struct WorldPosterior<'a> {
    pub world: &'a World,
    pub speakers: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    /// Prior mean of each utterance (stacked in the same order).
    pub mu: FrameMatrix,
    pub schedule: NoiseSchedule,
}

impl EmotionPosterior for WorldPosterior<'_> {
    fn posterior_grad(
        &mut self,
        y: &FrameMatrix,
        lengths: &[usize],
        t: f64,
        targets: &[usize],
    ) -> Result<(Vec<Vec<f64>>, FrameMatrix)> {
        if lengths.len() != self.speakers.len()
            || targets.len() != lengths.len()
            || y.shape() != self.mu.shape()
        {
            return invalid("posterior layout does not match its utterances");
        }
        let ys = split_rows(y, lengths)?;
        let mus = split_rows(&self.mu, lengths)?;
        let mut post = Vec::with_capacity(lengths.len());
        let mut grad = Vec::with_capacity(y.len());
        for (u, (yu, mu)) in ys.iter().zip(&mus).enumerate() {
            let (spk, toks) = (self.speakers[u], &self.tokens[u]);
            post.push(analytic_emotion_posterior(
                self.world,
                spk,
                toks,
                mu,
                yu,
                t,
                &self.schedule,
            )?);
            let g = analytic_posterior_log_grad(
                self.world,
                spk,
                toks,
                mu,
                yu,
                t,
                &self.schedule,
                targets[u],
            )?;
            grad.extend_from_slice(g.data());
        }
        Ok((post, Tensor::new(y.shape().to_vec(), grad)?))
    }
}
