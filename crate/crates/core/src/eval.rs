//! Metrics: oracle emotion accuracy, speaker-similarity and content-error
//! analogs, style-vector probing, and guidance-scale sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{index_tensor, inputs, FrameMatrix, Graph, ParamStore, Tensor};
use crate::diffusion::{Condition, GuidanceMode, NoiseSchedule, SamplerOptions};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_index, derive_seed, seeded};
use crate::stylegen::StyleVector;
use crate::synthworld::{
    analytic_emotion_posterior, sample_utterance, SpeakerSplit, Utterance, World, NEUTRAL,
};
use crate::training::{argmax, ClassifierPosterior, Model, NoisyClassifier};

/// A generated utterance together with what it was conditioned on.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub frames: FrameMatrix,
    pub speaker: usize,
    pub target: usize,
    pub tokens: Vec<usize>,
}

/// Bayes-optimal emotion prediction at `t = 0` for a known speaker and script.
pub fn oracle_emotion(
    world: &World,
    frames: &FrameMatrix,
    speaker: usize,
    tokens: &[usize],
) -> Result<usize> {
    if frames.nrows() != tokens.len() {
        return invalid(format!(
            "{} frames for {} tokens",
            frames.nrows(),
            tokens.len()
        ));
    }
    // at t = 0 the prior mean has no effect
    let mu = Tensor::zeros(frames.shape());
    let p = analytic_emotion_posterior(
        world,
        speaker,
        tokens,
        &mu,
        frames,
        0.0,
        &NoiseSchedule::default(),
    )?;
    Ok(argmax(&p))
}

/// Percentage of samples whose Bayes-optimal emotion equals the target.
pub fn eca_oracle(world: &World, samples: &[EvalSample]) -> Result<f64> {
    if samples.is_empty() {
        return invalid("eca_oracle needs at least one sample");
    }
    let mut hits = 0;
    for s in samples {
        hits += (oracle_emotion(world, &s.frames, s.speaker, &s.tokens)? == s.target) as usize;
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Cosine similarity.
pub fn secs_analog(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("embeddings must be nonempty and of equal length");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine similarity of a zero vector");
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker embedding from frames: the mean over rows of the frame minus its
/// token effect, minus the offset of the oracle-predicted emotion.
pub fn mean_frame_embedding(
    world: &World,
    frames: &FrameMatrix,
    speaker: usize,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let emo = oracle_emotion(world, frames, speaker, tokens)?;
    let d = world.frame_dim();
    let mut out = vec![0.0; d];
    for (row, &tok) in frames.rows().zip(tokens) {
        for j in 0..d {
            out[j] += row[j] - world.token_effect.row(tok)[j];
        }
    }
    let n = tokens.len() as f64;
    let off = world.emotion_offset.row(emo);
    Ok(out.iter().zip(off).map(|(v, o)| v / n - o).collect())
}

/// Mean squared deviation per row from the world's analytic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentError {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

pub fn content_error(world: &World, samples: &[EvalSample]) -> Result<ContentError> {
    if samples.is_empty() {
        return invalid("content_error needs at least one sample");
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut total, mut rows) = (0.0, 0usize);
    for s in samples {
        if s.frames.nrows() != s.tokens.len() {
            return invalid(format!(
                "{} frames for {} tokens",
                s.frames.nrows(),
                s.tokens.len()
            ));
        }
        let m = world.mean_frames(s.speaker, s.target, &s.tokens)?;
        let sq: f64 = s
            .frames
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        per_sample.push(sq / s.tokens.len() as f64);
        total += sq;
        rows += s.tokens.len();
    }
    Ok(ContentError {
        mean: total / rows as f64,
        per_sample,
    })
}

/// Fraction of samples whose frames are closest (in summed squared distance)
/// to the analytic mean of their own speaker, given target emotion and script.
pub fn nearest_speaker_accuracy(world: &World, samples: &[EvalSample]) -> Result<f64> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let mut hits = 0;
    for s in samples {
        let mut best = (f64::INFINITY, 0);
        for spk in 0..world.speakers() {
            let m = world.mean_frames(spk, s.target, &s.tokens)?;
            let d: f64 = s
                .frames
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, spk);
            }
        }
        hits += (best.1 == s.speaker) as usize;
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Held-out accuracy (percent) of a freshly trained linear softmax probe on
/// standardized vectors, 80/20 split.
pub fn probe_disentanglement(
    vectors: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    if vectors.len() != labels.len() || vectors.is_empty() {
        return invalid("one label per vector required");
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return invalid("vectors must share a positive dimension");
    }
    for c in 0..classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < 10 {
            return invalid(format!("class {c} has {n} vectors; at least 10 required"));
        }
    }
    if labels.iter().any(|&l| l >= classes) {
        return invalid("label out of range");
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n)
        .collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| {
            (vectors
                .iter()
                .map(|v| (v[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
                .max(1e-12)
        })
        .collect();
    let z: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| (0..dim).map(|j| (v[j] - mean[j]) / sd[j]).collect())
        .collect();

    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.shuffle(&mut seeded(derive_seed(seed, "probe-split")));
    let cut = (vectors.len() * 4) / 5;
    let (train, test) = order.split_at(cut);
    let pick = |ix: &[usize]| -> Result<(Tensor, Tensor)> {
        let rows: Vec<Vec<f64>> = ix.iter().map(|&i| z[i].clone()).collect();
        Ok((
            Tensor::from_rows(&rows)?,
            index_tensor(&ix.iter().map(|&i| labels[i]).collect::<Vec<_>>()),
        ))
    };
    let (xtr, ytr) = pick(train)?;
    let (xte, yte) = pick(test)?;

    let mut store = ParamStore::new(derive_seed(seed, "probe-init"));
    store.init_glorot("lin.w", &[dim, classes], dim, classes);
    store.init_zeros("lin.b", &[classes]);
    let mut g = Graph::new();
    let x = g.input_rows("x", dim);
    let y = g.index_input("y");
    let (w, b) = (g.param("lin.w"), g.param("lin.b"));
    let logits = g.affine(x, w, Some(b));
    g.set_output("logits", logits);
    let ce = g.softmax_cross_entropy(logits, y);
    let feed = inputs([("x", xtr), ("y", ytr)]);
    for _ in 0..400 {
        store.zero_grad();
        g.forward(&store, &feed)?;
        g.backward(&mut store, ce, None)?;
        store.sgd_step(0.5);
    }
    let out = g.evaluate(&store, &inputs([("x", xte), ("y", yte.clone())]))?;
    let hits = out["logits"]
        .rows()
        .zip(yte.data())
        .filter(|(r, &l)| argmax(r) == l as usize)
        .count();
    Ok(100.0 * hits as f64 / test.len() as f64)
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Neutral reference utterances per speaker. Only Neutral references can be
/// stored for unseen speakers.
#[derive(Clone, Debug)]
pub struct ReferenceBank {
    split: SpeakerSplit,
    refs: BTreeMap<usize, Vec<Utterance>>,
}

impl ReferenceBank {
    pub fn new(split: &SpeakerSplit) -> Self {
        Self {
            split: split.clone(),
            refs: BTreeMap::new(),
        }
    }

    /// `per_speaker` Neutral references of length `len` for every speaker.
    pub fn neutral(
        world: &World,
        split: &SpeakerSplit,
        per_speaker: usize,
        len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut bank = Self::new(split);
        let mut rng = seeded(derive_seed(seed, "references"));
        for spk in 0..world.speakers() {
            for i in 0..per_speaker {
                let tokens = world.random_script(len, &mut rng);
                let u = sample_utterance(
                    world,
                    spk,
                    NEUTRAL,
                    &tokens,
                    derive_index(derive_seed(seed, "ref-noise"), (spk * 1000 + i) as u64),
                )?;
                bank.insert(u)?;
            }
        }
        Ok(bank)
    }

    pub fn insert(&mut self, u: Utterance) -> Result<()> {
        if !self.split.is_seen(u.speaker) && u.emotion != NEUTRAL {
            return invalid(format!(
                "speaker {} is unseen; only Neutral references are available for unseen speakers",
                u.speaker
            ));
        }
        self.refs.entry(u.speaker).or_default().push(u);
        Ok(())
    }

    pub fn get(&self, speaker: usize, i: usize) -> Result<&Utterance> {
        let v = self.refs.get(&speaker).filter(|v| !v.is_empty());
        let v =
            v.ok_or_else(|| Error::InvalidArgument(format!("no reference for speaker {speaker}")))?;
        Ok(&v[i % v.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerGroup {
    Seen,
    Unseen,
    All,
}

impl SpeakerGroup {
    pub fn speakers(self, split: &SpeakerSplit) -> Vec<usize> {
        match self {
            SpeakerGroup::Seen => split.seen.clone(),
            SpeakerGroup::Unseen => split.unseen.clone(),
            SpeakerGroup::All => {
                let mut v: Vec<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
                v.sort_unstable();
                v
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpeakerGroup::Seen => "seen",
            SpeakerGroup::Unseen => "unseen",
            SpeakerGroup::All => "all",
        }
    }
}

/// Evaluation protocol sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_scripts: usize,
    pub script_len: usize,
    /// Number of evaluation seeds averaged (seeds `0..n_seeds`).
    pub n_seeds: usize,
    pub steps: usize,
    pub stochastic: bool,
    pub refs_per_speaker: usize,
    pub cg_gamma: f64,
    pub cfg_gammas: Vec<f64>,
    pub sweep_gammas: Vec<f64>,
    pub sweep_mode: GuidanceMode,
    pub sweep_group: SpeakerGroup,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            n_scripts: 10,
            script_len: 8,
            n_seeds: 5,
            steps: 100,
            stochastic: true,
            refs_per_speaker: 4,
            cg_gamma: 50.0,
            cfg_gammas: vec![1.25, 1.75],
            sweep_gammas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            sweep_mode: GuidanceMode::ClassifierFree,
            sweep_group: SpeakerGroup::Seen,
        }
    }
}

/// Fixed evaluation scripts, shared by every seed.
pub fn eval_scripts(world: &World, cfg: &EvalConfig) -> Vec<Vec<usize>> {
    let mut rng = seeded(derive_seed(world.seed, "eval-scripts"));
    (0..cfg.n_scripts.max(1))
        .map(|_| world.random_script(cfg.script_len.min(world.config.max_len), &mut rng))
        .collect()
}

/// Metrics of one evaluation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub gamma: f64,
    pub mode: GuidanceMode,
    pub group: SpeakerGroup,
    pub seed: u64,
    pub eca: f64,
    pub content_error: f64,
    pub secs_mean_frame: f64,
    pub secs_style: f64,
    pub nearest_speaker: f64,
    pub n: usize,
}

/// Trained networks for evaluation.
pub struct Evaluator<'a> {
    pub world: &'a World,
    pub split: &'a SpeakerSplit,
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub classifier: Option<(&'a NoisyClassifier, &'a ParamStore)>,
    pub bank: &'a ReferenceBank,
    pub schedule: NoiseSchedule,
    pub config: EvalConfig,
}

impl Evaluator<'_> {
    /// The conditions of a cell: speakers and target emotions cycle, each
    /// sample gets a Neutral reference of its speaker and a fixed script.
    pub fn conditions(
        &self,
        group: SpeakerGroup,
        seed: u64,
    ) -> Result<(Vec<Condition>, Vec<StyleVector>, Vec<usize>)> {
        let speakers = group.speakers(self.split);
        if speakers.is_empty() {
            return invalid(format!("no {} speakers", group.name()));
        }
        let scripts = eval_scripts(self.world, &self.config);
        let k = self.world.emotions();
        let base = derive_seed(seed, "eval-samples");
        let mut conds = Vec::with_capacity(self.config.n_samples);
        let mut ref_styles = Vec::with_capacity(self.config.n_samples);
        let mut spk_of = Vec::with_capacity(self.config.n_samples);
        for i in 0..self.config.n_samples {
            let spk = speakers[i % speakers.len()];
            let emotion = (i / speakers.len()) % k;
            let r = self
                .bank
                .get(spk, i / (speakers.len() * k) + seed as usize)?;
            let style = self.model.encode_style(self.store, &r.frames)?;
            conds.push(Condition {
                tokens: scripts[i % scripts.len()].clone(),
                style: style.clone(),
                emotion,
                seed: derive_index(base, i as u64),
            });
            ref_styles.push(style);
            spk_of.push(spk);
        }
        Ok((conds, ref_styles, spk_of))
    }

    pub fn generate(
        &self,
        mode: GuidanceMode,
        gamma: f64,
        conds: &[Condition],
    ) -> Result<Vec<FrameMatrix>> {
        let nets = self.model.nets(self.store);
        let opts = SamplerOptions {
            steps: self.config.steps,
            stochastic: self.config.stochastic,
        };
        match mode {
            GuidanceMode::None => nets.sample_unguided(conds, false, &self.schedule, &opts),
            GuidanceMode::ClassifierFree => Ok(nets
                .sample_cfg(conds, &self.schedule, &opts, gamma, None)?
                .samples),
            GuidanceMode::Classifier => {
                let (clf, store) = self.classifier.ok_or_else(|| {
                    Error::InvalidArgument(
                        "classifier guidance needs a trained noisy classifier".into(),
                    )
                })?;
                let mut post = ClassifierPosterior::new(clf, store);
                nets.sample_cg(&mut post, conds, &self.schedule, &opts, gamma, None)
            }
        }
    }

    pub fn cell(
        &self,
        mode: GuidanceMode,
        gamma: f64,
        group: SpeakerGroup,
        seed: u64,
    ) -> Result<CellMetrics> {
        let (conds, ref_styles, speakers) = self.conditions(group, seed)?;
        let frames = self.generate(mode, gamma, &conds)?;
        let samples: Vec<EvalSample> = frames
            .into_iter()
            .zip(&conds)
            .zip(&speakers)
            .map(|((f, c), &spk)| EvalSample {
                frames: f,
                speaker: spk,
                target: c.emotion,
                tokens: c.tokens.clone(),
            })
            .collect();
        let mut secs_mf = 0.0;
        let mut secs_st = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let r = self.bank.get(
                s.speaker,
                i / (self.group_size(group) * self.world.emotions()) + seed as usize,
            )?;
            let a = mean_frame_embedding(self.world, &s.frames, s.speaker, &s.tokens)?;
            let b = mean_frame_embedding(self.world, &r.frames, r.speaker, &r.tokens)?;
            secs_mf += secs_analog(&a, &b)?;
            let st = self.model.encode_style(self.store, &s.frames)?;
            secs_st += secs_analog(&st.values, &ref_styles[i].values)?;
        }
        let n = samples.len();
        Ok(CellMetrics {
            gamma,
            mode,
            group,
            seed,
            eca: eca_oracle(self.world, &samples)?,
            content_error: content_error(self.world, &samples)?.mean,
            secs_mean_frame: secs_mf / n as f64,
            secs_style: secs_st / n as f64,
            nearest_speaker: 100.0 * nearest_speaker_accuracy(self.world, &samples)?,
            n,
        })
    }

    fn group_size(&self, group: SpeakerGroup) -> usize {
        group.speakers(self.split).len()
    }

    /// Metrics averaged over evaluation seeds `0..n_seeds`.
    pub fn averaged(
        &self,
        mode: GuidanceMode,
        gamma: f64,
        group: SpeakerGroup,
    ) -> Result<CellMetrics> {
        let seeds = self.config.n_seeds.max(1);
        let cells = (0..seeds as u64)
            .map(|s| self.cell(mode, gamma, group, s))
            .collect::<Result<Vec<_>>>()?;
        let avg =
            |f: fn(&CellMetrics) -> f64| cells.iter().map(f).sum::<f64>() / cells.len() as f64;
        Ok(CellMetrics {
            gamma,
            mode,
            group,
            seed: 0,
            eca: avg(|c| c.eca),
            content_error: avg(|c| c.content_error),
            secs_mean_frame: avg(|c| c.secs_mean_frame),
            secs_style: avg(|c| c.secs_style),
            nearest_speaker: avg(|c| c.nearest_speaker),
            n: cells.iter().map(|c| c.n).sum(),
        })
    }

    /// One row per gamma, each from fresh samples; `gammas` must ascend.
    /// Cells run on separate threads.
    pub fn guidance_sweep(
        &self,
        gammas: &[f64],
        mode: GuidanceMode,
        group: SpeakerGroup,
        seed: u64,
    ) -> Result<Vec<CellMetrics>> {
        if gammas.is_empty() || gammas.windows(2).any(|w| w[0] > w[1]) {
            return invalid("gammas must be nonempty and ascending");
        }
        // cells are independent and deterministic; results keep gamma order
        std::thread::scope(|scope| {
            let handles: Vec<_> = gammas
                .iter()
                .map(|&g| scope.spawn(move || self.cell(mode, g, group, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep cell panicked"))
                .collect()
        })
    }
}

pub const SWEEP_HEADER: &str = "gamma,mode,eca,content_error,secs_mean_frame,secs_style,n";

/// Renders sweep rows as CSV with fixed precision.
pub fn sweep_csv(rows: &[CellMetrics]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{:.4},{},{:.4},{:.6},{:.6},{:.6},{}",
            r.gamma,
            r.mode.name(),
            r.eca,
            r.content_error,
            r.secs_mean_frame,
            r.secs_style,
            r.n
        );
    }
    s
}

/// A single metric with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub world_hash: String,
    pub checkpoint_hash: String,
    pub gamma: f64,
    pub mode: GuidanceMode,
    pub group: SpeakerGroup,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_cell(
        cell: &CellMetrics,
        world_hash: &str,
        checkpoint_hash: &str,
    ) -> Vec<EvalReport> {
        [
            ("eca", cell.eca),
            ("content_error", cell.content_error),
            ("secs_mean_frame", cell.secs_mean_frame),
            ("secs_style", cell.secs_style),
            ("nearest_speaker", cell.nearest_speaker),
        ]
        .into_iter()
        .map(|(m, v)| EvalReport {
            metric: m.into(),
            value: v,
            n: cell.n,
            world_hash: world_hash.into(),
            checkpoint_hash: checkpoint_hash.into(),
            gamma: cell.gamma,
            mode: cell.mode,
            group: cell.group,
            seed: cell.seed,
        })
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normals;
    use crate::stylegen::ModelConfig;
    use crate::synthworld::{make_world, split_speakers, WorldConfig};
    use crate::training::DataDims;

    fn world() -> World {
        make_world(&WorldConfig::default(), 0).unwrap()
    }

    fn draws(world: &World, n: usize, emotion: usize, target: usize, seed: u64) -> Vec<EvalSample> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let speaker = i % world.speakers();
                let tokens = world.random_script(8, &mut rng);
                let u = sample_utterance(
                    world,
                    speaker,
                    emotion,
                    &tokens,
                    derive_index(seed, i as u64),
                )
                .unwrap();
                EvalSample {
                    frames: u.frames,
                    speaker,
                    target,
                    tokens,
                }
            })
            .collect()
    }

    #[test]
    fn eca_on_world_draws() {
        let w = world();
        assert!(eca_oracle(&w, &draws(&w, 400, 1, 1, 1)).unwrap() > 95.0);
        assert!(eca_oracle(&w, &draws(&w, 400, NEUTRAL, 1, 2)).unwrap() < 5.0);
        let tokens = vec![3, 1, 4];
        let exact = EvalSample {
            frames: w.mean_frames(5, 1, &tokens).unwrap(),
            speaker: 5,
            target: 1,
            tokens,
        };
        assert_eq!(eca_oracle(&w, &[exact]).unwrap(), 100.0);
        assert!(eca_oracle(&w, &[]).is_err());
    }

    #[test]
    fn eca_matches_brute_force_bayes_rule() {
        // Noisy draws near the decision boundaries: the oracle must pick the
        // emotion whose mean is nearest, as the Bayes rule does for equal
        // isotropic covariances and a uniform prior.
        let w = world();
        let mut samples = draws(&w, 500, 2, 2, 3);
        let mut rng = seeded(9);
        for s in samples.iter_mut() {
            let extra =
                Tensor::new(s.frames.shape().to_vec(), normals(&mut rng, s.frames.len())).unwrap();
            s.frames = s.frames.add(&extra.scale(1.2)).unwrap();
        }
        let brute = samples
            .iter()
            .filter(|s| {
                let d = |e: usize| {
                    let m = w.mean_frames(s.speaker, e, &s.tokens).unwrap();
                    s.frames
                        .data()
                        .iter()
                        .zip(m.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                };
                (0..w.emotions()).all(|e| e == 2 || d(2) < d(e))
            })
            .count();
        let eca = eca_oracle(&w, &samples).unwrap();
        assert_eq!(eca, 100.0 * brute as f64 / 500.0);
        assert!(eca > 30.0 && eca < 95.0, "{eca}");
    }

    #[test]
    fn secs_cases() {
        assert!((secs_analog(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((secs_analog(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(secs_analog(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let (a, b) = ([0.3, -1.0, 2.0], [1.0, 0.5, -0.2]);
        assert_eq!(secs_analog(&a, &b).unwrap(), secs_analog(&b, &a).unwrap());
        assert!(secs_analog(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(secs_analog(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mean_frame_embedding_recovers_speaker_base() {
        let w = world();
        let tokens = vec![0, 9, 2];
        let e =
            mean_frame_embedding(&w, &w.mean_frames(4, 3, &tokens).unwrap(), 4, &tokens).unwrap();
        for (a, b) in e.iter().zip(w.speaker_base.row(4)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn content_error_cases() {
        let w = world();
        let tokens = vec![1, 2, 3, 4];
        let mean = w.mean_frames(2, 1, &tokens).unwrap();
        let exact = EvalSample {
            frames: mean.clone(),
            speaker: 2,
            target: 1,
            tokens: tokens.clone(),
        };
        assert_eq!(content_error(&w, &[exact]).unwrap().mean, 0.0);

        let zeros = EvalSample {
            frames: Tensor::zeros(&[4, 8]),
            speaker: 2,
            target: 1,
            tokens: tokens.clone(),
        };
        let ce = content_error(&w, &[zeros]).unwrap();
        let expect: f64 = mean.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ce.mean - expect).abs() < 1e-12);
        assert_eq!(ce.per_sample.len(), 1);

        let samples = draws(&w, 1250, 3, 3, 4);
        let ce = content_error(&w, &samples).unwrap().mean;
        let expect = 8.0 * 0.3 * 0.3;
        assert!((ce / expect - 1.0).abs() < 0.05, "{ce} vs {expect}");

        let short = EvalSample {
            frames: Tensor::zeros(&[3, 8]),
            speaker: 2,
            target: 1,
            tokens,
        };
        assert!(content_error(&w, &[short]).is_err());
    }

    #[test]
    fn nearest_speaker_on_world_draws() {
        let w = world();
        assert!(nearest_speaker_accuracy(&w, &draws(&w, 200, 2, 2, 5)).unwrap() > 0.99);
        let mut wrong = draws(&w, 50, 2, 2, 6);
        for s in wrong.iter_mut() {
            s.speaker = (s.speaker + 1) % w.speakers();
        }
        assert!(nearest_speaker_accuracy(&w, &wrong).unwrap() < 0.05);
    }

    #[test]
    fn probe_cases() {
        let n = 2000;
        let mut rng = seeded(1);
        let random: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, 8)).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        labels.shuffle(&mut rng);
        let acc = probe_disentanglement(&random, &labels, 4, 0).unwrap();
        assert!((acc - 25.0).abs() <= 5.0, "{acc}");

        let onehot: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|j| (j == l) as u8 as f64).collect())
            .collect();
        assert_eq!(
            probe_disentanglement(&onehot, &labels, 4, 0).unwrap(),
            100.0
        );
        assert_eq!(
            probe_disentanglement(&onehot, &labels, 4, 7).unwrap(),
            probe_disentanglement(&onehot, &labels, 4, 7).unwrap()
        );

        let few: Vec<usize> = (0..60).map(|i| if i < 5 { 3 } else { i % 3 }).collect();
        assert!(probe_disentanglement(&random[..60], &few, 4, 0).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        // ties get average ranks: ranks (0, 1.5, 1.5, 3) vs (0, 1, 2, 3)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn reference_bank_enforces_neutral_unseen() {
        let w = world();
        let split = split_speakers(&w, 6, 0).unwrap();
        let mut bank = ReferenceBank::neutral(&w, &split, 2, 5, 0).unwrap();
        let unseen = split.unseen[0];
        let seen = split.seen[0];
        assert!(bank
            .insert(sample_utterance(&w, unseen, 2, &[1, 2], 0).unwrap())
            .is_err());
        assert!(bank
            .insert(sample_utterance(&w, seen, 2, &[1, 2], 0).unwrap())
            .is_ok());
        assert_eq!(bank.get(unseen, 3).unwrap().emotion, NEUTRAL);
        assert!(ReferenceBank::new(&split).get(seen, 0).is_err());
    }

    fn with_evaluator(f: impl FnOnce(&Evaluator)) {
        let w = world();
        let split = split_speakers(&w, 8, 0).unwrap();
        let cfg = ModelConfig {
            style_dim: 4,
            emotion_dim: 3,
            token_dim: 3,
            hidden: 8,
            layers: 1,
            ..Default::default()
        };
        let model = Model::new(
            DataDims {
                frame_dim: 8,
                vocab: 10,
                emotions: 4,
            },
            &cfg,
        )
        .unwrap();
        let store = model.init(1);
        let bank = ReferenceBank::neutral(&w, &split, 2, 6, 0).unwrap();
        let config = EvalConfig {
            n_samples: 16,
            steps: 10,
            n_seeds: 2,
            ..Default::default()
        };
        let ev = Evaluator {
            world: &w,
            split: &split,
            model: &model,
            store: &store,
            classifier: None,
            bank: &bank,
            schedule: NoiseSchedule::default(),
            config,
        };
        f(&ev)
    }

    #[test]
    fn conditions_cycle_speakers_and_emotions() {
        with_evaluator(|ev| {
            let (conds, styles, spk) = ev.conditions(SpeakerGroup::Unseen, 0).unwrap();
            assert_eq!(conds.len(), 16);
            assert_eq!(styles.len(), 16);
            assert!(spk.iter().all(|s| !ev.split.is_seen(*s)));
            let mut counts = [0; 4];
            for c in &conds {
                counts[c.emotion] += 1;
                assert_eq!(c.tokens.len(), 8);
            }
            assert_eq!(counts, [4; 4]);
        });
    }

    #[test]
    fn degenerate_sweep_equals_unguided_and_is_deterministic() {
        with_evaluator(|ev| {
            let unguided = ev
                .cell(GuidanceMode::None, 0.0, SpeakerGroup::Seen, 3)
                .unwrap();
            let sweep = ev
                .guidance_sweep(&[0.0], GuidanceMode::ClassifierFree, SpeakerGroup::Seen, 3)
                .unwrap();
            assert_eq!(sweep.len(), 1);
            assert_eq!(
                CellMetrics {
                    mode: GuidanceMode::None,
                    ..sweep[0].clone()
                },
                unguided
            );

            let gammas = [0.0, 0.5, 1.0];
            let a = sweep_csv(
                &ev.guidance_sweep(&gammas, GuidanceMode::ClassifierFree, SpeakerGroup::All, 1)
                    .unwrap(),
            );
            let b = sweep_csv(
                &ev.guidance_sweep(&gammas, GuidanceMode::ClassifierFree, SpeakerGroup::All, 1)
                    .unwrap(),
            );
            assert_eq!(a, b);
            assert_eq!(a.lines().count(), 4);
            assert_eq!(a.lines().next(), Some(SWEEP_HEADER));
            assert!(ev
                .guidance_sweep(
                    &[1.0, 0.5],
                    GuidanceMode::ClassifierFree,
                    SpeakerGroup::All,
                    1
                )
                .is_err());
            assert!(ev
                .guidance_sweep(&[], GuidanceMode::ClassifierFree, SpeakerGroup::All, 1)
                .is_err());
            assert!(ev
                .cell(GuidanceMode::Classifier, 1.0, SpeakerGroup::All, 1)
                .is_err());
        });
    }

    #[test]
    fn averaged_cell_and_reports() {
        with_evaluator(|ev| {
            let avg = ev
                .averaged(GuidanceMode::None, 0.0, SpeakerGroup::Seen)
                .unwrap();
            let c0 = ev
                .cell(GuidanceMode::None, 0.0, SpeakerGroup::Seen, 0)
                .unwrap();
            let c1 = ev
                .cell(GuidanceMode::None, 0.0, SpeakerGroup::Seen, 1)
                .unwrap();
            assert_eq!(avg.n, 32);
            assert!((avg.eca - (c0.eca + c1.eca) / 2.0).abs() < 1e-12);
            let reports = EvalReport::from_cell(&avg, "w", "c");
            assert_eq!(reports.len(), 5);
            assert!(reports
                .iter()
                .all(|r| r.n == 32 && r.world_hash == "w" && r.checkpoint_hash == "c"));
        });
    }
}
