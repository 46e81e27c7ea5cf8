use std::collections::HashMap;

use crate::autodiff::{FrameMatrix, Graph, ParamStore, Tensor};
use crate::error::{invalid, Result};
use crate::stylegen::{split_rows, EmotionLabel, EmotionTable, Generator, StyleVector};

use super::sampler::{sample_reverse, SamplerOptions, ScoreFn};
use super::schedule::NoiseSchedule;
use super::scorenet::ScoreNet;

/// `eps_c + gamma (eps_c - eps_u)`. At `gamma = 0` returns `eps_c` unchanged.
pub fn combine_cfg(
    eps_cond: &FrameMatrix,
    eps_uncond: &FrameMatrix,
    gamma: f64,
) -> Result<FrameMatrix> {
    if eps_cond.shape() != eps_uncond.shape() {
        return invalid(format!(
            "conditional {:?} vs unconditional {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        ));
    }
    if gamma == 0.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.zip(eps_uncond, |c, u| c + gamma * (c - u))
}

/// A differentiable emotion posterior `p(e | Y_t)` over stacked utterances.
pub trait EmotionPosterior {
    /// Returns the per-utterance posteriors and the gradient of
    /// `sum_u log p(targets[u] | Y_u)` with respect to the stacked rows `y`.
    fn posterior_grad(
        &mut self,
        y: &FrameMatrix,
        lengths: &[usize],
        t: f64,
        targets: &[usize],
    ) -> Result<(Vec<Vec<f64>>, FrameMatrix)>;
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(0.0..=1.0 + 1e-12).contains(&x)) || (total - 1.0).abs() > 1e-9 {
        return invalid(format!(
            "classifier output is not a probability distribution (sum {total})"
        ));
    }
    Ok(())
}

/// `score_uncond + gamma ∇ log p(target | Y_t)`. At `gamma = 0` returns
/// `score_uncond` unchanged without consulting the classifier.
pub fn guided_score_cg(
    score_uncond: &FrameMatrix,
    clf: &mut dyn EmotionPosterior,
    y_t: &FrameMatrix,
    lengths: &[usize],
    t: f64,
    targets: &[usize],
    gamma: f64,
) -> Result<FrameMatrix> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return invalid(format!("guidance scale must be >= 0, got {gamma}"));
    }
    if gamma == 0.0 {
        return Ok(score_uncond.clone());
    }
    let (post, grad) = clf.posterior_grad(y_t, lengths, t, targets)?;
    for p in &post {
        check_distribution(p)?;
    }
    if grad.shape() != score_uncond.shape() {
        return invalid("classifier gradient shape differs from the score");
    }
    score_uncond.zip(&grad, |s, g| s + gamma * g)
}

/// A score network with fixed conditioning (prior mean and style/emotion rows).
pub struct NetScore<'a> {
    net: ScoreNet,
    store: &'a ParamStore,
    graph: Graph,
    feed: HashMap<String, Tensor>,
    rows: usize,
}

impl<'a> NetScore<'a> {
    pub fn new(
        net: &ScoreNet,
        store: &'a ParamStore,
        mu: FrameMatrix,
        cond: Option<Tensor>,
    ) -> Result<Self> {
        let rows = mu.nrows();
        let mut feed = HashMap::new();
        match (net.condition_dim(), cond) {
            (0, None) => {}
            (c, Some(t)) if t.shape() == [rows, c] => {
                feed.insert("cond".to_string(), t);
            }
            _ => return invalid("conditioning rows do not match the score network"),
        }
        feed.insert("mu".to_string(), mu);
        Ok(Self {
            net: net.clone(),
            store,
            graph: net.inference_graph(),
            feed,
            rows,
        })
    }
}

impl ScoreFn for NetScore<'_> {
    fn score(&mut self, y: &FrameMatrix, t: f64) -> Result<FrameMatrix> {
        self.feed.insert("y".into(), y.clone());
        self.net.time_feed(&mut self.feed, t, self.rows);
        Ok(self
            .graph
            .evaluate(self.store, &self.feed)?
            .remove("score")
            .expect("declared output"))
    }
}

/// Classifier-free guided score.
pub struct CfgScore<'a> {
    pub cond: NetScore<'a>,
    pub uncond: NetScore<'a>,
    pub gamma: f64,
    last: Option<f64>,
}

impl<'a> CfgScore<'a> {
    pub fn new(cond: NetScore<'a>, uncond: NetScore<'a>, gamma: f64) -> Self {
        Self {
            cond,
            uncond,
            gamma,
            last: None,
        }
    }
}

impl ScoreFn for CfgScore<'_> {
    fn score(&mut self, y: &FrameMatrix, t: f64) -> Result<FrameMatrix> {
        let c = self.cond.score(y, t)?;
        if self.gamma == 0.0 {
            self.last = Some(0.0);
            return combine_cfg(&c, &c, 0.0);
        }
        let u = self.uncond.score(y, t)?;
        let out = combine_cfg(&c, &u, self.gamma)?;
        self.last = Some(out.sub(&c)?.norm());
        Ok(out)
    }

    fn guidance_norm(&self) -> Option<f64> {
        self.last
    }
}

/// Classifier-guided score over stacked utterances.
pub struct CgScore<'a> {
    pub uncond: &'a mut dyn ScoreFn,
    pub clf: &'a mut dyn EmotionPosterior,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub gamma: f64,
    last: Option<f64>,
}

impl<'a> CgScore<'a> {
    pub fn new(
        uncond: &'a mut dyn ScoreFn,
        clf: &'a mut dyn EmotionPosterior,
        lengths: Vec<usize>,
        targets: Vec<usize>,
        gamma: f64,
    ) -> Self {
        Self {
            uncond,
            clf,
            lengths,
            targets,
            gamma,
            last: None,
        }
    }
}

impl ScoreFn for CgScore<'_> {
    fn score(&mut self, y: &FrameMatrix, t: f64) -> Result<FrameMatrix> {
        let s = self.uncond.score(y, t)?;
        let out = guided_score_cg(&s, self.clf, y, &self.lengths, t, &self.targets, self.gamma)?;
        self.last = Some(out.sub(&s)?.norm());
        Ok(out)
    }

    fn guidance_norm(&self) -> Option<f64> {
        self.last
    }
}

/// The trained networks needed for sampling.
#[derive(Clone, Copy)]
pub struct ConditionalNets<'a> {
    pub score: &'a ScoreNet,
    pub generator: &'a Generator,
    pub table: &'a EmotionTable,
    pub store: &'a ParamStore,
}

/// What to generate: a script, a style (from a reference), a target emotion
/// and the seed for all sampler noise.
#[derive(Clone, Debug)]
pub struct Condition {
    pub tokens: Vec<usize>,
    pub style: StyleVector,
    pub emotion: usize,
    pub seed: u64,
}

/// Samples plus any warnings about the model they came from.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub samples: Vec<FrameMatrix>,
    pub warnings: Vec<String>,
}

/// Stacked prior means and score-net conditioning rows for a batch.
pub struct PreparedBatch {
    pub mu: FrameMatrix,
    pub cond: Tensor,
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl ConditionalNets<'_> {
    pub fn prepare(&self, conds: &[Condition], null: bool) -> Result<PreparedBatch> {
        if conds.is_empty() {
            return invalid("no conditions to sample");
        }
        let labels: Vec<EmotionLabel> = conds
            .iter()
            .map(|c| {
                if null {
                    EmotionLabel::Null
                } else {
                    EmotionLabel::Emotion(c.emotion)
                }
            })
            .collect();
        let embs = labels
            .iter()
            .map(|&l| self.table.emotion_embed(self.store, l))
            .collect::<Result<Vec<_>>>()?;
        let tokens: Vec<&[usize]> = conds.iter().map(|c| c.tokens.as_slice()).collect();
        let styles: Vec<StyleVector> = conds.iter().map(|c| c.style.clone()).collect();
        let mus = self
            .generator
            .generate_mu_batch(self.store, &tokens, &styles, &embs)?;
        let lengths: Vec<usize> = conds.iter().map(|c| c.tokens.len()).collect();
        let mut cond_rows = Vec::new();
        for ((c, e), &n) in conds.iter().zip(&embs).zip(&lengths) {
            let row: Vec<f64> = c.style.values.iter().chain(e).copied().collect();
            cond_rows.extend(std::iter::repeat_n(row, n));
        }
        Ok(PreparedBatch {
            mu: Tensor::vstack(&mus.iter().collect::<Vec<_>>())?,
            cond: Tensor::from_rows(&cond_rows)?,
            lengths,
            seeds: conds.iter().map(|c| c.seed).collect(),
        })
    }

    /// Prior means `f(x, s, e)` (or `f(x, s, ∅)` when `null`).
    pub fn prior_means(&self, conds: &[Condition], null: bool) -> Result<Vec<FrameMatrix>> {
        let b = self.prepare(conds, null)?;
        split_rows(&b.mu, &b.lengths)
    }

    /// Unguided sampling: conditional on each target emotion, or fully on
    /// the null path when `null` is set.
    pub fn sample_unguided(
        &self,
        conds: &[Condition],
        null: bool,
        schedule: &NoiseSchedule,
        opts: &SamplerOptions,
    ) -> Result<Vec<FrameMatrix>> {
        let b = self.prepare(conds, null)?;
        let mut score = NetScore::new(self.score, self.store, b.mu.clone(), Some(b.cond))?;
        let y = sample_reverse(
            &mut score, &b.mu, &b.lengths, &b.seeds, schedule, opts, None,
        )?;
        split_rows(&y, &b.lengths)
    }

    /// Classifier-free guidance: the conditional and null paths each get
    /// their own prior mean, the drift uses the conditional one.
    pub fn sample_cfg(
        &self,
        conds: &[Condition],
        schedule: &NoiseSchedule,
        opts: &SamplerOptions,
        gamma: f64,
        trace: Option<&mut dyn std::io::Write>,
    ) -> Result<Sampled> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return invalid(format!("guidance scale must be >= 0, got {gamma}"));
        }
        let c = self.prepare(conds, false)?;
        let u = self.prepare(conds, true)?;
        let cond = NetScore::new(self.score, self.store, c.mu.clone(), Some(c.cond))?;
        let uncond = NetScore::new(self.score, self.store, u.mu, Some(u.cond))?;
        let mut score = CfgScore::new(cond, uncond, gamma);
        let y = sample_reverse(
            &mut score, &c.mu, &c.lengths, &c.seeds, schedule, opts, trace,
        )?;
        let mut warnings = vec![];
        if self.table.null_row_untrained(self.store) {
            warnings.push(
                "null emotion embedding was never trained; classifier-free guidance is unreliable"
                    .into(),
            );
        }
        Ok(Sampled {
            samples: split_rows(&y, &c.lengths)?,
            warnings,
        })
    }

    /// Classifier guidance on the null path: emotion enters only through `clf`.
    pub fn sample_cg(
        &self,
        clf: &mut dyn EmotionPosterior,
        conds: &[Condition],
        schedule: &NoiseSchedule,
        opts: &SamplerOptions,
        gamma: f64,
        trace: Option<&mut dyn std::io::Write>,
    ) -> Result<Vec<FrameMatrix>> {
        let u = self.prepare(conds, true)?;
        let mut uncond = NetScore::new(self.score, self.store, u.mu.clone(), Some(u.cond))?;
        let targets = conds.iter().map(|c| c.emotion).collect();
        let mut score = CgScore::new(&mut uncond, clf, u.lengths.clone(), targets, gamma);
        let y = sample_reverse(
            &mut score, &u.mu, &u.lengths, &u.seeds, schedule, opts, trace,
        )?;
        split_rows(&y, &u.lengths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, seeded};
    use crate::stylegen::{ModelConfig, EMOTION_NULL};
    use crate::synthworld::{
        analytic_score, make_world, EmotionPrior, WorldConfig, WorldPosterior,
    };
    use crate::training::{DataDims, Model};

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::matrix(rows, cols, normals(&mut seeded(seed), rows * cols)).unwrap()
    }

    /// Posterior that ignores its input.
    struct Constant(Vec<f64>);

    impl EmotionPosterior for Constant {
        fn posterior_grad(
            &mut self,
            y: &FrameMatrix,
            lengths: &[usize],
            _t: f64,
            _targets: &[usize],
        ) -> Result<(Vec<Vec<f64>>, FrameMatrix)> {
            Ok((
                vec![self.0.clone(); lengths.len()],
                Tensor::zeros(y.shape()),
            ))
        }
    }

    #[test]
    fn cfg_combination() {
        let c = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let u = Tensor::zeros(&[1, 2]);
        assert_eq!(combine_cfg(&c, &u, 1.0).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(combine_cfg(&c, &u, 0.0).unwrap(), c);
        let a = mat(3, 2, 1);
        for g in [0.5, 1.25, 7.0] {
            assert_eq!(combine_cfg(&a, &a, g).unwrap(), a);
        }
        assert!(combine_cfg(&a, &c, 1.0).is_err());
    }

    #[test]
    fn cg_reductions_and_validation() {
        let s = mat(2, 3, 1);
        let y = mat(2, 3, 2);
        let mut uniform = Constant(vec![0.25; 4]);
        assert_eq!(
            guided_score_cg(&s, &mut uniform, &y, &[2], 0.5, &[1], 0.0).unwrap(),
            s
        );
        assert_eq!(
            guided_score_cg(&s, &mut uniform, &y, &[2], 0.5, &[1], 3.0).unwrap(),
            s
        );
        let mut broken = Constant(vec![0.5, 0.6]);
        assert!(guided_score_cg(&s, &mut broken, &y, &[2], 0.5, &[1], 1.0).is_err());
        assert!(guided_score_cg(&s, &mut uniform, &y, &[2], 0.5, &[1], -1.0).is_err());
    }

    #[test]
    fn analytic_cg_at_unit_scale_is_conditional_score() {
        let world = make_world(&WorldConfig::default(), 3).unwrap();
        let sched = NoiseSchedule::default();
        let tokens = vec![1, 4, 4, 7];
        let mu = mat(4, 8, 5).scale(0.5);
        for (k, t) in [0.01, 0.2, 0.7].into_iter().enumerate() {
            let y = world
                .mean_frames(2, 1, &tokens)
                .unwrap()
                .add(&mat(4, 8, 10 + k as u64).scale(0.5))
                .unwrap();
            let uncond =
                analytic_score(&world, &[2], EmotionPrior::All, &tokens, &mu, &y, t, &sched)
                    .unwrap();
            let mut post = WorldPosterior {
                world: &world,
                speakers: vec![2],
                tokens: vec![tokens.clone()],
                mu: mu.clone(),
                schedule: sched,
            };
            for e in 0..world.emotions() {
                let guided = guided_score_cg(&uncond, &mut post, &y, &[4], t, &[e], 1.0).unwrap();
                let cond = analytic_score(
                    &world,
                    &[2],
                    EmotionPrior::One(e),
                    &tokens,
                    &mu,
                    &y,
                    t,
                    &sched,
                )
                .unwrap();
                let err = guided.sub(&cond).unwrap().norm();
                assert!(err < 1e-8 * cond.norm().max(1.0), "t {t} e {e}: {err}");
            }
        }
    }

    fn setup() -> (Model, ParamStore, Vec<Condition>) {
        let cfg = ModelConfig {
            style_dim: 3,
            emotion_dim: 2,
            token_dim: 2,
            hidden: 8,
            layers: 1,
            ..Default::default()
        };
        let model = Model::new(
            DataDims {
                frame_dim: 3,
                vocab: 5,
                emotions: 3,
            },
            &cfg,
        )
        .unwrap();
        let store = model.init(9);
        let conds = (0..3)
            .map(|i| Condition {
                tokens: vec![i, 4, 1 + i][..2 + i % 2].to_vec(),
                style: StyleVector {
                    values: normals(&mut seeded(i as u64), 3),
                },
                emotion: i % 3,
                seed: 100 + i as u64,
            })
            .collect();
        (model, store, conds)
    }

    #[test]
    fn guided_samplers_reduce_at_zero_scale() {
        let (model, store, conds) = setup();
        let nets = model.nets(&store);
        let sched = NoiseSchedule::default();
        for stochastic in [false, true] {
            let opts = SamplerOptions {
                steps: 20,
                stochastic,
            };
            let cond = nets.sample_unguided(&conds, false, &sched, &opts).unwrap();
            let uncond = nets.sample_unguided(&conds, true, &sched, &opts).unwrap();
            assert_eq!(
                nets.sample_cfg(&conds, &sched, &opts, 0.0, None)
                    .unwrap()
                    .samples,
                cond
            );
            let mut clf = Constant(vec![1.0 / 3.0; 3]);
            assert_eq!(
                nets.sample_cg(&mut clf, &conds, &sched, &opts, 0.0, None)
                    .unwrap(),
                uncond
            );
            assert_ne!(cond, uncond);
            let again = nets
                .sample_cfg(&conds, &sched, &opts, 1.25, None)
                .unwrap()
                .samples;
            assert_eq!(
                again,
                nets.sample_cfg(&conds, &sched, &opts, 1.25, None)
                    .unwrap()
                    .samples
            );
            assert_ne!(again, cond);
        }
    }

    #[test]
    fn untrained_null_row_warns() {
        let (model, mut store, conds) = setup();
        let sched = NoiseSchedule::default();
        let opts = SamplerOptions {
            steps: 5,
            stochastic: true,
        };
        let out = model
            .nets(&store)
            .sample_cfg(&conds, &sched, &opts, 1.0, None)
            .unwrap();
        assert_eq!(out.warnings.len(), 1);
        let moved = store.get(EMOTION_NULL).unwrap().map(|v| v + 0.01);
        store.insert(EMOTION_NULL, moved);
        assert!(model
            .nets(&store)
            .sample_cfg(&conds, &sched, &opts, 1.0, None)
            .unwrap()
            .warnings
            .is_empty());
    }
}
