use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    index_tensor, inputs, softmax_in_place, Activation, FrameMatrix, Graph, Mlp, NodeId,
    ParamStore, Tensor,
};
use crate::diffusion::{
    perturb_with_noise, time_embedding, EmotionPosterior, NoiseSchedule, TIME_EMBED_DIM, T_MIN,
};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_index, derive_seed, normals, seeded};
use crate::stylegen::{row_segments, ModelConfig};

/// Emotion classifier on noisy frames: mean-pooled `Y_t` plus time
/// embedding, through an MLP, to `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClassifier {
    pub mlp: Mlp,
    pub frame_dim: usize,
    pub emotions: usize,
}

impl NoisyClassifier {
    pub fn new(frame_dim: usize, emotions: usize, cfg: &ModelConfig) -> Self {
        let dims = cfg.widths(frame_dim + TIME_EMBED_DIM, emotions);
        Self {
            mlp: Mlp::new("nclf", &dims, Activation::Tanh),
            frame_dim,
            emotions,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        self.mlp.init(&mut s);
        s
    }

    /// `y: N x D` stacked rows, `segments: N`, `temb: B x 5` -> logits `B x K`.
    pub fn build(&self, g: &mut Graph, y: NodeId, segments: NodeId, temb: NodeId) -> NodeId {
        let pooled = g.segment_mean(y, segments);
        let h = g.concat(&[pooled, temb]);
        self.mlp.build(g, h)
    }

    fn graph(&self) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let y = g.input_rows("y", self.frame_dim);
        let seg = g.index_input("segments");
        let temb = g.input_rows("temb", TIME_EMBED_DIM);
        let labels = g.index_input("labels");
        let logits = self.build(&mut g, y, seg, temb);
        g.set_output("logits", logits);
        let ce = g.softmax_cross_entropy(logits, labels);
        (g, logits, ce)
    }

    /// Per-utterance `p(e | Y_t)` for stacked rows.
    pub fn predict(
        &self,
        store: &ParamStore,
        y: &FrameMatrix,
        lengths: &[usize],
        t: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let mut feed = feed(y, lengths, t, &[]);
        feed.remove("labels");
        let mut g = Graph::new();
        let yy = g.input_rows("y", self.frame_dim);
        let seg = g.index_input("segments");
        let temb = g.input_rows("temb", TIME_EMBED_DIM);
        let logits = self.build(&mut g, yy, seg, temb);
        g.set_output("logits", logits);
        let out = g.evaluate(store, &feed)?;
        Ok(out["logits"].rows().map(softmax_row).collect())
    }
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let mut v = r.to_vec();
    softmax_in_place(&mut v);
    v
}

fn feed(
    y: &FrameMatrix,
    lengths: &[usize],
    t: f64,
    labels: &[usize],
) -> std::collections::HashMap<String, Tensor> {
    let e = time_embedding(t);
    inputs([
        ("y", y.clone()),
        ("segments", index_tensor(&row_segments(lengths))),
        (
            "temb",
            Tensor::matrix(lengths.len(), TIME_EMBED_DIM, e.repeat(lengths.len())).expect("sized"),
        ),
        ("labels", index_tensor(labels)),
    ])
}

/// A clean utterance, the prior mean it is perturbed toward, and its emotion.
#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub y0: FrameMatrix,
    pub mu: FrameMatrix,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 0.05,
            clip: 5.0,
            seed: 0,
        }
    }
}

/// Cross-entropy training on freshly perturbed examples with `t` uniform on
/// `[T_MIN, T]`. Returns the trained parameters and the per-step loss.
pub fn train_noisy_classifier(
    clf: &NoisyClassifier,
    data: &[LabeledExample],
    schedule: &NoiseSchedule,
    config: &ClassifierConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    schedule.validate()?;
    if data.is_empty() || config.batch_size == 0 {
        return invalid("classifier training needs data and a positive batch size");
    }
    let first = data[0].label;
    if data.iter().all(|d| d.label == first) {
        return invalid("classifier training data contains a single class");
    }
    if let Some(d) = data.iter().find(|d| d.label >= clf.emotions) {
        return invalid(format!("label {} out of range", d.label));
    }
    let mut store = clf.init(derive_seed(config.seed, "nclf-init"));
    let mut g = Graph::new();
    let y = g.input_rows("y", clf.frame_dim);
    let seg = g.index_input("segments");
    let temb = g.input_rows("temb", TIME_EMBED_DIM);
    let labels = g.index_input("labels");
    let logits = clf.build(&mut g, y, seg, temb);
    let ce = g.softmax_cross_entropy(logits, labels);
    let base = derive_seed(config.seed, "nclf-batch");
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = seeded(derive_index(base, step as u64));
        let mut rows = Vec::new();
        let (mut lengths, mut labs, mut tembs) = (vec![], vec![], vec![]);
        for _ in 0..config.batch_size {
            let ex = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(T_MIN..=schedule.t_end);
            let z = Tensor::new(ex.y0.shape().to_vec(), normals(&mut rng, ex.y0.len()))?;
            let (yt, _) = perturb_with_noise(&ex.y0, &ex.mu, t, schedule, &z)?;
            rows.push(yt);
            lengths.push(ex.y0.nrows());
            labs.push(ex.label);
            tembs.extend(time_embedding(t));
        }
        let feed = inputs([
            ("y", Tensor::vstack(&rows.iter().collect::<Vec<_>>())?),
            ("segments", index_tensor(&row_segments(&lengths))),
            (
                "temb",
                Tensor::matrix(lengths.len(), TIME_EMBED_DIM, tembs)?,
            ),
            ("labels", index_tensor(&labs)),
        ]);
        store.zero_grad();
        g.forward(&store, &feed).map_err(|e| match e {
            Error::NonFinite { node } => Error::Diverged {
                step,
                detail: format!("classifier: {node}"),
            },
            other => other,
        })?;
        losses.push(g.value(ce)?.item());
        g.backward(&mut store, ce, None)?;
        store.clip_grad_norm(config.clip);
        store.sgd_step(config.lr);
    }
    Ok((store, losses))
}

/// Held-out accuracy of the classifier on examples freshly perturbed to time `t`.
pub fn classifier_accuracy(
    clf: &NoisyClassifier,
    store: &ParamStore,
    data: &[LabeledExample],
    schedule: &NoiseSchedule,
    t: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return invalid("no evaluation data");
    }
    let mut correct = 0;
    for (i, ex) in data.iter().enumerate() {
        let z = Tensor::new(
            ex.y0.shape().to_vec(),
            normals(&mut seeded(derive_index(seed, i as u64)), ex.y0.len()),
        )?;
        let (yt, _) = perturb_with_noise(&ex.y0, &ex.mu, t, schedule, &z)?;
        let p = clf.predict(store, &yt, &[yt.nrows()], t)?;
        correct += (argmax(&p[0]) == ex.label) as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// Adapter exposing a trained classifier to the guided sampler.
pub struct ClassifierPosterior {
    store: ParamStore,
    graph: Graph,
    logits: NodeId,
    ce: NodeId,
}

impl ClassifierPosterior {
    pub fn new(clf: &NoisyClassifier, store: &ParamStore) -> Self {
        let (graph, logits, ce) = clf.graph();
        Self {
            store: store.clone(),
            graph,
            logits,
            ce,
        }
    }
}

impl EmotionPosterior for ClassifierPosterior {
    fn posterior_grad(
        &mut self,
        y: &FrameMatrix,
        lengths: &[usize],
        t: f64,
        targets: &[usize],
    ) -> Result<(Vec<Vec<f64>>, FrameMatrix)> {
        if targets.len() != lengths.len() {
            return invalid("one target per utterance required");
        }
        let feed = feed(y, lengths, t, targets);
        self.graph.forward(&self.store, &feed)?;
        let post = self
            .graph
            .value(self.logits)?
            .rows()
            .map(softmax_row)
            .collect();
        let grads = self.graph.backward(&mut self.store, self.ce, None)?;
        // ce is the mean of -log p over utterances
        let b = lengths.len() as f64;
        let g = grads
            .get("y")
            .ok_or_else(|| Error::MissingInput("y".into()))?
            .scale(-b);
        self.store.zero_grad();
        Ok((post, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{make_world, sample_utterance, World, WorldConfig, NEUTRAL};

    fn examples(world: &World, n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let (spk, label) = (rng.random_range(0..world.speakers()), i % world.emotions());
                let tokens = world.random_script(8, &mut rng);
                let u = sample_utterance(world, spk, label, &tokens, derive_index(seed, i as u64))
                    .unwrap();
                LabeledExample {
                    y0: u.frames,
                    mu: world.mean_frames(spk, NEUTRAL, &tokens).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn trained() -> (World, NoisyClassifier, ParamStore) {
        let world = make_world(&WorldConfig::default(), 0).unwrap();
        let clf = NoisyClassifier::new(8, 4, &ModelConfig::default());
        let data = examples(&world, 400, 1);
        let (store, _) = train_noisy_classifier(
            &clf,
            &data,
            &NoiseSchedule::default(),
            &ClassifierConfig::default(),
        )
        .unwrap();
        (world, clf, store)
    }

    #[test]
    fn accuracy_tracks_noise_level() {
        let (world, clf, store) = trained();
        let sched = NoiseSchedule::default();
        let held_out = examples(&world, 1000, 2);
        let early = classifier_accuracy(&clf, &store, &held_out, &sched, 0.05, 3).unwrap();
        let late = classifier_accuracy(&clf, &store, &held_out, &sched, sched.t_end, 3).unwrap();
        assert!(early > 0.9, "t = 0.05: {early}");
        assert!((late - 0.25).abs() <= 0.05, "t = T: {late}");
    }

    #[test]
    fn posterior_is_distribution_with_exact_gradient() {
        let (world, clf, store) = trained();
        let ex = examples(&world, 2, 4);
        let y = Tensor::vstack(&[&ex[0].y0, &ex[1].y0]).unwrap();
        let lengths = [ex[0].y0.nrows(), ex[1].y0.nrows()];
        let targets = [1, 3];
        let t = 0.3;
        let mut post = ClassifierPosterior::new(&clf, &store);
        let (p, grad) = post.posterior_grad(&y, &lengths, t, &targets).unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let objective = |y: &Tensor| -> f64 {
            let p = clf.predict(&store, y, &lengths, t).unwrap();
            p.iter().zip(&targets).map(|(r, &e)| r[e].ln()).sum()
        };
        let h = 1e-5;
        for i in [0, 5, 17, 40, y.len() - 1] {
            let (mut up, mut down) = (y.clone(), y.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            let numeric = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!(
                (grad.data()[i] - numeric).abs() < 1e-6 * numeric.abs().max(1.0),
                "entry {i}"
            );
        }
        // The adapter leaves no gradient behind between calls.
        let (_, again) = post.posterior_grad(&y, &lengths, t, &targets).unwrap();
        assert_eq!(grad, again);
    }

    #[test]
    fn rejects_single_class_and_bad_labels() {
        let world = make_world(&WorldConfig::default(), 0).unwrap();
        let clf = NoisyClassifier::new(8, 4, &ModelConfig::default());
        let sched = NoiseSchedule::default();
        let cfg = ClassifierConfig {
            steps: 1,
            ..Default::default()
        };
        let mut data = examples(&world, 8, 1);
        for d in data.iter_mut() {
            d.label = 2;
        }
        assert!(train_noisy_classifier(&clf, &data, &sched, &cfg).is_err());
        data[0].label = 9;
        assert!(train_noisy_classifier(&clf, &data, &sched, &cfg).is_err());
        assert!(train_noisy_classifier(&clf, &[], &sched, &cfg).is_err());
    }
}
