use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{index_tensor, inputs, FrameMatrix, Graph, NodeId, ParamStore, Tensor};
use crate::diffusion::{build_dsm, DsmDraw, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_index, derive_seed, seeded};
use crate::stylegen::{row_segments, EMOTION_NULL};
use crate::synthworld::{sample_utterance, SpeakerSplit, Utterance, World};

use super::model::Model;

/// Optimisation and loss settings for joint training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Gradient-reversal scale.
    pub alpha: f64,
    /// Per-sample probability of replacing the emotion embedding with the null row.
    pub p_null: f64,
    pub lr: f64,
    pub clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub w_recon: f64,
    pub w_dsm: f64,
    pub w_dat: f64,
    /// Let the score-matching loss backpropagate into the generator and encoder.
    pub dsm_through_condition: bool,
    /// Learning-rate multiplier for the adversarial probe, which is also
    /// clipped separately from the other parameters.
    pub probe_lr_scale: f64,
    /// L2 penalty on the probe parameters.
    pub probe_weight_decay: f64,
    /// Feed the probe style vectors standardized by running (non-differentiated)
    /// per-dimension mean and standard deviation.
    pub probe_standardize: bool,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            p_null: 0.1,
            lr: 1e-2,
            clip: 5.0,
            steps: 20000,
            batch_size: 16,
            w_recon: 1.0,
            w_dsm: 1.0,
            w_dat: 0.5,
            dsm_through_condition: false,
            probe_lr_scale: 20.0,
            probe_weight_decay: 0.01,
            probe_standardize: true,
            min_len: 4,
            max_len: 12,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.p_null) {
            return invalid(format!("p_null must lie in [0, 1), got {}", self.p_null));
        }
        if [self.w_recon, self.w_dsm, self.w_dat]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return invalid("loss weights must be non-negative");
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && self.probe_lr_scale > 0.0) {
            return invalid("lr, clip and probe_lr_scale must be positive");
        }
        if self.batch_size == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return invalid(
                "batch_size and utterance lengths must be positive with min_len <= max_len",
            );
        }
        Ok(())
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub dsm: f64,
    pub dat: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub grad_style: f64,
    pub grad_gen: f64,
    pub grad_score: f64,
    pub grad_emotion: f64,
    pub grad_probe: f64,
    pub grad_null: f64,
}

/// Training utterances; each one also serves as its own style reference.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub utterances: Vec<Utterance>,
    /// Utterances whose emotion embedding is replaced by the null row.
    pub null: Vec<bool>,
}

impl TrainBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.tokens.len()).collect()
    }
}

/// Draws batch `step` of a run; a pure function of `(seed, step)`.
pub fn draw_batch(
    world: &World,
    speakers: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<TrainBatch> {
    if speakers.is_empty() {
        return invalid("no training speakers");
    }
    let base = derive_index(derive_seed(config.seed, "batch"), step as u64);
    let mut rng = seeded(base);
    let max_len = config.max_len.min(world.config.max_len);
    let min_len = config.min_len.min(max_len);
    let mut utterances = Vec::with_capacity(config.batch_size);
    let mut null = Vec::with_capacity(config.batch_size);
    for i in 0..config.batch_size {
        let spk = speakers[rng.random_range(0..speakers.len())];
        let emo = rng.random_range(0..world.emotions());
        let len = rng.random_range(min_len..=max_len);
        let tokens = world.random_script(len, &mut rng);
        utterances.push(sample_utterance(
            world,
            spk,
            emo,
            &tokens,
            derive_index(base, i as u64),
        )?);
        null.push(rng.random::<f64>() < config.p_null);
    }
    Ok(TrainBatch { utterances, null })
}

fn is_probe(name: &str) -> bool {
    name.starts_with("probe.")
}

struct TrainGraph {
    graph: Graph,
    total: NodeId,
    recon: NodeId,
    dsm: NodeId,
    dat: Option<NodeId>,
    style: NodeId,
}

fn build_train_graph(model: &Model, config: &TrainConfig) -> Result<TrainGraph> {
    let d = model.dims.frame_dim;
    let mut g = Graph::new();
    let frames = g.input_rows("frames", d);
    let segments = g.index_input("segments");
    let tokens = g.index_input("tokens");
    let emo_idx = g.index_input("emotion_index");
    let labels = g.index_input("labels");

    let s = model.encoder.build(&mut g, frames, segments);
    let s_rows = g.gather(s, segments);
    let table = model.table.build(&mut g);
    let e_rows = g.gather(table, emo_idx);
    let mu = model.generator.build(&mut g, tokens, s_rows, e_rows);
    let recon = g.squared_error(mu, frames);
    g.label(recon, "recon");

    let (mu_c, s_c) = if config.dsm_through_condition {
        (mu, s_rows)
    } else {
        (g.detach(mu), g.detach(s_rows))
    };
    let cond = g.concat(&[s_c, e_rows]);
    let dsm = build_dsm(&mut g, &model.score, frames, mu_c, Some(cond));

    let wr = g.scale(recon, config.w_recon);
    let wd = g.scale(dsm, config.w_dsm);
    let mut total = g.add(wr, wd);
    let mut dat = None;
    if config.w_dat > 0.0 {
        let mut r = g.grad_reverse(s, config.alpha)?;
        if config.probe_standardize {
            let dim = model.config.style_dim;
            let shift = g.input("probe_shift", &[Some(dim)]);
            let scale = g.input("probe_scale", &[Some(dim)]);
            r = g.add(r, shift);
            r = g.mul(r, scale);
        }
        let logits = model.probe.build(&mut g, r);
        let ce = g.softmax_cross_entropy(logits, labels);
        g.label(ce, "dat");
        let wc = g.scale(ce, config.w_dat);
        total = g.add(total, wc);
        dat = Some(ce);
    }
    g.label(total, "total");
    Ok(TrainGraph {
        graph: g,
        total,
        recon,
        dsm,
        dat,
        style: s,
    })
}

fn batch_feed(
    model: &Model,
    batch: &TrainBatch,
    draw: &DsmDraw,
) -> Result<HashMap<String, Tensor>> {
    let lengths = batch.lengths();
    let frames = Tensor::vstack(
        &batch
            .utterances
            .iter()
            .map(|u| &u.frames)
            .collect::<Vec<_>>(),
    )?;
    let tokens: Vec<usize> = batch
        .utterances
        .iter()
        .flat_map(|u| u.tokens.iter().copied())
        .collect();
    let null_index = model.dims.emotions;
    let emo: Vec<usize> = batch
        .utterances
        .iter()
        .zip(&batch.null)
        .flat_map(|(u, &n)| {
            std::iter::repeat_n(if n { null_index } else { u.emotion }, u.tokens.len())
        })
        .collect();
    let labels: Vec<usize> = batch.utterances.iter().map(|u| u.emotion).collect();
    let mut feed = inputs([
        ("frames", frames),
        ("segments", index_tensor(&row_segments(&lengths))),
        ("tokens", index_tensor(&tokens)),
        ("emotion_index", index_tensor(&emo)),
        ("labels", index_tensor(&labels)),
    ]);
    draw.feed(&model.score, &mut feed);
    Ok(feed)
}

/// Callback invoked with each step's loss record.
pub type RecordHook<'a> = Option<&'a mut dyn FnMut(&LossRecord) -> Result<()>>;

/// Result of [`train_model`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub trace: Vec<LossRecord>,
}

/// Joint training of encoder, emotion table, generator, score net and (when
/// `w_dat > 0`) the adversarial emotion probe on the seen speakers.
///
/// `on_record` is called after every step, e.g. to stream the loss trace.
pub fn train_model(
    model: &Model,
    world: &World,
    split: &SpeakerSplit,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    mut on_record: RecordHook,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    if split.seen.is_empty() {
        return invalid("split has no seen speakers");
    }
    let mut store = model.init(derive_seed(config.seed, "init"));
    let mut tg = build_train_graph(model, config)?;
    let mut trace = Vec::with_capacity(config.steps);
    let noise_base = derive_seed(config.seed, "dsm");
    let mut stats = RunningStats::new(model.config.style_dim);
    for step in 0..config.steps {
        let batch = draw_batch(world, &split.seen, config, step)?;
        let draw = DsmDraw::sample(
            &batch.lengths(),
            model.dims.frame_dim,
            schedule,
            &mut seeded(derive_index(noise_base, step as u64)),
        );
        let mut feed = batch_feed(model, &batch, &draw)?;
        if config.w_dat > 0.0 && config.probe_standardize {
            let (shift, scale) = stats.shift_scale();
            feed.insert("probe_shift".into(), Tensor::vector(shift));
            feed.insert("probe_scale".into(), Tensor::vector(scale));
        }
        store.zero_grad();
        tg.graph.forward(&store, &feed).map_err(|e| match e {
            Error::NonFinite { node } => Error::Diverged {
                step,
                detail: format!("non-finite value at {node}"),
            },
            other => other,
        })?;
        tg.graph.backward(&mut store, tg.total, None)?;
        stats.update(tg.graph.value(tg.style)?);
        let value = |id: NodeId| tg.graph.value(id).map(|t| t.item());
        let rec = LossRecord {
            step,
            total: value(tg.total)?,
            recon: value(tg.recon)?,
            dsm: value(tg.dsm)?,
            dat: tg.dat.map(value).transpose()?.unwrap_or(0.0),
            grad_norm: 0.0,
            grad_style: store.grad_norm("style."),
            grad_gen: store.grad_norm("gen."),
            grad_score: store.grad_norm("score."),
            grad_emotion: store.grad_norm("emotion."),
            grad_probe: store.grad_norm("probe."),
            grad_null: store.grad_norm(EMOTION_NULL),
        };
        let grad_norm = rec
            .grad_probe
            .hypot(store.clip_grad_norm_where(config.clip, |k| !is_probe(k)));
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        store.add_weight_decay_where(config.probe_weight_decay, is_probe);
        store.clip_grad_norm_where(config.clip, is_probe);
        store.sgd_step_where(config.lr, |k| !is_probe(k));
        store.sgd_step_where(config.lr * config.probe_lr_scale, is_probe);
        let rec = LossRecord { grad_norm, ..rec };
        if let Some(f) = on_record.as_deref_mut() {
            f(&rec)?;
        }
        trace.push(rec);
    }
    Ok(TrainOutcome { store, trace })
}

/// Exponential moving mean and variance of style vectors, per dimension.
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    seen: bool,
}

impl RunningStats {
    const MOMENTUM: f64 = 0.99;

    fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            seen: false,
        }
    }

    fn update(&mut self, s: &Tensor) {
        let (rows, dim) = (s.nrows(), self.mean.len());
        let data = s.data();
        let m = if self.seen { Self::MOMENTUM } else { 0.0 };
        for j in 0..dim {
            let bm = (0..rows).map(|i| data[i * dim + j]).sum::<f64>() / rows as f64;
            let bv = (0..rows)
                .map(|i| (data[i * dim + j] - bm).powi(2))
                .sum::<f64>()
                / rows as f64;
            self.mean[j] = m * self.mean[j] + (1.0 - m) * bm;
            self.var[j] = m * self.var[j] + (1.0 - m) * bv;
        }
        self.seen = true;
    }

    fn shift_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let shift = self.mean.iter().map(|m| -m).collect();
        let scale = self.var.iter().map(|v| 1.0 / (v + 1e-6).sqrt()).collect();
        (shift, scale)
    }
}

/// Style references with their true emotion labels.
#[derive(Clone, Debug)]
pub struct DatBatch {
    pub refs: Vec<FrameMatrix>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatRecord {
    pub loss: f64,
    pub encoder_grad_norm: f64,
    pub probe_grad_norm: f64,
}

/// Computes the adversarial emotion loss `L_e` of the probe on
/// `grad_reverse(s, alpha)` and accumulates its gradients into `store`
/// (after zeroing them): the probe receives `+dL_e`, the encoder `-alpha dL_e`.
pub fn dat_gradients(
    model: &Model,
    store: &mut ParamStore,
    batch: &DatBatch,
    alpha: f64,
) -> Result<f64> {
    if batch.refs.is_empty() || batch.labels.len() != batch.refs.len() {
        return invalid(format!(
            "DAT batch has {} references but {} labels",
            batch.refs.len(),
            batch.labels.len()
        ));
    }
    if let Some(l) = batch.labels.iter().find(|&&l| l >= model.dims.emotions) {
        return invalid(format!("emotion label {l} out of range"));
    }
    let lengths: Vec<usize> = batch.refs.iter().map(|r| r.nrows()).collect();
    let mut g = Graph::new();
    let frames = g.input_rows("frames", model.dims.frame_dim);
    let segments = g.index_input("segments");
    let labels = g.index_input("labels");
    let s = model.encoder.build(&mut g, frames, segments);
    let r = g.grad_reverse(s, alpha)?;
    let logits = model.probe.build(&mut g, r);
    let ce = g.softmax_cross_entropy(logits, labels);
    let feed = inputs([
        (
            "frames",
            Tensor::vstack(&batch.refs.iter().collect::<Vec<_>>())?,
        ),
        ("segments", index_tensor(&row_segments(&lengths))),
        ("labels", index_tensor(&batch.labels)),
    ]);
    store.zero_grad();
    g.forward(store, &feed)?;
    let loss = g.value(ce)?.item();
    g.backward(store, ce, None)?;
    Ok(loss)
}

/// One SGD step on `L_e` alone with gradient reversal between style and probe.
pub fn dat_step(
    model: &Model,
    store: &mut ParamStore,
    batch: &DatBatch,
    alpha: f64,
    lr: f64,
) -> Result<DatRecord> {
    let loss = dat_gradients(model, store, batch, alpha)?;
    let rec = DatRecord {
        loss,
        encoder_grad_norm: store.grad_norm("style."),
        probe_grad_norm: store.grad_norm("probe."),
    };
    store.sgd_step(lr);
    Ok(rec)
}
