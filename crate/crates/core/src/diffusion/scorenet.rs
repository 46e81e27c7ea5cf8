use crate::autodiff::{inputs, Activation, FrameMatrix, Graph, Mlp, NodeId, ParamStore, Tensor};
use crate::error::{invalid, Result};
use crate::rng::{normals, seeded, Rng};
use crate::stylegen::{ModelConfig, StyleVector};

use super::schedule::{time_embedding, NoiseSchedule, TIME_EMBED_DIM};

/// Lower cutoff on diffusion time for training and sampling; `var(t)`
/// vanishes at `t = 0`.
pub const T_MIN: f64 = 1e-3;

/// Fixed time-dependent scaling around the score MLP. With
/// `c(t) = 1 / sqrt(data_scale² rho(t)² + var(t))` the MLP sees
/// `r = c(t) (Y_t - mu)` in place of `Y_t` and the score is
/// `c(t) (mlp - r)`, so a clean Gaussian of spread `data_scale` around `mu`
/// needs a zero MLP output at every `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Precondition {
    pub data_scale: f64,
    pub schedule: NoiseSchedule,
}

impl Precondition {
    pub fn scale(&self, t: f64) -> f64 {
        let r = self.schedule.rho(t);
        1.0 / (self.data_scale * self.data_scale * r * r + self.schedule.var(t)).sqrt()
    }

    /// Row-aligned `N x D` scale for per-row times.
    pub fn rows(&self, row_times: &[f64], frame_dim: usize) -> Tensor {
        let data = row_times
            .iter()
            .flat_map(|&t| std::iter::repeat_n(self.scale(t), frame_dim))
            .collect();
        Tensor::matrix(row_times.len(), frame_dim, data).expect("sized")
    }
}

/// Per-row MLP over `concat(Y_t, temb(t), mu, s, e)` that outputs the score
/// `∇ log p_t(Y_t)` directly, optionally inside a [`Precondition`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub mlp: Mlp,
    pub frame_dim: usize,
    pub precondition: Option<Precondition>,
}

impl ScoreNet {
    pub fn new(frame_dim: usize, cfg: &ModelConfig) -> Self {
        Self::with_condition(frame_dim, cfg.style_dim + cfg.emotion_dim, cfg)
    }

    /// A score net over `concat(Y_t, temb, mu)` only, for conditioning-free experiments.
    pub fn unconditioned(frame_dim: usize, cfg: &ModelConfig) -> Self {
        Self::with_condition(frame_dim, 0, cfg)
    }

    fn with_condition(frame_dim: usize, cond: usize, cfg: &ModelConfig) -> Self {
        let input = 2 * frame_dim + TIME_EMBED_DIM + cond;
        let precondition = (cfg.score_data_scale > 0.0).then(|| Precondition {
            data_scale: cfg.score_data_scale,
            schedule: NoiseSchedule::default(),
        });
        Self {
            mlp: Mlp::new("score", &cfg.widths(input, frame_dim), Activation::Tanh),
            frame_dim,
            precondition,
        }
    }

    /// Scale rows for an input batch, or `None` without preconditioning.
    pub fn scale_rows(&self, row_times: &[f64]) -> Option<Tensor> {
        self.precondition
            .as_ref()
            .map(|p| p.rows(row_times, self.frame_dim))
    }

    pub fn init(&self, store: &mut ParamStore) {
        self.mlp.init(store);
    }

    /// Width of the style + emotion conditioning block.
    pub fn condition_dim(&self) -> usize {
        self.mlp.input_dim() - 2 * self.frame_dim - TIME_EMBED_DIM
    }

    /// All inputs are row-aligned `N x _` nodes; `cond` is the concatenated
    /// style and emotion rows, or `None` for an unconditioned net. `scale`
    /// carries [`ScoreNet::scale_rows`] and is required iff the net is
    /// preconditioned.
    pub fn build(
        &self,
        g: &mut Graph,
        y: NodeId,
        temb: NodeId,
        mu: NodeId,
        cond: Option<NodeId>,
        scale: Option<NodeId>,
    ) -> NodeId {
        let first = match scale {
            Some(c) => {
                let neg_mu = g.scale(mu, -1.0);
                let diff = g.add(y, neg_mu);
                g.mul(c, diff)
            }
            None => y,
        };
        let mut parts = vec![first, temb, mu];
        parts.extend(cond);
        let h = g.concat(&parts);
        let mut out = self.mlp.build(g, h);
        if let Some(c) = scale {
            let neg_r = g.scale(first, -1.0);
            let inner = g.add(out, neg_r);
            out = g.mul(c, inner);
        }
        g.label(out, "score")
    }

    /// Graph with row inputs `y`, `temb`, `mu`, and `cond` / `scale` when
    /// the net uses them.
    pub fn inference_graph(&self) -> Graph {
        let mut g = Graph::new();
        let y = g.input_rows("y", self.frame_dim);
        let temb = g.input_rows("temb", TIME_EMBED_DIM);
        let mu = g.input_rows("mu", self.frame_dim);
        let cond = (self.condition_dim() > 0).then(|| g.input_rows("cond", self.condition_dim()));
        let scale = self
            .precondition
            .is_some()
            .then(|| g.input_rows("scale", self.frame_dim));
        let out = self.build(&mut g, y, temb, mu, cond, scale);
        g.set_output("score", out);
        g
    }

    /// Inputs of [`ScoreNet::inference_graph`] that depend on `t`.
    pub fn time_feed(
        &self,
        feed: &mut std::collections::HashMap<String, Tensor>,
        t: f64,
        rows: usize,
    ) {
        feed.insert("temb".into(), time_rows(t, rows));
        if let Some(s) = self.scale_rows(&vec![t; rows]) {
            feed.insert("scale".into(), s);
        }
    }

    pub fn estimate_score(
        &self,
        store: &ParamStore,
        y_t: &FrameMatrix,
        t: f64,
        mu: &FrameMatrix,
        s: &StyleVector,
        e_emb: &[f64],
    ) -> Result<FrameMatrix> {
        if y_t.shape() != mu.shape() {
            return invalid(format!("Y_t {:?} vs mu {:?}", y_t.shape(), mu.shape()));
        }
        let cond: Vec<f64> = s.values.iter().chain(e_emb).copied().collect();
        if cond.len() != self.condition_dim() {
            return invalid(format!(
                "conditioning has width {}, net expects {}",
                cond.len(),
                self.condition_dim()
            ));
        }
        let g = self.inference_graph();
        let mut feed = inputs([("y", y_t.clone()), ("mu", mu.clone())]);
        self.time_feed(&mut feed, t, y_t.nrows());
        if !cond.is_empty() {
            feed.insert("cond".into(), condition_rows(&cond, y_t.nrows()));
        }
        Ok(g.evaluate(store, &feed)?
            .remove("score")
            .expect("declared output"))
    }
}

/// `n` copies of the time embedding as rows.
pub fn time_rows(t: f64, n: usize) -> Tensor {
    let e = time_embedding(t);
    Tensor::matrix(n, TIME_EMBED_DIM, e.repeat(n)).expect("sized")
}

/// `n` copies of a conditioning vector as rows.
pub fn condition_rows(cond: &[f64], n: usize) -> Tensor {
    Tensor::matrix(n, cond.len(), cond.repeat(n)).expect("sized")
}

/// Forward kernel with explicit noise: returns `(Y_t, target_score)` where
/// `Y_t = mu + (Y0 - mu) rho(t) + sqrt(var(t)) z` and the target is `-z / sqrt(var(t))`.
pub fn perturb_with_noise(
    y0: &FrameMatrix,
    mu: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
    z: &FrameMatrix,
) -> Result<(FrameMatrix, FrameMatrix)> {
    if !(t > 0.0 && t <= schedule.t_end) {
        return invalid(format!(
            "perturbation time must lie in (0, {}], got {t}",
            schedule.t_end
        ));
    }
    if y0.shape() != mu.shape() || y0.shape() != z.shape() {
        return invalid(format!(
            "shapes Y0 {:?}, mu {:?}, z {:?} differ",
            y0.shape(),
            mu.shape(),
            z.shape()
        ));
    }
    let rho = schedule.rho(t);
    let sd = schedule.var(t).sqrt();
    let mean = mu.zip(y0, |m, y| m + (y - m) * rho)?;
    let y_t = mean.zip(z, |m, z| m + sd * z)?;
    Ok((y_t, z.scale(-1.0 / sd)))
}

pub fn perturb(
    y0: &FrameMatrix,
    mu: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
    noise_seed: u64,
) -> Result<(FrameMatrix, FrameMatrix)> {
    let z = Tensor::new(
        y0.shape().to_vec(),
        normals(&mut seeded(noise_seed), y0.len()),
    )?;
    perturb_with_noise(y0, mu, t, schedule, &z)
}

/// `mean(var(t) * (eps - target)^2)`; zero for a perfect estimator.
pub fn dsm_objective(
    eps: &FrameMatrix,
    target: &FrameMatrix,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if eps.shape() != target.shape() {
        return invalid("estimate and target shapes differ");
    }
    let v = schedule.var(t);
    Ok(v * eps
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / eps.len() as f64)
}

/// Random quantities for one denoising-score-matching evaluation over
/// stacked utterances: per-utterance times and per-row noise, laid out as
/// row-aligned graph inputs.
#[derive(Clone, Debug)]
pub struct DsmDraw {
    pub times: Vec<f64>,
    /// Time of every row.
    pub row_times: Vec<f64>,
    pub temb: Tensor,
    pub rho: Tensor,
    pub one_minus_rho: Tensor,
    pub sigma: Tensor,
    pub neg_z: Tensor,
}

impl DsmDraw {
    pub fn sample(
        lengths: &[usize],
        frame_dim: usize,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Self {
        use rand::Rng as _;
        let times: Vec<f64> = lengths
            .iter()
            .map(|_| rng.random_range(T_MIN..=schedule.t_end))
            .collect();
        let n: usize = lengths.iter().sum();
        let z = normals(rng, n * frame_dim);
        Self::with_noise(lengths, frame_dim, schedule, times, z)
    }

    pub fn with_noise(
        lengths: &[usize],
        frame_dim: usize,
        schedule: &NoiseSchedule,
        times: Vec<f64>,
        z: Vec<f64>,
    ) -> Self {
        let n: usize = lengths.iter().sum();
        let (mut temb, mut rho, mut omr, mut sigma, mut row_times) =
            (vec![], vec![], vec![], vec![], vec![]);
        for (&len, &t) in lengths.iter().zip(&times) {
            let r = schedule.rho(t);
            let sd = schedule.var(t).sqrt();
            for _ in 0..len {
                row_times.push(t);
                temb.extend(time_embedding(t));
                rho.extend(std::iter::repeat_n(r, frame_dim));
                omr.extend(std::iter::repeat_n(1.0 - r, frame_dim));
                sigma.extend(std::iter::repeat_n(sd, frame_dim));
            }
        }
        let m = |d: Vec<f64>, c: usize| Tensor::matrix(n, c, d).expect("sized");
        Self {
            times,
            row_times,
            temb: m(temb, TIME_EMBED_DIM),
            rho: m(rho, frame_dim),
            one_minus_rho: m(omr, frame_dim),
            sigma: m(sigma, frame_dim),
            neg_z: m(z.iter().map(|v| -v).collect(), frame_dim),
        }
    }

    pub fn feed(&self, net: &ScoreNet, feed: &mut std::collections::HashMap<String, Tensor>) {
        if let Some(s) = net.scale_rows(&self.row_times) {
            feed.insert("dsm.scale".into(), s);
        }
        feed.insert("dsm.temb".into(), self.temb.clone());
        feed.insert("dsm.rho".into(), self.rho.clone());
        feed.insert("dsm.one_minus_rho".into(), self.one_minus_rho.clone());
        feed.insert("dsm.sigma".into(), self.sigma.clone());
        feed.insert("dsm.neg_z".into(), self.neg_z.clone());
    }
}

/// Adds the DSM term to `g`: perturbs `y0` toward `mu` and returns
/// `mean((sigma * eps + z)^2)`, which equals `var(t) |eps - target|^2`
/// averaged per element. Expects the inputs fed by [`DsmDraw::feed`].
pub fn build_dsm(
    g: &mut Graph,
    net: &ScoreNet,
    y0: NodeId,
    mu: NodeId,
    cond: Option<NodeId>,
) -> NodeId {
    let d = net.frame_dim;
    let temb = g.input_rows("dsm.temb", TIME_EMBED_DIM);
    let rho = g.input_rows("dsm.rho", d);
    let omr = g.input_rows("dsm.one_minus_rho", d);
    let sigma = g.input_rows("dsm.sigma", d);
    let neg_z = g.input_rows("dsm.neg_z", d);
    let scale = net
        .precondition
        .is_some()
        .then(|| g.input_rows("dsm.scale", d));
    let a = g.mul(rho, y0);
    let b = g.mul(omr, mu);
    let mean = g.add(a, b);
    let noise = g.mul(sigma, neg_z);
    let noise = g.scale(noise, -1.0);
    let y_t = g.add(mean, noise);
    g.label(y_t, "y_t");
    let eps = net.build(g, y_t, temb, mu, cond, scale);
    let weighted = g.mul(sigma, eps);
    let loss = g.squared_error(weighted, neg_z);
    g.label(loss, "dsm")
}

/// One training example for [`dsm_loss`].
#[derive(Clone, Debug)]
pub struct DsmExample {
    pub y0: FrameMatrix,
    pub mu: FrameMatrix,
    pub style: StyleVector,
    pub emotion_emb: Vec<f64>,
}

/// Denoising score matching over a batch; accumulates gradients for the
/// score-net parameters into `store` and returns the loss.
pub fn dsm_loss(
    net: &ScoreNet,
    store: &mut ParamStore,
    batch: &[DsmExample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return invalid("dsm_loss needs a nonempty batch");
    }
    let lengths: Vec<usize> = batch.iter().map(|b| b.y0.nrows()).collect();
    let y0 = Tensor::vstack(&batch.iter().map(|b| &b.y0).collect::<Vec<_>>())?;
    let mu = Tensor::vstack(&batch.iter().map(|b| &b.mu).collect::<Vec<_>>())?;
    let cond_rows: Vec<Vec<f64>> = batch
        .iter()
        .flat_map(|b| {
            let c: Vec<f64> = b
                .style
                .values
                .iter()
                .chain(&b.emotion_emb)
                .copied()
                .collect();
            std::iter::repeat_n(c, b.y0.nrows())
        })
        .collect();
    let draw = DsmDraw::sample(&lengths, net.frame_dim, schedule, &mut seeded(seed));
    let mut g = Graph::new();
    let y0_in = g.input_rows("y0", net.frame_dim);
    let mu_in = g.input_rows("mu", net.frame_dim);
    let cond = (net.condition_dim() > 0).then(|| g.input_rows("cond", net.condition_dim()));
    let loss = build_dsm(&mut g, net, y0_in, mu_in, cond);
    let mut feed = inputs([("y0", y0), ("mu", mu)]);
    if cond.is_some() {
        feed.insert("cond".into(), Tensor::from_rows(&cond_rows)?);
    }
    draw.feed(net, &mut feed);
    g.forward(store, &feed)?;
    let value = g.value(loss)?.item();
    g.backward(store, loss, None)?;
    Ok(value)
}
