//! End-to-end wiring from an [`ExperimentConfig`]: world and speaker split,
//! joint training, the noisy classifier for classifier guidance, style
//! vector collection and evaluation.

use crate::autodiff::ParamStore;
use crate::config::ExperimentConfig;
use crate::diffusion::{Condition, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::eval::{EvalConfig, Evaluator, ReferenceBank};
use crate::rng::{derive_index, derive_seed, seeded};
use crate::synthworld::{
    make_world, sample_utterance, split_speakers, SpeakerSplit, World, NEUTRAL,
};
use crate::training::{
    train_model, train_noisy_classifier, Checkpoint, DataDims, LabeledExample, Model,
    NoisyClassifier, RecordHook, TrainOutcome,
};

/// A world, its speaker split and the noise schedule, built from a config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: World,
    pub split: SpeakerSplit,
    pub schedule: NoiseSchedule,
}

/// Style vectors of real utterances with their labels.
#[derive(Clone, Debug, Default)]
pub struct StyleSet {
    pub vectors: Vec<Vec<f64>>,
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
}

impl StyleSet {
    /// Tab-separated rows `speaker, emotion, s_0 .. s_{d-1}` with a header.
    pub fn to_tsv(&self) -> String {
        let d = self.vectors.first().map_or(0, Vec::len);
        let mut out = String::from("speaker\temotion");
        for j in 0..d {
            out.push_str(&format!("\ts{j}"));
        }
        out.push('\n');
        for ((v, s), e) in self.vectors.iter().zip(&self.speakers).zip(&self.emotions) {
            out.push_str(&format!("{s}\t{e}"));
            for x in v {
                out.push_str(&format!("\t{x}"));
            }
            out.push('\n');
        }
        out
    }
}

impl Experiment {
    /// Builds the world from `config.world` with `config.seed`.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let world = make_world(&config.world, config.seed)?;
        Self::with_world(config, world)
    }

    /// Uses an existing world (e.g. read from disk) instead of building one.
    pub fn with_world(config: ExperimentConfig, world: World) -> Result<Self> {
        let split = split_speakers(&world, config.n_seen, config.seed)?;
        Ok(Self {
            config,
            world,
            split,
            schedule: NoiseSchedule::default(),
        })
    }

    pub fn dims(&self) -> DataDims {
        DataDims {
            frame_dim: self.world.frame_dim(),
            vocab: self.world.config.vocab,
            emotions: self.world.emotions(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.dims(), &self.config.model)
    }

    /// Joint training with the `[train]` settings.
    pub fn train(&self, on_record: RecordHook) -> Result<(Model, TrainOutcome)> {
        let model = self.model()?;
        let out = train_model(
            &model,
            &self.world,
            &self.split,
            &self.schedule,
            &self.config.train,
            on_record,
        )?;
        Ok((model, out))
    }

    pub fn checkpoint(&self, store: ParamStore) -> Checkpoint {
        Checkpoint {
            dims: self.dims(),
            model_config: self.config.model.clone(),
            train_config: self.config.train.clone(),
            world_hash: self.world.hash(),
            step: self.config.train.steps,
            model: store,
            classifier: None,
        }
    }

    /// Fails unless `ckpt` was trained on this experiment's world.
    pub fn check_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.world_hash != self.world.hash() {
            return invalid(format!(
                "checkpoint was trained on world {} but the config builds world {}",
                ckpt.world_hash,
                self.world.hash()
            ));
        }
        Ok(())
    }

    /// Neutral reference bank for evaluation and sampling.
    pub fn bank(&self) -> Result<ReferenceBank> {
        let e = &self.config.eval;
        ReferenceBank::neutral(
            &self.world,
            &self.split,
            e.refs_per_speaker,
            e.script_len,
            self.config.seed,
        )
    }

    /// Style vectors of `n` fresh seen-speaker utterances with emotions cycling.
    pub fn style_set(
        &self,
        model: &Model,
        store: &ParamStore,
        n: usize,
        seed: u64,
    ) -> Result<StyleSet> {
        let mut rng = seeded(derive_seed(seed, "style-set"));
        let noise = derive_seed(seed, "style-set-noise");
        let seen = &self.split.seen;
        let k = self.world.emotions();
        let mut set = StyleSet::default();
        for i in 0..n {
            let spk = seen[i % seen.len()];
            let e = (i / seen.len()) % k;
            let tokens = self
                .world
                .random_script(self.config.eval.script_len, &mut rng);
            let u = sample_utterance(&self.world, spk, e, &tokens, derive_index(noise, i as u64))?;
            set.vectors
                .push(model.encode_style(store, &u.frames)?.values);
            set.speakers.push(spk);
            set.emotions.push(e);
        }
        Ok(set)
    }

    /// Emotional seen-speaker utterances paired with the model's null-path
    /// prior mean, the mean classifier guidance samples around.
    pub fn classifier_data(
        &self,
        model: &Model,
        store: &ParamStore,
        n: usize,
        seed: u64,
    ) -> Result<Vec<LabeledExample>> {
        use rand::Rng as _;
        let mut rng = seeded(derive_seed(seed, "clf-data"));
        let noise = derive_seed(seed, "clf-data-noise");
        let nets = model.nets(store);
        let (lo, hi) = (self.config.train.min_len, self.config.train.max_len);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let spk = self.split.seen[rng.random_range(0..self.split.seen.len())];
            let label = i % self.world.emotions();
            let tokens = self
                .world
                .random_script(rng.random_range(lo..=hi), &mut rng);
            let u = sample_utterance(
                &self.world,
                spk,
                label,
                &tokens,
                derive_index(noise, 2 * i as u64),
            )?;
            let ref_tokens = self
                .world
                .random_script(rng.random_range(lo..=hi), &mut rng);
            let r = sample_utterance(
                &self.world,
                spk,
                NEUTRAL,
                &ref_tokens,
                derive_index(noise, 2 * i as u64 + 1),
            )?;
            let style = model.encode_style(store, &r.frames)?;
            let cond = Condition {
                tokens,
                style,
                emotion: label,
                seed: 0,
            };
            let mu = nets.prior_means(&[cond], true)?.remove(0);
            out.push(LabeledExample {
                y0: u.frames,
                mu,
                label,
            });
        }
        Ok(out)
    }

    /// Trains the noisy classifier on [`Experiment::classifier_data`].
    pub fn train_classifier(
        &self,
        model: &Model,
        store: &ParamStore,
    ) -> Result<(NoisyClassifier, ParamStore, Vec<f64>)> {
        let clf = NoisyClassifier::new(
            self.world.frame_dim(),
            self.world.emotions(),
            &self.config.model,
        );
        let data = self.classifier_data(model, store, 2000, self.config.seed)?;
        let (cstore, losses) =
            train_noisy_classifier(&clf, &data, &self.schedule, &self.config.classifier)?;
        Ok((clf, cstore, losses))
    }

    /// An evaluator over trained parameters with `config` as the protocol.
    pub fn evaluator<'a>(
        &'a self,
        model: &'a Model,
        store: &'a ParamStore,
        classifier: Option<(&'a NoisyClassifier, &'a ParamStore)>,
        bank: &'a ReferenceBank,
        config: EvalConfig,
    ) -> Evaluator<'a> {
        Evaluator {
            world: &self.world,
            split: &self.split,
            model,
            store,
            classifier,
            bank,
            schedule: self.schedule,
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.train.steps = 20;
        c.classifier.steps = 5;
        c.model.hidden = 8;
        c
    }

    #[test]
    fn pipeline_is_deterministic_and_consistent() {
        let ex = Experiment::new(small()).unwrap();
        let (model, a) = ex.train(None).unwrap();
        let (_, b) = ex.train(None).unwrap();
        assert_eq!(a.store, b.store);
        let ck = ex.checkpoint(a.store.clone());
        ex.check_checkpoint(&ck).unwrap();
        let other = Experiment::new(ExperimentConfig { seed: 1, ..small() }).unwrap();
        assert!(other.check_checkpoint(&ck).is_err());

        let set = ex.style_set(&model, &a.store, 12, 0).unwrap();
        assert_eq!(set.vectors.len(), 12);
        assert!(set.speakers.iter().all(|s| ex.split.is_seen(*s)));
        let tsv = set.to_tsv();
        assert_eq!(tsv.lines().count(), 13);
        assert_eq!(
            tsv.lines().next().unwrap().split('\t').count(),
            2 + ex.config.model.style_dim
        );

        let data = ex.classifier_data(&model, &a.store, 8, 0).unwrap();
        assert_eq!(data.len(), 8);
        for d in &data {
            assert_eq!(d.y0.shape(), d.mu.shape());
        }
        let (_, _, losses) = ex.train_classifier(&model, &a.store).unwrap();
        assert_eq!(losses.len(), 5);
    }
}
