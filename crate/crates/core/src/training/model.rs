use crate::autodiff::{Activation, FrameMatrix, Mlp, ParamStore};
use crate::diffusion::{ConditionalNets, ScoreNet};
use crate::error::{invalid, Result};
use crate::stylegen::{EmotionTable, Generator, ModelConfig, StyleEncoder, StyleVector};

/// Sizes the model takes from the world it is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DataDims {
    pub frame_dim: usize,
    pub vocab: usize,
    pub emotions: usize,
}

/// Every network of the system. Parameters live in a single store under the
/// prefixes `style.`, `emotion.`, `gen.`, `score.` and `probe.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: DataDims,
    pub config: ModelConfig,
    pub encoder: StyleEncoder,
    pub table: EmotionTable,
    pub generator: Generator,
    pub score: ScoreNet,
    /// Emotion probe on style vectors, trained adversarially.
    pub probe: Mlp,
}

impl Model {
    pub fn new(dims: DataDims, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if dims.frame_dim == 0 || dims.vocab == 0 || dims.emotions < 2 {
            return invalid(format!("unsupported data dimensions {dims:?}"));
        }
        Ok(Self {
            dims,
            config: config.clone(),
            encoder: StyleEncoder::new(dims.frame_dim, config),
            table: EmotionTable::new(dims.emotions, config),
            generator: Generator::new(dims.vocab, dims.frame_dim, config),
            score: ScoreNet::new(dims.frame_dim, config),
            probe: Mlp::new(
                "probe",
                &[config.style_dim, dims.emotions],
                Activation::Tanh,
            ),
        })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new(seed);
        self.encoder.init(&mut store);
        self.table.init(&mut store);
        self.generator.init(&mut store);
        self.score.init(&mut store);
        self.probe.init(&mut store);
        store
    }

    pub fn nets<'a>(&'a self, store: &'a ParamStore) -> ConditionalNets<'a> {
        ConditionalNets {
            score: &self.score,
            generator: &self.generator,
            table: &self.table,
            store,
        }
    }

    pub fn encode_style(
        &self,
        store: &ParamStore,
        ref_frames: &FrameMatrix,
    ) -> Result<StyleVector> {
        self.encoder.encode_style(store, ref_frames)
    }
}
