use std::path::Path;

use crate::autodiff::{Container, ParamStore};
use crate::error::{Error, Result};
use crate::stylegen::ModelConfig;
use crate::synthworld::short_hash;

use super::classifier::ClassifierConfig;
use super::model::{DataDims, Model};
use super::train::TrainConfig;

/// Everything needed to resume sampling or evaluation: parameters of all
/// networks plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: DataDims,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub world_hash: String,
    pub step: usize,
    pub model: ParamStore,
    pub classifier: Option<(ClassifierConfig, ParamStore)>,
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn parse<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    let raw = c
        .meta(key)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_str(raw)
        .map_err(|e| Error::Format(format!("checkpoint metadata `{key}`: {e}")))
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.dims, &self.model_config)
    }

    pub fn to_container(&self) -> Container {
        let mut metadata = vec![
            ("dims".to_string(), json(&self.dims)),
            ("model_config".to_string(), json(&self.model_config)),
            ("train_config".to_string(), json(&self.train_config)),
            ("world_hash".to_string(), self.world_hash.clone()),
            ("step".to_string(), self.step.to_string()),
        ];
        let mut stores = vec![("model".to_string(), self.model.clone())];
        if let Some((cfg, store)) = &self.classifier {
            metadata.push(("classifier_config".to_string(), json(cfg)));
            stores.push(("classifier".to_string(), store.clone()));
        }
        Container { metadata, stores }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = c
            .store("model")
            .ok_or_else(|| Error::Format("checkpoint has no model store".into()))?
            .clone();
        let classifier = match c.store("classifier") {
            Some(s) => Some((parse(c, "classifier_config")?, s.clone())),
            None => None,
        };
        let step = c
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("checkpoint metadata lacks a valid `step`".into()))?;
        Ok(Self {
            dims: parse(c, "dims")?,
            model_config: parse(c, "model_config")?,
            train_config: parse(c, "train_config")?,
            world_hash: c.meta("world_hash").unwrap_or_default().to_string(),
            step,
            model,
            classifier,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Short content hash of the serialized checkpoint.
    pub fn hash(&self) -> String {
        short_hash(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint(with_classifier: bool) -> Checkpoint {
        let dims = DataDims {
            frame_dim: 8,
            vocab: 10,
            emotions: 4,
        };
        let model_config = ModelConfig {
            hidden: 8,
            ..Default::default()
        };
        let model = Model::new(dims, &model_config).unwrap();
        let classifier = with_classifier.then(|| {
            let clf = super::super::NoisyClassifier::new(8, 4, &model_config);
            (ClassifierConfig::default(), clf.init(4))
        });
        Checkpoint {
            dims,
            model_config,
            train_config: TrainConfig::default(),
            world_hash: "0123abcd".into(),
            step: 42,
            model: model.init(7),
            classifier,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for with in [false, true] {
            let c = checkpoint(with);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn save_load_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let c = checkpoint(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(Checkpoint::load(&dir.path().join("missing.bin")).is_err());
    }
}
