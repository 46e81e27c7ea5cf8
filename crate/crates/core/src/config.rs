//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers, command-line overrides of the form `section.key=value`, and a
//! canonical resolved rendering whose hash names run directories.
//!
//! ```text
//! seed = 0
//!
//! [world]
//! speakers = 10
//! n_seen = 8
//!
//! [train]
//! steps = 20000
//! clf_steps = 3000
//! ```
//!
//! Every key is optional. `[world]` takes the world fields plus `n_seen`;
//! `[train]` takes the joint-training fields plus the noisy-classifier
//! fields prefixed with `clf_`. Seeds of the individual stages all derive
//! from the top-level `seed`.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::diffusion::GuidanceMode;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::stylegen::ModelConfig;
use crate::synthworld::WorldConfig;
use crate::training::{ClassifierConfig, TrainConfig};

/// Settings of the `sample` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub mode: GuidanceMode,
    pub gamma: f64,
    pub steps: usize,
    pub stochastic: bool,
    pub speaker: usize,
    pub emotion: usize,
    /// Number of samples, each with its own script and noise.
    pub count: usize,
    pub script_len: usize,
    /// Length of the Neutral reference utterance.
    pub ref_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::ClassifierFree,
            gamma: 1.25,
            steps: 100,
            stochastic: true,
            speaker: 0,
            emotion: 1,
            count: 8,
            script_len: 8,
            ref_len: 8,
        }
    }
}

/// Every setting of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Number of speakers seen in training; the rest are held out.
    pub n_seen: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 0;
        Self {
            seed,
            world: WorldConfig::default(),
            n_seen: 8,
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..Default::default()
            },
            classifier: ClassifierConfig {
                seed,
                ..Default::default()
            },
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const TOP: &str = "";
const SECTIONS: [&str; 5] = ["world", "model", "train", "sample", "eval"];
const CLF_PREFIX: &str = "clf_";

type Sections = BTreeMap<&'static str, Map<String, Value>>;

fn object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config sections serialize to objects"),
    }
}

fn from_object<T: DeserializeOwned>(section: &str, m: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config {
        line: 0,
        msg: format!("[{section}]: {e}"),
    })
}

impl ExperimentConfig {
    /// Parses a config file body. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::resolve(text, &[])
    }

    /// Parses `text` and then applies `section.key=value` overrides.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut sections = Self::default().sections();
        let mut current = TOP;
        let mut seen: BTreeMap<(&str, String), usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config {
                        line,
                        msg: format!("malformed section header `{body}`"),
                    })?
                    .trim();
                current = SECTIONS
                    .iter()
                    .find(|s| **s == name)
                    .ok_or_else(|| Error::Config {
                        line,
                        msg: format!("unknown section `[{name}]`"),
                    })?;
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let key = key.trim();
            if let Some(prev) = seen.insert((current, key.to_string()), line) {
                return Err(Error::Config {
                    line,
                    msg: format!("`{key}` already set on line {prev}"),
                });
            }
            set(&mut sections, current, key, value.trim(), line)?;
        }
        for o in overrides {
            let bad = || Error::Config {
                line: 0,
                msg: format!("override `{o}` is not `section.key=value`"),
            };
            let (path, value) = o.split_once('=').ok_or_else(bad)?;
            let (section, key) = match path.trim().split_once('.') {
                Some((s, k)) => (
                    *SECTIONS
                        .iter()
                        .find(|n| **n == s)
                        .ok_or_else(|| Error::Config {
                            line: 0,
                            msg: format!("override `{o}`: unknown section `{s}`"),
                        })?,
                    k,
                ),
                None => (TOP, path.trim()),
            };
            set(&mut sections, section, key, value.trim(), 0)?;
        }
        Self::from_sections(sections)
    }

    fn sections(&self) -> Sections {
        let mut s = Sections::new();
        s.insert(
            TOP,
            Map::from_iter([("seed".to_string(), Value::from(self.seed))]),
        );
        let mut world = object(&self.world);
        world.insert("n_seen".into(), Value::from(self.n_seen));
        s.insert("world", world);
        s.insert("model", object(&self.model));
        let mut train = object(&self.train);
        train.remove("seed");
        let mut clf = object(&self.classifier);
        clf.remove("seed");
        for (k, v) in clf {
            train.insert(format!("{CLF_PREFIX}{k}"), v);
        }
        s.insert("train", train);
        s.insert("sample", object(&self.sample));
        s.insert("eval", object(&self.eval));
        s
    }

    fn from_sections(mut s: Sections) -> Result<Self> {
        let take = |s: &mut Sections, name: &str| s.remove(name).expect("all sections present");
        let seed = take(&mut s, TOP)["seed"]
            .as_u64()
            .expect("validated on set");
        let mut world = take(&mut s, "world");
        let n_seen = world
            .remove("n_seen")
            .and_then(|v| v.as_u64())
            .expect("validated on set") as usize;
        let mut train = take(&mut s, "train");
        let mut clf = Map::new();
        for k in train
            .keys()
            .filter(|k| k.starts_with(CLF_PREFIX))
            .cloned()
            .collect::<Vec<_>>()
        {
            let v = train.remove(&k).expect("listed");
            clf.insert(k[CLF_PREFIX.len()..].to_string(), v);
        }
        train.insert("seed".into(), Value::from(seed));
        clf.insert("seed".into(), Value::from(seed));
        let cfg = Self {
            seed,
            world: from_object("world", world)?,
            n_seen,
            model: from_object("model", take(&mut s, "model"))?,
            train: from_object("train", train)?,
            classifier: from_object("train", clf)?,
            sample: from_object("sample", take(&mut s, "sample"))?,
            eval: from_object("eval", take(&mut s, "eval"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that do not need a built world.
    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                line: 0,
                msg: format!("[{section}]: {e}"),
            })
        };
        wrap("model", self.model.validate())?;
        wrap("train", self.train.validate())?;
        let w = &self.world;
        if self.n_seen == 0 || self.n_seen >= w.speakers {
            return Err(Error::Config {
                line: 0,
                msg: format!(
                    "[world] n_seen must be in 1..{}, got {}",
                    w.speakers, self.n_seen
                ),
            });
        }
        if self.sample.speaker >= w.speakers || self.sample.emotion >= w.emotions {
            return Err(Error::Config {
                line: 0,
                msg: "[sample] speaker or emotion out of range".into(),
            });
        }
        Ok(())
    }

    /// Canonical rendering: every key, sections in a fixed order, keys sorted.
    pub fn to_resolved(&self) -> String {
        let s = self.sections();
        let mut out = String::new();
        for (k, v) in &s[TOP] {
            out.push_str(&format!("{k} = {}\n", render(v)));
        }
        for name in SECTIONS {
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in &s[name] {
                out.push_str(&format!("{k} = {}\n", render(v)));
            }
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of [`ExperimentConfig::to_resolved`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_resolved().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Replaces one known key, parsing `raw` according to the type of its default.
fn set(sections: &mut Sections, section: &str, key: &str, raw: &str, line: usize) -> Result<()> {
    let where_ = if section.is_empty() {
        format!("`{key}`")
    } else {
        format!("`{section}.{key}`")
    };
    let err = |msg: String| Error::Config { line, msg };
    let map = sections.get_mut(section).expect("known section");
    let slot = map
        .get_mut(key)
        .ok_or_else(|| err(format!("unknown key {where_}")))?;
    let parsed = match slot {
        Value::Bool(_) => match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(err(format!("{where_} expects true or false, got `{raw}`"))),
        },
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| {
            err(format!(
                "{where_} expects a non-negative integer, got `{raw}`"
            ))
        })?,
        Value::Number(_) => Value::from(
            parse_float(raw)
                .ok_or_else(|| err(format!("{where_} expects a number, got `{raw}`")))?,
        ),
        Value::Array(_) => {
            let items: Option<Vec<Value>> = raw
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_float(p).map(Value::from))
                .collect();
            Value::Array(items.ok_or_else(|| {
                err(format!(
                    "{where_} expects comma-separated numbers, got `{raw}`"
                ))
            })?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null | Value::Object(_) => unreachable!("config fields are scalars or lists"),
    };
    if let Value::String(s) = &parsed {
        // enum fields: reject unknown variants here so the line is reported
        let probe = Value::String(s.clone());
        let ok = match key {
            "mode" | "sweep_mode" => serde_json::from_value::<GuidanceMode>(probe).is_ok(),
            "sweep_group" => serde_json::from_value::<crate::eval::SpeakerGroup>(probe).is_ok(),
            _ => true,
        };
        if !ok {
            return Err(err(format!("{where_} has no variant `{s}`")));
        }
    }
    *slot = parsed;
    Ok(())
}

fn parse_float(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(e: Error) -> (usize, String) {
        match e {
            Error::Config { line, msg } => (line, msg),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
        assert_eq!(
            ExperimentConfig::parse("# only a comment\n\n").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn values_land_in_their_fields() {
        let text = "seed = 7\n[world]\nspeakers = 12\nn_seen = 9\n[train]\nlr = 0.02 # inline comment\nclf_steps = 10\n\
                    [eval]\nsweep_gammas = 0, 1, 2\nsweep_mode = cg\n[sample]\nstochastic = false\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.classifier.seed, 7);
        assert_eq!(c.world.speakers, 12);
        assert_eq!(c.n_seen, 9);
        assert_eq!(c.train.lr, 0.02);
        assert_eq!(c.classifier.steps, 10);
        assert_eq!(c.eval.sweep_gammas, vec![0.0, 1.0, 2.0]);
        assert_eq!(c.eval.sweep_mode, GuidanceMode::Classifier);
        assert!(!c.sample.stochastic);
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let c = ExperimentConfig::resolve(
            "[train]\nsteps = 5\n",
            &[
                "train.steps=9".into(),
                "seed=3".into(),
                "eval.cfg_gammas=1.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.steps, 9);
        assert_eq!(c.seed, 3);
        assert_eq!(c.eval.cfg_gammas, vec![1.5]);
    }

    #[test]
    fn errors_carry_line_and_field() {
        let (line, msg) =
            line_of(ExperimentConfig::parse("seed = 1\n[world]\nspeakerz = 3\n").unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("world.speakerz"), "{msg}");
        let (line, msg) = line_of(ExperimentConfig::parse("[train]\nlr = fast\n").unwrap_err());
        assert_eq!(line, 2);
        assert!(msg.contains("train.lr"), "{msg}");
        let (line, _) = line_of(ExperimentConfig::parse("[nope]\n").unwrap_err());
        assert_eq!(line, 1);
        let (line, _) = line_of(ExperimentConfig::parse("[world]\nvocab 3\n").unwrap_err());
        assert_eq!(line, 2);
        let (line, msg) =
            line_of(ExperimentConfig::parse("[train]\nsteps = 1\nsteps = 2\n").unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("line 2"));
        let (line, _) = line_of(ExperimentConfig::parse("[train]\nseed = 2\n").unwrap_err());
        assert_eq!(line, 2);
        let (line, _) = line_of(ExperimentConfig::parse("[sample]\nmode = loud\n").unwrap_err());
        assert_eq!(line, 2);
        let (line, _) = line_of(ExperimentConfig::parse("[world]\nn_seen = 10\n").unwrap_err());
        assert_eq!(line, 0);
        assert!(ExperimentConfig::resolve("", &["nodot".into()]).is_err());
        assert!(ExperimentConfig::resolve("", &["world.speakers".into()]).is_err());
    }

    #[test]
    fn resolved_text_round_trips_and_hashes_stably() {
        let c = ExperimentConfig::resolve(
            "",
            &["train.lr=0.003".into(), "eval.sweep_gammas=0,0.5".into()],
        )
        .unwrap();
        let text = c.to_resolved();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_resolved(), text);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 12);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
        assert!(text.starts_with("seed = 0\n\n[world]\n"));
    }
}
