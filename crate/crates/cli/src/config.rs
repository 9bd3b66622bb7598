//! Run configuration: defaults, overlaid by a JSON file of flat dotted keys,
//! overlaid by `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use fpad_core::aetrain::AeTrainConfig;
use fpad_core::gantrain::GanTrainConfig;
use fpad_core::models::ArchConfig;
use fpad_core::preproc::AugmentConfig;
use fpad_core::rng::derive_named_seed;
use fpad_core::synthdata::{Attack, AttackKind, CorpusSpec, SynthParams};
use fpad_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_bona_train: usize,
    pub n_bona_val: usize,
    pub n_pa_val: usize,
    pub attacks: Vec<AttackKind>,
    pub attack_magnitude: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = CorpusSpec::default();
        CorpusSection {
            n_bona_train: d.n_bona_train,
            n_bona_val: d.n_bona_val,
            n_pa_val: d.n_pa_val,
            attacks: AttackKind::ALL.to_vec(),
            attack_magnitude: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness; split into data, init, training and sampling.
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SynthParams,
    pub corpus: CorpusSection,
    pub augment: AugmentConfig,
    pub arch: ArchConfig,
    pub gan: GanTrainConfig,
    pub ae: AeTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            synth: SynthParams::default(),
            corpus: CorpusSection::default(),
            augment: AugmentConfig::default(),
            arch: ArchConfig::default(),
            gan: GanTrainConfig::default(),
            ae: AeTrainConfig::default(),
        }
    }
}

/// Keys derived from the root seed rather than set directly.
const DERIVED_KEYS: [&str; 3] = ["synth.seed", "gan.seed", "ae.seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub training: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn from_root(seed: u64) -> Self {
        Seeds {
            data: derive_named_seed(seed, "data"),
            init: derive_named_seed(seed, "init"),
            training: derive_named_seed(seed, "training"),
            sampling: derive_named_seed(seed, "sampling"),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = k.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("schema keys never nest under a leaf");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Every settable key with its default value.
pub fn default_keys() -> BTreeMap<String, Value> {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("defaults serialise"), &mut flat);
    for k in DERIVED_KEYS {
        flat.remove(k);
    }
    flat
}

/// Flat dotted keys of a config file body. Nested objects are accepted
/// and flattened.
pub fn parse_config_file(bytes: &[u8]) -> Result<BTreeMap<String, Value>> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
    if !v.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    let mut flat = BTreeMap::new();
    flatten("", &v, &mut flat);
    flat.remove("");
    Ok(flat)
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; unknown keys are errors.
    pub fn resolve(file: Option<&BTreeMap<String, Value>>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut flat = default_keys();
        let layers = file.into_iter().flat_map(|f| f.iter()).chain(overrides.iter().map(|(k, v)| (k, v)));
        for (k, v) in layers {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        let mut cfg: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        let seeds = Seeds::from_root(cfg.seed);
        cfg.synth.seed = seeds.data;
        cfg.gan.seed = derive_named_seed(seeds.training, "gan");
        cfg.ae.seed = derive_named_seed(seeds.training, "ae");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Some(parse_config_file(&bytes)?)
            }
            None => None,
        };
        let overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        RunConfig::resolve(file.as_ref(), &overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.synth.validate().map_err(cfg)?;
        self.augment.validate().map_err(cfg)?;
        self.arch.validate().map_err(cfg)?;
        self.gan.validate()?;
        self.ae.validate()?;
        self.corpus_spec()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let attacks = self
            .corpus
            .attacks
            .iter()
            .map(|&k| Attack::new(k, self.corpus.attack_magnitude))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if attacks.is_empty() && self.corpus.n_pa_val > 0 {
            return Err(Error::Config("corpus.attacks is empty but corpus.n_pa_val > 0".into()));
        }
        Ok(CorpusSpec {
            n_bona_train: self.corpus.n_bona_train,
            n_bona_val: self.corpus.n_bona_val,
            n_pa_val: self.corpus.n_pa_val,
            params: self.synth.clone(),
            attacks,
            seed: self.seeds().data,
        })
    }

    /// Flat dotted view of the resolved configuration.
    pub fn to_flat_json(&self) -> String {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut flat);
        serde_json::to_string_pretty(&flat).expect("config serialises")
    }
}
