//! The run configuration document: one JSON file drives data generation,
//! training and the experiment grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{BackgroundProfile, ContentProfile, CorpusConfig, DomainSpec};
use crate::error::{Error, Result};
use crate::fmm::MixConfig;
use crate::netcore::{ModelConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Fam,
    Fmm,
    FmmFam,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Fam, Variant::Fmm, Variant::FmmFam];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fam => "fam",
            Variant::Fmm => "fmm",
            Variant::FmmFam => "fmm_fam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?} (baseline|fam|fmm|fmm_fam)")))
    }

    pub fn uses_fam(self) -> bool {
        matches!(self, Variant::Fam | Variant::FmmFam)
    }

    pub fn uses_fmm(self) -> bool {
        matches!(self, Variant::Fmm | Variant::FmmFam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Target-domain bonafide images available to mixing variants.
    pub n_target: usize,
    /// Seed of the target pool draw.
    pub pool_seed: u64,
    /// Also evaluate baseline and FAM on each domain's own test split.
    pub intra: bool,
    pub threshold: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            n_target: 10,
            pool_seed: 7,
            intra: true,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub domains: Vec<DomainSpec>,
    pub content: ContentProfile,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Mixing settings applied by the FMM variants.
    pub mix: MixConfig,
    pub grid: GridConfig,
    /// Where `grid` puts the corpus, cache and results unless overridden.
    pub output_root: PathBuf,
}

fn domain(name: &str, style_seed: u64, offset: f64, amplitude: f64, noise: f64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        style_seed,
        background: BackgroundProfile {
            amplitude,
            spatial_scale: 1.0,
            offset,
        },
        noise_level: noise,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            domains: vec![
                domain("A", 101, 0.30, 0.05, 0.010),
                domain("B", 202, 0.46, 0.07, 0.012),
                domain("C", 303, 0.68, 0.06, 0.008),
            ],
            content: ContentProfile::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mix: MixConfig::default(),
            grid: GridConfig::default(),
            output_root: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Parses and validates; schema errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("domains must not be empty".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate()?;
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate domain {}", d.name)));
            }
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.mix.validate()?;
        if self.model.input_size != self.corpus.size {
            return Err(Error::Config(format!(
                "model.input_size {} differs from corpus.size {}",
                self.model.input_size, self.corpus.size
            )));
        }
        if self.model.fam_enabled || self.train.fmm.is_some() {
            return Err(Error::Config(
                "model.fam_enabled and train.fmm are set per variant; leave them off".into(),
            ));
        }
        let g = &self.grid;
        if g.variants.is_empty() || g.seeds.is_empty() {
            return Err(Error::Config("grid.variants and grid.seeds must be non-empty".into()));
        }
        if g.n_target == 0 || g.n_target > self.corpus.n_train() {
            return Err(Error::Config(format!(
                "grid.n_target {} must be in 1..={}",
                g.n_target,
                self.corpus.n_train()
            )));
        }
        if !(g.threshold > 0.0 && g.threshold < 1.0) {
            return Err(Error::Config("grid.threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {name:?}")))
    }

    /// Model config for a variant.
    pub fn model_for(&self, v: Variant) -> ModelConfig {
        ModelConfig {
            fam_enabled: v.uses_fam(),
            ..self.model.clone()
        }
    }

    /// Train config for a variant and seed; the pool path is filled by the runner.
    pub fn train_for(&self, v: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            fmm: v.uses_fmm().then(|| self.mix.clone()),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"lr": 0.1, "lrr": 1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("train.lrr") || msg.contains("lrr"), "{msg}");
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"grid": {"seeds": [4]}}"#).unwrap();
        assert_eq!(cfg.grid.seeds, vec![4]);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn inconsistent_sizes_rejected() {
        let mut cfg = RunConfig::default();
        cfg.corpus.size = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variants_set_model_and_mixing() {
        let cfg = RunConfig::default();
        assert!(cfg.model_for(Variant::FmmFam).fam_enabled);
        assert!(!cfg.model_for(Variant::Fmm).fam_enabled);
        assert!(cfg.train_for(Variant::Fmm, 3).fmm.is_some());
        assert!(cfg.train_for(Variant::Fam, 3).fmm.is_none());
        assert_eq!(cfg.train_for(Variant::Fam, 3).seed, 3);
        assert_eq!(Variant::parse("fmm_fam").unwrap(), Variant::FmmFam);
        assert!(Variant::parse("x").is_err());
    }
}
