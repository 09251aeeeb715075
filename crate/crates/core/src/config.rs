//! Run configuration (TOML). Unknown keys are rejected at every level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{HardPolarity, Variant};
use crate::data::{default_tiers, LongTailProfile, TeacherParams, Tier};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::router::{default_similarity, SimilarityFile};
use crate::tensor::Matrix;
use crate::train::{StageConfig, WarmStartFlags};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimilaritySource {
    /// The stock 12-language table.
    #[default]
    Default,
    Identity,
    /// A JSON [`SimilarityFile`].
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Norm of the fixed frame mean.
    pub mean_norm: f64,
    /// Give Stage-1 data its own per-dimension input scales.
    pub domain_mismatch: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            mean_norm: 2.0,
            domain_mismatch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub enabled: bool,
    /// Seed of the ZipperSoft run whose banks are reused.
    pub source_seed: u64,
    pub flags: WarmStartFlags,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            enabled: false,
            source_seed: 0,
            flags: WarmStartFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    /// Fixes teacher, Stage-1 data, eval sets and adapter initialization.
    pub data_seed: u64,
    /// Stage-2 run seeds: training sample, batch order, chunk lengths.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub similarity: SimilaritySource,
    pub teacher: TeacherParams,
    pub profile: LongTailProfile,
    pub tiers: BTreeMap<String, Tier>,
    pub inputs: InputConfig,
    pub eval_per_language: usize,
    pub stage1_per_language: usize,
    /// Stage-1 projector starts at the teacher's plus this multiple of a
    /// fresh random projector.
    pub stage1_init_noise: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub warm_start: WarmStartConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            out_dir: PathBuf::from("runs/default"),
            data_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            variants: Variant::ALL.to_vec(),
            model: ModelConfig::default(),
            similarity: SimilaritySource::Default,
            teacher: TeacherParams::default(),
            profile: LongTailProfile::default(),
            tiers: default_tiers(),
            inputs: InputConfig::default(),
            eval_per_language: 32,
            stage1_per_language: 512,
            stage1_init_noise: 0.5,
            stage1: StageConfig::stage1_default(),
            stage2: StageConfig::stage2_default(),
            warm_start: WarmStartConfig::default(),
        }
    }
}

/// Command-line overrides applied after loading.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paper_hparams: bool,
    pub hard_polarity: Option<HardPolarity>,
    pub chunked: Option<bool>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, hex.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if o.paper_hparams {
            let lora = &mut self.model.lora;
            lora.rank = 32;
            lora.alpha = 64.0;
            lora.top_k = 8;
            lora.r_shared = 16;
            lora.r_spec = 16;
            self.stage1.lr = 2e-5;
            self.stage2.lr = 2e-5;
        }
        if let Some(p) = o.hard_polarity {
            self.model.lora.hard_polarity = p;
        }
        if let Some(c) = o.chunked {
            self.stage2.chunked = c;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
    }

    /// Field-level checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        check("model", self.model.validate());
        check("stage1", self.stage1.validate());
        check("stage2", self.stage2.validate());
        check("similarity", self.similarity_matrix().map(|_| ()));
        if self.seeds.is_empty() {
            problems.push("seeds: at least one seed is required".into());
        }
        if self.variants.is_empty() {
            problems.push("variants: at least one variant is required".into());
        }
        for l in &self.model.languages {
            if !self.tiers.contains_key(l) {
                problems.push(format!("tiers: language '{l}' has no tier"));
            }
        }
        for l in self.tiers.keys() {
            if !self.model.languages.contains(l) {
                problems.push(format!("tiers: '{l}' is not a configured language"));
            }
        }
        if self.eval_per_language == 0 {
            problems.push("eval_per_language: must be positive".into());
        }
        if self.stage1_per_language == 0 || self.model.source_languages.is_empty() {
            problems.push("stage1_per_language/source_languages: stage 1 needs data".into());
        }
        if self.model.d_lid < self.model.languages.len() {
            problems.push(format!(
                "model.d_lid: {} is below the language count {}",
                self.model.d_lid,
                self.model.languages.len()
            ));
        }
        if self.warm_start.enabled && !self.variants.contains(&Variant::ZipperSoft) {
            problems.push("warm_start: needs ZipperSoft among the variants".into());
        }
        if self.warm_start.enabled && !self.seeds.contains(&self.warm_start.source_seed) {
            problems.push("warm_start.source_seed: not among the run seeds".into());
        }
        if !(self.stage1_init_noise >= 0.0) {
            problems.push("stage1_init_noise: must be non-negative".into());
        }
        let t = &self.teacher;
        if !(t.noise_rel >= 0.0 && t.delta_scale >= 0.0) {
            problems.push("teacher: noise_rel and delta_scale must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Similarity target indexed like `model.languages`.
    pub fn similarity_matrix(&self) -> Result<Matrix> {
        let langs = &self.model.languages;
        let n = langs.len();
        let (names, full) = match &self.similarity {
            SimilaritySource::Identity => return Ok(Matrix::identity(n)),
            SimilaritySource::Default => default_similarity(),
            SimilaritySource::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let f: SimilarityFile = serde_json::from_str(&text)?;
                (f.languages, f.matrix)
            }
        };
        let idx: Vec<usize> = langs
            .iter()
            .map(|l| {
                names
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::Config(format!("similarity has no entry for '{l}'")))
            })
            .collect::<Result<_>>()?;
        Ok(Matrix::from_fn(n, n, |i, j| full.get(idx[i], idx[j])))
    }

    pub fn languages_in_tier(&self, tier: Tier) -> Vec<String> {
        self.model
            .languages
            .iter()
            .filter(|l| self.tiers.get(*l) == Some(&tier))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("sedes = [1]"), Err(Error::Config(_))));
        let err = RunConfig::from_toml_str("[model]\nwidth = 3").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(RunConfig::from_toml_str("[stage2]\nstep = 3").is_err());
    }

    #[test]
    fn partial_tables_take_defaults() {
        let cfg = RunConfig::from_toml_str("seeds = [7]\n[stage2]\nsteps = 10\n[model.lora]\ntau = 0.3\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.stage2.steps, 10);
        assert_eq!(cfg.stage2.batch_size, StageConfig::stage2_default().batch_size);
        assert_eq!(cfg.model.lora.tau, 0.3);
        assert_eq!(cfg.model.lora.rank, 8);
    }

    #[test]
    fn field_level_diagnostics() {
        let err = RunConfig::from_toml_str("seeds = []\nvariants = []\n[stage2]\nlr = -1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("seeds"), "{msg}");
        assert!(msg.contains("variants"), "{msg}");
        assert!(msg.contains("stage2"), "{msg}");
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(3),
            paper_hparams: true,
            hard_polarity: Some(HardPolarity::SharedOnOne),
            chunked: Some(true),
            out: Some("x".into()),
        });
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.model.lora.rank, 32);
        assert_eq!(cfg.stage2.lr, 2e-5);
        assert!(cfg.stage2.chunked);
        assert_eq!(cfg.model.lora.hard_polarity, HardPolarity::SharedOnOne);
        cfg.validate().unwrap();
    }

    #[test]
    fn similarity_is_reindexed() {
        let mut cfg = RunConfig::default();
        cfg.model.languages = vec!["ko".into(), "ja".into()];
        cfg.tiers = [("ko".to_string(), Tier::Low), ("ja".to_string(), Tier::High)].into();
        let s = cfg.similarity_matrix().unwrap();
        assert_eq!(s.get(0, 1), 0.41);
        cfg.model.languages.push("xx".into());
        assert!(cfg.similarity_matrix().is_err());
    }
}
