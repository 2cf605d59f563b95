//! Experiment configuration: one TOML document with dotted-key overrides,
//! snapshotted next to every output so runs can be repeated exactly.

use std::path::{Path, PathBuf};

use kineta::alignment::AlignerConfig;
use kineta::diffusion::{DiffusionTrainConfig, SamplerConfig};
use kineta::evaluation::{EvalConfig, EvaluatorConfig, R_PRECISION_BATCH};
use kineta::kp::{default_catalog, KpCatalog};
use kineta::motion::{GeneratorConfig, Skeleton};
use kineta::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cli::Cmd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub diversity_pairs: usize,
    pub batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            diversity_pairs: 300,
            batch: R_PRECISION_BATCH,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for data generation, sampling and evaluation.
    pub seed: u64,
    /// Custom skeleton; the standard five-joint one when absent.
    pub skeleton: Option<Skeleton>,
    /// Phrase catalog TOML replacing the default catalog.
    pub catalog_file: Option<PathBuf>,
    pub data: DataConfig,
    pub align: AlignerConfig,
    pub diffusion: DiffusionTrainConfig,
    pub sampler: SamplerConfig,
    pub evaluator: EvaluatorConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides, where values are TOML literals and bare words are strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_table(&text)?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.skeleton {
            s.validate()?;
        }
        if let Some(p) = &self.catalog_file {
            if !p.is_file() {
                return Err(Error::validation(format!("catalog_file {} does not exist", p.display())));
            }
        }
        if self.data.count == 0 {
            return Err(Error::validation("data.count must be positive"));
        }
        self.data.generator.validate()?;
        self.align.validate()?;
        self.diffusion.validate()?;
        self.sampler.validate()?;
        self.evaluator.validate()?;
        if self.eval.diversity_pairs == 0 || self.eval.batch == 0 {
            return Err(Error::validation("eval.diversity_pairs and eval.batch must be positive"));
        }
        Ok(())
    }

    pub fn skeleton(&self) -> Skeleton {
        self.skeleton.clone().unwrap_or_else(Skeleton::standard)
    }

    pub fn catalog(&self) -> Result<KpCatalog> {
        match &self.catalog_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KpCatalog::from_toml(&text)
            }
            None => Ok(default_catalog(&self.skeleton())),
        }
    }

    pub fn eval_config(&self, refine: bool) -> EvalConfig {
        EvalConfig {
            guidance: self.sampler.guidance,
            refine: refine.then(|| self.sampler.clone()),
            diversity_pairs: self.eval.diversity_pairs,
            batch: self.eval.batch,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("config encoding: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        Error::parse(e.span().map_or(0, |s| s.start), format!("config: {}", e.message()))
    })
}

fn parse_value(raw: &str) -> toml::Value {
    match parse_table(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::validation(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty split");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::validation(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// The resolved configuration plus the invocation that used it, enough to
/// replay the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub fingerprint: String,
    pub invocation: Cmd,
    pub config: ExperimentConfig,
}

impl Snapshot {
    /// `<output>.config.toml`, or `config.toml` inside an output directory.
    pub fn path_for(output: &Path, is_dir: bool) -> PathBuf {
        if is_dir {
            output.join("config.toml")
        } else {
            let mut s = output.as_os_str().to_owned();
            s.push(".config.toml");
            PathBuf::from(s)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::validation(format!("snapshot encoding: {e}")))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: Self = toml::from_str(&text).map_err(|e| {
            Error::parse(e.span().map_or(0, |s| s.start), format!("snapshot: {}", e.message()))
        })?;
        snap.config.validate()?;
        Ok(snap)
    }
}
