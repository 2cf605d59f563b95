//! Random script sampling and dataset directories.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::motion::{
    read_motion_file, render_script_with, write_motion_file, Command, DatasetRecord, MotionScript, RenderConfig,
    Skeleton, Verb, MAX_COMMANDS,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_commands: usize,
    pub max_commands: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    pub render: RenderConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_commands: 1,
            max_commands: 8,
            min_duration: 10,
            max_duration: 40,
            min_magnitude: 0.5,
            max_magnitude: 1.5,
            render: RenderConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_commands == 0 || self.min_commands > self.max_commands || self.max_commands > MAX_COMMANDS {
            return Err(Error::validation(format!(
                "generator command range {}..={} must lie within 1..={MAX_COMMANDS}",
                self.min_commands, self.max_commands
            )));
        }
        if self.min_duration < 2 || self.min_duration > self.max_duration {
            return Err(Error::validation(format!(
                "generator duration range {}..={} is invalid (minimum 2)",
                self.min_duration, self.max_duration
            )));
        }
        if !(self.min_magnitude > 0.0 && self.min_magnitude <= self.max_magnitude && self.max_magnitude.is_finite()) {
            return Err(Error::validation("generator magnitude range must be positive and ordered"));
        }
        self.render.validate()
    }
}

/// Samples one script; verbs are uniform over those the skeleton supports.
pub fn sample_script<R: Rng + ?Sized>(config: &GeneratorConfig, verbs: &[Verb], rng: &mut R) -> MotionScript {
    let n = rng.random_range(config.min_commands..=config.max_commands);
    let commands = (0..n)
        .map(|_| {
            let verb = verbs[rng.random_range(0..verbs.len())];
            let duration = rng.random_range(config.min_duration..=config.max_duration);
            let magnitude = if verb == Verb::Idle {
                0.0
            } else {
                rng.random_range(config.min_magnitude..=config.max_magnitude)
            };
            Command::new(verb, duration, magnitude)
        })
        .collect();
    MotionScript { commands }
}

/// Generates `count` records. Record `i` depends only on `(seed, i)`, so any
/// prefix of a larger request is identical to a smaller request.
pub fn generate_dataset(
    count: usize,
    config: &GeneratorConfig,
    skeleton: &Skeleton,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(Error::validation("dataset count must be at least 1"));
    }
    config.validate()?;
    skeleton.validate()?;
    let verbs: Vec<Verb> = Verb::ALL.into_iter().filter(|v| v.supported_by(skeleton)).collect();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let script = sample_script(config, &verbs, &mut rng);
            let record_seed = rng.next_u64();
            render_script_with(&script, skeleton, record_seed, &config.render)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    /// Render seed, kept as text because it spans the full `u64` range.
    pub seed: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub seed: String,
    pub generator: GeneratorConfig,
    pub records: Vec<ManifestEntry>,
}

/// Writes one motion file per record plus `manifest.toml`. The manifest is
/// written last; an interrupted run leaves an `INCOMPLETE` marker instead.
pub fn write_dataset(
    dir: &Path,
    records: &[DatasetRecord],
    generator: &GeneratorConfig,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    write_file(&marker, b"dataset write in progress\n")?;
    let width = records.len().to_string().len().max(5);
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = format!("{i:0width$}.kmo");
        write_motion_file(r, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            seed: r.seed.to_string(),
        });
    }
    let manifest = Manifest {
        format: "kineta-dataset/1".into(),
        count: records.len(),
        seed: seed.to_string(),
        generator: generator.clone(),
        records: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::validation(format!("manifest encoding: {e}")))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    if dir.join(INCOMPLETE_MARKER).exists() {
        return Err(Error::validation(format!("dataset {} is marked incomplete", dir.display())));
    }
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| {
        Error::parse(e.span().map(|s| s.start).unwrap_or(0), format!("manifest: {}", e.message()))
    })?;
    if manifest.records.len() != manifest.count {
        return Err(Error::validation(format!(
            "manifest lists {} records but declares {}",
            manifest.records.len(),
            manifest.count
        )));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .records
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            let r = read_motion_file(&path)?;
            if r.seed.to_string() != e.seed {
                return Err(Error::validation(format!(
                    "{}: seed {} disagrees with manifest seed {}",
                    path.display(),
                    r.seed,
                    e.seed
                )));
            }
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_rejected() {
        assert!(generate_dataset(0, &GeneratorConfig::default(), &Skeleton::standard(), 1).is_err());
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let cfg = GeneratorConfig::default();
        let a = generate_dataset(12, &cfg, &Skeleton::standard(), 1).unwrap();
        let b = generate_dataset(12, &cfg, &Skeleton::standard(), 1).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(5, &cfg, &Skeleton::standard(), 1).unwrap();
        assert_eq!(&a[..5], &c[..]);
    }

    #[test]
    fn respects_ranges() {
        let cfg = GeneratorConfig::default();
        for r in generate_dataset(40, &cfg, &Skeleton::standard(), 9).unwrap() {
            let n = r.script.commands.len();
            assert!((1..=8).contains(&n));
            for c in &r.script.commands {
                assert!((10..=40).contains(&c.duration));
            }
            r.motion.check_speed(crate::motion::DEFAULT_V_MAX).unwrap();
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::default();
        let recs = generate_dataset(3, &cfg, &Skeleton::standard(), 4).unwrap();
        let m = write_dataset(dir.path(), &recs, &cfg, 4).unwrap();
        assert_eq!(m.count, 3);
        assert_eq!(read_dataset(dir.path()).unwrap(), recs);
    }
}
