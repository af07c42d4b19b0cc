//! Experiment configuration: one declarative TOML file with a default for
//! every field, command-line overrides on top, and a manifest that freezes
//! the resolved result next to the artifacts it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pixplan::discrete::{AnnealSchedule, LatentConfig};
use pixplan::domains::{DomainSpec, DATASET_FORMAT};
use pixplan::models::checkpoint::CHECKPOINT_FORMAT;
use pixplan::models::train::TrainConfig;
use pixplan::models::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run depends on. Scalars come before the section tables so
/// the struct serializes to valid TOML as-is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name; also the stem of the exported PDDL domain name.
    pub name: String,
    pub seed: u64,
    pub model: ModelKind,
    pub domain: DomainSpec,
    pub latent: LatentSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub instances: InstanceSection,
    pub planner: PlannerSection,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            name: "experiment".to_string(),
            seed: 0,
            model: ModelKind::Ama4Plus,
            domain: DomainSpec::LightsOut { n: 3, cell: 5 },
            latent: LatentSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            instances: InstanceSection::default(),
            planner: PlannerSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Hash of the canonical TOML serialization. Field order is fixed by
    /// the struct, so equal configs fingerprint equally.
    pub fn fingerprint(&self) -> Result<String, CliError> {
        let text = toml::to_string(self)
            .map_err(|e| CliError::Config(format!("config does not serialize: {e}")))?;
        Ok(format!("{:016x}", fnv1a64(text.as_bytes())))
    }
}

/// Which action-model family to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// State autoencoder only; actions are read off the latent transitions
    /// verbatim, one per distinct pair.
    #[serde(rename = "ama1")]
    Ama1,
    /// Frozen state autoencoder plus learned action-label and successor
    /// heads. The effects stay in network weights, so nothing exports.
    #[serde(rename = "ama2")]
    Ama2,
    /// Cube-space autoencoder: labels and effects learned jointly with the
    /// state encoding, forward direction only.
    #[serde(rename = "ama3plus")]
    Ama3Plus,
    /// Cube-space autoencoder with the backward regression path as well.
    #[serde(rename = "ama4plus")]
    Ama4Plus,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Ama1 => "ama1",
            ModelKind::Ama2 => "ama2",
            ModelKind::Ama3Plus => "ama3plus",
            ModelKind::Ama4Plus => "ama4plus",
        }
    }
}

/// Discrete latent layout and loss weights. The label count doubles as the
/// one-hot class count everywhere in the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentSection {
    pub f_bits: usize,
    pub actions: usize,
    pub epsilon: f64,
    pub sigma_rec: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for LatentSection {
    fn default() -> LatentSection {
        let base = LatentConfig::new(36, 128);
        LatentSection {
            f_bits: base.f_bits,
            actions: base.actions,
            epsilon: base.epsilon,
            sigma_rec: base.sigma_rec,
            beta1: base.beta1,
            beta2: base.beta2,
            beta3: base.beta3,
        }
    }
}

impl LatentSection {
    pub fn to_core(&self) -> LatentConfig {
        LatentConfig {
            f_bits: self.f_bits,
            actions: self.actions,
            classes: self.actions,
            epsilon: self.epsilon,
            sigma_rec: self.sigma_rec,
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
        }
    }
}

/// Encoder, decoder, and action-head sizing. The image shape itself comes
/// from the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub conv_channels: usize,
    pub kernel: usize,
    pub action_hidden: usize,
}

impl Default for NetworkSection {
    fn default() -> NetworkSection {
        NetworkSection { conv_channels: 8, kernel: 5, action_hidden: 256 }
    }
}

impl NetworkSection {
    pub fn to_core(&self, image_shape: (usize, usize, usize)) -> NetworkConfig {
        NetworkConfig {
            image_shape,
            conv_channels: self.conv_channels,
            kernel: self.kernel,
            action_hidden: self.action_hidden,
        }
    }
}

/// Dataset size, optimizer settings, and the temperature schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Transitions to sample into the dataset.
    pub transitions: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub tau_max: f64,
    pub tau_min: f64,
    pub anneal_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            transitions: 500,
            epochs: 300,
            batch: 100,
            lr: 1e-3,
            grad_clip: 0.1,
            tau_max: 5.0,
            tau_min: 0.5,
            anneal_epochs: 200,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            grad_clip: self.grad_clip,
            seed,
            anneal: AnnealSchedule {
                tau_max: self.tau_max,
                tau_min: self.tau_min,
                anneal_epochs: self.anneal_epochs,
            },
        }
    }
}

/// Test-instance generation: how many instances at which optimal depths,
/// and how much pixel noise to bake into their stored images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSection {
    pub g_values: Vec<usize>,
    pub per_g: usize,
    pub noise_sigma: f64,
}

impl Default for InstanceSection {
    fn default() -> InstanceSection {
        InstanceSection { g_values: vec![3, 5], per_g: 10, noise_sigma: 0.0 }
    }
}

/// How plans get produced: the built-in A* or an external command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub kind: PlannerKind,
    /// Command template for `kind = "external"`. `{domain}`, `{problem}`
    /// and `{plan}` expand to file paths; the first word is the
    /// executable. Empty falls back to the PIXPLAN_PLANNER environment
    /// variable.
    pub external_command: String,
    pub time_limit_seconds: f64,
    pub max_expansions: usize,
}

impl Default for PlannerSection {
    fn default() -> PlannerSection {
        PlannerSection {
            kind: PlannerKind::InternalBlind,
            external_command: String::new(),
            time_limit_seconds: 600.0,
            max_expansions: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    InternalBlind,
    InternalGoalCount,
    External,
}

impl PlannerKind {
    pub fn label(self) -> &'static str {
        match self {
            PlannerKind::InternalBlind => "blind",
            PlannerKind::InternalGoalCount => "goal_count",
            PlannerKind::External => "external",
        }
    }
}

/// FNV-1a, 64 bit. Stable fingerprint for configs; not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stage-specific seed: hash the run seed with a label so stages draw
/// independent streams from one configured seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a64(format!("{seed}/{label}").as_bytes())
}

pub const MANIFEST_FORMAT: &str = "pixplan-manifest-v1";

/// Frozen record of a run: the resolved configuration, its fingerprint,
/// and the format versions of the artifacts alongside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: ExperimentConfig) -> Result<Manifest, CliError> {
        let config_hash = config.fingerprint()?;
        let mut versions = BTreeMap::new();
        versions.insert("pixplan".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("dataset".to_string(), DATASET_FORMAT.to_string());
        versions.insert("checkpoint".to_string(), CHECKPOINT_FORMAT.to_string());
        Ok(Manifest { format: MANIFEST_FORMAT.to_string(), config_hash, versions, config })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Reads a manifest and re-derives the fingerprint, so hand edits to
    /// the stored configuration are caught instead of silently honored.
    pub fn read(path: &Path) -> Result<Manifest, CliError> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Config(format!(
                "{} has manifest format {:?}, this build reads {:?}",
                path.display(),
                m.format,
                MANIFEST_FORMAT
            )));
        }
        let expected = m.config.fingerprint()?;
        if expected != m.config_hash {
            return Err(CliError::Config(format!(
                "{}: stored hash {} does not match its configuration ({}); the manifest has been edited",
                path.display(),
                m.config_hash,
                expected
            )));
        }
        Ok(m)
    }
}

/// Resolve a configuration: the file (or built-in defaults), then `--set`
/// overrides in order, then the `--seed` shortcut last.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Value>()
                .map_err(|e| CliError::Config(format!("{} is not valid TOML: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    apply_overrides(&mut value, sets)?;
    if let Some(s) = seed {
        let v = i64::try_from(s)
            .map_err(|_| CliError::Config("seed does not fit the config integer range".to_string()))?;
        apply_one(&mut value, "seed", toml::Value::Integer(v))?;
    }
    finish(value)
}

/// Re-resolve a stored configuration with per-invocation overrides. The
/// manifest on disk stays untouched; overrides live only for the call.
pub fn with_overrides(
    cfg: &ExperimentConfig,
    sets: &[String],
) -> Result<ExperimentConfig, CliError> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut value = toml::Value::try_from(cfg)
        .map_err(|e| CliError::Config(format!("config does not serialize: {e}")))?;
    apply_overrides(&mut value, sets)?;
    finish(value)
}

fn finish(value: toml::Value) -> Result<ExperimentConfig, CliError> {
    value
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
}

fn apply_overrides(root: &mut toml::Value, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let Some((path, raw)) = s.split_once('=') else {
            return Err(CliError::Config(format!("override {s:?} is not KEY=VALUE")));
        };
        apply_one(root, path.trim(), parse_scalar(raw.trim()))?;
    }
    Ok(())
}

/// Parse an override value as TOML, falling back to a bare string. Covers
/// numbers, booleans, arrays, and quoted strings without making the user
/// quote plain words.
fn parse_scalar(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table holds the value"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_one(root: &mut toml::Value, path: &str, v: toml::Value) -> Result<(), CliError> {
    if path.is_empty() {
        return Err(CliError::Config("override has an empty key".to_string()));
    }
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("cannot set {path}: {part} is not a table")))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), v);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_yields_the_documented_defaults() {
        let cfg = load_config(None, &[], None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.latent.f_bits, 36);
        assert_eq!(cfg.latent.actions, 128);
        assert_eq!(cfg.train.transitions, 500);
        assert_eq!(cfg.train.epochs, 300);
        assert_eq!(cfg.instances.g_values, vec![3, 5]);
        assert_eq!(cfg.planner.max_expansions, 1_000_000);
        assert_eq!(cfg.domain, DomainSpec::LightsOut { n: 3, cell: 5 });
    }

    #[test]
    fn fnv_hash_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn overrides_reach_nested_fields_in_order() {
        let sets: Vec<String> = [
            "train.epochs=7",
            "latent.f_bits=12",
            "train.epochs=9",
            "instances.g_values=[2, 4]",
            "name=tiny",
            "model=ama1",
        ]
        .map(String::from)
        .to_vec();
        let cfg = load_config(None, &sets, None).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.latent.f_bits, 12);
        assert_eq!(cfg.instances.g_values, vec![2, 4]);
        assert_eq!(cfg.name, "tiny");
        assert_eq!(cfg.model, ModelKind::Ama1);
    }

    #[test]
    fn override_strings_fall_back_to_raw_text() {
        let sets = vec!["planner.external_command=solve {domain} {problem} {plan}".to_string()];
        let cfg = load_config(None, &sets, None).unwrap();
        assert_eq!(cfg.planner.external_command, "solve {domain} {problem} {plan}");
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(load_config(None, &["train.epochs".to_string()], None).is_err());
        assert!(load_config(None, &["train.epochs=zebra".to_string()], None).is_err());
        assert!(load_config(None, &["nonsense.key=1".to_string()], None).is_err());
        assert!(load_config(None, &["=3".to_string()], None).is_err());
    }

    #[test]
    fn seed_flag_applies_after_set_overrides() {
        let cfg = load_config(None, &["seed=3".to_string()], Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint().unwrap(), a.fingerprint().unwrap());
        b.seed = 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.domain = DomainSpec::Hanoi { disks: 4, towers: 3 };
        cfg.model = ModelKind::Ama3Plus;
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn manifest_read_rejects_a_tampered_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest::new(ExperimentConfig::default()).unwrap();
        m.write(&path).unwrap();
        assert_eq!(Manifest::read(&path).unwrap().config_hash, m.config_hash);

        let mut tampered = m.clone();
        tampered.config.seed = 99;
        tampered.write(&path).unwrap();
        let err = Manifest::read(&path).unwrap_err().to_string();
        assert!(err.contains("does not match"), "unexpected message: {err}");
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(7, "init"), derive_seed(7, "variance"));
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
    }
}
