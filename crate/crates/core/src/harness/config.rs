use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdaptConfig, Strategy, StrategyKind};
use crate::corpus::{CorpusSchema, DriftConfig, SplitSpec, SLICE_NAMES};
use crate::error::{Error, Result};

/// How the trans-data of one timeline column is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The unlabeled test slice itself (t0 uses unlabeled t0 train).
    Inductive,
    /// Every earlier slice `t1..t(i-1)`, unlabeled.
    Transductive,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    /// JSONL corpus; mutually exclusive with `synthetic`.
    pub path: Option<PathBuf>,
    pub schema: CorpusSchema,
    pub synthetic: Option<DriftConfig>,
    /// Generator seed; when unset every run seed generates its own corpus.
    pub synthetic_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    /// Joint weight for J_PV; rejected when J_PV is not configured.
    pub mu_loss: Option<f64>,
    pub freeze_vae: bool,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            mu_loss: None,
            freeze_vae: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub fractions: Vec<f64>,
    /// Methods rerun by the scale and freshness ablations.
    pub methods: Vec<StrategyKind>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            fractions: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            methods: vec![StrategyKind::Pl, StrategyKind::VaeFeat],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub overlap_top_k: usize,
    pub topic_words: usize,
    /// Post ids whose attention matrices are exported.
    pub attention_ids: Vec<String>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            overlap_top_k: 1000,
            topic_words: 10,
            attention_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub split: SplitSpec,
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
    /// One regime per timeline column `t0..t4`.
    pub regimes: [Regime; 5],
    /// Timeline columns to evaluate.
    pub slices: Vec<String>,
    pub adapt: AdaptConfig,
    pub strategy: StrategyParams,
    pub ablation: AblationConfig,
    pub diagnostics: DiagnosticsConfig,
    /// Where outputs go; not part of the config hash.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::default(),
            split: SplitSpec::default(),
            strategies: StrategyKind::ALL.to_vec(),
            seeds: (0..5).collect(),
            regimes: [
                Regime::Inductive,
                Regime::Inductive,
                Regime::Inductive,
                Regime::Inductive,
                Regime::Transductive,
            ],
            slices: SLICE_NAMES.iter().map(|s| s.to_string()).collect(),
            adapt: AdaptConfig::default(),
            strategy: StrategyParams::default(),
            ablation: AblationConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&crate::io::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative corpus paths are relative to the config file.
        if let (Some(p), Some(dir)) = (cfg.corpus.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies `dotted.key=value` overrides; values parse as TOML, falling
    /// back to a plain string.
    pub fn apply_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let value = parse_override_value(raw);
            set_dotted(&mut root, key, value)?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must not be empty".into()));
        }
        match (&self.corpus.path, &self.corpus.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("corpus.path and corpus.synthetic are exclusive".into()))
            }
            (None, None) => return Err(Error::Config("configure corpus.path or corpus.synthetic".into())),
            (None, Some(s)) => s.validate()?,
            (Some(_), None) => {}
        }
        if self.regimes[0] == Regime::Transductive || self.regimes[1] == Regime::Transductive {
            return Err(Error::Config(
                "t0 and t1 have no earlier slices; they must be inductive".into(),
            ));
        }
        for s in &self.slices {
            slice_index(s)?;
        }
        if self.slices.is_empty() {
            return Err(Error::Config("slices must not be empty".into()));
        }
        if self.strategy.mu_loss.is_some() && !self.strategies.contains(&StrategyKind::JPv) {
            return Err(Error::Config("strategy.mu_loss is set but J_PV is not configured".into()));
        }
        if self.strategy.freeze_vae && !self.strategies.contains(&StrategyKind::JPv) {
            return Err(Error::Config("strategy.freeze_vae is set but J_PV is not configured".into()));
        }
        for &f in &self.ablation.fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("ablation fraction {f} outside [0, 1]")));
            }
        }
        for k in self.strategies.iter().map(|&k| self.strategy_for(k)) {
            k.validate()?;
        }
        self.adapt.validate()
    }

    /// The strategy object for `kind`, carrying the J_PV parameters.
    pub fn strategy_for(&self, kind: StrategyKind) -> Strategy {
        match kind {
            StrategyKind::JPv => Strategy {
                kind,
                mu_loss: self.strategy.mu_loss,
                freeze_vae: self.strategy.freeze_vae,
            },
            _ => Strategy::new(kind),
        }
    }

    /// SHA-256 over the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()[..16].to_string()
    }
}

pub fn slice_index(name: &str) -> Result<usize> {
    SLICE_NAMES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::Config(format!("unknown slice `{name}` (expected t0..t4)")))
}

fn parse_override_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> ExperimentConfig {
        ExperimentConfig {
            corpus: CorpusSource {
                synthetic: Some(DriftConfig::default()),
                ..CorpusSource::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_roundtrip_and_sections() {
        let text = r#"
            seeds = [1, 2]
            strategies = ["BASE", "J_PV"]
            [corpus.synthetic]
            drift_rate = 0.25
            [adapt.classifier]
            epochs = 3
            [strategy]
            mu_loss = 0.5
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.adapt.classifier.epochs, 3);
        assert_eq!(cfg.corpus.synthetic.as_ref().unwrap().drift_rate, 0.25);
        let back = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&back).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("sedes = [1]").is_err());
    }

    #[test]
    fn mu_loss_without_joint_is_error() {
        let mut cfg = synthetic();
        cfg.strategies = vec![StrategyKind::Pl];
        cfg.strategy.mu_loss = Some(0.1);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_regimes_and_empty_seeds() {
        let mut cfg = synthetic();
        cfg.regimes[1] = Regime::Transductive;
        assert!(cfg.validate().is_err());
        let mut cfg = synthetic();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_fields_but_not_output_dir() {
        let a = synthetic();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.adapt.classifier.lr = 2e-3;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seeds.push(9);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn overrides() {
        let cfg = synthetic()
            .apply_overrides(&[
                ("adapt.classifier.epochs".into(), "7".into()),
                ("corpus.synthetic.drift_rate".into(), "0.0".into()),
                ("strategies".into(), r#"["PL"]"#.into()),
            ])
            .unwrap();
        assert_eq!(cfg.adapt.classifier.epochs, 7);
        assert_eq!(cfg.corpus.synthetic.unwrap().drift_rate, 0.0);
        assert_eq!(cfg.strategies, vec![StrategyKind::Pl]);
        assert!(synthetic().apply_overrides(&[("nope".into(), "1".into())]).is_err());
    }
}
