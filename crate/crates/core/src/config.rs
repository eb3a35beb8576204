//! Run configuration: one TOML file plus `key.path=value` overrides.
//!
//! Precedence is built-in defaults, then the file, then overrides. The
//! digest of the resolved configuration ties checkpoints to the run that
//! wrote them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::NetworkSpec;
use crate::data::{Crop, Hue, PreprocessSpec, SyntheticLabels, SyntheticSpec};
use crate::label::{DatasetSpec, LabelKind, LabelUniverse};
use crate::loss::LossConfig;
use crate::train::{Alternation, TrainConfig, TrainSetup};
use crate::{Error, Result};

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "STARGAN_OUTPUT_ROOT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory of the config file; relative dataset roots hang off it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub kind: LabelKind,
    pub labels: Vec<String>,
    pub root: PathBuf,
    #[serde(default)]
    pub crop: Crop,
    /// Records held out for evaluation.
    #[serde(default)]
    pub holdout: usize,
    /// Recipe for `make-synthetic`; absent for real datasets.
    #[serde(default)]
    pub synthetic: Option<SyntheticRecipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecipe {
    pub per_domain: usize,
    #[serde(default)]
    pub test_per_domain: usize,
    pub labels: SyntheticLabels,
    #[serde(default = "default_hues")]
    pub hues: Vec<Hue>,
    #[serde(default)]
    pub vary_background: bool,
    #[serde(default)]
    pub vary_border: bool,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hues() -> Vec<Hue> {
    vec![Hue::Red, Hue::Green, Hue::Blue]
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub g_width: f64,
    pub n_res: usize,
    pub d_width: f64,
    pub d_depth: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { image_size: 128, g_width: 1.0, n_res: 6, d_width: 1.0, d_depth: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierChoice {
    /// The synthetic corpus's closed-form labeler (`oracle.json`).
    #[default]
    Oracle,
    /// A small CNN trained on the dataset's training split.
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub classifier: ClassifierChoice,
    pub cnn_epochs: usize,
    /// A CNN classifier below this held-out accuracy makes the report
    /// untrusted.
    pub accuracy_floor: f64,
    /// Inputs shown in grids.
    pub grid_inputs: usize,
    /// Target expressions for grid columns; empty means every label of the
    /// first dataset.
    pub targets: Vec<String>,
    /// Published parameter count to compare against, if any.
    pub reference_params: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierChoice::Oracle,
            cnn_epochs: 10,
            accuracy_floor: 0.9,
            grid_inputs: 8,
            targets: Vec::new(),
            reference_params: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.universe()?;
        self.losses.validate()?;
        self.train.validate()?;
        let n = self.datasets.len();
        match (self.train.alternation, n) {
            (Alternation::Single, 1) | (Alternation::RoundRobin, 2..) => {}
            (a, n) => {
                return Err(Error::Config(format!(
                    "train.alternation = {a:?} does not fit {n} dataset(s); use \"single\" for one and \"round_robin\" for several"
                )))
            }
        }
        for d in &self.datasets {
            self.preprocess(d)?;
            if let Some(s) = self.synthetic_spec(d)? {
                let want = s.dataset_spec()?;
                let have = DatasetSpec::new(d.name.clone(), d.kind, d.labels.iter().map(String::as_str))?;
                if want != have {
                    return Err(Error::Config(format!(
                        "dataset `{}`: labels {:?} ({:?}) disagree with its synthetic recipe, which produces {:?} ({:?})",
                        d.name,
                        d.labels,
                        d.kind,
                        want.label_names(),
                        want.kind()
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.eval.accuracy_floor) {
            return Err(Error::Config("eval.accuracy_floor must lie in [0, 1]".into()));
        }
        self.generator_spec()?;
        self.discriminator_spec()?;
        Ok(())
    }

    /// Hex digest (16 characters) of the resolved configuration.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(canon.as_bytes())[..8])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn universe(&self) -> Result<LabelUniverse> {
        let specs = self
            .datasets
            .iter()
            .map(|d| DatasetSpec::new(d.name.clone(), d.kind, d.labels.iter().map(String::as_str)))
            .collect::<Result<Vec<_>>>()?;
        LabelUniverse::new(specs)
    }

    pub fn generator_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::generator(self.universe()?.unified_dim(), self.net.g_width, self.net.n_res)
    }

    pub fn discriminator_spec(&self) -> Result<NetworkSpec> {
        let s = self.net.image_size;
        NetworkSpec::discriminator(s, s, self.universe()?.total_label_dim(), self.net.d_width, self.net.d_depth)
    }

    pub fn train_setup(&self) -> Result<TrainSetup> {
        Ok(TrainSetup {
            universe: self.universe()?,
            generator: self.generator_spec()?,
            discriminator: self.discriminator_spec()?,
            train: self.train,
            losses: self.losses,
            config_hash: self.hash(),
        })
    }

    pub fn preprocess(&self, d: &DatasetConfig) -> Result<PreprocessSpec> {
        PreprocessSpec::new(d.crop, self.net.image_size)
    }

    pub fn dataset_root(&self, d: &DatasetConfig) -> PathBuf {
        self.base_dir.join(&d.root)
    }

    pub fn synthetic_spec(&self, d: &DatasetConfig) -> Result<Option<SyntheticSpec>> {
        let Some(r) = &d.synthetic else { return Ok(None) };
        let spec = SyntheticSpec {
            name: d.name.clone(),
            image_size: self.net.image_size,
            per_domain: r.per_domain,
            test_per_domain: r.test_per_domain,
            labels: r.labels,
            hues: r.hues.clone(),
            vary_background: r.vary_background,
            vary_border: r.vary_border,
            noise: r.noise,
            seed: r.seed,
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    /// `output_dir`, resolved against `$STARGAN_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key.path=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    let mut i = 0;
    while i < parents.len() {
        let k = parents[i];
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let entry = match entry {
            toml::Value::Array(a) => {
                let n = a.len();
                let idx = parents
                    .get(i + 1)
                    .or((i + 1 == parents.len()).then_some(last))
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&j| j < n)
                    .ok_or_else(|| {
                        Error::Config(format!("override `{spec}`: `{k}` is an array of {n}; follow it with an index below {n}"))
                    })?;
                if i + 1 == parents.len() {
                    return Err(Error::Config(format!("override `{spec}`: cannot replace a whole array entry")));
                }
                i += 1;
                &mut a[idx]
            }
            other => other,
        };
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{spec}`: `{k}` is not a table"))),
        };
        i += 1;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
output_dir = "runs/t"

[[datasets]]
name = "hue"
kind = "categorical"
labels = ["red", "green", "blue"]
root = "data/hue"
holdout = 30

[datasets.synthetic]
per_domain = 50
test_per_domain = 10
labels = "hue"

[net]
image_size = 16
g_width = 0.25
n_res = 2
d_width = 0.25

[train]
seed = 3
"#;

    #[test]
    fn defaults_file_and_overrides_layer() {
        let cfg = RunConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.n_critic, 5);
        assert_eq!(cfg.losses.lambda_rec, 10.0);
        let o = RunConfig::from_toml_str(BASE, &["train.n_critic=2".into(), "losses.lambda_rec=3.5".into()]).unwrap();
        assert_eq!(o.train.n_critic, 2);
        assert_eq!(o.losses.lambda_rec, 3.5);
        assert_ne!(o.hash(), cfg.hash());
        assert_eq!(cfg.hash(), RunConfig::from_toml_str(BASE, &[]).unwrap().hash());
        let s = RunConfig::from_toml_str(BASE, &["output_dir=runs/other".into()]).unwrap();
        assert_eq!(s.output_dir, PathBuf::from("runs/other"));
    }

    #[test]
    fn overrides_index_into_arrays() {
        let cfg = RunConfig::from_toml_str(BASE, &["datasets.0.holdout=7".into(), "datasets.0.synthetic.noise=0.0".into()]).unwrap();
        assert_eq!(cfg.datasets[0].holdout, 7);
        assert_eq!(cfg.datasets[0].synthetic.as_ref().unwrap().noise, 0.0);
        for bad in ["datasets.holdout=7", "datasets.1.holdout=7", "datasets.0=1"] {
            assert!(RunConfig::from_toml_str(BASE, &[bad.into()]).is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str(BASE, &["train.n_crtic=2".into()]).is_err());
        assert!(RunConfig::from_toml_str(BASE, &["train.n_critic=0".into()]).is_err());
        assert!(RunConfig::from_toml_str(BASE, &["nonsense".into()]).is_err());
        let err = RunConfig::from_toml_str(BASE, &["net.image_size=12".into()]).unwrap_err().to_string();
        assert!(err.contains("minimal legal size"), "{err}");
    }

    #[test]
    fn recipe_must_agree_with_labels() {
        let bad = BASE.replace(r#"labels = ["red", "green", "blue"]"#, r#"labels = ["red", "blue"]"#);
        assert!(RunConfig::from_toml_str(&bad, &[]).is_err());
    }

    #[test]
    fn two_datasets_need_round_robin() {
        let joint = format!(
            "{BASE}\n[[datasets]]\nname = \"scene\"\nkind = \"binary_attributes\"\nlabels = [\"bright_background\", \"border\"]\nroot = \"data/scene\"\n"
        );
        // `[[datasets]]` after `[train]` still appends to the array.
        assert!(RunConfig::from_toml_str(&joint, &[]).is_err());
        let cfg = RunConfig::from_toml_str(&joint, &["train.alternation=round_robin".into()]).unwrap();
        assert_eq!(cfg.universe().unwrap().unified_dim(), 3 + 2 + 2);
        assert_eq!(cfg.generator_spec().unwrap().input_channels, 10);
    }

    #[test]
    fn output_dir_resolution() {
        let cfg = RunConfig::from_toml_str(BASE, &[]).unwrap();
        // The variable is read at call time; only the fallback is checked
        // here to avoid racing other tests on process environment.
        if std::env::var_os(OUTPUT_ROOT_ENV).is_none() {
            assert_eq!(cfg.output_dir(), PathBuf::from("runs/t"));
        }
    }
}
