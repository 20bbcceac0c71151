//! The sectioned JSON run configuration and `--set` overrides.

use std::path::{Path, PathBuf};

use mfedch::{BlobSpec, Error, GradCheckPlan, Hyperparams, MultiViewDataset, Result, SweepMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub gradcheck: GradCheckPlan,
}

/// Either CSV files or generator parameters, never both.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// One CSV per view, samples as rows.
    #[serde(default)]
    pub views: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<BlobSpec>,
    /// Row labels in result tables, e.g. `["GS", "LBP"]`.
    #[serde(default)]
    pub view_names: Option<Vec<String>>,
    /// Z-score every feature before anything else.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Training samples per class; one table block per entry.
    pub per_class: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Seed of the single fit run by `train` and `diagnose`.
    pub fit_seed: u64,
    /// Embedding dimensions to sweep; each row keeps its best.
    pub d_sweep: Option<Vec<usize>>,
    pub sweep_mode: SweepMode,
    pub parallel_repeats: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            per_class: vec![4, 6, 8],
            repeats: 5,
            base_seed: 0,
            fit_seed: 0,
            d_sweep: None,
            sweep_mode: SweepMode::GaussSeidel,
            parallel_repeats: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("mfedch-out"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from an empty object), applies the
    /// overrides, then deserializes and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if let Some(ds) = &self.dataset {
            match (&ds.views, &ds.synth) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "dataset: give either `views` or `synth`, not both".into(),
                    ))
                }
                (None, None) => return Err(Error::Config("dataset: one of `views` or `synth` is required".into())),
                (None, Some(_)) if ds.labels.is_some() => {
                    return Err(Error::Config("dataset: `labels` only applies to `views`".into()))
                }
                _ => {}
            }
        }
        let e = &self.experiment;
        if e.repeats == 0 {
            return Err(Error::Config("experiment.repeats must be >= 1".into()));
        }
        if e.per_class.is_empty() || e.per_class.contains(&0) {
            return Err(Error::Config("experiment.per_class needs entries >= 1".into()));
        }
        if let Some(dims) = &e.d_sweep {
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::Config("experiment.d_sweep needs entries >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn dataset_section(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a `dataset` section".into()))
    }

    /// Loads or generates the dataset, standardized if requested.
    pub fn load_dataset(&self) -> Result<MultiViewDataset> {
        let sec = self.dataset_section()?;
        let ds = match (&sec.views, &sec.synth) {
            (Some(paths), _) => mfedch::load_views(paths, sec.labels.as_deref())?,
            (None, Some(spec)) => mfedch::synth_blobs(spec)?,
            (None, None) => unreachable!("validated"),
        };
        Ok(if sec.standardize { ds.standardized() } else { ds })
    }

    pub fn view_names(&self) -> Option<Vec<String>> {
        self.dataset.as_ref().and_then(|d| d.view_names.clone())
    }
}

/// `section.key=value`; the value is read as JSON when it parses and as a
/// plain string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Usage(format!("override `{spec}` has an empty key")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("override `{spec}`: `{key}` is not inside a section")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Usage(format!("override `{spec}` does not name a section field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
