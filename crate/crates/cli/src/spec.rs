//! Experiment files: one TOML document binding model, training, data and
//! output settings.

use std::fs;
use std::path::{Path, PathBuf};

use kvprompt::data::{load_idx, load_manifest, make_shift_task, split_800_200, Dataset, Split};
use kvprompt::trainer::{OptimizerKind, TrainConfig};
use kvprompt::{Error, ModelConfig, Precision, Result};
use serde::{Deserialize, Serialize};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    /// Run directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub embed: EmbedSpec,
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        base_lr: 2e-3,
        weight_decay: 0.05,
        epochs: 15,
        warmup_epochs: 1,
        batch_size: 32,
        optimizer: OptimizerKind::AdamW,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Seed of the 800/200-style train/val split of the target task.
    #[serde(default)]
    pub split_seed: u64,
    pub source: DataSource,
    pub target: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Bundled synthetic shapes; the source role takes the warm domain and
    /// the target role the shifted one.
    Shift { seed: u64, classes: usize, per_class: usize },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resize: Option<usize>,
    },
    Pgm {
        train_manifest: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_manifest: Option<PathBuf>,
        size: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Cross the (lr, wd) grid with the prune ratio grid.
    pub pruning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSpec {
    pub curvature: f64,
    pub recall_k: Vec<usize>,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec {
            curvature: 1.0,
            recall_k: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl ExperimentSpec {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        if spec.version != SPEC_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported version {}, expected {SPEC_VERSION}",
                origin.display(),
                spec.version
            )));
        }
        let base = origin.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.embed.curvature.is_finite() && self.embed.curvature > 0.0) {
            return Err(Error::Config("embed.curvature must be positive".into()));
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, precision: Option<Precision>) -> Self {
        if let Some(s) = seed {
            self.model.seed = s;
            self.pretrain.seed = s;
            self.finetune.seed = s;
        }
        if let Some(p) = precision {
            self.model.precision = p;
        }
        self
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(out) = &mut self.out {
            fix(out);
        }
        for src in [&mut self.data.source, &mut self.data.target] {
            match src {
                DataSource::Shift { .. } => {}
                DataSource::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                    ..
                } => {
                    fix(train_images);
                    fix(train_labels);
                    test_images.iter_mut().chain(test_labels.iter_mut()).for_each(fix);
                }
                DataSource::Pgm {
                    train_manifest,
                    test_manifest,
                    ..
                } => {
                    fix(train_manifest);
                    test_manifest.iter_mut().for_each(fix);
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode spec: {e}")))
    }

    pub fn dataset(&self, role: Role) -> Result<Dataset> {
        let source = match role {
            Role::Source => &self.data.source,
            Role::Target => &self.data.target,
        };
        load_source(source, role)
    }

    /// Target task with a validation split carved from its training split
    /// when it ships without one.
    pub fn target_with_val(&self) -> Result<Dataset> {
        let mut ds = self.dataset(Role::Target)?;
        if ds.val.is_none() {
            let (train, val) = split_800_200(&ds.train, self.data.split_seed)?;
            ds.train = train;
            ds.val = Some(val);
        }
        Ok(ds)
    }
}

fn class_names(splits: &[&Split]) -> Vec<String> {
    let n = splits
        .iter()
        .flat_map(|s| s.labels.iter())
        .max()
        .map_or(0, |&m| m + 1);
    (0..n).map(|c| c.to_string()).collect()
}

fn load_source(source: &DataSource, role: Role) -> Result<Dataset> {
    match source {
        DataSource::Shift {
            seed,
            classes,
            per_class,
        } => {
            let (s, t) = make_shift_task(*seed, *classes, *per_class);
            Ok(if role == Role::Source { s } else { t })
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            resize,
        } => {
            let train = load_idx(train_images, train_labels)?;
            if train.rows != train.cols {
                return Err(Error::Data(format!("{} holds non-square images", train_images.display())));
            }
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?.split),
                (None, None) => None,
                _ => return Err(Error::Config("idx test_images and test_labels go together".into())),
            };
            let splits: Vec<&Split> = std::iter::once(&train.split).chain(test.as_ref()).collect();
            let ds = Dataset {
                name: train_images.display().to_string(),
                channels: 1,
                image_size: train.rows,
                class_names: class_names(&splits),
                train: train.split.clone(),
                val: None,
                test,
            };
            ds.validate()?;
            Ok(match resize {
                Some(size) => ds.resized(*size),
                None => ds,
            })
        }
        DataSource::Pgm {
            train_manifest,
            test_manifest,
            size,
        } => {
            let train = load_manifest(train_manifest, *size)?;
            let test = test_manifest.as_ref().map(|m| load_manifest(m, *size)).transpose()?;
            let splits: Vec<&Split> = std::iter::once(&train).chain(test.as_ref()).collect();
            let ds = Dataset {
                name: train_manifest.display().to_string(),
                channels: 1,
                image_size: *size,
                class_names: class_names(&splits),
                train,
                val: None,
                test,
            };
            ds.validate()?;
            Ok(ds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1

[model]
image_size = 16
patch_size = 4
channels = 3
embed_dim = 16
num_layers = 1
num_heads = 2
num_classes = 3

[data.source]
kind = "shift"
seed = 0
classes = 3
per_class = 4

[data.target]
kind = "shift"
seed = 0
classes = 3
per_class = 4
"#;

    #[test]
    fn minimal_spec_parses_and_roundtrips() {
        let spec = ExperimentSpec::parse(MINIMAL, Path::new("/tmp/x.toml")).unwrap();
        assert_eq!(spec.finetune, TrainConfig::default());
        let again = ExperimentSpec::parse(&spec.to_toml().unwrap(), Path::new("/tmp/x.toml")).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn unknown_keys_and_missing_version_rejected() {
        let extra = MINIMAL.replace("num_classes = 3", "num_classes = 3\nbogus = 1");
        assert!(ExperimentSpec::parse(&extra, Path::new("x")).is_err());
        let no_version = MINIMAL.replace("version = 1", "");
        assert!(ExperimentSpec::parse(&no_version, Path::new("x")).is_err());
        let wrong = MINIMAL.replace("version = 1", "version = 7");
        assert!(ExperimentSpec::parse(&wrong, Path::new("x")).is_err());
        let bad_source = MINIMAL.replace("per_class = 4\n\n[data.target]", "per_class = 4\nflavour = 2\n\n[data.target]");
        assert!(ExperimentSpec::parse(&bad_source, Path::new("x")).is_err());
    }

    #[test]
    fn target_gets_a_validation_split() {
        let spec = ExperimentSpec::parse(MINIMAL, Path::new("x")).unwrap();
        let ds = spec.target_with_val().unwrap();
        assert_eq!(ds.train.len() + ds.val.as_ref().unwrap().len(), 12);
    }

    #[test]
    fn overrides_apply() {
        let spec = ExperimentSpec::parse(MINIMAL, Path::new("x"))
            .unwrap()
            .with_overrides(Some(9), Some(Precision::F32));
        assert_eq!((spec.model.seed, spec.pretrain.seed, spec.finetune.seed), (9, 9, 9));
        assert_eq!(spec.model.precision, Precision::F32);
    }
}
