//! Experiment recipes: `key = value` text with sections, parsed as TOML.
//!
//! ```toml
//! approach = "merged"
//! seed = 7
//!
//! [dataset]
//! kind = "synthetic-anodes"
//! classes = 40
//! views = 4
//!
//! [protocol]
//! kind = "holdout"
//! classes = 5
//! folds = 1
//!
//! [train]
//! epochs = 20
//! ```

use std::path::{Path, PathBuf};

use oneshot_core::augment::AugmentConfig;
use oneshot_core::data::norb::{load_smallnorb_split, NorbIdentity, NorbOptions, NorbSplit};
use oneshot_core::data::{generate_synthetic_anodes, load_pgm_faces, Dataset, SyntheticAnodeSpec};
use oneshot_core::experiment::{AugmentPlan, Experiment, GeneratePlan, PairPlan, Protocol};
use oneshot_core::model::{Approach, ModelOptions};
use oneshot_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Smallnorb,
    AttFaces,
    SyntheticAnodes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NorbSplitChoice {
    Train,
    Test,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory of a stored dataset; relative paths resolve against the data dir.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub views: Option<usize>,
    /// Integer factor by which images are shrunk after loading.
    #[serde(default = "one")]
    pub downscale: usize,
    #[serde(default)]
    pub split: Option<NorbSplitChoice>,
    /// smallNORB identity: `instance` or `category`.
    #[serde(default)]
    pub identity: Option<String>,
    /// Expected examples per smallNORB split; 0 disables the check.
    #[serde(default)]
    pub expected_examples: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub copies: usize,
    #[serde(flatten)]
    pub config: AugmentConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            copies: 1,
            config: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub approach: Approach,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub protocol: Protocol,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pairs: PairPlan,
    #[serde(default)]
    pub synthetic: SyntheticAnodeSpec,
    #[serde(default)]
    pub augment: Option<AugmentSection>,
    #[serde(default)]
    pub generate: Option<GeneratePlan>,
}

impl Recipe {
    pub fn parse(text: &str) -> Result<Recipe, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("recipe: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<(Recipe, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read recipe {}: {e}", path.display())))?;
        Ok((Recipe::parse(&text)?, text))
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            approach: self.approach,
            model: self.model.clone(),
            train: self.train.clone(),
            pairs: self.pairs.clone(),
            protocol: self.protocol.clone(),
            augment: self.augment.as_ref().map(|a| AugmentPlan {
                copies: a.copies,
                config: a.config.clone(),
            }),
            generate: self.generate.clone(),
            seed: self.seed,
        }
    }

    /// Loads or generates the dataset. Relative paths resolve against `data_dir`.
    pub fn dataset(&self, data_dir: Option<&Path>) -> Result<Dataset, CliError> {
        let d = &self.dataset;
        if d.downscale == 0 {
            return Err(CliError::Validation("dataset.downscale must be at least 1".into()));
        }
        let resolve = |default: &str| -> Result<PathBuf, CliError> {
            let p = d.path.clone().unwrap_or_else(|| PathBuf::from(default));
            if p.is_absolute() {
                return Ok(p);
            }
            match data_dir {
                Some(base) => Ok(base.join(p)),
                None => Err(CliError::Validation(format!(
                    "dataset path {} is relative and no data dir is set (--data-dir or ONESHOT_DATA_DIR)",
                    p.display()
                ))),
            }
        };
        let ds = match d.kind {
            DatasetKind::SyntheticAnodes => {
                let classes = d.classes.unwrap_or(40);
                let views = d.views.unwrap_or(4);
                generate_synthetic_anodes(&self.synthetic, classes, views)?
            }
            DatasetKind::AttFaces => {
                let ds = load_pgm_faces(&resolve("att_faces")?)?;
                if let Some(c) = d.classes {
                    let keep: Vec<usize> = ds.classes().into_iter().take(c).collect();
                    ds.restrict_classes(&keep)?
                } else {
                    ds
                }
            }
            DatasetKind::Smallnorb => {
                let dir = resolve("smallnorb")?;
                let identity = match d.identity.as_deref() {
                    None | Some("instance") => NorbIdentity::Instance,
                    Some("category") => NorbIdentity::Category,
                    Some(o) => {
                        return Err(CliError::Validation(format!(
                            "dataset.identity {o:?} is not instance or category"
                        )))
                    }
                };
                let opts = NorbOptions {
                    identity,
                    expected_examples: match d.expected_examples {
                        Some(0) => None,
                        Some(n) => Some(n),
                        None => NorbOptions::default().expected_examples,
                    },
                    downscale: d.downscale,
                };
                match d.split.unwrap_or(NorbSplitChoice::Test) {
                    NorbSplitChoice::Train => load_smallnorb_split(&dir, NorbSplit::Train, &opts)?,
                    NorbSplitChoice::Test => load_smallnorb_split(&dir, NorbSplit::Test, &opts)?,
                    NorbSplitChoice::Both => load_smallnorb_split(&dir, NorbSplit::Train, &opts)?
                        .concat(load_smallnorb_split(&dir, NorbSplit::Test, &opts)?)?,
                }
            }
        };
        if d.downscale > 1 && d.kind != DatasetKind::Smallnorb {
            let f = d.downscale;
            return Ok(ds.map_images(|im| im.downscale(f))?);
        }
        Ok(ds)
    }
}
