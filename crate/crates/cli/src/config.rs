use std::path::{Path, PathBuf};

use cslid_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Input files of a run. Relative paths resolve against the directory of
/// the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub en_manifest: Option<PathBuf>,
    pub zh_manifest: Option<PathBuf>,
    pub in_domain_manifest: Option<PathBuf>,
    pub out_domain_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub en_lexicon: Option<PathBuf>,
    pub zh_lexicon: Option<PathBuf>,
    /// Precomputed features written by `cslid features`.
    pub feature_dir: Option<PathBuf>,
    /// Checkpoint to fine-tune from; random initialization when absent.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve(&base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let d = &mut self.data;
        for p in [
            &mut d.en_manifest,
            &mut d.zh_manifest,
            &mut d.in_domain_manifest,
            &mut d.out_domain_manifest,
            &mut d.eval_manifest,
            &mut d.en_lexicon,
            &mut d.zh_lexicon,
            &mut d.feature_dir,
            &mut d.init_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks that every configured input exists before any work starts.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let d = &self.data;
        for (key, p) in [
            ("data.en_manifest", &d.en_manifest),
            ("data.zh_manifest", &d.zh_manifest),
            ("data.in_domain_manifest", &d.in_domain_manifest),
            ("data.out_domain_manifest", &d.out_domain_manifest),
            ("data.eval_manifest", &d.eval_manifest),
            ("data.en_lexicon", &d.en_lexicon),
            ("data.zh_lexicon", &d.zh_lexicon),
            ("data.feature_dir", &d.feature_dir),
            ("data.init_checkpoint", &d.init_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Usage(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        self.train.validate().map_err(|e| CliError::Usage(format!("train: {e}")))
    }
}

pub fn require<'a>(key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("config is missing data.{key}")))
}
