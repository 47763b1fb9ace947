use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::corpus::{upsample_class, Manifest};
use crate::error::{CoreError, Result};
use crate::sampler::{build_gft_schedule, duration_balanced_mix, realize_stage, CorpusStats, StageSpec};
use crate::Language;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMethod {
    /// In-domain data only.
    OneStage,
    /// Duration-balanced 1:1 mix of in-domain and out-of-domain data.
    Combined,
    /// Schedule stages with a shrinking out-of-domain share.
    Gradual,
    /// The combined mix, then in-domain data only.
    TwoStage,
}

impl FtMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::OneStage => "one_stage",
            Self::Combined => "combined",
            Self::Gradual => "gradual",
            Self::TwoStage => "two_stage",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Ctc,
    Lid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanStage {
    pub name: String,
    pub manifest: Manifest,
    pub epochs: u32,
    pub losses: Vec<LossTerm>,
}

/// Fine-tuning stages in execution order, with notes on anything the
/// data could not satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<PlanStage>,
    pub notes: Vec<String>,
}

fn need_out_domain(out_domain: Option<&Manifest>, method: FtMethod) -> Result<&Manifest> {
    match out_domain {
        Some(m) if !m.is_empty() => Ok(m),
        _ => Err(CoreError::Config(format!(
            "fine-tuning method {} needs an out-of-domain manifest",
            method.as_str()
        ))),
    }
}

/// Realizes the fine-tuning method of `config` as stages. Fine-tuning
/// always uses the language loss alone.
pub fn build_plan<R: Rng + ?Sized>(
    config: &TrainConfig,
    in_domain: &Manifest,
    out_domain: Option<&Manifest>,
    rng: &mut R,
) -> Result<StagePlan> {
    if in_domain.is_empty() {
        return Err(CoreError::EmptyInput("in-domain manifest is empty".into()));
    }
    let method = config.ft_method;
    let epochs = config.finetune_epochs;
    let lid = vec![LossTerm::Lid];
    let stage = |name: &str, manifest: Manifest, epochs: u32| PlanStage {
        name: name.to_string(),
        manifest,
        epochs,
        losses: lid.clone(),
    };
    let mut notes = Vec::new();
    let stages = match method {
        FtMethod::OneStage => {
            vec![stage("in_domain", upsample_class(in_domain, Language::Zh, config.upsample_zh)?, epochs)]
        }
        FtMethod::Combined | FtMethod::TwoStage => {
            let out = need_out_domain(out_domain, method)?;
            let upsampled = upsample_class(in_domain, Language::Zh, config.upsample_zh)?;
            let mix = duration_balanced_mix(&upsampled, out, rng)?.to_manifest(&upsampled, out)?;
            let mut stages = vec![stage("combined", mix, epochs)];
            if method == FtMethod::TwoStage {
                stages.push(stage("in_domain", upsampled, epochs));
            }
            stages
        }
        FtMethod::Gradual => {
            let out = need_out_domain(out_domain, method)?;
            let specs: &[StageSpec] = config
                .schedule
                .as_deref()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| CoreError::Config("gradual fine-tuning needs a schedule".into()))?;
            let (ratios, factors, stage_epochs) = StageSpec::split(specs);
            let schedule = build_gft_schedule(
                CorpusStats::of(in_domain),
                CorpusStats::of(out),
                &ratios,
                &factors,
                &stage_epochs,
            )?;
            let mut stages = Vec::with_capacity(schedule.len());
            for s in &schedule {
                let realized = realize_stage(s, in_domain, out, rng)?;
                if realized.capped {
                    notes.push(format!(
                        "stage {}: out-of-domain pool smaller than the {:.4} h target",
                        s.stage_index,
                        s.targets.seame_total()
                    ));
                }
                stages.push(stage(&format!("gradual{}", s.stage_index), realized.manifest, s.epochs));
            }
            stages
        }
    };
    Ok(StagePlan { stages, notes })
}
