use std::io::Write;

use serde::Serialize;

use super::fit::train;
use super::infer::{evaluate, EvalConfig};
use super::{Result, TrainConfig, TrainError};
use crate::data::VideoRecord;
use crate::model::{count_parameters, ModelConfig, ViNet};

/// One trained setting scored on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub params: usize,
    pub cc: f64,
    pub sim: f64,
    pub nss: f64,
}

fn run_setting(
    setting: String,
    cfg: ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[VideoRecord],
    val_set: &[VideoRecord],
) -> Result<AblationRow> {
    let params = count_parameters(&cfg)?;
    let model = ViNet::new(cfg, train_cfg.seed)?;
    let outcome = train(model, train_set, val_set, train_cfg)?;
    let report = evaluate(&outcome.model, val_set, &EvalConfig::from_train(train_cfg))?;
    log::info!("{setting}: cc {:.4}", report.mean.cc);
    Ok(AblationRow {
        setting,
        params,
        cc: report.mean.cc,
        sim: report.mean.sim,
        nss: report.mean.nss,
    })
}

/// Trains one model per clip length with the same seed and budget.
pub fn ablate_clip_size(
    sizes: &[usize],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[VideoRecord],
    val_set: &[VideoRecord],
) -> Result<Vec<AblationRow>> {
    if sizes.is_empty() {
        return Err(TrainError::Config("no clip sizes given".into()));
    }
    let configs = sizes
        .iter()
        .map(|&s| {
            let cfg = ModelConfig {
                clip_len: s,
                ..base.clone()
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    train_cfg.validate()?;
    configs
        .into_iter()
        .map(|cfg| run_setting(cfg.clip_len.to_string(), cfg, train_cfg, train_set, val_set))
        .collect()
}

/// Two trainings that differ only in `use_hierarchy`.
pub fn ablate_hierarchy(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[VideoRecord],
    val_set: &[VideoRecord],
) -> Result<Vec<AblationRow>> {
    [(true, "with hierarchy"), (false, "without hierarchy")]
        .into_iter()
        .map(|(h, name)| {
            let cfg = ModelConfig {
                use_hierarchy: h,
                ..base.clone()
            };
            cfg.validate()?;
            run_setting(name.to_string(), cfg, train_cfg, train_set, val_set)
        })
        .collect()
}

/// CSV with columns `setting,params,cc,sim,nss`, scores to four decimals.
pub fn write_ablation<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "params", "cc", "sim", "nss"])?;
    for r in rows {
        w.write_record([
            r.setting.clone(),
            r.params.to_string(),
            format!("{:.4}", r.cc),
            format!("{:.4}", r.sim),
            format!("{:.4}", r.nss),
        ])?;
    }
    w.flush()?;
    Ok(())
}
