use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{LanguageLoss, RunConfig};
use super::eval::{evaluate, EvalReport};
use super::train::{train, TrainOutput};
use crate::datagen::Corpus;
use crate::error::Result;
use crate::fusion::ScheduleOrder;

pub const BASELINE: &str = "baseline";
pub const WITH_OFFSET: &str = "+offset";
pub const WITH_TBA: &str = "+offset+tba";
pub const FULL: &str = "+offset+tba+span";
pub const CLS: &str = "full_cls";
pub const BOTTOM_UP: &str = "full_bottom_up";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// The cumulative component rows plus the span/cls and top-down/bottom-up
    /// toggles of the full model.
    Components,
    /// Offset and span weights in {0.1, 1, 10}, one loss at a time.
    Weights,
}

pub const SWEEP_WEIGHTS: [f64; 3] = [0.1, 1.0, 10.0];

/// Named configurations of an ablation, all derived from `base`.
pub fn variants(base: &RunConfig, mode: AblationMode) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.use_offset = true;
    full.use_tba_bidirectional = true;
    full.use_span = true;
    full.span_vs_cls = LanguageLoss::Span;
    if full.schedule == ScheduleOrder::BottomUp {
        full.radii.reverse();
        full.schedule = ScheduleOrder::TopDown;
    }
    match mode {
        AblationMode::Components => {
            let baseline = RunConfig {
                use_offset: false,
                use_tba_bidirectional: false,
                use_span: false,
                ..full.clone()
            };
            let offset = RunConfig {
                use_offset: true,
                ..baseline.clone()
            };
            let tba = RunConfig {
                use_tba_bidirectional: true,
                ..offset.clone()
            };
            let cls = RunConfig {
                span_vs_cls: LanguageLoss::Cls,
                ..full.clone()
            };
            let mut bottom_up = full.clone();
            bottom_up.radii.reverse();
            bottom_up.schedule = ScheduleOrder::BottomUp;
            vec![
                (BASELINE.into(), baseline),
                (WITH_OFFSET.into(), offset),
                (WITH_TBA.into(), tba),
                (FULL.into(), full),
                (CLS.into(), cls),
                (BOTTOM_UP.into(), bottom_up),
            ]
        }
        AblationMode::Weights => {
            let mut out = Vec::new();
            for w in SWEEP_WEIGHTS {
                out.push((
                    format!("weight_offset={w}"),
                    RunConfig {
                        weight_offset: w,
                        weight_span: 1.0,
                        ..full.clone()
                    },
                ));
            }
            for w in SWEEP_WEIGHTS {
                out.push((
                    format!("weight_span={w}"),
                    RunConfig {
                        weight_offset: 1.0,
                        weight_span: w,
                        ..full.clone()
                    },
                ));
            }
            out
        }
    }
}

/// Training seeds shared by every variant.
pub fn seeds(base: &RunConfig) -> Vec<u64> {
    (0..base.ablation_seeds as u64).map(|i| base.seed + i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<AblationRun>,
    pub mean_overall: f64,
    pub mean_easy: f64,
    pub mean_hard: f64,
    pub mean_vdep: f64,
    pub mean_vind: f64,
    pub mean_distance: f64,
    pub mean_failure_distance: f64,
}

impl AblationRow {
    fn from_runs(variant: String, runs: Vec<AblationRun>) -> Self {
        let n = runs.len().max(1) as f64;
        let avg = |f: fn(&EvalReport) -> f64| runs.iter().map(|r| f(&r.report)).sum::<f64>() / n;
        AblationRow {
            mean_overall: avg(|r| r.overall),
            mean_easy: avg(|r| r.easy),
            mean_hard: avg(|r| r.hard),
            mean_vdep: avg(|r| r.vdep),
            mean_vind: avg(|r| r.vind),
            mean_distance: avg(|r| r.mean_distance),
            mean_failure_distance: avg(|r| r.mean_failure_distance),
            variant,
            runs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "variant,seed,overall,easy,hard,vdep,vind,mean_distance,mean_failure_distance"
        )?;
        for row in &self.rows {
            for run in &row.runs {
                let r = &run.report;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    row.variant, run.seed, r.overall, r.easy, r.hard, r.vdep, r.vind, r.mean_distance,
                    r.mean_failure_distance
                )?;
            }
            writeln!(
                w,
                "{},mean,{},{},{},{},{},{},{}",
                row.variant,
                row.mean_overall,
                row.mean_easy,
                row.mean_hard,
                row.mean_vdep,
                row.mean_vind,
                row.mean_distance,
                row.mean_failure_distance
            )?;
        }
        Ok(())
    }
}

pub fn ablate(base: &RunConfig, train_set: &Corpus, eval_set: &Corpus, mode: AblationMode) -> Result<AblationTable> {
    ablate_with(base, train_set, eval_set, &variants(base, mode), |_, _, _, _| {})
}

/// Trains and evaluates every variant for every seed. `on_run` sees each
/// trained model together with its report.
pub fn ablate_with<F>(
    base: &RunConfig,
    train_set: &Corpus,
    eval_set: &Corpus,
    variants: &[(String, RunConfig)],
    mut on_run: F,
) -> Result<AblationTable>
where
    F: FnMut(&str, &RunConfig, &TrainOutput, &EvalReport),
{
    let mut table = AblationTable::default();
    for (name, cfg) in variants {
        let mut runs = Vec::new();
        for seed in seeds(base) {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let out = train(&cfg, train_set)?;
            let report = evaluate(&out.model, &cfg.radius_schedule()?, eval_set)?;
            on_run(name, &cfg, &out, &report);
            runs.push(AblationRun {
                seed,
                final_loss: out.log.last().map_or(0.0, |e| e.losses.total),
                report,
            });
        }
        table.rows.push(AblationRow::from_runs(name.clone(), runs));
    }
    Ok(table)
}
