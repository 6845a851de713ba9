use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::FreezePolicy;
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::run::{train_run, MetricRow, Retrieval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Baseline,
    Wi,
    Wikd,
    WikdPm,
    /// Baseline on the multi-caption set.
    MultiCaption,
    /// Baseline on the single-caption set.
    SingleCaption,
}

impl AblationArm {
    pub const ALL: [AblationArm; 6] = [
        AblationArm::Baseline,
        AblationArm::Wi,
        AblationArm::Wikd,
        AblationArm::WikdPm,
        AblationArm::MultiCaption,
        AblationArm::SingleCaption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Baseline => "baseline",
            AblationArm::Wi => "wi",
            AblationArm::Wikd => "wikd",
            AblationArm::WikdPm => "wikd_pm",
            AblationArm::MultiCaption => "multi_caption",
            AblationArm::SingleCaption => "single_caption",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    /// Student configuration shared by all arms; its manifest is the
    /// multi-caption training set.
    pub base: TrainConfig,
    pub teacher: PathBuf,
    pub single_caption_manifest: PathBuf,
    pub seeds: Vec<u64>,
    /// 0-based epoch whose mean training loss is compared across caption arms.
    pub loss_epoch: usize,
}

impl AblationSpec {
    pub fn config_for(&self, arm: AblationArm, seed: u64) -> TrainConfig {
        let mut c = TrainConfig {
            seed,
            teacher: Some(self.teacher.clone()),
            use_wi: false,
            use_kd: false,
            use_pm: false,
            freeze_policy: FreezePolicy::InheritedFrozen,
            ..self.base.clone()
        };
        match arm {
            AblationArm::Baseline | AblationArm::MultiCaption => {}
            AblationArm::SingleCaption => c.train_manifest = self.single_caption_manifest.clone(),
            AblationArm::Wi => c.use_wi = true,
            AblationArm::Wikd => {
                c.use_wi = true;
                c.use_kd = true;
            }
            AblationArm::WikdPm => {
                c.use_wi = true;
                c.use_kd = true;
                c.use_pm = true;
            }
        }
        c
    }
}

/// One (arm, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub arm: AblationArm,
    pub seed: u64,
    pub r1: Retrieval,
    pub loss_at_epoch: f64,
    /// `(step, epoch, l_clip, l_total)` for every step.
    pub curve: Vec<(u64, usize, f64, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: AblationArm,
    pub runs: usize,
    pub mean_r1: f64,
    pub sd_r1: f64,
    pub mean_loss_at_epoch: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub records: Vec<RunRecord>,
}

impl AblationReport {
    pub fn summary(&self, arm: AblationArm) -> Option<ArmSummary> {
        let rs: Vec<&RunRecord> = self.records.iter().filter(|r| r.arm == arm).collect();
        if rs.is_empty() {
            return None;
        }
        let (mean_r1, sd_r1) = mean_sd(&rs.iter().map(|r| r.r1.mean()).collect::<Vec<_>>());
        let (mean_loss_at_epoch, _) = mean_sd(&rs.iter().map(|r| r.loss_at_epoch).collect::<Vec<_>>());
        Some(ArmSummary {
            arm,
            runs: rs.len(),
            mean_r1,
            sd_r1,
            mean_loss_at_epoch,
        })
    }

    pub fn summaries(&self) -> Vec<ArmSummary> {
        AblationArm::ALL.iter().filter_map(|a| self.summary(*a)).collect()
    }

    /// The directional comparisons, each with its outcome.
    pub fn ordering_checks(&self) -> Vec<(String, bool)> {
        let s = |a| self.summary(a);
        let mut out = Vec::new();
        if let (Some(b), Some(wi), Some(wikd), Some(pm)) = (
            s(AblationArm::Baseline),
            s(AblationArm::Wi),
            s(AblationArm::Wikd),
            s(AblationArm::WikdPm),
        ) {
            out.push((format!("baseline {:.4} < wikd {:.4}", b.mean_r1, wikd.mean_r1), b.mean_r1 < wikd.mean_r1));
            out.push((
                format!("wikd {:.4} <= wikd_pm {:.4} + sd {:.4}", wikd.mean_r1, pm.mean_r1, pm.sd_r1),
                wikd.mean_r1 <= pm.mean_r1 + pm.sd_r1,
            ));
            out.push((format!("wi {:.4} > baseline {:.4}", wi.mean_r1, b.mean_r1), wi.mean_r1 > b.mean_r1));
        }
        if let (Some(multi), Some(single)) = (s(AblationArm::MultiCaption), s(AblationArm::SingleCaption)) {
            out.push((
                format!(
                    "loss@epoch multi {:.4} <= single {:.4}",
                    multi.mean_loss_at_epoch, single.mean_loss_at_epoch
                ),
                multi.mean_loss_at_epoch <= single.mean_loss_at_epoch,
            ));
            out.push((
                format!("r1 multi {:.4} >= single {:.4}", multi.mean_r1, single.mean_r1),
                multi.mean_r1 >= single.mean_r1,
            ));
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("arm,seed,r1_i2t,r1_t2i,r1_mean,loss_at_epoch,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.1}",
                r.arm.name(),
                r.seed,
                r.r1.i2t,
                r.r1.t2i,
                r.r1.mean(),
                r.loss_at_epoch,
                r.seconds
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("arm,runs,mean_r1,sd_r1,mean_loss_at_epoch\n");
        for s in self.summaries() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.arm.name(),
                s.runs,
                s.mean_r1,
                s.sd_r1,
                s.mean_loss_at_epoch
            );
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("arm,seed,step,epoch,l_clip,l_total\n");
        for r in &self.records {
            for (step, epoch, clip, total) in &r.curve {
                let _ = writeln!(out, "{},{},{step},{epoch},{clip},{total}", r.arm.name(), r.seed);
            }
        }
        out
    }

    /// Writes `ablation_runs.csv`, `ablation_summary.csv`,
    /// `ablation_curves.csv` and `ablation_report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::new();
        for s in self.summaries() {
            let _ = writeln!(
                text,
                "{:<15} R@1 {:.4} ± {:.4} over {} seeds, loss@epoch {:.4}",
                s.arm.name(),
                s.mean_r1,
                s.sd_r1,
                s.runs,
                s.mean_loss_at_epoch
            );
        }
        for (what, ok) in self.ordering_checks() {
            let _ = writeln!(text, "{} {what}", if ok { "ok  " } else { "FAIL" });
        }
        for (name, body) in [
            ("ablation_runs.csv", self.runs_csv()),
            ("ablation_summary.csv", self.summary_csv()),
            ("ablation_curves.csv", self.curves_csv()),
            ("ablation_report.txt", text),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Runs every arm over every seed. Arms whose configuration coincides with
/// an earlier run (the multi-caption arm is the baseline) reuse its result.
/// `progress` sees each record as it completes.
pub fn ablation_suite(spec: &AblationSpec, progress: &mut dyn FnMut(&RunRecord)) -> Result<AblationReport> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut done: Vec<(TrainConfig, RunRecord)> = Vec::new();
    let mut records = Vec::new();
    for arm in AblationArm::ALL {
        for &seed in &spec.seeds {
            let cfg = spec.config_for(arm, seed);
            let rec = match done.iter().find(|(c, _)| *c == cfg) {
                Some((_, r)) => RunRecord { arm, ..r.clone() },
                None => {
                    let start = std::time::Instant::now();
                    let run = train_run::<f32>(&cfg, None, None)?;
                    let r1 = run
                        .final_r1
                        .ok_or_else(|| Error::Config("ablation runs need an eval manifest".into()))?;
                    let loss_at_epoch = run.mean_loss_in_epoch(spec.loss_epoch).ok_or_else(|| {
                        Error::Config(format!("run has no epoch {} to compare losses at", spec.loss_epoch))
                    })?;
                    let curve = run
                        .rows
                        .iter()
                        .filter_map(|r| match r {
                            MetricRow::Step { step, epoch, loss, .. } => Some((*step, *epoch, loss.clip, loss.total)),
                            _ => None,
                        })
                        .collect();
                    let rec = RunRecord {
                        arm,
                        seed,
                        r1,
                        loss_at_epoch,
                        curve,
                        seconds: start.elapsed().as_secs_f64(),
                    };
                    done.push((cfg, rec.clone()));
                    rec
                }
            };
            progress(&rec);
            records.push(rec);
        }
    }
    Ok(AblationReport { records })
}
