//! Wall-clock and peak-memory comparison of the three training pipelines.
//!
//! The memory figure is the engine's tracked tensor high-water mark, not OS
//! RSS: tracked bytes depend only on the allocation pattern, which is
//! deterministic for a fixed seed, while RSS varies with the allocator and
//! the kernel. RSS (Linux `VmHWM`) is still sampled and carried along as an
//! informational column. Runs must execute serially in a process that is
//! not allocating tensors elsewhere, or the shared gauge mixes them up.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonn::alloc;
use crate::netbuild::NetConfig;
use crate::segloss::MetricReport;
use crate::trainer::{train, Checkpoint, Dataset, History, HyperParams, Pipeline, TrainerError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("pipeline '{0}' appears more than once")]
    DuplicatePipeline(Pipeline),
    #[error("comparison needs at least two records, got {0}")]
    TooFewRecords(usize),
    #[error("{records} records but {reports} metric reports")]
    MetricCountMismatch { records: usize, reports: usize },
    #[error("unreadable report: {0}")]
    BadReport(String),
    #[error("bench repeats must be at least 1")]
    ZeroRepeats,
    #[error(transparent)]
    Train(#[from] TrainerError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// One pipeline's measured training cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub pipeline: Pipeline,
    pub epochs: u64,
    /// Whole-run wall clock, averaged over repeats.
    pub total_seconds: f64,
    pub per_epoch_seconds: f64,
    /// High-water mark of engine-tracked tensor bytes during the run.
    pub peak_tracked_bytes: u64,
    /// OS-reported peak resident set, when the platform exposes one.
    /// Process-lifetime monotone, so informational only.
    pub peak_rss_bytes: Option<u64>,
    pub config: NetConfig,
    pub seed: u64,
}

/// A bench measurement plus the artifacts of its (last) training run, so
/// metric evaluation does not have to train again.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub record: BenchRecord,
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// Trains `pipeline` `repeats` times under instrumentation. Wall clock is
/// averaged; the tracked peak is taken from the final repeat, which equals
/// every other repeat because the allocation pattern is seed-deterministic.
pub fn run_pipeline_bench(
    pipeline: Pipeline,
    cfg: &NetConfig,
    data: &Dataset,
    hp: &HyperParams,
    repeats: usize,
) -> Result<BenchRun> {
    if repeats == 0 {
        return Err(BenchError::ZeroRepeats);
    }
    let mut total = 0.0f64;
    let mut peak = 0usize;
    let mut artifacts = None;
    for _ in 0..repeats {
        alloc::reset_peak();
        let begun = Instant::now();
        let run = train(pipeline, cfg, data, hp)?;
        total += begun.elapsed().as_secs_f64();
        peak = alloc::peak_bytes();
        artifacts = Some(run);
    }
    let (checkpoint, history) = artifacts.expect("at least one repeat ran");
    let total_seconds = total / repeats as f64;
    let record = BenchRecord {
        pipeline,
        epochs: hp.epochs,
        total_seconds,
        per_epoch_seconds: if hp.epochs > 0 { total_seconds / hp.epochs as f64 } else { 0.0 },
        peak_tracked_bytes: peak as u64,
        peak_rss_bytes: peak_rss_bytes(),
        config: cfg.clone(),
        seed: hp.seed,
    };
    Ok(BenchRun { record, checkpoint, history })
}

/// Linux `VmHWM` in bytes; `None` where /proc is absent.
fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// Fractional saving of `subject` relative to `reference` on total wall
/// clock: 0.7 means the subject needs 30% of the reference's time.
pub fn time_reduction(subject: &BenchRecord, reference: &BenchRecord) -> f64 {
    1.0 - subject.total_seconds / reference.total_seconds
}

/// Fractional saving on the tracked-byte peak, same convention.
pub fn memory_reduction(subject: &BenchRecord, reference: &BenchRecord) -> f64 {
    1.0 - subject.peak_tracked_bytes as f64 / reference.peak_tracked_bytes as f64
}

/// Cost saving of one pipeline measured against another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReduction {
    pub subject: Pipeline,
    pub reference: Pipeline,
    pub time_reduction: f64,
    pub memory_reduction: f64,
}

/// Cost and accuracy of every benched pipeline, with all pairwise savings
/// and a headline row comparing the projection pipeline against full 3D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub records: Vec<BenchRecord>,
    /// Parallel to `records`.
    pub metrics: Vec<MetricReport>,
    pub pairwise: Vec<PairwiseReduction>,
    pub headline: Option<PairwiseReduction>,
}

/// Joins bench records with their evaluation reports. Pipelines must be
/// distinct; `metric_reports` is parallel to `records`.
pub fn compare(records: &[BenchRecord], metric_reports: &[MetricReport]) -> Result<ComparisonReport> {
    if records.len() < 2 {
        return Err(BenchError::TooFewRecords(records.len()));
    }
    if records.len() != metric_reports.len() {
        return Err(BenchError::MetricCountMismatch {
            records: records.len(),
            reports: metric_reports.len(),
        });
    }
    for (i, rec) in records.iter().enumerate() {
        if records[..i].iter().any(|r| r.pipeline == rec.pipeline) {
            return Err(BenchError::DuplicatePipeline(rec.pipeline));
        }
    }

    let mut pairwise = Vec::new();
    for subject in records {
        for reference in records {
            if subject.pipeline == reference.pipeline {
                continue;
            }
            pairwise.push(PairwiseReduction {
                subject: subject.pipeline,
                reference: reference.pipeline,
                time_reduction: time_reduction(subject, reference),
                memory_reduction: memory_reduction(subject, reference),
            });
        }
    }
    let headline = pairwise
        .iter()
        .find(|p| p.subject == Pipeline::Ip && p.reference == Pipeline::Vol3d)
        .copied();
    Ok(ComparisonReport {
        records: records.to_vec(),
        metrics: metric_reports.to_vec(),
        pairwise,
        headline,
    })
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| BenchError::BadReport(e.to_string()))
    }

    /// One row per pipeline; metric columns are the foreground macro
    /// averages of the standard recall/precision family.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "pipeline,epochs,total_s,per_epoch_s,peak_tracked_bytes,peak_rss_bytes,recall,precision,dsc\n",
        );
        for (rec, metrics) in self.records.iter().zip(&self.metrics) {
            let rss = rec.peak_rss_bytes.map(|b| b.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                rec.pipeline,
                rec.epochs,
                rec.total_seconds,
                rec.per_epoch_seconds,
                rec.peak_tracked_bytes,
                rss,
                metrics.csv_line(),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segloss::{metric_report, ConfusionCounts};
    use proptest::prelude::*;

    fn record(pipeline: Pipeline, total: f64, peak: u64) -> BenchRecord {
        BenchRecord {
            pipeline,
            epochs: 10,
            total_seconds: total,
            per_epoch_seconds: total / 10.0,
            peak_tracked_bytes: peak,
            peak_rss_bytes: Some(peak * 3),
            config: NetConfig::default(),
            seed: 7,
        }
    }

    fn report_for(counts: &[(u64, u64, u64, u64)]) -> MetricReport {
        let per_class = counts
            .iter()
            .map(|&(tp, fp, tn, fn_)| crate::segloss::ClassCounts {
                true_pos: tp,
                false_pos: fp,
                true_neg: tn,
                false_neg: fn_,
            })
            .collect();
        metric_report(&ConfusionCounts { per_class })
    }

    fn two_class_report() -> MetricReport {
        report_for(&[(90, 2, 5, 3), (5, 3, 90, 2)])
    }

    #[test]
    fn headline_arithmetic_matches_hand_numbers() {
        let ip = record(Pipeline::Ip, 3.0, 100);
        let vol = record(Pipeline::Vol3d, 10.0, 1000);
        assert_eq!(time_reduction(&ip, &vol), 0.7);
        assert_eq!(memory_reduction(&ip, &vol), 0.9);
    }

    #[test]
    fn identical_costs_reduce_by_zero() {
        let a = record(Pipeline::Ip, 4.0, 640);
        let b = BenchRecord { pipeline: Pipeline::Vol3d, ..a.clone() };
        assert_eq!(time_reduction(&a, &b), 0.0);
        assert_eq!(memory_reduction(&a, &b), 0.0);
    }

    #[test]
    fn compare_pairs_every_pipeline_and_finds_the_headline() {
        let records = [
            record(Pipeline::Ip, 3.0, 100),
            record(Pipeline::Slice2d, 6.0, 300),
            record(Pipeline::Vol3d, 10.0, 1000),
        ];
        let metrics = vec![two_class_report(); 3];
        let report = compare(&records, &metrics).unwrap();
        assert_eq!(report.pairwise.len(), 6);
        let headline = report.headline.unwrap();
        assert_eq!(headline.subject, Pipeline::Ip);
        assert_eq!(headline.reference, Pipeline::Vol3d);
        assert_eq!(headline.time_reduction, 0.7);
        assert_eq!(headline.memory_reduction, 0.9);
    }

    #[test]
    fn headline_is_absent_without_both_of_its_pipelines() {
        let records = [record(Pipeline::Ip, 3.0, 100), record(Pipeline::Slice2d, 6.0, 300)];
        let metrics = vec![two_class_report(); 2];
        let report = compare(&records, &metrics).unwrap();
        assert!(report.headline.is_none());
        assert_eq!(report.pairwise.len(), 2);
    }

    #[test]
    fn compare_rejects_bad_inputs() {
        let one = [record(Pipeline::Ip, 3.0, 100)];
        assert!(matches!(
            compare(&one, &[two_class_report()]),
            Err(BenchError::TooFewRecords(1))
        ));

        let dup = [record(Pipeline::Ip, 3.0, 100), record(Pipeline::Ip, 4.0, 200)];
        assert!(matches!(
            compare(&dup, &vec![two_class_report(); 2]),
            Err(BenchError::DuplicatePipeline(Pipeline::Ip))
        ));

        let two = [record(Pipeline::Ip, 3.0, 100), record(Pipeline::Vol3d, 10.0, 1000)];
        assert!(matches!(
            compare(&two, &[two_class_report()]),
            Err(BenchError::MetricCountMismatch { records: 2, reports: 1 })
        ));
    }

    #[test]
    fn report_json_round_trips() {
        let records = [
            record(Pipeline::Ip, 3.0, 100),
            BenchRecord { peak_rss_bytes: None, ..record(Pipeline::Vol3d, 10.0, 1000) },
        ];
        let metrics = vec![two_class_report(); 2];
        let report = compare(&records, &metrics).unwrap();
        let back = ComparisonReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_has_one_row_per_pipeline_with_stable_columns() {
        let records = [
            record(Pipeline::Ip, 3.0, 100),
            BenchRecord { peak_rss_bytes: None, ..record(Pipeline::Vol3d, 10.0, 1000) },
        ];
        let metrics = vec![two_class_report(); 2];
        let csv = compare(&records, &metrics).unwrap().csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "pipeline,epochs,total_s,per_epoch_s,peak_tracked_bytes,peak_rss_bytes,recall,precision,dsc"
        );
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "ip");
        assert_eq!(first[1], "10");
        assert_eq!(first[2], "3");
        assert_eq!(first[4], "100");
        assert_eq!(first.len(), 9);
        // Absent RSS leaves an empty cell, not a shifted row.
        let second: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(second[5], "");
        assert_eq!(second.len(), 9);
    }

    #[test]
    fn zero_repeats_is_rejected_before_any_training() {
        let data = crate::trainer::synth_dataset(
            &crate::trainer::PhantomSpec {
                dims: (16, 16, 8),
                lesion_radius_range: (1.5, 3.0),
                ..Default::default()
            },
            1,
            1.0,
            0,
        )
        .unwrap();
        let cfg = NetConfig {
            width_factor: 1.0 / 16.0,
            depth: 2,
            num_classes: 2,
            ..NetConfig::default()
        };
        let hp = HyperParams { epochs: 1, ..HyperParams::default() };
        assert!(matches!(
            run_pipeline_bench(Pipeline::Ip, &cfg, &data, &hp, 0),
            Err(BenchError::ZeroRepeats)
        ));
    }

    proptest! {
        // reduction(a,b) = 1 - 1/(1 - reduction(b,a)) wherever both sides
        // are finite.
        #[test]
        fn reductions_are_antisymmetric(
            ta in 1e-3..1e3f64,
            tb in 1e-3..1e3f64,
            pa in 1u64..1_000_000,
            pb in 1u64..1_000_000,
        ) {
            let a = record(Pipeline::Ip, ta, pa);
            let b = record(Pipeline::Vol3d, tb, pb);
            let t_ab = time_reduction(&a, &b);
            let t_ba = time_reduction(&b, &a);
            prop_assert!((t_ab - (1.0 - 1.0 / (1.0 - t_ba))).abs() < 1e-9);
            let m_ab = memory_reduction(&a, &b);
            let m_ba = memory_reduction(&b, &a);
            prop_assert!((m_ab - (1.0 - 1.0 / (1.0 - m_ba))).abs() < 1e-9);
            prop_assert!(t_ab <= 1.0 && m_ab <= 1.0);
        }
    }
}
