//! Shot-group partitioning, MAE/R2 and the ablation and lighting harnesses.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Lighting, MeasureKind};
use crate::error::{Error, Result};
use crate::pavit::{predict_set, train, Checkpoint, FeatureFlags, History, ModelConfig, PatchSet, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub const ALL: [ShotGroup; 3] = [ShotGroup::Many, ShotGroup::Medium, ShotGroup::Few];
}

impl fmt::Display for ShotGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShotGroup::Many => "many",
            ShotGroup::Medium => "medium",
            ShotGroup::Few => "few",
        })
    }
}

/// Histogram of training labels with a shot group per bin. Bin `k` covers
/// `[first + k, first + k + 1) * bin_width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotPartition {
    pub bin_width: f64,
    pub first_bin: i64,
    pub counts: Vec<usize>,
    pub groups: Vec<ShotGroup>,
}

pub fn partition_shots(train_labels: &[f64], bin_width: f64) -> Result<ShotPartition> {
    if train_labels.is_empty() {
        return Err(Error::invalid("shot partition needs at least one label"));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_width}")));
    }
    if train_labels.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("labels must be finite"));
    }
    let bin = |y: f64| (y / bin_width).floor() as i64;
    let lo = train_labels.iter().map(|&y| bin(y)).min().expect("nonempty");
    let hi = train_labels.iter().map(|&y| bin(y)).max().expect("nonempty");
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &y in train_labels {
        counts[(bin(y) - lo) as usize] += 1;
    }
    let max = *counts.iter().max().expect("nonempty") as f64;
    let groups = counts
        .iter()
        .map(|&c| {
            let c = c as f64;
            if c >= max / 2.0 {
                ShotGroup::Many
            } else if c >= max / 4.0 {
                ShotGroup::Medium
            } else {
                ShotGroup::Few
            }
        })
        .collect();
    Ok(ShotPartition {
        bin_width,
        first_bin: lo,
        counts,
        groups,
    })
}

impl ShotPartition {
    /// Group of a label; labels outside the histogram use the nearest edge bin.
    pub fn group_of(&self, y: f64) -> ShotGroup {
        let k = (y / self.bin_width).floor() as i64 - self.first_bin;
        let k = k.clamp(0, self.groups.len() as i64 - 1) as usize;
        self.groups[k]
    }

    /// Share of `labels` falling in each group.
    pub fn mass(&self, labels: &[f64]) -> [f64; 3] {
        let mut m = [0.0; 3];
        for &y in labels {
            m[self.group_of(y) as usize] += 1.0;
        }
        m.map(|v| v / labels.len().max(1) as f64)
    }
}

fn check_lengths(preds: &[f64], labels: &[f64], min: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} predictions", labels.len()),
            actual: preds.len().to_string(),
        });
    }
    if labels.len() < min {
        return Err(Error::invalid(format!("need at least {min} samples, got {}", labels.len())));
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels, 1)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / labels.len() as f64)
}

/// `1 - SS_res / SS_tot`; negative when worse than predicting the mean.
pub fn r2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels, 2)?;
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("labels have zero variance".into()));
    }
    let ss_res: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// MAE restricted to labels in `group`; `None` when the group is empty.
pub fn mae_group(preds: &[f64], labels: &[f64], partition: &ShotPartition, group: ShotGroup) -> Result<Option<f64>> {
    check_lengths(preds, labels, 0)?;
    let (p, y): (Vec<f64>, Vec<f64>) = preds
        .iter()
        .zip(labels)
        .filter(|(_, &y)| partition.group_of(y) == group)
        .map(|(&p, &y)| (p, y))
        .unzip();
    if y.is_empty() {
        Ok(None)
    } else {
        mae(&p, &y).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: MeasureKind,
    pub n: usize,
    pub mae_all: f64,
    pub mae_many: Option<f64>,
    pub mae_medium: Option<f64>,
    pub mae_few: Option<f64>,
    pub group_counts: [usize; 3],
    pub r2: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(kind: MeasureKind, preds: &[f64], labels: &[f64], partition: &ShotPartition) -> Result<Self> {
        let mut counts = [0usize; 3];
        for &y in labels {
            counts[partition.group_of(y) as usize] += 1;
        }
        Ok(Self {
            kind,
            n: labels.len(),
            mae_all: mae(preds, labels)?,
            mae_many: mae_group(preds, labels, partition, ShotGroup::Many)?,
            mae_medium: mae_group(preds, labels, partition, ShotGroup::Medium)?,
            mae_few: mae_group(preds, labels, partition, ShotGroup::Few)?,
            group_counts: counts,
            r2: r2(preds, labels).ok(),
        })
    }

    pub fn table_header() -> &'static str {
        "kind    n      MAE(all)  MAE(many) MAE(med)  MAE(few)  R2"
    }

    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        format!(
            "{:<7} {:<6} {:<9.3} {:<9} {:<9} {:<9} {}",
            self.kind.name(),
            self.n,
            self.mae_all,
            f(self.mae_many),
            f(self.mae_medium),
            f(self.mae_few),
            f(self.r2)
        )
    }
}

/// Scores a checkpoint on a prepared test set. `partition` must come from
/// the training labels.
pub fn evaluate(ck: &Checkpoint, test: &PatchSet, partition: &ShotPartition) -> Result<EvalReport> {
    let preds = predict_set(ck, test)?;
    let labels: Vec<f64> = test.patches().iter().map(|p| p.label.value).collect();
    EvalReport::from_predictions(ck.kind, &preds, &labels, partition)
}

fn labels_of(set: &PatchSet) -> Vec<f64> {
    set.patches().iter().map(|p| p.label.value).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub config: char,
    pub flags: FeatureFlags,
    pub report: EvalReport,
    pub history: History,
}

/// Trains configs A..E with cumulative feature flags on the same split.
pub fn ablation_ladder(
    model_cfg: &ModelConfig,
    train_set: &PatchSet,
    test_set: &PatchSet,
    cfg: &TrainConfig,
    bin_width: f64,
) -> Result<Vec<AblationRun>> {
    let partition = partition_shots(&labels_of(train_set), bin_width)?;
    let mut runs = Vec::new();
    for letter in ['A', 'B', 'C', 'D', 'E'] {
        let flags = FeatureFlags {
            use_lighting_augmentation: cfg.flags.use_lighting_augmentation,
            ..FeatureFlags::config(letter)?
        };
        let run_cfg = TrainConfig {
            flags,
            val_every: 0,
            ..cfg.clone()
        };
        let out = train(model_cfg, train_set, None, &run_cfg)?;
        let report = evaluate(&out.checkpoint, test_set, &partition)?;
        log::info!("config {letter}: {}", report.table_row());
        runs.push(AblationRun {
            config: letter,
            flags,
            report,
            history: out.history,
        });
    }
    Ok(runs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LightingFold {
    pub held_out: Lighting,
    pub with_augmentation: EvalReport,
    pub without_augmentation: EvalReport,
}

/// For each lighting tag: train on the others and test on it, with and
/// without random lighting augmentation.
pub fn leave_one_lighting_out(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    bin_width: f64,
) -> Result<Vec<LightingFold>> {
    let tags: BTreeSet<Lighting> = dataset.lightings();
    if tags.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-lighting-out needs at least 2 lighting tags, found {}",
            tags.len()
        )));
    }
    let mut folds = Vec::new();
    for &held in &tags {
        let train_ds = dataset.filter(|r| r.image.lighting != held);
        let test_ds = dataset.filter(|r| r.image.lighting == held);
        let train_set = PatchSet::new(train_ds.patches(cfg.kind)?, model_cfg)?;
        let test_set = PatchSet::new(test_ds.patches(cfg.kind)?, model_cfg)?;
        let partition = partition_shots(&labels_of(&train_set), bin_width)?;
        let mut reports = Vec::new();
        for aug in [true, false] {
            let run_cfg = TrainConfig {
                flags: FeatureFlags {
                    use_lighting_augmentation: aug,
                    ..cfg.flags
                },
                val_every: 0,
                ..cfg.clone()
            };
            let out = train(model_cfg, &train_set, None, &run_cfg)?;
            reports.push(evaluate(&out.checkpoint, &test_set, &partition)?);
        }
        let without = reports.pop().expect("two runs");
        let with = reports.pop().expect("two runs");
        log::info!("held out {held}: with aug {} / without {}", with.table_row(), without.table_row());
        folds.push(LightingFold {
            held_out: held,
            with_augmentation: with,
            without_augmentation: without,
        });
    }
    Ok(folds)
}

/// Nondecreasing with ties: each value is at least its predecessor minus `tol`.
pub fn is_nondecreasing_within(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_with_counts(counts: &[usize]) -> Vec<f64> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(b, &c)| (0..c).map(move |k| b as f64 + (k as f64 + 0.5) / (c as f64 + 1.0)))
            .collect()
    }

    #[test]
    fn counts_oracle() {
        let p = partition_shots(&labels_with_counts(&[100, 60, 30, 10]), 1.0).unwrap();
        assert_eq!(p.counts, vec![100, 60, 30, 10]);
        assert_eq!(p.groups, vec![ShotGroup::Many, ShotGroup::Many, ShotGroup::Medium, ShotGroup::Few]);
    }

    #[test]
    fn uniform_and_single_bin() {
        let p = partition_shots(&labels_with_counts(&[7, 7, 7, 7]), 1.0).unwrap();
        assert!(p.groups.iter().all(|g| *g == ShotGroup::Many));
        let p = partition_shots(&[3.2, 3.7], 1.0).unwrap();
        assert_eq!(p.groups, vec![ShotGroup::Many]);
    }

    #[test]
    fn out_of_range_uses_edge_bins() {
        let p = partition_shots(&labels_with_counts(&[100, 60, 30, 10]), 1.0).unwrap();
        assert_eq!(p.group_of(-5.0), ShotGroup::Many);
        assert_eq!(p.group_of(99.0), ShotGroup::Few);
    }

    #[test]
    fn metric_hand_cases() {
        assert_eq!(mae(&[5.0, 5.0], &[0.0, 10.0]).unwrap(), 5.0);
        assert_eq!(r2(&[5.0, 5.0], &[0.0, 10.0]).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!(r2(&[1.0, 2.0], &[4.0, 4.0]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(r2(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn empty_group_is_absent() {
        let p = partition_shots(&labels_with_counts(&[100, 60, 30, 10]), 1.0).unwrap();
        let r = EvalReport::from_predictions(MeasureKind::Tewl, &[0.5, 0.7], &[0.2, 0.4], &p).unwrap();
        assert!(r.mae_many.is_some());
        assert!(r.mae_medium.is_none() && r.mae_few.is_none());
        assert_eq!(r.group_counts, [2, 0, 0]);
    }

    #[test]
    fn trend_check() {
        assert!(is_nondecreasing_within(&[0.1, 0.2, 0.19, 0.3], 0.02));
        assert!(!is_nondecreasing_within(&[0.1, 0.3, 0.27], 0.02));
    }
}
