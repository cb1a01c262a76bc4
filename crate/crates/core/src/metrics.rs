//! IoU-family evaluation. Every experiment reports through this module so
//! there is exactly one mIoU implementation in the codebase.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Integer class mask, row-major [H, W].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dimension(
                format!("{}x{} labels", height, width),
                format!("{}", labels.len()),
            ));
        }
        Ok(Mask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Mask {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// IoU per class; `None` marks classes absent from both masks.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes present in ground truth or prediction.
    pub mean_iou: f64,
    /// confusion[gt][pred] = pixel count.
    pub confusion: Vec<Vec<u64>>,
    pub pixel_accuracy: f64,
    pub class_count: usize,
}

/// entry (i, j) = count of pixels with gt = i and pred = j.
pub fn confusion_matrix(pred: &Mask, gt: &Mask, class_count: usize) -> Result<Vec<Vec<u64>>> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::dimension(
            format!("{}x{}", gt.height, gt.width),
            format!("{}x{}", pred.height, pred.width),
        ));
    }
    let mut m = vec![vec![0u64; class_count]; class_count];
    for (idx, (&p, &g)) in pred.labels.iter().zip(gt.labels.iter()).enumerate() {
        if (p as usize) >= class_count || (g as usize) >= class_count {
            let (y, x) = (idx / gt.width, idx % gt.width);
            return Err(Error::config(format!(
                "label out of range at pixel ({y},{x}): gt={g} pred={p} class_count={class_count}"
            )));
        }
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Derive the full report from a confusion matrix.
pub fn report_from_confusion(confusion: Vec<Vec<u64>>) -> MetricsReport {
    let k = confusion.len();
    let mut per_class = Vec::with_capacity(k);
    let mut total = 0u64;
    let mut correct = 0u64;
    for (i, row) in confusion.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            total += v;
            if i == j {
                correct += v;
            }
        }
    }
    for c in 0..k {
        let gt_count: u64 = confusion[c].iter().sum();
        let pred_count: u64 = confusion.iter().map(|row| row[c]).sum();
        let inter = confusion[c][c];
        let union = gt_count + pred_count - inter;
        if union == 0 {
            per_class.push(None);
        } else {
            per_class.push(Some(inter as f64 / union as f64));
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_iou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let pixel_accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };
    MetricsReport {
        per_class_iou: per_class,
        mean_iou,
        confusion,
        pixel_accuracy,
        class_count: k,
    }
}

pub fn mean_iou(pred: &Mask, gt: &Mask, class_count: usize) -> Result<MetricsReport> {
    if pred.labels.is_empty() || gt.labels.is_empty() {
        return Err(Error::config("mean_iou: empty mask"));
    }
    let confusion = confusion_matrix(pred, gt, class_count)?;
    Ok(report_from_confusion(confusion))
}

/// mIoU restricted to a class subset; classes outside the subset are ignored.
pub fn mean_iou_over_classes(report: &MetricsReport, classes: &[usize]) -> f64 {
    let vals: Vec<f64> = classes
        .iter()
        .filter_map(|&c| report.per_class_iou.get(c).copied().flatten())
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Sum confusion matrices, recompute IoU from the pooled counts.
    PoolConfusions,
    /// Mean and sample standard deviation of per-report mIoU.
    AverageMiou,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub report: MetricsReport,
    pub mean_iou_mean: f64,
    pub mean_iou_std: f64,
    pub run_count: usize,
}

pub fn aggregate_reports(reports: &[MetricsReport], mode: AggregateMode) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::config("aggregate_reports: no reports"));
    }
    let k = reports[0].class_count;
    if reports.iter().any(|r| r.class_count != k) {
        return Err(Error::config("aggregate_reports: mixed class counts"));
    }
    let mious: Vec<f64> = reports.iter().map(|r| r.mean_iou).collect();
    let mean = mious.iter().sum::<f64>() / mious.len() as f64;
    let std = if mious.len() < 2 {
        0.0
    } else {
        let var = mious.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
            / (mious.len() - 1) as f64;
        var.sqrt()
    };
    let report = match mode {
        AggregateMode::PoolConfusions => {
            let mut pooled = vec![vec![0u64; k]; k];
            for r in reports {
                for i in 0..k {
                    for j in 0..k {
                        pooled[i][j] += r.confusion[i][j];
                    }
                }
            }
            report_from_confusion(pooled)
        }
        AggregateMode::AverageMiou => {
            let mut r = reports[0].clone();
            r.mean_iou = mean;
            r
        }
    };
    Ok(AggregateReport {
        report,
        mean_iou_mean: mean,
        mean_iou_std: std,
        run_count: reports.len(),
    })
}

/// Per-class IoU table as CSV text.
pub fn per_class_csv(report: &MetricsReport, class_names: &[String]) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let name = class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class_{c}"));
        match iou {
            Some(v) => out.push_str(&format!("{name},{v:.6}\n")),
            None => out.push_str(&format!("{name},absent\n")),
        }
    }
    out.push_str(&format!("mean,{:.6}\n", report.mean_iou));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Independent oracle: per-pixel counting loop, no matrix reuse.
    fn confusion_oracle(pred: &Mask, gt: &Mask, k: usize) -> Vec<Vec<u64>> {
        let mut m = vec![vec![0u64; k]; k];
        for y in 0..gt.height {
            for x in 0..gt.width {
                let g = gt.labels[y * gt.width + x] as usize;
                let p = pred.labels[y * pred.width + x] as usize;
                m[g][p] += 1;
            }
        }
        m
    }

    /// Independent oracle: IoU from explicit pixel index sets.
    fn miou_oracle(pred: &Mask, gt: &Mask, k: usize) -> f64 {
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let gt_set: Vec<usize> = gt
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == c)
                .map(|(i, _)| i)
                .collect();
            let pred_set: Vec<usize> = pred
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == c)
                .map(|(i, _)| i)
                .collect();
            if gt_set.is_empty() && pred_set.is_empty() {
                continue;
            }
            let inter = gt_set.iter().filter(|i| pred_set.contains(i)).count();
            let union = gt_set.len() + pred_set.len() - inter;
            ious.push(inter as f64 / union as f64);
        }
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize, k: usize) -> Mask {
        let labels = (0..h * w).map(|_| rng.below(k) as u8).collect();
        Mask::new(h, w, labels).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = Mask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let m = confusion_matrix(&gt, &gt, 3).unwrap();
        assert_eq!(m[0][0], 1);
        assert_eq!(m[1][1], 2);
        assert_eq!(m[2][2], 1);
        assert_eq!(m[0][1] + m[1][0] + m[2][0], 0);
        let r = mean_iou(&gt, &gt, 3).unwrap();
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn entries_sum_to_pixel_count() {
        let mut rng = Rng::new(11);
        let pred = random_mask(&mut rng, 8, 8, 4);
        let gt = random_mask(&mut rng, 8, 8, 4);
        let m = confusion_matrix(&pred, &gt, 4).unwrap();
        let total: u64 = m.iter().flatten().sum();
        assert_eq!(total, 64);
    }

    #[test]
    fn matches_counting_loop_oracle() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let pred = random_mask(&mut rng, 8, 8, 4);
            let gt = random_mask(&mut rng, 8, 8, 4);
            assert_eq!(
                confusion_matrix(&pred, &gt, 4).unwrap(),
                confusion_oracle(&pred, &gt, 4)
            );
        }
    }

    #[test]
    fn spec_example_two_class() {
        // pred=[[0,0],[1,1]], gt=[[0,1],[1,1]] -> IoU0=1/2, IoU1=2/3, mIoU=7/12
        let pred = Mask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let gt = Mask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = mean_iou(&pred, &gt, 2).unwrap();
        assert!((r.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.mean_iou - 7.0 / 12.0).abs() < 1e-12);
        assert!((r.mean_iou - miou_oracle(&pred, &gt, 2)).abs() < 1e-12);
    }

    #[test]
    fn total_miss_gives_zero() {
        let pred = Mask::filled(2, 2, 0);
        let gt = Mask::filled(2, 2, 1);
        let r = mean_iou(&pred, &gt, 2).unwrap();
        assert_eq!(r.mean_iou, 0.0);
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        // class 2 never appears in either mask
        let pred = Mask::new(1, 2, vec![0, 1]).unwrap();
        let gt = Mask::new(1, 2, vec![0, 1]).unwrap();
        let r = mean_iou(&pred, &gt, 3).unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let pred = Mask::new(2, 2, vec![0, 0, 5, 0]).unwrap();
        let gt = Mask::filled(2, 2, 0);
        let err = confusion_matrix(&pred, &gt, 3).unwrap_err();
        assert!(err.to_string().contains("(1,0)"), "{err}");
    }

    #[test]
    fn empty_mask_rejected() {
        let empty = Mask::new(0, 0, vec![]).unwrap();
        assert!(mean_iou(&empty, &empty, 2).is_err());
    }

    #[test]
    fn random_pairs_match_set_oracle() {
        let mut rng = Rng::new(91);
        for _ in 0..50 {
            let h = rng.range_usize(1, 16);
            let w = rng.range_usize(1, 16);
            let k = rng.range_usize(2, 6);
            let pred = random_mask(&mut rng, h, w, k);
            let gt = random_mask(&mut rng, h, w, k);
            let r = mean_iou(&pred, &gt, k).unwrap();
            let oracle = miou_oracle(&pred, &gt, k);
            assert!(
                (r.mean_iou - oracle).abs() < 1e-12,
                "mIoU {} vs oracle {oracle}",
                r.mean_iou
            );
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(17);
        let k = 4;
        let pred = random_mask(&mut rng, 8, 8, k);
        let gt = random_mask(&mut rng, 8, 8, k);
        let r = mean_iou(&pred, &gt, k).unwrap();
        // relabel classes by the permutation pi
        let pi = [2u8, 0, 3, 1];
        let map = |m: &Mask| {
            Mask::new(
                m.height,
                m.width,
                m.labels.iter().map(|&v| pi[v as usize]).collect(),
            )
            .unwrap()
        };
        let r2 = mean_iou(&map(&pred), &map(&gt), k).unwrap();
        assert!((r.mean_iou - r2.mean_iou).abs() < 1e-12);
        for c in 0..k {
            assert_eq!(r.per_class_iou[c], r2.per_class_iou[pi[c] as usize]);
        }
    }

    #[test]
    fn iou_is_symmetric_per_class() {
        let mut rng = Rng::new(23);
        let pred = random_mask(&mut rng, 8, 8, 3);
        let gt = random_mask(&mut rng, 8, 8, 3);
        let a = mean_iou(&pred, &gt, 3).unwrap();
        let b = mean_iou(&gt, &pred, 3).unwrap();
        assert_eq!(a.per_class_iou, b.per_class_iou);
    }

    #[test]
    fn aggregate_identity_and_pooling() {
        let mut rng = Rng::new(31);
        let pred = random_mask(&mut rng, 8, 8, 3);
        let gt = random_mask(&mut rng, 8, 8, 3);
        let r = mean_iou(&pred, &gt, 3).unwrap();

        let single = aggregate_reports(&[r.clone()], AggregateMode::PoolConfusions).unwrap();
        assert_eq!(single.report.mean_iou, r.mean_iou);
        let single = aggregate_reports(&[r.clone()], AggregateMode::AverageMiou).unwrap();
        assert_eq!(single.report.mean_iou, r.mean_iou);
        assert_eq!(single.mean_iou_std, 0.0);

        let twice = aggregate_reports(&[r.clone(), r.clone()], AggregateMode::AverageMiou).unwrap();
        assert_eq!(twice.mean_iou_std, 0.0);

        // pooling two hand-built confusions equals recomputation from the sum
        let c1 = vec![vec![3, 1], vec![0, 4]];
        let c2 = vec![vec![2, 0], vec![2, 2]];
        let r1 = report_from_confusion(c1.clone());
        let r2 = report_from_confusion(c2.clone());
        let pooled = aggregate_reports(&[r1, r2], AggregateMode::PoolConfusions).unwrap();
        let mut summed = vec![vec![0u64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                summed[i][j] = c1[i][j] + c2[i][j];
            }
        }
        let expect = report_from_confusion(summed);
        assert_eq!(pooled.report.mean_iou, expect.mean_iou);
        assert_eq!(pooled.report.confusion, expect.confusion);
    }

    #[test]
    fn aggregate_rejects_mixed_k() {
        let a = report_from_confusion(vec![vec![1, 0], vec![0, 1]]);
        let b = report_from_confusion(vec![vec![1]]);
        assert!(aggregate_reports(&[a, b], AggregateMode::PoolConfusions).is_err());
    }
}
