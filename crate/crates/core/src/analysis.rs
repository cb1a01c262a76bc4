//! Experiment suite: probe grids over (block, timestep), class-area
//! stratified probes, k-means cluster masks, the noise-policy ablation,
//! the label-budget sweep and corruption robustness.
//!
//! Every experiment is a pure function of (model, dataset, config, seeds)
//! and all reported numbers flow through [`crate::metrics`]. Experiments
//! return table structs that know how to emit their JSON, CSV and plot
//! files.

use crate::classifier::{
    default_mlp_config, train_ensemble, train_member, EnsembleModel, MLPConfig, PixelMlp,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::features::{
    bilinear_upsample, extract_features, FeatureExtractionConfig, NoisePolicy,
};
use crate::metrics::{
    mean_iou_over_classes, report_from_confusion, Mask, MetricsReport,
};
use crate::num::Pixel;
use crate::rng::{derive_seed, Rng};
use crate::synth::{corrupt, CorruptionKind, CorruptionSpec, LabeledImage};
use crate::tensor::Tensor;
use crate::unet::UNetModel;
use crate::viz;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

type UNet = UNetModel<Pixel>;
type Schedule = NoiseSchedule<Pixel>;

// ---------------------------------------------------------------------------
// feature sources
// ---------------------------------------------------------------------------

/// Supplies per-pixel feature rows for probe experiments. The production
/// source taps the diffusion UNet; tests can substitute synthetic
/// features.
pub trait ProbeFeatureSource {
    fn block_channels(&self, block: usize) -> usize;
    /// Row-major [H*W, C_b] feature rows per requested block for one image
    /// at one timestep.
    fn features_at(
        &self,
        image: &LabeledImage,
        blocks: &[usize],
        t: usize,
    ) -> Result<BTreeMap<usize, Vec<Pixel>>>;
}

/// Tap rows out of a [C, h, w] map upsampled to (H, W).
fn map_to_rows(map: &Tensor<Pixel>, h: usize, w: usize) -> Result<Vec<Pixel>> {
    let up = bilinear_upsample(map, h, w)?;
    let c = up.channels();
    let n = h * w;
    let mut rows = vec![0.0f32; n * c];
    for ci in 0..c {
        let plane = up.channel(ci);
        for p in 0..n {
            rows[p * c + ci] = plane[p];
        }
    }
    Ok(rows)
}

/// UNet-backed probe source using the fixed-shared noise policy.
pub struct DdpmProbeSource<'a> {
    pub model: &'a UNet,
    pub schedule: &'a Schedule,
    pub noise_seed: u64,
    walk: Vec<crate::unet::DecoderBlockInfo>,
}

impl<'a> DdpmProbeSource<'a> {
    pub fn new(model: &'a UNet, schedule: &'a Schedule, noise_seed: u64) -> Self {
        let walk = crate::unet::decoder_walk(&model.config);
        DdpmProbeSource {
            model,
            schedule,
            noise_seed,
            walk,
        }
    }
}

impl ProbeFeatureSource for DdpmProbeSource<'_> {
    fn block_channels(&self, block: usize) -> usize {
        self.walk[block - 1].channels
    }

    fn features_at(
        &self,
        image: &LabeledImage,
        blocks: &[usize],
        t: usize,
    ) -> Result<BTreeMap<usize, Vec<Pixel>>> {
        let (h, w) = image.pixels.hw();
        let eps = crate::diffusion::sample_noise(
            image.pixels.shape(),
            derive_seed(self.noise_seed, "noise-fixed", 0),
        );
        let noised = crate::diffusion::add_noise(&image.pixels, t, &eps, self.schedule)?;
        let (_, taps) = self.model.forward_with_taps(&noised.x_t, t, blocks)?;
        let mut out = BTreeMap::new();
        for (&b, tap) in &taps {
            out.insert(b, map_to_rows(tap, h, w)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// probe grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ProbeCell {
    pub block: usize,
    pub timestep: usize,
    pub mean_iou: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub blocks: Vec<usize>,
    pub timesteps: Vec<usize>,
    /// (block, timestep) -> mIoU
    pub grid: BTreeMap<(usize, usize), f64>,
    /// full per-cell reports, kept for stratified re-evaluation
    pub reports: BTreeMap<(usize, usize), MetricsReport>,
    /// cells that failed, with the reason; the grid is still returned
    pub failures: Vec<(usize, usize, String)>,
    pub train_size: usize,
    pub test_size: usize,
}

impl ProbeResult {
    pub fn cell(&self, block: usize, t: usize) -> Option<f64> {
        self.grid.get(&(block, t)).copied()
    }

    pub fn cells(&self) -> Vec<ProbeCell> {
        self.grid
            .iter()
            .map(|(&(block, timestep), &mean_iou)| ProbeCell {
                block,
                timestep,
                mean_iou,
            })
            .collect()
    }

    /// blocks x timesteps value matrix (NaN for failed cells).
    pub fn grid_rows(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|&b| {
                self.timesteps
                    .iter()
                    .map(|&t| self.cell(b, t).unwrap_or(f64::NAN))
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,timestep,mean_iou\n");
        for c in self.cells() {
            out.push_str(&format!("{},{},{:.6}\n", c.block, c.timestep, c.mean_iou));
        }
        out
    }

    /// JSON + CSV + heatmap + per-block curves under `dir/<stem>.*`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.cells()).map_err(|e| Error::Json {
            path: json_path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(&json_path, json)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv())
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        let rows = self.grid_rows();
        let row_labels: Vec<f64> = self.blocks.iter().map(|&b| b as f64).collect();
        let col_labels: Vec<f64> = self.timesteps.iter().map(|&t| t as f64).collect();
        viz::heatmap(&rows, &row_labels, &col_labels, &dir.join(format!("{stem}_heatmap.png")))?;
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .blocks
            .iter()
            .map(|&b| {
                (
                    format!("block {b}"),
                    self.timesteps
                        .iter()
                        .filter_map(|&t| self.cell(b, t).map(|v| (t as f64, v)))
                        .collect(),
                )
            })
            .collect();
        viz::line_plot(&series, &dir.join(format!("{stem}_curves.png")))
    }
}

fn flat_labels(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::new();
    for im in images {
        out.extend_from_slice(&im.mask.labels);
    }
    out
}

/// Train one probe MLP per (block, timestep) cell on that cell's features
/// alone and evaluate its pooled-test mIoU.
pub fn run_probe_grid(
    source: &dyn ProbeFeatureSource,
    train: &[LabeledImage],
    test: &[LabeledImage],
    blocks: &[usize],
    timesteps: &[usize],
    probe_seed: u64,
) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("probe grid needs train and test images"));
    }
    let class_count = train[0].class_count;
    let train_labels = flat_labels(train);
    let mut result = ProbeResult {
        blocks: blocks.to_vec(),
        timesteps: timesteps.to_vec(),
        grid: BTreeMap::new(),
        reports: BTreeMap::new(),
        failures: Vec::new(),
        train_size: train.len(),
        test_size: test.len(),
    };
    for &t in timesteps {
        // one tapped forward per image covers every probed block at this t
        let mut train_rows: BTreeMap<usize, Vec<Pixel>> =
            blocks.iter().map(|&b| (b, Vec::new())).collect();
        let mut test_rows: Vec<BTreeMap<usize, Vec<Pixel>>> = Vec::with_capacity(test.len());
        let mut t_failed: Option<String> = None;
        for im in train {
            match source.features_at(im, blocks, t) {
                Ok(per_block) => {
                    for (b, rows) in per_block {
                        train_rows.get_mut(&b).unwrap().extend_from_slice(&rows);
                    }
                }
                Err(e) => {
                    t_failed = Some(e.to_string());
                    break;
                }
            }
        }
        if t_failed.is_none() {
            for im in test {
                match source.features_at(im, blocks, t) {
                    Ok(per_block) => test_rows.push(per_block),
                    Err(e) => {
                        t_failed = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        if let Some(reason) = t_failed {
            for &b in blocks {
                result.failures.push((b, t, reason.clone()));
            }
            continue;
        }
        for &b in blocks {
            let dim = source.block_channels(b);
            let mut cfg = default_mlp_config(dim, class_count);
            cfg.seed = derive_seed(probe_seed, "probe-cell", (b * 100_000 + t) as u64);
            match probe_cell(
                &train_rows[&b],
                &train_labels,
                &test_rows,
                test,
                b,
                &cfg,
            ) {
                Ok(report) => {
                    result.grid.insert((b, t), report.mean_iou);
                    result.reports.insert((b, t), report);
                }
                Err(e) => result.failures.push((b, t, e.to_string())),
            }
        }
    }
    Ok(result)
}

fn probe_cell(
    train_rows: &[Pixel],
    train_labels: &[u8],
    test_rows: &[BTreeMap<usize, Vec<Pixel>>],
    test: &[LabeledImage],
    block: usize,
    cfg: &MLPConfig,
) -> Result<MetricsReport> {
    let probe: PixelMlp<Pixel> = train_member(train_rows, train_labels, cfg, cfg.seed)?;
    let k = cfg.class_count;
    let mut pooled = vec![vec![0u64; k]; k];
    for (rows, im) in test_rows.iter().zip(test.iter()) {
        let (h, w) = im.pixels.hw();
        let pred = probe.predict(&rows[&block], h * w);
        let pred_mask = Mask::new(h, w, pred)?;
        let m = crate::metrics::confusion_matrix(&pred_mask, &im.mask, k)?;
        for i in 0..k {
            for j in 0..k {
                pooled[i][j] += m[i][j];
            }
        }
    }
    Ok(report_from_confusion(pooled))
}

/// Reverse-process index (number of probed steps counted from the largest
/// timestep) at which the curve first reaches half of its maximum. The
/// curve is given as (timestep, value) pairs.
pub fn half_max_crossing(curve: &[(usize, f64)]) -> Option<usize> {
    if curve.is_empty() {
        return None;
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| b.0.cmp(&a.0));
    let max = sorted.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return None;
    }
    sorted.iter().position(|(_, v)| *v >= max / 2.0)
}

// ---------------------------------------------------------------------------
// class-area split
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ClassAreaSplit {
    pub small_classes: Vec<usize>,
    pub large_classes: Vec<usize>,
    /// mean pixels per image containing the class
    pub mean_areas: BTreeMap<usize, f64>,
}

/// Sort non-background classes by mean pixel area; the bottom quantile
/// becomes the small set, the rest the large set. Ties break by class
/// index.
pub fn split_classes_by_area(images: &[LabeledImage], quantile: f64) -> Result<ClassAreaSplit> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::config("quantile must lie in (0, 1)"));
    }
    let k = images
        .first()
        .map(|im| im.class_count)
        .ok_or_else(|| Error::config("area split needs images"))?;
    let mut pixel_totals = vec![0u64; k];
    let mut image_counts = vec![0u64; k];
    for im in images {
        let mut present = vec![false; k];
        for &l in &im.mask.labels {
            pixel_totals[l as usize] += 1;
            present[l as usize] = true;
        }
        for (c, p) in present.iter().enumerate() {
            if *p {
                image_counts[c] += 1;
            }
        }
    }
    let mut classes: Vec<(usize, f64)> = (1..k)
        .filter(|&c| image_counts[c] > 0)
        .map(|c| (c, pixel_totals[c] as f64 / image_counts[c] as f64))
        .collect();
    if classes.len() < 2 {
        return Err(Error::config(
            "area split needs at least two non-background classes present",
        ));
    }
    classes.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let n = classes.len();
    let n_small = ((n as f64 * quantile).round() as usize).clamp(1, n - 1);
    let mean_areas: BTreeMap<usize, f64> = classes.iter().cloned().collect();
    Ok(ClassAreaSplit {
        small_classes: classes[..n_small].iter().map(|(c, _)| *c).collect(),
        large_classes: classes[n_small..].iter().map(|(c, _)| *c).collect(),
        mean_areas,
    })
}

/// Probe grid evaluated separately on small-area and large-area classes.
/// Cells are trained once; only the metric restriction differs.
pub fn run_area_stratified_probe(
    source: &dyn ProbeFeatureSource,
    train: &[LabeledImage],
    test: &[LabeledImage],
    blocks: &[usize],
    timesteps: &[usize],
    quantile: f64,
    probe_seed: u64,
) -> Result<(ProbeResult, ProbeResult, ClassAreaSplit)> {
    let split = split_classes_by_area(train, quantile)?;
    let full = run_probe_grid(source, train, test, blocks, timesteps, probe_seed)?;
    let restrict = |classes: &[usize]| -> ProbeResult {
        let mut out = full.clone();
        out.grid = full
            .reports
            .iter()
            .map(|(&key, report)| (key, mean_iou_over_classes(report, classes)))
            .collect();
        out
    };
    let small = restrict(&split.small_classes);
    let large = restrict(&split.large_classes);
    Ok((small, large, split))
}

// ---------------------------------------------------------------------------
// k-means cluster masks
// ---------------------------------------------------------------------------

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the
/// seed; iteration cap 300, centroid-shift tolerance 1e-4.
pub fn kmeans(rows: &[Pixel], n: usize, dim: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds {n} points")));
    }
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let mut rng = Rng::new(derive_seed(seed, "kmeans", 0));

    // k-means++ seeding
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.below(n);
    centroids.extend(row(first).iter().map(|&v| v as f64));
    let mut d2 = vec![0.0f64; n];
    for c_idx in 1..k {
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for c in 0..c_idx {
                let cent = &centroids[c * dim..(c + 1) * dim];
                let mut acc = 0.0;
                for (x, m) in row(i).iter().zip(cent.iter()) {
                    let d = *x as f64 - m;
                    acc += d * d;
                }
                best = best.min(acc);
            }
            d2[i] = best;
            total += best;
        }
        let pick = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                target -= v;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.extend(row(pick).iter().map(|&v| v as f64));
    }

    let mut assign = vec![0usize; n];
    for _iter in 0..300 {
        // assignment
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let cent = &centroids[c * dim..(c + 1) * dim];
                let mut acc = 0.0;
                for (x, m) in row(i).iter().zip(cent.iter()) {
                    let d = *x as f64 - m;
                    acc += d * d;
                }
                if acc < best_d {
                    best_d = acc;
                    best = c;
                }
            }
            assign[i] = best;
        }
        // update
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            let s = &mut sums[assign[i] * dim..(assign[i] + 1) * dim];
            for (acc, &x) in s.iter_mut().zip(row(i).iter()) {
                *acc += x as f64;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            for d in 0..dim {
                let new = sums[c * dim + d] / counts[c] as f64;
                let old = centroids[c * dim + d];
                shift = shift.max((new - old).abs());
                centroids[c * dim + d] = new;
            }
        }
        if shift < 1e-4 {
            break;
        }
    }
    Ok(assign)
}

/// Pool per-pixel features of one (block, timestep) across images, cluster
/// them and return per-image cluster-index masks.
pub fn kmeans_cluster_masks(
    model: &UNet,
    schedule: &Schedule,
    images: &[&Tensor<Pixel>],
    block: usize,
    timestep: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Mask>> {
    if images.is_empty() {
        return Err(Error::config("k-means needs at least one image"));
    }
    let config = FeatureExtractionConfig {
        blocks: vec![block],
        timesteps: vec![timestep],
        noise_policy: NoisePolicy::FixedShared,
        noise_seed: derive_seed(seed, "kmeans-noise", 0),
    };
    let mut rows: Vec<Pixel> = Vec::new();
    let mut dims = Vec::new();
    let mut dim = 0usize;
    for image in images {
        let vol = extract_features(model, schedule, image, &config)?;
        dim = vol.channel_count();
        let (h, w) = vol.features.hw();
        dims.push((h, w));
        rows.extend(vol.pixel_matrix());
    }
    let n = rows.len() / dim;
    let assign = kmeans(&rows, n, dim, k, seed)?;
    let mut masks = Vec::with_capacity(images.len());
    let mut cursor = 0usize;
    for (h, w) in dims {
        let labels: Vec<u8> = assign[cursor..cursor + h * w]
            .iter()
            .map(|&c| c as u8)
            .collect();
        cursor += h * w;
        masks.push(Mask::new(h, w, labels)?);
    }
    Ok(masks)
}

// ---------------------------------------------------------------------------
// full segmentation pipeline
// ---------------------------------------------------------------------------

/// Feature rows plus flattened labels for a labeled image set.
pub fn dataset_feature_rows(
    model: &UNet,
    schedule: &Schedule,
    images: &[LabeledImage],
    extraction: &FeatureExtractionConfig,
) -> Result<(Vec<Pixel>, Vec<u8>, usize)> {
    let mut rows = Vec::new();
    let mut dim = 0usize;
    for im in images {
        let vol = extract_features(model, schedule, &im.pixels, extraction)?;
        dim = vol.channel_count();
        rows.extend(vol.pixel_matrix());
    }
    Ok((rows, flat_labels(images), dim))
}

/// Raw-RGB per-pixel rows, the baseline feature set.
pub fn rgb_rows(image: &Tensor<Pixel>) -> Vec<Pixel> {
    let (h, w) = image.hw();
    let n = h * w;
    let mut rows = vec![0.0f32; n * 3];
    for c in 0..3 {
        let plane = image.channel(c);
        for p in 0..n {
            rows[p * 3 + c] = plane[p];
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// pooled over all test images
    pub report: MetricsReport,
    pub per_image: Vec<MetricsReport>,
    pub ensemble: EnsembleModel<Pixel>,
}

/// Train the MLP ensemble on the labeled training features and evaluate
/// pooled mIoU on the test set. `mlp` overrides the reference
/// configuration when given (input_dim and class_count are always derived
/// from the data).
pub fn run_seg_pipeline(
    model: &UNet,
    schedule: &Schedule,
    train: &[LabeledImage],
    test: &[LabeledImage],
    extraction: &FeatureExtractionConfig,
    members: usize,
    mlp: Option<&MLPConfig>,
    master_seed: u64,
    workers: usize,
) -> Result<PipelineOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("pipeline needs train and test images"));
    }
    let class_count = train[0].class_count;
    let (rows, labels, dim) = dataset_feature_rows(model, schedule, train, extraction)?;
    let mut cfg = match mlp {
        Some(c) => c.clone(),
        None => default_mlp_config(dim, class_count),
    };
    cfg.input_dim = dim;
    cfg.class_count = class_count;
    let ensemble = train_ensemble(&rows, &labels, &cfg, members, master_seed, workers)?;

    let mut per_image = Vec::with_capacity(test.len());
    let k = class_count;
    let mut pooled = vec![vec![0u64; k]; k];
    for im in test {
        let vol = extract_features(model, schedule, &im.pixels, extraction)?;
        let pred = ensemble.predict_mask(&vol)?;
        let m = crate::metrics::confusion_matrix(&pred, &im.mask, k)?;
        for i in 0..k {
            for j in 0..k {
                pooled[i][j] += m[i][j];
            }
        }
        per_image.push(report_from_confusion(m));
    }
    Ok(PipelineOutcome {
        report: report_from_confusion(pooled),
        per_image,
        ensemble,
    })
}

/// Same ensemble and voting, but per-pixel features are the raw RGB
/// values.
pub fn run_rgb_baseline(
    train: &[LabeledImage],
    test: &[LabeledImage],
    members: usize,
    mlp: Option<&MLPConfig>,
    master_seed: u64,
    workers: usize,
) -> Result<PipelineOutcome> {
    let class_count = train[0].class_count;
    let mut rows = Vec::new();
    for im in train {
        rows.extend(rgb_rows(&im.pixels));
    }
    let labels = flat_labels(train);
    let mut cfg = match mlp {
        Some(c) => c.clone(),
        None => default_mlp_config(3, class_count),
    };
    cfg.input_dim = 3;
    cfg.class_count = class_count;
    let ensemble = train_ensemble(&rows, &labels, &cfg, members, master_seed, workers)?;
    let k = class_count;
    let mut pooled = vec![vec![0u64; k]; k];
    let mut per_image = Vec::with_capacity(test.len());
    for im in test {
        let (h, w) = im.pixels.hw();
        let pred = ensemble.predict_rows_mask(&rgb_rows(&im.pixels), h, w);
        let m = crate::metrics::confusion_matrix(&pred, &im.mask, k)?;
        for i in 0..k {
            for j in 0..k {
                pooled[i][j] += m[i][j];
            }
        }
        per_image.push(report_from_confusion(m));
    }
    Ok(PipelineOutcome {
        report: report_from_confusion(pooled),
        per_image,
        ensemble,
    })
}

// ---------------------------------------------------------------------------
// noise-policy ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub policy: NoisePolicy,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseAblationTable {
    pub rows: Vec<AblationRow>,
    pub max_gap: f64,
    pub gap_threshold: f64,
    pub pass: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64)
            .sqrt()
    };
    (mean, std)
}

/// Full train+predict pipeline per noise policy per seed. `pass` flags
/// whether all policy means lie within `gap_threshold` of each other.
#[allow(clippy::too_many_arguments)]
pub fn run_noise_ablation(
    model: &UNet,
    schedule: &Schedule,
    train: &[LabeledImage],
    test: &[LabeledImage],
    base_extraction: &FeatureExtractionConfig,
    members: usize,
    mlp: Option<&MLPConfig>,
    seeds: &[u64],
    gap_threshold: f64,
    workers: usize,
) -> Result<NoiseAblationTable> {
    let policies = [
        NoisePolicy::FixedShared,
        NoisePolicy::PerTimestepShared,
        NoisePolicy::Resampled,
    ];
    let mut rows = Vec::new();
    for policy in policies {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let extraction = FeatureExtractionConfig {
                noise_policy: policy,
                noise_seed: derive_seed(seed, "ablation-noise", 0),
                ..base_extraction.clone()
            };
            let outcome = run_seg_pipeline(
                model,
                schedule,
                train,
                test,
                &extraction,
                members,
                mlp,
                derive_seed(seed, "ablation-clf", 0),
                workers,
            )?;
            per_seed.push(outcome.report.mean_iou);
        }
        let (miou_mean, miou_std) = mean_std(&per_seed);
        rows.push(AblationRow {
            policy,
            miou_mean,
            miou_std,
            per_seed,
        });
    }
    let means: Vec<f64> = rows.iter().map(|r| r.miou_mean).collect();
    let max_gap = means
        .iter()
        .flat_map(|a| means.iter().map(move |b| (a - b).abs()))
        .fold(0.0f64, f64::max);
    Ok(NoiseAblationTable {
        rows,
        max_gap,
        gap_threshold,
        pass: max_gap <= gap_threshold,
    })
}

impl NoiseAblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,miou_mean,miou_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                r.policy.name(),
                r.miou_mean,
                r.miou_std
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_table(dir, stem, self, self.to_csv())?;
        let bars: Vec<(String, f64, f64)> = self
            .rows
            .iter()
            .map(|r| (r.policy.name().to_string(), r.miou_mean, r.miou_std))
            .collect();
        viz::bar_chart(&bars, &dir.join(format!("{stem}_bars.png")))
    }
}

// ---------------------------------------------------------------------------
// label-budget sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub budget: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelBudgetTable {
    pub rows: Vec<SweepRow>,
    pub slack: f64,
    /// mean mIoU nondecreasing in the budget, up to the slack
    pub monotone: bool,
}

/// mIoU as a function of the number of labeled training images. The full
/// budget uses the training set exactly as given (so it reproduces the
/// main run bitwise under the same seeds); smaller budgets take a
/// seed-shuffled subset.
#[allow(clippy::too_many_arguments)]
pub fn run_label_budget_sweep(
    model: &UNet,
    schedule: &Schedule,
    train: &[LabeledImage],
    test: &[LabeledImage],
    extraction: &FeatureExtractionConfig,
    members: usize,
    mlp: Option<&MLPConfig>,
    budgets: &[usize],
    seeds: &[u64],
    slack: f64,
    workers: usize,
) -> Result<LabelBudgetTable> {
    let mut rows = Vec::new();
    for &budget in budgets {
        if budget == 0 || budget > train.len() {
            return Err(Error::config(format!(
                "budget {budget} outside 1..={}",
                train.len()
            )));
        }
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let subset: Vec<LabeledImage> = if budget == train.len() {
                train.to_vec()
            } else {
                let mut rng = Rng::new(derive_seed(seed, "budget-subset", budget as u64));
                let idx = rng.sample_indices(train.len(), budget);
                idx.into_iter().map(|i| train[i].clone()).collect()
            };
            let outcome = run_seg_pipeline(
                model,
                schedule,
                &subset,
                test,
                extraction,
                members,
                mlp,
                derive_seed(seed, "sweep-clf", 0),
                workers,
            )?;
            per_seed.push(outcome.report.mean_iou);
        }
        let (miou_mean, miou_std) = mean_std(&per_seed);
        rows.push(SweepRow {
            budget,
            miou_mean,
            miou_std,
            per_seed,
        });
    }
    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| r.budget);
    let monotone = sorted
        .windows(2)
        .all(|w| w[1].miou_mean >= w[0].miou_mean - slack);
    Ok(LabelBudgetTable {
        rows,
        slack,
        monotone,
    })
}

impl LabelBudgetTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,miou_mean,miou_std\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.budget, r.miou_mean, r.miou_std));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_table(dir, stem, self, self.to_csv())?;
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .map(|r| (r.budget as f64, r.miou_mean))
            .collect();
        viz::line_plot(&[("miou".into(), pts)], &dir.join(format!("{stem}_curve.png")))
    }
}

// ---------------------------------------------------------------------------
// corruption robustness
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub miou_mean: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessTable {
    pub clean_miou_mean: f64,
    pub cells: Vec<RobustnessCell>,
    /// severity -> mIoU averaged over kinds and seeds
    pub bucket_means: BTreeMap<u8, f64>,
    /// weak >= medium >= strong over the configured buckets
    pub monotone: bool,
}

/// Classifiers stay trained on clean features; test images are corrupted
/// then featurized. One ensemble per seed is supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn run_robustness(
    model: &UNet,
    schedule: &Schedule,
    test: &[LabeledImage],
    extraction: &FeatureExtractionConfig,
    ensembles: &[EnsembleModel<Pixel>],
    kinds: &[CorruptionKind],
    severities: &[u8],
    corrupt_seed: u64,
) -> Result<RobustnessTable> {
    if ensembles.is_empty() {
        return Err(Error::config("robustness needs at least one ensemble"));
    }
    let k = test
        .first()
        .map(|im| im.class_count)
        .ok_or_else(|| Error::config("robustness needs test images"))?;

    // clean reference
    let mut clean_per_seed = vec![vec![vec![0u64; k]; k]; ensembles.len()];
    for im in test {
        let vol = extract_features(model, schedule, &im.pixels, extraction)?;
        for (si, ens) in ensembles.iter().enumerate() {
            let pred = ens.predict_mask(&vol)?;
            let m = crate::metrics::confusion_matrix(&pred, &im.mask, k)?;
            for i in 0..k {
                for j in 0..k {
                    clean_per_seed[si][i][j] += m[i][j];
                }
            }
        }
    }
    let clean_vals: Vec<f64> = clean_per_seed
        .into_iter()
        .map(|c| report_from_confusion(c).mean_iou)
        .collect();
    let (clean_miou_mean, _) = mean_std(&clean_vals);

    let mut cells = Vec::new();
    for &kind in kinds {
        for &sev in severities {
            let spec = CorruptionSpec::new(kind, sev)?;
            let mut pooled = vec![vec![vec![0u64; k]; k]; ensembles.len()];
            for (ii, im) in test.iter().enumerate() {
                let seed = derive_seed(
                    corrupt_seed,
                    kind.name(),
                    (sev as u64) << 32 | ii as u64,
                );
                let corrupted = corrupt(im, spec, seed);
                let vol = extract_features(model, schedule, &corrupted.pixels, extraction)?;
                for (si, ens) in ensembles.iter().enumerate() {
                    let pred = ens.predict_mask(&vol)?;
                    let m = crate::metrics::confusion_matrix(&pred, &corrupted.mask, k)?;
                    for i in 0..k {
                        for j in 0..k {
                            pooled[si][i][j] += m[i][j];
                        }
                    }
                }
            }
            let per_seed: Vec<f64> = pooled
                .into_iter()
                .map(|c| report_from_confusion(c).mean_iou)
                .collect();
            let (miou_mean, _) = mean_std(&per_seed);
            cells.push(RobustnessCell {
                kind,
                severity: sev,
                miou_mean,
                per_seed,
            });
        }
    }

    let mut bucket_means = BTreeMap::new();
    for &sev in severities {
        let vals: Vec<f64> = cells
            .iter()
            .filter(|c| c.severity == sev)
            .map(|c| c.miou_mean)
            .collect();
        let (mean, _) = mean_std(&vals);
        bucket_means.insert(sev, mean);
    }
    let ordered: Vec<f64> = severities
        .iter()
        .map(|s| bucket_means[s])
        .collect();
    let monotone = ordered.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(RobustnessTable {
        clean_miou_mean,
        cells,
        bucket_means,
        monotone,
    })
}

impl RobustnessTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,severity,miou_mean\n");
        out.push_str(&format!("clean,0,{:.6}\n", self.clean_miou_mean));
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.6}\n",
                c.kind.name(),
                c.severity,
                c.miou_mean
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_table(dir, stem, self, self.to_csv())?;
        let mut bars: Vec<(String, f64, f64)> =
            vec![("clean".into(), self.clean_miou_mean, 0.0)];
        for (sev, mean) in &self.bucket_means {
            bars.push((format!("sev{sev}"), *mean, 0.0));
        }
        viz::bar_chart(&bars, &dir.join(format!("{stem}_buckets.png")))
    }
}

fn write_table<T: Serialize>(dir: &Path, stem: &str, table: &T, csv: String) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(table).map_err(|e| Error::Json {
        path: json_path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(&json_path, json)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use crate::synth::generate_shapes_dataset;
    use crate::unet::{build_unet, UNetConfig};

    fn tiny_world() -> (UNet, Schedule, Vec<LabeledImage>) {
        let cfg = UNetConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            time_embedding_dim: 8,
            input_resolution: 16,
        };
        let model = build_unet::<Pixel>(&cfg, 5).unwrap();
        let schedule = build_schedule::<Pixel>(20, 1e-3, 0.2).unwrap();
        let images = generate_shapes_dataset(8, 16, 4, 77).unwrap();
        (model, schedule, images)
    }

    /// Perfect features: the one-hot encoding of the ground-truth class.
    struct OneHotSource {
        class_count: usize,
    }

    impl ProbeFeatureSource for OneHotSource {
        fn block_channels(&self, _block: usize) -> usize {
            self.class_count
        }

        fn features_at(
            &self,
            image: &LabeledImage,
            blocks: &[usize],
            _t: usize,
        ) -> Result<BTreeMap<usize, Vec<Pixel>>> {
            let n = image.mask.labels.len();
            let mut rows = vec![0.0f32; n * self.class_count];
            for (p, &l) in image.mask.labels.iter().enumerate() {
                rows[p * self.class_count + l as usize] = 1.0;
            }
            Ok(blocks.iter().map(|&b| (b, rows.clone())).collect())
        }
    }

    #[test]
    fn perfect_features_reach_full_miou() {
        let images = generate_shapes_dataset(4, 16, 4, 3).unwrap();
        let source = OneHotSource { class_count: 4 };
        let result =
            run_probe_grid(&source, &images, &images, &[1, 2], &[5], 42).unwrap();
        for (&cell, &miou) in &result.grid {
            assert!(
                (miou - 1.0).abs() < 1e-12,
                "cell {cell:?} mIoU {miou} should be 1.0"
            );
        }
        assert!(result.failures.is_empty());
    }

    #[test]
    fn single_cell_equals_manual_composition() {
        let (model, schedule, images) = tiny_world();
        let train = &images[..4];
        let test = &images[4..6];
        let source = DdpmProbeSource::new(&model, &schedule, 13);
        let grid = run_probe_grid(&source, train, test, &[2], &[5], 99).unwrap();

        // manual composition: extract, train one probe, evaluate
        let dim = source.block_channels(2);
        let mut train_rows = Vec::new();
        for im in train {
            train_rows.extend(source.features_at(im, &[2], 5).unwrap().remove(&2).unwrap());
        }
        let labels = flat_labels(train);
        let mut cfg = default_mlp_config(dim, 4);
        cfg.seed = derive_seed(99, "probe-cell", (2 * 100_000 + 5) as u64);
        let probe: PixelMlp<Pixel> = train_member(&train_rows, &labels, &cfg, cfg.seed).unwrap();
        let mut pooled = vec![vec![0u64; 4]; 4];
        for im in test {
            let rows = source.features_at(im, &[2], 5).unwrap().remove(&2).unwrap();
            let (h, w) = im.pixels.hw();
            let pred = Mask::new(h, w, probe.predict(&rows, h * w)).unwrap();
            let m = crate::metrics::confusion_matrix(&pred, &im.mask, 4).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    pooled[i][j] += m[i][j];
                }
            }
        }
        let manual = report_from_confusion(pooled);
        assert_eq!(grid.cell(2, 5).unwrap(), manual.mean_iou);
    }

    #[test]
    fn probe_subgrid_matches_full_grid_cells() {
        let images = generate_shapes_dataset(4, 16, 4, 9).unwrap();
        let source = OneHotSource { class_count: 4 };
        let full = run_probe_grid(&source, &images[..2], &images[2..], &[1, 2], &[3, 7], 5)
            .unwrap();
        let sub = run_probe_grid(&source, &images[..2], &images[2..], &[2], &[7], 5).unwrap();
        assert_eq!(full.cell(2, 7), sub.cell(2, 7));
    }

    #[test]
    fn area_split_orders_by_mean_area() {
        // two classes with areas 10 and 1000
        let mut m1 = Mask::filled(32, 32, 0);
        for i in 0..10 {
            m1.labels[i] = 1;
        }
        for i in 24..1024 {
            m1.labels[i] = 2;
        }
        let img = LabeledImage {
            pixels: Tensor::zeros(&[3, 32, 32]),
            mask: m1,
            class_count: 3,
        };
        let split = split_classes_by_area(&[img], 0.5).unwrap();
        assert_eq!(split.small_classes, vec![1]);
        assert_eq!(split.large_classes, vec![2]);
    }

    #[test]
    fn area_split_tie_breaks_by_class_index() {
        let mut m = Mask::filled(16, 16, 0);
        for i in 0..64 {
            m.labels[i] = 1;
        }
        for i in 64..128 {
            m.labels[i] = 2;
        }
        let img = LabeledImage {
            pixels: Tensor::zeros(&[3, 16, 16]),
            mask: m,
            class_count: 3,
        };
        let split = split_classes_by_area(&[img], 0.5).unwrap();
        // equal areas: class 1 goes small, class 2 large; sizes differ <= 1
        assert_eq!(split.small_classes, vec![1]);
        assert_eq!(split.large_classes, vec![2]);
    }

    #[test]
    fn area_split_matches_pixel_count_oracle() {
        let images = generate_shapes_dataset(30, 32, 5, 21).unwrap();
        let split = split_classes_by_area(&images, 0.5).unwrap();
        // direct per-class pixel-count oracle
        for (&class, &mean_area) in &split.mean_areas {
            let mut total = 0u64;
            let mut appearances = 0u64;
            for im in &images {
                let count = im.mask.labels.iter().filter(|&&l| l as usize == class).count();
                if count > 0 {
                    appearances += 1;
                    total += count as u64;
                }
            }
            let oracle = total as f64 / appearances as f64;
            assert!((mean_area - oracle).abs() < 1e-9);
        }
        // every small mean <= every large mean
        for &s in &split.small_classes {
            for &l in &split.large_classes {
                assert!(split.mean_areas[&s] <= split.mean_areas[&l]);
            }
        }
    }

    #[test]
    fn area_split_needs_two_classes() {
        let img = LabeledImage {
            pixels: Tensor::zeros(&[3, 16, 16]),
            mask: Mask::filled(16, 16, 0),
            class_count: 3,
        };
        assert!(split_classes_by_area(&[img], 0.5).is_err());
    }

    #[test]
    fn stratified_probe_restricts_classes() {
        let images = generate_shapes_dataset(6, 16, 4, 31).unwrap();
        let source = OneHotSource { class_count: 4 };
        let (small, large, split) = run_area_stratified_probe(
            &source,
            &images[..3],
            &images[3..],
            &[1],
            &[5],
            0.5,
            7,
        )
        .unwrap();
        assert!(!split.small_classes.is_empty());
        assert!(!split.large_classes.is_empty());
        // perfect features give 1.0 on both restricted grids
        assert!((small.cell(1, 5).unwrap() - 1.0).abs() < 1e-12);
        assert!((large.cell(1, 5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_max_crossing_counts_from_largest_t() {
        // values rise as t falls: crossing happens later in the list
        let curve = vec![(80, 0.05), (50, 0.2), (20, 0.5), (5, 0.6)];
        // max 0.6, half 0.3; first (from t=80 down) >= 0.3 is t=20 -> index 2
        assert_eq!(half_max_crossing(&curve), Some(2));
        let early = vec![(80, 0.5), (50, 0.55), (20, 0.6), (5, 0.6)];
        assert_eq!(half_max_crossing(&early), Some(0));
    }

    #[test]
    fn kmeans_single_cluster_is_all_zero() {
        let rows: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let assign = kmeans(&rows, 10, 2, 1, 3).unwrap();
        assert!(assign.iter().all(|&a| a == 0));
    }

    #[test]
    fn kmeans_rejects_k_above_points() {
        let rows = vec![0.0f32; 4];
        assert!(kmeans(&rows, 2, 2, 3, 0).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = Rng::new(8);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for blob in 0..2 {
            let cx = if blob == 0 { -10.0 } else { 10.0 };
            for _ in 0..50 {
                rows.push((cx + rng.normal_f64() * 0.5) as f32);
                rows.push((cx + rng.normal_f64() * 0.5) as f32);
                truth.push(blob);
            }
        }
        let assign = kmeans(&rows, 100, 2, 2, 11).unwrap();
        // clustering equals blob membership up to label permutation
        let direct = assign.iter().zip(truth.iter()).filter(|(a, b)| **a == **b).count();
        let flipped = assign
            .iter()
            .zip(truth.iter())
            .filter(|(a, b)| **a == 1 - **b)
            .count();
        assert!(direct == 100 || flipped == 100, "direct {direct}, flipped {flipped}");
    }

    #[test]
    fn kmeans_masks_deterministic() {
        let (model, schedule, images) = tiny_world();
        let refs: Vec<&Tensor<Pixel>> = images.iter().take(2).map(|im| &im.pixels).collect();
        let a = kmeans_cluster_masks(&model, &schedule, &refs, 1, 5, 3, 9).unwrap();
        let b = kmeans_cluster_masks(&model, &schedule, &refs, 1, 5, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a[0].labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn pipeline_and_tables_have_consistent_shapes() {
        let (model, schedule, images) = tiny_world();
        let train = &images[..4];
        let test = &images[4..6];
        let extraction = FeatureExtractionConfig {
            blocks: vec![1, 2],
            timesteps: vec![3, 10],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 4,
        };
        let mut mlp = default_mlp_config(1, 4);
        mlp.epochs = 0.5;
        mlp.hidden_dims = (16, 8);

        let outcome = run_seg_pipeline(
            &model, &schedule, train, test, &extraction, 2, Some(&mlp), 3, 1,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&outcome.report.mean_iou));
        assert_eq!(outcome.per_image.len(), 2);
        assert_eq!(outcome.ensemble.len(), 2);

        // determinism of the full pipeline
        let again = run_seg_pipeline(
            &model, &schedule, train, test, &extraction, 2, Some(&mlp), 3, 1,
        )
        .unwrap();
        assert_eq!(outcome.report.mean_iou, again.report.mean_iou);
        assert_eq!(outcome.report.confusion, again.report.confusion);

        let baseline = run_rgb_baseline(train, test, 2, Some(&mlp), 3, 1).unwrap();
        assert!((0.0..=1.0).contains(&baseline.report.mean_iou));

        let ablation = run_noise_ablation(
            &model, &schedule, train, test, &extraction, 1, Some(&mlp), &[1, 2], 0.05, 1,
        )
        .unwrap();
        assert_eq!(ablation.rows.len(), 3);
        assert_eq!(ablation.rows[0].per_seed.len(), 2);
        assert!(ablation.max_gap >= 0.0);

        let sweep = run_label_budget_sweep(
            &model, &schedule, train, test, &extraction, 1, Some(&mlp), &[2, 4], &[1], 0.02, 1,
        )
        .unwrap();
        assert_eq!(sweep.rows.len(), 2);

        // full-budget row reproduces the members=1 pipeline bitwise
        let full_run = run_seg_pipeline(
            &model,
            &schedule,
            train,
            test,
            &extraction,
            1,
            Some(&mlp),
            derive_seed(1, "sweep-clf", 0),
            1,
        )
        .unwrap();
        assert_eq!(sweep.rows[1].per_seed[0], full_run.report.mean_iou);

        let robustness = run_robustness(
            &model,
            &schedule,
            test,
            &extraction,
            &[outcome.ensemble.clone()],
            &[CorruptionKind::GaussianNoise, CorruptionKind::Brightness],
            &[1, 3, 5],
            77,
        )
        .unwrap();
        assert_eq!(robustness.cells.len(), 6);
        assert_eq!(robustness.bucket_means.len(), 3);
        // accounting: cells cover kinds x severities
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::Brightness] {
            for sev in [1u8, 3, 5] {
                assert!(robustness
                    .cells
                    .iter()
                    .any(|c| c.kind == kind && c.severity == sev));
            }
        }

        // emission smoke: all three tables write JSON + CSV + plots
        let dir = std::env::temp_dir().join(format!("dseg_analysis_{}", std::process::id()));
        ablation.write(&dir, "ablation").unwrap();
        sweep.write(&dir, "sweep").unwrap();
        robustness.write(&dir, "robustness").unwrap();
        let grid = run_probe_grid(
            &OneHotSource { class_count: 4 },
            train,
            test,
            &[1, 2],
            &[3, 10],
            5,
        )
        .unwrap();
        grid.write(&dir, "probe").unwrap();
        for f in [
            "ablation.json",
            "ablation.csv",
            "ablation_bars.png",
            "sweep.json",
            "sweep_curve.png",
            "robustness.csv",
            "robustness_buckets.png",
            "probe.json",
            "probe_heatmap.png",
            "probe_curves.png",
        ] {
            assert!(dir.join(f).exists(), "{f} missing");
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
