//! Subcommand implementations. Every command is deterministic given its
//! config and seeds, writes its declared outputs under `<out>/<run>/`,
//! and refreshes the `run.json` provenance record.

use crate::config::RunConfig;
use dseg_core::analysis::{
    kmeans_cluster_masks, run_area_stratified_probe, run_label_budget_sweep, run_noise_ablation,
    run_probe_grid, run_robustness, run_seg_pipeline, DdpmProbeSource,
};
use dseg_core::classifier::{
    load_ensemble, save_ensemble, train_ensemble, EnsembleModel,
};
use dseg_core::diffusion::{sample, NoiseSchedule};
use dseg_core::error::{Error, Result};
use dseg_core::features::{extract_features, load_features, save_features};
use dseg_core::metrics::{aggregate_reports, per_class_csv, AggregateMode};
use dseg_core::num::Pixel;
use dseg_core::rng::derive_seed;
use dseg_core::synth::{
    generate_shapes_dataset, load_dataset, load_rgb, save_dataset, save_mask, DatasetSplit,
    ALL_CORRUPTIONS,
};
use dseg_core::training::{
    load_train_state, loss_csv, save_train_state, train_ddpm, TrainConfig,
};
use dseg_core::unet::{build_unet, load_checkpoint, save_checkpoint, UNetModel};
use dseg_core::{viz, Schedule, UNet};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// run.json provenance
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    #[serde(default)]
    pub seeds: serde_json::Map<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_file: Option<String>,
}

fn update_run_record(config: &RunConfig, update: impl FnOnce(&mut RunRecord)) -> Result<()> {
    let dir = config.run_dir();
    ensure_dir(&dir)?;
    let path = dir.join("run.json");
    let mut record: RunRecord = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => RunRecord::default(),
    };
    record.config_hash = format!("{:016x}", config.hash());
    record.seeds = serde_json::Map::from_iter([
        ("dataset".to_string(), json!(config.dataset.seed)),
        ("training".to_string(), json!(config.training.seed)),
        ("noise".to_string(), json!(config.extraction.noise_seed)),
        ("classifier".to_string(), json!(config.classifier.seed)),
        ("experiment".to_string(), json!(config.experiment.seeds)),
    ]);
    update(&mut record);
    write_json(&record, &path)
}

// ---------------------------------------------------------------------------
// shared loading
// ---------------------------------------------------------------------------

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config.run_dir().join("ddpm.ckpt")
}

fn load_model(config: &RunConfig) -> Result<(UNet, Schedule)> {
    let path = checkpoint_path(config);
    if !path.exists() {
        return Err(Error::config(format!(
            "no checkpoint at {}; run train-ddpm first",
            path.display()
        )));
    }
    load_checkpoint::<Pixel>(&path)
}

fn load_split(config: &RunConfig) -> Result<DatasetSplit> {
    let dir = config.dataset_dir();
    if !dir.join("manifest.json").exists() {
        return Err(Error::config(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    load_dataset(&dir)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let d = &config.dataset;
    let total = d.labeled_train + d.unlabeled + d.test;
    let images = generate_shapes_dataset(total, d.resolution, d.class_count, d.seed)?;
    let split = DatasetSplit::from_images(images, d.labeled_train, d.test, d.seed)?;
    let dir = config.dataset_dir();
    save_dataset(&split, &dir)?;
    update_run_record(config, |_| {})?;
    println!(
        "dataset: {} train / {} unlabeled / {} test at {}x{} (K={}) -> {}",
        split.labeled_train.len(),
        split.unlabeled.len(),
        split.test.len(),
        d.resolution,
        d.resolution,
        d.class_count,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-ddpm
// ---------------------------------------------------------------------------

pub fn cmd_train_ddpm(config: &RunConfig, resume: bool) -> Result<PathBuf> {
    let split = load_split(config)?;
    let run_dir = config.run_dir();
    ensure_dir(&run_dir)?;
    let ckpt_path = checkpoint_path(config);
    let state_path = run_dir.join("train_state.dsgt");

    let schedule = dseg_core::diffusion::build_schedule::<Pixel>(
        config.schedule.steps,
        config.schedule.beta_start,
        config.schedule.beta_end,
    )?;
    let mut opt = dseg_core::nn::Adam::new(config.training.learning_rate);
    let (mut model, start_step) = if resume && ckpt_path.exists() && state_path.exists() {
        let (model, saved_schedule) = load_checkpoint::<Pixel>(&ckpt_path)?;
        if saved_schedule.steps() != schedule.steps() {
            return Err(Error::config(
                "resume schedule does not match the checkpoint schedule",
            ));
        }
        let step = load_train_state(&mut opt, &state_path)?;
        println!("resuming from step {step}");
        (model, step)
    } else {
        (
            build_unet::<Pixel>(&config.unet_config(), config.training.seed)?,
            0,
        )
    };
    println!(
        "unet: {} parameters, {} decoder blocks",
        model.parameter_count(),
        model.decoder_block_count()
    );

    let pool = split.training_pool();
    let train_cfg = TrainConfig {
        steps: config.training.steps,
        batch_size: config.training.batch_size,
        learning_rate: config.training.learning_rate,
        seed: config.training.seed,
        log_every: config.training.log_every,
    };

    let loss_path = run_dir.join("loss.csv");
    let mut full_log: Vec<(usize, f64)> = if start_step > 0 && loss_path.exists() {
        read_loss_csv(&loss_path)?
            .into_iter()
            .filter(|(s, _)| *s < start_step)
            .collect()
    } else {
        Vec::new()
    };

    // training with periodic checkpointing; a fault leaves the last
    // periodic checkpoint on disk
    let ckpt_every = config.training.checkpoint_every.max(1);
    let sample_every = config.training.sample_every;
    let report = train_ddpm(
        &mut model,
        &mut opt,
        &schedule,
        &pool,
        &train_cfg,
        start_step,
        |step, loss, m, o| {
            if step % config.training.log_every == 0 {
                println!("step {step}: loss {loss:.5}");
            }
            if (step + 1) % ckpt_every == 0 {
                save_checkpoint(m, &schedule, &run_dir.join("ddpm.ckpt"))?;
                save_train_state(o, step + 1, &run_dir.join("train_state.dsgt"))?;
            }
            if sample_every > 0 && (step + 1) % sample_every == 0 {
                emit_sample_grid(
                    m,
                    &schedule,
                    config,
                    &run_dir.join(format!("samples_{:06}.png", step + 1)),
                )?;
            }
            Ok(())
        },
    )?;
    full_log.extend(report.log.iter().cloned());
    std::fs::write(&loss_path, loss_csv(&full_log))
        .map_err(|e| Error::io(loss_path.display().to_string(), e))?;

    save_checkpoint(&model, &schedule, &ckpt_path)?;
    save_train_state(&opt, report.final_step, &state_path)?;
    emit_sample_grid(&model, &schedule, config, &run_dir.join("samples_final.png"))?;
    update_run_record(config, |r| {
        r.checkpoint_checksum = Some(format!("{:016x}", model.checksum()));
    })?;
    println!("checkpoint -> {}", ckpt_path.display());
    Ok(ckpt_path)
}

fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if let Some((a, b)) = line.split_once(',') {
            if let (Ok(step), Ok(loss)) = (a.parse(), b.parse()) {
                out.push((step, loss));
            }
        }
    }
    Ok(out)
}

fn emit_sample_grid(
    model: &UNetModel<Pixel>,
    schedule: &NoiseSchedule<Pixel>,
    config: &RunConfig,
    path: &Path,
) -> Result<()> {
    let r = config.dataset.resolution;
    let n = config.training.sample_count.max(1);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(sample(
            model,
            schedule,
            &[3, r, r],
            derive_seed(config.training.sample_seed, "grid", i as u64),
        )?);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    viz::sample_grid(&samples, cols, path)
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            other => Err(Error::config(format!(
                "unknown split '{other}' (train|test|all)"
            ))),
        }
    }
}

pub fn cmd_extract(config: &RunConfig, split_choice: SplitChoice) -> Result<()> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let extraction = config.extraction_config(model.decoder_block_count(), schedule.steps());
    let dir = config.run_dir().join("features");
    ensure_dir(&dir)?;
    let mut jobs: Vec<(String, &dseg_core::ImageTensor)> = Vec::new();
    if split_choice != SplitChoice::Test {
        for (i, im) in split.labeled_train.iter().enumerate() {
            jobs.push((format!("train_{i:04}"), &im.pixels));
        }
    }
    if split_choice != SplitChoice::Train {
        for (i, im) in split.test.iter().enumerate() {
            jobs.push((format!("test_{i:04}"), &im.pixels));
        }
    }
    for (name, pixels) in &jobs {
        let vol = extract_features(&model, &schedule, pixels, &extraction)?;
        save_features(&vol, &dir.join(format!("{name}.ddpf")))?;
    }
    update_run_record(config, |_| {})?;
    println!(
        "extracted {} feature volumes ({} channels) -> {}",
        jobs.len(),
        dseg_core::features::feature_dim(
            |b| dseg_core::unet::decoder_walk(&model.config)[b - 1].channels,
            &extraction.blocks,
            extraction.timesteps.len()
        ),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-seg
// ---------------------------------------------------------------------------

pub fn cmd_train_seg(config: &RunConfig) -> Result<()> {
    let split = load_split(config)?;
    let dir = config.run_dir().join("features");
    let mut rows: Vec<Pixel> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut dim = 0usize;
    for (i, im) in split.labeled_train.iter().enumerate() {
        let path = dir.join(format!("train_{i:04}.ddpf"));
        if !path.exists() {
            return Err(Error::config(format!(
                "missing features {}; run extract first",
                path.display()
            )));
        }
        let vol = load_features::<Pixel>(&path)?;
        dim = vol.channel_count();
        rows.extend(vol.pixel_matrix());
        labels.extend_from_slice(&im.mask.labels);
    }
    let cfg = config.mlp_config(dim, split.class_count);
    let ensemble = train_ensemble(
        &rows,
        &labels,
        &cfg,
        config.classifier.ensemble_size,
        config.classifier.seed,
        config.experiment.workers,
    )?;
    let path = config.run_dir().join("ensemble.dseg");
    save_ensemble(&ensemble, &path)?;
    update_run_record(config, |r| {
        r.ensemble_file = Some("ensemble.dseg".into());
    })?;
    println!(
        "trained {} members on {} pixels ({} features) -> {}",
        ensemble.len(),
        labels.len(),
        dim,
        path.display()
    );
    Ok(())
}

fn load_trained_ensemble(config: &RunConfig, dim: Option<usize>) -> Result<EnsembleModel<Pixel>> {
    let path = config.run_dir().join("ensemble.dseg");
    if !path.exists() {
        return Err(Error::config(format!(
            "no ensemble at {}; run train-seg first",
            path.display()
        )));
    }
    load_ensemble::<Pixel>(&path, dim)
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

pub fn cmd_segment(config: &RunConfig, images: &[PathBuf]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::config("segment needs at least one image path"));
    }
    let (model, schedule) = load_model(config)?;
    let extraction = config.extraction_config(model.decoder_block_count(), schedule.steps());
    let ensemble = load_trained_ensemble(config, None)?;
    let out_dir = config.run_dir().join("segment");
    ensure_dir(&out_dir)?;
    for path in images {
        let pixels = load_rgb(path)?;
        let vol = extract_features(&model, &schedule, &pixels, &extraction)?;
        let mask = ensemble.predict_mask(&vol)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".into());
        save_mask(&mask, &out_dir.join(format!("{stem}_mask.png")))?;
        let panel = viz::overlay(&pixels, &mask, 0.45);
        viz::save_image(&panel, &out_dir.join(format!("{stem}_overlay.png")))?;
        println!("{} -> {}_mask.png", path.display(), stem);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvaluationReport {
    mean_iou: f64,
    pixel_accuracy: f64,
    per_class_iou: Vec<Option<f64>>,
    class_names: Vec<String>,
    per_image_mean_iou: Vec<f64>,
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<f64> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let extraction = config.extraction_config(model.decoder_block_count(), schedule.steps());
    let ensemble = load_trained_ensemble(config, None)?;
    let k = split.class_count;
    let feature_dir = config.run_dir().join("features");

    let mut pooled = vec![vec![0u64; k]; k];
    let mut per_image = Vec::new();
    for (i, im) in split.test.iter().enumerate() {
        let persisted = feature_dir.join(format!("test_{i:04}.ddpf"));
        let vol = if persisted.exists() {
            load_features::<Pixel>(&persisted)?
        } else {
            extract_features(&model, &schedule, &im.pixels, &extraction)?
        };
        let pred = ensemble.predict_mask(&vol)?;
        let m = dseg_core::metrics::confusion_matrix(&pred, &im.mask, k)?;
        for a in 0..k {
            for b in 0..k {
                pooled[a][b] += m[a][b];
            }
        }
        per_image.push(dseg_core::metrics::report_from_confusion(m));
    }
    let report = dseg_core::metrics::report_from_confusion(pooled);
    let out_dir = config.run_dir();
    let eval = EvaluationReport {
        mean_iou: report.mean_iou,
        pixel_accuracy: report.pixel_accuracy,
        per_class_iou: report.per_class_iou.clone(),
        class_names: split.class_names.clone(),
        per_image_mean_iou: per_image.iter().map(|r| r.mean_iou).collect(),
    };
    write_json(&eval, &out_dir.join("report.json"))?;
    std::fs::write(
        out_dir.join("per_class_iou.csv"),
        per_class_csv(&report, &split.class_names),
    )
    .map_err(|e| Error::io("per_class_iou.csv", e))?;
    // averaged view across images, for reference
    let agg = aggregate_reports(&per_image, AggregateMode::AverageMiou)?;
    println!(
        "test mIoU {:.4} (pooled) / {:.4} +- {:.4} (per-image), pixel acc {:.4}",
        report.mean_iou, agg.mean_iou_mean, agg.mean_iou_std, report.pixel_accuracy
    );
    Ok(report.mean_iou)
}

// ---------------------------------------------------------------------------
// probe / kmeans / ablation / sweep / robustness
// ---------------------------------------------------------------------------

fn probe_fractions_to_steps(config: &RunConfig, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = config
        .experiment
        .probe_fractions
        .iter()
        .map(|&f| dseg_core::diffusion::timestep_from_fraction(f, steps))
        .collect();
    ts.sort_unstable();
    ts.dedup();
    ts
}

pub fn cmd_probe(config: &RunConfig) -> Result<()> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let d = model.decoder_block_count();
    let blocks = config
        .experiment
        .probe_blocks
        .clone()
        .unwrap_or_else(|| (1..=d).collect());
    let timesteps = probe_fractions_to_steps(config, schedule.steps());
    let out = config.run_dir().join("probe");
    for &seed in &config.experiment.seeds {
        let source = DdpmProbeSource::new(&model, &schedule, derive_seed(seed, "probe-noise", 0));
        let (small, large, split_info) = run_area_stratified_probe(
            &source,
            &split.labeled_train,
            &split.test,
            &blocks,
            &timesteps,
            config.experiment.area_quantile,
            derive_seed(seed, "probe", 0),
        )?;
        // the full (unrestricted) grid shares the same trained cells
        let full = run_probe_grid(
            &source,
            &split.labeled_train,
            &split.test,
            &blocks,
            &timesteps,
            derive_seed(seed, "probe", 0),
        )?;
        full.write(&out, &format!("grid_s{seed}"))?;
        small.write(&out, &format!("area_small_s{seed}"))?;
        large.write(&out, &format!("area_large_s{seed}"))?;
        write_json(&split_info, &out.join(format!("area_split_s{seed}.json")))?;
        println!(
            "probe seed {seed}: {} cells, {} failures",
            full.grid.len(),
            full.failures.len()
        );
    }
    update_run_record(config, |_| {})
}

pub fn cmd_kmeans(config: &RunConfig) -> Result<()> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let d = model.decoder_block_count();
    let block = config
        .experiment
        .kmeans_block
        .unwrap_or_else(|| dseg_core::features::default_block_set(d)[0]);
    let t = dseg_core::diffusion::timestep_from_fraction(
        config.experiment.kmeans_fraction,
        schedule.steps(),
    );
    let n = config.experiment.kmeans_images.min(split.test.len()).max(1);
    let images: Vec<&dseg_core::ImageTensor> =
        split.test.iter().take(n).map(|im| &im.pixels).collect();
    let seed = config.experiment.seeds[0];
    let masks = kmeans_cluster_masks(
        &model,
        &schedule,
        &images,
        block,
        t,
        config.experiment.kmeans_k,
        derive_seed(seed, "kmeans", 0),
    )?;
    let out = config.run_dir().join("kmeans");
    ensure_dir(&out)?;
    let mut tiles = Vec::new();
    for (i, (image, mask)) in images.iter().zip(masks.iter()).enumerate() {
        save_mask(mask, &out.join(format!("clusters_{i:02}.png")))?;
        tiles.push(viz::tensor_to_rgb(image));
        tiles.push(viz::mask_to_rgb(mask));
    }
    let panel = viz::tile_panel(&tiles, 2, 2)?;
    viz::save_image(&panel, &out.join("panel.png"))?;
    write_json(
        &json!({
            "block": block,
            "timestep": t,
            "k": config.experiment.kmeans_k,
            "seed": seed,
            "images": n,
        }),
        &out.join("kmeans.json"),
    )?;
    println!(
        "k-means (k={}, block {block}, t={t}) over {n} images -> {}",
        config.experiment.kmeans_k,
        out.display()
    );
    update_run_record(config, |_| {})
}

pub fn cmd_ablate_noise(config: &RunConfig) -> Result<()> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let extraction = config.extraction_config(model.decoder_block_count(), schedule.steps());
    let mlp = config.mlp_config(1, split.class_count);
    let table = run_noise_ablation(
        &model,
        &schedule,
        &split.labeled_train,
        &split.test,
        &extraction,
        config.classifier.ensemble_size,
        Some(&mlp),
        &config.experiment.seeds,
        config.experiment.noise_gap,
        config.experiment.workers,
    )?;
    table.write(&config.run_dir().join("ablation"), "noise_policies")?;
    for row in &table.rows {
        println!(
            "{:<20} mIoU {:.4} +- {:.4}",
            row.policy.name(),
            row.miou_mean,
            row.miou_std
        );
    }
    println!(
        "max gap {:.4} (threshold {:.4}) -> {}",
        table.max_gap,
        table.gap_threshold,
        if table.pass { "PASS" } else { "FAIL" }
    );
    update_run_record(config, |_| {})
}

pub fn cmd_sweep_labels(config: &RunConfig) -> Result<()> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let extraction = config.extraction_config(model.decoder_block_count(), schedule.steps());
    let mlp = config.mlp_config(1, split.class_count);
    let table = run_label_budget_sweep(
        &model,
        &schedule,
        &split.labeled_train,
        &split.test,
        &extraction,
        config.classifier.ensemble_size,
        Some(&mlp),
        &config.experiment.budgets,
        &config.experiment.seeds,
        config.experiment.budget_slack,
        config.experiment.workers,
    )?;
    table.write(&config.run_dir().join("sweep"), "label_budget")?;
    for row in &table.rows {
        println!(
            "n={:<4} mIoU {:.4} +- {:.4}",
            row.budget, row.miou_mean, row.miou_std
        );
    }
    println!(
        "monotone nondecreasing (slack {:.3}): {}",
        table.slack,
        if table.monotone { "PASS" } else { "FAIL" }
    );
    update_run_record(config, |_| {})
}

pub fn cmd_robustness(config: &RunConfig) -> Result<()> {
    let (model, schedule) = load_model(config)?;
    let split = load_split(config)?;
    let extraction = config.extraction_config(model.decoder_block_count(), schedule.steps());
    let mlp = config.mlp_config(1, split.class_count);
    // classifiers are trained on clean features, one ensemble per seed
    let mut ensembles = Vec::new();
    for &seed in &config.experiment.seeds {
        let outcome = run_seg_pipeline(
            &model,
            &schedule,
            &split.labeled_train,
            &split.test,
            &extraction,
            config.classifier.ensemble_size,
            Some(&mlp),
            derive_seed(seed, "robust-clf", 0),
            config.experiment.workers,
        )?;
        ensembles.push(outcome.ensemble);
    }
    let table = run_robustness(
        &model,
        &schedule,
        &split.test,
        &extraction,
        &ensembles,
        &ALL_CORRUPTIONS,
        &config.experiment.severities,
        config.experiment.corrupt_seed,
    )?;
    table.write(&config.run_dir().join("robustness"), "corruption")?;
    println!("clean mIoU {:.4}", table.clean_miou_mean);
    for (sev, mean) in &table.bucket_means {
        println!("severity {sev}: mean mIoU {mean:.4}");
    }
    println!(
        "weak >= medium >= strong: {}",
        if table.monotone { "PASS" } else { "FAIL" }
    );
    update_run_record(config, |_| {})
}
