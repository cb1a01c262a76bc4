//! Manual calibration harness (ignored by default): points at an existing
//! run directory and reports pipeline quality without retraining the
//! diffusion model.
//!
//!   DSEG_CALIB_RUN=/path/to/run cargo test -p dseg-cli --test calibrate \
//!       -- --ignored --nocapture
//!
//! Optional: DSEG_CALIB_MEMBERS (default 5), DSEG_CALIB_SEEDS (default 1).

use dseg_core::analysis::{run_probe_grid, run_rgb_baseline, run_seg_pipeline, DdpmProbeSource};
use dseg_core::features::{default_block_set, FeatureExtractionConfig, NoisePolicy};
use dseg_core::num::Pixel;
use dseg_core::rng::derive_seed;
use dseg_core::synth::load_dataset;
use dseg_core::unet::load_checkpoint;
use std::path::PathBuf;

#[test]
#[ignore]
fn calibrate_against_existing_run() {
    let run: PathBuf = std::env::var("DSEG_CALIB_RUN")
        .expect("set DSEG_CALIB_RUN to a run directory")
        .into();
    let members: usize = std::env::var("DSEG_CALIB_MEMBERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(5);
    let n_seeds: u64 = std::env::var("DSEG_CALIB_SEEDS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);

    let (model, schedule) = load_checkpoint::<Pixel>(&run.join("ddpm.ckpt")).unwrap();
    let split = load_dataset(&run.join("dataset")).unwrap();
    println!(
        "model: {} params, D={} blocks; dataset {} train / {} test",
        model.parameter_count(),
        model.decoder_block_count(),
        split.labeled_train.len(),
        split.test.len()
    );
    let extraction = FeatureExtractionConfig {
        blocks: default_block_set(model.decoder_block_count()),
        timesteps: vec![5, 15, 25],
        noise_policy: NoisePolicy::FixedShared,
        noise_seed: 99,
    };
    println!("extraction: blocks {:?}, t {:?}", extraction.blocks, extraction.timesteps);

    for s in 1..=n_seeds {
        let outcome = run_seg_pipeline(
            &model,
            &schedule,
            &split.labeled_train,
            &split.test,
            &extraction,
            members,
            None,
            derive_seed(s, "acc-clf", 0),
            1,
        )
        .unwrap();
        let rgb = run_rgb_baseline(
            &split.labeled_train,
            &split.test,
            members,
            None,
            derive_seed(s, "acc-clf", 0),
            1,
        )
        .unwrap();
        println!(
            "seed {s}: ddpm mIoU {:.4} | rgb {:.4} | margin {:.4}",
            outcome.report.mean_iou,
            rgb.report.mean_iou,
            outcome.report.mean_iou - rgb.report.mean_iou
        );
        for (c, iou) in outcome.report.per_class_iou.iter().enumerate() {
            println!("   class {c}: {:?}", iou.map(|v| (v * 1000.0).round() / 1000.0));
        }
    }

    if std::env::var("DSEG_CALIB_PROBE").is_ok() {
        let d = model.decoder_block_count();
        let blocks: Vec<usize> = (1..=d).collect();
        let source = DdpmProbeSource::new(&model, &schedule, 99);
        let grid = run_probe_grid(
            &source,
            &split.labeled_train,
            &split.test,
            &blocks,
            &[5, 15, 25, 85, 95],
            derive_seed(1, "acc-probe", 0),
        )
        .unwrap();
        println!("probe grid (rows = blocks 1..{d}, cols = t 5/15/25/85/95):");
        for b in &blocks {
            let row: Vec<String> = [5usize, 15, 25, 85, 95]
                .iter()
                .map(|&t| {
                    grid.cell(*b, t)
                        .map(|v| format!("{v:.3}"))
                        .unwrap_or_else(|| "  -  ".into())
                })
                .collect();
            println!("  block {b}: {}", row.join("  "));
        }
    }
}
