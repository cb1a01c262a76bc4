//! Pixel-level representations: noise an image to chosen timesteps, tap
//! UNet decoder blocks, bilinearly upsample every tap to image resolution
//! and concatenate.
//!
//! Concatenation order is timestep-major, then block deep-to-shallow; the
//! exact layout is recorded in `channel_layout` so consumers never depend
//! on the convention. Bilinear interpolation uses half-pixel centers
//! (align-corners off).

use crate::binio;
use crate::diffusion::{add_noise, sample_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::derive_seed;
use crate::tensor::{checksum_f32, Tensor};
use crate::unet::UNetModel;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 4] = b"DDPF";
pub const FEATURE_VERSION: u32 = 1;

/// How the corruption noise is drawn during feature extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// One noise tensor for every timestep, shared across train and test.
    FixedShared,
    /// One noise tensor per timestep, shared across train and test.
    PerTimestepShared,
    /// Fresh noise per image and timestep (derived from the image content,
    /// so re-runs with the same seed still reproduce bitwise).
    Resampled,
}

impl NoisePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            NoisePolicy::FixedShared => "fixed_shared",
            NoisePolicy::PerTimestepShared => "per_timestep_shared",
            NoisePolicy::Resampled => "resampled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractionConfig {
    /// Decoder block indices, ascending (1 = deepest).
    pub blocks: Vec<usize>,
    /// Timestep indices, ascending, 1-based.
    pub timesteps: Vec<usize>,
    pub noise_policy: NoisePolicy,
    pub noise_seed: u64,
}

impl FeatureExtractionConfig {
    pub fn validate(&self, decoder_blocks: usize, schedule_steps: usize) -> Result<()> {
        if self.blocks.is_empty() || self.timesteps.is_empty() {
            return Err(Error::config("blocks and timesteps must be nonempty"));
        }
        if self.blocks.windows(2).any(|w| w[0] >= w[1])
            || self.timesteps.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(
                "blocks and timesteps must be strictly ascending",
            ));
        }
        if self.blocks.iter().any(|&b| b == 0 || b > decoder_blocks) {
            return Err(Error::config(format!(
                "blocks must lie in 1..={decoder_blocks}"
            )));
        }
        if self.timesteps.iter().any(|&t| t == 0 || t > schedule_steps) {
            return Err(Error::config(format!(
                "timesteps must lie in 1..={schedule_steps}"
            )));
        }
        Ok(())
    }
}

/// One contiguous span of feature channels with its origin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpan {
    pub timestep: usize,
    pub block: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub blocks: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise_policy: NoisePolicy,
    pub noise_seed: u64,
    pub model_checksum: u64,
    pub channel_layout: Vec<ChannelSpan>,
    /// FNV over the f32 payload; verified at load.
    pub payload_checksum: u64,
}

/// Per-pixel concatenated feature vectors with their provenance.
#[derive(Clone, Debug)]
pub struct PixelFeatureVolume<T> {
    /// [C_total, H, W]
    pub features: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Real> PixelFeatureVolume<T> {
    pub fn channel_count(&self) -> usize {
        self.features.channels()
    }

    /// Row-major [H*W, C] matrix of per-pixel feature vectors.
    pub fn pixel_matrix(&self) -> Vec<T> {
        let c = self.features.channels();
        let (h, w) = self.features.hw();
        let n = h * w;
        let mut out = vec![T::zero(); n * c];
        for ci in 0..c {
            let plane = self.features.channel(ci);
            for p in 0..n {
                out[p * c + ci] = plane[p];
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// bilinear upsampling
// ---------------------------------------------------------------------------

/// Bilinear upsampling with half-pixel centers (align-corners OFF).
/// Requesting the identity size returns a bitwise copy; downscaling is
/// rejected because the pipeline never needs it.
pub fn bilinear_upsample<T: Real>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let c = map.channels();
    let (h, w) = map.hw();
    if out_h < h || out_w < w {
        return Err(Error::dimension(
            format!("target >= {h}x{w}"),
            format!("{out_h}x{out_w}"),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ci in 0..c {
        let src = map.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let a = src[y0 * w + x0].to_f64c();
                let b = src[y0 * w + x1].to_f64c();
                let d = src[y1 * w + x0].to_f64c();
                let e = src[y1 * w + x1].to_f64c();
                let top = a + (b - a) * tx;
                let bot = d + (e - d) * tx;
                dst[oy * out_w + ox] = T::from_f64c(top + (bot - top) * ty);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// extraction
// ---------------------------------------------------------------------------

fn noise_for<T: Real>(
    policy: NoisePolicy,
    noise_seed: u64,
    t: usize,
    image: &Tensor<T>,
) -> Tensor<T> {
    let seed = match policy {
        NoisePolicy::FixedShared => derive_seed(noise_seed, "noise-fixed", 0),
        NoisePolicy::PerTimestepShared => derive_seed(noise_seed, "noise-per-t", t as u64),
        NoisePolicy::Resampled => {
            let image_hash = checksum_f32(&[image.data()]);
            derive_seed(derive_seed(noise_seed, "noise-resampled", image_hash), "t", t as u64)
        }
    };
    sample_noise(image.shape(), seed)
}

/// Fig-style feature pipeline for one image: for each configured timestep,
/// noise the image, run the tapped forward pass, upsample each tap to the
/// image resolution and concatenate everything.
pub fn extract_features<T: Real>(
    model: &UNetModel<T>,
    schedule: &NoiseSchedule<T>,
    image: &Tensor<T>,
    config: &FeatureExtractionConfig,
) -> Result<PixelFeatureVolume<T>> {
    config.validate(model.decoder_block_count(), schedule.steps())?;
    let (h, w) = image.hw();
    let mut parts: Vec<Tensor<T>> = Vec::new();
    let mut layout = Vec::new();
    let mut offset = 0usize;
    for &t in &config.timesteps {
        let eps = noise_for(config.noise_policy, config.noise_seed, t, image);
        let noised = add_noise(image, t, &eps, schedule)?;
        let (_, taps) = model.forward_with_taps(&noised.x_t, t, &config.blocks)?;
        for &b in &config.blocks {
            let tap = &taps[&b];
            let up = bilinear_upsample(tap, h, w)?;
            layout.push(ChannelSpan {
                timestep: t,
                block: b,
                offset,
                len: up.channels(),
            });
            offset += up.channels();
            parts.push(up);
        }
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let features = Tensor::concat_channels(&refs)?;
    let payload_checksum = checksum_f32(&[features.data()]);
    Ok(PixelFeatureVolume {
        features,
        provenance: Provenance {
            blocks: config.blocks.clone(),
            timesteps: config.timesteps.clone(),
            noise_policy: config.noise_policy,
            noise_seed: config.noise_seed,
            model_checksum: model.checksum(),
            channel_layout: layout,
            payload_checksum,
        },
    })
}

/// Order-preserving batch wrapper. Per-image failures are reported with
/// their index; the remaining images are still processed.
pub fn extract_dataset_features<T: Real, F>(
    model: &UNetModel<T>,
    schedule: &NoiseSchedule<T>,
    images: &[&Tensor<T>],
    config: &FeatureExtractionConfig,
    mut on_progress: F,
) -> Vec<std::result::Result<PixelFeatureVolume<T>, (usize, Error)>>
where
    F: FnMut(usize, usize),
{
    images
        .iter()
        .enumerate()
        .map(|(i, image)| {
            on_progress(i, images.len());
            extract_features(model, schedule, image, config).map_err(|e| (i, e))
        })
        .collect()
}

/// C_total for a block set and timestep count given per-block channel
/// widths; the same formula serves the toy architecture walk and published
/// channel tables.
pub fn feature_dim(channels_of_block: impl Fn(usize) -> usize, blocks: &[usize], n_timesteps: usize) -> usize {
    let per_t: usize = blocks.iter().map(|&b| channels_of_block(b)).sum();
    per_t * n_timesteps
}

/// Default extraction block set for a decoder of D blocks: the middle
/// third (indices ceil(D/3) ..= ceil(2D/3) - 1) plus one shallow block
/// (D - 1). For D = 9 this is {3, 4, 5, 8}.
pub fn default_block_set(decoder_blocks: usize) -> Vec<usize> {
    let d = decoder_blocks;
    let lo = d.div_ceil(3);
    let hi = (2 * d).div_ceil(3) - 1;
    let mut blocks: Vec<usize> = (lo..=hi).collect();
    if d >= 2 && !blocks.contains(&(d - 1)) {
        blocks.push(d - 1);
    }
    blocks.sort_unstable();
    blocks.dedup();
    blocks
}

/// Decoder-block output widths of the 18-block reference UNet used at
/// 256x256 (model width 256, multipliers 1,1,2,2,4,4, two residual blocks
/// plus one extra per level). Listed deepest first; published block sets
/// index into this list zero-based.
pub fn adm18_decoder_channels() -> [usize; 18] {
    [
        1024, 1024, 1024, 1024, 1024, 1024, 512, 512, 512, 512, 512, 512, 256, 256, 256, 256,
        256, 256,
    ]
}

// ---------------------------------------------------------------------------
// feature files
// ---------------------------------------------------------------------------

/// Feature file: magic "DDPF", u32 version, u32 C_total, u32 H, u32 W,
/// length-prefixed provenance JSON, then the f32 payload in [C, H, W]
/// order, little-endian.
pub fn save_features<T: Real>(volume: &PixelFeatureVolume<T>, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(p.clone(), e);
    let (h, ww) = volume.features.hw();
    w.write_all(FEATURE_MAGIC).map_err(io_err)?;
    binio::write_u32(&mut w, FEATURE_VERSION).map_err(io_err)?;
    binio::write_u32(&mut w, volume.features.channels() as u32).map_err(io_err)?;
    binio::write_u32(&mut w, h as u32).map_err(io_err)?;
    binio::write_u32(&mut w, ww as u32).map_err(io_err)?;
    let prov = serde_json::to_vec(&volume.provenance).map_err(|e| Error::Json {
        path: p.clone(),
        message: e.to_string(),
    })?;
    binio::write_bytes(&mut w, &prov).map_err(io_err)?;
    for v in volume.features.data() {
        w.write_all(&v.to_f32c().to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_features<T: Real>(path: &Path) -> Result<PixelFeatureVolume<T>> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::load(&p, "truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::load(&p, "bad magic (not a DDPF feature file)"));
    }
    let version = binio::read_u32(&mut r, &p)?;
    if version != FEATURE_VERSION {
        return Err(Error::load(&p, format!("unsupported version {version}")));
    }
    let c = binio::read_u32(&mut r, &p)? as usize;
    let h = binio::read_u32(&mut r, &p)? as usize;
    let w = binio::read_u32(&mut r, &p)? as usize;
    let prov_bytes = binio::read_bytes(&mut r, &p)?;
    let provenance: Provenance = serde_json::from_slice(&prov_bytes).map_err(|e| Error::Json {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let n = c * h * w;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::load(&p, "payload shorter than C*H*W*4 bytes"))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(p.clone(), e))? != 0 {
        return Err(Error::load(&p, "payload longer than C*H*W*4 bytes"));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(T::from_f32c(f32::from_le_bytes([
            chunk[0], chunk[1], chunk[2], chunk[3],
        ])));
    }
    let features = Tensor::from_vec(&[c, h, w], data)
        .map_err(|e| Error::load(&p, format!("bad payload shape: {e}")))?;
    if checksum_f32(&[features.data()]) != provenance.payload_checksum {
        return Err(Error::load(&p, "payload checksum mismatch"));
    }
    let span_total: usize = provenance.channel_layout.iter().map(|s| s.len).sum();
    if span_total != c {
        return Err(Error::load(&p, "channel layout does not cover the payload"));
    }
    Ok(PixelFeatureVolume {
        features,
        provenance,
    })
}

/// On-disk size of a feature file, by enumeration of its records.
pub fn expected_feature_file_size<T: Real>(volume: &PixelFeatureVolume<T>) -> Result<usize> {
    let prov = serde_json::to_vec(&volume.provenance).map_err(|e| Error::Json {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(4 + 4 + 4 + 4 + 4 + 4 + prov.len() + volume.features.len() * 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use crate::rng::Rng;
    use crate::unet::{build_unet, decoder_walk, UNetConfig};

    fn toy_model() -> (UNetModel<f32>, NoiseSchedule<f32>) {
        let cfg = UNetConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 2,
            time_embedding_dim: 8,
            input_resolution: 16,
        };
        (
            build_unet::<f32>(&cfg, 3).unwrap(),
            build_schedule::<f32>(50, 1e-3, 0.2).unwrap(),
        )
    }

    fn toy_image(seed: u64, res: usize) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let mut x = Tensor::zeros(&[3, res, res]);
        for v in x.data_mut() {
            *v = (rng.next_f64() * 2.0 - 1.0) as f32;
        }
        x
    }

    #[test]
    fn bilinear_preserves_constants() {
        let m = Tensor::<f64>::filled(&[2, 3, 3], 0.7);
        let up = bilinear_upsample(&m, 9, 9).unwrap();
        for v in up.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_is_bitwise() {
        let mut m = Tensor::<f32>::zeros(&[1, 4, 4]);
        let mut rng = Rng::new(4);
        rng.fill_normal(m.data_mut());
        let up = bilinear_upsample(&m, 4, 4).unwrap();
        assert_eq!(m.data(), up.data());
    }

    #[test]
    fn bilinear_rejects_downscaling() {
        let m = Tensor::<f32>::zeros(&[1, 4, 4]);
        assert!(bilinear_upsample(&m, 2, 4).is_err());
    }

    #[test]
    fn bilinear_matches_scalar_reference() {
        // independent scalar reference implementation of half-pixel
        // bilinear sampling
        fn reference(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
            let mut out = vec![0.0; oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let fy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
                        .clamp(0.0, (h - 1) as f64);
                    let fx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
                        .clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                    let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                    out[oy * ow + ox] = top * (1.0 - ty) + bot * ty;
                }
            }
            out
        }

        // the 2x2 -> 4x4 case, frozen by hand: first row 1, 1.25, 1.75, 2
        let m = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = bilinear_upsample(&m, 4, 4).unwrap();
        let expect_row0 = [1.0, 1.25, 1.75, 2.0];
        let expect_col0 = [1.0, 1.5, 2.5, 3.0];
        for i in 0..4 {
            assert!((up.channel(0)[i] - expect_row0[i]).abs() < 1e-6);
            assert!((up.channel(0)[i * 4] - expect_col0[i]).abs() < 1e-6);
        }
        let oracle = reference(&[1.0, 2.0, 3.0, 4.0], 2, 2, 4, 4);
        for (got, want) in up.channel(0).iter().zip(oracle.iter()) {
            assert!((got - want).abs() < 1e-6);
        }

        // random map against the reference
        let mut rng = Rng::new(77);
        let mut m = Tensor::<f64>::zeros(&[1, 3, 5]);
        rng.fill_normal(m.data_mut());
        let up = bilinear_upsample(&m, 7, 11).unwrap();
        let oracle = reference(m.channel(0), 3, 5, 7, 11);
        for (got, want) in up.channel(0).iter().zip(oracle.iter()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn default_block_set_is_middle_plus_shallow() {
        assert_eq!(default_block_set(9), vec![3, 4, 5, 8]);
        assert_eq!(default_block_set(6), vec![2, 3, 5]);
        assert_eq!(default_block_set(12), vec![4, 5, 6, 7, 11]);
    }

    #[test]
    fn feature_dim_matches_published_table() {
        // reference channel table, blocks {5,6,7,8,12} zero-based, 3 steps
        let table = adm18_decoder_channels();
        let dim = feature_dim(|b| table[b], &[5, 6, 7, 8, 12], 3);
        assert_eq!(dim, 8448);
    }

    #[test]
    fn c_total_matches_architecture_walk() {
        let (model, schedule) = toy_model();
        let walk = decoder_walk(&model.config);
        let config = FeatureExtractionConfig {
            blocks: vec![1, 2, 4],
            timesteps: vec![5, 15, 25],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 9,
        };
        let image = toy_image(1, 16);
        let vol = extract_features(&model, &schedule, &image, &config).unwrap();
        // channel-sum oracle from the walk
        let expected = feature_dim(
            |b| walk.iter().find(|i| i.index == b).unwrap().channels,
            &config.blocks,
            config.timesteps.len(),
        );
        // blocks 1 and 2 sit at the deepest level (8 ch), block 4 at the
        // shallowest (4 ch)
        assert_eq!(vol.channel_count(), expected);
        assert_eq!(expected, (8 + 8 + 4) * 3);
        // layout spans are disjoint and cover [0, C_total)
        let mut cursor = 0;
        for span in &vol.provenance.channel_layout {
            assert_eq!(span.offset, cursor);
            cursor += span.len;
        }
        assert_eq!(cursor, vol.channel_count());
    }

    #[test]
    fn single_native_resolution_tap_is_identity() {
        // one block whose native resolution equals the image, one timestep:
        // features equal the raw tap bitwise
        let (model, schedule) = toy_model();
        let d = model.decoder_block_count();
        let image = toy_image(2, 16);
        let config = FeatureExtractionConfig {
            blocks: vec![d], // shallowest block runs at full resolution
            timesteps: vec![10],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 5,
        };
        let vol = extract_features(&model, &schedule, &image, &config).unwrap();
        let eps = noise_for(NoisePolicy::FixedShared, 5, 10, &image);
        let noised = add_noise(&image, 10, &eps, &schedule).unwrap();
        let (_, taps) = model.forward_with_taps(&noised.x_t, 10, &[d]).unwrap();
        assert_eq!(vol.features.data(), taps[&d].data());
    }

    #[test]
    fn fixed_shared_extraction_is_deterministic() {
        let (model, schedule) = toy_model();
        let image = toy_image(3, 16);
        let config = FeatureExtractionConfig {
            blocks: vec![1, 3],
            timesteps: vec![5, 20],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 31,
        };
        let a = extract_features(&model, &schedule, &image, &config).unwrap();
        let b = extract_features(&model, &schedule, &image, &config).unwrap();
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn resampled_differs_across_seeds() {
        let (model, schedule) = toy_model();
        let image = toy_image(4, 16);
        let mut config = FeatureExtractionConfig {
            blocks: vec![2],
            timesteps: vec![10],
            noise_policy: NoisePolicy::Resampled,
            noise_seed: 1,
        };
        let a = extract_features(&model, &schedule, &image, &config).unwrap();
        config.noise_seed = 2;
        let b = extract_features(&model, &schedule, &image, &config).unwrap();
        assert!(a.features.l2_distance(&b.features) > 0.0);
    }

    #[test]
    fn block_set_union_is_channel_concat() {
        // extracting with B1 u B2 equals channel-concatenation of separate
        // extractions, pixelwise
        let (model, schedule) = toy_model();
        let image = toy_image(5, 16);
        let mk = |blocks: Vec<usize>| FeatureExtractionConfig {
            blocks,
            timesteps: vec![7],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 13,
        };
        let union = extract_features(&model, &schedule, &image, &mk(vec![1, 3])).unwrap();
        let b1 = extract_features(&model, &schedule, &image, &mk(vec![1])).unwrap();
        let b3 = extract_features(&model, &schedule, &image, &mk(vec![3])).unwrap();
        let concat = Tensor::concat_channels(&[&b1.features, &b3.features]).unwrap();
        assert_eq!(union.features.data(), concat.data());
    }

    #[test]
    fn batch_wrapper_matches_per_image_calls() {
        let (model, schedule) = toy_model();
        let images: Vec<Tensor<f32>> = (0..3).map(|i| toy_image(10 + i, 16)).collect();
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let config = FeatureExtractionConfig {
            blocks: vec![1, 2],
            timesteps: vec![5],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 3,
        };
        let mut seen = 0;
        let batch = extract_dataset_features(&model, &schedule, &refs, &config, |_, _| seen += 1);
        assert_eq!(seen, 3);
        for (i, res) in batch.iter().enumerate() {
            let single = extract_features(&model, &schedule, &images[i], &config).unwrap();
            let batch_vol = res.as_ref().unwrap();
            assert_eq!(batch_vol.features.data(), single.features.data());
        }
    }

    #[test]
    fn feature_file_roundtrip_and_size() {
        let (model, schedule) = toy_model();
        let image = toy_image(6, 16);
        let config = FeatureExtractionConfig {
            blocks: vec![1, 4],
            timesteps: vec![5, 25],
            noise_policy: NoisePolicy::PerTimestepShared,
            noise_seed: 17,
        };
        let vol = extract_features(&model, &schedule, &image, &config).unwrap();
        let dir = std::env::temp_dir().join(format!("dseg_feat_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.ddpf");
        save_features(&vol, &path).unwrap();

        // size accounting
        let meta = std::fs::metadata(&path).unwrap();
        assert_eq!(meta.len() as usize, expected_feature_file_size(&vol).unwrap());

        let loaded = load_features::<f32>(&path).unwrap();
        assert_eq!(loaded.features.data(), vol.features.data());
        assert_eq!(loaded.provenance, vol.provenance);

        // tampered payload length is rejected
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        let bad = dir.join("bad.ddpf");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_features::<f32>(&bad).is_err());

        // flipped payload byte fails the checksum
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x5A;
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_features::<f32>(&bad).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invalid_configs_rejected() {
        let (model, schedule) = toy_model();
        let image = toy_image(7, 16);
        let bad = FeatureExtractionConfig {
            blocks: vec![],
            timesteps: vec![1],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 0,
        };
        assert!(extract_features(&model, &schedule, &image, &bad).is_err());
        let bad = FeatureExtractionConfig {
            blocks: vec![3, 1],
            timesteps: vec![1],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 0,
        };
        assert!(extract_features(&model, &schedule, &image, &bad).is_err());
        let bad = FeatureExtractionConfig {
            blocks: vec![1],
            timesteps: vec![999],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 0,
        };
        assert!(extract_features(&model, &schedule, &image, &bad).is_err());
    }
}
