//! Per-pixel MLP classifiers and the majority-voting ensemble.
//!
//! Each member is a two-hidden-layer MLP with ReLU and batch
//! normalization, trained with Adam on cross-entropy. Batch-norm
//! statistics are frozen at evaluation, so prediction is independent of
//! how pixels are batched. Members differ by initialization and data
//! order only; voting ties break to the smallest class index.

use crate::binio;
use crate::error::{Error, Result};
use crate::features::PixelFeatureVolume;
use crate::metrics::Mask;
use crate::nn::{relu_backward_inplace, relu_inplace, Adam, BatchNorm1d, Linear, Param};
use crate::num::Real;
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"DSEG";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLPConfig {
    pub input_dim: usize,
    pub hidden_dims: (usize, usize),
    pub class_count: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: f64,
    pub seed: u64,
    /// Inverse-frequency class weighting; defaults off (uniform
    /// cross-entropy).
    pub class_weighting: bool,
}

/// The reference training configuration: hidden sizes (128, 32) for class
/// counts below 30 and (256, 128) otherwise, learning rate 0.001, batch
/// size 64, 4 epochs.
pub fn default_mlp_config(input_dim: usize, class_count: usize) -> MLPConfig {
    let hidden_dims = if class_count < 30 { (128, 32) } else { (256, 128) };
    MLPConfig {
        input_dim,
        hidden_dims,
        class_count,
        learning_rate: 0.001,
        batch_size: 64,
        epochs: 4.0,
        seed: 0,
        class_weighting: false,
    }
}

impl MLPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count < 2 {
            return Err(Error::config("input_dim >= 1 and class_count >= 2 required"));
        }
        if self.learning_rate <= 0.0 || self.epochs <= 0.0 || self.batch_size == 0 {
            return Err(Error::config(
                "learning_rate, epochs and batch_size must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PixelMlp<T> {
    l1: Linear<T>,
    bn1: BatchNorm1d<T>,
    l2: Linear<T>,
    bn2: BatchNorm1d<T>,
    l3: Linear<T>,
    pub config: MLPConfig,
}

impl<T: Real> PixelMlp<T> {
    pub fn new(config: &MLPConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(seed, "mlp-init", 0));
        let (h1, h2) = config.hidden_dims;
        Ok(PixelMlp {
            l1: Linear::new("l1", config.input_dim, h1, &mut rng),
            bn1: BatchNorm1d::new("bn1", h1),
            l2: Linear::new("l2", h1, h2, &mut rng),
            bn2: BatchNorm1d::new("bn2", h2),
            l3: Linear::new("l3", h2, config.class_count, &mut rng),
            config: config.clone(),
        })
    }

    /// Inference logits for a row-major [batch, input_dim] matrix, using
    /// frozen batch-norm statistics.
    pub fn logits(&self, x: &[T], batch: usize) -> Vec<T> {
        let z1 = self.l1.forward(x, batch);
        let mut a1 = self.bn1.forward_eval(&z1);
        relu_inplace(&mut a1);
        let z2 = self.l2.forward(&a1, batch);
        let mut a2 = self.bn2.forward_eval(&z2);
        relu_inplace(&mut a2);
        self.l3.forward(&a2, batch)
    }

    /// Argmax class per row.
    pub fn predict(&self, x: &[T], batch: usize) -> Vec<u8> {
        let logits = self.logits(x, batch);
        let k = self.config.class_count;
        logits
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0usize;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Training-mode cross-entropy over one batch: runs the forward pass
    /// with batch statistics, writes parameter gradients, returns the
    /// loss. `k` rows of class weights rescale the loss when given.
    pub fn loss_and_grad(
        &mut self,
        x: &[T],
        labels: &[u8],
        class_weights: Option<&[f64]>,
    ) -> Result<f64> {
        let batch = labels.len();
        let k = self.config.class_count;
        let z1 = self.l1.forward(x, batch);
        let (b1, c1) = self.bn1.forward_train(&z1, batch);
        let mut a1 = b1.clone();
        relu_inplace(&mut a1);
        let z2 = self.l2.forward(&a1, batch);
        let (b2, c2) = self.bn2.forward_train(&z2, batch);
        let mut a2 = b2.clone();
        relu_inplace(&mut a2);
        let logits = self.l3.forward(&a2, batch);

        let (loss, grad_logits) = cross_entropy_grad(&logits, labels, k, class_weights);
        for p in self.params_mut() {
            p.zero_grad();
        }
        let mut g = self.l3.backward(&a2, &grad_logits, batch);
        relu_backward_inplace(&b2, &mut g);
        let g = self.bn2.backward(&c2, &g, batch);
        let mut g = self.l2.backward(&a1, &g, batch);
        relu_backward_inplace(&b1, &mut g);
        let g = self.bn1.backward(&c1, &g, batch);
        self.l1.backward(x, &g, batch);
        Ok(loss)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.l1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.l2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.l3.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.l1.params();
        p.extend(self.bn1.params());
        p.extend(self.l2.params());
        p.extend(self.bn2.params());
        p.extend(self.l3.params());
        p
    }
}

/// Mean cross-entropy over a logits batch plus the gradient wrt logits.
fn cross_entropy_grad<T: Real>(
    logits: &[T],
    labels: &[u8],
    k: usize,
    class_weights: Option<&[f64]>,
) -> (f64, Vec<T>) {
    let batch = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0f64;
    let mut weight_total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let w = class_weights.map_or(1.0, |cw| cw[label as usize]);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64c()));
        let mut denom = 0.0f64;
        for v in row {
            denom += (v.to_f64c() - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += w * (log_denom - row[label as usize].to_f64c());
        weight_total += w;
        for c in 0..k {
            let p = (row[c].to_f64c() - log_denom).exp();
            let target = if c == label as usize { 1.0 } else { 0.0 };
            grad[i * k + c] = T::from_f64c(w * (p - target));
        }
        let _ = batch;
    }
    // normalize by total weight so uniform weighting reduces to the mean
    let scale = T::from_f64c(1.0 / weight_total);
    for g in grad.iter_mut() {
        *g *= scale;
    }
    (loss / weight_total, grad)
}

/// Train one MLP member. Deterministic given (config, seed): the seed
/// fixes both initialization and the per-epoch shuffle order.
pub fn train_member<T: Real>(
    features: &[T],
    labels: &[u8],
    config: &MLPConfig,
    seed: u64,
) -> Result<PixelMlp<T>> {
    config.validate()?;
    let dim = config.input_dim;
    let n = labels.len();
    if features.len() != n * dim {
        return Err(Error::dimension(
            format!("{n} rows x {dim}"),
            format!("{} values", features.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= config.class_count) {
        return Err(Error::config(format!(
            "label {bad} >= class_count {}",
            config.class_count
        )));
    }
    let mut mlp = PixelMlp::new(config, seed)?;
    let mut opt = Adam::new(config.learning_rate);
    let k = config.class_count;

    let class_weights: Option<Vec<f64>> = if config.class_weighting {
        let mut counts = vec![0usize; k];
        for &l in labels {
            counts[l as usize] += 1;
        }
        Some(
            counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { n as f64 / (k as f64 * c as f64) })
                .collect(),
        )
    } else {
        None
    };

    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch as f64).ceil() as usize;
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0usize;
    let mut epoch = 0u64;
    let mut xbuf: Vec<T> = Vec::new();
    let mut ybuf: Vec<u8> = Vec::new();
    for step in 0..total_steps {
        if order.is_empty() || pos >= n {
            let mut rng = Rng::new(derive_seed(seed, "mlp-shuffle", epoch));
            order = (0..n).collect();
            rng.shuffle(&mut order);
            pos = 0;
            epoch += 1;
        }
        let take = config.batch_size.min(n - pos);
        xbuf.clear();
        ybuf.clear();
        for &row in &order[pos..pos + take] {
            xbuf.extend_from_slice(&features[row * dim..(row + 1) * dim]);
            ybuf.push(labels[row]);
        }
        pos += take;

        let loss = mlp.loss_and_grad(&xbuf, &ybuf, class_weights.as_deref())?;
        if !loss.is_finite() {
            return Err(Error::TrainingFault {
                context: format!("epoch {epoch}, step {step}"),
                message: "non-finite loss".into(),
            });
        }
        opt.step(&mut mlp.params_mut(), 1.0);
    }
    Ok(mlp)
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EnsembleModel<T> {
    pub members: Vec<PixelMlp<T>>,
    pub config: MLPConfig,
    pub member_seeds: Vec<u64>,
}

/// Majority vote with smallest-class-index tie-break; member order never
/// matters because only the counts enter.
pub fn vote(member_votes: &[u8], class_count: usize) -> u8 {
    let mut counts = vec![0usize; class_count];
    for &v in member_votes {
        counts[v as usize] += 1;
    }
    let mut best = 0usize;
    for c in 1..class_count {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// Train N independent members on identical data. Member i uses seed
/// `master_seed + i`, which varies both initialization and shuffle order.
/// `workers > 1` trains members on that many threads; members are
/// seed-isolated, so the result is identical to a sequential run.
pub fn train_ensemble<T: Real>(
    features: &[T],
    labels: &[u8],
    config: &MLPConfig,
    n_members: usize,
    master_seed: u64,
    workers: usize,
) -> Result<EnsembleModel<T>> {
    if n_members == 0 {
        return Err(Error::config("ensemble needs at least one member"));
    }
    let member_seeds: Vec<u64> = (0..n_members as u64).map(|i| master_seed + i).collect();
    let members: Vec<PixelMlp<T>> = if workers <= 1 {
        let mut out = Vec::with_capacity(n_members);
        for (i, &s) in member_seeds.iter().enumerate() {
            out.push(train_member(features, labels, config, s).map_err(|e| {
                Error::TrainingFault {
                    context: format!("ensemble member {i}"),
                    message: e.to_string(),
                }
            })?);
        }
        out
    } else {
        let results: Vec<Result<PixelMlp<T>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = member_seeds
                .iter()
                .map(|&s| scope.spawn(move || train_member(features, labels, config, s)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut out = Vec::with_capacity(n_members);
        for (i, r) in results.into_iter().enumerate() {
            out.push(r.map_err(|e| Error::TrainingFault {
                context: format!("ensemble member {i}"),
                message: e.to_string(),
            })?);
        }
        out
    };
    Ok(EnsembleModel {
        members,
        config: config.clone(),
        member_seeds,
    })
}

impl<T: Real> EnsembleModel<T> {
    /// Per-pixel majority vote over member argmax predictions.
    pub fn predict_mask(&self, volume: &PixelFeatureVolume<T>) -> Result<Mask> {
        if volume.channel_count() != self.config.input_dim {
            return Err(Error::dimension(
                format!("feature dim {}", self.config.input_dim),
                format!("{}", volume.channel_count()),
            ));
        }
        let (h, w) = volume.features.hw();
        let matrix = volume.pixel_matrix();
        Ok(self.predict_rows_mask(&matrix, h, w))
    }

    /// Vote over explicit feature rows; exposed for raw-feature baselines.
    pub fn predict_rows_mask(&self, matrix: &[T], h: usize, w: usize) -> Mask {
        let n = h * w;
        let mut votes: Vec<Vec<u8>> = Vec::with_capacity(self.members.len());
        for m in &self.members {
            votes.push(m.predict(matrix, n));
        }
        let k = self.config.class_count;
        let mut labels = vec![0u8; n];
        let mut ballot = vec![0u8; self.members.len()];
        for (p, out) in labels.iter_mut().enumerate() {
            for (mi, v) in votes.iter().enumerate() {
                ballot[mi] = v[p];
            }
            *out = vote(&ballot, k);
        }
        Mask {
            height: h,
            width: w,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    member_count: usize,
    member_seeds: Vec<u64>,
    config: MLPConfig,
}

/// Ensemble checkpoint: the "DSEG" tensor container with a length-prefixed
/// ensemble manifest (member count, seeds, MLP config as JSON) ahead of
/// the tensor records.
pub fn save_ensemble<T: Real>(ensemble: &EnsembleModel<T>, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(p.clone(), e);
    w.write_all(ENSEMBLE_MAGIC).map_err(io_err)?;
    binio::write_u32(&mut w, ENSEMBLE_VERSION).map_err(io_err)?;
    let manifest = EnsembleManifest {
        member_count: ensemble.members.len(),
        member_seeds: ensemble.member_seeds.clone(),
        config: ensemble.config.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Json {
        path: p.clone(),
        message: e.to_string(),
    })?;
    binio::write_bytes(&mut w, &manifest_bytes).map_err(io_err)?;
    let total: usize = ensemble.members.iter().map(|m| m.params().len()).sum();
    binio::write_u32(&mut w, total as u32).map_err(io_err)?;
    for (i, m) in ensemble.members.iter().enumerate() {
        for param in m.params() {
            binio::write_tensor(&mut w, &format!("m{i}.{}", param.name), &param.value)
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Load an ensemble; `expect_input_dim` lets callers validate against a
/// feature volume at load time.
pub fn load_ensemble<T: Real>(
    path: &Path,
    expect_input_dim: Option<usize>,
) -> Result<EnsembleModel<T>> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::load(&p, "truncated header"))?;
    if &magic != ENSEMBLE_MAGIC {
        return Err(Error::load(&p, "bad magic (not a DSEG container)"));
    }
    let version = binio::read_u32(&mut r, &p)?;
    if version != ENSEMBLE_VERSION {
        return Err(Error::load(&p, format!("unsupported version {version}")));
    }
    let manifest_bytes = binio::read_bytes(&mut r, &p)?;
    let manifest: EnsembleManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Json {
            path: p.clone(),
            message: e.to_string(),
        })?;
    if let Some(dim) = expect_input_dim {
        if manifest.config.input_dim != dim {
            return Err(Error::load(
                &p,
                format!(
                    "ensemble input_dim {} does not match feature dim {dim}",
                    manifest.config.input_dim
                ),
            ));
        }
    }
    let count = binio::read_u32(&mut r, &p)? as usize;
    let mut members = Vec::with_capacity(manifest.member_count);
    let mut read = 0usize;
    for i in 0..manifest.member_count {
        let mut m = PixelMlp::<T>::new(&manifest.config, manifest.member_seeds[i])?;
        for param in m.params_mut() {
            let (name, tensor) = binio::read_tensor::<_, T>(&mut r, &p)?;
            let expect = format!("m{i}.{}", param.name);
            if name != expect {
                return Err(Error::load(&p, format!("expected {expect}, got {name}")));
            }
            if tensor.shape() != param.value.shape() {
                return Err(Error::load(&p, format!("shape mismatch for {name}")));
            }
            param.value = tensor;
            read += 1;
        }
        members.push(m);
    }
    if read != count {
        return Err(Error::load(&p, "tensor count mismatch"));
    }
    Ok(EnsembleModel {
        members,
        config: manifest.config,
        member_seeds: manifest.member_seeds,
    })
}

/// On-disk ensemble size, by enumeration of its records.
pub fn expected_ensemble_size<T: Real>(ensemble: &EnsembleModel<T>) -> Result<usize> {
    let manifest = EnsembleManifest {
        member_count: ensemble.members.len(),
        member_seeds: ensemble.member_seeds.clone(),
        config: ensemble.config.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Json {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let mut total = 4 + 4 + 4 + manifest_bytes.len() + 4;
    for (i, m) in ensemble.members.iter().enumerate() {
        for param in m.params() {
            total +=
                binio::tensor_record_size(&format!("m{i}.{}", param.name), param.value.shape());
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two well-separated Gaussian blobs: margin 5 sigma.
    fn blob_fixture(n_per_class: usize, seed: u64) -> (Vec<f32>, Vec<u8>) {
        let mut rng = Rng::new(seed);
        let mut x = Vec::with_capacity(n_per_class * 2 * 2);
        let mut y = Vec::with_capacity(n_per_class * 2);
        for class in 0..2u8 {
            let cx = if class == 0 { 0.0 } else { 5.0 };
            for _ in 0..n_per_class {
                x.push((cx + rng.normal_f64()) as f32);
                x.push((cx + rng.normal_f64()) as f32);
                y.push(class);
            }
        }
        (x, y)
    }

    fn blob_config() -> MLPConfig {
        MLPConfig {
            input_dim: 2,
            hidden_dims: (16, 8),
            class_count: 2,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 8.0,
            seed: 0,
            class_weighting: false,
        }
    }

    #[test]
    fn default_config_follows_class_count_rule() {
        assert_eq!(default_mlp_config(100, 15).hidden_dims, (128, 32));
        assert_eq!(default_mlp_config(100, 34).hidden_dims, (256, 128));
        // the rule is "less than 30", so 30 already takes the larger sizes
        assert_eq!(default_mlp_config(100, 30).hidden_dims, (256, 128));
        let c = default_mlp_config(100, 5);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.epochs, 4.0);
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (x, y) = blob_fixture(200, 3);
        let mlp = train_member::<f32>(&x, &y, &blob_config(), 7).unwrap();
        let pred = mlp.predict(&x, y.len());
        let correct = pred.iter().zip(y.iter()).filter(|(a, b)| a == b).count();
        let acc = correct as f64 / y.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blob_fixture(50, 5);
        let a = train_member::<f32>(&x, &y, &blob_config(), 11).unwrap();
        let b = train_member::<f32>(&x, &y, &blob_config(), 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
        let c = train_member::<f32>(&x, &y, &blob_config(), 12).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs);
    }

    #[test]
    fn degenerate_single_class_labels() {
        let (x, _) = blob_fixture(50, 7);
        let y = vec![1u8; 100];
        let mut cfg = blob_config();
        cfg.class_count = 3;
        let mlp = train_member::<f32>(&x, &y, &cfg, 1).unwrap();
        let pred = mlp.predict(&x, y.len());
        assert!(pred.iter().all(|&p| p == 1), "predicts the only class seen");
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let (x, mut y) = blob_fixture(10, 9);
        y[3] = 7;
        assert!(train_member::<f32>(&x, &y, &blob_config(), 0).is_err());
    }

    #[test]
    fn vote_enumeration_exhaustive() {
        // exhaustive check for N <= 5, K <= 4: mode with smallest-index
        // tie-break, via an independent vote-count table
        for k in 2..=4usize {
            for n in 1..=5usize {
                let mut combo = vec![0u8; n];
                loop {
                    // oracle: count, take max count, smallest index wins
                    let mut counts = vec![0usize; k];
                    for &v in &combo {
                        counts[v as usize] += 1;
                    }
                    let maxc = *counts.iter().max().unwrap();
                    let expect = counts.iter().position(|&c| c == maxc).unwrap() as u8;
                    assert_eq!(vote(&combo, k), expect, "combo {combo:?}");

                    // member-order permutation invariance: reversal and
                    // rotation leave the vote unchanged
                    let mut rev = combo.clone();
                    rev.reverse();
                    assert_eq!(vote(&rev, k), expect);
                    let mut rot = combo.clone();
                    rot.rotate_left(1.min(n - 1));
                    assert_eq!(vote(&rot, k), expect);

                    // next combination
                    let mut i = 0;
                    loop {
                        if i == n {
                            break;
                        }
                        combo[i] += 1;
                        if (combo[i] as usize) < k {
                            break;
                        }
                        combo[i] = 0;
                        i += 1;
                    }
                    if i == n {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn spec_tie_break_example() {
        // votes {2:1, 0:1, 1:1} with N=3 -> class 0
        assert_eq!(vote(&[2, 0, 1], 3), 0);
    }

    #[test]
    fn singleton_ensemble_equals_member() {
        let (x, y) = blob_fixture(60, 13);
        let cfg = blob_config();
        let ens = train_ensemble::<f32>(&x, &y, &cfg, 1, 42, 1).unwrap();
        let member = train_member::<f32>(&x, &y, &cfg, 42).unwrap();
        let mask_e = ens.predict_rows_mask(&x, 1, y.len());
        let pred_m = member.predict(&x, y.len());
        assert_eq!(mask_e.labels, pred_m);
    }

    #[test]
    fn forced_equal_seeds_vote_unanimously() {
        let (x, y) = blob_fixture(40, 17);
        let cfg = blob_config();
        // three members with identical seeds: train each directly
        let m0 = train_member::<f32>(&x, &y, &cfg, 5).unwrap();
        let ens = EnsembleModel {
            members: vec![m0.clone(), m0.clone(), m0.clone()],
            config: cfg,
            member_seeds: vec![5, 5, 5],
        };
        let mask = ens.predict_rows_mask(&x, 1, y.len());
        assert_eq!(mask.labels, m0.predict(&x, y.len()));
    }

    #[test]
    fn parallel_training_matches_sequential() {
        let (x, y) = blob_fixture(40, 19);
        let mut cfg = blob_config();
        cfg.epochs = 2.0;
        let seq = train_ensemble::<f32>(&x, &y, &cfg, 3, 100, 1).unwrap();
        let par = train_ensemble::<f32>(&x, &y, &cfg, 3, 100, 3).unwrap();
        for (a, b) in seq.members.iter().zip(par.members.iter()) {
            for (pa, pb) in a.params().iter().zip(b.params().iter()) {
                assert_eq!(pa.value.data(), pb.value.data());
            }
        }
    }

    #[test]
    fn ensemble_at_least_as_good_as_worst_member_on_blobs() {
        let (x, y) = blob_fixture(100, 37);
        let cfg = blob_config();
        let ens = train_ensemble::<f32>(&x, &y, &cfg, 3, 11, 1).unwrap();
        let acc_of = |pred: &[u8]| {
            pred.iter().zip(y.iter()).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
        };
        let ens_acc = acc_of(&ens.predict_rows_mask(&x, 1, y.len()).labels);
        let worst = ens
            .members
            .iter()
            .map(|m| acc_of(&m.predict(&x, y.len())))
            .fold(f64::INFINITY, f64::min);
        assert!(ens_acc >= worst, "ensemble {ens_acc} vs worst member {worst}");
    }

    #[test]
    fn prediction_is_row_independent() {
        let (x, y) = blob_fixture(32, 23);
        let cfg = blob_config();
        let ens = train_ensemble::<f32>(&x, &y, &cfg, 2, 7, 1).unwrap();
        let full = ens.predict_rows_mask(&x, 1, y.len());
        // predict the two halves separately and stitch
        let half = y.len() / 2;
        let a = ens.predict_rows_mask(&x[..half * 2], 1, half);
        let b = ens.predict_rows_mask(&x[half * 2..], 1, y.len() - half);
        let mut stitched = a.labels.clone();
        stitched.extend_from_slice(&b.labels);
        assert_eq!(full.labels, stitched);
    }

    #[test]
    fn ensemble_roundtrip_and_size() {
        let (x, y) = blob_fixture(30, 29);
        let mut cfg = blob_config();
        cfg.epochs = 1.0;
        let ens = train_ensemble::<f32>(&x, &y, &cfg, 2, 3, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("dseg_ens_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ens.dseg");
        save_ensemble(&ens, &path).unwrap();

        let meta = std::fs::metadata(&path).unwrap();
        assert_eq!(meta.len() as usize, expected_ensemble_size(&ens).unwrap());

        let loaded = load_ensemble::<f32>(&path, Some(2)).unwrap();
        for (a, b) in ens.members.iter().zip(loaded.members.iter()) {
            for (pa, pb) in a.params().iter().zip(b.params().iter()) {
                assert_eq!(pa.value.data(), pb.value.data());
            }
        }
        // input-dim validation at load time
        let err = load_ensemble::<f32>(&path, Some(99)).unwrap_err();
        assert!(err.to_string().contains("input_dim"), "{err}");

        // corrupted header rejected
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] ^= 0xFF;
        let bad = dir.join("bad.dseg");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_ensemble::<f32>(&bad, None).is_err());

        std::fs::remove_dir_all(&dir).ok();
    }
}
