//! Small configurable UNet noise predictor with tappable decoder blocks.
//!
//! Decoder blocks are numbered 1..=D from the deepest (lowest resolution)
//! to the shallowest. A tap is the block's final output, i.e. after the
//! skip concatenation and both convolutions of that block. Inference and
//! tapped inference share one forward path, so observing activations can
//! never change the prediction.

use crate::binio;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_backward, sinusoidal_embedding, Conv2d, GroupNorm, GroupNormCache, Linear, Param,
};
use crate::num::Real;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{checksum_f32, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Name of the pseudo-tensor that carries the architecture hyperparameters
/// inside a checkpoint, so a model can be rebuilt from the file alone.
const CONFIG_TENSOR: &str = "__config__";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub time_embedding_dim: usize,
    pub input_resolution: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.blocks_per_resolution == 0
            || self.time_embedding_dim == 0
            || self.input_resolution == 0
            || self.channel_multipliers.is_empty()
            || self.channel_multipliers.iter().any(|&m| m == 0)
        {
            return Err(Error::config("unet config values must be positive"));
        }
        let down_factor = 1usize << (self.channel_multipliers.len() - 1);
        if self.input_resolution % down_factor != 0 {
            return Err(Error::config(format!(
                "input_resolution {} not divisible by 2^{} = {}",
                self.input_resolution,
                self.channel_multipliers.len() - 1,
                down_factor
            )));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn decoder_block_count(&self) -> usize {
        self.channel_multipliers.len() * self.blocks_per_resolution
    }
}

/// Static description of one decoder block, derived from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderBlockInfo {
    /// 1-based index, deepest first.
    pub index: usize,
    /// Resolution level (0 = full resolution).
    pub level: usize,
    pub channels: usize,
    pub resolution: usize,
}

/// Walk the decoder structure implied by a config: block indices, levels,
/// channel counts and spatial resolutions.
pub fn decoder_walk(config: &UNetConfig) -> Vec<DecoderBlockInfo> {
    let channels = config.level_channels();
    let levels = config.channel_multipliers.len();
    let mut out = Vec::new();
    let mut index = 1;
    for li in (0..levels).rev() {
        for _ in 0..config.blocks_per_resolution {
            out.push(DecoderBlockInfo {
                index,
                level: li,
                channels: channels[li],
                resolution: config.input_resolution >> li,
            });
            index += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// residual block
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct ResBlock<T> {
    norm1: GroupNorm<T>,
    conv1: Conv2d<T>,
    time_proj: Linear<T>,
    norm2: GroupNorm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
    out_ch: usize,
}

#[derive(Clone, Debug)]
struct ResBlockTrace<T> {
    x: Tensor<T>,
    gn1: GroupNormCache<T>,
    n1: Tensor<T>,
    a1: Tensor<T>,
    gn2: GroupNormCache<T>,
    n2: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    fn new(name: &str, in_ch: usize, out_ch: usize, time_dim: usize, rng: &mut Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(&format!("{name}.norm1"), in_ch, rng),
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, rng),
            time_proj: Linear::new(&format!("{name}.temb"), time_dim, out_ch, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), out_ch, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng),
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&format!("{name}.skip"), in_ch, out_ch, 1, 1, 0, rng))
            } else {
                None
            },
            out_ch,
        }
    }

    fn forward(&self, x: &Tensor<T>, temb_act: &Tensor<T>) -> (Tensor<T>, ResBlockTrace<T>) {
        let (n1, gn1) = self.norm1.forward_train(x);
        let a1 = silu(&n1);
        let mut h = self.conv1.forward(&a1);
        let tp = self.time_proj.forward(temb_act.data(), 1);
        for c in 0..self.out_ch {
            let bias = tp[c];
            for v in h.channel_mut(c) {
                *v += bias;
            }
        }
        let (n2, gn2) = self.norm2.forward_train(&h);
        let a2 = silu(&n2);
        let mut out = self.conv2.forward(&a2);
        match &self.skip {
            Some(sc) => out.axpy(T::one(), &sc.forward(x)),
            None => out.axpy(T::one(), x),
        }
        let trace = ResBlockTrace {
            x: x.clone(),
            gn1,
            n1,
            a1,
            gn2,
            n2,
            a2,
        };
        (out, trace)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        p.extend(self.norm1.params());
        p.extend(self.conv1.params());
        p.extend(self.time_proj.params());
        p.extend(self.norm2.params());
        p.extend(self.conv2.params());
        if let Some(sc) = &self.skip {
            p.extend(sc.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        p.extend(self.norm1.params_mut());
        p.extend(self.conv1.params_mut());
        p.extend(self.time_proj.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.conv2.params_mut());
        if let Some(sc) = &mut self.skip {
            p.extend(sc.params_mut());
        }
        p
    }
}

// ---------------------------------------------------------------------------
// up / down sampling
// ---------------------------------------------------------------------------

fn nearest_upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels();
    let (h, w) = x.hw();
    let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let base = (y * 2) * (w * 2) + xx * 2;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + w * 2] = v;
                dst[base + w * 2 + 1] = v;
            }
        }
    }
    out
}

fn nearest_upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let c = grad.channels();
    let (h2, w2) = grad.hw();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = grad.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            for xx in 0..w {
                let base = (y * 2) * w2 + xx * 2;
                dst[y * w + xx] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct EncLevel<T> {
    blocks: Vec<ResBlock<T>>,
    down: Option<Conv2d<T>>,
}

#[derive(Clone, Debug)]
struct DecLevel<T> {
    blocks: Vec<ResBlock<T>>,
    up: Option<Conv2d<T>>,
}

#[derive(Clone, Debug)]
pub struct UNetModel<T> {
    pub config: UNetConfig,
    time_l1: Linear<T>,
    time_l2: Linear<T>,
    stem: Conv2d<T>,
    enc: Vec<EncLevel<T>>,
    middle: Vec<ResBlock<T>>,
    dec: Vec<DecLevel<T>>,
    head_norm: GroupNorm<T>,
    head_conv: Conv2d<T>,
}

/// All intermediate activations of one forward pass, in execution order.
pub struct UNetTrace<T> {
    temb_raw: Tensor<T>,
    t1: Tensor<T>,
    t1_act: Tensor<T>,
    temb: Tensor<T>,
    temb_act: Tensor<T>,
    x: Tensor<T>,
    enc_traces: Vec<Vec<ResBlockTrace<T>>>,
    down_inputs: Vec<Tensor<T>>,
    mid_traces: Vec<ResBlockTrace<T>>,
    dec_traces: Vec<Vec<ResBlockTrace<T>>>,
    up_inputs: Vec<Tensor<T>>,
    /// Decoder block outputs, index 0 = block 1 (deepest).
    pub decoder_outputs: Vec<Tensor<T>>,
    head_gn: GroupNormCache<T>,
    head_n: Tensor<T>,
    head_a: Tensor<T>,
}

/// Per-block activation taps: block index -> [C_b, h_b, w_b].
pub type ActivationTapResult<T> = BTreeMap<usize, Tensor<T>>;

pub fn build_unet<T: Real>(config: &UNetConfig, seed: u64) -> Result<UNetModel<T>> {
    config.validate()?;
    let mut rng = Rng::new(derive_seed(seed, "unet-init", 0));
    let channels = config.level_channels();
    let levels = channels.len();
    let tdim = config.time_embedding_dim;

    let time_l1 = Linear::new("time.l1", tdim, tdim, &mut rng);
    let time_l2 = Linear::new("time.l2", tdim, tdim, &mut rng);
    let stem = Conv2d::new("stem", 3, channels[0], 3, 1, 1, &mut rng);

    let mut enc = Vec::with_capacity(levels);
    for li in 0..levels {
        let mut blocks = Vec::new();
        for bi in 0..config.blocks_per_resolution {
            blocks.push(ResBlock::new(
                &format!("enc.{li}.{bi}"),
                channels[li],
                channels[li],
                tdim,
                &mut rng,
            ));
        }
        let down = if li + 1 < levels {
            Some(Conv2d::new(
                &format!("down.{li}"),
                channels[li],
                channels[li + 1],
                3,
                2,
                1,
                &mut rng,
            ))
        } else {
            None
        };
        enc.push(EncLevel { blocks, down });
    }

    let deepest = channels[levels - 1];
    let middle = vec![
        ResBlock::new("mid.0", deepest, deepest, tdim, &mut rng),
        ResBlock::new("mid.1", deepest, deepest, tdim, &mut rng),
    ];

    let mut dec = Vec::with_capacity(levels);
    for (pos, li) in (0..levels).rev().enumerate() {
        let mut blocks = Vec::new();
        for bi in 0..config.blocks_per_resolution {
            blocks.push(ResBlock::new(
                &format!("dec.{li}.{bi}"),
                channels[li] * 2,
                channels[li],
                tdim,
                &mut rng,
            ));
        }
        let up = if li > 0 {
            Some(Conv2d::new(
                &format!("up.{li}"),
                channels[li],
                channels[li - 1],
                3,
                1,
                1,
                &mut rng,
            ))
        } else {
            None
        };
        let _ = pos;
        dec.push(DecLevel { blocks, up });
    }

    let head_norm = GroupNorm::new("head.norm", channels[0], &mut rng);
    let head_conv = Conv2d::new("head.conv", channels[0], 3, 3, 1, 1, &mut rng);

    Ok(UNetModel {
        config: config.clone(),
        time_l1,
        time_l2,
        stem,
        enc,
        middle,
        dec,
        head_norm,
        head_conv,
    })
}

impl<T: Real> UNetModel<T> {
    pub fn decoder_block_count(&self) -> usize {
        self.config.decoder_block_count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// FNV checksum over all parameters, for provenance records.
    pub fn checksum(&self) -> u64 {
        let chunks: Vec<&[T]> = self.params().iter().map(|p| p.value.data()).collect();
        checksum_f32(&chunks)
    }

    fn check_input(&self, x: &Tensor<T>, t: usize) -> Result<()> {
        let r = self.config.input_resolution;
        if x.shape() != [3, r, r] {
            return Err(Error::dimension(
                format!("[3, {r}, {r}]"),
                format!("{:?}", x.shape()),
            ));
        }
        if t == 0 {
            return Err(Error::config("timestep must be >= 1"));
        }
        Ok(())
    }

    /// Single forward path used by plain inference, tapped inference and
    /// training. Returns the prediction plus the full trace.
    pub fn forward_traced(&self, x: &Tensor<T>, t: usize) -> Result<(Tensor<T>, UNetTrace<T>)> {
        self.check_input(x, t)?;
        let tdim = self.config.time_embedding_dim;
        let temb_raw = sinusoidal_embedding::<T>(t, tdim);
        let t1 = Tensor::from_vec(&[tdim], self.time_l1.forward(temb_raw.data(), 1))?;
        let t1_act = silu(&t1);
        let temb = Tensor::from_vec(&[tdim], self.time_l2.forward(t1_act.data(), 1))?;
        let temb_act = silu(&temb);

        let mut h = self.stem.forward(x);
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut enc_traces = Vec::with_capacity(self.enc.len());
        let mut down_inputs = Vec::new();
        for level in &self.enc {
            let mut traces = Vec::with_capacity(level.blocks.len());
            for block in &level.blocks {
                let (out, trace) = block.forward(&h, &temb_act);
                skips.push(out.clone());
                traces.push(trace);
                h = out;
            }
            enc_traces.push(traces);
            if let Some(down) = &level.down {
                down_inputs.push(h.clone());
                h = down.forward(&h);
            }
        }

        let mut mid_traces = Vec::with_capacity(self.middle.len());
        for block in &self.middle {
            let (out, trace) = block.forward(&h, &temb_act);
            mid_traces.push(trace);
            h = out;
        }

        let mut dec_traces = Vec::with_capacity(self.dec.len());
        let mut up_inputs = Vec::new();
        let mut decoder_outputs = Vec::with_capacity(self.decoder_block_count());
        for level in &self.dec {
            let mut traces = Vec::with_capacity(level.blocks.len());
            for block in &level.blocks {
                let skip = skips.pop().expect("skip stack underflow");
                let concat = Tensor::concat_channels(&[&h, &skip])?;
                let (out, trace) = block.forward(&concat, &temb_act);
                decoder_outputs.push(out.clone());
                traces.push(trace);
                h = out;
            }
            dec_traces.push(traces);
            if let Some(up) = &level.up {
                let upsampled = nearest_upsample2(&h);
                up_inputs.push(upsampled.clone());
                h = up.forward(&upsampled);
            }
        }

        let (head_n, head_gn) = self.head_norm.forward_train(&h);
        let head_a = silu(&head_n);
        let out = self.head_conv.forward(&head_a);

        let trace = UNetTrace {
            temb_raw,
            t1,
            t1_act,
            temb,
            temb_act,
            x: x.clone(),
            enc_traces,
            down_inputs,
            mid_traces,
            dec_traces,
            up_inputs,
            decoder_outputs,
            head_gn,
            head_n,
            head_a,
        };
        Ok((out, trace))
    }

    /// eps_hat = model(x_t, t).
    pub fn forward(&self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        Ok(self.forward_traced(x, t)?.0)
    }

    /// Forward plus activation taps for the requested decoder blocks.
    /// Tapping is observation only: the prediction comes from the same
    /// forward pass.
    pub fn forward_with_taps(
        &self,
        x: &Tensor<T>,
        t: usize,
        blocks: &[usize],
    ) -> Result<(Tensor<T>, ActivationTapResult<T>)> {
        let d = self.decoder_block_count();
        for &b in blocks {
            if b == 0 || b > d {
                return Err(Error::config(format!(
                    "unknown decoder block {b}; valid blocks are 1..={d}"
                )));
            }
        }
        let (out, trace) = self.forward_traced(x, t)?;
        let mut taps = BTreeMap::new();
        for &b in blocks {
            taps.insert(b, trace.decoder_outputs[b - 1].clone());
        }
        Ok((out, taps))
    }

    /// Backpropagate `grad_out` through a trace, accumulating parameter
    /// gradients. Returns the gradient with respect to the input image.
    pub fn backward(&mut self, trace: &UNetTrace<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut grad_temb_act = Tensor::zeros(trace.temb_act.shape());

        // head
        let grad_head_a = self.head_conv.backward(&trace.head_a, grad_out);
        let grad_head_n = silu_backward(&trace.head_n, &grad_head_a);
        let mut grad = self.head_norm.backward(&trace.head_gn, &grad_head_n);

        let n_skips: usize = self.enc.iter().map(|l| l.blocks.len()).sum();
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; n_skips];
        let mut dec_block_counter: usize = self
            .dec
            .iter()
            .map(|l| l.blocks.len())
            .sum::<usize>();

        // decoder levels in reverse execution order
        let mut up_idx = trace.up_inputs.len();
        for (li, level) in self.dec.iter_mut().enumerate().rev() {
            if let Some(up) = &mut level.up {
                up_idx -= 1;
                let g = up.backward(&trace.up_inputs[up_idx], &grad);
                grad = nearest_upsample2_backward(&g);
            }
            for (bi, block) in level.blocks.iter_mut().enumerate().rev() {
                dec_block_counter -= 1;
                let tr = &trace.dec_traces[li][bi];
                let grad_concat =
                    block_backward(block, tr, &grad, &trace.temb_act, &mut grad_temb_act);
                // split concat grad: first half -> main path, rest -> skip
                let c_main = grad_concat.channels() / 2;
                let (hh, ww) = grad_concat.hw();
                let mut gmain = Tensor::zeros(&[c_main, hh, ww]);
                let mut gskip = Tensor::zeros(&[c_main, hh, ww]);
                gmain
                    .data_mut()
                    .copy_from_slice(&grad_concat.data()[..c_main * hh * ww]);
                gskip
                    .data_mut()
                    .copy_from_slice(&grad_concat.data()[c_main * hh * ww..]);
                skip_grads[n_skips - 1 - dec_block_counter] = Some(gskip);
                grad = gmain;
            }
        }

        for (bi, block) in self.middle.iter_mut().enumerate().rev() {
            grad = block_backward(
                block,
                &trace.mid_traces[bi],
                &grad,
                &trace.temb_act,
                &mut grad_temb_act,
            );
        }

        // encoder levels in reverse execution order
        let mut push_idx = n_skips;
        for (li, level) in self.enc.iter_mut().enumerate().rev() {
            if let Some(down) = &mut level.down {
                let down_in = &trace.down_inputs[li];
                grad = down.backward(down_in, &grad);
            }
            for (bi, block) in level.blocks.iter_mut().enumerate().rev() {
                push_idx -= 1;
                if let Some(sg) = &skip_grads[push_idx] {
                    grad.axpy(T::one(), sg);
                }
                grad = block_backward(
                    block,
                    &trace.enc_traces[li][bi],
                    &grad,
                    &trace.temb_act,
                    &mut grad_temb_act,
                );
            }
        }
        let grad_x = self.stem.backward(&trace.x, &grad);

        // time-conditioning path
        let grad_temb = silu_backward(&trace.temb, &grad_temb_act);
        let g1 = self.time_l2.backward(trace.t1_act.data(), grad_temb.data(), 1);
        let g1 = silu_backward(&trace.t1, &Tensor::from_vec(&[g1.len()], g1).unwrap());
        self.time_l1.backward(trace.temb_raw.data(), g1.data(), 1);

        grad_x
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        p.extend(self.time_l1.params());
        p.extend(self.time_l2.params());
        p.extend(self.stem.params());
        for level in &self.enc {
            for b in &level.blocks {
                p.extend(b.params());
            }
            if let Some(d) = &level.down {
                p.extend(d.params());
            }
        }
        for b in &self.middle {
            p.extend(b.params());
        }
        for level in &self.dec {
            for b in &level.blocks {
                p.extend(b.params());
            }
            if let Some(u) = &level.up {
                p.extend(u.params());
            }
        }
        p.extend(self.head_norm.params());
        p.extend(self.head_conv.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        p.extend(self.time_l1.params_mut());
        p.extend(self.time_l2.params_mut());
        p.extend(self.stem.params_mut());
        for level in &mut self.enc {
            for b in &mut level.blocks {
                p.extend(b.params_mut());
            }
            if let Some(d) = &mut level.down {
                p.extend(d.params_mut());
            }
        }
        for b in &mut self.middle {
            p.extend(b.params_mut());
        }
        for level in &mut self.dec {
            for b in &mut level.blocks {
                p.extend(b.params_mut());
            }
            if let Some(u) = &mut level.up {
                p.extend(u.params_mut());
            }
        }
        p.extend(self.head_norm.params_mut());
        p.extend(self.head_conv.params_mut());
        p
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Cast the whole model to another scalar type (used by f64 oracles).
    pub fn cast<U: Real>(&self) -> UNetModel<U> {
        let mut other = build_unet::<U>(&self.config, 0).expect("config already validated");
        let src = self.params();
        let mut dst = other.params_mut();
        for (s, d) in src.iter().zip(dst.iter_mut()) {
            d.value = s.value.cast();
        }
        other
    }
}

/// ResBlock backward with the shared time embedding input supplied
/// explicitly (it lives in the UNet trace, not in each block trace).
fn block_backward<T: Real>(
    block: &mut ResBlock<T>,
    trace: &ResBlockTrace<T>,
    grad_out: &Tensor<T>,
    temb_act: &Tensor<T>,
    grad_temb_act: &mut Tensor<T>,
) -> Tensor<T> {
    let grad_a2 = block.conv2.backward(&trace.a2, grad_out);
    let grad_n2 = silu_backward(&trace.n2, &grad_a2);
    let grad_h = block.norm2.backward(&trace.gn2, &grad_n2);
    let mut grad_tp = vec![T::zero(); block.out_ch];
    for (c, g) in grad_tp.iter_mut().enumerate() {
        for v in grad_h.channel(c) {
            *g += *v;
        }
    }
    let grad_temb = block.time_proj.backward(temb_act.data(), &grad_tp, 1);
    for (acc, g) in grad_temb_act.data_mut().iter_mut().zip(grad_temb.iter()) {
        *acc += *g;
    }
    let grad_a1 = block.conv1.backward(&trace.a1, &grad_h);
    let grad_n1 = silu_backward(&trace.n1, &grad_a1);
    let mut grad_x = block.norm1.backward(&trace.gn1, &grad_n1);
    match &mut block.skip {
        Some(sc) => {
            let g = sc.backward(&trace.x, grad_out);
            grad_x.axpy(T::one(), &g);
        }
        None => grad_x.axpy(T::one(), grad_out),
    }
    grad_x
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

fn config_tensor<T: Real>(config: &UNetConfig) -> Tensor<T> {
    let mut vals = vec![
        config.base_channels as f64,
        config.channel_multipliers.len() as f64,
    ];
    vals.extend(config.channel_multipliers.iter().map(|&m| m as f64));
    vals.push(config.blocks_per_resolution as f64);
    vals.push(config.time_embedding_dim as f64);
    vals.push(config.input_resolution as f64);
    let data: Vec<T> = vals.into_iter().map(T::from_f64c).collect();
    Tensor::from_vec(&[data.len()], data).unwrap()
}

fn config_from_tensor<T: Real>(t: &Tensor<T>, path: &str) -> Result<UNetConfig> {
    let v: Vec<f64> = t.data().iter().map(|x| x.to_f64c()).collect();
    if v.len() < 5 {
        return Err(Error::load(path, "config tensor too short"));
    }
    let n_mult = v[1] as usize;
    if v.len() != 5 + n_mult {
        return Err(Error::load(path, "config tensor length mismatch"));
    }
    Ok(UNetConfig {
        base_channels: v[0] as usize,
        channel_multipliers: v[2..2 + n_mult].iter().map(|&m| m as usize).collect(),
        blocks_per_resolution: v[2 + n_mult] as usize,
        time_embedding_dim: v[3 + n_mult] as usize,
        input_resolution: v[4 + n_mult] as usize,
    })
}

/// Writes the "DSEG" checkpoint: magic, version, schedule triple
/// (u32 T, f64 beta_start, f64 beta_end), tensor count, named tensors.
/// Schedule vectors are rebuilt from the triple at load, never stored.
pub fn save_checkpoint<T: Real>(
    model: &UNetModel<T>,
    schedule: &NoiseSchedule<T>,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let p = path.display().to_string();
    let io_err = |e: std::io::Error| Error::io(p.clone(), e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    binio::write_u32(&mut w, CHECKPOINT_VERSION).map_err(io_err)?;
    binio::write_u32(&mut w, schedule.steps() as u32).map_err(io_err)?;
    let (bs, be) = schedule.beta_range();
    binio::write_f64(&mut w, bs).map_err(io_err)?;
    binio::write_f64(&mut w, be).map_err(io_err)?;

    let params = model.params();
    binio::write_u32(&mut w, (params.len() + 1) as u32).map_err(io_err)?;
    binio::write_tensor(&mut w, CONFIG_TENSOR, &config_tensor::<T>(&model.config))
        .map_err(io_err)?;
    for p in params {
        binio::write_tensor(&mut w, &p.name, &p.value).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(UNetModel<T>, NoiseSchedule<T>)> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::load(&p, "truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::load(&p, "bad magic (not a DSEG checkpoint)"));
    }
    let version = binio::read_u32(&mut r, &p)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::load(&p, format!("unsupported version {version}")));
    }
    let steps = binio::read_u32(&mut r, &p)? as usize;
    let beta_start = binio::read_f64(&mut r, &p)?;
    let beta_end = binio::read_f64(&mut r, &p)?;
    let schedule = crate::diffusion::build_schedule::<T>(steps, beta_start, beta_end)
        .map_err(|e| Error::load(&p, format!("bad schedule triple: {e}")))?;

    let count = binio::read_u32(&mut r, &p)? as usize;
    if count == 0 {
        return Err(Error::load(&p, "checkpoint holds no tensors"));
    }
    let (name, cfg_tensor) = binio::read_tensor::<_, T>(&mut r, &p)?;
    if name != CONFIG_TENSOR {
        return Err(Error::load(&p, "first tensor is not the config record"));
    }
    let config = config_from_tensor(&cfg_tensor, &p)?;
    let mut model = build_unet::<T>(&config, 0)?;
    {
        let mut params = model.params_mut();
        if params.len() != count - 1 {
            return Err(Error::load(
                &p,
                format!("expected {} tensors, file has {}", params.len(), count - 1),
            ));
        }
        for param in params.iter_mut() {
            let (name, tensor) = binio::read_tensor::<_, T>(&mut r, &p)?;
            if name != param.name {
                return Err(Error::load(
                    &p,
                    format!("tensor order mismatch: expected {}, got {name}", param.name),
                ));
            }
            if tensor.shape() != param.value.shape() {
                return Err(Error::load(
                    &p,
                    format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        param.value.shape(),
                        tensor.shape()
                    ),
                ));
            }
            param.value = tensor;
        }
    }
    // trailing garbage means a corrupt or mismatched file
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(p.clone(), e))? != 0 {
        return Err(Error::load(&p, "trailing bytes after tensor payload"));
    }
    Ok((model, schedule))
}

/// Expected checkpoint size in bytes, by enumeration of its records.
pub fn expected_checkpoint_size<T: Real>(model: &UNetModel<T>) -> usize {
    let header = 4 + 4 + 4 + 8 + 8 + 4;
    let cfg = config_tensor::<T>(&model.config);
    let mut total = header + binio::tensor_record_size(CONFIG_TENSOR, cfg.shape());
    for p in model.params() {
        total += binio::tensor_record_size(&p.name, p.value.shape());
    }
    total
}
