//! The main encoder `f` and the per-instrument encoders `g_c`.
//!
//! Both are the same network family: a stack of strided conv blocks (optional
//! batch normalization, rectifier), mean over time, then fully connected layers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{self, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::features::MelSegment;
use crate::nn::{col2im, gemm, im2col, uniform_init, Activation, ConvGeom, TensorEntry, TensorStore};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub conv: Vec<ConvBlock>,
    pub activation: Activation,
    pub batch_norm: bool,
    pub fc_hidden: Vec<usize>,
    pub output_dim: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl EncoderConfig {
    /// Four 3×3 stride-2 blocks (16, 32, 64, 128 channels), FC 256, output `output_dim`.
    pub fn standard(n_mels: usize, output_dim: usize) -> Self {
        Self::with_channels(n_mels, &[16, 32, 64, 128], 256, output_dim)
    }

    pub fn with_channels(n_mels: usize, channels: &[usize], fc: usize, output_dim: usize) -> Self {
        Self {
            n_mels,
            conv: channels
                .iter()
                .map(|&channels| ConvBlock {
                    channels,
                    kernel: [3, 3],
                    stride: [2, 2],
                })
                .collect(),
            activation: Activation::Relu,
            batch_norm: true,
            fc_hidden: vec![fc],
            output_dim,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Smallest frame count accepted: the product of the time strides.
    pub fn min_frames(&self) -> usize {
        self.conv.iter().map(|b| b.stride[1]).product::<usize>().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.output_dim == 0 {
            return Err(Error::param("n_mels and output_dim must be positive"));
        }
        if self.conv.iter().any(|b| b.channels == 0) || self.fc_hidden.iter().any(|&w| w == 0) {
            return Err(Error::param("layer widths must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return Err(Error::param("invalid batch-norm settings"));
        }
        let mut h = self.n_mels;
        for (i, b) in self.conv.iter().enumerate() {
            let cin = if i == 0 { 1 } else { self.conv[i - 1].channels };
            h = ConvGeom::new(cin, h, self.min_frames(), b.channels, b.kernel, b.stride)?.ho;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvIdx {
    weight: usize,
    /// Conv bias without normalization, BN shift with it.
    shift: usize,
    gamma: Option<usize>,
    running: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct FcIdx {
    weight: usize,
    bias: usize,
    n_in: usize,
    n_out: usize,
}

/// Intermediate values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub n: usize,
    convs: Vec<ConvTape>,
    pooled_hw: (usize, usize, usize),
    fc_inputs: Vec<Vec<f32>>,
    fc_outputs: Vec<Vec<f32>>,
    /// `n × output_dim` row-major.
    pub outputs: Vec<f32>,
}

impl Tape {
    pub fn row(&self, i: usize, dim: usize) -> &[f32] {
        &self.outputs[i * dim..(i + 1) * dim]
    }
}

#[derive(Debug, Clone)]
struct ConvTape {
    geom: ConvGeom,
    cols: Vec<f32>,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_mean: Vec<f32>,
    batch_var: Vec<f32>,
    act: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: TensorStore,
    /// Batch-norm running statistics.
    pub buffers: TensorStore,
    convs: Vec<ConvIdx>,
    fcs: Vec<FcIdx>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init", 0);
        let mut params = TensorStore::default();
        let mut buffers = TensorStore::default();
        let mut convs = Vec::new();
        let mut cin = 1;
        let mut h = config.n_mels;
        for (i, b) in config.conv.iter().enumerate() {
            let fan_in = cin * b.kernel[0] * b.kernel[1];
            let bound = (6.0 / fan_in as f32).sqrt();
            let weight = params.add(
                format!("conv{i}.weight"),
                vec![b.channels, cin, b.kernel[0], b.kernel[1]],
                uniform_init(&mut rng, bound),
            );
            let idx = if config.batch_norm {
                let gamma = params.add(format!("bn{i}.gamma"), vec![b.channels], |_| 1.0);
                let shift = params.add(format!("bn{i}.beta"), vec![b.channels], |_| 0.0);
                let rm = buffers.add(format!("bn{i}.running_mean"), vec![b.channels], |_| 0.0);
                let rv = buffers.add(format!("bn{i}.running_var"), vec![b.channels], |_| 1.0);
                ConvIdx {
                    weight,
                    shift,
                    gamma: Some(gamma),
                    running: Some((rm, rv)),
                }
            } else {
                let shift = params.add(format!("conv{i}.bias"), vec![b.channels], |_| 0.0);
                ConvIdx {
                    weight,
                    shift,
                    gamma: None,
                    running: None,
                }
            };
            convs.push(idx);
            h = ConvGeom::new(cin, h, config.min_frames(), b.channels, b.kernel, b.stride)?.ho;
            cin = b.channels;
        }
        let mut n_in = cin * h;
        let mut fcs = Vec::new();
        let widths: Vec<usize> = config.fc_hidden.iter().copied().chain([config.output_dim]).collect();
        for (j, &n_out) in widths.iter().enumerate() {
            let last = j + 1 == widths.len();
            let bound = if last {
                (1.0 / n_in as f32).sqrt()
            } else {
                (6.0 / n_in as f32).sqrt()
            };
            let weight = params.add(format!("fc{j}.weight"), vec![n_out, n_in], uniform_init(&mut rng, bound));
            let bias = params.add(format!("fc{j}.bias"), vec![n_out], |_| 0.0);
            fcs.push(FcIdx {
                weight,
                bias,
                n_in,
                n_out,
            });
            n_in = n_out;
        }
        Ok(Self {
            config,
            params,
            buffers,
            convs,
            fcs,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.data.len()
    }

    /// Sets the output layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.fcs.last().expect("encoder has an output layer").clone();
        self.params.get_mut(last.weight).fill(0.0);
        self.params.get_mut(last.bias).fill(0.0);
    }

    pub fn check_input(&self, mel: &MelSegment) -> Result<()> {
        if mel.n_mels != self.config.n_mels {
            return Err(Error::shape(format!(
                "expected {} mel bands, got {}",
                self.config.n_mels, mel.n_mels
            )));
        }
        if mel.n_frames < self.config.min_frames() {
            return Err(Error::shape(format!(
                "{} frames is below the minimum of {} for this stride stack",
                mel.n_frames,
                self.config.min_frames()
            )));
        }
        if mel.data.len() != mel.n_mels * mel.n_frames {
            return Err(Error::shape("mel data length does not match its shape"));
        }
        Ok(())
    }

    /// Inference on one segment using running statistics.
    pub fn encode(&self, mel: &MelSegment) -> Result<Vec<f32>> {
        Ok(self.forward(&[mel], false)?.0)
    }

    /// Inference on many segments; segments of equal length are batched together.
    pub fn encode_many(&self, mels: &[&MelSegment]) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 32;
        let mut out = vec![Vec::new(); mels.len()];
        let mut order: Vec<usize> = (0..mels.len()).collect();
        order.sort_by_key(|&i| (mels[i].n_frames, i));
        for group in order.chunk_by(|&a, &b| mels[a].n_frames == mels[b].n_frames) {
            for chunk in group.chunks(CHUNK) {
                let batch: Vec<&MelSegment> = chunk.iter().map(|&i| mels[i]).collect();
                let flat = self.forward(&batch, false)?.0;
                for (k, &i) in chunk.iter().enumerate() {
                    out[i] = flat[k * self.output_dim()..(k + 1) * self.output_dim()].to_vec();
                }
            }
        }
        Ok(out)
    }

    /// Training-mode forward: batch statistics, intermediate values recorded.
    pub fn forward_train(&self, mels: &[&MelSegment]) -> Result<Tape> {
        Ok(self.forward(mels, true)?.1.expect("training forward records a tape"))
    }

    fn forward(&self, mels: &[&MelSegment], train: bool) -> Result<(Vec<f32>, Option<Tape>)> {
        let n = mels.len();
        if n == 0 {
            return Err(Error::shape("empty batch"));
        }
        for m in mels {
            self.check_input(m)?;
        }
        let frames = mels[0].n_frames;
        if mels.iter().any(|m| m.n_frames != frames) {
            return Err(Error::shape("all segments in a batch must have the same frame count"));
        }
        if train && self.config.batch_norm && n < 2 {
            return Err(Error::shape("batch normalization needs at least two segments"));
        }
        let mut x: Vec<f32> = mels.iter().flat_map(|m| m.data.iter().copied()).collect();
        let (mut cin, mut h, mut w) = (1, self.config.n_mels, frames);
        let mut conv_tapes = Vec::new();
        for (block, idx) in self.config.conv.iter().zip(&self.convs) {
            let g = ConvGeom::new(cin, h, w, block.channels, block.kernel, block.stride)?;
            let (k, p) = (g.k(), g.p());
            let mut cols = vec![0.0f32; n * k * p];
            let mut y = vec![0.0f32; n * g.out_len()];
            let weight = self.params.get(idx.weight);
            for s in 0..n {
                let cs = &mut cols[s * k * p..(s + 1) * k * p];
                im2col(&g, &x[s * g.in_len()..(s + 1) * g.in_len()], cs);
                gemm(g.cout, k, p, weight, false, cs, false, &mut y[s * g.out_len()..(s + 1) * g.out_len()], 0.0);
            }
            let shift = self.params.get(idx.shift);
            let mut tape = ConvTape {
                geom: g,
                cols: Vec::new(),
                xhat: Vec::new(),
                inv_std: Vec::new(),
                batch_mean: Vec::new(),
                batch_var: Vec::new(),
                act: Vec::new(),
            };
            match idx.gamma {
                None => {
                    for s in 0..n {
                        for c in 0..g.cout {
                            let o = s * g.out_len() + c * p;
                            y[o..o + p].iter_mut().for_each(|v| *v += shift[c]);
                        }
                    }
                }
                Some(gi) => {
                    let gamma = self.params.get(gi);
                    let (mean, var) = if train {
                        channel_moments(&y, n, g.cout, p)
                    } else {
                        let (rm, rv) = idx.running.expect("bn buffers");
                        (self.buffers.get(rm).to_vec(), self.buffers.get(rv).to_vec())
                    };
                    let inv_std: Vec<f32> = var
                        .iter()
                        .map(|v| (1.0 / (*v as f64 + self.config.bn_eps as f64).sqrt()) as f32)
                        .collect();
                    for s in 0..n {
                        for c in 0..g.cout {
                            let o = s * g.out_len() + c * p;
                            for v in &mut y[o..o + p] {
                                *v = (*v - mean[c]) * inv_std[c];
                            }
                        }
                    }
                    if train {
                        tape.xhat = y.clone();
                    }
                    for s in 0..n {
                        for c in 0..g.cout {
                            let o = s * g.out_len() + c * p;
                            for v in &mut y[o..o + p] {
                                *v = gamma[c] * *v + shift[c];
                            }
                        }
                    }
                    tape.inv_std = inv_std;
                    tape.batch_mean = mean;
                    tape.batch_var = var;
                }
            }
            let act = self.config.activation;
            y.iter_mut().for_each(|v| *v = act.apply(*v));
            if train {
                tape.cols = cols;
                tape.act = y.clone();
                conv_tapes.push(tape);
            }
            x = y;
            (cin, h, w) = (g.cout, g.ho, g.wo);
        }

        // Mean over time for every (channel, mel-row) pair.
        let feat = cin * h;
        let mut z = vec![0.0f32; n * feat];
        for s in 0..n {
            for r in 0..feat {
                let row = &x[s * feat * w + r * w..s * feat * w + (r + 1) * w];
                z[s * feat + r] = (row.iter().map(|&v| v as f64).sum::<f64>() / w as f64) as f32;
            }
        }

        let mut fc_inputs = Vec::new();
        let mut fc_outputs = Vec::new();
        for (j, fc) in self.fcs.iter().enumerate() {
            let mut y = vec![0.0f32; n * fc.n_out];
            let bias = self.params.get(fc.bias);
            for s in 0..n {
                y[s * fc.n_out..(s + 1) * fc.n_out].copy_from_slice(bias);
            }
            gemm(n, fc.n_in, fc.n_out, &z, false, self.params.get(fc.weight), true, &mut y, 1.0);
            if j + 1 < self.fcs.len() {
                let act = self.config.activation;
                y.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            if train {
                fc_inputs.push(std::mem::take(&mut z));
                fc_outputs.push(y.clone());
            }
            z = y;
        }
        let tape = train.then(|| Tape {
            n,
            convs: conv_tapes,
            pooled_hw: (cin, h, w),
            fc_inputs,
            fc_outputs,
            outputs: z.clone(),
        });
        Ok((z, tape))
    }

    /// Gradient of `Σ d_out · outputs` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, d_out: &[f32]) -> Vec<f32> {
        let n = tape.n;
        assert_eq!(d_out.len(), n * self.output_dim());
        let mut grads = vec![0.0f32; self.num_params()];
        let act = self.config.activation;
        let mut dz = d_out.to_vec();
        for j in (0..self.fcs.len()).rev() {
            let fc = &self.fcs[j];
            if j + 1 < self.fcs.len() {
                for (d, &y) in dz.iter_mut().zip(&tape.fc_outputs[j]) {
                    *d *= act.grad_from_output(y);
                }
            }
            let x = &tape.fc_inputs[j];
            let wr = self.params.range(fc.weight);
            gemm(fc.n_out, n, fc.n_in, &dz, true, x, false, &mut grads[wr], 1.0);
            let br = self.params.range(fc.bias);
            for s in 0..n {
                for (g, d) in grads[br.clone()].iter_mut().zip(&dz[s * fc.n_out..(s + 1) * fc.n_out]) {
                    *g += d;
                }
            }
            let mut dx = vec![0.0f32; n * fc.n_in];
            gemm(n, fc.n_out, fc.n_in, &dz, false, self.params.get(fc.weight), false, &mut dx, 0.0);
            dz = dx;
        }

        let (c_last, h_last, w_last) = tape.pooled_hw;
        let feat = c_last * h_last;
        let mut dy = vec![0.0f32; n * feat * w_last];
        let inv_w = 1.0 / w_last as f32;
        for s in 0..n {
            for r in 0..feat {
                let v = dz[s * feat + r] * inv_w;
                dy[(s * feat + r) * w_last..(s * feat + r + 1) * w_last].fill(v);
            }
        }

        for i in (0..self.convs.len()).rev() {
            let idx = &self.convs[i];
            let t = &tape.convs[i];
            let g = t.geom;
            let (k, p) = (g.k(), g.p());
            for (d, &a) in dy.iter_mut().zip(&t.act) {
                *d *= act.grad_from_output(a);
            }
            match idx.gamma {
                None => {
                    let br = self.params.range(idx.shift);
                    for s in 0..n {
                        for c in 0..g.cout {
                            let o = s * g.out_len() + c * p;
                            grads[br.start + c] += sum_f64(&dy[o..o + p]) as f32;
                        }
                    }
                }
                Some(gi) => {
                    let gamma = self.params.get(gi);
                    let m = (n * p) as f64;
                    for c in 0..g.cout {
                        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
                        for s in 0..n {
                            let o = s * g.out_len() + c * p;
                            for q in o..o + p {
                                sdy += dy[q] as f64;
                                sdyx += dy[q] as f64 * t.xhat[q] as f64;
                            }
                        }
                        grads[self.params.range(idx.shift).start + c] += sdy as f32;
                        grads[self.params.range(gi).start + c] += sdyx as f32;
                        let scale = gamma[c] as f64 * t.inv_std[c] as f64 / m;
                        for s in 0..n {
                            let o = s * g.out_len() + c * p;
                            for q in o..o + p {
                                dy[q] = (scale * (m * dy[q] as f64 - sdy - t.xhat[q] as f64 * sdyx)) as f32;
                            }
                        }
                    }
                }
            }
            let wr = self.params.range(idx.weight);
            let weight = self.params.get(idx.weight);
            let mut dx = if i > 0 { vec![0.0f32; n * g.in_len()] } else { Vec::new() };
            let mut dcols = vec![0.0f32; k * p];
            for s in 0..n {
                let dys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
                let cs = &t.cols[s * k * p..(s + 1) * k * p];
                gemm(g.cout, p, k, dys, false, cs, true, &mut grads[wr.clone()], 1.0);
                if i > 0 {
                    gemm(k, g.cout, p, weight, true, dys, false, &mut dcols, 0.0);
                    col2im(&g, &dcols, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
                }
            }
            dy = dx;
        }
        grads
    }

    /// Folds the batch statistics recorded in `tape` into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        let mom = self.config.bn_momentum;
        for (idx, t) in self.convs.iter().zip(&tape.convs) {
            let Some((rm, rv)) = idx.running else { continue };
            let count = (tape.n * t.geom.p()) as f32;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (r, &m) in self.buffers.get_mut(rm).iter_mut().zip(&t.batch_mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            for (r, &v) in self.buffers.get_mut(rv).iter_mut().zip(&t.batch_var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
        }
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = CheckpointHeader {
            meta: meta.clone(),
            config: self.config.clone(),
            params: self.params.entries.clone(),
            buffers: self.buffers.entries.clone(),
        };
        let mut payload = self.params.data.clone();
        payload.extend_from_slice(&self.buffers.data);
        binfmt::write_file(path, CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (header, payload): (CheckpointHeader, Vec<f32>) = binfmt::read_file(path, CHECKPOINT_MAGIC)?;
        let mut enc = Encoder::new(header.config, 0)?;
        if enc.params.entries != header.params || enc.buffers.entries != header.buffers {
            return Err(Error::Checkpoint(format!(
                "{}: tensor layout does not match the stored config",
                path.display()
            )));
        }
        let np = enc.params.data.len();
        if payload.len() != np + enc.buffers.data.len() {
            return Err(Error::Checkpoint(format!("{}: payload size mismatch", path.display())));
        }
        enc.params.data.copy_from_slice(&payload[..np]);
        enc.buffers.data.copy_from_slice(&payload[np..]);
        Ok((enc, header.meta))
    }
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn channel_moments(y: &[f32], n: usize, cout: usize, p: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (n * p) as f64;
    let mut mean = vec![0.0f32; cout];
    let mut var = vec![0.0f32; cout];
    for c in 0..cout {
        let mut s = 0.0f64;
        for b in 0..n {
            s += sum_f64(&y[(b * cout + c) * p..(b * cout + c + 1) * p]);
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for b in 0..n {
            for &v in &y[(b * cout + c) * p..(b * cout + c + 1) * p] {
                ss += (v as f64 - mu).powi(2);
            }
        }
        mean[c] = mu as f32;
        var[c] = (ss / m) as f32;
    }
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub condition: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    config: EncoderConfig,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

/// An individual-instrument network `g_c` with output width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentEncoder {
    pub condition: usize,
    pub encoder: Encoder,
}

impl InstrumentEncoder {
    pub fn new(condition: usize, config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            condition,
            encoder: Encoder::new(config, seed)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, mel: &MelSegment) -> Result<Vec<f32>> {
        self.encoder.encode(mel)
    }
}

/// A length `C·D` vector whose `c`-th block of `D` entries belongs to condition `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub num_conditions: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(values: Vec<f32>, num_conditions: usize, dim: usize) -> Result<Self> {
        if values.len() != num_conditions * dim {
            return Err(Error::shape(format!(
                "embedding of length {} is not {num_conditions}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("embedding has non-finite entries"));
        }
        Ok(Self {
            values,
            num_conditions,
            dim,
        })
    }

    pub fn subspace(&self, c: usize) -> &[f32] {
        &self.values[c * self.dim..(c + 1) * self.dim]
    }

    pub fn from_subspaces(blocks: &[&[f32]]) -> Result<Self> {
        let dim = blocks.first().map_or(0, |b| b.len());
        if blocks.iter().any(|b| b.len() != dim) {
            return Err(Error::shape("subspace blocks differ in width"));
        }
        Self::new(blocks.concat(), blocks.len(), dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(batch_norm: bool) -> EncoderConfig {
        let mut cfg = EncoderConfig::with_channels(8, &[3, 4], 6, 10);
        cfg.batch_norm = batch_norm;
        cfg
    }

    fn mel(n_mels: usize, n_frames: usize, seed: usize) -> MelSegment {
        MelSegment {
            n_mels,
            n_frames,
            data: (0..n_mels * n_frames)
                .map(|i| (((i + 7 * seed) * 2654435761usize % 1000) as f32 / 500.0) - 1.0)
                .collect(),
            stats: None,
        }
    }

    #[test]
    fn output_width_is_independent_of_duration() {
        let enc = Encoder::new(tiny(true), 1).unwrap();
        assert_eq!(enc.encode(&mel(8, 94, 0)).unwrap().len(), 10);
        assert_eq!(enc.encode(&mel(8, 313, 0)).unwrap().len(), 10);
    }

    #[test]
    fn too_few_frames_or_wrong_bands_is_a_shape_error() {
        let enc = Encoder::new(tiny(true), 1).unwrap();
        assert!(matches!(enc.encode(&mel(8, 3, 0)), Err(Error::Shape(_))));
        assert!(enc.encode(&mel(8, 4, 0)).is_ok());
        assert!(matches!(enc.encode(&mel(9, 40, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_layer_gives_zero_embedding() {
        let mut enc = Encoder::new(tiny(false), 3).unwrap();
        enc.zero_output_layer();
        assert!(enc.encode(&mel(8, 20, 2)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_inference_matches_single() {
        let enc = Encoder::new(tiny(true), 5).unwrap();
        let ms: Vec<MelSegment> = (0..5).map(|s| mel(8, 16 + (s % 2) * 8, s)).collect();
        let refs: Vec<&MelSegment> = ms.iter().collect();
        let many = enc.encode_many(&refs).unwrap();
        for (m, e) in ms.iter().zip(&many) {
            let single = enc.encode(m).unwrap();
            for (a, b) in single.iter().zip(e) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }
    }

    fn check_gradients(batch_norm: bool) {
        let enc = Encoder::new(tiny(batch_norm), 9).unwrap();
        let ms: Vec<MelSegment> = (0..3).map(|s| mel(8, 12, s)).collect();
        let refs: Vec<&MelSegment> = ms.iter().collect();
        let tape = enc.forward_train(&refs).unwrap();
        let d_out: Vec<f32> = (0..tape.outputs.len()).map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0).collect();
        let loss = |e: &Encoder| -> f64 {
            let t = e.forward_train(&refs).unwrap();
            t.outputs.iter().zip(&d_out).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let grads = enc.backward(&tape, &d_out);
        let eps = 1e-2f32;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in (0..enc.num_params()).step_by(3) {
            let mut plus = enc.clone();
            plus.params.data[i] += eps;
            let mut minus = enc.clone();
            minus.params.data[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
            num += (fd - grads[i] as f64).powi(2);
            den += fd.powi(2).max((grads[i] as f64).powi(2));
        }
        let rel = (num / den).sqrt();
        assert!(rel < 2e-2, "relative gradient error {rel}");
    }

    #[test]
    fn gradients_match_finite_differences_with_batch_norm() {
        check_gradients(true);
    }

    #[test]
    fn gradients_match_finite_differences_without_batch_norm() {
        check_gradients(false);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut enc = Encoder::new(tiny(true), 11).unwrap();
        let ms: Vec<MelSegment> = (0..4).map(|s| mel(8, 12, s)).collect();
        let refs: Vec<&MelSegment> = ms.iter().collect();
        let tape = enc.forward_train(&refs).unwrap();
        enc.update_running_stats(&tape);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let meta = CheckpointMeta {
            kind: "main".into(),
            seed: 11,
            step: 3,
            condition: None,
        };
        enc.save(&path, &meta).unwrap();
        let (back, m) = Encoder::load(&path).unwrap();
        assert_eq!(m, meta);
        let a = enc.encode(&ms[0]).unwrap();
        let b = back.encode(&ms[0]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn subspace_slices_concatenate_back() {
        let e = Embedding::new((0..10).map(|v| v as f32).collect(), 5, 2).unwrap();
        let blocks: Vec<&[f32]> = (0..5).map(|c| e.subspace(c)).collect();
        assert_eq!(e.subspace(2), &[4.0, 5.0]);
        assert_eq!(Embedding::from_subspaces(&blocks).unwrap(), e);
    }
}
