//! A small fully-convolutional predictor with hand-rolled reverse-mode
//! differentiation: conv / relu / nearest-upsample layers over channel-major
//! f64 volumes, He init, classical-momentum SGD and a tagged binary
//! checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RealLabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kernel: usize, in_channels: usize, out_channels: usize, stride: usize },
    Relu,
    Upsample { factor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    /// Six 3x3 convolutions, 16→32→32→32→16→1 channels, stride 2 on the
    /// second layer (downsample factor 2), ReLU between convs. The output
    /// layer stays linear: background labels must be free to go negative,
    /// and a rectified output would zero their gradient permanently once
    /// every pre-activation dips below zero.
    fn default() -> Self {
        let widths = [(3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 32, 1), (32, 16, 1), (16, 1, 1)];
        let mut layers = Vec::new();
        for (i, (ic, oc, stride)) in widths.into_iter().enumerate() {
            layers.push(LayerSpec::Conv { kernel: 3, in_channels: ic, out_channels: oc, stride });
            if i + 1 < widths.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        NetConfig { layers, input_channels: 3, init_seed: 0 }
    }
}

impl NetConfig {
    /// Channel chaining and layer sanity, without the predictor-only
    /// output-shape requirements (the verification head reuses this type for
    /// a multi-channel head without a final activation).
    pub fn validate_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::domain("network needs at least one layer"));
        }
        if self.input_channels == 0 {
            return Err(Error::domain("input_channels must be positive"));
        }
        let mut channels = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { kernel, in_channels, out_channels, stride } => {
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::domain(format!(
                            "layer {i}: kernel must be odd and positive, got {kernel}"
                        )));
                    }
                    if stride == 0 || out_channels == 0 {
                        return Err(Error::domain(format!("layer {i}: zero stride or channels")));
                    }
                    if in_channels != channels {
                        return Err(Error::dimension(format!(
                            "layer {i}: expects {in_channels} input channels, gets {channels}"
                        )));
                    }
                    channels = out_channels;
                }
                LayerSpec::Relu => {}
                LayerSpec::Upsample { factor } => {
                    if factor == 0 {
                        return Err(Error::domain(format!("layer {i}: zero upsample factor")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Full predictor contract: one output channel, a linear (conv) output
    /// layer, and a well-defined integer downsample factor. A rectified
    /// output would pin background labels at zero and kill their gradient,
    /// so the trailing layer must be the conv itself.
    pub fn validate_predictor(&self) -> Result<()> {
        self.validate_chain()?;
        if self.out_channels() != 1 {
            return Err(Error::domain("predictor must end with exactly one channel"));
        }
        let last_computing =
            self.layers.iter().rev().find(|l| !matches!(l, LayerSpec::Upsample { .. }));
        if !matches!(last_computing, Some(LayerSpec::Conv { .. })) {
            return Err(Error::domain(
                "predictor output must be linear (a conv, optionally upsampled)",
            ));
        }
        self.downsample_factor().map(|_| ())
    }

    pub fn out_channels(&self) -> usize {
        let mut channels = self.input_channels;
        for layer in &self.layers {
            if let LayerSpec::Conv { out_channels, .. } = layer {
                channels = *out_channels;
            }
        }
        channels
    }

    /// Product of conv strides divided by the product of upsample factors.
    pub fn downsample_factor(&self) -> Result<usize> {
        let mut down = 1usize;
        let mut up = 1usize;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { stride, .. } => down *= stride,
                LayerSpec::Upsample { factor } => up *= factor,
                LayerSpec::Relu => {}
            }
        }
        if down % up != 0 {
            return Err(Error::domain(format!(
                "stride product {down} not divisible by upsample product {up}"
            )));
        }
        Ok(down / up)
    }
}

/// Channel-major activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Volume { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_image(image: &ImageGrid) -> Self {
        Volume {
            channels: image.channels(),
            height: image.height(),
            width: image.width(),
            data: image.data().to_vec(),
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Weights and bias of one conv layer; weights laid out
/// [out][in][ky][kx], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All trainable parameters plus the config they were built for.  The
/// revision counter ties tapes to the parameter values they were recorded
/// with; `sgd_step` bumps it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub cfg: NetConfig,
    pub convs: Vec<ConvParams>,
    revision: u64,
}

pub type ParamGrads = Vec<ConvParams>;

impl ParamSet {
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.convs
            .iter()
            .map(|c| ConvParams {
                weight: vec![0.0; c.weight.len()],
                bias: vec![0.0; c.bias.len()],
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }
}

/// He fan-in initialization: weights from N(0, 2/fan_in), biases zero,
/// deterministic in the config's init_seed.
pub fn init(cfg: &NetConfig) -> Result<ParamSet> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    cfg.validate_chain()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut convs = Vec::new();
    for layer in &cfg.layers {
        if let LayerSpec::Conv { kernel, in_channels, out_channels, .. } = *layer {
            let fan_in = (in_channels * kernel * kernel) as f64;
            let normal = rand_distr::Normal::new(0.0, (2.0 / fan_in).sqrt())
                .map_err(|e| Error::domain(e.to_string()))?;
            let weight =
                (0..out_channels * in_channels * kernel * kernel)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
            convs.push(ConvParams { weight, bias: vec![0.0; out_channels] });
        }
    }
    Ok(ParamSet { cfg: cfg.clone(), convs, revision: 0 })
}

/// Activation record from a forward pass: the input of every layer, in
/// order, tagged with the parameter revision it was recorded under.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Volume>,
    output_shape: (usize, usize, usize),
    revision: u64,
}

impl Tape {
    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.output_shape
    }
}

fn conv_forward(input: &Volume, p: &ConvParams, kernel: usize, out_channels: usize, stride: usize) -> Result<Volume> {
    let (ih, iw) = (input.height, input.width);
    if stride > 1 && (ih % stride != 0 || iw % stride != 0) {
        return Err(Error::dimension(format!(
            "input {ih}x{iw} not divisible by stride {stride}"
        )));
    }
    let pad = (kernel - 1) / 2;
    let (oh, ow) = (ih / stride, iw / stride);
    let mut out = Volume::zeros(out_channels, oh, ow);
    let in_c = input.channels;
    for oc in 0..out_channels {
        let out_plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
        out_plane.fill(p.bias[oc]);
        for ic in 0..in_c {
            let in_plane = input.plane(ic);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let w = p.weight[((oc * in_c + ic) * kernel + ky) * kernel + kx];
                    let off_x = kx as isize - pad as isize;
                    let off_y = ky as isize - pad as isize;
                    // valid output column range so ix = ox*stride+off_x stays in bounds
                    let ox_lo = if off_x < 0 {
                        ((-off_x) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox_hi = (((iw as isize - 1 - off_x) / stride as isize) + 1)
                        .clamp(0, ow as isize) as usize;
                    for oy in 0..oh {
                        let iy = oy as isize * stride as isize + off_y;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * iw..iy as usize * iw + iw];
                        let out_row = &mut out_plane[oy * ow..oy * ow + ow];
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * stride) as isize + off_x;
                            out_row[ox] += w * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward through one conv layer: accumulates weight/bias grads into
/// `gp` and returns the gradient with respect to the layer input.
fn conv_backward(
    input: &Volume,
    grad_out: &Volume,
    p: &ConvParams,
    gp: &mut ConvParams,
    kernel: usize,
    stride: usize,
) -> Volume {
    let (ih, iw) = (input.height, input.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let pad = (kernel - 1) / 2;
    let in_c = input.channels;
    let out_c = grad_out.channels;
    let mut grad_in = Volume::zeros(in_c, ih, iw);
    for oc in 0..out_c {
        let go_plane = grad_out.plane(oc);
        gp.bias[oc] += go_plane.iter().sum::<f64>();
        for ic in 0..in_c {
            let in_plane = input.plane(ic);
            let gi_plane = &mut grad_in.data[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let widx = ((oc * in_c + ic) * kernel + ky) * kernel + kx;
                    let w = p.weight[widx];
                    let off_x = kx as isize - pad as isize;
                    let off_y = ky as isize - pad as isize;
                    let ox_lo = if off_x < 0 {
                        ((-off_x) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox_hi = (((iw as isize - 1 - off_x) / stride as isize) + 1)
                        .clamp(0, ow as isize) as usize;
                    let mut wsum = 0.0;
                    for oy in 0..oh {
                        let iy = oy as isize * stride as isize + off_y;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * iw..iy as usize * iw + iw];
                        let gi_row = &mut gi_plane[iy as usize * iw..iy as usize * iw + iw];
                        let go_row = &go_plane[oy * ow..oy * ow + ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * stride) as isize + off_x) as usize;
                            let g = go_row[ox];
                            wsum += g * in_row[ix];
                            gi_row[ix] += g * w;
                        }
                    }
                    gp.weight[widx] += wsum;
                }
            }
        }
    }
    grad_in
}

fn upsample_forward(input: &Volume, factor: usize) -> Volume {
    let (oh, ow) = (input.height * factor, input.width * factor);
    let mut out = Volume::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        let ip = input.plane(c);
        let op = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let in_row = &ip[(y / factor) * input.width..(y / factor + 1) * input.width];
            let out_row = &mut op[y * ow..y * ow + ow];
            for x in 0..ow {
                out_row[x] = in_row[x / factor];
            }
        }
    }
    out
}

fn upsample_backward(grad_out: &Volume, factor: usize) -> Volume {
    let (ih, iw) = (grad_out.height / factor, grad_out.width / factor);
    let mut grad_in = Volume::zeros(grad_out.channels, ih, iw);
    for c in 0..grad_out.channels {
        let gp = grad_out.plane(c);
        let gi = &mut grad_in.data[c * ih * iw..(c + 1) * ih * iw];
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                gi[(y / factor) * iw + x / factor] += gp[y * grad_out.width + x];
            }
        }
    }
    grad_in
}

/// Run the network on an arbitrary volume; used directly by the
/// verification head and via `forward` for the predictor.
pub fn forward_volume(params: &ParamSet, input: &Volume) -> Result<(Volume, Tape)> {
    if input.channels != params.cfg.input_channels {
        return Err(Error::dimension(format!(
            "input has {} channels, network expects {}",
            input.channels, params.cfg.input_channels
        )));
    }
    let mut current = input.clone();
    let mut inputs = Vec::with_capacity(params.cfg.layers.len());
    let mut conv_idx = 0;
    for layer in &params.cfg.layers {
        inputs.push(current.clone());
        current = match *layer {
            LayerSpec::Conv { kernel, out_channels, stride, .. } => {
                let out = conv_forward(&current, &params.convs[conv_idx], kernel, out_channels, stride)?;
                conv_idx += 1;
                out
            }
            LayerSpec::Relu => {
                let mut out = current;
                for v in &mut out.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            LayerSpec::Upsample { factor } => upsample_forward(&current, factor),
        };
    }
    let shape = (current.channels, current.height, current.width);
    Ok((current, Tape { inputs, output_shape: shape, revision: params.revision }))
}

/// Predictor forward pass: image in, non-negative label map out at
/// 1/downsample_factor of the input resolution.
pub fn forward(params: &ParamSet, image: &ImageGrid) -> Result<(RealLabelMap, Tape)> {
    params.cfg.validate_predictor()?;
    let (out, tape) = forward_volume(params, &Volume::from_image(image))?;
    debug_assert_eq!(out.channels, 1);
    let map = RealLabelMap::new(out.height, out.width, out.data)
        .map_err(|_| Error::numeric("network produced non-finite outputs"))?;
    Ok((map, tape))
}

/// Exact reverse-mode gradients for every parameter given dL/d(output).
/// Rejects tapes recorded under a different parameter revision.
pub fn backward(params: &ParamSet, tape: &Tape, grad_out: &[f64]) -> Result<ParamGrads> {
    if tape.revision != params.revision {
        return Err(Error::domain(format!(
            "stale tape: recorded at revision {}, parameters at {}",
            tape.revision, params.revision
        )));
    }
    let (c, h, w) = tape.output_shape;
    if grad_out.len() != c * h * w {
        return Err(Error::dimension(format!(
            "gradient length {} does not match output {}x{}x{}",
            grad_out.len(),
            c,
            h,
            w
        )));
    }
    let mut grads = params.zero_grads();
    let mut grad = Volume { channels: c, height: h, width: w, data: grad_out.to_vec() };
    let mut conv_idx = params.convs.len();
    for (layer, input) in params.cfg.layers.iter().zip(&tape.inputs).rev() {
        grad = match *layer {
            LayerSpec::Conv { kernel, stride, .. } => {
                conv_idx -= 1;
                conv_backward(input, &grad, &params.convs[conv_idx], &mut grads[conv_idx], kernel, stride)
            }
            LayerSpec::Relu => {
                let mut g = grad;
                for (gv, &iv) in g.data.iter_mut().zip(&input.data) {
                    if iv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            LayerSpec::Upsample { factor } => upsample_backward(&grad, factor),
        };
    }
    Ok(grads)
}

/// Optimizer state: classical momentum buffers plus the hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<ConvParams>,
}

impl OptState {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::domain("momentum must lie in [0,1)"));
        }
        if weight_decay < 0.0 {
            return Err(Error::domain("weight decay must be non-negative"));
        }
        Ok(OptState { lr, momentum, weight_decay, buffers: params.zero_grads() })
    }
}

/// One classical-momentum update: buf ← momentum·buf + grad + wd·param,
/// param ← param − lr·buf.  Errors on non-finite gradients.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamGrads, opt: &mut OptState) -> Result<()> {
    if grads.len() != params.convs.len() || opt.buffers.len() != params.convs.len() {
        return Err(Error::dimension("gradient/buffer layer count mismatch"));
    }
    for (li, ((p, g), b)) in params.convs.iter_mut().zip(grads).zip(&mut opt.buffers).enumerate() {
        if p.weight.len() != g.weight.len() || p.bias.len() != g.bias.len() {
            return Err(Error::dimension(format!("conv {li}: gradient shape mismatch")));
        }
        let update = |ps: &mut [f64], gs: &[f64], bs: &mut [f64]| -> Result<()> {
            for ((pv, &gv), bv) in ps.iter_mut().zip(gs).zip(bs.iter_mut()) {
                if !gv.is_finite() {
                    return Err(Error::numeric(format!("non-finite gradient in conv {li}")));
                }
                *bv = opt.momentum * *bv + gv + opt.weight_decay * *pv;
                *pv -= opt.lr * *bv;
            }
            Ok(())
        };
        update(&mut p.weight, &g.weight, &mut b.weight)?;
        update(&mut p.bias, &g.bias, &mut b.bias)?;
    }
    params.revision += 1;
    Ok(())
}

/// Checkpoint container: params, optimizer state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub opt: OptState,
    pub step: u64,
}

const CKPT_MAGIC: &[u8; 9] = b"DVISCKPT1";

fn flat_params(convs: &[ConvParams]) -> Vec<f64> {
    let mut out = Vec::new();
    for c in convs {
        out.extend_from_slice(&c.weight);
        out.extend_from_slice(&c.bias);
    }
    out
}

fn unflatten_params(cfg: &NetConfig, flat: &[f64]) -> Result<Vec<ConvParams>> {
    let mut convs = Vec::new();
    let mut pos = 0;
    for layer in &cfg.layers {
        if let LayerSpec::Conv { kernel, in_channels, out_channels, .. } = *layer {
            let wlen = out_channels * in_channels * kernel * kernel;
            let need = wlen + out_channels;
            if pos + need > flat.len() {
                return Err(Error::data("checkpoint parameter payload too short"));
            }
            convs.push(ConvParams {
                weight: flat[pos..pos + wlen].to_vec(),
                bias: flat[pos + wlen..pos + need].to_vec(),
            });
            pos += need;
        }
    }
    if pos != flat.len() {
        return Err(Error::data(format!(
            "checkpoint parameter payload has {} extra values",
            flat.len() - pos
        )));
    }
    Ok(convs)
}

fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::data("payload length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write a checkpoint: magic header, then (tag, u64 length, payload)
/// sections, everything little-endian.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let section = |tag: &[u8; 4], payload: &[u8], out: &mut Vec<u8>| {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    };
    let cfg_json = serde_json::to_vec(&ckpt.params.cfg)
        .map_err(|e| Error::data(format!("config serialization: {e}")))?;
    section(b"NCFG", &cfg_json, &mut out);
    section(b"PRMS", &f64s_to_bytes(&flat_params(&ckpt.params.convs)), &mut out);
    let mut opts = vec![ckpt.opt.lr, ckpt.opt.momentum, ckpt.opt.weight_decay];
    opts.extend(flat_params(&ckpt.opt.buffers));
    section(b"OPTS", &f64s_to_bytes(&opts), &mut out);
    section(b"STEP", &ckpt.step.to_le_bytes(), &mut out);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let mut pos = CKPT_MAGIC.len();
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    while pos < bytes.len() {
        if pos + 12 > bytes.len() {
            return Err(Error::data("truncated checkpoint section header"));
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap()) as usize;
        pos += 12;
        if pos + len > bytes.len() {
            return Err(Error::data("truncated checkpoint section payload"));
        }
        sections.push((tag, &bytes[pos..pos + len]));
        pos += len;
    }
    let find = |tag: &[u8; 4]| -> Result<&[u8]> {
        sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or_else(|| {
                Error::data(format!("checkpoint missing {} section", String::from_utf8_lossy(tag)))
            })
    };
    let cfg: NetConfig = serde_json::from_slice(find(b"NCFG")?)
        .map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
    cfg.validate_chain()?;
    let convs = unflatten_params(&cfg, &bytes_to_f64s(find(b"PRMS")?)?)?;
    let opts = bytes_to_f64s(find(b"OPTS")?)?;
    if opts.len() < 3 {
        return Err(Error::data("checkpoint optimizer payload too short"));
    }
    let buffers = unflatten_params(&cfg, &opts[3..])?;
    let step = u64::from_le_bytes(
        find(b"STEP")?
            .try_into()
            .map_err(|_| Error::data("checkpoint step section malformed"))?,
    );
    let params = ParamSet { cfg, convs, revision: 0 };
    let opt = OptState { lr: opts[0], momentum: opts[1], weight_decay: opts[2], buffers };
    Ok(Checkpoint { params, opt, step })
}
