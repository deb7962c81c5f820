//! Tiny convolutional grounding model with hand-written backpropagation.
//!
//! `image → conv3x3 → ReLU → conv3x3 → per-pixel feature f(p) ∈ R^E`; each
//! phrase scores a pixel by `⟨f(p), e_j⟩ + b` and a sigmoid turns the logit
//! into a confidence. Convolutions use reflect padding and stride 1, so every
//! confidence map has the input's dimensions.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::augment::reflect;
use crate::domain::{ConfidenceMap, Image, Phrase, CHANNELS, DEFAULT_EMBED_DIM};
use crate::error::{Error, Result};
use crate::rng::{streams, substream};

const K: usize = 3;
const KK: usize = K * K;

/// Shape of the model and of the inputs it accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub channels: usize,
    pub hidden: usize,
    pub embed: usize,
    pub height: usize,
    pub width: usize,
}

impl ArchDescriptor {
    pub fn new(height: usize, width: usize) -> Self {
        ArchDescriptor {
            channels: CHANNELS,
            hidden: 8,
            embed: DEFAULT_EMBED_DIM,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != CHANNELS {
            return Err(Error::spec(format!("model expects {CHANNELS} channels")));
        }
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::spec("hidden and embed sizes must be positive"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::spec("model input must be at least 2x2"));
        }
        Ok(())
    }

    fn w1_len(&self) -> usize {
        self.hidden * self.channels * KK
    }

    fn w2_len(&self) -> usize {
        self.embed * self.hidden * KK
    }

    /// Length of the flattened parameter vector.
    pub fn param_len(&self) -> usize {
        self.w1_len() + self.hidden + self.w2_len() + self.embed + 1
    }

    /// Offsets of (w1, b1, w2, b2, output bias).
    fn offsets(&self) -> [usize; 5] {
        let w1 = 0;
        let b1 = w1 + self.w1_len();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.w2_len();
        let ob = b2 + self.embed;
        [w1, b1, w2, b2, ob]
    }

    /// Named parameter blocks as `(name, range)`.
    pub fn blocks(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let [w1, b1, w2, b2, ob] = self.offsets();
        vec![
            ("conv1.weight", w1..b1),
            ("conv1.bias", b1..w2),
            ("conv2.weight", w2..b2),
            ("conv2.bias", b2..ob),
            ("output.bias", ob..ob + 1),
        ]
    }
}

/// Flat parameter vector plus the architecture it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ArchDescriptor,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        Ok(ModelParams {
            arch,
            values: vec![0.0; arch.param_len()],
        })
    }

    pub fn from_vec(arch: ArchDescriptor, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_len() {
            return Err(Error::spec(format!(
                "parameter vector has {} values, architecture needs {}",
                values.len(),
                arch.param_len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::spec("parameters must be finite"));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Deterministic init: weights uniform in ±sqrt(1/fan_in), biases zero.
pub fn init_params(seed: u64, arch: ArchDescriptor) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = substream(seed, streams::INIT);
    let [w1, b1, w2, b2, _] = arch.offsets();
    let a1 = (1.0 / (arch.channels * KK) as f64).sqrt();
    let a2 = (1.0 / (arch.hidden * KK) as f64).sqrt();
    for v in &mut params.values[w1..b1] {
        *v = rng.gen_range(-a1..=a1);
    }
    for v in &mut params.values[w2..b2] {
        *v = rng.gen_range(-a2..=a2);
    }
    Ok(params)
}

/// Cached activations of one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    arch: ArchDescriptor,
    params: Vec<f64>,
    /// Input in channel-major layout.
    input: Vec<f64>,
    /// conv1 pre-activation.
    hidden_pre: Vec<f64>,
    features: Vec<f64>,
    embeddings: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    confidences: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Pre-sigmoid scores of phrase `j`, row-major.
    pub fn logits(&self, j: usize) -> &[f64] {
        &self.logits[j]
    }

    pub fn n_phrases(&self) -> usize {
        self.embeddings.len()
    }

    /// Pixel features, channel-major (`embed × H × W`).
    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Copies CHW planes into `(h+2) × (w+2)` planes with reflected borders.
fn pad_planes(input: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; ch * ph * pw];
    for c in 0..ch {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let row = &src[reflect(py as isize - 1, h) * w..][..w];
            let d = &mut dst[py * pw..(py + 1) * pw];
            d[1..=w].copy_from_slice(row);
            d[0] = row[reflect(-1, w)];
            d[w + 1] = row[reflect(w as isize, w)];
        }
    }
    out
}

/// Adds padded-plane gradients back onto their reflected sources.
fn fold_planes(padded: &[f64], ch: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ph, pw) = (h + 2, w + 2);
    for c in 0..ch {
        let src = &padded[c * ph * pw..(c + 1) * ph * pw];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            let y = reflect(py as isize - 1, h);
            let s = &src[py * pw..(py + 1) * pw];
            let d = &mut dst[y * w..(y + 1) * w];
            d.iter_mut().zip(&s[1..=w]).for_each(|(a, b)| *a += b);
            d[reflect(-1, w)] += s[0];
            d[reflect(w as isize, w)] += s[w + 1];
        }
    }
}

/// `out[o] = bias[o] + Σ_c w[o][c] ⋆ input[c]`, CHW buffers.
fn conv_forward(
    input: &[f64],
    in_ch: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (hw, pw) = (h * w, w + 2);
    let padded = pad_planes(input, in_ch, h, w);
    let mut out = vec![0.0; out_ch * hw];
    for o in 0..out_ch {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..in_ch {
            let src = &padded[c * (h + 2) * pw..(c + 1) * (h + 2) * pw];
            let wk = &weights[(o * in_ch + c) * KK..(o * in_ch + c + 1) * KK];
            for y in 0..h {
                let dst = &mut plane[y * w..(y + 1) * w];
                for dy in 0..K {
                    let row = &src[(y + dy) * pw..(y + dy + 1) * pw];
                    for dx in 0..K {
                        let wv = wk[dy * K + dx];
                        dst.iter_mut()
                            .zip(&row[dx..dx + w])
                            .for_each(|(d, s)| *d += wv * s);
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight, bias and (optionally) input gradients of a conv.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_ch: usize,
    weights: &[f64],
    grad_out: &[f64],
    out_ch: usize,
    h: usize,
    w: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let (hw, ph, pw) = (h * w, h + 2, w + 2);
    let padded = pad_planes(input, in_ch, h, w);
    let mut grad_pad = grad_in.as_ref().map(|_| vec![0.0; in_ch * ph * pw]);
    for o in 0..out_ch {
        let g = &grad_out[o * hw..(o + 1) * hw];
        grad_b[o] += g.iter().sum::<f64>();
        for c in 0..in_ch {
            let src = &padded[c * ph * pw..(c + 1) * ph * pw];
            let base = (o * in_ch + c) * KK;
            let mut acc = [0.0; KK];
            for y in 0..h {
                let grow = &g[y * w..(y + 1) * w];
                for dy in 0..K {
                    let row = &src[(y + dy) * pw..(y + dy + 1) * pw];
                    for dx in 0..K {
                        acc[dy * K + dx] += grow
                            .iter()
                            .zip(&row[dx..dx + w])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            grad_w[base..base + KK]
                .iter_mut()
                .zip(acc)
                .for_each(|(gw, a)| *gw += a);
            if let Some(gp) = grad_pad.as_mut() {
                let dst = &mut gp[c * ph * pw..(c + 1) * ph * pw];
                for y in 0..h {
                    let grow = &g[y * w..(y + 1) * w];
                    for dy in 0..K {
                        let row = &mut dst[(y + dy) * pw..(y + dy + 1) * pw];
                        for dx in 0..K {
                            let wv = weights[base + dy * K + dx];
                            row[dx..dx + w]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, s)| *d += wv * s);
                        }
                    }
                }
            }
        }
    }
    if let (Some(gp), Some(gi)) = (grad_pad, grad_in) {
        fold_planes(&gp, in_ch, h, w, gi);
    }
}

fn check_inputs(arch: &ArchDescriptor, image: &Image, phrases: &[Phrase]) -> Result<()> {
    if image.dims() != (arch.height, arch.width) {
        return Err(Error::spec(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            arch.height,
            arch.width
        )));
    }
    for p in phrases {
        if p.embedding.len() != arch.embed {
            return Err(Error::spec(format!(
                "phrase {} embedding has length {}, model expects {}",
                p.id,
                p.embedding.len(),
                arch.embed
            )));
        }
    }
    Ok(())
}

/// Runs the model, returning one confidence map per phrase and a trace for
/// [`backward`].
pub fn forward(
    params: &ModelParams,
    image: &Image,
    phrases: &[Phrase],
) -> Result<(Vec<ConfidenceMap>, ForwardTrace)> {
    let arch = params.arch;
    check_inputs(&arch, image, phrases)?;
    let (h, w) = (arch.height, arch.width);
    let hw = h * w;
    let [w1, b1, w2, b2, ob] = arch.offsets();
    let p = &params.values;

    let mut input = vec![0.0; arch.channels * hw];
    for (k, px) in image.as_slice().chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            input[c * hw + k] = px[c];
        }
    }

    let hidden_pre = conv_forward(&input, arch.channels, &p[w1..b1], &p[b1..w2], arch.hidden, h, w);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let features = conv_forward(&hidden, arch.hidden, &p[w2..b2], &p[b2..ob], arch.embed, h, w);
    let out_bias = p[ob];

    let mut logits = Vec::with_capacity(phrases.len());
    let mut confidences = Vec::with_capacity(phrases.len());
    let mut maps = Vec::with_capacity(phrases.len());
    for phrase in phrases {
        let mut z = vec![out_bias; hw];
        for (e, &coef) in phrase.embedding.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            let f = &features[e * hw..(e + 1) * hw];
            z.iter_mut().zip(f).for_each(|(zv, fv)| *zv += coef * fv);
        }
        let conf: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        maps.push(ConfidenceMap::from_values(h, w, conf.clone())?);
        logits.push(z);
        confidences.push(conf);
    }

    let trace = ForwardTrace {
        arch,
        params: params.values.clone(),
        input,
        hidden_pre,
        features,
        embeddings: phrases.iter().map(|p| p.embedding.clone()).collect(),
        logits,
        confidences,
    };
    Ok((maps, trace))
}

/// Gradient of `Σ_j Σ_p upstream[j][p] · conf_j(p)` with respect to the
/// flattened parameters.
pub fn backward(trace: &ForwardTrace, upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
    let arch = trace.arch;
    let (h, w) = (arch.height, arch.width);
    let hw = h * w;
    if upstream.len() != trace.n_phrases() {
        return Err(Error::spec(format!(
            "{} upstream maps for {} phrases",
            upstream.len(),
            trace.n_phrases()
        )));
    }
    if let Some(bad) = upstream.iter().find(|u| u.len() != hw) {
        return Err(Error::spec(format!(
            "upstream map has {} values, expected {hw}",
            bad.len()
        )));
    }

    let [w1, b1, w2, b2, ob] = arch.offsets();
    let mut grad = vec![0.0; arch.param_len()];

    // d loss / d features, and the output bias.
    let mut grad_feat = vec![0.0; arch.embed * hw];
    let mut grad_logit = vec![0.0; hw];
    for (j, up) in upstream.iter().enumerate() {
        let conf = &trace.confidences[j];
        for k in 0..hw {
            grad_logit[k] = up[k] * conf[k] * (1.0 - conf[k]);
        }
        grad[ob] += grad_logit.iter().sum::<f64>();
        for (e, &coef) in trace.embeddings[j].iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            let gf = &mut grad_feat[e * hw..(e + 1) * hw];
            gf.iter_mut()
                .zip(&grad_logit)
                .for_each(|(g, gl)| *g += coef * gl);
        }
    }

    let hidden: Vec<f64> = trace.hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let mut grad_hidden = vec![0.0; arch.hidden * hw];
    {
        let (head, tail) = grad.split_at_mut(b2);
        conv_backward(
            &hidden,
            arch.hidden,
            &trace.params[w2..b2],
            &grad_feat,
            arch.embed,
            h,
            w,
            &mut head[w2..b2],
            &mut tail[..arch.embed],
            Some(&mut grad_hidden),
        );
    }
    for (g, &z) in grad_hidden.iter_mut().zip(&trace.hidden_pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    {
        let (head, tail) = grad.split_at_mut(b1);
        conv_backward(
            &trace.input,
            arch.channels,
            &trace.params[w1..b1],
            &grad_hidden,
            arch.hidden,
            h,
            w,
            &mut head[w1..b1],
            &mut tail[..arch.hidden],
            None,
        );
    }
    Ok(grad)
}

/// Central-difference gradient of `loss(forward(θ))` at the listed coordinates.
pub fn finite_diff_grad_at<F>(
    params: &ModelParams,
    image: &Image,
    phrases: &[Phrase],
    loss: F,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>>
where
    F: Fn(&[ConfidenceMap]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::spec("finite difference step must be positive"));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        let orig = probe.values[k];
        probe.values[k] = orig + h;
        let plus = loss(&forward(&probe, image, phrases)?.0);
        probe.values[k] = orig - h;
        let minus = loss(&forward(&probe, image, phrases)?.0);
        probe.values[k] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient over every coordinate.
pub fn finite_diff_grad<F>(
    params: &ModelParams,
    image: &Image,
    phrases: &[Phrase],
    loss: F,
    h: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&[ConfidenceMap]) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_grad_at(params, image, phrases, loss, h, &coords)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSPGCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes parameters: magic, `u16` version, five `u32` descriptor fields
/// (channels, hidden, embed, height, width), `u64` length, raw `f64` values,
/// all little-endian.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let a = params.arch;
    let mut out = Vec::with_capacity(8 + 2 + 20 + 8 + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [a.channels, a.hidden, a.embed, a.height, a.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let fail = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    const HEADER: usize = 8 + 2 + 20 + 8;
    if bytes.len() < HEADER {
        return Err(fail(bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad checkpoint magic"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != CHECKPOINT_VERSION {
        return Err(fail(8, "unsupported checkpoint version"));
    }
    let field = |i: usize| {
        let at = 10 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
    };
    let arch = ArchDescriptor {
        channels: field(0),
        hidden: field(1),
        embed: field(2),
        height: field(3),
        width: field(4),
    };
    arch.validate().map_err(|e| fail(10, &e.to_string()))?;
    let len = u64::from_le_bytes(bytes[30..38].try_into().unwrap()) as usize;
    if len != arch.param_len() {
        return Err(fail(30, "parameter count disagrees with descriptor"));
    }
    if bytes.len() != HEADER + len * 8 {
        return Err(fail(bytes.len().min(HEADER + len * 8), "checkpoint payload size mismatch"));
    }
    let values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ModelParams::from_vec(arch, values).map_err(|e| fail(HEADER, &e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
