//! The quality scorer: a stack of stride-2 3x3 convolutions with ReLU, global
//! average pooling over the final feature maps, then `FC(hidden) -> ReLU ->
//! FC(1)`. Forward passes record a [`ForwardTrace`] from which [`backward`]
//! computes exact parameter gradients.
//!
//! Convolutions use reflect padding of one pixel, so each block maps an
//! `H x W` map to `ceil(H/2) x ceil(W/2)`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_patches, ImageRecord, Patch};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
const TAPS: usize = KERNEL * KERNEL;

const MAGIC: &[u8; 8] = b"BIQASCR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub patch_size: usize,
    pub channels_in: usize,
    /// Output channels of each conv block.
    pub conv_blocks: Vec<usize>,
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            channels_in: 1,
            conv_blocks: vec![8, 16],
            hidden: 64,
            activation: Activation::Relu,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scorer: {m}")));
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required");
        }
        if self.conv_blocks.contains(&0) {
            return bad("conv block with zero output channels");
        }
        if self.hidden == 0 {
            return bad("hidden width is 0");
        }
        if self.patch_size == 0 || self.channels_in == 0 {
            return bad("patch size and input channels must be positive");
        }
        Ok(())
    }

    /// Spatial side length after each block, starting with the input.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.patch_size];
        for _ in &self.conv_blocks {
            let last = *s.last().unwrap();
            s.push(last.div_ceil(STRIDE));
        }
        s
    }

    /// Number of feature maps entering global average pooling.
    pub fn pooled_features(&self) -> usize {
        *self.conv_blocks.last().unwrap()
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product::<usize>();
            specs.push(TensorSpec {
                name,
                offset,
                shape,
            });
            offset += len;
        };
        let mut cin = self.channels_in;
        for (i, &cout) in self.conv_blocks.iter().enumerate() {
            push(format!("conv{i}.weight"), vec![cout, cin, KERNEL, KERNEL]);
            push(format!("conv{i}.bias"), vec![cout]);
            cin = cout;
        }
        push("fc1.weight".into(), vec![self.hidden, cin]);
        push("fc1.bias".into(), vec![self.hidden]);
        push("fc2.weight".into(), vec![self.hidden]);
        push("fc2.bias".into(), vec![1]);
        specs
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

/// Precomputed gather indices for one conv block.
#[derive(Debug)]
struct ConvPlan {
    cin: usize,
    cout: usize,
    in_side: usize,
    out_side: usize,
    /// `gather[k * out_area + p]` is the input spatial index read by tap `k`
    /// at output position `p`.
    gather: Vec<u32>,
    weight: usize,
    bias: usize,
}

#[derive(Debug)]
struct Plan {
    convs: Vec<ConvPlan>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    features: usize,
    hidden: usize,
    len: usize,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

impl Plan {
    fn new(config: &ScorerConfig) -> Self {
        let layout = config.layout();
        let sizes = config.spatial_sizes();
        let mut cin = config.channels_in;
        let mut convs = Vec::with_capacity(config.conv_blocks.len());
        for (i, &cout) in config.conv_blocks.iter().enumerate() {
            let (n_in, n_out) = (sizes[i], sizes[i + 1]);
            let area = n_out * n_out;
            let mut gather = vec![0u32; TAPS * area];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let k = ky * KERNEL + kx;
                    for oy in 0..n_out {
                        for ox in 0..n_out {
                            let iy = reflect((oy * STRIDE + ky) as isize - 1, n_in);
                            let ix = reflect((ox * STRIDE + kx) as isize - 1, n_in);
                            gather[k * area + oy * n_out + ox] = (iy * n_in + ix) as u32;
                        }
                    }
                }
            }
            convs.push(ConvPlan {
                cin,
                cout,
                in_side: n_in,
                out_side: n_out,
                gather,
                weight: layout[2 * i].offset,
                bias: layout[2 * i + 1].offset,
            });
            cin = cout;
        }
        let n = layout.len();
        Plan {
            convs,
            fc1_w: layout[n - 4].offset,
            fc1_b: layout[n - 3].offset,
            fc2_w: layout[n - 2].offset,
            fc2_b: layout[n - 1].offset,
            features: cin,
            hidden: config.hidden,
            len: layout[n - 1].offset + 1,
        }
    }
}

/// Flat parameter vector plus the layout derived from its config.
#[derive(Clone, Debug)]
pub struct ScorerParams {
    config: ScorerConfig,
    layout: Vec<TensorSpec>,
    pub values: Vec<f64>,
    plan: Arc<Plan>,
}

impl PartialEq for ScorerParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ScorerParams {
    pub fn zeros(config: &ScorerConfig) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(config);
        Ok(Self {
            config: config.clone(),
            layout: config.layout(),
            values: vec![0.0; plan.len],
            plan: Arc::new(plan),
        })
    }

    pub fn from_values(config: &ScorerConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                p.values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.iter().find(|t| t.name == name)?.range();
        Some(&mut self.values[r])
    }

    pub fn ensure_config(&self, config: &ScorerConfig) -> Result<()> {
        if &self.config != config {
            return Err(Error::LayoutMismatch(format!(
                "parameters were built for {:?}, not {:?}",
                self.config, config
            )));
        }
        Ok(())
    }
}

/// He initialization: weights ~ Normal(0, 2 / fan_in), biases zero. Draws are
/// taken tensor by tensor in layout order from one seeded stream.
pub fn init_params(config: &ScorerConfig, seed: u64) -> Result<ScorerParams> {
    let mut params = ScorerParams::zeros(config)?;
    let mut rng = rng_from_seed(seed);
    for spec in params.layout.clone() {
        if spec.name.ends_with(".bias") {
            continue;
        }
        let normal = Normal::new(0.0, (2.0 / spec.fan_in() as f64).sqrt()).expect("finite std");
        for v in &mut params.values[spec.range()] {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    param_len: usize,
    /// Gathered conv inputs per block, `(cin * 9) x out_area`.
    cols: Vec<Vec<f64>>,
    /// Conv pre-activations per block, `cout x out_area`.
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl ForwardTrace {
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Sign of every rectifier input, conv layers first, then the hidden layer.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre
            .iter()
            .flatten()
            .chain(&self.hidden_pre)
            .map(|&v| v > 0.0)
            .collect()
    }

    /// Post-activation final feature maps (`P x area`).
    pub fn final_maps(&self) -> Vec<f64> {
        self.pre
            .last()
            .unwrap()
            .iter()
            .map(|&v| v.max(0.0))
            .collect()
    }
}

fn check_patch(params: &ScorerParams, patch: &Patch) -> Result<()> {
    let c = &params.config;
    if patch.size != c.patch_size
        || patch.channels != c.channels_in
        || patch.pixels.len() != c.channels_in * c.patch_size * c.patch_size
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{0}x{1}x{1}", c.channels_in, c.patch_size),
            got: format!("{0}x{1}x{1}", patch.channels, patch.size),
        });
    }
    Ok(())
}

/// Scores one patch.
pub fn forward(params: &ScorerParams, patch: &Patch) -> Result<(f64, ForwardTrace)> {
    check_patch(params, patch)?;
    let plan = &*params.plan;
    let w = &params.values;
    let mut cols = Vec::with_capacity(plan.convs.len());
    let mut pres = Vec::with_capacity(plan.convs.len());
    let mut input: Vec<f64> = patch.pixels.clone();

    for conv in &plan.convs {
        let in_area = conv.in_side * conv.in_side;
        let area = conv.out_side * conv.out_side;
        let rows = conv.cin * TAPS;
        let mut col = vec![0.0; rows * area];
        for c in 0..conv.cin {
            let src = &input[c * in_area..(c + 1) * in_area];
            for k in 0..TAPS {
                let dst = &mut col[(c * TAPS + k) * area..(c * TAPS + k + 1) * area];
                let idx = &conv.gather[k * area..(k + 1) * area];
                for (d, &i) in dst.iter_mut().zip(idx) {
                    *d = src[i as usize];
                }
            }
        }
        let mut pre = vec![0.0; conv.cout * area];
        for o in 0..conv.cout {
            let out = &mut pre[o * area..(o + 1) * area];
            out.fill(w[conv.bias + o]);
            let wrow = &w[conv.weight + o * rows..conv.weight + (o + 1) * rows];
            for (r, &wr) in wrow.iter().enumerate() {
                let crow = &col[r * area..(r + 1) * area];
                for (a, &b) in out.iter_mut().zip(crow) {
                    *a += wr * b;
                }
            }
        }
        input = pre.iter().map(|&v| v.max(0.0)).collect();
        cols.push(col);
        pres.push(pre);
    }

    let last = plan.convs.last().unwrap();
    let area = last.out_side * last.out_side;
    let pooled: Vec<f64> = input
        .chunks_exact(area)
        .map(|m| m.iter().sum::<f64>() / area as f64)
        .collect();

    let mut hidden_pre = vec![0.0; plan.hidden];
    for (j, h) in hidden_pre.iter_mut().enumerate() {
        let row = &w[plan.fc1_w + j * plan.features..plan.fc1_w + (j + 1) * plan.features];
        *h = w[plan.fc1_b + j] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
    }
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let score = w[plan.fc2_b]
        + w[plan.fc2_w..plan.fc2_w + plan.hidden]
            .iter()
            .zip(&hidden)
            .map(|(a, b)| a * b)
            .sum::<f64>();

    Ok((
        score,
        ForwardTrace {
            param_len: params.values.len(),
            cols,
            pre: pres,
            pooled,
            hidden_pre,
            hidden,
        },
    ))
}

pub fn score(params: &ScorerParams, patch: &Patch) -> Result<f64> {
    forward(params, patch).map(|(s, _)| s)
}

/// Gradient of `upstream * score` with respect to every parameter.
pub fn backward(trace: &ForwardTrace, params: &ScorerParams, upstream: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.values.len()];
    backward_accumulate(trace, params, upstream, &mut grad)?;
    Ok(grad)
}

/// Adds the gradient of `upstream * score` into `grad`.
pub fn backward_accumulate(
    trace: &ForwardTrace,
    params: &ScorerParams,
    upstream: f64,
    grad: &mut [f64],
) -> Result<()> {
    let plan = &*params.plan;
    if trace.param_len != params.values.len()
        || grad.len() != params.values.len()
        || trace.pre.len() != plan.convs.len()
    {
        return Err(Error::LayoutMismatch(
            "trace or gradient buffer does not match these parameters".into(),
        ));
    }
    let w = &params.values;

    grad[plan.fc2_b] += upstream;
    let mut d_hidden_pre = vec![0.0; plan.hidden];
    for j in 0..plan.hidden {
        grad[plan.fc2_w + j] += upstream * trace.hidden[j];
        if trace.hidden_pre[j] > 0.0 {
            d_hidden_pre[j] = upstream * w[plan.fc2_w + j];
        }
    }
    let mut d_pooled = vec![0.0; plan.features];
    for (j, &dh) in d_hidden_pre.iter().enumerate() {
        if dh == 0.0 {
            continue;
        }
        grad[plan.fc1_b + j] += dh;
        let base = plan.fc1_w + j * plan.features;
        for f in 0..plan.features {
            grad[base + f] += dh * trace.pooled[f];
            d_pooled[f] += dh * w[base + f];
        }
    }

    let last = plan.convs.last().unwrap();
    let area = last.out_side * last.out_side;
    // gradient w.r.t. the post-activation output of the current block
    let mut d_post: Vec<f64> = d_pooled
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / area as f64, area))
        .collect();

    for (l, conv) in plan.convs.iter().enumerate().rev() {
        let area = conv.out_side * conv.out_side;
        let rows = conv.cin * TAPS;
        let pre = &trace.pre[l];
        let col = &trace.cols[l];
        let d_pre: Vec<f64> = d_post
            .iter()
            .zip(pre)
            .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
            .collect();
        for o in 0..conv.cout {
            let dp = &d_pre[o * area..(o + 1) * area];
            grad[conv.bias + o] += dp.iter().sum::<f64>();
            let gw = &mut grad[conv.weight + o * rows..conv.weight + (o + 1) * rows];
            for (r, g) in gw.iter_mut().enumerate() {
                let crow = &col[r * area..(r + 1) * area];
                *g += dp.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if l == 0 {
            break;
        }
        let mut d_col = vec![0.0; rows * area];
        for o in 0..conv.cout {
            let dp = &d_pre[o * area..(o + 1) * area];
            let wrow = &w[conv.weight + o * rows..conv.weight + (o + 1) * rows];
            for (r, &wr) in wrow.iter().enumerate() {
                let drow = &mut d_col[r * area..(r + 1) * area];
                for (a, &b) in drow.iter_mut().zip(dp) {
                    *a += wr * b;
                }
            }
        }
        let in_area = conv.in_side * conv.in_side;
        let mut d_in = vec![0.0; conv.cin * in_area];
        for c in 0..conv.cin {
            let dst = &mut d_in[c * in_area..(c + 1) * in_area];
            for k in 0..TAPS {
                let src = &d_col[(c * TAPS + k) * area..(c * TAPS + k + 1) * area];
                let idx = &conv.gather[k * area..(k + 1) * area];
                for (&i, &v) in idx.iter().zip(src) {
                    dst[i as usize] += v;
                }
            }
        }
        d_post = d_in;
    }
    Ok(())
}

/// Mean score over `n_patches` random unflipped crops.
pub fn predict_image(
    params: &ScorerParams,
    record: &ImageRecord,
    n_patches: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_patches == 0 {
        return Err(Error::invalid("n_patches must be positive"));
    }
    let patches = sample_patches(record, n_patches, params.config.patch_size, false, rng)?;
    let mut total = 0.0;
    for p in &patches {
        total += score(params, p)?;
    }
    Ok(total / n_patches as f64)
}

/// Serializes to the model file format: 8 magic bytes, `u32` version,
/// `u32` length + JSON config, `u64` count + little-endian `f64` values,
/// trailing CRC-32 of everything before it.
pub fn encode_params(params: &ScorerParams) -> Vec<u8> {
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    let mut buf = Vec::with_capacity(32 + config.len() + 8 * params.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_params(bytes: &[u8]) -> Result<ScorerParams> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes.len() < MAGIC.len() + 12 {
        return Err(corrupt("truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let clen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config: ScorerConfig =
        serde_json::from_slice(take(clen)?).map_err(|e| corrupt(&format!("config: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(
        count
            .checked_mul(8)
            .ok_or_else(|| corrupt("count overflow"))?,
    )?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    ScorerParams::from_values(&config, values)
}

pub fn save_params(params: &ScorerParams, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ScorerParams> {
    decode_params(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
