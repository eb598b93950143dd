//! Quantized MLP policy: forward evaluation with fault hooks, action
//! selection, flat parameter access, and the consensus-spread metric.
//!
//! The policy keeps two views of its parameters. `master` holds full-precision
//! reals and is what gradient updates touch; `codes` holds the fixed-point
//! image of the master weights and is what faults act on and what every
//! forward pass actually reads. Activations travel through the same
//! fixed-point format between layers, so an injection hook that flips nothing
//! leaves the output bit-identical.

use std::io::{Cursor, Read};

use rand::Rng;
use thiserror::Error;

use crate::fxp::{self, CodeTensor, FxpError, QFormat};
use crate::gridworld::Observation;
use crate::Real;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("input length {got} does not match layer width {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("parameter tensor length {got} does not match policy size {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("format mismatch: policy uses {policy}, tensor uses {tensor}")]
    FormatMismatch { policy: QFormat, tensor: QFormat },
    #[error("non-finite action value at index {0}")]
    NonFiniteValue(usize),
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error("checkpoint bytes malformed: {0}")]
    BadCheckpoint(&'static str),
}

/// Action-selection mode. `Greedy` is `EpsilonGreedy(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionMode {
    Greedy,
    EpsilonGreedy(f64),
}

impl ActionMode {
    fn epsilon(self) -> f64 {
        match self {
            ActionMode::Greedy => 0.0,
            ActionMode::EpsilonGreedy(e) => e,
        }
    }
}

/// Number of parameters (weights and biases) of an MLP with the given dims.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Debug, Clone)]
struct Layer<R> {
    fan_in: usize,
    fan_out: usize,
    /// Full-precision parameters: weights row-major `[out][in]`, then biases.
    master: Vec<R>,
    /// Fixed-point image of `master`, same layout. The fault target.
    codes: CodeTensor,
    /// Dequantized `codes`, kept in sync; what forward reads.
    deq: Vec<R>,
}

impl<R: Real> Layer<R> {
    fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

#[derive(Debug)]
pub struct MlpPolicy<R> {
    dims: Vec<usize>,
    fmt: QFormat,
    layers: Vec<Layer<R>>,
}

impl<R: Real> Clone for MlpPolicy<R> {
    fn clone(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            fmt: self.fmt,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    master: l.master.clone(),
                    codes: l.codes.clone(),
                    deq: l.deq.clone(),
                })
                .collect(),
        }
    }
}

impl<R: Real> MlpPolicy<R> {
    /// Random policy with uniform Xavier-style init, codes synced.
    pub fn new_random(dims: &[usize], fmt: QFormat, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut master = Vec::with_capacity((fan_in + 1) * fan_out);
                for _ in 0..fan_in * fan_out {
                    master.push(R::from_f64(rng.gen_range(-scale..scale)).unwrap());
                }
                master.extend(std::iter::repeat(R::zero()).take(fan_out));
                let codes = CodeTensor::from_reals(&master, fmt, vec![fan_in + 1, fan_out])
                    .expect("finite init weights");
                let deq = codes.to_reals();
                Layer { fan_in, fan_out, master, codes, deq }
            })
            .collect();
        Self { dims: dims.to_vec(), fmt, layers }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.dims)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Full-precision parameters of one layer (weights row-major, then biases).
    pub fn master(&self, layer: usize) -> &[R] {
        &self.layers[layer].master
    }

    pub fn master_mut(&mut self, layer: usize) -> &mut [R] {
        &mut self.layers[layer].master
    }

    /// Stored fixed-point codes of one layer.
    pub fn codes(&self, layer: usize) -> &CodeTensor {
        &self.layers[layer].codes
    }

    /// Dequantized weights of one layer, as forward sees them.
    pub fn dequantized(&self, layer: usize) -> &[R] {
        &self.layers[layer].deq
    }

    /// Mutate one layer's stored codes (e.g. to inject faults). The
    /// dequantized view is refreshed afterwards; master weights follow the
    /// codes so that later gradient steps start from the corrupted state.
    pub fn mutate_codes(&mut self, layer: usize, f: impl FnOnce(&mut CodeTensor)) {
        let l = &mut self.layers[layer];
        f(&mut l.codes);
        l.deq = l.codes.to_reals();
        l.master.copy_from_slice(&l.deq);
    }

    /// Re-quantize master weights into the stored codes. Idempotent.
    pub fn sync_codes(&mut self) {
        for l in &mut self.layers {
            let codes: Vec<i64> =
                l.master.iter().map(|&x| fxp::quantize(x, self.fmt).expect("finite weight")).collect();
            l.codes = CodeTensor::new(codes, self.fmt, l.codes.shape().to_vec()).unwrap();
            l.deq = l.codes.to_reals();
        }
    }

    /// Forward pass over the dequantized stored codes, with the fixed-point
    /// activation datapath. `mask[layer][idx] = true` drops that parameter's
    /// contribution (used by the range guard); `act_hook` sees each layer's
    /// quantized activation tensor and may flip bits in place.
    pub fn forward_hooked(
        &self,
        input: &[R],
        mask: Option<&[Vec<bool>]>,
        mut act_hook: Option<&mut dyn FnMut(usize, &mut CodeTensor)>,
    ) -> Result<Vec<R>, PolicyError> {
        if input.len() != self.dims[0] {
            return Err(PolicyError::ShapeMismatch { got: input.len(), want: self.dims[0] });
        }
        let mut x: Vec<R> = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let lmask = mask.map(|m| &m[li]);
            let mut y = Vec::with_capacity(layer.fan_out);
            for o in 0..layer.fan_out {
                let bias_idx = layer.fan_in * layer.fan_out + o;
                let mut acc = if lmask.map_or(false, |m| m[bias_idx]) {
                    R::zero()
                } else {
                    layer.deq[bias_idx]
                };
                let row = &layer.deq[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (i, (&w, &xi)) in row.iter().zip(&x).enumerate() {
                    if lmask.map_or(false, |m| m[o * layer.fan_in + i]) {
                        continue;
                    }
                    acc = acc + w * xi;
                }
                if li < last && acc < R::zero() {
                    acc = R::zero(); // ReLU
                }
                y.push(acc);
            }
            // fixed-point datapath between layers
            let mut acts = CodeTensor::from_reals(&y, self.fmt, vec![y.len()])?;
            if let Some(hook) = act_hook.as_deref_mut() {
                hook(li, &mut acts);
            }
            x = acts.to_reals();
        }
        Ok(x)
    }

    /// Plain forward over stored codes.
    pub fn forward(&self, obs: &Observation) -> Result<Vec<R>, PolicyError> {
        let input: Vec<R> = obs.0.iter().map(|&v| R::from_i8(v).unwrap()).collect();
        self.forward_hooked(&input, None, None)
    }

    /// Forward over full-precision master weights, real datapath. This is the
    /// function the TD gradient differentiates.
    pub fn forward_master(&self, input: &[R]) -> Result<Vec<R>, PolicyError> {
        if input.len() != self.dims[0] {
            return Err(PolicyError::ShapeMismatch { got: input.len(), want: self.dims[0] });
        }
        let mut x: Vec<R> = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::with_capacity(layer.fan_out);
            for o in 0..layer.fan_out {
                let mut acc = layer.master[layer.fan_in * layer.fan_out + o];
                let row = &layer.master[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (&w, &xi) in row.iter().zip(&x) {
                    acc = acc + w * xi;
                }
                if li < last && acc < R::zero() {
                    acc = R::zero();
                }
                y.push(acc);
            }
            x = y;
        }
        Ok(x)
    }

    /// All parameters as one flat tensor, layer-major, row-major within a
    /// layer, biases after weights.
    pub fn flatten_params(&self) -> CodeTensor {
        let mut codes = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            codes.extend_from_slice(l.codes.codes());
        }
        let n = codes.len();
        CodeTensor::new(codes, self.fmt, vec![n]).unwrap()
    }

    /// Load a flat parameter tensor. Master weights are set to the
    /// dequantized codes.
    pub fn load_params(&mut self, flat: &CodeTensor) -> Result<(), PolicyError> {
        if flat.len() != self.param_count() {
            return Err(PolicyError::LengthMismatch { got: flat.len(), want: self.param_count() });
        }
        if flat.fmt() != self.fmt {
            return Err(PolicyError::FormatMismatch { policy: self.fmt, tensor: flat.fmt() });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.len();
            let slice = &flat.codes()[offset..offset + n];
            l.codes = CodeTensor::new(slice.to_vec(), self.fmt, l.codes.shape().to_vec())?;
            l.deq = l.codes.to_reals();
            l.master.copy_from_slice(&l.deq);
            offset += n;
        }
        Ok(())
    }

    /// Mean over all 81 observations of the standard deviation of the softmax
    /// of the action values. Larger means sharper action preferences.
    pub fn consensus_std(&self) -> R {
        let all = Observation::enumerate_all();
        let mut total = R::zero();
        for obs in &all {
            let values = self.forward(obs).expect("valid observation");
            let probs = softmax(&values);
            total = total + population_std(&probs);
        }
        total / R::from_usize(all.len()).unwrap()
    }
}

/// Numerically stable softmax.
pub fn softmax<R: Real>(values: &[R]) -> Vec<R> {
    let max = values.iter().cloned().fold(R::neg_infinity(), R::max);
    let exps: Vec<R> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(R::zero(), |a, &b| a + b);
    exps.iter().map(|&e| e / sum).collect()
}

fn population_std<R: Real>(xs: &[R]) -> R {
    let n = R::from_usize(xs.len()).unwrap();
    let mean = xs.iter().fold(R::zero(), |a, &b| a + b) / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).fold(R::zero(), |a, b| a + b) / n;
    var.sqrt()
}

/// Epsilon-greedy action selection; greedy ties break to the lowest index.
pub fn select_action<R: Real>(
    values: &[R],
    mode: ActionMode,
    rng: &mut impl Rng,
) -> Result<usize, PolicyError> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(PolicyError::NonFiniteValue(i));
        }
    }
    let eps = mode.epsilon();
    if eps > 0.0 && rng.gen::<f64>() < eps {
        return Ok(rng.gen_range(0..values.len()));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

// --- checkpoint byte format -------------------------------------------------
//
// magic "FRLFI\0" | version u16 LE | sign u8, int u8, frac u8 | n_dims u8 |
// dims u32 LE each | round u64 LE | codes LE (total_bits/8 bytes each, two's
// complement) | sha256 of everything before (32 bytes)

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FRLFI\0";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serialize a flat parameter tensor to checkpoint bytes.
pub fn encode_checkpoint(flat: &CodeTensor, dims: &[usize], round: u64) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    let fmt = flat.fmt();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(1u8);
    buf.push(fmt.int_bits() as u8);
    buf.push(fmt.frac_bits() as u8);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&round.to_le_bytes());
    let width = (fmt.total_bits() / 8) as usize;
    for &c in flat.codes() {
        buf.extend_from_slice(&c.to_le_bytes()[..width]);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Parse and digest-check checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CodeTensor, Vec<usize>, u64), PolicyError> {
    use sha2::{Digest, Sha256};
    if bytes.len() < 32 {
        return Err(PolicyError::BadCheckpoint("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(PolicyError::BadCheckpoint("digest mismatch"));
    }
    let mut cur = Cursor::new(body);
    let mut magic = [0u8; 6];
    cur.read_exact(&mut magic).map_err(|_| PolicyError::BadCheckpoint("truncated"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PolicyError::BadCheckpoint("bad magic"));
    }
    let mut u16buf = [0u8; 2];
    cur.read_exact(&mut u16buf).map_err(|_| PolicyError::BadCheckpoint("truncated"))?;
    if u16::from_le_bytes(u16buf) != CHECKPOINT_VERSION {
        return Err(PolicyError::BadCheckpoint("unsupported version"));
    }
    let mut triple = [0u8; 3];
    cur.read_exact(&mut triple).map_err(|_| PolicyError::BadCheckpoint("truncated"))?;
    if triple[0] != 1 {
        return Err(PolicyError::BadCheckpoint("sign bits must be 1"));
    }
    let fmt = QFormat::new(triple[1] as u32, triple[2] as u32)?;
    let mut ndims = [0u8; 1];
    cur.read_exact(&mut ndims).map_err(|_| PolicyError::BadCheckpoint("truncated"))?;
    let mut dims = Vec::with_capacity(ndims[0] as usize);
    for _ in 0..ndims[0] {
        let mut d = [0u8; 4];
        cur.read_exact(&mut d).map_err(|_| PolicyError::BadCheckpoint("truncated"))?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let mut round_buf = [0u8; 8];
    cur.read_exact(&mut round_buf).map_err(|_| PolicyError::BadCheckpoint("truncated"))?;
    let round = u64::from_le_bytes(round_buf);
    let width = (fmt.total_bits() / 8) as usize;
    let rest = &body[cur.position() as usize..];
    if rest.len() % width != 0 {
        return Err(PolicyError::BadCheckpoint("code section misaligned"));
    }
    let n = param_count(&dims);
    if rest.len() / width != n {
        return Err(PolicyError::BadCheckpoint("code count does not match dims"));
    }
    let mut codes = Vec::with_capacity(n);
    for chunk in rest.chunks_exact(width) {
        let mut word = [0u8; 8];
        word[..width].copy_from_slice(chunk);
        // sign extend from the top byte of the stored width
        let mut v = i64::from_le_bytes(word);
        let shift = 64 - 8 * width as u32;
        v = (v << shift) >> shift;
        codes.push(v);
    }
    let tensor = CodeTensor::new(codes, fmt, vec![n])?;
    Ok((tensor, dims, round))
}
