//! Block-wise fine-tuning. A small feed-forward block
//! (LayerNorm → quantized linear → activation → quantized linear) is trained
//! to match reference outputs by adjusting only scales, zero points, and the
//! normalization parameters; the integer codes stay frozen throughout.

pub mod adam;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::DqError;
use crate::format::{read_quant, read_tensor};
use crate::layerwise::QuantizedLayer;
use crate::report::FinetuneReport;
use crate::tensor::Tensor2D;

pub use adam::{adam_step, AdamParams, AdamState};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = c * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = DqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(DqError::InvalidConfig(format!(
                "unknown activation '{other}' (expected relu or gelu)"
            ))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Gelu => write!(f, "gelu"),
        }
    }
}

/// The frozen part of a block: two quantized linear layers (width → hidden →
/// width) with their integer codes unpacked once, plus the activation choice.
#[derive(Debug, Clone)]
pub struct QuantBlock {
    pub width: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub layer1: QuantizedLayer,
    pub layer2: QuantizedLayer,
    w1: Tensor2D,
    w2: Tensor2D,
}

fn unpack_layer(layer: &QuantizedLayer) -> Result<Tensor2D, DqError> {
    let mut w = Tensor2D::zeros(layer.d_in, layer.d_out);
    for j in 0..layer.d_out {
        for (i, q) in layer.column_qweights(j)?.into_iter().enumerate() {
            w.set(i, j, q as f64);
        }
    }
    Ok(w)
}

impl QuantBlock {
    pub fn new(
        activation: Activation,
        layer1: QuantizedLayer,
        layer2: QuantizedLayer,
    ) -> Result<Self, DqError> {
        layer1.validate()?;
        layer2.validate()?;
        if layer1.d_out != layer2.d_in || layer2.d_out != layer1.d_in {
            return Err(DqError::InvalidData(format!(
                "block layers do not chain: {}→{} followed by {}→{}",
                layer1.d_in, layer1.d_out, layer2.d_in, layer2.d_out
            )));
        }
        let w1 = unpack_layer(&layer1)?;
        let w2 = unpack_layer(&layer2)?;
        Ok(Self {
            width: layer1.d_in,
            hidden: layer1.d_out,
            activation,
            layer1,
            layer2,
            w1,
            w2,
        })
    }

    /// Trainable set seeded from the stored layer parameters (widened from
    /// 32 bits) and the given normalization parameters.
    pub fn initial_params(
        &self,
        norm_gain: Vec<f64>,
        norm_bias: Vec<f64>,
    ) -> Result<TrainableParams, DqError> {
        if norm_gain.len() != self.width || norm_bias.len() != self.width {
            return Err(DqError::InvalidData(format!(
                "normalization parameters have lengths {}/{}, expected {}",
                norm_gain.len(),
                norm_bias.len(),
                self.width
            )));
        }
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        Ok(TrainableParams {
            scales1: widen(&self.layer1.scales),
            zeros1: widen(&self.layer1.zeros),
            scales2: widen(&self.layer2.scales),
            zeros2: widen(&self.layer2.zeros),
            norm_gain,
            norm_bias,
        })
    }
}

/// Everything block-wise training may change. Scale/zero vectors are
/// row-major d_out × ng, matching the layer files they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    pub scales1: Vec<f64>,
    pub zeros1: Vec<f64>,
    pub scales2: Vec<f64>,
    pub zeros2: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
}

/// Gradients share the parameter layout exactly.
pub type BlockGradients = TrainableParams;

impl TrainableParams {
    fn zeros_like(&self) -> Self {
        Self {
            scales1: vec![0.0; self.scales1.len()],
            zeros1: vec![0.0; self.zeros1.len()],
            scales2: vec![0.0; self.scales2.len()],
            zeros2: vec![0.0; self.zeros2.len()],
            norm_gain: vec![0.0; self.norm_gain.len()],
            norm_bias: vec![0.0; self.norm_bias.len()],
        }
    }

    fn len(&self) -> usize {
        self.scales1.len()
            + self.zeros1.len()
            + self.scales2.len()
            + self.zeros2.len()
            + self.norm_gain.len()
            + self.norm_bias.len()
    }

    /// Fixed flattening order: scales1, zeros1, scales2, zeros2, gain, bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for part in [
            &self.scales1,
            &self.zeros1,
            &self.scales2,
            &self.zeros2,
            &self.norm_gain,
            &self.norm_bias,
        ] {
            out.extend_from_slice(part);
        }
        out
    }

    /// Inverse of `to_flat` into the existing shapes.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length mismatch");
        let mut pos = 0;
        for part in [
            &mut self.scales1,
            &mut self.zeros1,
            &mut self.scales2,
            &mut self.zeros2,
            &mut self.norm_gain,
            &mut self.norm_bias,
        ] {
            let n = part.len();
            part.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    fn validate_for(&self, block: &QuantBlock) -> Result<(), DqError> {
        let n1 = block.layer1.d_out * block.layer1.group_count;
        let n2 = block.layer2.d_out * block.layer2.group_count;
        if self.scales1.len() != n1
            || self.zeros1.len() != n1
            || self.scales2.len() != n2
            || self.zeros2.len() != n2
            || self.norm_gain.len() != block.width
            || self.norm_bias.len() != block.width
        {
            return Err(DqError::InvalidData(
                "trainable parameter shapes do not match the block".into(),
            ));
        }
        Ok(())
    }
}

/// Row-wise layer normalization with population variance. Returns the output
/// and the normalized inputs x̂ (needed by the backward pass). Public so
/// callers can reproduce the block's pre-linear activations, e.g. when
/// collecting per-layer calibration Hessians.
pub fn layer_norm(x: &Tensor2D, gain: &[f64], bias: &[f64]) -> (Tensor2D, Tensor2D) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor2D::zeros(n, d);
    let mut xhat = Tensor2D::zeros(n, d);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for k in 0..d {
            let h = (row[k] - mean) * inv;
            xhat.set(r, k, h);
            out.set(r, k, gain[k] * h + bias[k]);
        }
    }
    (out, xhat)
}

/// W̃[i][j] = s[j, group(i)]·w[i][j] + z[j, group(i)] for integer codes `w`.
fn dequant_with(w: &Tensor2D, scales: &[f64], zeros: &[f64], ng: usize) -> Tensor2D {
    let (d_in, d_out) = (w.rows(), w.cols());
    let rep = d_in / ng;
    let mut out = Tensor2D::zeros(d_in, d_out);
    for i in 0..d_in {
        let g = i / rep;
        for j in 0..d_out {
            out.set(i, j, scales[j * ng + g] * w.get(i, j) + zeros[j * ng + g]);
        }
    }
    out
}

/// Applies the activation elementwise; the counterpart of [`layer_norm`] for
/// reproducing the block's hidden activations outside the block itself.
pub fn apply_activation(m: &Tensor2D, act: Activation) -> Tensor2D {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = act.apply(*v);
    }
    out
}

struct ForwardTrace {
    xhat: Tensor2D,
    ln_out: Tensor2D,
    w1t: Tensor2D,
    h1: Tensor2D,
    act: Tensor2D,
    w2t: Tensor2D,
    y: Tensor2D,
}

fn forward_trace(
    block: &QuantBlock,
    params: &TrainableParams,
    x: &Tensor2D,
) -> Result<ForwardTrace, DqError> {
    params.validate_for(block)?;
    if x.cols() != block.width {
        return Err(DqError::InvalidData(format!(
            "input has {} features, block expects {}",
            x.cols(),
            block.width
        )));
    }
    let (ln_out, xhat) = layer_norm(x, &params.norm_gain, &params.norm_bias);
    let w1t = dequant_with(
        &block.w1,
        &params.scales1,
        &params.zeros1,
        block.layer1.group_count,
    );
    let h1 = ln_out.matmul(&w1t);
    let act = apply_activation(&h1, block.activation);
    let w2t = dequant_with(
        &block.w2,
        &params.scales2,
        &params.zeros2,
        block.layer2.group_count,
    );
    let y = act.matmul(&w2t);
    Ok(ForwardTrace {
        xhat,
        ln_out,
        w1t,
        h1,
        act,
        w2t,
        y,
    })
}

/// y = W̃₂ · act(W̃₁ · LN(x)) per row, with both W̃ᵢ rebuilt on the fly from
/// the frozen codes and the current trainable parameters.
pub fn block_forward(
    block: &QuantBlock,
    params: &TrainableParams,
    x: &Tensor2D,
) -> Result<Tensor2D, DqError> {
    Ok(forward_trace(block, params, x)?.y)
}

/// Same pipeline with explicit full-precision weight matrices; used to
/// compute reference outputs.
pub fn float_block_forward(
    w1: &Tensor2D,
    w2: &Tensor2D,
    gain: &[f64],
    bias: &[f64],
    activation: Activation,
    x: &Tensor2D,
) -> Result<Tensor2D, DqError> {
    if x.cols() != w1.rows() || w1.cols() != w2.rows() || gain.len() != x.cols() {
        return Err(DqError::InvalidData(format!(
            "float block shapes do not chain: x {}×{}, w1 {}×{}, w2 {}×{}",
            x.rows(),
            x.cols(),
            w1.rows(),
            w1.cols(),
            w2.rows(),
            w2.cols()
        )));
    }
    let (ln_out, _) = layer_norm(x, gain, bias);
    let h1 = ln_out.matmul(w1);
    let act = apply_activation(&h1, activation);
    Ok(act.matmul(w2))
}

fn check_ref(x: &Tensor2D, y_ref: &Tensor2D, width: usize) -> Result<(), DqError> {
    if y_ref.rows() != x.rows() || y_ref.cols() != width {
        return Err(DqError::InvalidData(format!(
            "reference outputs are {}×{}, expected {}×{width}",
            y_ref.rows(),
            y_ref.cols(),
            x.rows()
        )));
    }
    Ok(())
}

/// Mean over batch rows of the squared error ‖ŷ − y_ref‖².
pub fn block_loss(
    block: &QuantBlock,
    params: &TrainableParams,
    x: &Tensor2D,
    y_ref: &Tensor2D,
) -> Result<f64, DqError> {
    check_ref(x, y_ref, block.width)?;
    let y = block_forward(block, params, x)?;
    Ok(loss_of(&y, y_ref))
}

fn loss_of(y: &Tensor2D, y_ref: &Tensor2D) -> f64 {
    let n = y.rows();
    let mut total = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for (a, b) in y.row(r).iter().zip(y_ref.row(r)) {
            let e = a - b;
            row += e * e;
        }
        total += row;
    }
    total / n as f64
}

/// Hand-derived reverse-mode gradients of `block_loss` with respect to every
/// trainable parameter. Integer codes receive no gradient. Returns the loss
/// alongside so training does one forward pass per step.
pub fn block_gradients(
    block: &QuantBlock,
    params: &TrainableParams,
    x: &Tensor2D,
    y_ref: &Tensor2D,
) -> Result<(f64, BlockGradients), DqError> {
    check_ref(x, y_ref, block.width)?;
    let tr = forward_trace(block, params, x)?;
    let n = x.rows();
    let loss = loss_of(&tr.y, y_ref);

    // dL/dY for the mean-of-squared-rows loss.
    let mut dy = Tensor2D::zeros(n, block.width);
    for r in 0..n {
        for c in 0..block.width {
            dy.set(r, c, 2.0 * (tr.y.get(r, c) - y_ref.get(r, c)) / n as f64);
        }
    }

    let mut grads = params.zeros_like();

    // Second linear layer: dW̃₂ = actᵀ·dY, folded per group onto (s₂, z₂).
    let dw2t = tr.act.transpose().matmul(&dy);
    fold_affine_grads(
        &dw2t,
        &block.w2,
        block.layer2.group_count,
        &mut grads.scales2,
        &mut grads.zeros2,
    );

    // Through the activation into the first linear layer.
    let dact = dy.matmul(&tr.w2t.transpose());
    let mut dh1 = dact;
    for (v, h) in dh1.data_mut().iter_mut().zip(tr.h1.data()) {
        *v *= block.activation.derivative(*h);
    }
    let dw1t = tr.ln_out.transpose().matmul(&dh1);
    fold_affine_grads(
        &dw1t,
        &block.w1,
        block.layer1.group_count,
        &mut grads.scales1,
        &mut grads.zeros1,
    );

    // Into the normalization parameters; x itself is data, not trainable.
    let dln = dh1.matmul(&tr.w1t.transpose());
    for r in 0..n {
        for k in 0..block.width {
            grads.norm_gain[k] += dln.get(r, k) * tr.xhat.get(r, k);
            grads.norm_bias[k] += dln.get(r, k);
        }
    }

    Ok((loss, grads))
}

/// ds[j,g] = Σ_{i∈g} dW̃[i,j]·w[i,j]; dz[j,g] = Σ_{i∈g} dW̃[i,j].
fn fold_affine_grads(dwt: &Tensor2D, w: &Tensor2D, ng: usize, ds: &mut [f64], dz: &mut [f64]) {
    let (d_in, d_out) = (w.rows(), w.cols());
    let rep = d_in / ng;
    for i in 0..d_in {
        let g = i / rep;
        for j in 0..d_out {
            ds[j * ng + g] += dwt.get(i, j) * w.get(i, j);
            dz[j * ng + g] += dwt.get(i, j);
        }
    }
}

/// Training setup for one block.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

fn take_rows(x: &Tensor2D, idx: &[usize]) -> Tensor2D {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &r in idx {
        data.extend_from_slice(x.row(r));
    }
    Tensor2D::from_parts(idx.len(), x.cols(), data)
}

/// Minibatch Adam over the trainable parameters with a per-epoch seeded
/// shuffle. The full-set loss is evaluated after every epoch and the best
/// parameters seen are returned, so the reported final loss never exceeds
/// the initial loss.
pub fn finetune_block(
    block: &QuantBlock,
    params: &TrainableParams,
    x: &Tensor2D,
    y_ref: &Tensor2D,
    opts: &FinetuneOptions,
) -> Result<(TrainableParams, FinetuneReport), DqError> {
    check_ref(x, y_ref, block.width)?;
    params.validate_for(block)?;
    if opts.batch_size == 0 {
        return Err(DqError::InvalidConfig("batch size must be >= 1".into()));
    }
    if x.rows() == 0 {
        return Err(DqError::InvalidData("calibration set is empty".into()));
    }

    let initial_loss = block_loss(block, params, x, y_ref)?;
    let mut current = params.clone();
    let mut best = (initial_loss, params.clone(), None::<usize>);
    let mut state = AdamState::new(current.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let xb = take_rows(x, chunk);
            let yb = take_rows(y_ref, chunk);
            let (_, grads) = block_gradients(block, &current, &xb, &yb)?;
            let mut flat = current.to_flat();
            adam_step(&mut flat, &grads.to_flat(), &mut state, &opts.adam);
            current.assign_from_flat(&flat);
        }
        let full = block_loss(block, &current, x, y_ref)?;
        epoch_losses.push(full);
        if full < best.0 {
            best = (full, current.clone(), Some(epoch));
        }
    }

    let (final_loss, best_params, best_epoch) = best;
    Ok((
        best_params,
        FinetuneReport {
            initial_loss,
            epoch_losses,
            final_loss,
            best_epoch,
        },
    ))
}

/// On-disk description of a block: dimensions plus paths (relative to the
/// description file) to the normalization tensors, the full-precision weight
/// tensors, and the two quantized layer files.
#[derive(Debug, Clone, Deserialize)]
pub struct BlockFile {
    pub block: BlockSection,
    pub params: ParamsSection,
    pub quantized: QuantSection,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BlockSection {
    pub width: usize,
    pub hidden: usize,
    pub activation: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ParamsSection {
    pub norm_gain: PathBuf,
    pub norm_bias: PathBuf,
    pub weights1: PathBuf,
    pub weights2: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QuantSection {
    pub linear1: PathBuf,
    pub linear2: PathBuf,
}

/// A block file with every artifact loaded and all paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedBlock {
    pub block: QuantBlock,
    pub params: TrainableParams,
    pub float_w1: Tensor2D,
    pub float_w2: Tensor2D,
    /// Resolved paths in file order: gain, bias, linear1, linear2.
    pub norm_gain_path: PathBuf,
    pub norm_bias_path: PathBuf,
    pub linear1_path: PathBuf,
    pub linear2_path: PathBuf,
}

fn as_vector(t: &Tensor2D, what: &str, len: usize) -> Result<Vec<f64>, DqError> {
    if t.rows().min(t.cols()) != 1 || t.data().len() != len {
        return Err(DqError::InvalidData(format!(
            "{what} must be a vector of length {len}, got {}×{}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(t.data().to_vec())
}

/// Parses a block description file and loads everything it references.
pub fn load_block_file(path: &Path) -> Result<LoadedBlock, DqError> {
    let text = std::fs::read_to_string(path).map_err(|e| DqError::io(path, e))?;
    let file: BlockFile =
        toml::from_str(&text).map_err(|e| DqError::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let activation: Activation = file.block.activation.parse()?;
    let linear1_path = resolve(&file.quantized.linear1);
    let linear2_path = resolve(&file.quantized.linear2);
    let layer1 = read_quant(&linear1_path)?;
    let layer2 = read_quant(&linear2_path)?;
    if layer1.d_in != file.block.width || layer1.d_out != file.block.hidden {
        return Err(DqError::InvalidData(format!(
            "first quantized layer is {}→{}, block declares {}→{}",
            layer1.d_in, layer1.d_out, file.block.width, file.block.hidden
        )));
    }
    let block = QuantBlock::new(activation, layer1, layer2)?;

    let norm_gain_path = resolve(&file.params.norm_gain);
    let norm_bias_path = resolve(&file.params.norm_bias);
    let gain = as_vector(&read_tensor(&norm_gain_path)?, "norm gain", block.width)?;
    let bias = as_vector(&read_tensor(&norm_bias_path)?, "norm bias", block.width)?;

    let float_w1 = read_tensor(&resolve(&file.params.weights1))?;
    let float_w2 = read_tensor(&resolve(&file.params.weights2))?;
    if float_w1.rows() != block.width
        || float_w1.cols() != block.hidden
        || float_w2.rows() != block.hidden
        || float_w2.cols() != block.width
    {
        return Err(DqError::InvalidData(format!(
            "full-precision weights are {}×{} and {}×{}, block declares {}→{}→{}",
            float_w1.rows(),
            float_w1.cols(),
            float_w2.rows(),
            float_w2.cols(),
            block.width,
            block.hidden,
            block.width
        )));
    }

    let params = block.initial_params(gain, bias)?;
    Ok(LoadedBlock {
        block,
        params,
        float_w1,
        float_w2,
        norm_gain_path,
        norm_bias_path,
        linear1_path,
        linear2_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::pack_codes;
    use rand::Rng;
    use rand::SeedableRng;

    /// Builds a quantized layer directly from integer codes laid out as a
    /// d_in × d_out matrix of columns.
    fn layer_from(
        codes_cols: &[Vec<i32>],
        scales: Vec<f32>,
        zeros: Vec<f32>,
        ng: usize,
    ) -> QuantizedLayer {
        let d_in = codes_cols[0].len();
        let d_out = codes_cols.len();
        let mut codes = Vec::new();
        for col in codes_cols {
            codes.extend(pack_codes(col, 2, -2).unwrap());
        }
        QuantizedLayer {
            d_in,
            d_out,
            bits: 2,
            alpha: -2,
            beta: 1,
            group_count: ng,
            codes,
            scales,
            zeros,
        }
    }

    fn identity_layer(d: usize) -> QuantizedLayer {
        let cols: Vec<Vec<i32>> = (0..d)
            .map(|j| (0..d).map(|i| i32::from(i == j)).collect())
            .collect();
        layer_from(&cols, vec![1.0; d], vec![0.0; d], 1)
    }

    fn random_block(
        rng: &mut rand_chacha::ChaCha8Rng,
        d: usize,
        h: usize,
        act: Activation,
    ) -> (QuantBlock, TrainableParams) {
        let cols1: Vec<Vec<i32>> = (0..h)
            .map(|_| (0..d).map(|_| rng.random_range(-2..=1)).collect())
            .collect();
        let cols2: Vec<Vec<i32>> = (0..d)
            .map(|_| (0..h).map(|_| rng.random_range(-2..=1)).collect())
            .collect();
        let s1: Vec<f32> = (0..h).map(|_| rng.random_range(0.2..1.0)).collect();
        let z1: Vec<f32> = (0..h).map(|_| rng.random_range(-0.3..0.3)).collect();
        let s2: Vec<f32> = (0..d).map(|_| rng.random_range(0.2..1.0)).collect();
        let z2: Vec<f32> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
        let block = QuantBlock::new(
            act,
            layer_from(&cols1, s1, z1, 1),
            layer_from(&cols2, s2, z2, 1),
        )
        .unwrap();
        let gain: Vec<f64> = (0..d).map(|_| rng.random_range(0.8..1.2)).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-0.2..0.2)).collect();
        let params = block.initial_params(gain, bias).unwrap();
        (block, params)
    }

    fn random_input(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Tensor2D {
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor2D::new(n, d, data).unwrap()
    }

    #[test]
    fn layer_norm_applies_epsilon_correction() {
        // Identity layers and ReLU expose LN directly on the positive lane.
        let block =
            QuantBlock::new(Activation::Relu, identity_layer(2), identity_layer(2)).unwrap();
        let params = block
            .initial_params(vec![1.0, 1.0], vec![0.0, 0.0])
            .unwrap();
        let x = Tensor2D::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = block_forward(&block, &params, &x).unwrap();
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.get(0, 0) - expected).abs() < 1e-15);
        assert_eq!(y.get(0, 1), 0.0);
    }

    #[test]
    fn all_zero_scales_and_zeros_annihilate_any_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Relu, Activation::Gelu] {
            let (block, mut params) = random_block(&mut rng, 3, 5, act);
            for v in params
                .scales1
                .iter_mut()
                .chain(&mut params.zeros1)
                .chain(&mut params.scales2)
                .chain(&mut params.zeros2)
            {
                *v = 0.0;
            }
            let x = random_input(&mut rng, 4, 3);
            let y = block_forward(&block, &params, &x).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_matches_independently_composed_pipeline() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (block, params) = random_block(&mut rng, 4, 6, Activation::Gelu);
        let x = random_input(&mut rng, 5, 4);
        let y = block_forward(&block, &params, &x).unwrap();
        let w1t = block.layer1.dequantize_matrix().unwrap();
        let w2t = block.layer2.dequantize_matrix().unwrap();
        let y2 = float_block_forward(
            &w1t,
            &w2t,
            &params.norm_gain,
            &params.norm_bias,
            Activation::Gelu,
            &x,
        )
        .unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn loss_matches_three_four_five() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (block, params) = random_block(&mut rng, 4, 4, Activation::Relu);
        let x = random_input(&mut rng, 1, 4);
        let y = block_forward(&block, &params, &x).unwrap();
        let mut y_ref = y.clone();
        y_ref.set(0, 0, y.get(0, 0) - 3.0);
        y_ref.set(0, 1, y.get(0, 1) - 4.0);
        let loss = block_loss(&block, &params, &x, &y_ref).unwrap();
        assert!((loss - 25.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_joint_row_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (block, params) = random_block(&mut rng, 3, 4, Activation::Gelu);
        let x = random_input(&mut rng, 6, 3);
        let y_ref = random_input(&mut rng, 6, 3);
        let perm = [4usize, 1, 5, 0, 3, 2];
        let xp = take_rows(&x, &perm);
        let yp = take_rows(&y_ref, &perm);
        let a = block_loss(&block, &params, &x, &y_ref).unwrap();
        let b = block_loss(&block, &params, &xp, &yp).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn gradients_vanish_at_a_perfect_fit() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (block, params) = random_block(&mut rng, 4, 5, Activation::Gelu);
        let x = random_input(&mut rng, 6, 4);
        let y_ref = block_forward(&block, &params, &x).unwrap();
        let (loss, grads) = block_gradients(&block, &params, &x, &y_ref).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for act in [Activation::Relu, Activation::Gelu] {
            let (block, params) = random_block(&mut rng, 3, 4, act);
            let x = random_input(&mut rng, 5, 3);
            let y_ref = random_input(&mut rng, 5, 3);
            let (_, grads) = block_gradients(&block, &params, &x, &y_ref).unwrap();
            let flat = params.to_flat();
            let gflat = grads.to_flat();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut probe = params.clone();
                let mut fp = flat.clone();
                fp[i] += h;
                probe.assign_from_flat(&fp);
                let up = block_loss(&block, &probe, &x, &y_ref).unwrap();
                fp[i] = flat[i] - h;
                probe.assign_from_flat(&fp);
                let down = block_loss(&block, &probe, &x, &y_ref).unwrap();
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(gflat[i].abs()).max(1e-8);
                assert!(
                    (fd - gflat[i]).abs() / denom < 1e-4,
                    "{act} param {i}: analytic {} vs fd {fd}",
                    gflat[i]
                );
            }
        }
    }

    #[test]
    fn duplicating_the_batch_leaves_gradients_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let (block, params) = random_block(&mut rng, 3, 4, Activation::Gelu);
        let x = random_input(&mut rng, 4, 3);
        let y_ref = random_input(&mut rng, 4, 3);
        let idx: Vec<usize> = (0..4).chain(0..4).collect();
        let x2 = take_rows(&x, &idx);
        let y2 = take_rows(&y_ref, &idx);
        let (_, g1) = block_gradients(&block, &params, &x, &y_ref).unwrap();
        let (_, g2) = block_gradients(&block, &params, &x2, &y2).unwrap();
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn finetune_zero_epochs_changes_nothing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let (block, params) = random_block(&mut rng, 3, 4, Activation::Relu);
        let x = random_input(&mut rng, 8, 3);
        let y_ref = random_input(&mut rng, 8, 3);
        let opts = FinetuneOptions {
            epochs: 0,
            ..FinetuneOptions::default()
        };
        let (tuned, report) = finetune_block(&block, &params, &x, &y_ref, &opts).unwrap();
        assert_eq!(tuned, params);
        assert!(report.epoch_losses.is_empty());
        assert_eq!(report.final_loss, report.initial_loss);
        assert_eq!(report.best_epoch, None);
    }

    #[test]
    fn finetune_improves_a_perturbed_block() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let (block, params) = random_block(&mut rng, 4, 8, Activation::Gelu);
        let x = random_input(&mut rng, 32, 4);
        // References come from the unperturbed parameters; nudging the scales
        // creates a recoverable gap.
        let y_ref = block_forward(&block, &params, &x).unwrap();
        let mut start = params.clone();
        for v in start.scales1.iter_mut() {
            *v *= 1.05;
        }
        let opts = FinetuneOptions {
            epochs: 4,
            batch_size: 8,
            adam: AdamParams {
                lr: 1e-3,
                ..AdamParams::default()
            },
            seed: 7,
        };
        let (tuned, report) = finetune_block(&block, &start, &x, &y_ref, &opts).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert_eq!(report.epoch_losses.len(), 4);
        let recomputed = block_loss(&block, &tuned, &x, &y_ref).unwrap();
        assert_eq!(recomputed, report.final_loss);
    }

    #[test]
    fn finetune_is_deterministic_for_a_fixed_seed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        let (block, params) = random_block(&mut rng, 3, 6, Activation::Relu);
        let x = random_input(&mut rng, 16, 3);
        let y_ref = random_input(&mut rng, 16, 3);
        let opts = FinetuneOptions {
            epochs: 3,
            batch_size: 4,
            seed: 99,
            ..FinetuneOptions::default()
        };
        let (a, ra) = finetune_block(&block, &params, &x, &y_ref, &opts).unwrap();
        let (b, rb) = finetune_block(&block, &params, &x, &y_ref, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
    }

    #[test]
    fn activation_parses_and_rejects() {
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
        assert_eq!("GELU".parse::<Activation>().unwrap(), Activation::Gelu);
        assert!("swish".parse::<Activation>().is_err());
    }
}
