//! Trainable components and their exact gradients.
//!
//! All networks are stacks of affine layers with GELU between them, evaluated
//! on row-major batches (`B x features`). Backward passes are written by hand
//! and accumulate into parameter structures of the same shape as the model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossSpec};
use crate::synthgen::rng;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh form.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Affine layer `y = x W^T + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn identity(n: usize) -> Self {
        Linear {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }

    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    pub fn fan_in_uniform(out: usize, inp: usize, r: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((out, inp), || r.random_range(-bound..bound)),
            bias: Array1::from_shape_simple_fn(out, || r.random_range(-bound..bound)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns `dL/dx`; accumulates parameter gradients into `grad` if given.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            g.weight += &dy.t().dot(&x);
            g.bias += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight)
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.out_dim(), self.in_dim())
    }
}

/// Intermediate values of an MLP stack needed for its backward pass.
#[derive(Clone, Debug)]
struct StackTape {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
}

/// `layers[0] -> GELU -> layers[1] -> ... -> layers[n-1]` (no activation after the last).
fn stack_forward(layers: &[Linear], x: ArrayView2<f64>) -> (Array2<f64>, StackTape) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut preacts = Vec::with_capacity(layers.len());
    let mut h = x.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let z = layer.forward(h.view());
        inputs.push(h);
        if i + 1 < layers.len() {
            h = z.mapv(gelu);
            preacts.push(z);
        } else {
            h = z;
        }
    }
    (h, StackTape { inputs, preacts })
}

fn stack_backward(
    layers: &[Linear],
    tape: &StackTape,
    dout: Array2<f64>,
    mut grads: Option<&mut [Linear]>,
) -> Array2<f64> {
    let mut d = dout;
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            d.zip_mut_with(&tape.preacts[i], |g, &z| *g *= gelu_grad(z));
        }
        let g = grads.as_deref_mut().map(|gs| &mut gs[i]);
        d = layers[i].backward(tape.inputs[i].view(), d.view(), g);
    }
    d
}

// ---------------------------------------------------------------------------
// Parameter traversal

/// Uniform access to the tensors of a parameter structure, in a fixed order.
pub trait Params {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over all values in traversal order.
    fn checksum(&self) -> String {
        let t = self.named_tensors();
        array::values_sha256(t.iter().flat_map(|(_, v)| v.iter()))
    }

    fn flat(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }
}

fn linear_tensors<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    out.push((format!("{prefix}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{prefix}.bias"), l.bias.view().into_dyn()));
}

fn linear_tensors_mut<'a>(l: &'a mut Linear, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
    out.push(l.weight.view_mut().into_dyn());
    out.push(l.bias.view_mut().into_dyn());
}

// ---------------------------------------------------------------------------
// HRF adapter

/// Subject-specific correction `x_hat = x + f(x)` applied to pooled voxels.
///
/// `layers` is the residual branch `f`; with `residual == false` the output is
/// `f(x)` alone (single-layer ablation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub layers: Vec<Linear>,
    pub residual: bool,
}

impl AdapterParams {
    /// Identity map at initialization. The last layer of the branch is zero;
    /// inner layers of deeper variants are fan-in uniform so that gradients
    /// can reach them. The non-residual variant starts as the identity matrix.
    pub fn init(len: usize, depth: usize, residual: bool, r: &mut ChaCha8Rng) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(Error::InvalidInput(format!(
                "adapter depth {depth} not in 1..=3"
            )));
        }
        if !residual && depth != 1 {
            return Err(Error::InvalidInput(
                "non-residual adapter must have depth 1".into(),
            ));
        }
        let mut layers: Vec<Linear> = (0..depth - 1)
            .map(|_| Linear::fan_in_uniform(len, len, r))
            .collect();
        layers.push(if residual {
            Linear::zeros(len, len)
        } else {
            Linear::identity(len)
        });
        Ok(AdapterParams { layers, residual })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        AdapterParams {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            residual: self.residual,
        }
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.len() {
            return Err(Error::shape("adapter input", self.len(), x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x)?.0)
    }

    fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, StackTape)> {
        self.check_input(x)?;
        let (branch, tape) = stack_forward(&self.layers, x);
        Ok((if self.residual { &x + &branch } else { branch }, tape))
    }

    fn backward(&self, tape: &StackTape, dout: Array2<f64>, grads: &mut AdapterParams) {
        stack_backward(&self.layers, tape, dout, Some(&mut grads.layers));
    }
}

/// Applies the adapter to one pooled vector.
pub fn adapter_forward(
    x: &crate::spectral::PooledVoxels,
    p: &AdapterParams,
) -> Result<crate::spectral::PooledVoxels> {
    let row = ArrayView2::from_shape((1, x.len()), &x.values)
        .map_err(|_| Error::shape("adapter input", p.len(), x.len()))?;
    let y = p.forward(row)?;
    Ok(crate::spectral::PooledVoxels {
        values: y.row(0).to_vec(),
        ..x.clone()
    })
}

impl Params for AdapterParams {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            linear_tensors(&format!("adapter.{i}"), l, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            linear_tensors_mut(l, &mut out);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Brain encoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    /// `h + fc[1](gelu(fc[0](h)))`
    pub fc: [Linear; 2],
}

/// Backbone (input projection, residual MLP blocks, output projection),
/// contrastive projector and prior head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub input_proj: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output_proj: Linear,
    pub projector: Vec<Linear>,
    pub prior_head: Vec<Linear>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_len: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub prior_hidden: usize,
    pub adapter_depth: usize,
    pub adapter_residual: bool,
}

impl ModelDims {
    pub fn new(model: &ModelConfig, input_len: usize, embed_dim: usize) -> Self {
        ModelDims {
            input_len,
            hidden: model.hidden,
            n_blocks: model.n_blocks,
            embed_dim,
            projector_hidden: model.projector_hidden,
            prior_hidden: model.prior_hidden,
            adapter_depth: model.adapter_depth,
            adapter_residual: model.adapter_residual,
        }
    }
}

/// Encoder outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Contrastive embedding `e_b`.
    pub brain: Array2<f64>,
    /// Prior head output.
    pub refined: Array2<f64>,
}

struct EncoderTape {
    x: Array2<f64>,
    input_pre: Array2<f64>,
    blocks: Vec<StackTape>,
    backbone_hidden: Array2<f64>,
    projector: StackTape,
    prior: StackTape,
}

impl EncoderParams {
    pub fn init(dims: &ModelDims, r: &mut ChaCha8Rng) -> Self {
        let (l, h, d) = (dims.input_len, dims.hidden, dims.embed_dim);
        let (hp, hq) = (dims.projector_hidden, dims.prior_hidden);
        EncoderParams {
            input_proj: Linear::fan_in_uniform(h, l, r),
            blocks: (0..dims.n_blocks)
                .map(|_| ResidualBlock {
                    fc: [
                        Linear::fan_in_uniform(h, h, r),
                        Linear::fan_in_uniform(h, h, r),
                    ],
                })
                .collect(),
            output_proj: Linear::fan_in_uniform(d, h, r),
            projector: vec![
                Linear::fan_in_uniform(hp, d, r),
                Linear::fan_in_uniform(hp, hp, r),
                Linear::fan_in_uniform(d, hp, r),
            ],
            prior_head: vec![
                Linear::fan_in_uniform(hq, d, r),
                Linear::fan_in_uniform(d, hq, r),
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_proj.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.output_proj.out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            input_proj: self.input_proj.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    fc: [b.fc[0].zeros_like(), b.fc[1].zeros_like()],
                })
                .collect(),
            output_proj: self.output_proj.zeros_like(),
            projector: self.projector.iter().map(Linear::zeros_like).collect(),
            prior_head: self.prior_head.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<EncoderOutput> {
        let (out, _) = self.forward_tape(x)?;
        Ok(out)
    }

    fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(EncoderOutput, EncoderTape)> {
        if x.ncols() != self.input_len() {
            return Err(Error::shape("encoder input", self.input_len(), x.ncols()));
        }
        let input_pre = self.input_proj.forward(x);
        let mut h = input_pre.mapv(gelu);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (branch, tape) = stack_forward(&b.fc, h.view());
            h += &branch;
            blocks.push(tape);
        }
        let backbone = self.output_proj.forward(h.view());
        let (brain, projector) = stack_forward(&self.projector, backbone.view());
        let (refined, prior) = stack_forward(&self.prior_head, brain.view());
        Ok((
            EncoderOutput { brain, refined },
            EncoderTape {
                x: x.to_owned(),
                input_pre,
                blocks,
                backbone_hidden: h,
                projector,
                prior,
            },
        ))
    }

    /// Backpropagates output gradients; returns `dL/dx`.
    fn backward(
        &self,
        tape: &EncoderTape,
        d_brain: &Array2<f64>,
        d_refined: &Array2<f64>,
        mut grads: Option<&mut EncoderParams>,
    ) -> Array2<f64> {
        let d_from_prior = stack_backward(
            &self.prior_head,
            &tape.prior,
            d_refined.clone(),
            grads.as_deref_mut().map(|g| g.prior_head.as_mut_slice()),
        );
        let d_brain_total = d_brain + &d_from_prior;
        let d_backbone = stack_backward(
            &self.projector,
            &tape.projector,
            d_brain_total,
            grads.as_deref_mut().map(|g| g.projector.as_mut_slice()),
        );
        let mut dh = self.output_proj.backward(
            tape.backbone_hidden.view(),
            d_backbone.view(),
            grads.as_deref_mut().map(|g| &mut g.output_proj),
        );
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let d_branch = stack_backward(
                &b.fc,
                &tape.blocks[i],
                dh.clone(),
                grads.as_deref_mut().map(|g| g.blocks[i].fc.as_mut_slice()),
            );
            dh += &d_branch;
        }
        dh.zip_mut_with(&tape.input_pre, |g, &z| *g *= gelu_grad(z));
        self.input_proj
            .backward(tape.x.view(), dh.view(), grads.map(|g| &mut g.input_proj))
    }
}

impl Params for EncoderParams {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        linear_tensors("encoder.input_proj", &self.input_proj, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            linear_tensors(&format!("encoder.block{i}.fc1"), &b.fc[0], &mut out);
            linear_tensors(&format!("encoder.block{i}.fc2"), &b.fc[1], &mut out);
        }
        linear_tensors("encoder.output_proj", &self.output_proj, &mut out);
        for (i, l) in self.projector.iter().enumerate() {
            linear_tensors(&format!("encoder.projector.{i}"), l, &mut out);
        }
        for (i, l) in self.prior_head.iter().enumerate() {
            linear_tensors(&format!("encoder.prior_head.{i}"), l, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        linear_tensors_mut(&mut self.input_proj, &mut out);
        for b in &mut self.blocks {
            for l in &mut b.fc {
                linear_tensors_mut(l, &mut out);
            }
        }
        linear_tensors_mut(&mut self.output_proj, &mut out);
        for l in &mut self.projector {
            linear_tensors_mut(l, &mut out);
        }
        for l in &mut self.prior_head {
            linear_tensors_mut(l, &mut out);
        }
        out
    }
}

/// Runs the adapter (if any) and the encoder on one pooled vector.
pub fn encoder_forward(
    x_hat: &crate::spectral::PooledVoxels,
    p: &EncoderParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let row = ArrayView2::from_shape((1, x_hat.len()), &x_hat.values)
        .map_err(|_| Error::shape("encoder input", p.input_len(), x_hat.len()))?;
    let out = p.forward(row)?;
    Ok((out.brain.row(0).to_vec(), out.refined.row(0).to_vec()))
}

// ---------------------------------------------------------------------------
// Initialization, gradients, counting

const STREAM_ADAPTER: u64 = 11;
const STREAM_ENCODER: u64 = 12;

pub fn init_params(seed: u64, dims: &ModelDims) -> Result<(AdapterParams, EncoderParams)> {
    let adapter = AdapterParams::init(
        dims.input_len,
        dims.adapter_depth,
        dims.adapter_residual,
        &mut rng(seed, STREAM_ADAPTER),
    )?;
    let encoder = EncoderParams::init(dims, &mut rng(seed, STREAM_ENCODER));
    Ok((adapter, encoder))
}

/// Which parameter sets receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub adapter: bool,
    pub encoder: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        adapter: false,
        encoder: false,
    };
    pub const ADAPTER: Trainable = Trainable {
        adapter: true,
        encoder: false,
    };
    pub const ENCODER: Trainable = Trainable {
        adapter: false,
        encoder: true,
    };
    pub const ALL: Trainable = Trainable {
        adapter: true,
        encoder: true,
    };
}

/// A training batch of pooled inputs with their targets.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B x L` pooled voxels (new subject during adaptation).
    pub inputs: Array2<f64>,
    /// `B x D` target embeddings.
    pub targets: Array2<f64>,
    /// `B x L` pooled pretrained-subject partners, row-aligned with `inputs`.
    pub partners: Option<Array2<f64>>,
}

/// Gradients mirroring the trainable parameter sets; frozen sets are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub adapter: Option<AdapterParams>,
    pub encoder: Option<EncoderParams>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.adapter.is_none() && self.encoder.is_none()
    }
}

/// Exact gradients of the objective with respect to the trainable parameters.
///
/// With `adapter == None` the pooled inputs feed the encoder directly.
pub fn grad(
    adapter: Option<&AdapterParams>,
    encoder: &EncoderParams,
    batch: &Batch,
    spec: &LossSpec,
    trainable: Trainable,
) -> Result<(LossReport, Gradients)> {
    let (x_hat, adapter_tape) = match adapter {
        Some(a) => {
            let (y, t) = a.forward_tape(batch.inputs.view())?;
            (y, Some(t))
        }
        None => (batch.inputs.clone(), None),
    };
    let (out, tape) = encoder.forward_tape(x_hat.view())?;
    let cross = batch.partners.as_ref().map(|p| (x_hat.view(), p.view()));
    let (report, og) = losses::objective(
        spec,
        out.brain.view(),
        out.refined.view(),
        batch.targets.view(),
        cross,
    )?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {:?}", report)));
    }

    let mut grads = Gradients::default();
    let need_input_grad = trainable.adapter && adapter.is_some();
    if !trainable.encoder && !need_input_grad {
        return Ok((report, grads));
    }
    let mut enc_grads = trainable.encoder.then(|| encoder.zeros_like());
    let mut d_x = encoder.backward(&tape, &og.d_brain, &og.d_refined, enc_grads.as_mut());
    grads.encoder = enc_grads;

    if let (true, Some(a), Some(t)) = (need_input_grad, adapter, adapter_tape.as_ref()) {
        if let Some(d_adapted) = &og.d_adapted {
            d_x += d_adapted;
        }
        let mut g = a.zeros_like();
        let d_branch = d_x;
        a.backward(t, d_branch, &mut g);
        grads.adapter = Some(g);
    }
    Ok((report, grads))
}

/// Number of parameters in the selected sets.
pub fn count_params(adapter: &AdapterParams, encoder: &EncoderParams, filter: Trainable) -> usize {
    let mut n = 0;
    if filter.adapter {
        n += adapter.n_params();
    }
    if filter.encoder {
        n += encoder.n_params();
    }
    n
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub seed: u64,
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    /// Tensor name -> SHA-256 of its container file.
    pub checksums: BTreeMap<String, String>,
}

pub const CHECKPOINT_META: &str = "checkpoint.json";

/// Writes one container per tensor plus `checkpoint.json`; returns
/// `(file name, sha256)` for everything written.
pub fn save_checkpoint<P: Params>(
    dir: &Path,
    params: &P,
    dims: &ModelDims,
    seed: u64,
    phase: &str,
    step: usize,
    loss: f64,
) -> Result<Vec<(String, String)>> {
    let mut written = Vec::new();
    let mut checksums = BTreeMap::new();
    for (name, t) in params.named_tensors() {
        let file = format!("{name}.msarr");
        let sha = array::write(&dir.join(&file), &t.to_owned())?;
        checksums.insert(name, sha.clone());
        written.push((file, sha));
    }
    let meta = CheckpointMeta {
        dims: *dims,
        seed,
        phase: phase.to_string(),
        step,
        loss,
        checksums,
    };
    let sha = array::write_json(&dir.join(CHECKPOINT_META), &meta)?;
    written.push((CHECKPOINT_META.to_string(), sha));
    Ok(written)
}

/// Fills `params` (already shaped) from a checkpoint directory.
pub fn load_checkpoint<P: Params>(dir: &Path, params: &mut P) -> Result<CheckpointMeta> {
    let meta_path = dir.join(CHECKPOINT_META);
    if !meta_path.exists() {
        return Err(Error::MissingArtifact {
            stage: "checkpoint".into(),
            path: meta_path,
        });
    }
    let meta: CheckpointMeta = array::read_json(&meta_path)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, mut target) in names.iter().zip(params.tensors_mut()) {
        let path = dir.join(format!("{name}.msarr"));
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: meta.phase.clone(),
                path,
            });
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let found = array::sha256_hex(&bytes);
        if let Some(expected) = meta.checksums.get(name) {
            if &found != expected {
                return Err(Error::ChecksumMismatch {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        let a = array::decode(&bytes, &path)?;
        if a.shape() != target.shape() {
            return Err(Error::shape(
                "checkpoint tensor",
                format!("{:?}", target.shape()),
                format!("{:?}", a.shape()),
            ));
        }
        target.assign(&a);
    }
    Ok(meta)
}

pub fn load_encoder(dir: &Path) -> Result<(EncoderParams, CheckpointMeta)> {
    let meta: CheckpointMeta =
        array::read_json(&dir.join(CHECKPOINT_META)).map_err(|e| match e {
            Error::Io { path, .. } => Error::MissingArtifact {
                stage: "pretrain".into(),
                path,
            },
            other => other,
        })?;
    let mut enc = EncoderParams::init(&meta.dims, &mut rng(0, 0)).zeros_like();
    let meta = load_checkpoint(dir, &mut enc)?;
    Ok((enc, meta))
}

pub fn load_adapter(dir: &Path) -> Result<(AdapterParams, CheckpointMeta)> {
    let meta: CheckpointMeta =
        array::read_json(&dir.join(CHECKPOINT_META)).map_err(|e| match e {
            Error::Io { path, .. } => Error::MissingArtifact {
                stage: "adapt".into(),
                path,
            },
            other => other,
        })?;
    let d = meta.dims;
    let mut a = AdapterParams::init(
        d.input_len,
        d.adapter_depth,
        d.adapter_residual,
        &mut rng(0, 0),
    )?
    .zeros_like();
    let meta = load_checkpoint(dir, &mut a)?;
    Ok((a, meta))
}
