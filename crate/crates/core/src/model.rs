//! Conditional velocity MLP with a frozen backbone and a trainable adapter.
//!
//! The network input is `[x, sigma features, one-hot condition]`. Every hidden
//! layer `l` computes `tanh(h·W_l + b_l + (h·D_l)·U_l)`, where `(D_l, U_l)` is the
//! adapter branch. `U_l` starts at zero, so a fresh adapter leaves the backbone
//! output untouched.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTensor, Gradients};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const SIGMA_FREQS: usize = 3;
const CHECKPOINT_FORMAT: &str = "rats-params-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub dim: usize,
    pub conditions: usize,
    pub hidden: Vec<usize>,
    pub adapter_rank: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.conditions == 0 {
            return Err(Error::InvalidArgument("dim and conditions must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "hidden widths must be non-empty and positive: {:?}",
                self.hidden
            )));
        }
        if self.adapter_rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be positive".into()));
        }
        Ok(())
    }

    /// `σ` followed by `sin(kπσ), cos(kπσ)` for `k = 1..=3`.
    pub fn sigma_features() -> usize {
        1 + 2 * SIGMA_FREQS
    }

    pub fn input_width(&self) -> usize {
        self.dim + Self::sigma_features() + self.conditions
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn backbone_layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::default();
        for (l, (i, o)) in self.layer_dims().into_iter().enumerate() {
            layout.push(format!("layer{l}.weight"), vec![i, o]);
            layout.push(format!("layer{l}.bias"), vec![o]);
        }
        layout
    }

    pub fn adapter_layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::default();
        let dims = self.layer_dims();
        for (l, &(i, o)) in dims[..dims.len() - 1].iter().enumerate() {
            layout.push(format!("adapter{l}.down"), vec![i, self.adapter_rank]);
            layout.push(format!("adapter{l}.up"), vec![self.adapter_rank, o]);
        }
        layout
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        let offset = self.total();
        self.entries.push(LayoutEntry {
            name,
            offset,
            shape,
        });
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }
}

/// A flat parameter vector with its layout. Used for both backbone and adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layout: ParamLayout,
    values: Vec<f64>,
}

pub type AdapterState = ParamSet;

impl ParamSet {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "layout holds {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, entry: &LayoutEntry) -> Tensor {
        let data = self.values[entry.offset..entry.offset + entry.len()].to_vec();
        Tensor::new(entry.shape.clone(), data).expect("layout entry is consistent")
    }

    /// One leaf per layout entry. Trainable leaves collect gradients.
    pub fn bind(&self, trainable: bool) -> BoundParams {
        let leaves = self
            .layout
            .entries
            .iter()
            .map(|e| {
                let t = self.tensor(e);
                if trainable {
                    DiffTensor::param(t)
                } else {
                    DiffTensor::constant(t)
                }
            })
            .collect();
        BoundParams { leaves }
    }

    /// Flattens the gradients of `bound` into this layout. Missing entries are zero.
    pub fn flatten_grads(&self, bound: &BoundParams, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (e, leaf) in self.layout.entries.iter().zip(&bound.leaves) {
            if let Some(g) = grads.get(leaf) {
                out[e.offset..e.offset + e.len()].copy_from_slice(g.data());
            }
        }
        out
    }

    fn expect_layout(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(
                "parameter sets have different layouts".into(),
            ));
        }
        Ok(())
    }

    /// `self ← γ·self + (1−γ)·student`.
    pub fn ema_update(&mut self, student: &Self, gamma: f64) -> Result<()> {
        self.expect_layout(student)?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("EMA decay {gamma} outside [0, 1]")));
        }
        for (t, s) in self.values.iter_mut().zip(&student.values) {
            *t = gamma * *t + (1.0 - gamma) * s;
        }
        Ok(())
    }

    pub fn clone_as_teacher(&self) -> Self {
        self.clone()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Leaves bound from a [`ParamSet`], in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    leaves: Vec<DiffTensor>,
}

impl BoundParams {
    pub fn leaves(&self) -> &[DiffTensor] {
        &self.leaves
    }

    /// Same values as constants.
    pub fn detached(&self) -> Self {
        Self {
            leaves: self.leaves.iter().map(DiffTensor::stop_gradient).collect(),
        }
    }

    pub fn from_leaves(leaves: Vec<DiffTensor>) -> Self {
        Self { leaves }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    arch: Architecture,
    backbone: ParamSet,
}

impl VelocityField {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let layout = arch.backbone_layout();
        let mut values = vec![0.0; layout.total()];
        for e in layout.entries() {
            if e.shape.len() == 2 {
                let scale = 1.0 / (e.shape[0] as f64).sqrt();
                for v in &mut values[e.offset..e.offset + e.len()] {
                    *v = rng.normal() * scale;
                }
            }
        }
        let backbone = ParamSet::new(layout, values)?;
        Ok(Self { arch, backbone })
    }

    pub fn from_parts(arch: Architecture, backbone: ParamSet) -> Result<Self> {
        arch.validate()?;
        if backbone.layout != arch.backbone_layout() {
            return Err(Error::LayoutMismatch(
                "backbone does not match the architecture".into(),
            ));
        }
        Ok(Self { arch, backbone })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn backbone(&self) -> &ParamSet {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut ParamSet {
        &mut self.backbone
    }

    /// Random down-projections, zero up-projections.
    pub fn init_adapter(&self, rng: &mut RngStream) -> AdapterState {
        let mut adapter = ParamSet::zeros(self.arch.adapter_layout());
        for e in adapter.layout.entries.clone() {
            if e.name.ends_with(".down") {
                let scale = 1.0 / (e.shape[0] as f64).sqrt();
                for v in &mut adapter.values[e.offset..e.offset + e.len()] {
                    *v = rng.normal() * scale;
                }
            }
        }
        adapter
    }

    /// Velocity for a batch. `sigma` holds one level per row.
    pub fn forward(
        &self,
        backbone: &BoundParams,
        adapter: Option<&BoundParams>,
        x: &DiffTensor,
        sigma: &[f64],
        cond: &[usize],
    ) -> Result<DiffTensor> {
        let b = self.check_inputs(x, sigma, cond)?;
        let features = self.features(sigma, cond, b);
        let mut h = DiffTensor::concat_cols(&[x.clone(), features])?;
        let n_layers = self.arch.hidden.len() + 1;
        let bb = backbone.leaves();
        for l in 0..n_layers {
            let mut z = h.matmul(&bb[2 * l])?.add_row_vector(&bb[2 * l + 1])?;
            if l + 1 < n_layers {
                if let Some(a) = adapter {
                    let a = a.leaves();
                    z = z.add(&h.matmul(&a[2 * l])?.matmul(&a[2 * l + 1])?)?;
                }
                h = z.tanh();
            } else {
                h = z;
            }
        }
        Ok(h)
    }

    /// Velocity at a single noise level shared by the whole batch.
    pub fn eval_velocity(
        &self,
        backbone: &BoundParams,
        adapter: Option<&BoundParams>,
        x: &DiffTensor,
        sigma: f64,
        cond: &[usize],
    ) -> Result<DiffTensor> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1]")));
        }
        let rows = x.shape().first().copied().unwrap_or(0);
        self.forward(backbone, adapter, x, &vec![sigma; rows], cond)
    }

    fn check_inputs(&self, x: &DiffTensor, sigma: &[f64], cond: &[usize]) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.arch.dim {
            return Err(Error::InvalidArgument(format!(
                "expected input [batch, {}], got {:?}",
                self.arch.dim, shape
            )));
        }
        let b = shape[0];
        if sigma.len() != b || cond.len() != b {
            return Err(Error::InvalidArgument(format!(
                "batch {b} with {} sigmas and {} conditions",
                sigma.len(),
                cond.len()
            )));
        }
        if let Some(c) = cond.iter().find(|&&c| c >= self.arch.conditions) {
            return Err(Error::InvalidArgument(format!(
                "condition {c} outside 0..{}",
                self.arch.conditions
            )));
        }
        Ok(b)
    }

    fn features(&self, sigma: &[f64], cond: &[usize], b: usize) -> DiffTensor {
        let width = Architecture::sigma_features() + self.arch.conditions;
        let mut data = Vec::with_capacity(b * width);
        for (&s, &c) in sigma.iter().zip(cond) {
            data.push(s);
            for k in 1..=SIGMA_FREQS {
                let a = std::f64::consts::PI * k as f64 * s;
                data.push(a.sin());
                data.push(a.cos());
            }
            data.extend((0..self.arch.conditions).map(|j| if j == c { 1.0 } else { 0.0 }));
        }
        DiffTensor::constant(Tensor::matrix(b, width, data).expect("feature width"))
    }

    /// Conditional flow-matching loss on `x_σ = (1−σ)x0 + σε` against `ε − x0`.
    ///
    /// Gradients reach whichever of `backbone`/`adapter` was bound trainable.
    pub fn pretrain_loss(
        &self,
        backbone: &BoundParams,
        adapter: Option<&BoundParams>,
        x0: &Tensor,
        cond: &[usize],
        rng: &mut RngStream,
    ) -> Result<DiffTensor> {
        let b = x0.rows();
        if b == 0 || x0.is_empty() {
            return Err(Error::InvalidArgument("empty pretraining batch".into()));
        }
        let sigma: Vec<f64> = (0..b)
            .map(|_| loop {
                let u = rng.uniform();
                if u > 0.0 {
                    break u;
                }
            })
            .collect();
        let eps = rng.normal_tensor(x0.shape());
        let d = x0.cols();
        let mut xt = Vec::with_capacity(b * d);
        let mut target = Vec::with_capacity(b * d);
        for r in 0..b {
            for j in 0..d {
                let (x, e) = (x0.row(r)[j], eps.row(r)[j]);
                xt.push((1.0 - sigma[r]) * x + sigma[r] * e);
                target.push(e - x);
            }
        }
        let xt = DiffTensor::constant(Tensor::new(x0.shape().to_vec(), xt)?);
        let target = DiffTensor::constant(Tensor::new(x0.shape().to_vec(), target)?);
        let v = self.forward(backbone, adapter, &xt, &sigma, cond)?;
        Ok(v.sub(&target)?.square().mean())
    }
}

/// `x − σ·v`.
pub fn x0_predict(x: &DiffTensor, sigma: f64, v: &DiffTensor) -> Result<DiffTensor> {
    Ok(x.sub(&v.scale(sigma))?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Backbone,
    Adapter,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub role: ParamRole,
    pub arch: Architecture,
    pub layout: ParamLayout,
    pub count: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// One JSON header line followed by the values as little-endian `f64`.
pub fn save_checkpoint(
    path: &Path,
    role: ParamRole,
    arch: &Architecture,
    params: &ParamSet,
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        role,
        arch: arch.clone(),
        layout: params.layout.clone(),
        count: params.len(),
        config_hash: config_hash.into(),
        seed,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for v in &params.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if header.count != header.layout.total() {
        return Err(bad(format!(
            "header count {} disagrees with layout size {}",
            header.count,
            header.layout.total()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.count * 8 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            header.count * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParamSet::new(header.layout.clone(), values)?;
    Ok((header, params))
}
