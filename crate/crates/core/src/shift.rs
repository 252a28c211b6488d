//! Layer-wise activation shifts caused by input corruptions.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::data::{corrupt_dataset, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::metrics::compensated_sum;
use crate::model::{LayerSpec, Network};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// `f^ℓ(x_c) - f^ℓ(x)` from two plain forward passes.
pub fn exact_shift(net: &Network, x: &Tensor, x_c: &Tensor, layer: usize) -> Result<Tensor> {
    if x.shape() != x_c.shape() {
        return Err(Error::shape(format!(
            "clean input {:?} and corrupted input {:?} differ",
            x.shape(),
            x_c.shape()
        )));
    }
    let clean = net.layer_output(x, layer, None)?;
    let corrupted = net.layer_output(x_c, layer, None)?;
    corrupted.zip_map(&clean, |a, b| a - b)
}

/// First-order propagation of an input shift `g0` through the network,
/// linearizing each activation at the clean pre-activations. Entry `ℓ` of
/// the result approximates the shift of layer `ℓ`'s output.
pub fn taylor_shift(net: &Network, x: &Tensor, g0: &Tensor) -> Result<Vec<Tensor>> {
    if x.shape() != g0.shape() {
        return Err(Error::shape(format!(
            "input {:?} and shift {:?} differ",
            x.shape(),
            g0.shape()
        )));
    }
    let trace = net.trace(x)?;
    let mut shifts = vec![g0.clone()];
    let mut g = g0.clone();
    for (i, layer) in net.spec().layers.iter().enumerate() {
        g = match layer {
            LayerSpec::GlobalAvgPool => kernels::global_avg_pool(&g)?,
            LayerSpec::Dense { inputs, .. } => {
                let w = &net.params()[i].as_ref().expect("dense parameters").weight;
                let flat = g.reshape(vec![x.rows(), *inputs])?;
                kernels::matmul(&flat, w)?
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let w = &net.params()[i].as_ref().expect("conv parameters").weight;
                kernels::conv2d(&g, w, *stride, *padding)?
            }
        };
        if let Some(pre) = &trace.pre[i] {
            let act = layer.activation();
            g = g.zip_map(pre, |d, h| d * act.derivative(h))?;
        }
        shifts.push(g.clone());
    }
    Ok(shifts)
}

fn row_squared_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v * v).sum()).collect()
}

/// `(1/N) Σ_n ||g^L(x_n)||²` for the given corruption.
pub fn mean_square_shift(net: &Network, data: &Dataset, corruption: &CorruptionSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("mean square shift needs a non-empty dataset"));
    }
    let corrupted = corrupt_dataset(data, corruption)?;
    mean_square_shift_between(net, data, &corrupted)
}

/// Mean squared final-layer shift between paired clean and corrupted sets.
pub fn mean_square_shift_between(net: &Network, clean: &Dataset, corrupted: &Dataset) -> Result<f64> {
    let depth = net.spec().depth();
    let mut norms = Vec::with_capacity(clean.len());
    for start in (0..clean.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(clean.len())).collect();
        let g = exact_shift(net, &clean.images.select_rows(&idx), &corrupted.images.select_rows(&idx), depth)?;
        norms.extend(row_squared_norms(&g));
    }
    Ok(compensated_sum(norms) / clean.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShift {
    pub layer: usize,
    /// Mean over images of `||g^ℓ||₂`.
    pub exact_norm: f64,
    pub taylor_norm: f64,
    /// Mean over images of `||taylor - exact|| / ||exact||`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub corruption: CorruptionSpec,
    pub layers: Vec<LayerShift>,
    pub mean_square_shift: f64,
}

impl ShiftReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,exact_norm,taylor_norm,relative_error,mean_square_shift\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer, l.exact_norm, l.taylor_norm, l.relative_error, self.mean_square_shift
            ));
        }
        out
    }
}

/// Exact and approximate per-layer shifts averaged over a dataset.
pub fn shift_report(net: &Network, data: &Dataset, corruption: &CorruptionSpec) -> Result<ShiftReport> {
    if data.is_empty() {
        return Err(Error::invalid("shift report needs a non-empty dataset"));
    }
    let corrupted = corrupt_dataset(data, corruption)?;
    let depth = net.spec().depth();
    let mut sums = vec![[0.0f64; 3]; depth + 1];
    for start in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
        let x = data.images.select_rows(&idx);
        let xc = corrupted.images.select_rows(&idx);
        let g0 = xc.zip_map(&x, |a, b| a - b)?;
        let approx = taylor_shift(net, &x, &g0)?;
        for (l, ta) in approx.iter().enumerate() {
            let ex = exact_shift(net, &x, &xc, l)?;
            let diff = ta.zip_map(&ex, |a, b| a - b)?;
            let (en, tn, dn) = (row_squared_norms(&ex), row_squared_norms(ta), row_squared_norms(&diff));
            for i in 0..idx.len() {
                let e = en[i].sqrt();
                sums[l][0] += e;
                sums[l][1] += tn[i].sqrt();
                sums[l][2] += if e > 0.0 { dn[i].sqrt() / e } else { 0.0 };
            }
        }
    }
    let n = data.len() as f64;
    Ok(ShiftReport {
        corruption: *corruption,
        layers: sums
            .iter()
            .enumerate()
            .map(|(layer, s)| LayerShift {
                layer,
                exact_norm: s[0] / n,
                taylor_norm: s[1] / n,
                relative_error: s[2] / n,
            })
            .collect(),
        mean_square_shift: mean_square_shift_between(net, data, &corrupted)?,
    })
}
