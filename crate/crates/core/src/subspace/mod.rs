//! Editing vectors, per-layer prior matrices and hallucination subspaces.
//!
//! Each contrastive pair contributes one editing vector per layer, the
//! weighted mean of its hidden-state differences (perturbed minus original)
//! over response positions. Stacking the vectors of all pairs gives the
//! `M x D` prior matrix of the layer; its top-k right singular vectors span
//! the layer's hallucination subspace.

mod svd;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Result, VceError};
use crate::tensor_store::{Tensor, TensorMap};

pub use svd::{thin_svd, ThinSvd};

/// `(1/N) sum_i w_i (h_neg_i - h_pos_i)`, accumulated in f64 in row order.
pub fn editing_vector(
    h_pos: ArrayView2<f32>,
    h_neg: ArrayView2<f32>,
    weights: &[f64],
) -> Result<Array1<f64>> {
    let n = h_pos.nrows();
    if h_neg.dim() != h_pos.dim() || weights.len() != n {
        return Err(VceError::LengthMismatch(format!(
            "hidden states {:?} vs {:?} with {} weights",
            h_pos.dim(),
            h_neg.dim(),
            weights.len()
        )));
    }
    if n == 0 {
        return Err(VceError::Empty("editing vector needs at least one token".into()));
    }
    let mut v = Array1::<f64>::zeros(h_pos.ncols());
    for i in 0..n {
        let w = weights[i];
        for (j, acc) in v.iter_mut().enumerate() {
            *acc += w * (h_neg[[i, j]] as f64 - h_pos[[i, j]] as f64);
        }
    }
    v /= n as f64;
    Ok(v)
}

/// The stacked editing vectors of one layer, one row per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EditingVectorSet {
    pub layer: usize,
    pub matrix: Array2<f32>,
}

impl EditingVectorSet {
    pub fn pairs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn tensor_name(layer: usize) -> String {
        format!("layer{layer}.V")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_array2(Self::tensor_name(self.layer), &self.matrix)
    }

    pub fn from_tensors(tensors: &TensorMap, layer: usize) -> Result<Self> {
        Ok(Self {
            layer,
            matrix: tensors.get(&Self::tensor_name(layer))?.to_array2()?,
        })
    }
}

pub fn assemble_prior_matrix(vectors: &[Array1<f64>], layer: usize) -> Result<EditingVectorSet> {
    let first = vectors
        .first()
        .ok_or_else(|| VceError::Empty("no editing vectors".into()))?;
    let d = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(VceError::Shape(format!(
            "editing vectors of length {d} and {}",
            bad.len()
        )));
    }
    let mut matrix = Array2::zeros((vectors.len(), d));
    for (mut row, v) in matrix.rows_mut().into_iter().zip(vectors) {
        row.assign(&v.mapv(|x| x as f32));
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(VceError::NonFinite(format!("prior matrix of layer {layer}")));
    }
    Ok(EditingVectorSet { layer, matrix })
}

/// Top-k right singular basis of a layer's prior matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HalluSpace {
    pub layer: usize,
    /// `D x k`, orthonormal columns.
    pub basis: Array2<f32>,
    /// All singular values of the prior matrix, descending.
    pub spectrum: Vec<f64>,
    pub warnings: Vec<String>,
}

impl HalluSpace {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.spectrum[..self.rank()]
    }

    pub fn basis_f64(&self) -> Array2<f64> {
        self.basis.mapv(|x| x as f64)
    }

    /// Keeps the leading `k` directions.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.rank() {
            return Err(VceError::Rank {
                k,
                max: self.rank(),
            });
        }
        Ok(Self {
            layer: self.layer,
            basis: self.basis.slice(ndarray::s![.., ..k]).to_owned(),
            spectrum: self.spectrum.clone(),
            warnings: spectrum_warnings(self.layer, &self.spectrum, k),
        })
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::from_array2(format!("layer{}.S", self.layer), &self.basis),
            Tensor::from_vec(
                format!("layer{}.sigma", self.layer),
                self.spectrum.iter().map(|&s| s as f32).collect(),
            ),
        ]
    }

    pub fn from_tensors(tensors: &TensorMap, layer: usize) -> Result<Self> {
        let basis = tensors.get(&format!("layer{layer}.S"))?.to_array2()?;
        let spectrum: Vec<f64> = tensors
            .get(&format!("layer{layer}.sigma"))?
            .data()
            .iter()
            .map(|&s| s as f64)
            .collect();
        if spectrum.len() < basis.ncols() {
            return Err(VceError::Shape(format!(
                "layer {layer}: {} singular values for rank {}",
                spectrum.len(),
                basis.ncols()
            )));
        }
        let warnings = spectrum_warnings(layer, &spectrum, basis.ncols());
        Ok(Self {
            layer,
            basis,
            spectrum,
            warnings,
        })
    }
}

/// Flags a non-unique truncation (`sigma_k ~ sigma_{k+1}`).
fn spectrum_warnings(layer: usize, spectrum: &[f64], k: usize) -> Vec<String> {
    match (k.checked_sub(1).and_then(|i| spectrum.get(i)), spectrum.get(k)) {
        (Some(&a), Some(&b)) if (a - b).abs() <= 1e-9 * a.abs().max(f64::MIN_POSITIVE) => {
            vec![format!(
                "layer {layer}: degenerate spectrum at rank {k} (sigma_k = {a:.6e}, sigma_k+1 = {b:.6e}); subspace not unique"
            )]
        }
        _ => Vec::new(),
    }
}

/// Makes the largest-magnitude entry of each column positive (first index on ties).
fn fix_signs(basis: &mut Array2<f64>) {
    for mut col in basis.columns_mut() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

pub fn halluspace(set: &EditingVectorSet, k: usize) -> Result<HalluSpace> {
    let (m, d) = set.matrix.dim();
    let max = m.min(d);
    if k == 0 || k > max {
        return Err(VceError::Rank { k, max });
    }
    if set.matrix.iter().any(|x| !x.is_finite()) {
        return Err(VceError::NonFinite(format!(
            "prior matrix of layer {}",
            set.layer
        )));
    }
    let svd = thin_svd(&set.matrix.mapv(|x| x as f64));
    let mut basis = svd.right.slice(ndarray::s![.., ..k]).to_owned();
    fix_signs(&mut basis);
    Ok(HalluSpace {
        layer: set.layer,
        basis: basis.mapv(|x| x as f32),
        warnings: spectrum_warnings(set.layer, &svd.singular_values, k),
        spectrum: svd.singular_values,
    })
}

/// `I - S S^T`, exactly symmetric.
pub fn projector(space: &HalluSpace) -> Array2<f64> {
    let s = space.basis_f64();
    let d = s.nrows();
    let mut p = Array2::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            let dot = s.row(i).dot(&s.row(j));
            let v = if i == j { 1.0 - dot } else { -dot };
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    p
}

/// Reads every `layer<l>.S` / `layer<l>.sigma` pair of a bundle.
pub fn spaces_from_tensors(tensors: &TensorMap) -> Result<BTreeMap<usize, HalluSpace>> {
    let mut out = BTreeMap::new();
    for name in tensors.names() {
        if let Some(layer) = name
            .strip_prefix("layer")
            .and_then(|rest| rest.strip_suffix(".S"))
            .and_then(|l| l.parse::<usize>().ok())
        {
            out.insert(layer, HalluSpace::from_tensors(tensors, layer)?);
        }
    }
    Ok(out)
}

/// Plain-text table of the retained and discarded spectrum per layer.
pub fn spectrum_report(spaces: &BTreeMap<usize, HalluSpace>) -> String {
    let mut out = String::from("layer  rank  kept energy  singular values\n");
    for (layer, space) in spaces {
        let total: f64 = space.spectrum.iter().map(|s| s * s).sum();
        let kept: f64 = space.singular_values().iter().map(|s| s * s).sum();
        let frac = if total > 0.0 { kept / total } else { 0.0 };
        let values: Vec<String> = space
            .spectrum
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i + 1 == space.rank() {
                    format!("{s:.4e} |")
                } else {
                    format!("{s:.4e}")
                }
            })
            .collect();
        out.push_str(&format!(
            "{layer:>5}  {:>4}  {:>11.4}  {}\n",
            space.rank(),
            frac,
            values.join(" ")
        ));
        for w in &space.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
    }
    out
}
