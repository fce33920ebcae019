//! Null-space weight editing.
//!
//! A write matrix `W` (`in x D`, applied as `h W` to row vectors) is replaced
//! by `W (I - S S^T)`, so nothing it writes into the residual stream has a
//! component inside the layer's hallucination subspace.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VceError};
use crate::subspace::HalluSpace;
use crate::tensor_store::{ManifestSummary, Tensor, TensorMap};
use crate::toy_lvlm::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditTarget {
    /// MLP output matrix `w2`.
    Mlp,
    /// Attention output matrix `wo`.
    Attn,
}

impl EditTarget {
    pub fn tensor_suffix(self) -> &'static str {
        match self {
            EditTarget::Mlp => "w2",
            EditTarget::Attn => "wo",
        }
    }

    pub fn tensor_name(self, layer: usize) -> String {
        format!("layer{layer}.{}", self.tensor_suffix())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditTarget::Mlp => "mlp",
            EditTarget::Attn => "attn",
        }
    }

    /// Parses a comma-separated list such as `mlp,attn`.
    pub fn parse_list(s: &str) -> Result<Vec<EditTarget>> {
        let mut out: Vec<EditTarget> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(VceError::Config("empty target list".into()));
        }
        Ok(out)
    }
}

impl FromStr for EditTarget {
    type Err = VceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EditTarget::Mlp),
            "attn" => Ok(EditTarget::Attn),
            other => Err(VceError::Config(format!(
                "unknown edit target '{other}' (expected mlp or attn)"
            ))),
        }
    }
}

impl fmt::Display for EditTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive, 0-based layer range. `lo > hi` is the empty range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub lo: usize,
    pub hi: usize,
}

impl LayerRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    /// Deepest half of an `n_layers` model.
    pub fn deepest_half(n_layers: usize) -> Self {
        Self {
            lo: n_layers / 2,
            hi: n_layers.saturating_sub(1),
        }
    }

    /// Parses the 1-based inclusive form `a..b` (or a single `a`).
    pub fn parse_one_based(s: &str) -> Result<Self> {
        let bad = || VceError::Config(format!("bad layer range '{s}' (expected a..b, 1-based)"));
        let (a, b) = match s.split_once("..") {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (s.trim(), s.trim()),
        };
        let a: usize = a.parse().map_err(|_| bad())?;
        let b: usize = b.parse().map_err(|_| bad())?;
        if a == 0 || b == 0 {
            return Err(bad());
        }
        Ok(Self { lo: a - 1, hi: b - 1 })
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.lo..self.hi.saturating_add(1).max(self.lo)
    }

    pub fn check_depth(&self, n_layers: usize) -> Result<()> {
        if !self.is_empty() && self.hi >= n_layers {
            return Err(VceError::Config(format!(
                "layer range {self} exceeds model depth {n_layers}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerRange {
    /// 1-based, matching the CLI.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo + 1, self.hi + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub layers: LayerRange,
    pub targets: Vec<EditTarget>,
    /// Truncate each space to this rank; `None` uses the stored rank.
    pub rank: Option<usize>,
}

impl EditPlan {
    pub fn new(layers: LayerRange, targets: Vec<EditTarget>, rank: Option<usize>) -> Result<Self> {
        if targets.is_empty() {
            return Err(VceError::Config("edit plan needs at least one target".into()));
        }
        if rank == Some(0) {
            return Err(VceError::Rank { k: 0, max: 0 });
        }
        Ok(Self {
            layers,
            targets,
            rank,
        })
    }

    pub fn default_for(n_layers: usize) -> Self {
        Self {
            layers: LayerRange::deepest_half(n_layers),
            targets: vec![EditTarget::Mlp],
            rank: None,
        }
    }

    fn jobs(&self) -> Vec<(usize, EditTarget)> {
        self.layers
            .layers()
            .flat_map(|l| self.targets.iter().map(move |&t| (l, t)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEdit {
    pub name: String,
    pub layer: usize,
    pub target: EditTarget,
    pub rank: usize,
    pub norm_before: f64,
    pub norm_after: f64,
    pub delta_norm: f64,
    /// `max_i |W_edited s_i|`.
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub edits: Vec<MatrixEdit>,
    pub warnings: Vec<String>,
}

impl EditReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn max_residual(&self) -> f64 {
        self.edits.iter().map(|e| e.residual).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>5} {:>12} {:>12} {:>12} {:>12}\n",
            "tensor", "rank", "|W|_F", "|W'|_F", "|dW|_F", "residual"
        );
        for e in &self.edits {
            out.push_str(&format!(
                "{:<12} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.3e}\n",
                e.name, e.rank, e.norm_before, e.norm_after, e.delta_norm, e.residual
            ));
        }
        if self.edits.is_empty() {
            out.push_str("(no matrices edited)\n");
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

fn frobenius(w: &Array2<f64>) -> f64 {
    w.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `W (I - S S^T)` computed in f64 as `W - (W S) S^T`, rounded to f32.
pub fn edit_weight(w: &Array2<f32>, space: &HalluSpace) -> Result<Array2<f32>> {
    if w.ncols() != space.dim() {
        return Err(VceError::Shape(format!(
            "weight has {} columns but the subspace lives in dimension {}",
            w.ncols(),
            space.dim()
        )));
    }
    let w64 = w.mapv(|x| x as f64);
    let s = space.basis_f64();
    let ws = w64.dot(&s);
    Ok((&w64 - &ws.dot(&s.t())).mapv(|x| x as f32))
}

fn measure(
    name: String,
    layer: usize,
    target: EditTarget,
    before: &Array2<f32>,
    after: &Array2<f32>,
    space: &HalluSpace,
) -> MatrixEdit {
    let b = before.mapv(|x| x as f64);
    let a = after.mapv(|x| x as f64);
    let residual = a
        .dot(&space.basis_f64())
        .columns()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .fold(0.0, f64::max);
    MatrixEdit {
        name,
        layer,
        target,
        rank: space.rank(),
        norm_before: frobenius(&b),
        norm_after: frobenius(&a),
        delta_norm: frobenius(&(&a - &b)),
        residual,
    }
}

/// Applies the plan to a name-addressed tensor collection. Tensors outside
/// the plan are copied unchanged.
pub fn edit_tensors(
    tensors: &TensorMap,
    spaces: &BTreeMap<usize, HalluSpace>,
    plan: &EditPlan,
) -> Result<(TensorMap, EditReport)> {
    let jobs = plan.jobs();
    let mut layer_spaces = BTreeMap::new();
    for layer in plan.layers.layers() {
        let space = spaces.get(&layer).ok_or(VceError::MissingLayer(layer))?;
        let space = match plan.rank {
            Some(k) if k != space.rank() => space.truncated(k)?,
            _ => space.clone(),
        };
        layer_spaces.insert(layer, space);
    }
    for &(layer, target) in &jobs {
        let name = target.tensor_name(layer);
        if !tensors.contains(&name) {
            return Err(VceError::TargetNotFound(name));
        }
    }

    let results: Vec<(Tensor, MatrixEdit)> = jobs
        .par_iter()
        .map(|&(layer, target)| {
            let name = target.tensor_name(layer);
            let before = tensors.get(&name)?.to_array2()?;
            let space = &layer_spaces[&layer];
            let after = edit_weight(&before, space)?;
            let edit = measure(name.clone(), layer, target, &before, &after, space);
            Ok((Tensor::from_array2(name, &after), edit))
        })
        .collect::<Result<_>>()?;

    let mut out = tensors.clone();
    let mut report = EditReport::default();
    for space in layer_spaces.values() {
        report.warnings.extend(space.warnings.iter().cloned());
    }
    for (tensor, edit) in results {
        out.replace(tensor);
        report.edits.push(edit);
    }
    Ok((out, report))
}

pub fn edit_model(
    model: &ToyModel,
    spaces: &BTreeMap<usize, HalluSpace>,
    plan: &EditPlan,
) -> Result<(ToyModel, EditReport)> {
    plan.layers.check_depth(model.config.n_layers)?;
    let tensors: TensorMap = model.to_tensors().into_iter().collect();
    let (edited, report) = edit_tensors(&tensors, spaces, plan)?;
    Ok((ToyModel::from_tensors(model.config.clone(), &edited)?, report))
}

pub fn export_edited(model: &ToyModel, dir: impl AsRef<Path>) -> Result<ManifestSummary> {
    model.save_checkpoint(dir)
}
