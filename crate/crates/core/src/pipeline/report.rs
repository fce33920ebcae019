use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::TraceSet;
use crate::editor::{EditReport, EditTarget};
use crate::error::{Result, VceError};
use crate::metrics::{chair, extract_objects, pope_questions, pope_scores, ChairReport, ObjectVocab, PopeReport};
use crate::perturbation::ImageTensor;
use crate::rng::GaussianStream;
use crate::subspace::HalluSpace;
use crate::toy_lvlm::ToyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub singular_values: Vec<f64>,
    /// `|S^T r|` for the unit readout direction `r` of the spurious token.
    pub spurious_alignment: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppression {
    pub trigger: u32,
    pub spurious: u32,
    pub controls: Vec<u32>,
    /// Evaluation captions (from the unedited model) containing the trigger.
    pub trigger_captions: usize,
    /// Mean of `before - after` spurious logits over their positions.
    pub spurious_drop: f64,
    /// Mean `|before - after|` over the same positions and all controls.
    pub control_change: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSignal {
    /// Mean per-pair `|l_pert - l_orig|` of the spurious token.
    pub spurious_shift: f64,
    pub control_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub pairs: usize,
    /// 1-based, inclusive.
    pub layers: String,
    pub rank: usize,
    pub targets: Vec<EditTarget>,
    pub spectra: Vec<LayerSpectrum>,
    pub edit: EditReport,
    pub captions: usize,
    pub chair_before: ChairReport,
    pub chair_after: ChairReport,
    pub pope_before: PopeReport,
    pub pope_after: PopeReport,
    pub suppression: Suppression,
    pub prior_signal: PriorSignal,
    pub op_count_before: u64,
    pub op_count_after: u64,
}

/// `count` distinct tokens other than `exclude`, ascending.
pub fn control_tokens(vocab: usize, exclude: u32, count: usize, seed: u64) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..vocab as u32).filter(|&t| t != exclude).collect();
    GaussianStream::new(seed).shuffle(&mut pool);
    pool.truncate(count);
    pool.sort_unstable();
    pool
}

pub fn prior_signal(traces: &TraceSet, spurious: u32, controls: &[u32]) -> PriorSignal {
    let mean_shift = |token: u32| -> f64 {
        let per_pair: Vec<f64> = traces
            .records
            .iter()
            .map(|r| {
                let t = token as usize;
                let n = r.response.len() as f64;
                (0..r.response.len())
                    .map(|i| (r.pert_logits[[i, t]] as f64 - r.orig_logits[[i, t]] as f64).abs())
                    .sum::<f64>()
                    / n
            })
            .collect();
        per_pair.iter().sum::<f64>() / per_pair.len().max(1) as f64
    };
    let control_shift =
        controls.iter().map(|&c| mean_shift(c)).sum::<f64>() / controls.len().max(1) as f64;
    PriorSignal {
        spurious_shift: mean_shift(spurious),
        control_shift,
    }
}

/// Unit readout direction of `token`.
pub fn readout_direction(model: &ToyModel, token: u32) -> Array1<f64> {
    let r = model.unembed_column(token).mapv(|x| x as f64);
    let norm = r.dot(&r).sqrt();
    if norm > 0.0 {
        r / norm
    } else {
        r
    }
}

pub fn layer_spectra(spaces: &BTreeMap<usize, HalluSpace>, r: &Array1<f64>) -> Vec<LayerSpectrum> {
    spaces
        .iter()
        .map(|(&layer, s)| {
            let proj = s.basis_f64().t().dot(r);
            LayerSpectrum {
                layer,
                singular_values: s.singular_values().to_vec(),
                spurious_alignment: proj.dot(&proj).sqrt(),
                warnings: s.warnings.clone(),
            }
        })
        .collect()
}

pub fn generate_captions(
    model: &ToyModel,
    images: &[ImageTensor],
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<Vec<u32>>> {
    images
        .par_iter()
        .map(|im| model.generate_greedy(prompt, im, max_new))
        .collect()
}

/// Spurious-logit drop against control-logit drift on trigger captions.
#[allow(clippy::too_many_arguments)]
pub fn suppression(
    before: &ToyModel,
    after: &ToyModel,
    images: &[ImageTensor],
    captions: &[Vec<u32>],
    prompt: &[u32],
    trigger: u32,
    spurious: u32,
    controls: &[u32],
) -> Result<Suppression> {
    let picked: Vec<usize> = (0..captions.len())
        .filter(|&i| captions[i].contains(&trigger))
        .collect();
    let sums = picked
        .par_iter()
        .map(|&i| {
            let b = before.teacher_forced_trace(prompt, &captions[i], &images[i])?;
            let a = after.teacher_forced_trace(prompt, &captions[i], &images[i])?;
            let mut drop = 0.0;
            let mut control = 0.0;
            for p in 0..captions[i].len() {
                let s = spurious as usize;
                drop += b.logits[[p, s]] as f64 - a.logits[[p, s]] as f64;
                for &c in controls {
                    let c = c as usize;
                    control += (b.logits[[p, c]] as f64 - a.logits[[p, c]] as f64).abs();
                }
            }
            Ok((drop, control, captions[i].len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let positions: usize = sums.iter().map(|s| s.2).sum();
    let (spurious_drop, control_change) = if positions == 0 {
        (0.0, 0.0)
    } else {
        let n = positions as f64;
        (
            sums.iter().map(|s| s.0).sum::<f64>() / n,
            sums.iter().map(|s| s.1).sum::<f64>() / (n * controls.len().max(1) as f64),
        )
    };
    Ok(Suppression {
        trigger,
        spurious,
        controls: controls.to_vec(),
        trigger_captions: picked.len(),
        spurious_drop,
        control_change,
        ratio: (positions > 0 && control_change > 0.0).then(|| spurious_drop / control_change),
    })
}

pub fn caption_metrics(
    captions: &[Vec<u32>],
    truths: &[Vec<u32>],
    vocab: &ObjectVocab,
) -> Result<(ChairReport, PopeReport)> {
    let mentions: Vec<Vec<u32>> = captions.iter().map(|c| extract_objects(c, vocab)).collect();
    let truth_sets: Vec<BTreeSet<u32>> = truths.iter().map(|t| t.iter().copied().collect()).collect();
    let chair = chair(&mentions, &truth_sets)?;
    let (answers, labels) = pope_questions(&mentions, &truth_sets, vocab)?;
    Ok((chair, pope_scores(&answers, &labels)?))
}

/// Op count of one forward pass over `prompt` and an image.
pub fn forward_ops(model: &ToyModel, prompt: &[u32], image: &ImageTensor) -> Result<u64> {
    Ok(model.forward(prompt, image)?.op_count)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}

impl FinalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VceError::Parse(format!("final report: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let targets: Vec<&str> = self.targets.iter().map(|t| t.as_str()).collect();
        let _ = writeln!(
            out,
            "pairs {}  layers {}  rank {}  targets {}",
            self.pairs,
            self.layers,
            self.rank,
            targets.join(",")
        );
        out.push_str("\nsubspaces\n");
        for s in &self.spectra {
            let sv: Vec<String> = s.singular_values.iter().map(|v| format!("{v:.4e}")).collect();
            let _ = writeln!(
                out,
                "  layer {:>2}  |S^T r| {:.4}  sigma {}",
                s.layer,
                s.spurious_alignment,
                sv.join(" ")
            );
            for w in &s.warnings {
                let _ = writeln!(out, "  warning: {w}");
            }
        }
        out.push_str("\nedit\n");
        for line in self.edit.to_table().lines() {
            let _ = writeln!(out, "  {line}");
        }
        let _ = writeln!(out, "\ncaptions {}", self.captions);
        let _ = writeln!(out, "{:<12} {:>12} {:>12}", "metric", "before", "after");
        let rows: [(&str, String, String); 6] = [
            ("CHAIR_S", format!("{:.6}", self.chair_before.chair_s), format!("{:.6}", self.chair_after.chair_s)),
            ("CHAIR_I", opt(self.chair_before.chair_i), opt(self.chair_after.chair_i)),
            ("accuracy", format!("{:.6}", self.pope_before.accuracy), format!("{:.6}", self.pope_after.accuracy)),
            ("precision", opt(self.pope_before.precision), opt(self.pope_after.precision)),
            ("recall", opt(self.pope_before.recall), opt(self.pope_after.recall)),
            ("F1", format!("{:.6}", self.pope_before.f1), format!("{:.6}", self.pope_after.f1)),
        ];
        for (name, b, a) in rows {
            let _ = writeln!(out, "{name:<12} {b:>12} {a:>12}");
        }
        let s = &self.suppression;
        let _ = writeln!(
            out,
            "\nspurious token {} after trigger {}: {} trigger captions",
            s.spurious, s.trigger, s.trigger_captions
        );
        let _ = writeln!(out, "  mean spurious logit drop   {:.6}", s.spurious_drop);
        let _ = writeln!(out, "  mean |control logit change| {:.6} over {:?}", s.control_change, s.controls);
        let _ = writeln!(out, "  ratio                      {}", opt(s.ratio));
        let _ = writeln!(
            out,
            "\nplanted prior signal: mean |shift| spurious {:.6}, controls {:.6}",
            self.prior_signal.spurious_shift, self.prior_signal.control_shift
        );
        let _ = writeln!(
            out,
            "forward op count: before {}, after {}",
            self.op_count_before, self.op_count_after
        );
        out
    }
}

