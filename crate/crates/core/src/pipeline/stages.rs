use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::{stack, Array2, Axis};
use rayon::prelude::*;

use super::io::{
    read_images, read_pairs, read_token_lines, read_weights, write_images, write_pairs,
    write_shifts, TraceRecord, TraceSet, OBJECTS_FILE, PROMPTS_FILE,
};
use crate::editor::{edit_model, EditPlan, EditReport, LayerRange};
use crate::error::{Result, VceError};
use crate::perturbation::{build_pairs_with, ContrastivePair, DiffusionSampler, NoiseSchedule};
use crate::shift::{shift_from_logits, weigh_shifts, ScheduleParams, ShiftRecord};
use crate::subspace::{
    assemble_prior_matrix, editing_vector, halluspace, spaces_from_tensors, spectrum_report,
    EditingVectorSet, HalluSpace,
};
use crate::tensor_store::{read_bundle, write_bundle, Tensor};
use crate::toy_lvlm::{build_fixture, random_scenes, FixtureConfig, Scene, SceneOptions, ToyModel};

pub const SPACES_REPORT: &str = "report.txt";
pub const EDIT_REPORT_TXT: &str = "edit_report.txt";
pub const EDIT_REPORT_JSON: &str = "edit_report.json";

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| VceError::io(path, e))
}

// ---- in-memory stages -------------------------------------------------------

/// Greedy caption on the original image, then teacher-forced passes under
/// both images. Every layer is recorded.
pub fn trace_pair(model: &ToyModel, pair: &ContrastivePair, max_new: usize) -> Result<TraceRecord> {
    let response = model.generate_greedy(&pair.prompt, &pair.original, max_new)?;
    if response.is_empty() {
        return Err(VceError::Empty("greedy caption is empty".into()));
    }
    let orig = model.teacher_forced_trace(&pair.prompt, &response, &pair.original)?;
    let pert = model.teacher_forced_trace(&pair.prompt, &response, &pair.perturbed)?;
    let hidden = |h: &[Array2<f32>]| {
        let views: Vec<_> = h.iter().map(|m| m.view()).collect();
        stack(Axis(0), &views).expect("layers share one shape")
    };
    Ok(TraceRecord {
        orig_hidden: hidden(&orig.hidden),
        pert_hidden: hidden(&pert.hidden),
        orig_logits: orig.logits,
        pert_logits: pert.logits,
        response,
    })
}

pub fn trace_pairs(model: &ToyModel, pairs: &[ContrastivePair], max_new: usize) -> Result<TraceSet> {
    let records = pairs
        .par_iter()
        .map(|p| trace_pair(model, p, max_new))
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceSet {
        layers: (0..model.config.n_layers).collect(),
        records,
    })
}

pub fn compute_shifts(traces: &TraceSet, params: &ScheduleParams) -> Result<Vec<ShiftRecord>> {
    params.validate()?;
    traces
        .records
        .par_iter()
        .map(|r| {
            let delta = shift_from_logits(&r.orig_token_logits(), &r.pert_token_logits());
            weigh_shifts(delta, params)
        })
        .collect()
}

/// Prior matrix and subspace of every layer in `layers`.
pub fn compute_spaces(
    traces: &TraceSet,
    weights: &[Vec<f64>],
    layers: LayerRange,
    rank: usize,
) -> Result<BTreeMap<usize, (EditingVectorSet, HalluSpace)>> {
    if weights.len() != traces.records.len() {
        return Err(VceError::LengthMismatch(format!(
            "{} weight vectors for {} traces",
            weights.len(),
            traces.records.len()
        )));
    }
    let slots: Vec<(usize, usize)> = layers
        .layers()
        .map(|l| Ok((l, traces.slot(l)?)))
        .collect::<Result<_>>()?;
    slots
        .par_iter()
        .map(|&(layer, slot)| {
            let vectors = traces
                .records
                .iter()
                .zip(weights)
                .map(|(r, w)| {
                    let (pos, neg) = r.hidden_pair(slot);
                    editing_vector(pos, neg, w)
                })
                .collect::<Result<Vec<_>>>()?;
            let set = assemble_prior_matrix(&vectors, layer)?;
            let space = halluspace(&set, rank)?;
            Ok((layer, (set, space)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Training and evaluation scenes of the fixture.
pub fn make_scenes(
    fixture: &FixtureConfig,
    trigger_rate: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    random_scenes(
        &fixture.model,
        &SceneOptions::for_fixture(fixture, trigger_rate),
        count,
        seed,
    )
}

// ---- file-based stages ------------------------------------------------------

pub fn stage_fixture(fixture: &FixtureConfig, out: &Path) -> Result<ToyModel> {
    let (model, _) = build_fixture(fixture)?;
    model.save_checkpoint(out)?;
    Ok(model)
}

pub fn stage_scenes(
    fixture: &FixtureConfig,
    trigger_rate: f64,
    count: usize,
    seed: u64,
    prompt: &[u32],
    out: &Path,
) -> Result<Vec<Scene>> {
    let scenes = make_scenes(fixture, trigger_rate, count, seed)?;
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let prompts = vec![prompt.to_vec(); scenes.len()];
    let objects: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    write_images(out, &images, &prompts, &objects)?;
    Ok(scenes)
}

/// Reads the truth object lists written next to a scene bundle.
pub fn read_scene_objects(dir: &Path) -> Result<Vec<Vec<u32>>> {
    read_token_lines(dir.join(OBJECTS_FILE))
}

pub fn stage_perturb(
    images: &Path,
    prompts: &Path,
    schedule: &NoiseSchedule,
    sampler: DiffusionSampler,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let imgs = read_images(images)?;
    let prompts = read_token_lines(prompts)?;
    let pairs = build_pairs_with(&prompts, &imgs, schedule, seed, sampler)?;
    write_pairs(out, &pairs)
}

pub fn default_prompts_path(images: &Path) -> std::path::PathBuf {
    images.join(PROMPTS_FILE)
}

pub fn stage_trace(model: &Path, pairs: &Path, max_new: usize, out: &Path) -> Result<()> {
    let model = ToyModel::load_checkpoint(model)?;
    let pairs = read_pairs(pairs)?;
    trace_pairs(&model, &pairs, max_new)?.write(out)
}

pub fn stage_shifts(traces: &Path, params: &ScheduleParams, out: &Path) -> Result<()> {
    let traces = TraceSet::read(traces)?;
    let records = compute_shifts(&traces, params)?;
    let fallbacks = records
        .iter()
        .filter(|r| r.source != crate::shift::ScaleSource::Mad)
        .count();
    if fallbacks > 0 {
        warn!("{fallbacks} pairs used the MAD fallback scale");
    }
    write_shifts(out, &records)
}

/// `layers = None` selects the deepest half of the traced layers.
pub fn stage_subspace(
    traces: &Path,
    weights: &Path,
    layers: Option<LayerRange>,
    rank: usize,
    out: &Path,
) -> Result<BTreeMap<usize, HalluSpace>> {
    let traces = TraceSet::read(traces)?;
    let weights = read_weights(weights)?;
    let layers = layers.unwrap_or_else(|| {
        let top = traces.layers.iter().max().map_or(0, |&l| l + 1);
        LayerRange::deepest_half(top)
    });
    let results = compute_spaces(&traces, &weights, layers, rank)?;
    let mut tensors: Vec<Tensor> = Vec::new();
    let mut spaces = BTreeMap::new();
    for (layer, (set, space)) in results {
        for w in &space.warnings {
            warn!("{w}");
        }
        tensors.push(set.to_tensor());
        tensors.extend(space.to_tensors());
        spaces.insert(layer, space);
    }
    write_bundle(&tensors, out)?;
    write_text(out.join(SPACES_REPORT), &spectrum_report(&spaces))?;
    Ok(spaces)
}

pub fn stage_edit(model: &Path, spaces: &Path, plan: &EditPlan, out: &Path) -> Result<EditReport> {
    let model = ToyModel::load_checkpoint(model)?;
    let spaces = spaces_from_tensors(&read_bundle(spaces)?)?;
    let (edited, report) = edit_model(&model, &spaces, plan)?;
    edited.save_checkpoint(out)?;
    write_text(out.join(EDIT_REPORT_TXT), &report.to_table())?;
    write_text(out.join(EDIT_REPORT_JSON), &report.to_json())?;
    Ok(report)
}
