use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use vce_core::editor::EditPlan;
use vce_core::pipeline::io::TraceSet;
use vce_core::pipeline::*;
use vce_core::tensor_store::{read_bundle, validate_bundle};
use vce_core::toy_lvlm::ToyModel;
use vce_core::VceError;

fn small(out: &Path) -> PipelineConfig {
    PipelineConfig {
        out_dir: out.to_path_buf(),
        pairs: 8,
        eval_captions: 6,
        seed: 5,
        ..Default::default()
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != EFFECTIVE_CONFIG {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn stages_run_individually_match_the_driver() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(&tmp.path().join("a"));
    run_pipeline(&cfg, false).unwrap();

    let c = small(&tmp.path().join("b"));
    let p = |x: &Path| c.resolve(x);
    stage_fixture(&c.fixture, &c.model_dir()).unwrap();
    stage_scenes(&c.fixture, c.trigger_rate, c.pairs, c.train_scene_seed(), &c.prompt(), &p(&c.paths.scenes)).unwrap();
    stage_scenes(&c.fixture, c.trigger_rate, c.eval_captions, c.eval_scene_seed(), &c.prompt(), &p(&c.paths.eval_scenes)).unwrap();
    let scenes = p(&c.paths.scenes);
    stage_perturb(&scenes, &default_prompts_path(&scenes), &c.diffusion.schedule().unwrap(), c.diffusion.sampler, c.seed, &p(&c.paths.pairs)).unwrap();
    stage_trace(&c.model_dir(), &p(&c.paths.pairs), c.max_new, &p(&c.paths.traces)).unwrap();
    stage_shifts(&p(&c.paths.traces), &c.schedule, &p(&c.paths.shifts)).unwrap();
    stage_subspace(&p(&c.paths.traces), &p(&c.paths.shifts), None, c.rank, &p(&c.paths.spaces)).unwrap();
    let plan = EditPlan::new(c.layer_range(8).unwrap(), c.targets.clone(), Some(c.rank)).unwrap();
    stage_edit(&c.model_dir(), &p(&c.paths.spaces), &plan, &p(&c.paths.edited)).unwrap();
    let report = build_report(&c, &c.model_dir(), &p(&c.paths.eval_scenes), &p(&c.paths.traces), &p(&c.paths.spaces), &p(&c.paths.edited)).unwrap();
    let dir = p(&c.paths.report);
    fs::write(dir.join(REPORT_JSON), report.to_json()).unwrap();
    fs::write(dir.join(REPORT_TXT), report.to_text()).unwrap();

    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));
}

#[test]
fn resume_skips_every_stage_and_force_reruns() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    let first = run_pipeline(&cfg, false).unwrap();
    assert!(first.stages.iter().all(|s| !s.skipped));
    let names: Vec<&str> = first.stages.iter().map(|s| s.stage).collect();
    assert_eq!(names, STAGES);

    let snapshot = files(tmp.path());
    let again = run_pipeline(&cfg, false).unwrap();
    assert!(again.stages.iter().all(|s| s.skipped));
    assert_eq!(again.report, first.report);

    let forced = run_pipeline(&cfg, true).unwrap();
    assert!(forced.stages.iter().all(|s| !s.skipped));
    assert_eq!(forced.report, first.report);
    assert_eq!(files(tmp.path()), snapshot);
}

#[test]
fn corrupted_stage_output_is_recomputed() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    run_pipeline(&cfg, false).unwrap();
    let snapshot = files(tmp.path());
    let blob = tmp.path().join("shifts/data.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, bytes).unwrap();
    assert!(!validate_bundle(tmp.path().join("shifts")).is_ok());

    let out = run_pipeline(&cfg, false).unwrap();
    let rerun: Vec<&str> = out.stages.iter().filter(|s| !s.skipped).map(|s| s.stage).collect();
    assert_eq!(rerun, ["shifts"]);
    assert_eq!(files(tmp.path()), snapshot);
}

#[test]
fn rank_beyond_pairs_aborts_at_subspace() {
    let tmp = TempDir::new().unwrap();
    let cfg = PipelineConfig {
        rank: 9,
        ..small(tmp.path())
    };
    let err = run_pipeline(&cfg, false).unwrap_err();
    match &err {
        VceError::Stage { stage, source } => {
            assert_eq!(*stage, "subspace");
            assert!(matches!(**source, VceError::Rank { k: 9, max: 8 }));
        }
        other => panic!("unexpected {other}"),
    }
    // Outputs of the earlier stages are kept.
    assert!(validate_bundle(tmp.path().join("traces")).is_ok());
    assert!(!tmp.path().join("edited").exists());
}

#[test]
fn traces_hold_both_passes_of_every_pair() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    run_pipeline(&cfg, false).unwrap();
    let traces = TraceSet::read(tmp.path().join("traces")).unwrap();
    assert_eq!(traces.records.len(), 8);
    assert_eq!(traces.layers, (0..8).collect::<Vec<_>>());
    let tensors = read_bundle(tmp.path().join("traces")).unwrap();
    for i in 0..8 {
        for pass in ["orig", "pert"] {
            assert_eq!(tensors.get(&format!("pair{i}.{pass}.hidden")).unwrap().shape()[0], 8);
            assert!(tensors.contains(&format!("pair{i}.{pass}.logits")));
        }
        let r = &traces.records[i];
        assert_eq!(r.orig_hidden.dim(), r.pert_hidden.dim());
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let one = PipelineConfig {
        threads: Some(1),
        ..small(&tmp.path().join("one"))
    };
    let three = PipelineConfig {
        threads: Some(3),
        ..small(&tmp.path().join("three"))
    };
    run_pipeline(&one, false).unwrap();
    run_pipeline(&three, false).unwrap();
    assert_eq!(files(&tmp.path().join("one")), files(&tmp.path().join("three")));
}

#[test]
fn external_checkpoint_skips_fixture() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    stage_fixture(&Default::default(), &ckpt).unwrap();
    let cfg = PipelineConfig {
        checkpoint: Some(ckpt.clone()),
        ..small(&tmp.path().join("run"))
    };
    let out = run_pipeline(&cfg, true).unwrap();
    assert!(out.stages[0].skipped);
    assert!(!tmp.path().join("run/model").exists());
    let edited = ToyModel::load_checkpoint(tmp.path().join("run/edited")).unwrap();
    let base = ToyModel::load_checkpoint(&ckpt).unwrap();
    assert_eq!(edited.config, base.config);
}

#[test]
fn effective_config_is_echoed_and_reloadable() {
    let tmp = TempDir::new().unwrap();
    let cfg = PipelineConfig {
        layers: Some("6..8".into()),
        rank: 2,
        ..small(tmp.path())
    };
    let out = run_pipeline(&cfg, false).unwrap();
    let back = PipelineConfig::from_file(tmp.path().join(EFFECTIVE_CONFIG)).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(out.report.layers, "6..8");
    assert_eq!(out.report.edit.edits.len(), 3);
    assert!(out.report.spectra.iter().all(|s| s.singular_values.len() == 2));
}
