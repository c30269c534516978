mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use common::*;
use regionscope::estimator::{
    predictions_from, Checkpoint, EstimationConfig, EstimationInputs, Estimator, Provenance, SelectionMode,
};
use regionscope::features::{FeatureSpace, RawMatrix};
use regionscope::llm::{Backend, BackendKind, CompletionRequest, KnnOracle, ScriptedBackend};
use regionscope::modules::{LandcoverClass, ModuleCall};
use regionscope::prompt::{serialize_table, DemoSource, PromptTemplateSet};
use regionscope::region::KShotSplit;
use regionscope::Error;

fn calls() -> Vec<ModuleCall> {
    vec![ModuleCall::NightLight, ca(LandcoverClass::Tree)]
}

fn rows(n: usize, prefix: &str) -> Vec<(String, Vec<f64>)> {
    (0..n)
        .map(|i| {
            let x = i as f64;
            (format!("{prefix}{i:02}"), vec![10.0 * x + 1.0, x * 0.5 + 0.25, 0.05 * x + 0.01])
        })
        .collect()
}

fn fixture(n: usize) -> EstimationInputs {
    estimation_inputs(&numeric_table(&calls(), &rows(n, "R")), "population")
}

fn unsupervised(inputs: &EstimationInputs) -> KShotSplit {
    KShotSplit {
        labeled: vec![],
        unlabeled: inputs.paragraphs.keys().cloned().collect(),
        seed: 0,
    }
}

#[test]
fn init_averages_parseable_answers_only() {
    let inputs = fixture(3);
    let split = unsupervised(&inputs);
    let backend = ScriptedBackend::new(["Answer: 10", "no idea", "Answer: 20", "Answer: 7", "Answer: 8"]);
    let out = Estimator::new(&backend, EstimationConfig::for_k(0, 1), &inputs).estimate_all(&split).unwrap();
    let first = &out.store.entries()[0];
    assert_eq!(first.1, 15.0);
    assert_eq!(out.store.provenance(&first.0), Some(Provenance::Init));
    assert_eq!(out.store.provenance(&out.store.entries()[1].0), Some(Provenance::Loop));
    assert_eq!(out.log.parse_failures.len(), 1);
}

#[test]
fn retries_then_requeue_then_success() {
    let inputs = fixture(3);
    let split = unsupervised(&inputs);
    let order = regionscope::estimator::sampling_order(&split.unlabeled, 2);
    // init ok; second region fails three times and is requeued behind the third
    let backend = ScriptedBackend::new([
        "Answer: 1", "Answer: 1", "Answer: 1", "?", "?", "?", "Answer: 3", "Answer: 2",
    ]);
    let out = Estimator::new(&backend, EstimationConfig::for_k(0, 2), &inputs).estimate_all(&split).unwrap();
    assert_eq!(out.log.requeued, vec![order[1].clone()]);
    let ids: Vec<&str> = out.store.entries().iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, vec![order[0].as_str(), order[2].as_str(), order[1].as_str()]);
    assert_eq!(out.store.get(&order[1]), Some(2.0));
    assert_eq!(out.log.parse_failures.len(), 3);
}

#[test]
fn persistent_parse_failure_saves_and_aborts() {
    let inputs = fixture(3);
    let split = unsupervised(&inputs);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cp.json");
    let mut responses = vec!["Answer: 1"; 3];
    responses.extend(["junk"; 3]);
    responses.push("Answer: 4");
    responses.extend(["junk"; 3]);
    let backend = ScriptedBackend::new(responses);
    let err = Estimator::new(&backend, EstimationConfig::for_k(0, 3), &inputs)
        .with_checkpoint(&path)
        .estimate_all(&split)
        .unwrap_err();
    assert!(matches!(err, Error::Estimation(_)), "{err}");
    let cp = Checkpoint::read(&path).unwrap();
    assert_eq!(cp.store.len(), 2);
    assert_eq!(cp.queue.len(), 1);
    assert_eq!(cp.requeued.len(), 1);

    // a different configuration refuses the checkpoint
    let other = ScriptedBackend::new(["Answer: 1"]);
    let err = Estimator::new(&other, EstimationConfig::for_k(0, 4), &inputs)
        .with_checkpoint(&path)
        .estimate_all(&split)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

struct FlakyTransport {
    fail_at: usize,
    calls: AtomicUsize,
}

impl Backend for FlakyTransport {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, request: &CompletionRequest) -> regionscope::Result<Vec<String>> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        if i == self.fail_at {
            return Err(Error::Transport("connection reset".into()));
        }
        Ok(vec![format!("Answer: {}", i + 1); request.n_samples])
    }
}

#[test]
fn transport_error_keeps_target_in_queue() {
    let inputs = fixture(6);
    let split = unsupervised(&inputs);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cp.json");
    let config = EstimationConfig::for_k(0, 5);
    let order = regionscope::estimator::sampling_order(&split.unlabeled, 5);
    let backend = FlakyTransport {
        fail_at: 4,
        calls: AtomicUsize::new(0),
    };
    let err = Estimator::new(&backend, config.clone(), &inputs)
        .with_checkpoint(&path)
        .estimate_all(&split)
        .unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    let cp = Checkpoint::read(&path).unwrap();
    // three init calls and one loop call succeeded
    assert_eq!(cp.store.len(), 2);
    assert_eq!(cp.queue[0], order[2]);
    assert_eq!(cp.queue.len(), 4);

    let healthy = FlakyTransport {
        fail_at: usize::MAX,
        calls: AtomicUsize::new(100),
    };
    let out = Estimator::new(&healthy, config, &inputs)
        .with_checkpoint(&path)
        .estimate_all(&split)
        .unwrap();
    assert_eq!(out.store.len(), 6);
    assert_eq!(out.log.resumed_at, Some(2));
}

#[test]
fn ablation_modes_use_their_own_pool() {
    let inputs = fixture(16);
    let split = unsupervised(&inputs);
    for (mode, allowed) in [
        (SelectionMode::NoCoarse, DemoSource::Fine),
        (SelectionMode::NoFine, DemoSource::Coarse),
        (SelectionMode::Random, DemoSource::Coarse),
    ] {
        let mut config = EstimationConfig::for_k(0, 6);
        config.selection_mode = mode;
        let backend = KnnOracle::default();
        let mut max_pseudo = 0;
        Estimator::new(&backend, config.clone(), &inputs)
            .estimate_all_observed(&split, &mut |s| {
                for m in &s.demonstrations.members {
                    assert_eq!(m.source, allowed, "{mode:?}");
                }
                max_pseudo = max_pseudo.max(s.demonstrations.pseudo_count());
            })
            .unwrap();
        let cap = match mode {
            SelectionMode::NoCoarse => config.n_fine,
            SelectionMode::NoFine => config.n_coarse,
            _ => config.n_coarse + config.n_fine,
        };
        assert_eq!(max_pseudo, cap, "{mode:?}");
    }
}

#[test]
fn random_mode_reruns_identically() {
    let inputs = fixture(12);
    let split = unsupervised(&inputs);
    let mut config = EstimationConfig::for_k(0, 8);
    config.selection_mode = SelectionMode::Random;
    let run = || {
        let mut picks = Vec::new();
        Estimator::new(&KnnOracle::default(), config.clone(), &inputs)
            .estimate_all_observed(&split, &mut |s| picks.push(s.demonstrations.members.clone()))
            .unwrap();
        picks
    };
    assert_eq!(run(), run());
}

#[test]
fn prompt_budget_trims_fine_first_and_keeps_labeled() {
    let inputs = fixture(20);
    let ids: Vec<String> = inputs.paragraphs.keys().cloned().collect();
    let split = KShotSplit {
        labeled: vec![(ids[0].clone(), 100.0), (ids[1].clone(), 200.0)],
        unlabeled: ids[2..].to_vec(),
        seed: 0,
    };
    let mut config = EstimationConfig::for_k(2, 9);
    let para_len = inputs.paragraphs[&ids[0]].len();
    // room for the target, both labeled demos and about two more
    config.max_prompt_chars = Some(6 * (para_len + 80));
    let backend = KnnOracle::default();
    let mut fine_first = true;
    let out = Estimator::new(&backend, config, &inputs).estimate_all(&split).unwrap();
    assert!(!out.log.trims.is_empty());
    for (_, trims) in &out.log.trims {
        assert!(trims.iter().all(|t| t.source != DemoSource::Labeled));
        // fine picks go before any coarse pick
        let first_coarse = trims.iter().position(|t| t.source == DemoSource::Coarse);
        if let Some(fc) = first_coarse {
            fine_first &= trims[fc..].iter().all(|t| t.source == DemoSource::Coarse);
        }
    }
    assert!(fine_first);
}

#[test]
fn transfer_draws_only_from_source() {
    let source_rows = rows(8, "S");
    let target_rows: Vec<(String, Vec<f64>)> = rows(5, "T")
        .into_iter()
        .map(|(id, v)| (id, v.iter().map(|x| x * 1.1 + 0.3).collect()))
        .collect();
    let source_table = numeric_table(&calls(), &source_rows);
    let target_table = numeric_table(&calls(), &target_rows);
    let templates = PromptTemplateSet::default();
    let space = FeatureSpace::joint(
        &RawMatrix::from_table(&source_table),
        &RawMatrix::from_table(&target_table),
        "source:",
    )
    .unwrap();
    let inputs = EstimationInputs {
        paragraphs: serialize_table(&target_table, &templates).unwrap(),
        space,
        indicator_phrase: "population".into(),
        templates: templates.clone(),
    };
    let source_paragraphs: BTreeMap<String, String> = serialize_table(&source_table, &templates)
        .unwrap()
        .into_iter()
        .map(|(k, v)| (format!("source:{k}"), v))
        .collect();
    let pool: Vec<(String, f64)> = source_rows
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (format!("source:{id}"), 1000.0 * (i + 1) as f64))
        .collect();
    let backend = ScriptedBackend::new(vec!["Answer: 5"; 5]);
    let targets: Vec<String> = target_table.regions.clone();
    let out = Estimator::new(&backend, EstimationConfig::for_k(3, 0), &inputs)
        .estimate_transfer(&targets, &pool, &source_paragraphs)
        .unwrap();
    assert_eq!(out.store.len(), 5);
    for prompt in backend.prompts() {
        let blocks: Vec<&str> = prompt.split("\n\n").collect();
        assert_eq!(blocks.len(), 7);
        for t in &target_table.regions {
            let p = &inputs.paragraphs[t];
            assert!(blocks[..6].iter().all(|b| !b.starts_with(p.as_str())));
        }
    }
    let preds = predictions_from(&out.store, &[], "POP");
    assert!(preds.iter().all(|p| p.provenance == Provenance::Loop));
}
