//! Stage-level contracts of the three-stage pipeline on small configurations.

use std::collections::BTreeMap;

use m3dt::conflict::{GroupAssignment, GroupingMethod};
use m3dt::datastore::DatasetStore;
use m3dt::eval::EvalMode;
use m3dt::metrics::NullSink;
use m3dt::model::init_backbone;
use m3dt::moe::Routing;
use m3dt::params::{Component, ParamSet};
use m3dt::pipeline::{Experiment, ExperimentConfig, GroupingChoice};
use m3dt::training::{batch_loss, sample_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(n_tasks: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.suite.subset = Some(n_tasks);
    c
}

fn components(p: &ParamSet) -> Vec<Component> {
    let mut c: Vec<Component> = p.iter().map(|(_, e)| e.component).collect();
    c.dedup();
    c.sort();
    c.dedup();
    c
}

fn tensors_of(p: &ParamSet, c: Component) -> BTreeMap<String, Vec<u32>> {
    p.iter()
        .filter(|(_, e)| e.component == c)
        .map(|(n, e)| (n.clone(), e.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn backbone_training_lowers_held_out_loss() {
    let mut cfg = small(6);
    cfg.training.steps_stage1 = 200;
    cfg.training.early_stop.enabled = false;
    let exp = Experiment::generate(cfg.clone()).unwrap();
    let s1 = exp.stage1(&mut NullSink).unwrap();
    assert_eq!(s1.selected_step, 200);
    assert!(!s1.early_stop_fired);

    let tasks: Vec<_> = exp.store.tasks.clone();
    let mut info = exp.store.generation.clone();
    info.seed ^= 0x5eed;
    let held_out = DatasetStore::generate(&tasks, info).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = sample_batch(&held_out, &cfg.model, &exp.norm, &exp.task_ids, 64, &mut rng).unwrap();
    let trained = batch_loss(&s1.selected, &cfg.model, &batch, &Routing::BackboneOnly).unwrap();
    let fresh = batch_loss(&init_backbone(&cfg.model, 1).unwrap(), &cfg.model, &batch, &Routing::BackboneOnly).unwrap();
    assert!(trained < fresh, "held-out loss {trained} after training vs {fresh} at init");
}

#[test]
fn early_stop_selects_the_smoothed_conflict_peak() {
    let mut cfg = small(8);
    cfg.training.steps_stage1 = 200;
    cfg.training.sim_log_interval = 5;
    cfg.training.early_stop.smoothing_window = 2;
    cfg.training.early_stop.patience = 2;
    cfg.training.early_stop.min_samples = 2;
    let exp = Experiment::generate(cfg).unwrap();
    let s1 = exp.stage1(&mut NullSink).unwrap();
    assert!(s1.selected_step <= s1.final_step);
    assert_eq!(s1.curve[0].step, 0);
    let peak = s1
        .curve
        .iter()
        .filter(|p| p.step > 0)
        .filter_map(|p| p.smoothed_conflict.map(|c| (p.step, c)))
        .fold(None, |best: Option<(u64, f64)>, (s, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((s, c)),
        });
    if s1.early_stop_fired {
        assert_eq!(Some(s1.selected_step), peak.map(|p| p.0));
        assert!(s1.final_step < 200);
    } else {
        assert_eq!(s1.selected_step, s1.final_step);
        assert_eq!(s1.selected, s1.final_params);
    }
    let at = s1.curve.iter().find(|p| p.step == s1.selected_step).map(|p| p.similarity);
    assert_eq!(at.flatten(), s1.similarity_at_selected);
}

#[test]
fn stage_checkpoints_add_one_component_kind_each() {
    let exp = Experiment::generate(small(8)).unwrap();
    let s1 = exp.stage1(&mut NullSink).unwrap();
    assert_eq!(components(&s1.selected), vec![Component::Backbone]);

    let groups = exp.group(&s1.selected, GroupingChoice::Random).unwrap();
    let s2 = exp.stage2(&s1.selected, &groups.assignment, &mut NullSink).unwrap();
    let n = exp.cfg.moe.n_experts;
    let mut want: Vec<Component> = vec![Component::Backbone];
    want.extend((0..n).map(Component::Expert));
    assert_eq!(components(&s2.params), want);
    assert_eq!(tensors_of(&s2.params, Component::Backbone), tensors_of(&s1.selected, Component::Backbone));

    let s3 = exp.stage3(&s2.params, false, &mut NullSink).unwrap();
    want.push(Component::Router);
    assert_eq!(components(&s3), want);
    for c in &want[..want.len() - 1] {
        assert_eq!(tensors_of(&s3, *c), tensors_of(&s2.params, *c), "{c:?} changed in stage 3");
    }

    let thawed = exp.stage3(&s2.params, true, &mut NullSink).unwrap();
    assert_eq!(tensors_of(&thawed, Component::Backbone), tensors_of(&s1.selected, Component::Backbone));
    assert!((0..n).any(|j| tensors_of(&thawed, Component::Expert(j)) != tensors_of(&s2.params, Component::Expert(j))));
}

fn assignment(groups: &[&[usize]]) -> GroupAssignment {
    let assignment = groups
        .iter()
        .enumerate()
        .flat_map(|(g, ids)| ids.iter().map(move |&id| (id, g)))
        .collect();
    GroupAssignment {
        method: GroupingMethod::Random,
        n_groups: groups.len(),
        assignment,
    }
}

#[test]
fn each_expert_depends_only_on_its_own_group() {
    let mut cfg = small(8);
    cfg.moe.n_experts = 3;
    cfg.grouping.n_groups = 3;
    let exp = Experiment::generate(cfg).unwrap();
    let ids = exp.task_ids.clone();
    let s1 = exp.stage1(&mut NullSink).unwrap();
    let a = assignment(&[&ids[0..2], &ids[2..5], &ids[5..8]]);
    let b = assignment(&[&ids[0..2], &ids[5..8], &ids[2..5]]);
    let ea = exp.stage2(&s1.selected, &a, &mut NullSink).unwrap().params;
    let eb = exp.stage2(&s1.selected, &b, &mut NullSink).unwrap().params;
    assert_eq!(tensors_of(&ea, Component::Expert(0)), tensors_of(&eb, Component::Expert(0)));
    assert_ne!(tensors_of(&ea, Component::Expert(1)), tensors_of(&eb, Component::Expert(1)));
    assert_eq!(tensors_of(&ea, Component::Backbone), tensors_of(&s1.selected, Component::Backbone));
    assert_eq!(tensors_of(&ea, Component::Router), BTreeMap::new());
}

#[test]
fn single_expert_oracle_matches_dense_and_topn_matches_dense() {
    let mut cfg = small(6);
    cfg.moe.n_experts = 1;
    cfg.grouping.n_groups = 1;
    cfg.evaluation.episodes_per_task = 2;
    let exp = Experiment::generate(cfg).unwrap();
    let s1 = exp.stage1(&mut NullSink).unwrap();
    let g = exp.group(&s1.selected, GroupingChoice::Gradient).unwrap();
    let s2 = exp.stage2(&s1.selected, &g.assignment, &mut NullSink).unwrap();
    let s3 = exp.stage3(&s2.params, false, &mut NullSink).unwrap();
    let dense = exp.evaluate(&s3, EvalMode::Dense, None).unwrap();
    let oracle = exp.evaluate(&s3, EvalMode::Oracle, Some(&g.assignment)).unwrap();
    let top1 = exp.evaluate(&s3, EvalMode::TopK(1), None).unwrap();
    assert_eq!(dense, oracle);
    assert_eq!(dense, top1);
}

#[test]
fn evaluation_modes_reject_missing_inputs() {
    let exp = Experiment::generate(small(4)).unwrap();
    let s1 = exp.stage1(&mut NullSink).unwrap();
    assert!(exp.evaluate(&s1.selected, EvalMode::Dense, None).is_err());
    assert!(exp.evaluate(&s1.selected, EvalMode::TopK(2), None).is_err());
    assert!(exp.evaluate(&s1.selected, EvalMode::Oracle, None).is_err());
    let a = exp.evaluate(&s1.selected, EvalMode::Backbone, None).unwrap();
    let b = exp.evaluate(&s1.selected, EvalMode::Backbone, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_task.keys().copied().collect::<Vec<_>>(), exp.task_ids);
}
