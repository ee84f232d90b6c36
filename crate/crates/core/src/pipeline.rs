//! Experiment configuration and the staged training protocol: backbone
//! training with conflict tracking, task grouping, per-group expert
//! training, router training, the ablation variants and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::CheckpointMeta;
use crate::conflict::{
    agreement_vectors, gradient_similarity, kmeans_grouping, per_task_gradients, random_grouping,
    task_subset_sampler, GradScope, GradientSweep, GroupAssignment, KmeansOutcome, PeakDetector, Similarity,
};
use crate::datastore::{DatasetStore, GenerationInfo};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, EvalMode, ModelPolicy, SuiteEval, TargetRtg};
use crate::metrics::{MetricsRow, MetricsSink, Stage};
use crate::model::{init_backbone, ModelConfig, Normalizer};
use crate::moe::{init_experts_function_preserving, init_experts_random, init_router, MoeConfig, Routing, RoutingMode};
use crate::optim::{train_only, AdamState};
use crate::params::{Component, ParamSet};
use crate::tasks::{ControllerGains, NoiseSchedule, SuiteKind, MAX_ACTION_DIM, MAX_STATE_DIM};
use crate::tensor::hash_keys;
use crate::training::{run_phase, Phase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    /// Draw this many tasks with the task-subset sampler instead of using
    /// the whole suite.
    pub subset: Option<usize>,
    pub episode_len: usize,
    pub n_traj_per_task: usize,
    pub noise: NoiseSchedule,
    pub gains: ControllerGains,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub smoothing_window: usize,
    pub patience: usize,
    /// Similarity samples required before the trigger may fire.
    pub min_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    pub steps_stage3: u64,
    pub sim_log_interval: u64,
    pub loss_log_interval: u64,
    pub grad_batches_per_task: usize,
    pub grad_scope: GradScope,
    pub grad_clip: Option<f32>,
    pub early_stop: EarlyStopConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingChoice {
    Random,
    /// k-means over agreement vectors of per-task gradients.
    Gradient,
}

impl FromStr for GroupingChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GroupingChoice::Random),
            "gradient" => Ok(GroupingChoice::Gradient),
            _ => Err(Error::Config(format!("unknown grouping method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingConfig {
    pub method: GroupingChoice,
    pub n_groups: usize,
    pub normalize_agreement: bool,
    pub kmeans_max_iters: usize,
    /// Minibatches averaged per task for the one-off grouping sweep. Kept
    /// separate from the periodic similarity logging, which can be noisier.
    pub grad_batches_per_task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub episodes_per_task: usize,
    pub target_rtg: TargetRtg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub moe: MoeConfig,
    pub training: TrainingConfig,
    pub grouping: GroupingConfig,
    pub evaluation: EvaluationConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Full-size hyper-parameters (documentation; far too slow for a CPU).
    pub fn full() -> Self {
        Self {
            suite: SuiteConfig {
                kind: SuiteKind::Default16,
                subset: None,
                episode_len: 64,
                n_traj_per_task: 100,
                noise: NoiseSchedule::default(),
                gains: ControllerGains::default(),
            },
            model: ModelConfig::full(),
            moe: MoeConfig {
                n_experts: 4,
                router_layers: 5,
                router_hidden: 256,
                routing_mode: RoutingMode::Dense,
            },
            training: TrainingConfig {
                batch_size: 16,
                lr: 1e-4,
                steps_stage1: 400_000,
                steps_stage2: 200_000,
                steps_stage3: 400_000,
                sim_log_interval: 10_000,
                loss_log_interval: 1_000,
                grad_batches_per_task: 8,
                grad_scope: GradScope::AllBackbone,
                grad_clip: Some(0.25),
                early_stop: EarlyStopConfig {
                    enabled: false,
                    smoothing_window: 5,
                    patience: 3,
                    min_samples: 0,
                },
            },
            grouping: GroupingConfig {
                method: GroupingChoice::Gradient,
                n_groups: 4,
                normalize_agreement: false,
                kmeans_max_iters: 100,
                grad_batches_per_task: 32,
            },
            evaluation: EvaluationConfig {
                episodes_per_task: 10,
                target_rtg: TargetRtg::RMax,
            },
            seed: 0,
            output_dir: None,
        }
    }

    /// Desk-scale default: 16 tasks, a 3-layer width-64 model, 4 experts.
    pub fn desk() -> Self {
        let p = Self::full();
        Self {
            suite: SuiteConfig {
                n_traj_per_task: 40,
                ..p.suite
            },
            model: ModelConfig::desk(),
            moe: MoeConfig {
                router_hidden: 64,
                ..p.moe
            },
            training: TrainingConfig {
                lr: 1e-3,
                steps_stage1: 20_000,
                steps_stage2: 10_000,
                steps_stage3: 20_000,
                sim_log_interval: 500,
                loss_log_interval: 100,
                grad_batches_per_task: 2,
                early_stop: EarlyStopConfig {
                    enabled: true,
                    min_samples: 8,
                    ..p.training.early_stop
                },
                ..p.training
            },
            ..p
        }
    }

    /// A few seconds end to end; exercises every code path.
    pub fn smoke() -> Self {
        let d = Self::desk();
        Self {
            suite: SuiteConfig {
                episode_len: 16,
                n_traj_per_task: 8,
                ..d.suite
            },
            model: ModelConfig {
                n_layers: 1,
                n_heads: 2,
                hidden_dim: 16,
                context_k: 4,
                prompt_kstar: 2,
                max_episode_len: 16,
                ..d.model
            },
            moe: MoeConfig {
                router_layers: 3,
                router_hidden: 8,
                ..d.moe
            },
            training: TrainingConfig {
                batch_size: 4,
                steps_stage1: 12,
                steps_stage2: 6,
                steps_stage3: 6,
                sim_log_interval: 4,
                loss_log_interval: 2,
                grad_batches_per_task: 1,
                early_stop: EarlyStopConfig {
                    min_samples: 2,
                    ..d.training.early_stop
                },
                ..d.training
            },
            grouping: GroupingConfig {
                grad_batches_per_task: 2,
                ..d.grouping
            },
            evaluation: EvaluationConfig {
                episodes_per_task: 1,
                ..d.evaluation
            },
            ..d
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moe.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.grouping.n_groups != self.moe.n_experts {
            return bad(format!(
                "grouping.n_groups ({}) must equal moe.n_experts ({})",
                self.grouping.n_groups, self.moe.n_experts
            ));
        }
        if self.moe.routing_mode == RoutingMode::Oracle {
            return bad("oracle routing is an evaluation mode, not a training mode".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || t.sim_log_interval == 0 || t.loss_log_interval == 0 || t.grad_batches_per_task == 0 {
            return bad("batch_size, log intervals and grad_batches_per_task must be positive".into());
        }
        if self.grouping.grad_batches_per_task == 0 || self.grouping.kmeans_max_iters == 0 {
            return bad("grouping.grad_batches_per_task and kmeans_max_iters must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", t.lr));
        }
        if t.early_stop.enabled && (t.early_stop.smoothing_window == 0 || t.early_stop.patience == 0) {
            return bad("early_stop window and patience must be positive".into());
        }
        let s = &self.suite;
        if s.episode_len == 0 || s.episode_len > self.model.max_episode_len {
            return bad(format!(
                "episode_len {} must be in [1, model.max_episode_len = {}]",
                s.episode_len, self.model.max_episode_len
            ));
        }
        if self.model.prompt_kstar > s.episode_len {
            return bad("prompt_kstar exceeds the episode length".into());
        }
        if self.model.max_state_dim < MAX_STATE_DIM || self.model.max_action_dim < MAX_ACTION_DIM {
            return bad(format!(
                "model dims must cover the suite maxima ({MAX_STATE_DIM}, {MAX_ACTION_DIM})"
            ));
        }
        if s.n_traj_per_task == 0 {
            return bad("n_traj_per_task must be positive".into());
        }
        let n_tasks = s.kind.tasks(s.episode_len).len();
        let used = s.subset.unwrap_or(n_tasks);
        if used == 0 || used > n_tasks {
            return bad(format!("subset of {used} from a suite of {n_tasks} tasks"));
        }
        if self.grouping.n_groups > used {
            return bad(format!("{} groups for {used} tasks", self.grouping.n_groups));
        }
        if self.evaluation.episodes_per_task == 0 {
            return bad("evaluation.episodes_per_task must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn generation(&self) -> GenerationInfo {
        GenerationInfo {
            seed: hash_keys(&[self.seed, tag::DATA]),
            n_traj_per_task: self.suite.n_traj_per_task,
            noise: self.suite.noise,
            gains: self.suite.gains,
        }
    }
}

mod tag {
    pub const DATA: u64 = 0xda7a;
    pub const SUBSET: u64 = 0x5b;
    pub const INIT: u64 = 0x1;
    pub const STAGE1: u64 = 0x11;
    pub const STAGE2: u64 = 0x12;
    pub const STAGE3: u64 = 0x13;
    pub const ROUTER: u64 = 0x14;
    pub const E2E: u64 = 0x15;
    pub const NO_GROUPING: u64 = 0x16;
    pub const SIM: u64 = 0x17;
    pub const GROUPING: u64 = 0x18;
    pub const EVAL: u64 = 0x19;
}

/// Ablation variants of the staged protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    /// Backbone, experts and router trained jointly from scratch.
    E2e,
    /// Stage 1, then experts and router jointly on all tasks.
    NoGrouping,
    /// Stage 3 also updates the experts.
    NoExpertFreeze,
    /// Evaluate with each task routed to its group's expert.
    OracleEval,
    /// Evaluate with top-k routing.
    TopK(usize),
    /// Halved model and router widths.
    Small,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::E2e => f.write_str("e2e"),
            Variant::NoGrouping => f.write_str("no_grouping"),
            Variant::NoExpertFreeze => f.write_str("no_expert_freeze"),
            Variant::OracleEval => f.write_str("oracle_eval"),
            Variant::TopK(k) => write!(f, "topk:{k}"),
            Variant::Small => f.write_str("small"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" => Ok(Variant::E2e),
            "no_grouping" => Ok(Variant::NoGrouping),
            "no_expert_freeze" => Ok(Variant::NoExpertFreeze),
            "oracle_eval" => Ok(Variant::OracleEval),
            "small" => Ok(Variant::Small),
            _ => {
                let k = s
                    .strip_prefix("topk:")
                    .or_else(|| s.strip_prefix("topk(").and_then(|r| r.strip_suffix(')')));
                k.and_then(|k| k.parse().ok())
                    .filter(|&k| k > 0)
                    .map(Variant::TopK)
                    .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
            }
        }
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub similarity: Option<f64>,
    /// Trailing-mean conflict seen by the early-stop detector.
    pub smoothed_conflict: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Backbone at the selected step (the conflict peak when early stopping
    /// fired, the last trained step otherwise).
    pub selected: ParamSet,
    pub selected_step: u64,
    pub final_params: ParamSet,
    pub final_step: u64,
    pub early_stop_fired: bool,
    pub curve: Vec<CurvePoint>,
    pub similarity_at_selected: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub selected_step: u64,
    pub final_step: u64,
    pub early_stop_fired: bool,
    pub similarity_at_selected: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl Stage1Outcome {
    pub fn summary(&self) -> Stage1Summary {
        Stage1Summary {
            selected_step: self.selected_step,
            final_step: self.final_step,
            early_stop_fired: self.early_stop_fired,
            similarity_at_selected: self.similarity_at_selected,
            curve: self.curve.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Grouping {
    pub assignment: GroupAssignment,
    pub similarity: Option<Similarity>,
    pub kmeans: Option<KmeansOutcome>,
}

#[derive(Clone, Debug)]
pub struct ExpertOutcome {
    /// Backbone plus experts (and the router, for the joint variant).
    pub params: ParamSet,
    /// Mean of the expert-scope gradient similarities logged while the
    /// experts trained (`None` if nothing was logged or all undefined).
    pub expert_similarity: Option<f64>,
}

/// A configured experiment with its data loaded.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub store: DatasetStore,
    pub task_ids: Vec<usize>,
    pub norm: Normalizer,
    pub config_hash: String,
}

/// Tasks and offline data for a configuration.
pub fn generate_store(cfg: &ExperimentConfig) -> Result<DatasetStore> {
    cfg.validate()?;
    DatasetStore::generate(&cfg.suite.kind.tasks(cfg.suite.episode_len), cfg.generation())
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, store: DatasetStore) -> Result<Self> {
        cfg.validate()?;
        if store.generation != cfg.generation() {
            return Err(Error::Config("dataset store was generated with different settings".into()));
        }
        let expected = cfg.suite.kind.tasks(cfg.suite.episode_len);
        let same = expected.len() == store.tasks.len()
            && expected.iter().zip(&store.tasks).all(|(a, b)| {
                a.task_id == b.task_id && a.parameter == b.parameter && a.episode_len == b.episode_len
            });
        if !same {
            return Err(Error::Config("dataset store holds a different task suite".into()));
        }
        let task_ids = match cfg.suite.subset {
            Some(n) => task_subset_sampler(&store.tasks, &store.difficulty()?, n, hash_keys(&[cfg.seed, tag::SUBSET]))?,
            None => store.task_ids(),
        };
        let norm = Normalizer::fit(
            task_ids.iter().map(|&id| store.dataset(id)).collect::<Result<Vec<_>>>()?.into_iter().flatten(),
            cfg.model.max_state_dim,
        );
        let config_hash = cfg.hash();
        Ok(Self {
            cfg,
            store,
            task_ids,
            norm,
            config_hash,
        })
    }

    /// Generate data in memory and build the experiment.
    pub fn generate(cfg: ExperimentConfig) -> Result<Self> {
        let store = generate_store(&cfg)?;
        Self::new(cfg, store)
    }

    fn seed(&self, t: u64, extra: u64) -> u64 {
        hash_keys(&[self.cfg.seed, t, extra])
    }

    pub fn meta(&self, stage: u32, step: u64, with_moe: bool) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: self.config_hash.clone(),
            stage,
            step,
            model: self.cfg.model.clone(),
            normalizer: self.norm.clone(),
            moe: with_moe.then(|| self.cfg.moe.clone()),
        }
    }

    fn lr(&self) -> f32 {
        self.cfg.training.lr as f32
    }

    fn phase(&self, steps: u64, routing: Routing, task_ids: Vec<usize>, seed: u64) -> Phase {
        Phase {
            steps,
            batch_size: self.cfg.training.batch_size,
            grad_clip: self.cfg.training.grad_clip,
            routing,
            task_ids,
            seed,
        }
    }

    fn training_routing(&self) -> Routing {
        match self.cfg.moe.routing_mode {
            RoutingMode::Dense | RoutingMode::Oracle => Routing::Dense,
            RoutingMode::Topk { k } => Routing::TopK(k),
            RoutingMode::Hard { expert } => Routing::Hard(expert),
        }
    }

    /// Gradient similarity across `task_ids` on the given scope.
    pub fn similarity(
        &self,
        params: &ParamSet,
        task_ids: &[usize],
        scope: GradScope,
        routing_for: impl Fn(usize) -> Routing,
    ) -> Result<Similarity> {
        let sweep = GradientSweep {
            batches_per_task: self.cfg.training.grad_batches_per_task,
            batch_size: self.cfg.training.batch_size,
            scope,
            seed: self.seed(tag::SIM, 0),
        };
        let report = per_task_gradients(params, &self.cfg.model, &self.norm, &self.store, task_ids, &sweep, routing_for)?;
        Ok(gradient_similarity(&report))
    }

    fn backbone_similarity(&self, params: &ParamSet) -> Result<Option<f64>> {
        Ok(self
            .similarity(params, &self.task_ids, self.cfg.training.grad_scope, |_| Routing::BackboneOnly)?
            .value)
    }

    /// Train the backbone on every task, logging gradient similarity every
    /// `sim_log_interval` steps. With early stopping the run ends once the
    /// smoothed conflict peak is confirmed and the peak step is selected.
    pub fn stage1(&self, sink: &mut dyn MetricsSink) -> Result<Stage1Outcome> {
        let t = &self.cfg.training;
        let es = &t.early_stop;
        let mut params = init_backbone(&self.cfg.model, self.seed(tag::INIT, 0))?;
        let mut adam = AdamState::new(&params, self.lr());
        let phase = self.phase(t.steps_stage1, Routing::BackboneOnly, self.task_ids.clone(), self.seed(tag::STAGE1, 0));

        let sim0 = self.backbone_similarity(&params)?;
        sink.emit(MetricsRow::new(Stage::Backbone, 0, self.cfg.seed).with_similarity(sim0))?;
        let mut curve = vec![CurvePoint {
            step: 0,
            similarity: sim0,
            smoothed_conflict: None,
        }];
        let mut detector = PeakDetector::new(es.smoothing_window, es.patience, es.min_samples);
        let mut peak: Option<(u64, ParamSet)> = None;
        let mut fired = false;
        let mut last_sim: Option<(u64, Option<f64>)> = Some((0, sim0));

        let final_step = run_phase(&mut params, &mut adam, &self.store, &self.cfg.model, &self.norm, &phase, |step, loss, p| {
            let log_sim = step % t.sim_log_interval == 0;
            let log_loss = step % t.loss_log_interval == 0;
            let mut row = MetricsRow {
                loss: Some(loss),
                ..MetricsRow::new(Stage::Backbone, step, self.cfg.seed)
            };
            let mut keep_going = true;
            if log_sim {
                let sim = self.backbone_similarity(p)?;
                row = row.with_similarity(sim);
                last_sim = Some((step, sim));
                let mut smoothed = None;
                if let Some(s) = sim {
                    smoothed = Some(detector.push(step, 1.0 - s));
                    if detector.best_step() == Some(step) {
                        peak = Some((step, p.clone()));
                    }
                    if es.enabled && detector.fired().is_some() {
                        fired = true;
                        keep_going = false;
                    }
                }
                curve.push(CurvePoint {
                    step,
                    similarity: sim,
                    smoothed_conflict: smoothed,
                });
            }
            if log_sim || log_loss || !keep_going {
                sink.emit(row)?;
            }
            Ok(keep_going)
        })?;

        let (selected_step, selected) = match (fired, peak) {
            (true, Some((s, p))) => (s, p),
            _ => (final_step, params.clone()),
        };
        let similarity_at_selected = match curve.iter().find(|c| c.step == selected_step) {
            Some(c) => c.similarity,
            None => match last_sim {
                Some((s, sim)) if s == selected_step => sim,
                _ => self.backbone_similarity(&selected)?,
            },
        };
        Ok(Stage1Outcome {
            selected,
            selected_step,
            final_params: params,
            final_step,
            early_stop_fired: fired,
            curve,
            similarity_at_selected,
        })
    }

    /// Partition the experiment's tasks into `n_groups` groups.
    pub fn group(&self, backbone: &ParamSet, method: GroupingChoice) -> Result<Grouping> {
        let g = &self.cfg.grouping;
        let seed = self.seed(tag::GROUPING, 0);
        match method {
            GroupingChoice::Random => Ok(Grouping {
                assignment: random_grouping(&self.task_ids, g.n_groups, seed)?,
                similarity: None,
                kmeans: None,
            }),
            GroupingChoice::Gradient => {
                let sweep = GradientSweep {
                    batches_per_task: g.grad_batches_per_task,
                    batch_size: self.cfg.training.batch_size,
                    scope: self.cfg.training.grad_scope,
                    seed: self.seed(tag::SIM, 0),
                };
                let report = per_task_gradients(
                    backbone,
                    &self.cfg.model,
                    &self.norm,
                    &self.store,
                    &self.task_ids,
                    &sweep,
                    |_| Routing::BackboneOnly,
                )?;
                let vectors = agreement_vectors(&report, g.normalize_agreement);
                let km = kmeans_grouping(&vectors, g.n_groups, seed, g.kmeans_max_iters)?;
                Ok(Grouping {
                    assignment: km.assignment.clone(),
                    similarity: Some(gradient_similarity(&report)),
                    kmeans: Some(km),
                })
            }
        }
    }

    fn check_groups(&self, groups: &GroupAssignment) -> Result<()> {
        groups.validate()?;
        if groups.n_groups != self.cfg.moe.n_experts {
            return Err(Error::Config(format!(
                "{} groups for {} experts",
                groups.n_groups, self.cfg.moe.n_experts
            )));
        }
        let mut ids: Vec<usize> = groups.assignment.keys().copied().collect();
        ids.sort_unstable();
        let mut mine = self.task_ids.clone();
        mine.sort_unstable();
        if ids != mine {
            return Err(Error::Config("group map does not cover exactly the experiment's tasks".into()));
        }
        Ok(())
    }

    /// Function-preserving experts around the backbone; expert `j` is then
    /// trained alone (hard routing) on group `j` while everything else is
    /// frozen. Jobs run in parallel; their metrics are emitted in expert
    /// order with steps numbered `j * steps_stage2 + step`.
    pub fn stage2(&self, backbone: &ParamSet, groups: &GroupAssignment, sink: &mut dyn MetricsSink) -> Result<ExpertOutcome> {
        self.check_groups(groups)?;
        let t = &self.cfg.training;
        let n = self.cfg.moe.n_experts;
        let mut base = backbone.filter(|_, e| e.component == Component::Backbone);
        base.merge(init_experts_function_preserving(&base, &self.cfg.model, n)?);
        let members = groups.groups();
        let jobs: Vec<(ParamSet, Vec<MetricsRow>, Vec<Option<f64>>)> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut p = base.clone();
                train_only(&mut p, &[Component::Expert(j)])?;
                let mut adam = AdamState::new(&p, self.lr());
                let phase = self.phase(t.steps_stage2, Routing::Hard(j), members[j].clone(), self.seed(tag::STAGE2, j as u64));
                let mut rows = Vec::new();
                let mut sims = Vec::new();
                run_phase(&mut p, &mut adam, &self.store, &self.cfg.model, &self.norm, &phase, |step, loss, cur| {
                    let log_sim = step % t.sim_log_interval == 0;
                    if log_sim || step % t.loss_log_interval == 0 {
                        let mut row = MetricsRow {
                            loss: Some(loss),
                            expert_id: Some(j),
                            ..MetricsRow::new(Stage::Experts, j as u64 * t.steps_stage2 + step, self.cfg.seed)
                        };
                        // A single task agrees with itself trivially, so
                        // singleton groups report no similarity.
                        if log_sim && members[j].len() > 1 {
                            let s = self.similarity(cur, &members[j], GradScope::Expert(j), |_| Routing::Hard(j))?.value;
                            sims.push(s);
                            row = row.with_similarity(s);
                        }
                        rows.push(row);
                    }
                    Ok(true)
                })?;
                Ok((p, rows, sims))
            })
            .collect::<Result<_>>()?;
        let mut params = base;
        let mut all_sims = Vec::new();
        for (j, (p, rows, sims)) in jobs.into_iter().enumerate() {
            for row in rows {
                sink.emit(row)?;
            }
            all_sims.extend(sims);
            for (name, e) in p.iter().filter(|(_, e)| e.component == Component::Expert(j)) {
                params.get_mut(name).expect("same layout").tensor = e.tensor.clone();
            }
        }
        params.set_all_trainable(false);
        Ok(ExpertOutcome {
            params,
            expert_similarity: mean_defined(&all_sims),
        })
    }

    /// Attach a fresh router and train it on every task with everything
    /// else frozen (`train_experts` also unfreezes the experts).
    pub fn stage3(&self, experts: &ParamSet, train_experts: bool, sink: &mut dyn MetricsSink) -> Result<ParamSet> {
        let n = self.cfg.moe.n_experts;
        if experts.n_experts() != n {
            return Err(Error::MissingArtifact(format!(
                "stage 3 needs {n} trained experts, found {}",
                experts.n_experts()
            )));
        }
        let t = &self.cfg.training;
        let mut p = experts.filter(|_, e| e.component != Component::Router);
        p.merge(init_router(&self.cfg.model, &self.cfg.moe, self.seed(tag::ROUTER, 0))?);
        let mut comps = vec![Component::Router];
        if train_experts {
            comps.extend((0..n).map(Component::Expert));
        }
        train_only(&mut p, &comps)?;
        let mut adam = AdamState::new(&p, self.lr());
        let phase = self.phase(t.steps_stage3, self.training_routing(), self.task_ids.clone(), self.seed(tag::STAGE3, 0));
        run_phase(&mut p, &mut adam, &self.store, &self.cfg.model, &self.norm, &phase, |step, loss, _| {
            if step % t.loss_log_interval == 0 {
                sink.emit(MetricsRow {
                    loss: Some(loss),
                    ..MetricsRow::new(Stage::Router, step, self.cfg.seed)
                })?;
            }
            Ok(true)
        })?;
        p.set_all_trainable(false);
        Ok(p)
    }

    /// Backbone, randomly initialised experts and router trained jointly
    /// from scratch for the combined step budget of the three stages.
    pub fn e2e(&self, sink: &mut dyn MetricsSink) -> Result<ParamSet> {
        let t = &self.cfg.training;
        let mut p = init_backbone(&self.cfg.model, self.seed(tag::INIT, 0))?;
        p.merge(init_experts_random(&self.cfg.model, self.cfg.moe.n_experts, self.seed(tag::E2E, 0)));
        p.merge(init_router(&self.cfg.model, &self.cfg.moe, self.seed(tag::ROUTER, 0))?);
        p.set_all_trainable(true);
        let mut adam = AdamState::new(&p, self.lr());
        let steps = t.steps_stage1 + t.steps_stage2 + t.steps_stage3;
        let phase = self.phase(steps, self.training_routing(), self.task_ids.clone(), self.seed(tag::E2E, 1));
        run_phase(&mut p, &mut adam, &self.store, &self.cfg.model, &self.norm, &phase, |step, loss, _| {
            if step % t.loss_log_interval == 0 {
                sink.emit(MetricsRow {
                    loss: Some(loss),
                    ..MetricsRow::new(Stage::Backbone, step, self.cfg.seed)
                })?;
            }
            Ok(true)
        })?;
        p.set_all_trainable(false);
        Ok(p)
    }

    /// Function-preserving experts and a fresh router trained jointly on
    /// every task (backbone frozen) for `steps_stage2 + steps_stage3` steps.
    pub fn no_grouping(&self, backbone: &ParamSet, sink: &mut dyn MetricsSink) -> Result<ExpertOutcome> {
        let t = &self.cfg.training;
        let n = self.cfg.moe.n_experts;
        let mut p = backbone.filter(|_, e| e.component == Component::Backbone);
        p.merge(init_experts_function_preserving(&p, &self.cfg.model, n)?);
        p.merge(init_router(&self.cfg.model, &self.cfg.moe, self.seed(tag::ROUTER, 0))?);
        let mut comps: Vec<Component> = (0..n).map(Component::Expert).collect();
        comps.push(Component::Router);
        train_only(&mut p, &comps)?;
        let mut adam = AdamState::new(&p, self.lr());
        let routing = self.training_routing();
        let phase = self.phase(t.steps_stage2 + t.steps_stage3, routing.clone(), self.task_ids.clone(), self.seed(tag::NO_GROUPING, 0));
        let mut sims = Vec::new();
        run_phase(&mut p, &mut adam, &self.store, &self.cfg.model, &self.norm, &phase, |step, loss, cur| {
            let log_sim = step % t.sim_log_interval == 0;
            if log_sim || step % t.loss_log_interval == 0 {
                let mut row = MetricsRow {
                    loss: Some(loss),
                    ..MetricsRow::new(Stage::Experts, step, self.cfg.seed)
                };
                if log_sim {
                    let s = self.similarity(cur, &self.task_ids, GradScope::Experts, |_| routing.clone())?.value;
                    sims.push(s);
                    row = row.with_similarity(s);
                }
                sink.emit(row)?;
            }
            Ok(true)
        })?;
        p.set_all_trainable(false);
        Ok(ExpertOutcome {
            params: p,
            expert_similarity: mean_defined(&sims),
        })
    }

    /// Mean normalized score over the experiment's tasks. Evaluation seeds
    /// depend on the configuration seed only, so every variant sees the same
    /// start states and prompts.
    pub fn evaluate(&self, params: &ParamSet, mode: EvalMode, groups: Option<&GroupAssignment>) -> Result<SuiteEval> {
        match mode {
            EvalMode::Dense | EvalMode::TopK(_) if params.n_experts() == 0 => {
                return Err(Error::InvalidArgument(format!("{mode} evaluation needs experts and a router")));
            }
            EvalMode::TopK(k) if k > params.n_experts() => {
                return Err(Error::InvalidArgument(format!("top-{k} over {} experts", params.n_experts())));
            }
            EvalMode::Oracle => {
                let g = groups.ok_or_else(|| Error::InvalidArgument("oracle evaluation needs a group map".into()))?;
                self.check_groups(g)?;
            }
            _ => {}
        }
        let policy = ModelPolicy {
            params,
            cfg: &self.cfg.model,
            norm: &self.norm,
            mode,
            groups,
        };
        evaluate_suite(
            &policy,
            &self.store,
            &self.task_ids,
            self.cfg.model.prompt_kstar,
            self.cfg.evaluation.episodes_per_task,
            self.seed(tag::EVAL, 0),
            self.cfg.evaluation.target_rtg,
        )
    }
}

/// Proportionally reduced widths for the `small` variant.
pub fn small_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    let d = (cfg.model.hidden_dim / 2).max(cfg.model.n_heads);
    c.model.hidden_dim = d - d % cfg.model.n_heads;
    c.moe.router_hidden = (cfg.moe.router_hidden / 2).max(1);
    c
}

/// Which frozen components survived a later stage bit for bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    /// Backbone of the final model equals the stage-1 backbone.
    pub backbone_preserved: bool,
    /// Every expert of the final model equals its stage-2 value.
    pub experts_preserved: bool,
}

impl FreezeCheck {
    pub fn holds(&self) -> bool {
        self.backbone_preserved && self.experts_preserved
    }
}

pub fn freeze_check(stage1: &ParamSet, stage2: &ParamSet, stage3: &ParamSet) -> FreezeCheck {
    let n = stage2.n_experts();
    FreezeCheck {
        backbone_preserved: stage3.component_bit_eq(stage1, Component::Backbone)
            && stage2.component_bit_eq(stage1, Component::Backbone),
        experts_preserved: n > 0
            && stage3.n_experts() == n
            && (0..n).all(|j| stage3.component_bit_eq(stage2, Component::Expert(j))),
    }
}

/// Per-variant result record (also the layout of an ablation's report).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub evaluations: BTreeMap<String, SuiteEval>,
    pub expert_similarity: Option<f64>,
    /// `oracle - dense` mean score, when both were evaluated.
    pub oracle_gap: Option<f64>,
    pub reused_stage1: bool,
    pub freeze: Option<FreezeCheck>,
}

impl VariantResult {
    pub fn fill_gap(&mut self) {
        if let (Some(o), Some(d)) = (self.evaluations.get("oracle"), self.evaluations.get("dense")) {
            self.oracle_gap = Some(o.mean_score - d.mean_score);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::NullSink;

    fn smoke() -> Experiment {
        Experiment::generate(ExperimentConfig::smoke()).unwrap()
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["full", "desk", "smoke"] {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let text = serde_json::to_string(&c).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::smoke()).unwrap();
        v["training"]["learning_rate"] = serde_json::json!(0.1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn group_count_must_match_experts() {
        let mut c = ExperimentConfig::smoke();
        c.grouping.n_groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in ["e2e", "no_grouping", "no_expert_freeze", "oracle_eval", "topk:2", "small"] {
            assert_eq!(v.parse::<Variant>().unwrap().to_string(), v);
        }
        assert_eq!("topk(3)".parse::<Variant>().unwrap(), Variant::TopK(3));
        assert!("no_router".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_stage1_steps_keep_initialisation() {
        let mut c = ExperimentConfig::smoke();
        c.training.steps_stage1 = 0;
        let exp = Experiment::generate(c).unwrap();
        let out = exp.stage1(&mut NullSink).unwrap();
        let init = init_backbone(&exp.cfg.model, exp.seed(tag::INIT, 0)).unwrap();
        assert_eq!(out.final_step, 0);
        assert_eq!(out.selected.flatten(), init.flatten());
    }

    #[test]
    fn stages_respect_freezing() {
        let exp = smoke();
        let s1 = exp.stage1(&mut NullSink).unwrap();
        let groups = exp.group(&s1.selected, GroupingChoice::Random).unwrap().assignment;
        let s2 = exp.stage2(&s1.selected, &groups, &mut NullSink).unwrap();
        assert!(s2.params.component_bit_eq(&s1.selected, Component::Backbone));
        let s3 = exp.stage3(&s2.params, false, &mut NullSink).unwrap();
        assert!(s3.component_bit_eq(&s1.selected, Component::Backbone));
        for j in 0..exp.cfg.moe.n_experts {
            assert!(s3.component_bit_eq(&s2.params, Component::Expert(j)));
        }
        let thawed = exp.stage3(&s2.params, true, &mut NullSink).unwrap();
        assert!((0..exp.cfg.moe.n_experts).any(|j| !thawed.component_bit_eq(&s2.params, Component::Expert(j))));
    }

    #[test]
    fn oracle_evaluation_requires_groups() {
        let exp = smoke();
        let s1 = exp.stage1(&mut NullSink).unwrap();
        assert!(exp.evaluate(&s1.selected, EvalMode::Oracle, None).is_err());
        assert!(exp.evaluate(&s1.selected, EvalMode::Dense, None).is_err());
        exp.evaluate(&s1.selected, EvalMode::Backbone, None).unwrap();
    }
}
