//! File-based workflow. Every command reads its inputs from, and writes its
//! outputs to, one run directory:
//!
//! ```text
//! manifest.json  datasets/task_<id>.jsonl  config.json
//! checkpoints/stage1.ckpt  stage1_final.ckpt  stage2.ckpt  stage3.ckpt
//! groups.json  metrics.csv  report.json  ablations/<variant>/...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::conflict::GroupAssignment;
use crate::datastore::{DatasetStore, Manifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{EvalMode, SuiteEval};
use crate::metrics::{truncate_from, MetricsRow, MetricsSink, MetricsWriter, Stage};
use crate::moe::RoutingMode;
use crate::params::ParamSet;
use crate::pipeline::{
    freeze_check, generate_store, small_config, Experiment, ExperimentConfig, FreezeCheck, GroupingChoice,
    Stage1Summary, Variant, VariantResult,
};
use crate::tasks::SuiteKind;

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn groups(&self) -> PathBuf {
        self.root.join("groups.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    /// `checkpoints/<name>.ckpt`, e.g. `stage2`.
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn ablation(&self, variant: Variant) -> RunDir {
        let name = variant.to_string().replace(':', "_");
        RunDir::new(self.root.join("ablations").join(name))
    }
}

/// Contents of `groups.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsFile {
    pub config_hash: String,
    pub method: GroupingChoice,
    pub assignment: GroupAssignment,
    /// Task ids per group, ascending.
    pub members: Vec<Vec<usize>>,
    /// Backbone gradient similarity over all tasks (gradient method only).
    pub backbone_similarity: Option<f64>,
    /// Final within-cluster sum of squares (gradient method only).
    pub wcss: Option<f64>,
}

/// Contents of `report.json`, filled in as commands run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub suite: SuiteKind,
    pub task_ids: Vec<usize>,
    pub stage1: Option<Stage1Summary>,
    pub grouping: Option<GroupsFile>,
    pub expert_similarity: Option<f64>,
    pub freeze: Option<FreezeCheck>,
    pub evaluations: BTreeMap<String, SuiteEval>,
    /// `oracle - dense` mean score.
    pub oracle_gap: Option<f64>,
    pub ablations: BTreeMap<String, VariantResult>,
}

impl Report {
    fn new(exp: &Experiment) -> Self {
        Self {
            config_hash: exp.config_hash.clone(),
            seed: exp.cfg.seed,
            suite: exp.cfg.suite.kind,
            task_ids: exp.task_ids.clone(),
            stage1: None,
            grouping: None,
            expert_similarity: None,
            freeze: None,
            evaluations: BTreeMap::new(),
            oracle_gap: None,
            ablations: BTreeMap::new(),
        }
    }

    fn fill_gap(&mut self) {
        if let (Some(o), Some(d)) = (self.evaluations.get("oracle"), self.evaluations.get("dense")) {
            self.oracle_gap = Some(o.mean_score - d.mean_score);
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{} (run `{hint}` first)", path.display())))
    }
}

/// Generate the offline datasets and write them with the manifest and the
/// resolved configuration.
pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<Manifest> {
    let store = generate_store(cfg)?;
    let manifest = store.write(&run.root)?;
    write_json(&run.config(), cfg)?;
    Ok(manifest)
}

/// The experiment over the datasets stored in `run`.
pub fn load_experiment(cfg: &ExperimentConfig, run: &RunDir) -> Result<Experiment> {
    require(&run.manifest(), "gen-data")?;
    let (store, _) = DatasetStore::load(&run.root)?;
    Experiment::new(cfg.clone(), store)
}

fn load_report(run: &RunDir, exp: &Experiment) -> Result<Report> {
    if run.report().exists() {
        let r: Report = read_json(&run.report())?;
        if r.config_hash == exp.config_hash {
            return Ok(r);
        }
    }
    Ok(Report::new(exp))
}

/// Load a checkpoint, insisting it came from the same configuration.
fn load_params(path: &Path, config_hash: &str, hint: &str) -> Result<ParamSet> {
    require(path, hint)?;
    let (params, meta) = load_checkpoint(path)?;
    if meta.config_hash != config_hash {
        return Err(Error::Config(format!(
            "{} was produced by a different configuration",
            path.display()
        )));
    }
    Ok(params)
}

fn load_groups(path: &Path, config_hash: &str) -> Result<GroupsFile> {
    require(path, "group-tasks")?;
    let g: GroupsFile = read_json(path)?;
    if g.config_hash != config_hash {
        return Err(Error::Config(format!(
            "{} was produced by a different configuration",
            path.display()
        )));
    }
    Ok(g)
}

pub fn train_backbone(cfg: &ExperimentConfig, run: &RunDir) -> Result<Stage1Summary> {
    let exp = load_experiment(cfg, run)?;
    truncate_from(&run.metrics(), Stage::Backbone)?;
    let mut sink = MetricsWriter::open(&run.metrics())?;
    let out = exp.stage1(&mut sink)?;
    save_checkpoint(&out.selected, &exp.meta(1, out.selected_step, false), &run.checkpoint("stage1"))?;
    save_checkpoint(&out.final_params, &exp.meta(1, out.final_step, false), &run.checkpoint("stage1_final"))?;
    let mut report = load_report(run, &exp)?;
    report.stage1 = Some(out.summary());
    write_json(&run.report(), &report)?;
    Ok(out.summary())
}

fn compute_groups(exp: &Experiment, backbone: &ParamSet, method: GroupingChoice) -> Result<GroupsFile> {
    let g = exp.group(backbone, method)?;
    Ok(GroupsFile {
        config_hash: exp.config_hash.clone(),
        method,
        members: g.assignment.groups(),
        assignment: g.assignment,
        backbone_similarity: g.similarity.and_then(|s| s.value),
        wcss: g.kmeans.and_then(|k| k.wcss.last().copied()),
    })
}

pub fn group_tasks(cfg: &ExperimentConfig, run: &RunDir, method: GroupingChoice) -> Result<GroupsFile> {
    let exp = load_experiment(cfg, run)?;
    let backbone = load_params(&run.checkpoint("stage1"), &exp.config_hash, "train-backbone")?;
    let groups = compute_groups(&exp, &backbone, method)?;
    write_json(&run.groups(), &groups)?;
    let mut report = load_report(run, &exp)?;
    report.grouping = Some(groups.clone());
    write_json(&run.report(), &report)?;
    Ok(groups)
}

pub fn train_experts(cfg: &ExperimentConfig, run: &RunDir) -> Result<Option<f64>> {
    let exp = load_experiment(cfg, run)?;
    let backbone = load_params(&run.checkpoint("stage1"), &exp.config_hash, "train-backbone")?;
    let groups = load_groups(&run.groups(), &exp.config_hash)?;
    truncate_from(&run.metrics(), Stage::Experts)?;
    let mut sink = MetricsWriter::open(&run.metrics())?;
    let out = exp.stage2(&backbone, &groups.assignment, &mut sink)?;
    save_checkpoint(&out.params, &exp.meta(2, cfg.training.steps_stage2, true), &run.checkpoint("stage2"))?;
    let mut report = load_report(run, &exp)?;
    report.expert_similarity = out.expert_similarity;
    write_json(&run.report(), &report)?;
    Ok(out.expert_similarity)
}

pub fn train_router(cfg: &ExperimentConfig, run: &RunDir) -> Result<FreezeCheck> {
    let exp = load_experiment(cfg, run)?;
    let backbone = load_params(&run.checkpoint("stage1"), &exp.config_hash, "train-backbone")?;
    let experts = load_params(&run.checkpoint("stage2"), &exp.config_hash, "train-experts")?;
    truncate_from(&run.metrics(), Stage::Router)?;
    let mut sink = MetricsWriter::open(&run.metrics())?;
    let params = exp.stage3(&experts, false, &mut sink)?;
    save_checkpoint(&params, &exp.meta(3, cfg.training.steps_stage3, true), &run.checkpoint("stage3"))?;
    let check = freeze_check(&backbone, &experts, &params);
    let mut report = load_report(run, &exp)?;
    report.freeze = Some(check.clone());
    write_json(&run.report(), &report)?;
    Ok(check)
}

/// Re-load the three stage checkpoints of `run` and compare the frozen
/// components.
pub fn verify_freeze(run: &RunDir, config_hash: &str) -> Result<FreezeCheck> {
    let s1 = load_params(&run.checkpoint("stage1"), config_hash, "train-backbone")?;
    let s2 = load_params(&run.checkpoint("stage2"), config_hash, "train-experts")?;
    let s3 = load_params(&run.checkpoint("stage3"), config_hash, "train-router")?;
    Ok(freeze_check(&s1, &s2, &s3))
}

fn eval_and_log(
    exp: &Experiment,
    params: &ParamSet,
    mode: EvalMode,
    groups: Option<&GroupAssignment>,
    sink: &mut MetricsWriter,
) -> Result<SuiteEval> {
    let result = exp.evaluate(params, mode, groups)?;
    let step = sink.next_step(Stage::Eval);
    sink.emit(MetricsRow {
        mean_normalized_score: Some(result.mean_score),
        ..MetricsRow::new(Stage::Eval, step, exp.cfg.seed)
    })?;
    Ok(result)
}

pub fn evaluate(cfg: &ExperimentConfig, run: &RunDir, mode: EvalMode) -> Result<SuiteEval> {
    let exp = load_experiment(cfg, run)?;
    let (params, groups) = match mode {
        EvalMode::Backbone => (load_params(&run.checkpoint("stage1"), &exp.config_hash, "train-backbone")?, None),
        EvalMode::Oracle => (
            load_params(&run.checkpoint("stage2"), &exp.config_hash, "train-experts")?,
            Some(load_groups(&run.groups(), &exp.config_hash)?),
        ),
        EvalMode::Dense | EvalMode::TopK(_) => {
            (load_params(&run.checkpoint("stage3"), &exp.config_hash, "train-router")?, None)
        }
    };
    let mut sink = MetricsWriter::open(&run.metrics())?;
    let result = eval_and_log(&exp, &params, mode, groups.as_ref().map(|g| &g.assignment), &mut sink)?;
    let mut report = load_report(run, &exp)?;
    report.evaluations.insert(mode.to_string(), result.clone());
    report.fill_gap();
    write_json(&run.report(), &report)?;
    Ok(result)
}

/// Stage-1 backbone for an ablation: the main run's checkpoint when it was
/// produced by the same configuration, otherwise trained afresh.
fn ablation_backbone(
    exp: &Experiment,
    main_hash: &str,
    run: &RunDir,
    dir: &RunDir,
    sink: &mut MetricsWriter,
) -> Result<(ParamSet, bool)> {
    let path = run.checkpoint("stage1");
    if path.exists() && load_checkpoint(&path)?.1.config_hash == main_hash {
        return Ok((load_checkpoint(&path)?.0, true));
    }
    let out = exp.stage1(sink)?;
    save_checkpoint(&out.selected, &exp.meta(1, out.selected_step, false), &dir.checkpoint("stage1"))?;
    Ok((out.selected, false))
}

fn ablation_groups(exp: &Experiment, main_hash: &str, run: &RunDir, backbone: &ParamSet) -> Result<GroupAssignment> {
    match load_groups(&run.groups(), main_hash) {
        Ok(g) => Ok(g.assignment),
        Err(_) => Ok(compute_groups(exp, backbone, exp.cfg.grouping.method)?.assignment),
    }
}

fn ablation_experts(
    exp: &Experiment,
    main_hash: &str,
    run: &RunDir,
    dir: &RunDir,
    backbone: &ParamSet,
    groups: &GroupAssignment,
    reused_backbone: bool,
    sink: &mut MetricsWriter,
) -> Result<ParamSet> {
    if reused_backbone {
        if let Ok(p) = load_params(&run.checkpoint("stage2"), main_hash, "train-experts") {
            return Ok(p);
        }
    }
    let out = exp.stage2(backbone, groups, sink)?;
    save_checkpoint(&out.params, &exp.meta(2, exp.cfg.training.steps_stage2, true), &dir.checkpoint("stage2"))?;
    Ok(out.params)
}

/// Run one ablation variant under `ablations/<variant>/`, reusing the main
/// run's artifacts where the variant leaves them unchanged.
pub fn ablate(cfg: &ExperimentConfig, run: &RunDir, variant: Variant) -> Result<VariantResult> {
    let main = load_experiment(cfg, run)?;
    let main_hash = main.config_hash.clone();
    let dir = run.ablation(variant);
    let metrics = dir.metrics();
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let mut vcfg = cfg.clone();
    match variant {
        Variant::Small => vcfg = small_config(cfg),
        Variant::TopK(k) => vcfg.moe.routing_mode = RoutingMode::Topk { k },
        _ => {}
    }
    vcfg.validate()?;
    write_json(&dir.config(), &vcfg)?;
    let exp = Experiment::new(vcfg, main.store)?;
    let mut sink = MetricsWriter::open(&metrics)?;
    let mut result = VariantResult::default();
    let stage3 = |exp: &Experiment, p: &ParamSet| {
        save_checkpoint(p, &exp.meta(3, exp.cfg.training.steps_stage3, true), &dir.checkpoint("stage3"))
    };
    match variant {
        Variant::E2e => {
            let p = exp.e2e(&mut sink)?;
            stage3(&exp, &p)?;
            result.evaluations.insert("dense".into(), eval_and_log(&exp, &p, EvalMode::Dense, None, &mut sink)?);
        }
        Variant::NoGrouping => {
            let (b, reused) = ablation_backbone(&exp, &main_hash, run, &dir, &mut sink)?;
            result.reused_stage1 = reused;
            let out = exp.no_grouping(&b, &mut sink)?;
            stage3(&exp, &out.params)?;
            result.expert_similarity = out.expert_similarity;
            let e = eval_and_log(&exp, &out.params, EvalMode::Dense, None, &mut sink)?;
            result.evaluations.insert("dense".into(), e);
        }
        Variant::NoExpertFreeze | Variant::TopK(_) => {
            let (b, reused) = ablation_backbone(&exp, &main_hash, run, &dir, &mut sink)?;
            result.reused_stage1 = reused;
            let groups = ablation_groups(&exp, &main_hash, run, &b)?;
            let s2 = ablation_experts(&exp, &main_hash, run, &dir, &b, &groups, reused, &mut sink)?;
            let thaw = variant == Variant::NoExpertFreeze;
            let s3 = exp.stage3(&s2, thaw, &mut sink)?;
            stage3(&exp, &s3)?;
            result.freeze = Some(freeze_check(&b, &s2, &s3));
            let mode = match variant {
                Variant::TopK(k) => EvalMode::TopK(k),
                _ => EvalMode::Dense,
            };
            result.evaluations.insert(mode.to_string(), eval_and_log(&exp, &s3, mode, None, &mut sink)?);
        }
        Variant::OracleEval => {
            let s3 = load_params(&run.checkpoint("stage3"), &main_hash, "train-router")?;
            let groups = load_groups(&run.groups(), &main_hash)?;
            result.reused_stage1 = true;
            for mode in [EvalMode::Dense, EvalMode::Oracle] {
                let e = eval_and_log(&exp, &s3, mode, Some(&groups.assignment), &mut sink)?;
                result.evaluations.insert(mode.to_string(), e);
            }
        }
        Variant::Small => {
            let s1 = exp.stage1(&mut sink)?;
            save_checkpoint(&s1.selected, &exp.meta(1, s1.selected_step, false), &dir.checkpoint("stage1"))?;
            let groups = compute_groups(&exp, &s1.selected, exp.cfg.grouping.method)?;
            write_json(&dir.groups(), &groups)?;
            let s2 = exp.stage2(&s1.selected, &groups.assignment, &mut sink)?;
            save_checkpoint(&s2.params, &exp.meta(2, exp.cfg.training.steps_stage2, true), &dir.checkpoint("stage2"))?;
            let s3 = exp.stage3(&s2.params, false, &mut sink)?;
            stage3(&exp, &s3)?;
            result.expert_similarity = s2.expert_similarity;
            result.freeze = Some(freeze_check(&s1.selected, &s2.params, &s3));
            for mode in [EvalMode::Dense, EvalMode::Oracle] {
                let e = eval_and_log(&exp, &s3, mode, Some(&groups.assignment), &mut sink)?;
                result.evaluations.insert(mode.to_string(), e);
            }
        }
    }
    result.fill_gap();
    write_json(&dir.report(), &result)?;
    Ok(result)
}

/// Collect ablation results into `report.json` and return the report.
pub fn report(cfg: &ExperimentConfig, run: &RunDir) -> Result<Report> {
    let exp = load_experiment(cfg, run)?;
    let mut report = load_report(run, &exp)?;
    report.ablations.clear();
    let dir = run.root.join("ablations");
    if dir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for path in entries {
            let file = path.join("report.json");
            if file.exists() {
                let dir_name = path.file_name().expect("entry has a name").to_string_lossy().into_owned();
                let name = match dir_name.strip_prefix("topk_") {
                    Some(k) => format!("topk:{k}"),
                    None => dir_name,
                };
                report.ablations.insert(name, read_json(&file)?);
            }
        }
    }
    report.fill_gap();
    write_json(&run.report(), &report)?;
    Ok(report)
}

/// Every stage in order: data, backbone, grouping, experts, router, then
/// backbone / dense / oracle evaluation and the report.
pub fn run_pipeline(cfg: &ExperimentConfig, run: &RunDir) -> Result<Report> {
    gen_data(cfg, run)?;
    train_backbone(cfg, run)?;
    group_tasks(cfg, run, cfg.grouping.method)?;
    train_experts(cfg, run)?;
    train_router(cfg, run)?;
    for mode in [EvalMode::Backbone, EvalMode::Dense, EvalMode::Oracle] {
        evaluate(cfg, run, mode)?;
    }
    report(cfg, run)
}
