//! Per-task gradients and the diagnostics built on them: gradient
//! similarity/conflict, agreement vectors, task grouping (random and
//! k-means), adjusted Rand index and the task-subset sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::DatasetStore;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Normalizer};
use crate::moe::Routing;
use crate::params::{Component, ParamSet};
use crate::tasks::{TaskFamily, TaskSpec};
use crate::tensor::hash_keys;
use crate::training::{batch_gradients, sample_batch, Select};

/// Mean-gradient norms at or below this make similarity undefined.
pub const NORM_TOLERANCE: f64 = 1e-12;

/// Parameter subset a gradient report is flattened over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum GradScope {
    AllBackbone,
    /// Backbone feed-forward weights only.
    FfnOnly,
    /// Every expert of every block.
    Experts,
    /// One expert across blocks.
    Expert(usize),
}

impl GradScope {
    pub fn contains(&self, name: &str, component: Component) -> bool {
        match (self, component) {
            (GradScope::AllBackbone, Component::Backbone) => true,
            (GradScope::FfnOnly, Component::Backbone) => name.contains(".ffn."),
            (GradScope::Experts, Component::Expert(_)) => true,
            (GradScope::Expert(j), Component::Expert(i)) => *j == i,
            _ => false,
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradScope::AllBackbone => f.write_str("all_backbone"),
            GradScope::FfnOnly => f.write_str("ffn_only"),
            GradScope::Experts => f.write_str("experts"),
            GradScope::Expert(i) => write!(f, "expert{i}"),
        }
    }
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_backbone" => Ok(GradScope::AllBackbone),
            "ffn_only" => Ok(GradScope::FfnOnly),
            "experts" => Ok(GradScope::Experts),
            _ => s
                .strip_prefix("expert")
                .and_then(|i| i.parse().ok())
                .map(GradScope::Expert)
                .ok_or_else(|| Error::Config(format!("unknown gradient scope `{s}`"))),
        }
    }
}

impl From<GradScope> for String {
    fn from(s: GradScope) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for GradScope {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientReport {
    pub scope: GradScope,
    pub batches_per_task: usize,
    /// Parameter names in flattening order.
    pub param_names: Vec<String>,
    pub per_task: BTreeMap<usize, Vec<f64>>,
    pub mean_gradient: Vec<f64>,
}

impl GradientReport {
    /// Build a report from explicit vectors (mean computed here).
    pub fn from_vectors(scope: GradScope, per_task: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let len = per_task.values().next().map_or(0, Vec::len);
        if per_task.values().any(|g| g.len() != len) {
            return Err(Error::shape("gradient_report", "per-task vectors differ in length"));
        }
        let mut mean = vec![0.0; len];
        for g in per_task.values() {
            for (m, &v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        let n = per_task.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(Self {
            scope,
            batches_per_task: 0,
            param_names: Vec::new(),
            per_task,
            mean_gradient: mean,
        })
    }
}

/// Settings for a per-task gradient sweep.
#[derive(Clone, Debug)]
pub struct GradientSweep {
    pub batches_per_task: usize,
    pub batch_size: usize,
    pub scope: GradScope,
    pub seed: u64,
}

/// Average of `batches_per_task` minibatch gradients of the loss on each
/// task, flattened over the scope in name order. Batch sampling depends on
/// the seed and batch index only, so tasks with identical data get identical
/// gradients. `routing_for` picks the routing used for each task. Dropout
/// is off and the parameters are only read.
pub fn per_task_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    norm: &Normalizer,
    store: &DatasetStore,
    task_ids: &[usize],
    sweep: &GradientSweep,
    routing_for: impl Fn(usize) -> Routing,
) -> Result<GradientReport> {
    if sweep.batches_per_task == 0 {
        return Err(Error::InvalidArgument("batches_per_task must be at least 1".into()));
    }
    let scope = sweep.scope;
    let names: Vec<String> = params
        .iter()
        .filter(|(n, e)| scope.contains(n, e.component))
        .map(|(n, _)| n.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no parameters in scope {scope}")));
    }
    let filter = move |n: &str, c: Component| scope.contains(n, c);
    let mut per_task = BTreeMap::new();
    for &id in task_ids {
        store.dataset(id)?;
        let routing = routing_for(id);
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for b in 0..sweep.batches_per_task {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[sweep.seed, 0x9ead, b as u64]));
            let batch = sample_batch(store, cfg, norm, &[id], sweep.batch_size, &mut rng)?;
            let (_, grads) = batch_gradients(params, cfg, &batch, &routing, Select::Filter(&filter), None)?;
            for (name, g) in grads {
                let s = sum.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
                for (a, &v) in s.iter_mut().zip(g.data()) {
                    *a += v as f64;
                }
            }
        }
        let inv = 1.0 / sweep.batches_per_task as f64;
        let mut flat = Vec::new();
        for name in &names {
            match sum.get(name) {
                Some(s) => flat.extend(s.iter().map(|v| v * inv)),
                None => flat.extend(std::iter::repeat_n(0.0, params.tensor(name)?.numel())),
            }
        }
        per_task.insert(id, flat);
    }
    let mut report = GradientReport::from_vectors(scope, per_task)?;
    report.batches_per_task = sweep.batches_per_task;
    report.param_names = names;
    Ok(report)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// Mean cosine to the mean gradient; `None` when undefined.
    pub value: Option<f64>,
    pub undefined: bool,
    /// Tasks whose zero gradient was left out of the average.
    pub excluded_tasks: Vec<usize>,
}

impl Similarity {
    pub fn conflict(&self) -> Option<f64> {
        self.value.map(|s| 1.0 - s)
    }
}

/// `(1/N) sum_i cos(g_i, mean)` over tasks with a nonzero gradient.
pub fn gradient_similarity(report: &GradientReport) -> Similarity {
    let mean_norm = norm2(&report.mean_gradient);
    if mean_norm <= NORM_TOLERANCE {
        return Similarity {
            value: None,
            undefined: true,
            excluded_tasks: Vec::new(),
        };
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut excluded = Vec::new();
    for (&id, g) in &report.per_task {
        let n = norm2(g);
        if n <= NORM_TOLERANCE {
            excluded.push(id);
            continue;
        }
        total += (dot(g, &report.mean_gradient) / (n * mean_norm)).clamp(-1.0, 1.0);
        count += 1;
    }
    if count == 0 {
        return Similarity {
            value: None,
            undefined: true,
            excluded_tasks: excluded,
        };
    }
    Similarity {
        value: Some(total / count as f64),
        undefined: false,
        excluded_tasks: excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementVector {
    pub task_id: usize,
    pub values: Vec<f64>,
}

/// `g_i * mean` elementwise, optionally scaled to unit L2 norm.
pub fn agreement_vectors(report: &GradientReport, l2_normalize: bool) -> Vec<AgreementVector> {
    report
        .per_task
        .iter()
        .map(|(&task_id, g)| {
            let mut values: Vec<f64> = g.iter().zip(&report.mean_gradient).map(|(a, b)| a * b).collect();
            if l2_normalize {
                let n = norm2(&values);
                if n > NORM_TOLERANCE {
                    values.iter_mut().for_each(|v| *v /= n);
                }
            }
            AgreementVector { task_id, values }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    Random,
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignment {
    pub method: GroupingMethod,
    pub n_groups: usize,
    pub assignment: BTreeMap<usize, usize>,
}

impl GroupAssignment {
    /// Every group index in range and every group nonempty.
    pub fn validate(&self) -> Result<()> {
        let mut sizes = vec![0usize; self.n_groups];
        for (&task, &g) in &self.assignment {
            if g >= self.n_groups {
                return Err(Error::InvalidArgument(format!(
                    "task {task} assigned to group {g} of {}",
                    self.n_groups
                )));
            }
            sizes[g] += 1;
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("group {g} is empty")));
        }
        Ok(())
    }

    /// Task ids per group, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (&task, &g) in &self.assignment {
            out[g].push(task);
        }
        out
    }

    pub fn group_of(&self, task_id: usize) -> Result<usize> {
        self.assignment
            .get(&task_id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("task {task_id} has no group")))
    }
}

/// Seeded shuffle dealt round-robin into `n_groups` groups (sizes differ by
/// at most one).
pub fn random_grouping(task_ids: &[usize], n_groups: usize, seed: u64) -> Result<GroupAssignment> {
    if n_groups == 0 || n_groups > task_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} tasks into {n_groups} groups",
            task_ids.len()
        )));
    }
    let mut order = task_ids.to_vec();
    order.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[seed, 0x6a0]));
    order.shuffle(&mut rng);
    let assignment = order.iter().enumerate().map(|(i, &t)| (t, i % n_groups)).collect();
    Ok(GroupAssignment {
        method: GroupingMethod::Random,
        n_groups,
        assignment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansOutcome {
    pub assignment: GroupAssignment,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters take the point
/// farthest from its current centroid. Cluster indices are relabelled in
/// order of each cluster's smallest task id.
pub fn kmeans_grouping(vectors: &[AgreementVector], k: usize, seed: u64, max_iters: usize) -> Result<KmeansOutcome> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means with k={k} over {n} vectors")));
    }
    let dim = vectors[0].values.len();
    if vectors.iter().any(|v| v.values.len() != dim || v.values.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidArgument("k-means vectors must be finite and equally long".into()));
    }
    let pts: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[seed, 0x4ea5]));

    let mut centroids: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = pts
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(pts[pick].to_vec());
    }

    let nearest = |p: &[f64], cs: &[Vec<f64>]| -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (j, c) in cs.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < bd {
                bd = d;
                best = j;
            }
        }
        best
    };
    let mut labels: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids)).collect();
    let mut wcss = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        repair_empty(&pts, &mut labels, &centroids, k);
        centroids = (0..k)
            .map(|j| {
                let members: Vec<&[f64]> = pts.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| *p).collect();
                let mut c = vec![0.0; dim];
                for m in &members {
                    for (a, &v) in c.iter_mut().zip(m.iter()) {
                        *a += v;
                    }
                }
                c.iter_mut().for_each(|a| *a /= members.len() as f64);
                c
            })
            .collect();
        wcss.push(pts.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum());
        let next: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(&pts, &mut labels, &centroids, k);

    let mut relabel = BTreeMap::new();
    for &l in &labels {
        let next = relabel.len();
        relabel.entry(l).or_insert(next);
    }
    let assignment = vectors
        .iter()
        .zip(&labels)
        .map(|(v, l)| (v.task_id, relabel[l]))
        .collect();
    Ok(KmeansOutcome {
        assignment: GroupAssignment {
            method: GroupingMethod::Kmeans,
            n_groups: k,
            assignment,
        },
        wcss,
        iterations,
    })
}

fn repair_empty(pts: &[&[f64]], labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..pts.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(pts[a], &centroids[labels[a]])
                    .total_cmp(&sq_dist(pts[b], &centroids[labels[b]]))
                    .then(b.cmp(&a))
            })
            .expect("k <= n guarantees a cluster with two members");
        labels[far] = empty;
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("adjusted_rand_index", format!("{} vs {} labels", a.len(), b.len())));
    }
    let pairs = |n: u64| n * n.saturating_sub(1) / 2;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c) as f64).sum();
    let sa: f64 = ra.values().map(|&c| pairs(c) as f64).sum();
    let sb: f64 = rb.values().map(|&c| pairs(c) as f64).sum();
    let total = pairs(a.len() as u64) as f64;
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Seeded rejection sampling of `n` tasks whose mean difficulty is within
/// `max_difficulty_gap` of the pool's and whose per-family counts are the
/// pool's ratio scaled to `n`, rounded down or up.
pub fn task_subset_sampler(
    pool: &[TaskSpec],
    difficulties: &BTreeMap<usize, f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    const MAX_DRAWS: usize = 10_000;
    const MAX_DIFFICULTY_GAP: f64 = 2.0;
    if n == 0 || n > pool.len() {
        return Err(Error::InvalidArgument(format!("subset of {n} from a pool of {}", pool.len())));
    }
    let diff = |id: usize| {
        difficulties
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no difficulty for task {id}")))
    };
    let mut pool_mean = 0.0;
    for t in pool {
        pool_mean += diff(t.task_id)?;
    }
    pool_mean /= pool.len() as f64;
    let counts = crate::tasks::family_counts(pool);
    let quota = |f: TaskFamily| counts.get(&f).copied().unwrap_or(0) as f64 * n as f64 / pool.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[seed, 0x5b5e7]));
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let (mut ratio_fail, mut diff_fail) = (0usize, 0usize);
    for _ in 0..MAX_DRAWS {
        idx.shuffle(&mut rng);
        let pick: Vec<&TaskSpec> = idx[..n].iter().map(|&i| &pool[i]).collect();
        let sub_counts = crate::tasks::family_counts(&pick.iter().map(|t| (*t).clone()).collect::<Vec<_>>());
        let ratio_ok = counts.keys().all(|&f| {
            let c = sub_counts.get(&f).copied().unwrap_or(0) as f64;
            let q = quota(f);
            c >= q.floor() && c <= q.ceil()
        });
        if !ratio_ok {
            ratio_fail += 1;
            continue;
        }
        let mut mean = 0.0;
        for t in &pick {
            mean += diff(t.task_id)?;
        }
        mean /= n as f64;
        if (mean - pool_mean).abs() > MAX_DIFFICULTY_GAP {
            diff_fail += 1;
            continue;
        }
        let mut ids: Vec<usize> = pick.iter().map(|t| t.task_id).collect();
        ids.sort_unstable();
        return Ok(ids);
    }
    let constraint = if diff_fail >= ratio_fail {
        format!("mean difficulty within {MAX_DIFFICULTY_GAP} of the pool mean {pool_mean:.3}")
    } else {
        "family counts matching the pool ratio".to_string()
    };
    Err(Error::Unsatisfiable {
        draws: MAX_DRAWS,
        constraint,
    })
}

/// Online detector for the peak of smoothed gradient conflict. Each sample
/// is `1 - similarity`; smoothing is a trailing mean over `window` samples.
/// Fires once the smoothed value has not exceeded its running maximum for
/// `patience` consecutive samples (after at least `min_samples` samples).
#[derive(Clone, Debug)]
pub struct PeakDetector {
    window: usize,
    patience: usize,
    min_samples: usize,
    raw: Vec<f64>,
    best: Option<(u64, f64)>,
    since_best: usize,
    fired: Option<u64>,
}

impl PeakDetector {
    pub fn new(window: usize, patience: usize, min_samples: usize) -> Self {
        Self {
            window: window.max(1),
            patience: patience.max(1),
            min_samples,
            raw: Vec::new(),
            best: None,
            since_best: 0,
            fired: None,
        }
    }

    /// Record the conflict at `step`; returns the smoothed value.
    pub fn push(&mut self, step: u64, conflict: f64) -> f64 {
        self.raw.push(conflict);
        let tail = &self.raw[self.raw.len().saturating_sub(self.window)..];
        let smooth = tail.iter().sum::<f64>() / tail.len() as f64;
        match self.best {
            Some((_, b)) if smooth <= b => self.since_best += 1,
            _ => {
                self.best = Some((step, smooth));
                self.since_best = 0;
            }
        }
        if self.fired.is_none() && self.raw.len() >= self.min_samples && self.since_best >= self.patience {
            self.fired = self.best.map(|(s, _)| s);
        }
        smooth
    }

    /// Step of the running maximum once the detector has fired.
    pub fn fired(&self) -> Option<u64> {
        self.fired
    }

    pub fn best_step(&self) -> Option<u64> {
        self.best.map(|(s, _)| s)
    }
}
