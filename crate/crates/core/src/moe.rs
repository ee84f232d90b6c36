//! Mixture-of-experts branch added beside each block's feed-forward network.
//!
//! Experts copy the FFN's shape exactly; a per-block MLP router maps the
//! token activation entering the FFN to expert weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{topk_indices, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ffn, ModelConfig};
use crate::params::{normal_tensor, Component, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Routing mode as written in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoutingMode {
    Dense,
    Topk { k: usize },
    Hard { expert: usize },
    /// Hard routing to the expert owning the task's group.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    /// Number of linear layers in the router MLP.
    pub router_layers: usize,
    pub router_hidden: usize,
    pub routing_mode: RoutingMode,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if self.router_layers < 2 || self.router_hidden == 0 {
            return Err(Error::Config("router needs at least 2 layers and a positive width".into()));
        }
        match self.routing_mode {
            RoutingMode::Topk { k } if k == 0 || k > self.n_experts => {
                Err(Error::Config(format!("top-k k={k} outside [1, {}]", self.n_experts)))
            }
            RoutingMode::Hard { expert } if expert >= self.n_experts => Err(Error::ExpertOutOfRange {
                index: expert,
                n_experts: self.n_experts,
            }),
            _ => Ok(()),
        }
    }
}

/// Routing resolved for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// Skip the MoE branch entirely.
    BackboneOnly,
    Dense,
    TopK(usize),
    Hard(usize),
    /// Fixed per-expert weights applied to every token (router bypassed).
    Fixed(Vec<f64>),
}

pub fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("block{layer}.expert{expert}")
}

fn router_name(layer: usize, j: usize, part: &str) -> String {
    format!("block{layer}.router.l{j}.{part}")
}

/// Softmax over the `k` largest logits (ties to the lower index); every
/// other weight is exactly zero.
pub fn topk_route(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!("top-k with k={k} over {} logits", logits.len())));
    }
    let idx = topk_indices(logits, k);
    let max = idx.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut w = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in &idx {
        w[i] = (logits[i] - max).exp();
        total += w[i];
    }
    for &i in &idx {
        w[i] /= total;
    }
    Ok(w)
}

/// Router logits `[tokens, n_experts]` for block `layer`.
pub fn router_logits<T: Scalar>(g: &mut Graph<'_, T>, h: Var, layer: usize) -> Result<Var> {
    let mut x = h;
    let mut j = 0;
    loop {
        let w = router_name(layer, j, "w");
        if !g.params().contains(&w) {
            break;
        }
        if j > 0 {
            x = g.relu(x);
        }
        let wv = g.param(&w)?;
        let bv = g.param(&router_name(layer, j, "b"))?;
        let y = g.matmul(x, wv)?;
        x = g.add_row(y, bv)?;
        j += 1;
    }
    if j == 0 {
        return Err(Error::UnknownParam(router_name(layer, 0, "w")));
    }
    Ok(x)
}

fn n_experts_in<T: Scalar>(params: &ParamSet<T>, layer: usize) -> usize {
    (0..)
        .take_while(|&i| params.contains(&format!("{}.w1", expert_prefix(layer, i))))
        .count()
}

fn weighted_sum<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    h: Var,
    layer: usize,
    weights: Var,
    n: usize,
) -> Result<Var> {
    let (_, w_cols) = g.dims(weights);
    let wv = g.value(weights).to_vec();
    let mut acc: Option<Var> = None;
    for i in 0..n {
        if wv.iter().skip(i).step_by(w_cols).all(|&w| w == T::zero()) {
            continue;
        }
        let e = ffn(g, h, &expert_prefix(layer, i), cfg.activation)?;
        let term = g.mul_col(e, weights, i)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let (r, c) = g.dims(h);
            g.constant(r, c, vec![T::zero(); r * c])
        }
    }
}

/// `sum_i softmax(router(h))_i * expert_i(h)` (or the variant selected by
/// `routing`). Returns `None` when the branch is absent.
pub fn moe_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    h: Var,
    layer: usize,
    routing: &Routing,
) -> Result<Option<Var>> {
    if *routing == Routing::BackboneOnly {
        return Ok(None);
    }
    let n = n_experts_in(g.params(), layer);
    if n == 0 {
        return Ok(None);
    }
    let out = match routing {
        Routing::BackboneOnly => unreachable!(),
        Routing::Hard(j) => {
            if *j >= n {
                return Err(Error::ExpertOutOfRange { index: *j, n_experts: n });
            }
            ffn(g, h, &expert_prefix(layer, *j), cfg.activation)?
        }
        Routing::Dense => {
            let logits = router_logits(g, h, layer)?;
            let w = g.softmax(logits, None)?;
            weighted_sum(g, cfg, h, layer, w, n)?
        }
        Routing::TopK(k) => {
            if *k == 0 || *k > n {
                return Err(Error::InvalidArgument(format!("top-k with k={k} over {n} experts")));
            }
            let logits = router_logits(g, h, layer)?;
            let w = g.topk_softmax(logits, *k)?;
            weighted_sum(g, cfg, h, layer, w, n)?
        }
        Routing::Fixed(weights) => {
            if weights.len() != n {
                return Err(Error::shape("moe_forward", format!("{} fixed weights for {n} experts", weights.len())));
            }
            let (rows, _) = g.dims(h);
            let data = (0..rows).flat_map(|_| weights.iter().map(|&w| T::of(w))).collect();
            let w = g.constant(rows, n, data)?;
            weighted_sum(g, cfg, h, layer, w, n)?
        }
    };
    Ok(Some(out))
}

/// Experts whose input map copies the block's FFN and whose output map is
/// zero, so the augmented model computes exactly what the backbone does.
pub fn init_experts_function_preserving(backbone: &ParamSet, cfg: &ModelConfig, n_experts: usize) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for l in 0..cfg.n_layers {
        let w1 = backbone.tensor(&format!("block{l}.ffn.w1"))?;
        let b1 = backbone.tensor(&format!("block{l}.ffn.b1"))?;
        let w2 = backbone.tensor(&format!("block{l}.ffn.w2"))?;
        let b2 = backbone.tensor(&format!("block{l}.ffn.b2"))?;
        if w1.shape() != [cfg.hidden_dim, cfg.ffn_dim()] || w2.shape() != [cfg.ffn_dim(), cfg.hidden_dim] {
            return Err(Error::shape(
                "init_experts_function_preserving",
                format!("block {l} ffn shapes {:?} / {:?} do not match config", w1.shape(), w2.shape()),
            ));
        }
        for i in 0..n_experts {
            let p = expert_prefix(l, i);
            let c = Component::Expert(i);
            out.insert(format!("{p}.w1"), w1.clone(), c);
            out.insert(format!("{p}.b1"), b1.clone(), c);
            out.insert(format!("{p}.w2"), Tensor::zeros(w2.shape()), c);
            out.insert(format!("{p}.b2"), Tensor::zeros(b2.shape()), c);
        }
    }
    Ok(out)
}

/// Experts drawn from scratch (scaled-normal weights, zero biases).
pub fn init_experts_random(cfg: &ModelConfig, n_experts: usize, seed: u64) -> ParamSet {
    let mut out = ParamSet::new();
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim());
    for l in 0..cfg.n_layers {
        for i in 0..n_experts {
            let p = expert_prefix(l, i);
            let c = Component::Expert(i);
            let name = format!("{p}.w1");
            out.insert(&name, normal_tensor(&[d, f], 0.02, seed, &name), c);
            let name = format!("{p}.w2");
            out.insert(&name, normal_tensor(&[f, d], 0.02, seed, &name), c);
            out.insert(format!("{p}.b1"), Tensor::zeros(&[f]), c);
            out.insert(format!("{p}.b2"), Tensor::zeros(&[d]), c);
        }
    }
    out
}

/// Router MLP `hidden -> router_hidden (x router_layers - 2) -> n_experts`
/// for every block.
pub fn init_router(cfg: &ModelConfig, moe: &MoeConfig, seed: u64) -> Result<ParamSet> {
    moe.validate()?;
    let mut out = ParamSet::new();
    for l in 0..cfg.n_layers {
        for j in 0..moe.router_layers {
            let fan_in = if j == 0 { cfg.hidden_dim } else { moe.router_hidden };
            let fan_out = if j + 1 == moe.router_layers { moe.n_experts } else { moe.router_hidden };
            let name = router_name(l, j, "w");
            let std = (2.0 / fan_in as f64).sqrt();
            out.insert(&name, normal_tensor(&[fan_in, fan_out], std, seed, &name), Component::Router);
            out.insert(router_name(l, j, "b"), Tensor::zeros(&[fan_out]), Component::Router);
        }
    }
    Ok(out)
}

/// Add function-preserving experts and a fresh router to a backbone.
pub fn attach_moe(params: &mut ParamSet, cfg: &ModelConfig, moe: &MoeConfig, seed: u64) -> Result<()> {
    let experts = init_experts_function_preserving(params, cfg, moe.n_experts)?;
    let router = init_router(cfg, moe, seed)?;
    params.merge(experts);
    params.merge(router);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::GradSelect;
    use crate::model::Activation;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            hidden_dim: 4,
            context_k: 2,
            prompt_kstar: 1,
            max_state_dim: 4,
            max_action_dim: 2,
            dropout: 0.0,
            max_episode_len: 8,
            activation: Activation::Gelu,
        }
    }

    fn moe_cfg(n: usize) -> MoeConfig {
        MoeConfig {
            n_experts: n,
            router_layers: 3,
            router_hidden: 4,
            routing_mode: RoutingMode::Dense,
        }
    }

    fn random_experts(n: usize, seed: u64) -> ParamSet {
        let c = cfg();
        let mut p = init_experts_random(&c, n, seed);
        p.merge(init_router(&c, &moe_cfg(n), seed).unwrap());
        p
    }

    fn run(params: &ParamSet, routing: &Routing, x: &[f32]) -> Vec<f32> {
        let c = cfg();
        let mut g = Graph::new(params, GradSelect::All);
        let h = g.constant(x.len() / 4, 4, x.to_vec()).unwrap();
        let y = moe_forward(&mut g, &c, h, 0, routing).unwrap().unwrap();
        g.value(y).to_vec()
    }

    fn expert_alone(params: &ParamSet, i: usize, x: &[f32]) -> Vec<f32> {
        run(params, &Routing::Hard(i), x)
    }

    const X: [f32; 8] = [0.3, -1.2, 0.8, 0.1, 1.5, 0.2, -0.4, 0.9];

    #[test]
    fn single_expert_dense_equals_expert() {
        let p = random_experts(1, 2);
        assert_eq!(run(&p, &Routing::Dense, &X), expert_alone(&p, 0, &X));
    }

    #[test]
    fn identical_experts_ignore_router() {
        let mut p = random_experts(3, 2);
        for name in p.names().cloned().collect::<Vec<_>>() {
            if let Some(rest) = name.strip_prefix("block0.expert1.").or(name.strip_prefix("block0.expert2.")) {
                let src = p.tensor(&format!("block0.expert0.{rest}")).unwrap().clone();
                p.get_mut(&name).unwrap().tensor = src;
            }
        }
        let dense = run(&p, &Routing::Dense, &X);
        let e0 = expert_alone(&p, 0, &X);
        for (a, b) in dense.iter().zip(&e0) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_weights_mix_expert_outputs() {
        // Experts with zero input map and constant output bias: outputs are
        // exactly their bias vectors.
        let mut p = random_experts(2, 1);
        for (name, e) in p.iter_mut() {
            if name.ends_with(".w2") || name.ends_with(".w1") {
                e.tensor = Tensor::zeros(e.tensor.shape());
            }
        }
        p.get_mut("block0.expert0.b2").unwrap().tensor = Tensor::filled(&[4], 1.0);
        p.get_mut("block0.expert1.b2").unwrap().tensor = Tensor::filled(&[4], 3.0);
        let y = run(&p, &Routing::Fixed(vec![0.25, 0.75]), &X);
        assert!(y.iter().all(|&v| v == 2.5), "{y:?}");
    }

    #[test]
    fn topk_route_examples() {
        let w = topk_route(&[3.0, 1.0, 2.0], 2).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert_eq!(topk_route(&[0.1, 0.7, 0.3], 1).unwrap(), vec![0.0, 1.0, 0.0]);
        let logits = [0.4, -1.0, 2.0, 0.0];
        let full = topk_route(&logits, 4).unwrap();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (w, l) in full.iter().zip(&logits) {
            assert!((w - (l - m).exp() / z).abs() < 1e-12);
        }
        assert!(topk_route(&logits, 0).is_err());
        assert!(topk_route(&logits, 5).is_err());
    }

    #[test]
    fn hard_index_out_of_range() {
        let c = cfg();
        let p = random_experts(2, 1);
        let mut g = Graph::new(&p, GradSelect::All);
        let h = g.constant(2, 4, X.to_vec()).unwrap();
        assert!(matches!(
            moe_forward(&mut g, &c, h, 0, &Routing::Hard(2)),
            Err(Error::ExpertOutOfRange { index: 2, n_experts: 2 })
        ));
    }

    #[test]
    fn function_preserving_experts_output_zero() {
        let c = cfg();
        let backbone = crate::model::init_backbone(&c, 3).unwrap();
        let experts = init_experts_function_preserving(&backbone, &c, 4).unwrap();
        let mut p = experts;
        p.merge(init_router(&c, &moe_cfg(4), 3).unwrap());
        assert!(run(&p, &Routing::Dense, &X).iter().all(|&v| v == 0.0));
        let bad = ModelConfig { hidden_dim: 8, ..c };
        assert!(init_experts_function_preserving(&backbone, &bad, 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MoeConfig { n_experts: 0, ..moe_cfg(1) }.validate().is_err());
        assert!(MoeConfig { routing_mode: RoutingMode::Topk { k: 3 }, ..moe_cfg(2) }.validate().is_err());
        assert!(MoeConfig { routing_mode: RoutingMode::Hard { expert: 2 }, ..moe_cfg(2) }.validate().is_err());
        assert!(moe_cfg(2).validate().is_ok());
    }
}
