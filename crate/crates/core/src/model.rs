//! Prompt decision transformer: interleaved (return-to-go, state, action)
//! tokens, a pre-norm causal transformer and a tanh action head read from
//! each state token.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::moe::{self, Routing};
use crate::params::{normal_tensor, Component, ParamSet};
use crate::tasks::Trajectory;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    /// Segment length K in steps.
    pub context_k: usize,
    /// Prompt length K* in steps.
    pub prompt_kstar: usize,
    pub max_state_dim: usize,
    pub max_action_dim: usize,
    pub dropout: f64,
    pub max_episode_len: usize,
    pub activation: Activation,
}

impl ModelConfig {
    /// Hyper-parameters of the full-size reference model.
    pub fn full() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            hidden_dim: 256,
            context_k: 20,
            prompt_kstar: 5,
            max_state_dim: crate::tasks::MAX_STATE_DIM,
            max_action_dim: crate::tasks::MAX_ACTION_DIM,
            dropout: 0.1,
            max_episode_len: 64,
            activation: Activation::Relu,
        }
    }

    pub fn desk() -> Self {
        Self {
            n_layers: 3,
            n_heads: 4,
            hidden_dim: 64,
            context_k: 20,
            prompt_kstar: 5,
            ..Self::full()
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn n_steps(&self) -> usize {
        self.prompt_kstar + self.context_k
    }

    pub fn n_tokens(&self) -> usize {
        3 * self.n_steps()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.context_k == 0 {
            return bad("context_k must be at least 1".into());
        }
        if self.n_layers == 0 || self.max_state_dim == 0 || self.max_action_dim == 0 || self.max_episode_len == 0 {
            return bad("layer count, dims and episode length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Fixed input scaling fitted on the training data and stored with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
    pub rtg_scale: f32,
}

impl Normalizer {
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            rtg_scale: 1.0,
        }
    }

    /// Per-dimension mean/std of padded states and the largest absolute
    /// return, accumulated in index order.
    pub fn fit<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>, max_state_dim: usize) -> Self {
        let mut sum = vec![0.0f64; max_state_dim];
        let mut sq = vec![0.0f64; max_state_dim];
        let mut count = 0usize;
        let mut max_ret = 0.0f64;
        for tr in trajs {
            for t in 0..tr.len() {
                for (d, &v) in tr.state(t).iter().enumerate() {
                    sum[d] += v as f64;
                    sq[d] += (v as f64) * (v as f64);
                }
                count += 1;
            }
            max_ret = tr.rtg.iter().fold(max_ret, |m, &r| m.max((r as f64).abs()));
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        Self {
            state_mean: mean.iter().map(|&m| m as f32).collect(),
            state_std: sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-3)) as f32)
                .collect(),
            rtg_scale: max_ret.max(1.0) as f32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Rtg,
    State,
    Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Prompt,
    Segment,
}

/// Model input before embedding: `n_prompt + n_segment` steps, each of
/// which becomes three tokens `(rtg, state, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub n_prompt: usize,
    pub n_segment: usize,
    pub max_state_dim: usize,
    pub max_action_dim: usize,
    pub rtg: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
    /// False for left padding.
    pub valid: Vec<bool>,
    /// Raw (unnormalised, zero-padded) actions of the segment steps.
    pub target_actions: Vec<f32>,
    pub action_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn n_steps(&self) -> usize {
        self.n_prompt + self.n_segment
    }

    pub fn n_tokens(&self) -> usize {
        3 * self.n_steps()
    }

    pub fn token_kinds(&self) -> Vec<(TokenKind, TokenSource)> {
        (0..self.n_steps())
            .flat_map(|i| {
                let src = if i < self.n_prompt { TokenSource::Prompt } else { TokenSource::Segment };
                [TokenKind::Rtg, TokenKind::State, TokenKind::Action].map(|k| (k, src))
            })
            .collect()
    }

    pub fn token_timesteps(&self) -> Vec<usize> {
        self.timesteps.iter().flat_map(|&t| [t, t, t]).collect()
    }

    /// `mask[i * L + j]`: token `i` may attend to token `j`.
    pub fn causal_mask(&self) -> Vec<bool> {
        let l = self.n_tokens();
        let mut mask = vec![false; l * l];
        for i in 0..l {
            for j in 0..=i {
                mask[i * l + j] = self.valid[j / 3];
            }
        }
        mask
    }

    /// Loss mask over `[n_segment, max_action_dim]`: valid steps and valid dims.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_segment * self.max_action_dim);
        for s in 0..self.n_segment {
            let ok = self.valid[self.n_prompt + s];
            m.extend(self.action_mask.iter().map(|&d| d && ok));
        }
        m
    }
}

/// Assemble a prompt window and a segment window into one input. The segment
/// is left-padded to `context_k` steps (padding flagged invalid); the prompt
/// is left-padded to `prompt_kstar` steps the same way.
pub fn build_input(
    cfg: &ModelConfig,
    norm: &Normalizer,
    prompt: &Trajectory,
    segment: &Trajectory,
) -> Result<TokenSequence> {
    for tr in [prompt, segment] {
        if tr.state_dim > cfg.max_state_dim || tr.action_dim > cfg.max_action_dim {
            return Err(Error::InvalidArgument(format!(
                "dims ({}, {}) exceed model maxima ({}, {})",
                tr.state_dim, tr.action_dim, cfg.max_state_dim, cfg.max_action_dim
            )));
        }
        if let Some(&t) = tr.timesteps.iter().find(|&&t| t >= cfg.max_episode_len) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside embedding table of {}",
                cfg.max_episode_len
            )));
        }
    }
    if prompt.len() > cfg.prompt_kstar || segment.len() > cfg.context_k {
        return Err(Error::InvalidArgument(format!(
            "prompt {} / segment {} steps exceed K* = {} / K = {}",
            prompt.len(),
            segment.len(),
            cfg.prompt_kstar,
            cfg.context_k
        )));
    }
    if segment.is_empty() {
        return Err(Error::InvalidArgument("segment must contain at least one step".into()));
    }
    let (sd, ad) = (cfg.max_state_dim, cfg.max_action_dim);
    let n = cfg.n_steps();
    let mut seq = TokenSequence {
        n_prompt: cfg.prompt_kstar,
        n_segment: cfg.context_k,
        max_state_dim: sd,
        max_action_dim: ad,
        rtg: vec![0.0; n],
        states: vec![0.0; n * sd],
        actions: vec![0.0; n * ad],
        timesteps: vec![0; n],
        valid: vec![false; n],
        target_actions: vec![0.0; cfg.context_k * ad],
        action_mask: (0..ad).map(|d| d < segment.action_dim).collect(),
    };
    let mut fill = |tr: &Trajectory, first: usize, target: bool| {
        for t in 0..tr.len() {
            let i = first + t;
            seq.valid[i] = true;
            seq.rtg[i] = tr.rtg[t] / norm.rtg_scale;
            seq.timesteps[i] = tr.timesteps[t];
            for (d, &v) in tr.state(t).iter().enumerate() {
                seq.states[i * sd + d] = (v - norm.state_mean[d]) / norm.state_std[d];
            }
            for (d, &v) in tr.action(t).iter().enumerate() {
                seq.actions[i * ad + d] = v;
                if target {
                    seq.target_actions[(i - cfg.prompt_kstar) * ad + d] = v;
                }
            }
        }
    };
    fill(prompt, cfg.prompt_kstar - prompt.len(), false);
    fill(segment, n - segment.len(), true);
    Ok(seq)
}

/// Backbone parameters with scaled-normal (std 0.02) weights, zero biases
/// and unit layer-norm gains.
pub fn init_backbone(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let mut p = ParamSet::new();
    let w = |p: &mut ParamSet, name: &str, shape: &[usize]| {
        p.insert(name, normal_tensor(shape, 0.02, seed, name), Component::Backbone);
    };
    w(&mut p, "embed.rtg.w", &[1, d]);
    w(&mut p, "embed.state.w", &[cfg.max_state_dim, d]);
    w(&mut p, "embed.action.w", &[cfg.max_action_dim, d]);
    w(&mut p, "embed.timestep", &[cfg.max_episode_len, d]);
    for l in 0..cfg.n_layers {
        for m in ["wq", "wk", "wv", "wo"] {
            w(&mut p, &format!("block{l}.attn.{m}"), &[d, d]);
        }
        w(&mut p, &format!("block{l}.ffn.w1"), &[d, cfg.ffn_dim()]);
        w(&mut p, &format!("block{l}.ffn.w2"), &[cfg.ffn_dim(), d]);
    }
    w(&mut p, "head.w", &[d, cfg.max_action_dim]);
    let mut zeros = |name: String, n: usize| p.insert(name, Tensor::zeros(&[n]), Component::Backbone);
    zeros("embed.rtg.b".into(), d);
    zeros("embed.state.b".into(), d);
    zeros("embed.action.b".into(), d);
    zeros("embed.ln.b".into(), d);
    zeros("ln_f.b".into(), d);
    zeros("head.b".into(), cfg.max_action_dim);
    for l in 0..cfg.n_layers {
        for m in ["bq", "bk", "bv", "bo"] {
            zeros(format!("block{l}.attn.{m}"), d);
        }
        zeros(format!("block{l}.ffn.b1"), cfg.ffn_dim());
        zeros(format!("block{l}.ffn.b2"), d);
        zeros(format!("block{l}.ln1.b"), d);
        zeros(format!("block{l}.ln2.b"), d);
    }
    let mut ones = |name: String| p.insert(name, Tensor::filled(&[d], 1.0), Component::Backbone);
    ones("embed.ln.g".into());
    ones("ln_f.g".into());
    for l in 0..cfg.n_layers {
        ones(format!("block{l}.ln1.g"));
        ones(format!("block{l}.ln2.g"));
    }
    Ok(p)
}

/// `x @ W + b` with parameters `{prefix}.w` / `{prefix}.b` style names.
pub(crate) fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(w)?;
    let bv = g.param(b)?;
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

fn activate<T: Scalar>(g: &mut Graph<'_, T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

/// Two-layer feed-forward map `W2 act(W1 x + b1) + b2` under `prefix`.
pub(crate) fn ffn<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, act: Activation) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = activate(g, h, act);
    linear(g, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.g"))?;
    let beta = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

fn attention<T: Scalar>(g: &mut Graph<'_, T>, cfg: &ModelConfig, x: Var, l: usize, mask: &[bool]) -> Result<Var> {
    let p = |m: &str| format!("block{l}.attn.{m}");
    let q = linear(g, x, &p("wq"), &p("bq"))?;
    let k = linear(g, x, &p("wk"), &p("bk"))?;
    let v = linear(g, x, &p("wv"), &p("bv"))?;
    let dh = cfg.hidden_dim / cfg.n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, Some(mask))?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, cat, &p("wo"), &p("bo"))
}

/// Token embeddings `[3 (K* + K), hidden]` in (rtg, state, action) order.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, seq: &TokenSequence) -> Result<Var> {
    let n = seq.n_steps();
    let cast = |v: &[f32]| v.iter().map(|&x| T::of(x as f64)).collect::<Vec<T>>();
    let r = g.constant(n, 1, cast(&seq.rtg))?;
    let s = g.constant(n, seq.max_state_dim, cast(&seq.states))?;
    let a = g.constant(n, seq.max_action_dim, cast(&seq.actions))?;
    let table = g.param("embed.timestep")?;
    let time = g.gather_rows(table, &seq.timesteps)?;
    let mut parts = Vec::with_capacity(3);
    for (x, m) in [(r, "rtg"), (s, "state"), (a, "action")] {
        let e = linear(g, x, &format!("embed.{m}.w"), &format!("embed.{m}.b"))?;
        parts.push(g.add(e, time)?);
    }
    let stacked = g.concat_rows(&parts)?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i, 2 * n + i]).collect();
    let tokens = g.gather_rows(stacked, &order)?;
    layer_norm(g, tokens, "embed.ln")
}

pub(crate) const SITE_EMBED: u64 = 0;

pub(crate) fn site(layer: usize, slot: u64) -> u64 {
    1 + 4 * layer as u64 + slot
}

/// One transformer block. The feed-forward sublayer follows
/// `x + ffn(h) + moe(h)` with `h = ln2(x)`; without experts (or under
/// [`Routing::BackboneOnly`]) the MoE term is omitted.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    x: Var,
    l: usize,
    mask: &[bool],
    routing: &Routing,
) -> Result<Var> {
    let h = layer_norm(g, x, &format!("block{l}.ln1"))?;
    let a = attention(g, cfg, h, l, mask)?;
    let a = g.dropout(a, site(l, 0));
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, &format!("block{l}.ln2"))?;
    let f = ffn(g, h, &format!("block{l}.ffn"), cfg.activation)?;
    let f = g.dropout(f, site(l, 1));
    let out = g.add(x, f)?;
    match moe::moe_forward(g, cfg, h, l, routing)? {
        Some(m) => {
            let m = g.dropout(m, site(l, 2));
            g.add(out, m)
        }
        None => Ok(out),
    }
}

/// Predicted actions `[K* + K, max_action_dim]`, one per state token.
pub fn forward<T: Scalar>(g: &mut Graph<'_, T>, cfg: &ModelConfig, seq: &TokenSequence, routing: &Routing) -> Result<Var> {
    let mut x = embed(g, seq)?;
    x = g.dropout(x, SITE_EMBED);
    let mask = seq.causal_mask();
    for l in 0..cfg.n_layers {
        x = block_forward(g, cfg, x, l, &mask, routing)?;
    }
    let x = layer_norm(g, x, "ln_f")?;
    let state_rows: Vec<usize> = (0..seq.n_steps()).map(|i| 3 * i + 1).collect();
    let s = g.gather_rows(x, &state_rows)?;
    let y = linear(g, s, "head.w", "head.b")?;
    Ok(g.tanh(y))
}

/// Masked mean-squared error over the segment steps of `pred`.
pub fn dt_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, seq: &TokenSequence) -> Result<Var> {
    let rows: Vec<usize> = (seq.n_prompt..seq.n_steps()).collect();
    let seg = g.gather_rows(pred, &rows)?;
    let target: Vec<T> = seq.target_actions.iter().map(|&v| T::of(v as f64)).collect();
    g.masked_mse(seg, &target, &seq.loss_mask())
}

/// Forward pass without gradient tracking; returns the row-major predictions.
pub fn predict(params: &ParamSet, cfg: &ModelConfig, seq: &TokenSequence, routing: &Routing) -> Result<Vec<f32>> {
    let mut g = Graph::new(params, crate::autograd::GradSelect::Custom(Box::new(|_, _| false)));
    let y = forward(&mut g, cfg, seq, routing)?;
    Ok(g.value(y).to_vec())
}
