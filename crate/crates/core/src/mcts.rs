//! Monte Carlo tree search over a learned (or oracle) model.
//!
//! The search never touches the real environment once the root is encoded:
//! transitions, rewards, and leaf values all come from the `Model` trait.
//! Rewards accumulate undiscounted along the path, so a backup at depth k
//! carries G = Σ_{j>k} r_j + v(leaf).

use crate::env::EnvState;
use crate::nets;
use crate::rng::{self, salt};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

/// Planning interface: encode a token prefix, predict (policy, value),
/// imagine transitions. Scalars here are plain f64 — support decoding is the
/// model's business.
pub trait Model {
    type Latent: Clone;

    fn n_actions(&self) -> usize;
    fn represent(&self, tokens: &[u32]) -> Result<Self::Latent>;
    /// (policy logits over all actions, scalar value)
    fn predict(&self, latent: &Self::Latent) -> (Vec<f64>, f64);
    /// (successor, scalar reward)
    fn dynamics(&self, latent: &Self::Latent, action: u32) -> (Self::Latent, f64);
    fn legal_actions(&self, latent: &Self::Latent) -> Vec<bool>;
    fn is_terminal(&self, latent: &Self::Latent) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_simulations: usize,
    pub c1: f64,
    pub c2: f64,
    pub dirichlet_alpha: f64,
    pub exploration_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_simulations: 50,
            c1: 1.25,
            c2: 19652.0,
            dirichlet_alpha: 0.3,
            exploration_fraction: 0.25,
        }
    }
}

/// Running value range across the tree; Q values pass through raw until a
/// range exists.
struct MinMaxStats {
    min: f64,
    max: f64,
}

impl MinMaxStats {
    fn new() -> Self {
        MinMaxStats { min: f64::INFINITY, max: f64::NEG_INFINITY }
    }

    fn update(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn normalize(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            v
        }
    }
}

struct Node<L> {
    prior: f64,
    visits: u32,
    value_sum: f64,
    /// Reward on the transition into this node.
    reward: f64,
    latent: Option<L>,
    terminal: bool,
    /// (action, arena index), ascending by action.
    children: Vec<(u32, usize)>,
}

impl<L> Node<L> {
    fn leaf(prior: f64) -> Self {
        Node { prior, visits: 0, value_sum: 0.0, reward: 0.0, latent: None, terminal: false, children: Vec::new() }
    }

    fn mean_value(&self) -> f64 {
        if self.visits > 0 {
            self.value_sum / self.visits as f64
        } else {
            0.0
        }
    }
}

/// UCB over the children of `parent`: Q̂ + P·√ΣN/(1+N)·(c1 + ln((ΣN+c2+1)/c2)).
/// √ΣN is floored at 1 so an all-unvisited node reduces to argmax of priors;
/// unvisited children score the parent's mean value, so a visited sibling's
/// normalized Q cannot permanently outrank actions the search has never
/// tried. Ties break toward the lowest action index.
fn select_child<L>(arena: &[Node<L>], parent: usize, cfg: &SearchConfig, stats: &MinMaxStats) -> usize {
    let sum_n: u32 = arena[parent].children.iter().map(|&(_, c)| arena[c].visits).sum();
    let explore = cfg.c1 + ((sum_n as f64 + cfg.c2 + 1.0) / cfg.c2).ln();
    let sqrt_n = (sum_n.max(1) as f64).sqrt();
    let parent_q = stats.normalize(arena[parent].mean_value());
    let mut best = usize::MAX;
    let mut best_score = f64::NEG_INFINITY;
    for &(_, ci) in &arena[parent].children {
        let child = &arena[ci];
        let q = if child.visits > 0 {
            stats.normalize(child.reward + child.mean_value())
        } else {
            parent_q
        };
        let score = q + child.prior * sqrt_n / (1.0 + child.visits as f64) * explore;
        if score > best_score {
            best_score = score;
            best = ci;
        }
    }
    best
}

/// Masked softmax: probabilities over legal actions, zero elsewhere.
fn masked_priors(logits: &[f64], legal: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(legal)
        .filter(|(_, &l)| l)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if legal[i] {
            p[i] = (logits[i] - m).exp();
            sum += p[i];
        }
    }
    for v in &mut p {
        *v /= sum;
    }
    p
}

#[derive(Debug, Clone, Serialize)]
pub struct ChildStat {
    pub action: u32,
    pub prior: f64,
    pub visits: u32,
    /// Raw backup value reward + mean(value), unnormalized.
    pub q: f64,
    pub value_sum: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Visit counts per action (zero at illegal actions).
    pub visit_counts: Vec<u32>,
    pub root_visits: u32,
    pub root_value: f64,
    pub root_value_sum: f64,
    pub children: Vec<ChildStat>,
}

impl SearchResult {
    /// One JSON object per root child: {action, prior, visits, q}.
    pub fn trace_json(&self) -> String {
        serde_json::to_string(&self.children).expect("child stats serialize")
    }
}

/// Expand `node` in place: attach legal children with masked-softmax priors
/// and return the predicted value.
fn expand<M: Model>(arena: &mut Vec<Node<M::Latent>>, node: usize, model: &M) -> f64 {
    let latent = arena[node].latent.as_ref().expect("expand requires a latent");
    if model.is_terminal(latent) {
        arena[node].terminal = true;
        return 0.0;
    }
    let legal = model.legal_actions(latent);
    let (logits, value) = model.predict(latent);
    let priors = masked_priors(&logits, &legal);
    let mut children = Vec::new();
    for (a, &ok) in legal.iter().enumerate() {
        if ok {
            arena.push(Node::leaf(priors[a]));
            children.push((a as u32, arena.len() - 1));
        }
    }
    arena[node].children = children;
    value
}

/// Run MCTS from the token prefix. The root expansion counts as one visit
/// (its predicted value is backed up), then each simulation walks to a leaf,
/// expands it through the model dynamics, and backs the return up the path;
/// Σ_children N == N_root − 1 afterwards.
pub fn run_search<M: Model>(
    model: &M,
    tokens: &[u32],
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchResult> {
    let root_latent = model.represent(tokens)?;
    if model.is_terminal(&root_latent) {
        return Err(Error::validation("cannot search from a terminal state"));
    }
    let mut arena: Vec<Node<M::Latent>> = vec![Node::leaf(1.0)];
    arena[0].latent = Some(root_latent);
    let root_value = expand(&mut arena, 0, model);
    arena[0].visits = 1;
    arena[0].value_sum = root_value;
    let mut stats = MinMaxStats::new();
    stats.update(root_value);

    if cfg.exploration_fraction > 0.0 && arena[0].children.len() > 1 {
        let mut noise_rng = rng::stream(seed, salt::ROOT_NOISE);
        let alphas = vec![cfg.dirichlet_alpha; arena[0].children.len()];
        let dir = rand_distr::Dirichlet::new(&alphas)
            .map_err(|e| Error::validation(format!("dirichlet: {e}")))?;
        let noise = dir.sample(&mut noise_rng);
        let f = cfg.exploration_fraction;
        let child_ids: Vec<usize> = arena[0].children.iter().map(|&(_, c)| c).collect();
        for (ci, n) in child_ids.into_iter().zip(noise) {
            arena[ci].prior = (1.0 - f) * arena[ci].prior + f * n;
        }
    }

    for _ in 0..cfg.n_simulations {
        // descend to a leaf
        let mut path = vec![0usize];
        let mut node = 0usize;
        while arena[node].latent.is_some() && !arena[node].terminal && !arena[node].children.is_empty() {
            node = select_child(&arena, node, cfg, &stats);
            path.push(node);
        }
        // expand through dynamics unless the leaf is terminal
        let leaf_value = if arena[node].terminal {
            0.0
        } else {
            let parent = path[path.len() - 2];
            let action = arena[parent]
                .children
                .iter()
                .find(|&&(_, c)| c == node)
                .expect("leaf reached through its parent")
                .0;
            let parent_latent = arena[parent].latent.as_ref().expect("expanded parent");
            let (latent, reward) = model.dynamics(parent_latent, action);
            arena[node].reward = reward;
            arena[node].latent = Some(latent);
            expand(&mut arena, node, model)
        };
        // back up G = Σ rewards below + leaf value
        let mut g = leaf_value;
        for &n in path.iter().rev() {
            arena[n].value_sum += g;
            arena[n].visits += 1;
            stats.update(arena[n].reward + arena[n].mean_value());
            g += arena[n].reward;
        }
    }

    let mut visit_counts = vec![0u32; model.n_actions()];
    let mut children = Vec::with_capacity(arena[0].children.len());
    for &(a, ci) in &arena[0].children {
        let c = &arena[ci];
        visit_counts[a as usize] = c.visits;
        children.push(ChildStat {
            action: a,
            prior: c.prior,
            visits: c.visits,
            q: c.reward + c.mean_value(),
            value_sum: c.value_sum,
        });
    }
    Ok(SearchResult {
        visit_counts,
        root_visits: arena[0].visits,
        root_value: arena[0].mean_value(),
        root_value_sum: arena[0].value_sum,
        children,
    })
}

/// Anneal 1.0 → 0.5 → 0.25 at 50% and 75% of the episode horizon.
pub fn temperature_for(step: usize, horizon: usize) -> f64 {
    let frac = step as f64 / horizon.max(1) as f64;
    if frac < 0.5 {
        1.0
    } else if frac < 0.75 {
        0.5
    } else {
        0.25
    }
}

/// Sample an action ∝ N^(1/T); T = 0 is argmax with lowest-index ties.
pub fn sample_action<R: Rng>(visit_counts: &[u32], temperature: f64, rng: &mut R) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0usize;
        for (i, &n) in visit_counts.iter().enumerate() {
            if n > visit_counts[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let weights: Vec<f64> = visit_counts.iter().map(|&n| (n as f64).powf(1.0 / temperature)).collect();
    let total: f64 = weights.iter().sum();
    let mut roll = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        roll -= w;
        if roll < 0.0 {
            return i as u32;
        }
    }
    (visit_counts.len() - 1) as u32
}

/// Learned model adapter: plans entirely in latent space, decoding value and
/// reward supports to scalars. Token legality mirrors the environment rules
/// (EOS between edges, no self-loops, edge budget) from the latent's own
/// bookkeeping.
pub struct NetModel<'a> {
    params: &'a nets::ModelParams,
    scene: &'a nets::SceneTensor,
    emb: nets::SceneEmbedding,
    n_max: usize,
}

impl<'a> NetModel<'a> {
    pub fn new(params: &'a nets::ModelParams, scene: &'a nets::SceneTensor, n_max: usize) -> Self {
        let emb = nets::embed_scene(scene, params);
        NetModel { params, scene, emb, n_max }
    }

    fn t_max(&self) -> usize {
        2 * self.n_max + 1
    }
}

impl Model for NetModel<'_> {
    type Latent = nets::Latent;

    fn n_actions(&self) -> usize {
        self.scene.n_keypoints() + 1
    }

    fn represent(&self, tokens: &[u32]) -> Result<Self::Latent> {
        nets::represent(tokens, &self.emb, self.params)
    }

    fn predict(&self, latent: &Self::Latent) -> (Vec<f64>, f64) {
        let (logits, support) = nets::predict(latent, &self.emb, self.params);
        (logits, nets::support_decode(&support, &self.params.dims))
    }

    fn dynamics(&self, latent: &Self::Latent, action: u32) -> (Self::Latent, f64) {
        let (next, support) = nets::dynamics(latent, action, self.scene, &self.emb, self.params);
        let r = nets::support_decode(&support, &self.params.dims);
        (next, r)
    }

    fn legal_actions(&self, latent: &Self::Latent) -> Vec<bool> {
        let n_kp = self.scene.n_keypoints();
        let t = latent.steps;
        let mut mask = vec![false; n_kp + 1];
        if latent.eos || t >= self.t_max() {
            return mask;
        }
        if t % 2 == 0 {
            mask[n_kp] = true;
            if t + 2 < self.t_max() {
                mask[..n_kp].fill(true);
            }
        } else {
            mask[..n_kp].fill(true);
            if let Some(p) = latent.pending {
                mask[p as usize] = false;
            }
        }
        mask
    }

    fn is_terminal(&self, latent: &Self::Latent) -> bool {
        latent.eos || latent.steps >= self.t_max()
    }
}

/// Oracle model that plans directly in the environment: uniform priors over
/// legal actions, zero leaf values, true incremental rewards. Useful for
/// exercising the search without a trained network.
pub struct EnvOracleModel {
    proto: EnvState,
}

impl EnvOracleModel {
    pub fn new(state: EnvState) -> Self {
        EnvOracleModel { proto: state }
    }
}

impl Model for EnvOracleModel {
    type Latent = EnvState;

    fn n_actions(&self) -> usize {
        self.proto.n_actions()
    }

    fn represent(&self, tokens: &[u32]) -> Result<Self::Latent> {
        let mut s = self.proto.clone();
        for &t in tokens {
            let (next, _, _) = s.step(t)?;
            s = next;
        }
        Ok(s)
    }

    fn predict(&self, _latent: &Self::Latent) -> (Vec<f64>, f64) {
        (vec![0.0; self.n_actions()], 0.0)
    }

    fn dynamics(&self, latent: &Self::Latent, action: u32) -> (Self::Latent, f64) {
        latent
            .step(action)
            .map(|(next, r, _)| (next, r))
            .expect("search only proposes legal actions")
    }

    fn legal_actions(&self, latent: &Self::Latent) -> Vec<bool> {
        latent.legal_actions().expect("non-terminal latent")
    }

    fn is_terminal(&self, latent: &Self::Latent) -> bool {
        latent.done
    }
}
