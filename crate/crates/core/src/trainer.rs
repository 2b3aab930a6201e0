//! Self-play training: episode generation, prioritized replay with
//! reanalysis, n-step target construction, and momentum-SGD updates.

use crate::env::{self, EnvConfig, EnvState};
use crate::geom::Point;
use crate::graph::SpatialGraph;
use crate::mcts::{
    run_search, sample_action, temperature_for, Model, NetModel, SearchConfig,
};
use crate::metrics::MetricConfig;
use crate::nets::{
    self, LossSpec, ModelDims, ModelParams, SceneTensor, TrainSample, UnrollStep,
};
use crate::raster::GrayImage;
use crate::rng::{self, salt};
use crate::synthgen::{generate_scene, oracle_keypoints, SceneParams, SyntheticScene};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;

/// Bootstrap horizon for value targets.
pub const N_STEP: usize = 5;
/// Dynamics-unroll length during training.
pub const UNROLL_STEPS: usize = 5;
const PRIORITY_FLOOR: f64 = 1e-3;

// ---------------------------------------------------------------------------
// episode records

/// One decision: the searched root, the sampled action, and the env reward.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub action: u32,
    pub reward: f64,
    /// Root visit counts normalized to a distribution over actions.
    pub visit_dist: Vec<f64>,
    pub root_value: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub scene: Arc<SceneTensor>,
    pub n_max: usize,
    pub steps: Vec<StepRecord>,
    /// Combined score of the final prediction.
    pub final_score: f64,
}

impl EpisodeRecord {
    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// n-step value targets and sampling priorities for every position:
/// z_t = Σ_{k<n} r_{t+k} + v̂_{t+n} with n = min(td_steps, steps left) and a
/// zero bootstrap past the end; priority_t = |v̂_t − z_t| + 1e-3.
pub fn compute_targets(steps: &[StepRecord], td_steps: usize) -> (Vec<f64>, Vec<f64>) {
    let t_len = steps.len();
    let mut z = vec![0.0; t_len];
    let mut priority = vec![0.0; t_len];
    for t in 0..t_len {
        let n = td_steps.min(t_len - t);
        let mut target: f64 = steps[t..t + n].iter().map(|s| s.reward).sum();
        if t + n < t_len {
            target += steps[t + n].root_value;
        }
        z[t] = target;
        priority[t] = (steps[t].root_value - target).abs() + PRIORITY_FLOOR;
    }
    (z, priority)
}

// ---------------------------------------------------------------------------
// replay buffer

struct StoredEpisode {
    record: EpisodeRecord,
    z: Vec<f64>,
    priority: Vec<f64>,
}

/// FIFO episode store with per-position priorities; evicted episodes can
/// never be sampled again.
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<StoredEpisode>,
    n_positions: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SampledPosition {
    pub episode: usize,
    pub step: usize,
    /// Importance weight (1/(size·prob))^β with β = 1, max-normalized ≤ 1.
    pub weight: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<ReplayBuffer> {
        if capacity == 0 {
            return Err(Error::validation("replay capacity must be positive"));
        }
        Ok(ReplayBuffer { capacity, episodes: VecDeque::new(), n_positions: 0 })
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    pub fn episode(&self, i: usize) -> &EpisodeRecord {
        &self.episodes[i].record
    }

    pub fn targets(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.episodes[i].z, &self.episodes[i].priority)
    }

    pub fn push(&mut self, record: EpisodeRecord) -> Result<()> {
        if record.steps.is_empty() {
            return Err(Error::validation("cannot store an episode with no steps"));
        }
        let (z, priority) = compute_targets(&record.steps, N_STEP);
        if self.episodes.len() == self.capacity {
            let old = self.episodes.pop_front().expect("capacity > 0");
            self.n_positions -= old.record.steps.len();
        }
        self.n_positions += record.steps.len();
        self.episodes.push_back(StoredEpisode { record, z, priority });
        Ok(())
    }

    /// Draw positions ∝ priority, with importance weights max-normalized
    /// over the batch.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<SampledPosition>> {
        if self.episodes.is_empty() {
            return Err(Error::validation("replay buffer is empty"));
        }
        if batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        let mut cum = Vec::with_capacity(self.n_positions);
        let mut index = Vec::with_capacity(self.n_positions);
        let mut total = 0.0;
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, &p) in ep.priority.iter().enumerate() {
                total += p;
                cum.push(total);
                index.push((e, t));
            }
        }
        let n = self.n_positions as f64;
        let mut out: Vec<SampledPosition> = (0..batch_size)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                let i = cum.partition_point(|&c| c <= u).min(index.len() - 1);
                let (episode, step) = index[i];
                let prob = self.episodes[episode].priority[step] / total;
                SampledPosition { episode, step, weight: 1.0 / (n * prob) }
            })
            .collect();
        let w_max = out.iter().fold(0.0_f64, |a, p| a.max(p.weight));
        for p in &mut out {
            p.weight /= w_max;
        }
        Ok(out)
    }

    /// Build the training target at one position: the root row plus up to
    /// `unroll` recorded transitions; policy is masked past the episode end
    /// and the value target there is 0.
    pub fn make_sample(&self, pos: &SampledPosition, unroll: usize) -> TrainSample {
        let ep = &self.episodes[pos.episode];
        let steps = &ep.record.steps;
        let t = pos.step;
        let tokens: Vec<u32> = steps[..t].iter().map(|s| s.action).collect();
        let mut rows = Vec::with_capacity(unroll + 1);
        rows.push(UnrollStep {
            action_in: None,
            reward_target: None,
            policy_target: Some(steps[t].visit_dist.clone()),
            value_target: Some(ep.z[t]),
        });
        for k in 1..=unroll {
            let p = t + k;
            if p > steps.len() {
                break;
            }
            let action_in = Some(steps[p - 1].action);
            let reward_target = Some(steps[p - 1].reward);
            if p < steps.len() {
                rows.push(UnrollStep {
                    action_in,
                    reward_target,
                    policy_target: Some(steps[p].visit_dist.clone()),
                    value_target: Some(ep.z[p]),
                });
            } else {
                rows.push(UnrollStep {
                    action_in,
                    reward_target,
                    policy_target: None,
                    value_target: Some(0.0),
                });
            }
        }
        TrainSample { scene: ep.record.scene.clone(), tokens, unroll: rows, weight: pos.weight }
    }

    /// Re-search a fraction of stored episodes with fresh parameters,
    /// refreshing visit distributions, root values, and priorities; actions
    /// and rewards stay untouched. Returns how many episodes were refreshed.
    pub fn reanalyze(
        &mut self,
        fraction: f64,
        params: &ModelParams,
        search: &SearchConfig,
        seed: u64,
    ) -> Result<usize> {
        if fraction <= 0.0 || self.episodes.is_empty() {
            return Ok(0);
        }
        let mut rng = rng::stream(seed, salt::REANALYZE);
        let n = self.episodes.len();
        let k = ((fraction * n as f64).ceil() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.truncate(k);
        for &i in &order {
            let scene = self.episodes[i].record.scene.clone();
            let n_max = self.episodes[i].record.n_max;
            let model = NetModel::new(params, &scene, n_max);
            let mut tokens: Vec<u32> = Vec::new();
            for t in 0..self.episodes[i].record.steps.len() {
                let res = run_search(&model, &tokens, search, rng.gen())?;
                let total: u32 = res.visit_counts.iter().sum();
                let step = &mut self.episodes[i].record.steps[t];
                step.visit_dist =
                    res.visit_counts.iter().map(|&c| c as f64 / total as f64).collect();
                step.root_value = res.root_value;
                tokens.push(step.action);
            }
            let (z, priority) = compute_targets(&self.episodes[i].record.steps, N_STEP);
            self.episodes[i].z = z;
            self.episodes[i].priority = priority;
        }
        Ok(k)
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Momentum gradient descent with cosine learning-rate decay; parameters are
/// snapped back to the f32 grid after every step.
pub struct Optimizer {
    pub momentum: f64,
    pub base_lr: f64,
    pub total_steps: usize,
    velocity: ModelParams,
}

impl Optimizer {
    pub fn new(dims: &ModelDims, base_lr: f64, momentum: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if !base_lr.is_finite() || base_lr < 0.0 {
            return Err(Error::validation("learning rate must be finite and nonnegative"));
        }
        Ok(Optimizer {
            momentum,
            base_lr,
            total_steps: total_steps.max(1),
            velocity: ModelParams::zeros(dims)?,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let ratio = (step as f64 / self.total_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos())
    }

    pub fn step_with_lr(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        for ((_, v), (_, g)) in self.velocity.tensors_mut().into_iter().zip(grads.tensors()) {
            for (vi, gi) in v.data.iter_mut().zip(&g.data) {
                *vi = self.momentum * *vi + gi;
            }
        }
        for ((_, p), (_, v)) in params.tensors_mut().into_iter().zip(self.velocity.tensors()) {
            for (pi, vi) in p.data.iter_mut().zip(&v.data) {
                *pi -= lr * vi;
            }
        }
        params.snap_to_f32();
    }
}

/// One gradient step on a batch. Returns the loss report normalized to
/// per-sample means; errors if any loss term is non-finite.
pub fn update(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &[TrainSample],
    spec: &LossSpec,
    lr: f64,
) -> Result<nets::LossReport> {
    if batch.is_empty() {
        return Err(Error::validation("cannot update on an empty batch"));
    }
    let (mut grads, mut report) = nets::backward(params, batch, spec)?;
    let inv = 1.0 / batch.len() as f64;
    for (_, g) in grads.tensors_mut() {
        for v in &mut g.data {
            *v *= inv;
        }
    }
    report.policy *= inv;
    report.value *= inv;
    report.reward *= inv;
    report.total *= inv;
    opt.step_with_lr(params, &grads, lr);
    Ok(report)
}

// ---------------------------------------------------------------------------
// self-play

/// One training scene: the rendered image, keypoint set, scoring graphs, and
/// precomputed per-keypoint network inputs.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub image: Arc<GrayImage>,
    pub keypoints: Arc<Vec<Point>>,
    pub gt: Arc<SpatialGraph>,
    /// Oracle-keypoint graph (subdivided ground truth) for the optional
    /// early-training reward curriculum.
    pub surrogate: Arc<SpatialGraph>,
    /// Canonical ground-truth edge sequence plus EOS, for pretraining.
    pub gt_tokens: Vec<u32>,
    pub tensor: Arc<SceneTensor>,
}

impl TrainScene {
    pub fn n_actions(&self) -> usize {
        self.keypoints.len() + 1
    }
}

pub fn make_train_scene(scene: &SyntheticScene, cfg: &TrainConfig) -> Result<TrainScene> {
    let (keypoints, edges) = oracle_keypoints(
        &scene.gt,
        scene.seed,
        cfg.keypoint_distractors,
        cfg.keypoint_max_edge_len,
        cfg.keypoint_min_spacing,
    )?;
    let tensor = SceneTensor::new(&scene.image, &keypoints, &cfg.dims);
    // same geometry as the oracle-keypoint graph, without decoy vertices
    let surrogate = scene.gt.subdivide_edges(cfg.keypoint_max_edge_len)?;
    let mut canonical: Vec<(u32, u32)> =
        edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    canonical.sort_unstable();
    let mut gt_tokens: Vec<u32> = canonical.iter().flat_map(|&(a, b)| [a, b]).collect();
    gt_tokens.push(keypoints.len() as u32);
    Ok(TrainScene {
        image: scene.image.clone().into(),
        keypoints: Arc::new(keypoints),
        gt: Arc::new(scene.gt.clone()),
        surrogate: Arc::new(surrogate),
        gt_tokens,
        tensor: Arc::new(tensor),
    })
}

/// Drive one episode: search, sample an action (the given temperature, or
/// the step schedule when `None`), step the environment, record everything
/// needed for targets. The model must agree with the environment on
/// legality; rewards come from the environment.
pub fn play_episode<M: Model>(
    model: &M,
    start: EnvState,
    search: &SearchConfig,
    temperature: Option<f64>,
    seed: u64,
) -> Result<(Vec<StepRecord>, EnvState)> {
    let mut rng = rng::stream(seed, salt::ACTION_SAMPLE);
    let mut state = start;
    let mut tokens = state.edge_tokens.clone();
    let horizon = state.t_max();
    let mut steps = Vec::new();
    while !state.done {
        let res = run_search(model, &tokens, search, rng.gen())?;
        let tau = temperature.unwrap_or_else(|| temperature_for(state.t(), horizon));
        let action = sample_action(&res.visit_counts, tau, &mut rng);
        let (next, reward, _) = state.step(action)?;
        let total: u32 = res.visit_counts.iter().sum();
        steps.push(StepRecord {
            action,
            reward,
            visit_dist: res.visit_counts.iter().map(|&c| c as f64 / total as f64).collect(),
            root_value: res.root_value,
        });
        tokens.push(action);
        state = next;
    }
    Ok((steps, state))
}

/// Self-play one episode on a training scene with the learned model.
pub fn self_play(
    params: &ModelParams,
    scene: &TrainScene,
    env_cfg: &EnvConfig,
    search: &SearchConfig,
    temperature: Option<f64>,
    use_surrogate: bool,
    seed: u64,
) -> Result<EpisodeRecord> {
    let gt = if use_surrogate { scene.surrogate.clone() } else { scene.gt.clone() };
    let state = env::reset(scene.image.clone(), scene.keypoints.clone(), &[], Some(gt), env_cfg)?;
    let n_max = state.n_max();
    let model = NetModel::new(params, &scene.tensor, n_max);
    let (steps, end) = play_episode(&model, state, search, temperature, seed)?;
    Ok(EpisodeRecord { scene: scene.tensor.clone(), n_max, steps, final_score: end.cached_score })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub scene: SceneParams,
    pub metric: MetricConfig,
    pub search: SearchConfig,
    /// Edge budget override; `None` uses the environment default.
    pub n_max: Option<usize>,
    pub keypoint_distractors: usize,
    pub keypoint_max_edge_len: f64,
    pub keypoint_min_spacing: f64,
    /// Train on a fixed pool of this many scenes, cycled in draw order
    /// (`None` streams a fresh scene for every episode).
    pub scene_pool: Option<usize>,
    /// Redraw any scene whose occlusion difficulty exceeds this cap.
    pub max_difficulty: Option<f64>,
    pub total_steps: usize,
    /// Supervised policy warm-start steps on ground-truth edge sequences.
    pub pretrain_steps: usize,
    /// Training steps that score episodes against the oracle-keypoint graph
    /// instead of true ground truth.
    pub surrogate_gt_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub replay_capacity: usize,
    pub min_replay_episodes: usize,
    pub episodes_per_step: usize,
    /// Refresh stored targets every this many steps (0 = never).
    pub reanalyze_every: usize,
    pub reanalyze_fraction: f64,
    /// Evaluate greedily on held-out scenes every this many steps (0 = never).
    pub eval_every: usize,
    pub eval_scenes: usize,
    /// Self-play producer threads; 1 runs inline. Capped by RGF_THREADS.
    pub workers: usize,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            dims: ModelDims::default(),
            scene: SceneParams::default(),
            metric: MetricConfig::default(),
            search: SearchConfig::default(),
            n_max: None,
            keypoint_distractors: 4,
            keypoint_max_edge_len: 40.0,
            keypoint_min_spacing: 6.0,
            scene_pool: None,
            max_difficulty: None,
            total_steps: 1000,
            pretrain_steps: 200,
            surrogate_gt_steps: 0,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            replay_capacity: 512,
            min_replay_episodes: 4,
            episodes_per_step: 1,
            reanalyze_every: 100,
            reanalyze_fraction: 0.25,
            eval_every: 100,
            eval_scenes: 4,
            workers: 1,
            loss: LossSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Small-everything profile for tests and smoke runs.
    pub fn tiny(seed: u64) -> Self {
        TrainConfig {
            seed,
            dims: ModelDims {
                d: 16,
                window: 5,
                posenc: 8,
                feat_hidden: 16,
                value_hidden: 16,
                reward_hidden: 8,
                support: 21,
                max_tokens: 64,
                step_enc: 4,
                use_token_order: true,
            },
            scene: SceneParams::tiny(),
            search: SearchConfig { n_simulations: 16, ..SearchConfig::default() },
            n_max: Some(12),
            keypoint_distractors: 2,
            keypoint_max_edge_len: 30.0,
            keypoint_min_spacing: 5.0,
            total_steps: 50,
            pretrain_steps: 20,
            batch_size: 8,
            lr: 1e-2,
            replay_capacity: 64,
            min_replay_episodes: 2,
            reanalyze_every: 0,
            reanalyze_fraction: 0.0,
            eval_every: 0,
            eval_scenes: 2,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.metric.validate()?;
        if self.batch_size == 0 || self.episodes_per_step == 0 {
            return Err(Error::validation("batch size and episodes per step must be positive"));
        }
        if self.search.n_simulations == 0 {
            return Err(Error::validation("search needs at least one simulation"));
        }
        if self.eval_every > 0 && self.eval_scenes == 0 {
            return Err(Error::validation("evaluation enabled with zero eval scenes"));
        }
        if self.workers == 0 {
            return Err(Error::validation("worker count must be positive"));
        }
        if !(self.keypoint_max_edge_len > 0.0) || !(self.keypoint_min_spacing >= 0.0) {
            return Err(Error::validation("keypoint spacing parameters must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reanalyze_fraction) {
            return Err(Error::validation("reanalyze fraction must lie in [0, 1]"));
        }
        if self.scene_pool == Some(0) {
            return Err(Error::validation("scene pool must hold at least one scene"));
        }
        if let Some(cap) = self.max_difficulty {
            if !(0.0..=1.0).contains(&cap) {
                return Err(Error::validation("difficulty cap must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn env_config(&self) -> EnvConfig {
        EnvConfig { n_max: self.n_max, metric: self.metric.clone() }
    }
}

/// Per-update log row; losses are absent while the replay buffer warms up.
#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub step: usize,
    pub losses: Option<nets::LossReport>,
    pub eval_return: Option<f64>,
}

impl TrainStats {
    pub fn csv_header() -> &'static str {
        "step,policy_loss,value_loss,reward_loss,eval_return"
    }

    pub fn csv_row(&self) -> String {
        let field = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            field(self.losses.map(|l| l.policy)),
            field(self.losses.map(|l| l.value)),
            field(self.losses.map(|l| l.reward)),
            field(self.eval_return),
        )
    }
}

/// Worker count after applying the RGF_THREADS environment cap.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var("RGF_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    match cap {
        Some(c) if c >= 1 => requested.min(c),
        _ => requested,
    }
    .max(1)
}

/// Redraws past the difficulty cap by re-deriving the seed, so a given
/// (seed, config) pair always lands on the same scene.
fn make_scene_from_seed(seed: u64, cfg: &TrainConfig) -> Result<TrainScene> {
    let mut s = seed;
    for _ in 0..64 {
        let synth = generate_scene(s, &cfg.scene)?;
        if cfg.max_difficulty.map_or(true, |cap| synth.difficulty <= cap) {
            return make_train_scene(&synth, cfg);
        }
        s = rng::derive(s, salt::SCENE);
    }
    Err(Error::validation(
        "no scene within the difficulty cap after 64 redraws; raise the cap or lower density",
    ))
}

/// The evaluation scenes a training run with this config holds out: the
/// first draws from the scene stream, taken before any training scene.
pub fn held_out_scenes(cfg: &TrainConfig) -> Result<Vec<TrainScene>> {
    cfg.validate()?;
    let mut scene_rng = rng::stream(cfg.seed, salt::SCENE);
    (0..cfg.eval_scenes).map(|_| make_scene_from_seed(scene_rng.gen(), cfg)).collect()
}

/// A self-play episode's scene: built fresh from a seed, or borrowed from
/// the fixed training pool.
#[derive(Clone, Copy)]
enum SceneSource<'a> {
    Fresh(u64),
    Pooled(&'a TrainScene),
}

fn roll_one(
    params: &ModelParams,
    cfg: &TrainConfig,
    env_cfg: &EnvConfig,
    source: SceneSource<'_>,
    play_seed: u64,
    use_surrogate: bool,
) -> Result<EpisodeRecord> {
    let fresh;
    let scene = match source {
        SceneSource::Fresh(seed) => {
            fresh = make_scene_from_seed(seed, cfg)?;
            &fresh
        }
        SceneSource::Pooled(scene) => scene,
    };
    self_play(params, scene, env_cfg, &cfg.search, None, use_surrogate, play_seed)
}

/// Generate episodes for one training step. Seeds are assigned per episode
/// and results are collected in seed order, so any worker count produces
/// bit-identical output.
fn run_episodes(
    params: &ModelParams,
    cfg: &TrainConfig,
    env_cfg: &EnvConfig,
    jobs: &[(SceneSource<'_>, u64)],
    use_surrogate: bool,
    workers: usize,
) -> Result<Vec<EpisodeRecord>> {
    if workers <= 1 || jobs.len() <= 1 {
        return jobs
            .iter()
            .map(|&(s, p)| roll_one(params, cfg, env_cfg, s, p, use_surrogate))
            .collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|slice| {
                scope.spawn(move || -> Result<Vec<EpisodeRecord>> {
                    slice
                        .iter()
                        .map(|&(s, p)| roll_one(params, cfg, env_cfg, s, p, use_surrogate))
                        .collect()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Numeric("self-play worker panicked".into()))??);
        }
        Ok(out)
    })
}

/// Mean final combined score of greedy (T = 0, noise-free) play on a scene set.
pub fn evaluate(
    params: &ModelParams,
    scenes: &[TrainScene],
    env_cfg: &EnvConfig,
    search: &SearchConfig,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::validation("evaluation needs at least one scene"));
    }
    let greedy = SearchConfig { exploration_fraction: 0.0, ..search.clone() };
    let mut total = 0.0;
    for scene in scenes {
        let ep = self_play(params, scene, env_cfg, &greedy, Some(0.0), false, 0)?;
        total += ep.final_score;
    }
    Ok(total / scenes.len() as f64)
}

/// One supervised warm-start sample: a random subset of the ground-truth
/// edges, in random order and orientation, as the observation; the target
/// is a correct next token (the partner of a half-placed edge, an endpoint
/// of an unplaced edge, or EOS once all edges are down). Randomized
/// prefixes teach the policy to finish dangling edges and to avoid edges
/// it has already placed, which fixed-order prefixes never exercise.
fn pretrain_sample<R: Rng>(scene: &TrainScene, rng: &mut R) -> TrainSample {
    let n_edges = (scene.gt_tokens.len() - 1) / 2;
    let endpoints =
        |i: usize| -> (u32, u32) { (scene.gt_tokens[2 * i], scene.gt_tokens[2 * i + 1]) };
    let mut order: Vec<usize> = (0..n_edges).collect();
    for k in (1..order.len()).rev() {
        order.swap(k, rng.gen_range(0..=k));
    }
    let placed = rng.gen_range(0..=n_edges);
    let mut tokens = Vec::with_capacity(2 * placed + 1);
    for &i in &order[..placed] {
        let (a, b) = endpoints(i);
        let flip = rng.gen_bool(0.5);
        tokens.extend(if flip { [b, a] } else { [a, b] });
    }
    let target_token = if placed == n_edges {
        scene.keypoints.len() as u32 // EOS
    } else {
        let (a, b) = endpoints(order[placed]);
        let (first, second) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        if rng.gen_bool(0.5) {
            tokens.push(first);
            second
        } else {
            first
        }
    };
    let mut target = vec![0.0; scene.n_actions()];
    target[target_token as usize] = 1.0;
    TrainSample {
        scene: scene.tensor.clone(),
        tokens,
        unroll: vec![UnrollStep {
            action_in: None,
            reward_target: None,
            policy_target: Some(target),
            value_target: None,
        }],
        weight: 1.0,
    }
}

/// Full training run: optional supervised pretraining on ground-truth edge
/// sequences, then self-play with prioritized replay, reanalysis, and
/// periodic greedy evaluation. `on_step` fires once per update.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&TrainStats)) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::init(&cfg.dims, cfg.seed)?;
    let env_cfg = cfg.env_config();
    let workers = effective_workers(cfg.workers);
    let mut scene_rng = rng::stream(cfg.seed, salt::SCENE);
    // held-out seeds are always drawn first so training draws never collide
    // with `held_out_scenes`, whether or not in-run evaluation is on
    let eval_seeds: Vec<u64> = (0..cfg.eval_scenes).map(|_| scene_rng.gen()).collect();
    let eval_set: Vec<TrainScene> = if cfg.eval_every > 0 {
        eval_seeds.iter().map(|&s| make_scene_from_seed(s, cfg)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let pool: Option<Vec<TrainScene>> = match cfg.scene_pool {
        Some(n) => {
            Some((0..n).map(|_| make_scene_from_seed(scene_rng.gen(), cfg)).collect::<Result<_>>()?)
        }
        None => None,
    };
    let mut pool_cursor = 0usize;
    let mut replay_rng = rng::stream(cfg.seed, salt::REPLAY);
    let mut play_rng = rng::stream(cfg.seed, salt::ACTION_SAMPLE);
    let mut reanalyze_rng = rng::stream(cfg.seed, salt::REANALYZE);
    let total_updates = cfg.pretrain_steps + cfg.total_steps;
    let mut opt = Optimizer::new(&cfg.dims, cfg.lr, cfg.momentum, total_updates)?;

    let pre_spec = LossSpec { policy: cfg.loss.policy, value: 0.0, reward: 0.0 };
    for step in 0..cfg.pretrain_steps {
        let fresh;
        let scene = match &pool {
            Some(p) => {
                pool_cursor += 1;
                &p[(pool_cursor - 1) % p.len()]
            }
            None => {
                fresh = make_scene_from_seed(scene_rng.gen(), cfg)?;
                &fresh
            }
        };
        let batch: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| pretrain_sample(scene, &mut replay_rng))
            .collect();
        let lr = opt.lr_at(step);
        let report = update(&mut params, &mut opt, &batch, &pre_spec, lr)?;
        on_step(&TrainStats { step, losses: Some(report), eval_return: None });
    }

    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    for step in 0..cfg.total_steps {
        let global = cfg.pretrain_steps + step;
        let use_surrogate = step < cfg.surrogate_gt_steps;
        let jobs: Vec<(SceneSource, u64)> = (0..cfg.episodes_per_step)
            .map(|_| {
                let src = match &pool {
                    Some(p) => {
                        pool_cursor += 1;
                        SceneSource::Pooled(&p[(pool_cursor - 1) % p.len()])
                    }
                    None => SceneSource::Fresh(scene_rng.gen()),
                };
                (src, play_rng.gen())
            })
            .collect();
        for ep in run_episodes(&params, cfg, &env_cfg, &jobs, use_surrogate, workers)? {
            buffer.push(ep)?;
        }
        let mut losses = None;
        if buffer.n_episodes() >= cfg.min_replay_episodes.max(1) {
            let picks = buffer.sample(cfg.batch_size, &mut replay_rng)?;
            let batch: Vec<TrainSample> =
                picks.iter().map(|p| buffer.make_sample(p, UNROLL_STEPS)).collect();
            let lr = opt.lr_at(global);
            losses = Some(update(&mut params, &mut opt, &batch, &cfg.loss, lr)?);
        }
        if cfg.reanalyze_every > 0
            && cfg.reanalyze_fraction > 0.0
            && (step + 1) % cfg.reanalyze_every == 0
        {
            buffer.reanalyze(cfg.reanalyze_fraction, &params, &cfg.search, reanalyze_rng.gen())?;
        }
        let eval_return = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            Some(evaluate(&params, &eval_set, &env_cfg, &cfg.search)?)
        } else {
            None
        };
        on_step(&TrainStats { step: global, losses, eval_return });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcts::EnvOracleModel;
    use crate::raster::GrayImage;

    fn record(rewards: &[f64], root_values: &[f64]) -> Vec<StepRecord> {
        rewards
            .iter()
            .zip(root_values)
            .map(|(&reward, &root_value)| StepRecord {
                action: 0,
                reward,
                visit_dist: vec![1.0],
                root_value,
            })
            .collect()
    }

    fn episode_with(actions: &[u32], rewards: &[f64], root_values: &[f64]) -> EpisodeRecord {
        let n_actions = actions.iter().copied().max().unwrap_or(0) as usize + 2;
        let steps = actions
            .iter()
            .zip(rewards)
            .zip(root_values)
            .map(|((&action, &reward), &root_value)| {
                let mut visit_dist = vec![0.0; n_actions];
                visit_dist[action as usize] = 1.0;
                StepRecord { action, reward, visit_dist, root_value }
            })
            .collect();
        let image = GrayImage::new(8, 8, 128);
        let kps: Vec<Point> = (0..n_actions - 1)
            .map(|i| Point { x: i as f64, y: i as f64 })
            .collect();
        let tensor = SceneTensor::new(&image, &kps, &TrainConfig::tiny(0).dims);
        EpisodeRecord {
            scene: Arc::new(tensor),
            n_max: 4,
            steps,
            final_score: rewards.iter().sum(),
        }
    }

    #[test]
    fn n_step_targets_bootstrap_and_truncate() {
        // hand-computed: 6 steps, zero rewards, v̂_5 = 0.4
        let steps = record(&[0.0; 6], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.4]);
        let (z, prio) = compute_targets(&steps, N_STEP);
        assert_eq!(z[0], 0.4); // bootstraps on v̂_5
        assert_eq!(z[1], 0.0); // horizon hits the end: zero bootstrap
        assert_eq!(z[5], 0.0);
        assert!(prio.iter().all(|&p| p >= PRIORITY_FLOOR));

        // nonzero rewards accumulate and the bootstrap adds on top
        let steps = record(&[1.0, 0.5, 0.0, 0.0, 0.0, 0.0], &[0.2, 0.0, 0.0, 0.0, 0.0, 0.4]);
        let (z, prio) = compute_targets(&steps, N_STEP);
        assert_eq!(z[0], 1.0 + 0.5 + 0.4);
        assert_eq!(z[1], 0.5);
        assert!((prio[0] - ((0.2f64 - 1.9).abs() + 1e-3)).abs() < 1e-15);

        // terminal step: z = r_T only
        let steps = record(&[0.7], &[0.1]);
        let (z, _) = compute_targets(&steps, N_STEP);
        assert_eq!(z, vec![0.7]);
    }

    #[test]
    fn replay_evicts_oldest_and_never_returns_them() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for tag in 0..4u32 {
            buf.push(episode_with(&[tag], &[0.0], &[0.0])).unwrap();
        }
        assert_eq!(buf.n_episodes(), 2);
        assert_eq!(buf.n_positions(), 2);
        let live: Vec<u32> = (0..2).map(|i| buf.episode(i).steps[0].action).collect();
        assert_eq!(live, vec![2, 3]);
        let mut rng = rng::stream(5, salt::REPLAY);
        for pos in buf.sample(64, &mut rng).unwrap() {
            assert!(pos.episode < 2);
            assert!(buf.episode(pos.episode).steps[0].action >= 2);
        }
    }

    #[test]
    fn uniform_priorities_sample_uniformly() {
        // root_value == z == 0 everywhere → all priorities equal the floor
        let mut buf = ReplayBuffer::new(8).unwrap();
        buf.push(episode_with(&[0, 1], &[0.0, 0.0], &[0.0, 0.0])).unwrap();
        buf.push(episode_with(&[2, 3, 4], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0])).unwrap();
        let mut rng = rng::stream(11, salt::REPLAY);
        let mut counts = vec![0usize; 5];
        for _ in 0..100 {
            for pos in buf.sample(100, &mut rng).unwrap() {
                let flat = if pos.episode == 0 { pos.step } else { 2 + pos.step };
                counts[flat] += 1;
                assert!(pos.weight <= 1.0 + 1e-12);
            }
        }
        for &c in &counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() < 0.02, "counts {counts:?}");
        }
    }

    #[test]
    fn high_priority_position_dominates_sampling() {
        // |v̂ − z| = 0.0 floor vs ≈ 0.1: a 101× priority ratio
        let mut buf = ReplayBuffer::new(16).unwrap();
        buf.push(episode_with(&[0], &[0.0], &[0.1])).unwrap(); // prio 0.101
        for _ in 0..9 {
            buf.push(episode_with(&[0], &[0.0], &[0.0])).unwrap(); // prio 0.001
        }
        let mut rng = rng::stream(13, salt::REPLAY);
        let picks = buf.sample(10_000, &mut rng).unwrap();
        let dominant = picks.iter().filter(|p| p.episode == 0).count();
        assert!(dominant as f64 / 10_000.0 > 0.8, "dominant share {dominant}");
        // the rare low-priority picks carry the (max-normalized) unit weight
        let w_dom = picks.iter().find(|p| p.episode == 0).unwrap().weight;
        let w_rare = picks.iter().find(|p| p.episode != 0).map(|p| p.weight);
        if let Some(w) = w_rare {
            assert!((w - 1.0).abs() < 1e-12);
            assert!((w_dom - 0.001 / 0.101).abs() < 1e-12);
        }
    }

    #[test]
    fn make_sample_masks_past_episode_end() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push(episode_with(&[2, 5, 6], &[0.0, 0.3, 0.1], &[0.1, 0.2, 0.3])).unwrap();
        let (z, _) = compute_targets(&buf.episode(0).steps, N_STEP);
        let pos = SampledPosition { episode: 0, step: 1, weight: 0.5 };
        let s = buf.make_sample(&pos, UNROLL_STEPS);
        assert_eq!(s.tokens, vec![2]);
        assert_eq!(s.weight, 0.5);
        assert_eq!(s.unroll.len(), 3); // root + two recorded transitions
        assert!(s.unroll[0].action_in.is_none());
        assert_eq!(s.unroll[0].value_target, Some(z[1]));
        assert_eq!(s.unroll[1].action_in, Some(5));
        assert_eq!(s.unroll[1].reward_target, Some(0.3));
        assert_eq!(s.unroll[1].value_target, Some(z[2]));
        assert!(s.unroll[1].policy_target.is_some());
        // final row crosses the episode end: policy masked, value 0
        assert_eq!(s.unroll[2].action_in, Some(6));
        assert_eq!(s.unroll[2].reward_target, Some(0.1));
        assert!(s.unroll[2].policy_target.is_none());
        assert_eq!(s.unroll[2].value_target, Some(0.0));
    }

    #[test]
    fn optimizer_zero_lr_is_identity() {
        let dims = TrainConfig::tiny(0).dims;
        let mut params = ModelParams::init(&dims, 7).unwrap();
        let before: Vec<Vec<f64>> =
            params.tensors().iter().map(|(_, t)| t.data.clone()).collect();
        let mut grads = ModelParams::zeros(&dims).unwrap();
        for (_, g) in grads.tensors_mut() {
            g.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 - 3.0);
        }
        let mut opt = Optimizer::new(&dims, 0.0, 0.9, 10).unwrap();
        opt.step_with_lr(&mut params, &grads, 0.0);
        for ((_, t), b) in params.tensors().iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn momentum_accumulates_and_cosine_decays() {
        let dims = TrainConfig::tiny(0).dims;
        let mut params = ModelParams::zeros(&dims).unwrap();
        let mut grads = ModelParams::zeros(&dims).unwrap();
        grads.tensors_mut()[0].1.data[0] = 1.0;
        let mut opt = Optimizer::new(&dims, 1.0, 0.9, 100).unwrap();
        opt.step_with_lr(&mut params, &grads, 0.1);
        let after_one = params.tensors()[0].1.data[0];
        assert!((after_one - -0.1).abs() < 1e-6);
        opt.step_with_lr(&mut params, &grads, 0.1);
        let after_two = params.tensors()[0].1.data[0];
        // second step applies velocity 1.9·g
        assert!((after_two - -(0.1 + 0.19)).abs() < 1e-6);

        assert_eq!(opt.lr_at(0), 1.0);
        assert!(opt.lr_at(100) < 1e-12);
        assert!(opt.lr_at(25) > opt.lr_at(50) && opt.lr_at(50) > opt.lr_at(75));
    }

    fn overfit_scene() -> (Arc<SceneTensor>, ModelDims) {
        let dims = TrainConfig::tiny(0).dims;
        let mut image = GrayImage::new(16, 16, 100);
        for i in 0..16 {
            image.set(i, 5, 220);
        }
        let kps = vec![
            Point { x: 2.0, y: 5.0 },
            Point { x: 9.0, y: 5.0 },
            Point { x: 13.0, y: 11.0 },
        ];
        (Arc::new(SceneTensor::new(&image, &kps, &dims)), dims)
    }

    #[test]
    fn single_sample_overfit_drives_loss_below_1e_3() {
        let (scene, dims) = overfit_scene();
        let sample = TrainSample {
            scene,
            tokens: vec![],
            unroll: vec![
                UnrollStep {
                    action_in: None,
                    reward_target: None,
                    policy_target: Some(vec![0.0, 1.0, 0.0, 0.0]),
                    value_target: Some(0.5),
                },
                UnrollStep {
                    action_in: Some(1),
                    reward_target: None,
                    policy_target: Some(vec![0.0, 0.0, 1.0, 0.0]),
                    value_target: Some(0.5),
                },
            ],
            weight: 1.0,
        };
        let mut params = ModelParams::init(&dims, 3).unwrap();
        let mut opt = Optimizer::new(&dims, 0.1, 0.9, usize::MAX).unwrap();
        let spec = LossSpec::default();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = update(&mut params, &mut opt, &[sample.clone()], &spec, 0.1).unwrap().total;
        }
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn loss_trends_down_on_a_fixed_batch() {
        let (scene, dims) = overfit_scene();
        let mk = |tokens: Vec<u32>, tgt: usize, val: f64| TrainSample {
            scene: scene.clone(),
            tokens,
            unroll: vec![UnrollStep {
                action_in: None,
                reward_target: None,
                policy_target: Some({
                    let mut v = vec![0.0; 4];
                    v[tgt] = 1.0;
                    v
                }),
                value_target: Some(val),
            }],
            weight: 1.0,
        };
        let batch = vec![
            mk(vec![], 0, 0.3),
            mk(vec![0], 2, 0.6),
            mk(vec![0, 2], 3, 0.1),
            mk(vec![0, 2, 1], 1, 0.0),
        ];
        let mut params = ModelParams::init(&dims, 4).unwrap();
        let mut opt = Optimizer::new(&dims, 0.02, 0.9, usize::MAX).unwrap();
        let spec = LossSpec::default();
        let mut losses = Vec::new();
        for _ in 0..100 {
            losses.push(update(&mut params, &mut opt, &batch, &spec, 0.02).unwrap().total);
        }
        let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(violations <= 10, "{violations} increases over 100 steps");
        assert!(losses[99] < losses[0]);
    }

    fn tiny_train_scene(seed: u64) -> (TrainScene, TrainConfig) {
        let cfg = TrainConfig::tiny(seed);
        let synth = generate_scene(seed, &cfg.scene).unwrap();
        (make_train_scene(&synth, &cfg).unwrap(), cfg)
    }

    #[test]
    fn self_play_is_deterministic_and_bounded() {
        let (scene, cfg) = tiny_train_scene(7);
        let params = ModelParams::init(&cfg.dims, 3).unwrap();
        let env_cfg = cfg.env_config();
        let search = SearchConfig { n_simulations: 8, ..SearchConfig::default() };
        let a = self_play(&params, &scene, &env_cfg, &search, None, false, 11).unwrap();
        let b = self_play(&params, &scene, &env_cfg, &search, None, false, 11).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        assert!(a.steps.len() <= 2 * a.n_max + 1);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.action, y.action);
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            assert_eq!(x.visit_dist, y.visit_dist);
            assert_eq!(x.root_value.to_bits(), y.root_value.to_bits());
        }
        assert!((a.episode_return() - a.final_score).abs() < 1e-12);
        let c = self_play(&params, &scene, &env_cfg, &search, None, false, 12).unwrap();
        let same = a.steps.len() == c.steps.len()
            && a.steps.iter().zip(&c.steps).all(|(x, y)| x.action == y.action);
        assert!(!same || a.steps.len() <= 2, "different seed should usually diverge");
    }

    #[test]
    fn oracle_greedy_play_recovers_the_square() {
        // 4 corner keypoints, square ground truth, oracle model, T = 0
        let image = Arc::new(GrayImage::new(32, 32, 128));
        let pts = vec![
            Point { x: 8.0, y: 8.0 },
            Point { x: 24.0, y: 8.0 },
            Point { x: 24.0, y: 24.0 },
            Point { x: 8.0, y: 24.0 },
        ];
        let (gt, _) = SpatialGraph::build(
            32,
            32,
            pts.clone(),
            vec![(0, 1), (1, 2), (2, 3), (0, 3)],
        )
        .unwrap();
        let env_cfg = EnvConfig { n_max: Some(6), ..EnvConfig::default() };
        let state = env::reset(
            image,
            Arc::new(pts),
            &[],
            Some(Arc::new(gt)),
            &env_cfg,
        )
        .unwrap();
        let model = EnvOracleModel::new(state.clone());
        let search = SearchConfig {
            n_simulations: 96,
            exploration_fraction: 0.0,
            ..SearchConfig::default()
        };
        let (steps, end) = play_episode(&model, state, &search, Some(0.0), 5).unwrap();
        let ret: f64 = steps.iter().map(|s| s.reward).sum();
        assert!(ret >= 0.95, "oracle greedy return {ret}");
        assert!(end.cached_score >= 0.95);
    }

    #[test]
    fn reanalyze_refreshes_targets_but_not_actions() {
        let (scene, cfg) = tiny_train_scene(9);
        let params = ModelParams::init(&cfg.dims, 3).unwrap();
        let env_cfg = cfg.env_config();
        let search = SearchConfig { n_simulations: 8, ..SearchConfig::default() };
        let ep = self_play(&params, &scene, &env_cfg, &search, None, false, 21).unwrap();
        let actions: Vec<u32> = ep.steps.iter().map(|s| s.action).collect();
        let rewards: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();

        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push(ep.clone()).unwrap();
        assert_eq!(buf.reanalyze(0.0, &params, &search, 99).unwrap(), 0);
        let untouched: Vec<f64> = buf.episode(0).steps.iter().map(|s| s.root_value).collect();
        assert_eq!(
            untouched,
            ep.steps.iter().map(|s| s.root_value).collect::<Vec<_>>()
        );

        // fresh params → refreshed targets; actions and rewards pinned
        let fresh = ModelParams::init(&cfg.dims, 77).unwrap();
        assert_eq!(buf.reanalyze(1.0, &fresh, &search, 99).unwrap(), 1);
        let got_actions: Vec<u32> = buf.episode(0).steps.iter().map(|s| s.action).collect();
        let got_rewards: Vec<f64> = buf.episode(0).steps.iter().map(|s| s.reward).collect();
        assert_eq!(got_actions, actions);
        assert_eq!(got_rewards, rewards);

        // deterministic: the same params and seed give identical targets
        let mut buf2 = ReplayBuffer::new(4).unwrap();
        buf2.push(ep).unwrap();
        buf2.reanalyze(1.0, &fresh, &search, 99).unwrap();
        for (a, b) in buf.episode(0).steps.iter().zip(buf2.episode(0).steps.iter()) {
            assert_eq!(a.visit_dist, b.visit_dist);
            assert_eq!(a.root_value.to_bits(), b.root_value.to_bits());
        }

        // spot check: stored values equal a fresh search replayed by hand
        let mut rng = rng::stream(99, salt::REANALYZE);
        let mut order = vec![0usize];
        order.shuffle(&mut rng);
        let model = NetModel::new(&fresh, &buf.episode(0).scene, buf.episode(0).n_max);
        let res = run_search(&model, &[], &search, rng.gen()).unwrap();
        assert_eq!(buf.episode(0).steps[0].root_value.to_bits(), res.root_value.to_bits());
    }

    #[test]
    fn surrogate_target_matches_gt_when_subdivision_is_a_noop() {
        let mut cfg = TrainConfig::tiny(4);
        cfg.keypoint_max_edge_len = 1e6; // subdivision keeps gt unchanged
        let synth = generate_scene(4, &cfg.scene).unwrap();
        let scene = make_train_scene(&synth, &cfg).unwrap();
        assert_eq!(scene.surrogate.edges, scene.gt.edges);
        let params = ModelParams::init(&cfg.dims, 3).unwrap();
        let env_cfg = cfg.env_config();
        let search = SearchConfig { n_simulations: 4, ..SearchConfig::default() };
        let a = self_play(&params, &scene, &env_cfg, &search, None, true, 8).unwrap();
        let b = self_play(&params, &scene, &env_cfg, &search, None, false, 8).unwrap();
        let ra: Vec<u64> = a.steps.iter().map(|s| s.reward.to_bits()).collect();
        let rb: Vec<u64> = b.steps.iter().map(|s| s.reward.to_bits()).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn train_smoke_runs_and_logs() {
        let mut cfg = TrainConfig::tiny(5);
        cfg.total_steps = 4;
        cfg.pretrain_steps = 2;
        cfg.batch_size = 4;
        cfg.search.n_simulations = 4;
        cfg.n_max = Some(6);
        cfg.min_replay_episodes = 1;
        cfg.eval_every = 2;
        cfg.eval_scenes = 1;
        let mut rows = Vec::new();
        let params = train(&cfg, |s| rows.push(*s)).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..2].iter().all(|r| r.losses.is_some() && r.eval_return.is_none()));
        assert!(rows[2..].iter().any(|r| r.losses.is_some()));
        assert_eq!(rows.iter().filter(|r| r.eval_return.is_some()).count(), 2);
        for (_, t) in params.tensors() {
            assert!(t.data.iter().all(|v| v.is_finite()));
        }
        let row = rows[0].csv_row();
        assert_eq!(row.split(',').count(), 5);
        assert!(row.ends_with(','), "pretrain rows have no eval field: {row}");
    }

    #[test]
    fn scene_pool_cycles_deterministically_and_difficulty_cap_filters() {
        let mut cfg = TrainConfig::tiny(9);
        cfg.total_steps = 3;
        cfg.pretrain_steps = 1;
        cfg.batch_size = 4;
        cfg.search.n_simulations = 4;
        cfg.n_max = Some(6);
        cfg.min_replay_episodes = 1;
        cfg.scene_pool = Some(2);
        cfg.max_difficulty = Some(0.9);
        let a = train(&cfg, |_| {}).unwrap();
        let b = train(&cfg, |_| {}).unwrap();
        for ((n, ta), (_, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{n} differs between pooled runs");
            }
        }

        // a cap no scene can meet is reported, not looped forever
        cfg.scene_pool = None;
        cfg.max_difficulty = Some(0.0);
        cfg.scene.vegetation_density = 1.0;
        assert!(train(&cfg, |_| {}).is_err());

        cfg.scene_pool = Some(0);
        assert!(cfg.validate().is_err());
        cfg.scene_pool = None;
        cfg.max_difficulty = Some(1.5);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn held_out_scenes_are_stable_and_respect_the_difficulty_cap() {
        let mut cfg = TrainConfig::tiny(11);
        cfg.eval_scenes = 3;
        let a = held_out_scenes(&cfg).unwrap();
        let b = held_out_scenes(&cfg).unwrap();
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.image.pixels, sb.image.pixels);
            assert_eq!(sa.gt.edges, sb.gt.edges);
        }
        // a tight cap at high density forces redraws, so the draws change
        cfg.scene.vegetation_density = 0.5;
        let uncapped = held_out_scenes(&cfg).unwrap();
        cfg.max_difficulty = Some(0.35);
        let capped = held_out_scenes(&cfg).unwrap();
        assert!(
            uncapped.iter().zip(&capped).any(|(u, c)| u.image.pixels != c.image.pixels),
            "capped draws should reject at least one dense scene"
        );
    }

    #[test]
    fn parallel_workers_match_single_worker_bitwise() {
        let mut cfg = TrainConfig::tiny(6);
        cfg.total_steps = 2;
        cfg.pretrain_steps = 0;
        cfg.batch_size = 4;
        cfg.search.n_simulations = 4;
        cfg.n_max = Some(6);
        cfg.min_replay_episodes = 1;
        cfg.episodes_per_step = 2;
        let single = train(&cfg, |_| {}).unwrap();
        cfg.workers = 2;
        let multi = train(&cfg, |_| {}).unwrap();
        for ((_, a), (_, b)) in single.tensors().iter().zip(multi.tensors().iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn config_round_trips_and_defaults_from_empty_json() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.replay_capacity, 512);
        assert_eq!(cfg.batch_size, 32);
        let text = serde_json::to_string(&TrainConfig::tiny(3)).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.dims, TrainConfig::tiny(3).dims);
        assert_eq!(back.n_max, Some(12));
        let partial: TrainConfig =
            serde_json::from_str(r#"{"lr": 0.5, "search": {"n_simulations": 3}}"#).unwrap();
        assert_eq!(partial.lr, 0.5);
        assert_eq!(partial.search.n_simulations, 3);
        assert_eq!(partial.search.c1, SearchConfig::default().c1);
    }
}
