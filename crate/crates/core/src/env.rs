//! The edge-sequence decision process.
//!
//! Keypoints are fixed for an episode; the agent emits keypoint indices two
//! at a time to form edges, or the end-of-sequence action to stop. Rewards
//! are combined-score deltas, granted when an edge completes, so episode
//! returns telescope to `sc(gt, final) − sc(gt, initial)` exactly.

use crate::geom::Point;
use crate::graph::SpatialGraph;
use crate::metrics::{self, MetricConfig};
use crate::raster::GrayImage;
use crate::{Error, Result};
use std::sync::Arc;

/// Everything that stays fixed for one episode.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Arc<GrayImage>,
    pub keypoints: Arc<Vec<Point>>,
    /// Ground truth; absent in pure-inference mode (rewards are then 0).
    pub gt: Option<Arc<SpatialGraph>>,
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    /// Edge budget N_max; `None` selects 4·|keypoints| capped at 256.
    pub n_max: Option<usize>,
    pub metric: MetricConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { n_max: None, metric: MetricConfig::default() }
    }
}

pub const N_MAX_CAP: usize = 256;

/// Immutable episode state; `step` returns a successor.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub scene: Scene,
    pub metric: Arc<MetricConfig>,
    /// Past actions. Even positions are first endpoints, odd positions
    /// second endpoints; a trailing EOS token may follow a completed edge.
    pub edge_tokens: Vec<u32>,
    pub done: bool,
    /// Last combined score of the prediction (0 without ground truth).
    pub cached_score: f64,
    n_max: usize,
}

/// Build the prediction graph induced by a token prefix: completed pairs
/// only, deduplicated; a trailing half-edge or EOS token is not an edge.
pub fn tokens_to_graph(tokens: &[u32], keypoints: &[Point], width: u32, height: u32) -> SpatialGraph {
    let n = keypoints.len() as u32;
    let edges: Vec<(u32, u32)> = tokens
        .chunks_exact(2)
        .filter(|c| c[0] < n && c[1] < n && c[0] != c[1])
        .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
        .collect();
    SpatialGraph::build(width, height, keypoints.to_vec(), edges)
        .expect("keypoints validated at reset")
        .0
}

pub fn reset(
    image: Arc<GrayImage>,
    keypoints: Arc<Vec<Point>>,
    initial_edges: &[(u32, u32)],
    gt: Option<Arc<SpatialGraph>>,
    config: &EnvConfig,
) -> Result<EnvState> {
    config.metric.validate()?;
    if keypoints.is_empty() {
        return Err(Error::validation("keypoints must be nonempty"));
    }
    let (w, h) = (image.width, image.height);
    for (i, p) in keypoints.iter().enumerate() {
        if !p.x.is_finite() || !p.y.is_finite() || p.x < 0.0 || p.y < 0.0 || p.x > w as f64 || p.y > h as f64 {
            return Err(Error::validation(format!("keypoint {i} outside the {w}x{h} canvas")));
        }
    }
    let n_max = config.n_max.unwrap_or_else(|| (4 * keypoints.len()).min(N_MAX_CAP)).max(1);
    if initial_edges.len() > n_max {
        return Err(Error::validation(format!(
            "{} initial edges exceed the edge budget {n_max}",
            initial_edges.len()
        )));
    }
    let mut edge_tokens = Vec::with_capacity(2 * initial_edges.len());
    for (k, &(i, j)) in initial_edges.iter().enumerate() {
        if i as usize >= keypoints.len() || j as usize >= keypoints.len() {
            return Err(Error::validation(format!("initial edge {k} references a missing keypoint")));
        }
        if i == j {
            return Err(Error::validation(format!("initial edge {k} is a self-loop")));
        }
        edge_tokens.push(i);
        edge_tokens.push(j);
    }
    let scene = Scene { image, keypoints, gt };
    let cached_score = match &scene.gt {
        Some(gt) => {
            let pred = tokens_to_graph(&edge_tokens, &scene.keypoints, w, h);
            metrics::combined_score(gt, &pred, &config.metric)?
        }
        None => 0.0,
    };
    Ok(EnvState {
        scene,
        metric: Arc::new(config.metric.clone()),
        edge_tokens,
        done: false,
        cached_score,
        n_max,
    })
}

impl EnvState {
    /// Current step; always equals the token count.
    pub fn t(&self) -> usize {
        self.edge_tokens.len()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Token bound: 2·N_max endpoint tokens plus the EOS token.
    pub fn t_max(&self) -> usize {
        2 * self.n_max + 1
    }

    /// Keypoint count plus the EOS action.
    pub fn n_actions(&self) -> usize {
        self.scene.keypoints.len() + 1
    }

    pub fn eos_action(&self) -> u32 {
        self.scene.keypoints.len() as u32
    }

    /// First endpoint of a half-built edge, when t is odd.
    pub fn pending_endpoint(&self) -> Option<u32> {
        if self.edge_tokens.len() % 2 == 1 && !self.done {
            self.edge_tokens.last().copied()
        } else {
            None
        }
    }

    pub fn prediction(&self) -> SpatialGraph {
        tokens_to_graph(
            &self.edge_tokens,
            &self.scene.keypoints,
            self.scene.image.width,
            self.scene.image.height,
        )
    }

    fn completed_edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edge_tokens
            .chunks_exact(2)
            .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
    }

    /// Legality mask over the `n_actions` actions.
    ///
    /// EOS is legal exactly between edges (even t). Mid-edge (odd t) the
    /// pending endpoint is illegal — no self-loops. Starting another edge
    /// is legal only while two more endpoint tokens still fit under the
    /// horizon.
    pub fn legal_actions(&self) -> Result<Vec<bool>> {
        if self.done {
            return Err(Error::validation("legal_actions on a finished episode"));
        }
        let t = self.t();
        let mut mask = vec![false; self.n_actions()];
        if t % 2 == 0 {
            mask[self.scene.keypoints.len()] = true;
            if t + 2 < self.t_max() {
                for m in mask.iter_mut().take(self.scene.keypoints.len()) {
                    *m = true;
                }
            }
        } else {
            let pending = *self.edge_tokens.last().expect("odd t") as usize;
            for (k, m) in mask.iter_mut().take(self.scene.keypoints.len()).enumerate() {
                *m = k != pending;
            }
        }
        Ok(mask)
    }

    /// Apply one action. Returns (successor, reward, done).
    ///
    /// Reward is 0 on half-edge steps, EOS and duplicate edges; completing
    /// a new edge scores the prediction against ground truth and pays the
    /// delta from the cached previous score.
    pub fn step(&self, action: u32) -> Result<(EnvState, f64, bool)> {
        if self.done {
            return Err(Error::IllegalAction { action, reason: "episode already finished".into() });
        }
        let legal = self.legal_actions()?;
        if (action as usize) >= legal.len() || !legal[action as usize] {
            let reason = if (action as usize) >= legal.len() {
                "action index out of range".to_string()
            } else if action == self.eos_action() {
                "EOS is only legal between edges".to_string()
            } else if self.t() % 2 == 1 {
                "self-loop edge".to_string()
            } else {
                "edge budget exhausted".to_string()
            };
            return Err(Error::IllegalAction { action, reason });
        }

        let mut next = self.clone();
        next.edge_tokens.push(action);

        if action == self.eos_action() {
            next.done = true;
            return Ok((next, 0.0, true));
        }
        if next.t() >= next.t_max() {
            next.done = true; // unreachable under the mask, kept as a guard
        }
        let done = next.done;
        if next.t() % 2 == 1 {
            return Ok((next, 0.0, done));
        }

        // an edge just completed
        let &[i, j] = &next.edge_tokens[next.edge_tokens.len() - 2..] else { unreachable!() };
        let edge = (i.min(j), i.max(j));
        let duplicate = self.completed_edges().any(|e| e == edge);
        if duplicate {
            return Ok((next, 0.0, done));
        }
        let reward = match &next.scene.gt {
            Some(gt) => {
                let score = metrics::combined_score(gt, &next.prediction(), &next.metric)?;
                let r = score - next.cached_score;
                next.cached_score = score;
                r
            }
            None => 0.0,
        };
        Ok((next, reward, done))
    }
}

/// Undiscounted sum of step rewards.
pub fn episode_return(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}
