//! Graph-similarity metrics.
//!
//! Everything a caller needs to compare a predicted road graph against a
//! reference: shortest-path similarity (APLS), path-length classification
//! (correct / infeasible / too-long-too-short), pixel-level
//! correctness/completeness/quality, path/junction/subgraph f1 scores, the
//! weighted combined score, and the incremental reward used by the
//! environment. All randomness (path-pair sampling) derives from
//! `MetricConfig::rng_seed`, so reports are bit-reproducible.

mod ccq;
mod junctions;
mod paths;
mod stats;
mod subgraph;

pub use paths::{snap_nodes, SnapPoint};
pub use stats::{graph_statistics, GraphStats, ANGLE_BINS};

use crate::graph::SpatialGraph;
use crate::rng::salt;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Tuning knobs shared by all metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Node-snapping radius in pixels.
    pub buffer_px: f64,
    /// Maximum number of sampled vertex pairs per direction; pairs are
    /// enumerated exhaustively when there are no more than this many.
    pub n_paths: usize,
    /// Relative path-length tolerance for "correct" classification.
    pub tlts_threshold: f64,
    /// Chebyshev pixel slack for correctness/completeness/quality.
    pub ccq_slack_px: f64,
    /// Weights over (apls, path_f1, junc_f1, subgraph_f1); nonnegative,
    /// sum 1.
    pub weights: [f64; 4],
    pub rng_seed: u64,
    /// Mean both snapping directions (default) or ground-truth→prediction
    /// only.
    pub apls_symmetric: bool,
    /// Matched junctions must also agree on degree to count as correct.
    pub junction_require_degree: bool,
    /// The canvas is cut into `subgraph_tiles`² tiles for the subgraph f1.
    pub subgraph_tiles: u32,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            buffer_px: 4.0,
            n_paths: 200,
            tlts_threshold: 0.05,
            ccq_slack_px: 4.0,
            weights: [0.35, 0.25, 0.25, 0.15],
            rng_seed: 0,
            apls_symmetric: true,
            junction_require_degree: true,
            subgraph_tiles: 8,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::validation("n_paths must be at least 1"));
        }
        if !(self.tlts_threshold > 0.0) {
            return Err(Error::validation("tlts_threshold must be positive"));
        }
        if !self.buffer_px.is_finite() || self.buffer_px < 0.0 {
            return Err(Error::validation("buffer_px must be finite and nonnegative"));
        }
        if !self.ccq_slack_px.is_finite() || self.ccq_slack_px < 0.0 {
            return Err(Error::validation("ccq_slack_px must be finite and nonnegative"));
        }
        if self.subgraph_tiles == 0 {
            return Err(Error::validation("subgraph_tiles must be at least 1"));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("weights must be finite and nonnegative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub(crate) fn f1(pre: f64, rec: f64) -> f64 {
    if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    }
}

/// Flat report with every metric; serializes to a single JSON object / CSV
/// row. `degenerate` is set when any sub-metric hit a degenerate input
/// (too few vertices, no junctions anywhere, blank rasters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub apls: f64,
    pub tlts_correct: f64,
    pub tlts_infeasible: f64,
    pub tlts_2l2s: f64,
    pub ccq_correctness: f64,
    pub ccq_completeness: f64,
    pub ccq_quality: f64,
    pub path_pre: f64,
    pub path_rec: f64,
    pub path_f1: f64,
    pub junc_pre: f64,
    pub junc_rec: f64,
    pub junc_f1: f64,
    pub subgraph_f1: f64,
    pub combined: f64,
    pub degenerate: bool,
    pub junction_require_degree: bool,
}

/// The four combined-score components plus the directed path stats they
/// came from; shared by `evaluate` and `combined_score` so the latter can
/// skip rasterization.
struct CoreEval {
    fwd: paths::DirectedStats,
    rev: paths::DirectedStats,
    apls: f64,
    path_pre: f64,
    path_rec: f64,
    path_f1: f64,
    junc: (f64, f64, f64, bool),
    sub: (f64, bool),
    combined: f64,
}

/// Weighted mean over the non-degenerate components, renormalized by the
/// surviving weight mass. Dropping degenerate components keeps identity at
/// exactly 1 for junction-free graphs and an empty prediction at exactly 0.
fn combine(parts: &[(f64, f64, bool)]) -> f64 {
    let (mut acc, mut wsum) = (0.0, 0.0);
    for &(w, s, degenerate) in parts {
        if !degenerate {
            acc += w * s;
            wsum += w;
        }
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        0.0
    }
}

fn core_eval(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> CoreEval {
    let fwd = paths::directed_stats(gt, pred, cfg, salt::PAIR_SAMPLE);
    let rev = paths::directed_stats(pred, gt, cfg, salt::PAIR_SAMPLE);
    let apls = if cfg.apls_symmetric {
        0.5 * (fwd.apls + rev.apls)
    } else {
        fwd.apls
    };
    let path_rec = fwd.correct;
    let path_pre = rev.correct;
    let path_f1 = f1(path_pre, path_rec);
    let junc = junctions::junction_based(gt, pred, cfg);
    let sub = subgraph::subgraph_based(gt, pred, cfg);
    let combined = combine(&[
        (cfg.weights[0], apls, fwd.degenerate),
        (cfg.weights[1], path_f1, fwd.degenerate),
        (cfg.weights[2], junc.2, junc.3),
        (cfg.weights[3], sub.0, sub.1),
    ]);
    CoreEval { fwd, rev, apls, path_pre, path_rec, path_f1, junc, sub, combined }
}

/// Compute every metric of `pred` against `gt` in one pass.
pub fn evaluate(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let core = core_eval(gt, pred, cfg);
    let (ccq_c, ccq_m, ccq_q, ccq_degen) = ccq::ccq(gt, pred, cfg);
    Ok(MetricReport {
        apls: core.apls,
        tlts_correct: core.fwd.correct,
        tlts_infeasible: core.fwd.infeasible,
        tlts_2l2s: core.fwd.too_long_short,
        ccq_correctness: ccq_c,
        ccq_completeness: ccq_m,
        ccq_quality: ccq_q,
        path_pre: core.path_pre,
        path_rec: core.path_rec,
        path_f1: core.path_f1,
        junc_pre: core.junc.0,
        junc_rec: core.junc.1,
        junc_f1: core.junc.2,
        subgraph_f1: core.sub.0,
        combined: core.combined,
        degenerate: core.fwd.degenerate || core.rev.degenerate || core.junc.3 || core.sub.1 || ccq_degen,
        junction_require_degree: cfg.junction_require_degree,
    })
}

/// Average path length similarity in [0, 1].
pub fn apls(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let fwd = paths::directed_stats(gt, pred, cfg, salt::PAIR_SAMPLE);
    if !cfg.apls_symmetric {
        return Ok(fwd.apls);
    }
    let rev = paths::directed_stats(pred, gt, cfg, salt::PAIR_SAMPLE);
    Ok(0.5 * (fwd.apls + rev.apls))
}

/// Fractions of sampled ground-truth pairs classified as (correct,
/// infeasible, too-long-or-too-short); the three sum to 1.
pub fn tlts(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let fwd = paths::directed_stats(gt, pred, cfg, salt::PAIR_SAMPLE);
    Ok((fwd.correct, fwd.infeasible, fwd.too_long_short))
}

/// Pixel-level (correctness, completeness, quality).
pub fn ccq(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let (c, m, q, _) = ccq::ccq(gt, pred, cfg);
    Ok((c, m, q))
}

/// Path-level (precision, recall, f1): recall is the fraction of sampled
/// gt pairs matched in the prediction within the length tolerance,
/// precision swaps the roles.
pub fn path_based(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let fwd = paths::directed_stats(gt, pred, cfg, salt::PAIR_SAMPLE);
    let rev = paths::directed_stats(pred, gt, cfg, salt::PAIR_SAMPLE);
    let (pre, rec) = (rev.correct, fwd.correct);
    Ok((pre, rec, f1(pre, rec)))
}

/// Junction-level (precision, recall, f1).
pub fn junction_based(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let (pre, rec, f, _) = junctions::junction_based(gt, pred, cfg);
    Ok((pre, rec, f))
}

/// Tile-occupancy f1.
pub fn subgraph_based(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(subgraph::subgraph_based(gt, pred, cfg).0)
}

/// Weighted combination of apls, path f1, junction f1 and subgraph f1.
pub fn combined_score(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(core_eval(gt, pred, cfg).combined)
}

/// Score delta from replacing `prev_pred` with `new_pred`. Both sides use
/// the same seed, so rewards over an episode telescope exactly to
/// final score − initial score.
pub fn incremental_reward(
    gt: &SpatialGraph,
    prev_pred: &SpatialGraph,
    new_pred: &SpatialGraph,
    cfg: &MetricConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(core_eval(gt, new_pred, cfg).combined - core_eval(gt, prev_pred, cfg).combined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::Point;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_connected(seed: u64, n: usize) -> SpatialGraph {
        let mut rng = rng::stream(seed, 0xBEEF);
        let mut vertices: Vec<Point> = Vec::with_capacity(n);
        while vertices.len() < n {
            let p = Point::new(rng.gen_range(5.0..95.0), rng.gen_range(5.0..95.0));
            if vertices.iter().all(|q| q.dist(&p) > 3.0) {
                vertices.push(p);
            }
        }
        let mut edges: Vec<(u32, u32)> = (1..n as u32)
            .map(|v| (rng.gen_range(0..v), v))
            .collect();
        for _ in 0..n / 3 {
            let a = rng.gen_range(0..n as u32);
            let b = rng.gen_range(0..n as u32);
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        SpatialGraph::build(100, 100, vertices, edges).unwrap().0
    }

    #[test]
    fn default_config_is_valid() {
        MetricConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = MetricConfig::default();
        c.n_paths = 0;
        assert!(c.validate().is_err());
        let mut c = MetricConfig::default();
        c.tlts_threshold = 0.0;
        assert!(c.validate().is_err());
        let mut c = MetricConfig::default();
        c.weights = [0.5, 0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        let mut c = MetricConfig::default();
        c.weights = [1.2, -0.2, 0.0, 0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn f1_is_harmonic_and_zero_safe() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_abs_diff_eq!(f1(1.0, 0.75), 2.0 * 0.75 / 1.75, epsilon = 1e-15);
    }

    #[test]
    fn combine_matches_hand_weighted_sum() {
        let c = combine(&[
            (0.35, 0.8, false),
            (0.25, 0.6, false),
            (0.25, 0.4, false),
            (0.15, 1.0, false),
        ]);
        assert_abs_diff_eq!(c, 0.68, epsilon = 1e-12);
    }

    #[test]
    fn combine_renormalizes_over_degenerate_components() {
        let c = combine(&[
            (0.35, 1.0, false),
            (0.25, 1.0, false),
            (0.25, 0.3, true),
            (0.15, 1.0, false),
        ]);
        assert_eq!(c, 1.0);
        assert_eq!(combine(&[(1.0, 0.5, true)]), 0.0);
    }

    #[test]
    fn identity_is_perfect_on_random_connected_graphs() {
        let cfg = MetricConfig::default();
        for seed in 0..20 {
            let g = random_connected(seed, 4 + (seed as usize % 9));
            let r = evaluate(&g, &g, &cfg).unwrap();
            assert_eq!(r.apls, 1.0, "seed {seed}");
            assert_eq!((r.tlts_correct, r.tlts_infeasible, r.tlts_2l2s), (1.0, 0.0, 0.0));
            assert_eq!((r.ccq_correctness, r.ccq_completeness, r.ccq_quality), (1.0, 1.0, 1.0));
            assert_eq!((r.path_pre, r.path_rec, r.path_f1), (1.0, 1.0, 1.0));
            assert_eq!((r.junc_pre, r.junc_rec, r.junc_f1), (1.0, 1.0, 1.0));
            assert_eq!(r.subgraph_f1, 1.0);
            assert_eq!(r.combined, 1.0);
        }
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let cfg = MetricConfig::default();
        for seed in 0..10 {
            let g = random_connected(100 + seed, 8);
            let r = evaluate(&g, &SpatialGraph::empty(100, 100), &cfg).unwrap();
            assert_eq!(r.apls, 0.0);
            assert_eq!((r.tlts_correct, r.tlts_infeasible, r.tlts_2l2s), (0.0, 1.0, 0.0));
            assert_eq!((r.ccq_correctness, r.ccq_completeness, r.ccq_quality), (0.0, 0.0, 0.0));
            assert_eq!(r.path_f1, 0.0);
            assert_eq!(r.subgraph_f1, 0.0);
            assert_eq!(r.combined, 0.0);
            assert!(r.degenerate);
        }
    }

    #[test]
    fn report_fields_stay_in_unit_interval() {
        let cfg = MetricConfig { n_paths: 24, ..MetricConfig::default() };
        for seed in 0..15 {
            let gt = random_connected(200 + seed, 10);
            let pred = random_connected(300 + seed, 9);
            let r = evaluate(&gt, &pred, &cfg).unwrap();
            for (name, v) in [
                ("apls", r.apls),
                ("tlts_correct", r.tlts_correct),
                ("tlts_infeasible", r.tlts_infeasible),
                ("tlts_2l2s", r.tlts_2l2s),
                ("ccq_correctness", r.ccq_correctness),
                ("ccq_completeness", r.ccq_completeness),
                ("ccq_quality", r.ccq_quality),
                ("path_pre", r.path_pre),
                ("path_rec", r.path_rec),
                ("path_f1", r.path_f1),
                ("junc_pre", r.junc_pre),
                ("junc_rec", r.junc_rec),
                ("junc_f1", r.junc_f1),
                ("subgraph_f1", r.subgraph_f1),
                ("combined", r.combined),
            ] {
                assert!((0.0..=1.0).contains(&v), "{name} = {v} out of range (seed {seed})");
            }
            assert!(r.ccq_quality <= r.ccq_correctness.min(r.ccq_completeness) + 1e-15);
            assert_abs_diff_eq!(r.path_f1, f1(r.path_pre, r.path_rec), epsilon = 1e-15);
            assert_abs_diff_eq!(r.junc_f1, f1(r.junc_pre, r.junc_rec), epsilon = 1e-15);
        }
    }

    #[test]
    fn four_percent_detour_counts_as_correct() {
        let gt = SpatialGraph::build(
            300,
            300,
            vec![Point::new(10.0, 10.0), Point::new(110.0, 10.0)],
            vec![(0, 1)],
        )
        .unwrap()
        .0;
        // bend of height sqrt(204) makes the two-leg detour exactly ~104 long
        let pred = SpatialGraph::build(
            300,
            300,
            vec![
                Point::new(10.0, 10.0),
                Point::new(60.0, 10.0 + 204.0f64.sqrt()),
                Point::new(110.0, 10.0),
            ],
            vec![(0, 1), (1, 2)],
        )
        .unwrap()
        .0;
        let (correct, infeasible, tl) = tlts(&gt, &pred, &MetricConfig::default()).unwrap();
        assert_eq!((correct, infeasible, tl), (1.0, 0.0, 0.0));
    }

    #[test]
    fn apls_is_symmetric_under_argument_swap() {
        let cfg = MetricConfig { n_paths: 12, ..MetricConfig::default() };
        let a = random_connected(7, 12);
        let b = random_connected(8, 11);
        assert_eq!(apls(&a, &b, &cfg).unwrap(), apls(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn reports_are_bit_identical_across_calls() {
        let cfg = MetricConfig { n_paths: 16, ..MetricConfig::default() };
        let gt = random_connected(41, 14);
        let pred = random_connected(42, 13);
        let r1 = serde_json::to_string(&evaluate(&gt, &pred, &cfg).unwrap()).unwrap();
        let r2 = serde_json::to_string(&evaluate(&gt, &pred, &cfg).unwrap()).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn spurious_component_keeps_recall_but_costs_precision() {
        let gt = random_connected(55, 8);
        let mut vertices = gt.vertices.clone();
        let mut edges = gt.edges.clone();
        let base = vertices.len() as u32;
        vertices.push(Point::new(1.0, 1.0));
        vertices.push(Point::new(1.0, 99.0));
        vertices.push(Point::new(2.5, 50.0));
        edges.push((base, base + 2));
        edges.push((base + 1, base + 2));
        let pred = SpatialGraph::build(100, 100, vertices, edges).unwrap().0;
        let (pre, rec, _) = path_based(&gt, &pred, &MetricConfig::default()).unwrap();
        assert_eq!(rec, 1.0);
        assert!(pre < 1.0, "pre = {pre}");
    }

    #[test]
    fn reward_is_zero_for_unchanged_graph_and_nonpositive_for_spurious_edge() {
        let cfg = MetricConfig::default();
        let gt = random_connected(77, 9);
        let mut pred_edges = gt.edges.clone();
        pred_edges.pop();
        let prev = SpatialGraph::build(100, 100, gt.vertices.clone(), pred_edges.clone()).unwrap().0;
        assert_eq!(incremental_reward(&gt, &prev, &prev, &cfg).unwrap(), 0.0);

        let mut vertices = gt.vertices.clone();
        vertices.push(Point::new(1.0, 1.0));
        vertices.push(Point::new(1.0, 99.0));
        let mut edges = pred_edges;
        let base = gt.vertices.len() as u32;
        edges.push((base, base + 1));
        let spurious = SpatialGraph::build(100, 100, vertices, edges).unwrap().0;
        let r = incremental_reward(&gt, &prev, &spurious, &cfg).unwrap();
        assert!(r <= 0.0, "reward = {r}");
    }
}
