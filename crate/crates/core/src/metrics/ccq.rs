//! Pixel-level correctness / completeness / quality with Chebyshev slack.

use crate::graph::SpatialGraph;
use crate::metrics::MetricConfig;
use crate::raster::{rasterize, Mask};

/// Count of `a` pixels that have some `b` pixel within `slack` (Chebyshev).
fn matched(a: &Mask, b: &Mask, slack: i64) -> usize {
    a.iter_set()
        .filter(|&(x, y)| {
            (-slack..=slack).any(|dy| (-slack..=slack).any(|dx| b.get(x + dx, y + dy)))
        })
        .count()
}

/// Returns (correctness, completeness, quality, degenerate).
///
/// Quality follows TP_pred / (|pred| + |gt| - TP_gt) and is clamped to
/// min(correctness, completeness): the raw ratio can exceed completeness
/// when many pred pixels crowd one gt pixel, and the report guarantees the
/// ordering.
pub(crate) fn ccq(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> (f64, f64, f64, bool) {
    let gt_mask = rasterize(gt, 1);
    let pred_mask = rasterize(pred, 1);
    let n_gt = gt_mask.count_set();
    let n_pred = pred_mask.count_set();
    if n_gt == 0 && n_pred == 0 {
        return (1.0, 1.0, 1.0, true);
    }
    if n_gt == 0 || n_pred == 0 {
        return (0.0, 0.0, 0.0, true);
    }
    let slack = cfg.ccq_slack_px.floor().max(0.0) as i64;
    let tp_pred = matched(&pred_mask, &gt_mask, slack);
    let tp_gt = matched(&gt_mask, &pred_mask, slack);
    let correctness = tp_pred as f64 / n_pred as f64;
    let completeness = tp_gt as f64 / n_gt as f64;
    let quality = (tp_pred as f64 / (n_pred + n_gt - tp_gt) as f64)
        .min(correctness)
        .min(completeness);
    (correctness, completeness, quality, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Point;
    use approx::assert_abs_diff_eq;

    fn hline(width: u32, y: f64, x0: f64, x1: f64) -> SpatialGraph {
        SpatialGraph::build(width, 32, vec![Point::new(x0, y), Point::new(x1, y)], vec![(0, 1)])
            .unwrap()
            .0
    }

    #[test]
    fn identical_graphs_are_perfect() {
        let g = hline(32, 5.0, 2.0, 28.0);
        let (c, m, q, degenerate) = ccq(&g, &g, &MetricConfig::default());
        assert_eq!((c, m, q), (1.0, 1.0, 1.0));
        assert!(!degenerate);
    }

    #[test]
    fn parallel_offset_at_exactly_slack_is_fully_correct() {
        let gt = hline(32, 5.0, 2.0, 28.0);
        let pred = hline(32, 9.0, 2.0, 28.0); // 4 px below, Chebyshev 4 = slack
        let (c, m, _, _) = ccq(&gt, &pred, &MetricConfig::default());
        assert_eq!(c, 1.0);
        assert_eq!(m, 1.0);
        let far = hline(32, 10.0, 2.0, 28.0); // 5 px: outside slack
        let (c, _, _, _) = ccq(&gt, &far, &MetricConfig::default());
        assert_eq!(c, 0.0);
    }

    #[test]
    fn half_coverage_gives_half_completeness() {
        let gt = hline(256, 5.0, 0.0, 199.0); // 200 pixels
        let pred = hline(256, 5.0, 0.0, 99.0); // first 100
        let cfg = MetricConfig { ccq_slack_px: 1.0, ..MetricConfig::default() };
        let (c, m, q, _) = ccq(&gt, &pred, &cfg);
        assert_eq!(c, 1.0, "nothing spurious");
        assert_abs_diff_eq!(m, 0.5, epsilon = 1.5 / 200.0); // one-pixel slack bleed
        assert!(q <= c.min(m) + 1e-12);
    }

    #[test]
    fn one_empty_side_scores_zero_and_both_empty_is_degenerate() {
        let g = hline(32, 5.0, 2.0, 28.0);
        let empty = SpatialGraph::empty(32, 32);
        assert_eq!(ccq(&g, &empty, &MetricConfig::default()), (0.0, 0.0, 0.0, true));
        assert_eq!(ccq(&empty, &g, &MetricConfig::default()), (0.0, 0.0, 0.0, true));
        assert_eq!(ccq(&empty, &empty, &MetricConfig::default()), (1.0, 1.0, 1.0, true));
    }
}
