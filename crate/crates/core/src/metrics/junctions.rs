//! Junction detection and greedy matching.

use crate::graph::SpatialGraph;
use crate::metrics::MetricConfig;

fn junction_indices(g: &SpatialGraph) -> Vec<usize> {
    g.degrees()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d >= 3)
        .map(|(i, _)| i)
        .collect()
}

/// Returns (precision, recall, f1, degenerate).
///
/// Junctions are vertices of degree >= 3, matched one-to-one by greedy
/// nearest neighbor within `buffer_px` (ties broken by smaller gt index,
/// then smaller pred index). With `junction_require_degree` a matched pair
/// only counts as correct when the degrees agree; the match still consumes
/// both junctions either way.
pub(crate) fn junction_based(
    gt: &SpatialGraph,
    pred: &SpatialGraph,
    cfg: &MetricConfig,
) -> (f64, f64, f64, bool) {
    let gt_j = junction_indices(gt);
    let pred_j = junction_indices(pred);
    if gt_j.is_empty() && pred_j.is_empty() {
        return (1.0, 1.0, 1.0, true);
    }
    if gt_j.is_empty() || pred_j.is_empty() {
        return (0.0, 0.0, 0.0, false);
    }

    let gt_deg = gt.degrees();
    let pred_deg = pred.degrees();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (a, &g) in gt_j.iter().enumerate() {
        for (b, &p) in pred_j.iter().enumerate() {
            let d = gt.vertices[g].dist(&pred.vertices[p]);
            if d <= cfg.buffer_px {
                candidates.push((d, a, b));
            }
        }
    }
    candidates.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });

    let mut gt_taken = vec![false; gt_j.len()];
    let mut pred_taken = vec![false; pred_j.len()];
    let mut correct = 0usize;
    for (_, a, b) in candidates {
        if gt_taken[a] || pred_taken[b] {
            continue;
        }
        gt_taken[a] = true;
        pred_taken[b] = true;
        if !cfg.junction_require_degree || gt_deg[gt_j[a]] == pred_deg[pred_j[b]] {
            correct += 1;
        }
    }

    let pre = correct as f64 / pred_j.len() as f64;
    let rec = correct as f64 / gt_j.len() as f64;
    (pre, rec, super::f1(pre, rec), false)
}
