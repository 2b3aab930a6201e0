//! Tile-grid subgraph comparison.

use crate::geom::clipped_length;
use crate::graph::SpatialGraph;
use crate::metrics::MetricConfig;

const LEN_EPS: f64 = 1e-9;

fn tile_lengths(g: &SpatialGraph, w: f64, h: f64, tiles: u32) -> Vec<f64> {
    let n = tiles as usize;
    let (tw, th) = (w / tiles as f64, h / tiles as f64);
    let mut out = vec![0.0; n * n];
    for &(i, j) in &g.edges {
        let a = g.vertices[i as usize];
        let b = g.vertices[j as usize];
        // only tiles the segment's bounding box touches can contribute
        let tx0 = ((a.x.min(b.x) / tw).floor().max(0.0) as usize).min(n - 1);
        let tx1 = ((a.x.max(b.x) / tw).floor().max(0.0) as usize).min(n - 1);
        let ty0 = ((a.y.min(b.y) / th).floor().max(0.0) as usize).min(n - 1);
        let ty1 = ((a.y.max(b.y) / th).floor().max(0.0) as usize).min(n - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                out[ty * n + tx] += clipped_length(
                    a,
                    b,
                    tx as f64 * tw,
                    ty as f64 * th,
                    (tx + 1) as f64 * tw,
                    (ty + 1) as f64 * th,
                );
            }
        }
    }
    out
}

/// Returns (f1, degenerate). The canvas is split into a `tiles` x `tiles`
/// grid; a tile is a true positive when both graphs put road in it and the
/// lengths agree within 2x the TLTS threshold (relative to ground truth).
pub(crate) fn subgraph_based(gt: &SpatialGraph, pred: &SpatialGraph, cfg: &MetricConfig) -> (f64, bool) {
    let w = gt.width.max(pred.width) as f64;
    let h = gt.height.max(pred.height) as f64;
    let lg = tile_lengths(gt, w, h, cfg.subgraph_tiles);
    let lp = tile_lengths(pred, w, h, cfg.subgraph_tiles);

    let (mut tp, mut n_gt, mut n_pred) = (0usize, 0usize, 0usize);
    for (g, p) in lg.iter().zip(&lp) {
        let has_gt = *g > LEN_EPS;
        let has_pred = *p > LEN_EPS;
        n_gt += has_gt as usize;
        n_pred += has_pred as usize;
        if has_gt && has_pred && (p - g).abs() / g <= 2.0 * cfg.tlts_threshold {
            tp += 1;
        }
    }
    if n_gt == 0 && n_pred == 0 {
        return (1.0, true);
    }
    let pre = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let rec = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    (super::f1(pre, rec), false)
}
