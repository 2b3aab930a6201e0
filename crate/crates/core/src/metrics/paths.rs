//! Shortest-path metric machinery: node snapping, split-vertex injection,
//! Dijkstra, and seeded pair sampling shared by APLS / TLTS / path scores.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::geom::{project_onto_segment, Point};
use crate::graph::SpatialGraph;
use crate::metrics::MetricConfig;
use crate::rng;

/// Nearest point on any target edge for one source vertex.
#[derive(Debug, Clone, Copy)]
pub struct SnapPoint {
    pub point: Point,
    pub edge: usize,
    pub t: f64,
    pub distance: f64,
}

/// For each source vertex, its projection onto the target graph if one
/// exists within `buffer_px`.
pub fn snap_nodes(
    source: &SpatialGraph,
    target: &SpatialGraph,
    buffer_px: f64,
) -> Vec<(usize, Option<Point>)> {
    snap_details(source, target, buffer_px)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i, s.map(|s| s.point)))
        .collect()
}

pub(crate) fn snap_details(
    source: &SpatialGraph,
    target: &SpatialGraph,
    buffer_px: f64,
) -> Vec<Option<SnapPoint>> {
    source
        .vertices
        .iter()
        .map(|&p| {
            let mut best: Option<SnapPoint> = None;
            for (e, &(i, j)) in target.edges.iter().enumerate() {
                let a = target.vertices[i as usize];
                let b = target.vertices[j as usize];
                let (t, q, d) = project_onto_segment(p, a, b);
                if d <= buffer_px && best.map_or(true, |s| d < s.distance) {
                    best = Some(SnapPoint { point: q, edge: e, t, distance: d });
                }
            }
            best
        })
        .collect()
}

/// Target graph with snapped projections injected as degree-2 split
/// vertices, ready for path queries.
pub(crate) struct AugmentedTarget {
    #[allow(dead_code)] // inspected by tests
    pub points: Vec<Point>,
    pub adj: Vec<Vec<(usize, f64)>>,
    /// source vertex -> node id in the augmented graph
    pub node_of_source: Vec<Option<usize>>,
}

pub(crate) fn augment(target: &SpatialGraph, snaps: &[Option<SnapPoint>]) -> AugmentedTarget {
    const T_EPS: f64 = 1e-9;
    let mut points: Vec<Point> = target.vertices.clone();
    let mut node_of_source = vec![None; snaps.len()];

    // group snap points per edge, deduping along the parameter
    let mut per_edge: Vec<Vec<(f64, usize)>> = vec![Vec::new(); target.edges.len()]; // (t, node)
    for (src, snap) in snaps.iter().enumerate() {
        let Some(s) = snap else { continue };
        let (i, j) = target.edges[s.edge];
        let node = if s.t <= T_EPS {
            i as usize
        } else if s.t >= 1.0 - T_EPS {
            j as usize
        } else if let Some(&(_, existing)) = per_edge[s.edge]
            .iter()
            .find(|(t, _)| (t - s.t).abs() <= T_EPS)
        {
            existing
        } else {
            points.push(s.point);
            per_edge[s.edge].push((s.t, points.len() - 1));
            points.len() - 1
        };
        node_of_source[src] = Some(node);
    }

    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); points.len()];
    let connect = |a: usize, b: usize, adj: &mut Vec<Vec<(usize, f64)>>, pts: &[Point]| {
        let w = pts[a].dist(&pts[b]);
        adj[a].push((b, w));
        adj[b].push((a, w));
    };
    for (e, &(i, j)) in target.edges.iter().enumerate() {
        let mut stops = per_edge[e].clone();
        stops.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut prev = i as usize;
        for &(_, node) in &stops {
            connect(prev, node, &mut adj, &points);
            prev = node;
        }
        connect(prev, j as usize, &mut adj, &points);
    }

    AugmentedTarget { points, adj, node_of_source }
}

#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("distances are finite")
    }
}

pub(crate) fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Reverse((OrdF64(0.0), source)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    dist
}

fn weighted_adjacency(g: &SpatialGraph) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); g.vertices.len()];
    for &(i, j) in &g.edges {
        let w = g.edge_length((i, j));
        adj[i as usize].push((j as usize, w));
        adj[j as usize].push((i as usize, w));
    }
    adj
}

/// All unordered vertex pairs with a finite path, i.e. pairs inside one
/// connected component, in lexicographic order.
fn candidate_pairs(g: &SpatialGraph) -> Vec<(usize, usize)> {
    let comp = g.components();
    let deg = g.degrees();
    let mut pairs = Vec::new();
    for i in 0..g.vertices.len() {
        if deg[i] == 0 {
            continue; // isolated vertices reach nothing
        }
        for j in i + 1..g.vertices.len() {
            if comp[i] == comp[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Everything directed path metrics need from one (source, target) pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DirectedStats {
    pub apls: f64,
    pub correct: f64,
    pub infeasible: f64,
    pub too_long_short: f64,
    pub degenerate: bool,
}

impl DirectedStats {
    fn degenerate() -> Self {
        DirectedStats {
            apls: 0.0,
            correct: 0.0,
            infeasible: 1.0,
            too_long_short: 0.0,
            degenerate: true,
        }
    }
}

/// Samples pairs from `source`, measures their path lengths in `source`
/// and in the snapped `target`. Pair choice depends only on the source
/// graph and the seed, never on the target, so evaluating a fixed ground
/// truth against successive predictions reuses identical pairs.
pub(crate) fn directed_stats(
    source: &SpatialGraph,
    target: &SpatialGraph,
    cfg: &MetricConfig,
    seed_salt: u64,
) -> DirectedStats {
    if source.vertices.len() < 2 {
        return DirectedStats::degenerate();
    }
    let mut pairs = candidate_pairs(source);
    if pairs.is_empty() {
        return DirectedStats::degenerate();
    }
    if pairs.len() > cfg.n_paths {
        // partial Fisher-Yates, then canonical order for stable summation
        let mut rng = rng::stream(cfg.rng_seed, seed_salt);
        for k in 0..cfg.n_paths {
            let pick = rng.gen_range(k..pairs.len());
            pairs.swap(k, pick);
        }
        pairs.truncate(cfg.n_paths);
        pairs.sort_unstable();
    }

    let snaps = snap_details(source, target, cfg.buffer_px);
    let aug = augment(target, &snaps);
    let src_adj = weighted_adjacency(source);

    let mut src_dist: Vec<Option<Vec<f64>>> = vec![None; source.vertices.len()];
    let mut aug_dist: Vec<Option<Vec<f64>>> = vec![None; source.vertices.len()];

    let (mut pen_sum, mut n_correct, mut n_infeasible) = (0.0f64, 0usize, 0usize);
    for &(i, j) in &pairs {
        let d_src = src_dist[i].get_or_insert_with(|| dijkstra(&src_adj, i));
        let p = d_src[j];
        debug_assert!(p.is_finite());

        let p_pred = match (aug.node_of_source[i], aug.node_of_source[j]) {
            (Some(si), Some(sj)) => {
                let d = aug_dist[i].get_or_insert_with(|| dijkstra(&aug.adj, si));
                let v = d[sj];
                v.is_finite().then_some(v)
            }
            _ => None,
        };

        match p_pred {
            None => {
                pen_sum += 1.0;
                n_infeasible += 1;
            }
            Some(pp) => {
                if p <= 1e-12 {
                    // coincident endpoints; correct only if the target agrees
                    if pp <= 1e-12 {
                        n_correct += 1;
                    } else {
                        pen_sum += 1.0;
                        n_infeasible += 1;
                    }
                } else {
                    let rel = (p - pp).abs() / p;
                    pen_sum += rel.min(1.0);
                    if rel <= cfg.tlts_threshold {
                        n_correct += 1;
                    }
                }
            }
        }
    }

    let n = pairs.len() as f64;
    let correct = n_correct as f64 / n;
    let infeasible = n_infeasible as f64 / n;
    DirectedStats {
        apls: 1.0 - pen_sum / n,
        correct,
        infeasible,
        too_long_short: (1.0 - correct - infeasible).max(0.0),
        degenerate: false,
    }
}
