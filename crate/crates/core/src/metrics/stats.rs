//! Descriptive statistics of a road graph.

use crate::graph::SpatialGraph;
use serde::{Deserialize, Serialize};

pub const ANGLE_BINS: usize = 18;

/// Summary counts used to compare generated road layouts against real ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    /// Histogram over [0°, 90°] of angles between consecutive road directions
    /// around each intersection (degree ≥ 3), 5° bins.
    pub junction_angle_histogram: Vec<u64>,
    /// `degree_histogram[d]` = number of vertices with degree d.
    pub degree_histogram: Vec<u64>,
    pub n_intersections: u64,
    pub total_length: f64,
    pub n_vertices: u64,
    pub n_edges: u64,
}

fn angle_bin(theta_deg: f64) -> usize {
    let folded = if theta_deg > 180.0 { 360.0 - theta_deg } else { theta_deg };
    let folded = if folded > 90.0 { 180.0 - folded } else { folded };
    ((folded / 90.0 * ANGLE_BINS as f64) as usize).min(ANGLE_BINS - 1)
}

pub fn graph_statistics(g: &SpatialGraph) -> GraphStats {
    let degrees = g.degrees();
    let adj = g.adjacency();

    let mut degree_histogram = vec![0u64; degrees.iter().copied().max().unwrap_or(0) as usize + 1];
    for &d in &degrees {
        degree_histogram[d as usize] += 1;
    }

    let mut junction_angle_histogram = vec![0u64; ANGLE_BINS];
    let mut n_intersections = 0u64;
    for v in 0..g.vertices.len() {
        if degrees[v] < 3 {
            continue;
        }
        n_intersections += 1;
        let p = g.vertices[v];
        let mut dirs: Vec<f64> = adj[v]
            .iter()
            .map(|&u| {
                let q = g.vertices[u as usize];
                (q.y - p.y).atan2(q.x - p.x).to_degrees().rem_euclid(360.0)
            })
            .collect();
        dirs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for k in 0..dirs.len() {
            let next = dirs[(k + 1) % dirs.len()];
            let gap = (next - dirs[k]).rem_euclid(360.0);
            junction_angle_histogram[angle_bin(gap)] += 1;
        }
    }

    GraphStats {
        junction_angle_histogram,
        degree_histogram,
        n_intersections,
        total_length: g.total_length(),
        n_vertices: g.vertices.len() as u64,
        n_edges: g.edges.len() as u64,
    }
}
