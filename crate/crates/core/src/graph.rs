//! Spatial road graphs and the operations that reshape them.
//!
//! A graph lives on a `width` x `height` pixel canvas. Vertices are 2D
//! points, edges are unordered vertex-index pairs stored normalized
//! (`i < j`) and sorted, so equal graphs compare equal and serialize to
//! identical bytes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Point;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub width: u32,
    pub height: u32,
    pub vertices: Vec<Point>,
    /// Normalized (`i < j`), lexicographically sorted, duplicate-free.
    pub edges: Vec<(u32, u32)>,
}

/// What `build` had to clean up. Inputs with nonzero counts are accepted;
/// the counts let callers warn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub duplicate_edges: usize,
    pub self_loops: usize,
}

/// A maximal chain of edges whose interior vertices all have degree 2.
///
/// `vertices` lists the chain in walk order. For a pure cycle of degree-2
/// vertices the first and last entries are the same vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoadSegment {
    pub vertices: Vec<u32>,
}

impl RoadSegment {
    pub fn is_loop(&self) -> bool {
        self.vertices.len() > 2 && self.vertices.first() == self.vertices.last()
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.vertices
            .windows(2)
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }

    pub fn length(&self, graph: &SpatialGraph) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| graph.vertices[w[0] as usize].dist(&graph.vertices[w[1] as usize]))
            .sum()
    }
}

/// Coordinates are kept on a 1e-6 grid so the JSON form (at most six
/// decimal places) is lossless.
fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl SpatialGraph {
    pub fn empty(width: u32, height: u32) -> Self {
        SpatialGraph {
            width,
            height,
            vertices: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Validates and normalizes. Self-loops and duplicate edges are dropped
    /// and counted; out-of-range indices or coordinates are errors that name
    /// the offending element.
    pub fn build(
        width: u32,
        height: u32,
        vertices: Vec<Point>,
        edges: Vec<(u32, u32)>,
    ) -> Result<(Self, BuildReport)> {
        let n = vertices.len();
        for (i, v) in vertices.iter().enumerate() {
            if !v.x.is_finite() || !v.y.is_finite() {
                return Err(Error::validation(format!(
                    "vertex {i} has non-finite coordinates ({}, {})",
                    v.x, v.y
                )));
            }
            if v.x < 0.0 || v.y < 0.0 || v.x > width as f64 || v.y > height as f64 {
                return Err(Error::validation(format!(
                    "vertex {i} at ({}, {}) outside canvas {width}x{height}",
                    v.x, v.y
                )));
            }
        }
        let vertices: Vec<Point> = vertices
            .into_iter()
            .map(|p| Point::new(quantize(p.x), quantize(p.y)))
            .collect();

        let mut report = BuildReport::default();
        let mut normalized = Vec::with_capacity(edges.len());
        for (k, &(i, j)) in edges.iter().enumerate() {
            if i as usize >= n || j as usize >= n {
                return Err(Error::validation(format!(
                    "edge {k} = ({i}, {j}) references a vertex outside 0..{n}"
                )));
            }
            if i == j {
                report.self_loops += 1;
                continue;
            }
            normalized.push((i.min(j), i.max(j)));
        }
        normalized.sort_unstable();
        let before = normalized.len();
        normalized.dedup();
        report.duplicate_edges = before - normalized.len();

        Ok((
            SpatialGraph {
                width,
                height,
                vertices,
                edges: normalized,
            },
            report,
        ))
    }

    pub fn has_edge(&self, i: u32, j: u32) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).is_ok()
    }

    /// Neighbor lists sorted by vertex index.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(i, j) in &self.edges {
            adj[i as usize].push(j as usize);
            adj[j as usize].push(i as usize);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.vertices.len()];
        for &(i, j) in &self.edges {
            deg[i as usize] += 1;
            deg[j as usize] += 1;
        }
        deg
    }

    pub fn vertex_degree(&self, index: usize) -> Result<usize> {
        if index >= self.vertices.len() {
            return Err(Error::validation(format!(
                "vertex index {index} out of range 0..{}",
                self.vertices.len()
            )));
        }
        Ok(self
            .edges
            .iter()
            .filter(|&&(i, j)| i as usize == index || j as usize == index)
            .count())
    }

    pub fn edge_length(&self, e: (u32, u32)) -> f64 {
        self.vertices[e.0 as usize].dist(&self.vertices[e.1 as usize])
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|&e| self.edge_length(e)).sum()
    }

    /// Connected-component id per vertex (isolated vertices get their own).
    pub fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; self.vertices.len()];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.vertices.len() {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &u in &adj[v] {
                    if comp[u] == usize::MAX {
                        comp[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    /// Decomposes the edge set into road segments. Every edge lands in
    /// exactly one segment. Chains are walked from vertices of degree != 2;
    /// what remains are pure degree-2 cycles, anchored at their smallest
    /// vertex index so the result is deterministic.
    pub fn road_segments(&self) -> Vec<RoadSegment> {
        let adj = self.adjacency();
        let deg: Vec<usize> = adj.iter().map(|a| a.len()).collect();
        let mut used: BTreeSet<(u32, u32)> = BTreeSet::new();
        let mut segments = Vec::new();

        let norm = |a: usize, b: usize| (a.min(b) as u32, a.max(b) as u32);

        for v in 0..self.vertices.len() {
            if deg[v] == 2 {
                continue;
            }
            for &u in &adj[v] {
                if used.contains(&norm(v, u)) {
                    continue;
                }
                let mut chain = vec![v as u32];
                let (mut prev, mut cur) = (v, u);
                used.insert(norm(prev, cur));
                chain.push(cur as u32);
                while deg[cur] == 2 {
                    let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
                    used.insert(norm(cur, next));
                    chain.push(next as u32);
                    prev = cur;
                    cur = next;
                }
                segments.push(RoadSegment { vertices: chain });
            }
        }

        // leftover edges are cycles where every vertex has degree 2
        for &(i, j) in &self.edges {
            if used.contains(&(i, j)) {
                continue;
            }
            let anchor = i as usize; // i < j and edges are sorted, so this is the cycle minimum
            let mut chain = vec![anchor as u32];
            let (mut prev, mut cur) = (anchor, adj[anchor][0]);
            used.insert(norm(prev, cur));
            chain.push(cur as u32);
            while cur != anchor {
                let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
                used.insert(norm(cur, next));
                chain.push(next as u32);
                prev = cur;
                cur = next;
            }
            segments.push(RoadSegment { vertices: chain });
        }

        segments
    }

    /// Splits every edge longer than `max_len` into equal pieces. New
    /// vertices are appended in edge order; original indices are unchanged.
    pub fn subdivide_edges(&self, max_len: f64) -> Result<SpatialGraph> {
        if !(max_len > 0.0) {
            return Err(Error::validation(format!("max_len must be positive, got {max_len}")));
        }
        let mut vertices = self.vertices.clone();
        let mut edges = Vec::with_capacity(self.edges.len());
        for &(i, j) in &self.edges {
            let a = self.vertices[i as usize];
            let b = self.vertices[j as usize];
            let len = a.dist(&b);
            let pieces = (len / max_len).ceil().max(1.0) as usize;
            if pieces <= 1 {
                edges.push((i, j));
                continue;
            }
            let mut prev = i;
            for k in 1..pieces {
                let t = k as f64 / pieces as f64;
                vertices.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
                let idx = (vertices.len() - 1) as u32;
                edges.push((prev, idx));
                prev = idx;
            }
            edges.push((prev, j));
        }
        Ok(SpatialGraph::build(self.width, self.height, vertices, edges)?.0)
    }

    /// Drops edges of weak components whose total edge length is below
    /// `min_component_len`, then (optionally, one pass) every road segment
    /// that ends in a degree-1 vertex. Vertices always survive so downstream
    /// consumers keep the full keypoint set.
    pub fn prune(&self, min_component_len: f64, remove_dead_ends: bool) -> SpatialGraph {
        let comp = self.components();
        let n_comp = comp.iter().max().map_or(0, |m| m + 1);
        let mut comp_len = vec![0.0f64; n_comp];
        for &e in &self.edges {
            comp_len[comp[e.0 as usize]] += self.edge_length(e);
        }
        let kept: Vec<(u32, u32)> = self
            .edges
            .iter()
            .copied()
            .filter(|e| comp_len[comp[e.0 as usize]] >= min_component_len)
            .collect();
        let g = SpatialGraph {
            width: self.width,
            height: self.height,
            vertices: self.vertices.clone(),
            edges: kept,
        };
        if !remove_dead_ends {
            return g;
        }
        let deg = g.degrees();
        let mut drop: BTreeSet<(u32, u32)> = BTreeSet::new();
        for seg in g.road_segments() {
            let first = *seg.vertices.first().unwrap() as usize;
            let last = *seg.vertices.last().unwrap() as usize;
            if deg[first] == 1 || deg[last] == 1 {
                drop.extend(seg.edges());
            }
        }
        SpatialGraph {
            edges: g.edges.iter().copied().filter(|e| !drop.contains(e)).collect(),
            ..g
        }
    }

    /// Ramer-Douglas-Peucker on each road segment. Segment endpoints (and
    /// therefore every junction) always survive; only interior degree-2
    /// vertices can be dropped. Zero tolerance is a no-op by definition.
    pub fn rdp_simplify(&self, epsilon: f64) -> Result<SpatialGraph> {
        if !(epsilon >= 0.0) {
            return Err(Error::validation(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if epsilon == 0.0 {
            return Ok(self.clone());
        }

        let mut keep = vec![false; self.vertices.len()];
        // vertices not interior to any segment (isolated, junctions) survive
        let deg = self.degrees();
        for (v, &d) in deg.iter().enumerate() {
            if d != 2 {
                keep[v] = true;
            }
        }

        let segments = self.road_segments();
        let mut seg_chains: Vec<Vec<u32>> = Vec::with_capacity(segments.len());
        for seg in &segments {
            let pts: Vec<Point> = seg
                .vertices
                .iter()
                .map(|&v| self.vertices[v as usize])
                .collect();
            let mut keep_local = vec![false; pts.len()];
            keep_local[0] = true;
            *keep_local.last_mut().unwrap() = true;
            if seg.is_loop() {
                // split a closed ring at the point farthest from the anchor,
                // then simplify both halves
                let far = (1..pts.len() - 1)
                    .max_by(|&a, &b| {
                        pts[0].dist(&pts[a]).partial_cmp(&pts[0].dist(&pts[b])).unwrap()
                    })
                    .unwrap_or(0);
                keep_local[far] = true;
                rdp_mark(&pts, 0, far, epsilon, &mut keep_local);
                rdp_mark(&pts, far, pts.len() - 1, epsilon, &mut keep_local);
                // a ring must keep at least three distinct vertices
                if keep_local.iter().filter(|k| **k).count() <= 3 {
                    let extra = (1..pts.len() - 1).filter(|&i| i != far).max_by(|&a, &b| {
                        let da = crate::geom::point_line_distance(pts[a], pts[0], pts[far]);
                        let db = crate::geom::point_line_distance(pts[b], pts[0], pts[far]);
                        da.partial_cmp(&db).unwrap()
                    });
                    if let Some(extra) = extra {
                        keep_local[extra] = true;
                    }
                }
            } else {
                rdp_mark(&pts, 0, pts.len() - 1, epsilon, &mut keep_local);
            }
            let chain: Vec<u32> = seg
                .vertices
                .iter()
                .zip(&keep_local)
                .filter(|(_, k)| **k)
                .map(|(&v, _)| v)
                .collect();
            for &v in &chain {
                keep[v as usize] = true;
            }
            seg_chains.push(chain);
        }

        // compact the vertex list and remap edges
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        for (v, &k) in keep.iter().enumerate() {
            if k {
                remap[v] = vertices.len() as u32;
                vertices.push(self.vertices[v]);
            }
        }
        let mut edges = Vec::new();
        for chain in &seg_chains {
            for w in chain.windows(2) {
                edges.push((remap[w[0] as usize], remap[w[1] as usize]));
            }
        }
        Ok(SpatialGraph::build(self.width, self.height, vertices, edges)?.0)
    }

    // ---- JSON form ----

    /// Deterministic writer: integers where exact, otherwise up to six
    /// decimal places with trailing zeros trimmed. Combined with coordinate
    /// quantization in `build`, write -> read -> write is byte-stable.
    pub fn to_json_string(&self) -> String {
        fn coord(v: f64) -> String {
            let mut s = format!("{:.6}", v);
            if s.contains('.') {
                while s.ends_with('0') {
                    s.pop();
                }
                if s.ends_with('.') {
                    s.pop();
                }
            }
            if s == "-0" {
                s = "0".into();
            }
            s
        }
        let mut out = String::new();
        out.push_str(&format!("{{\"width\":{},\"height\":{},\"vertices\":[", self.width, self.height));
        for (i, v) in self.vertices.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("[{},{}]", coord(v.x), coord(v.y)));
        }
        out.push_str("],\"edges\":[");
        for (i, &(a, b)) in self.edges.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("[{a},{b}]"));
        }
        out.push_str("]}");
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct File {
            width: u32,
            height: u32,
            vertices: Vec<[f64; 2]>,
            edges: Vec<[u32; 2]>,
        }
        let f: File = serde_json::from_str(s)
            .map_err(|e| Error::validation(format!("graph json: {e}")))?;
        let vertices = f.vertices.iter().map(|v| Point::new(v[0], v[1])).collect();
        let edges = f.edges.iter().map(|e| (e[0], e[1])).collect();
        Ok(SpatialGraph::build(f.width, f.height, vertices, edges)?.0)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_string().as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }
}

/// Marks interior points deviating from the chord by more than `epsilon`.
fn rdp_mark(pts: &[Point], lo: usize, hi: usize, epsilon: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let (mut imax, mut dmax) = (lo, 0.0f64);
    for i in lo + 1..hi {
        let d = crate::geom::point_line_distance(pts[i], pts[lo], pts[hi]);
        if d > dmax {
            imax = i;
            dmax = d;
        }
    }
    if dmax > epsilon {
        keep[imax] = true;
        rdp_mark(pts, lo, imax, epsilon, keep);
        rdp_mark(pts, imax, hi, epsilon, keep);
    }
}
