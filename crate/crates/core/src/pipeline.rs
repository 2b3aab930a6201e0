//! Inference plumbing: keypoint extraction from masks, tiled patch planning,
//! and sequential graph fusion across patches.

use crate::env::{self, EnvConfig};
use crate::geom::Point;
use crate::graph::SpatialGraph;
use crate::mcts::{NetModel, SearchConfig};
use crate::nets::{ModelParams, SceneTensor};
use crate::raster::{GrayImage, Mask};
use crate::skeleton::{mask_to_graph, skeletonize};
use crate::trainer::play_episode;
use crate::{Error, Result};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// keypoint extraction

/// Threshold a mask image and distill it into keypoints plus seed edges:
/// skeletonize, trace the skeleton into a graph, simplify, subdivide long
/// edges, and drop tiny fragments. Errors when nothing survives.
pub fn extract_keypoints(
    mask_image: &GrayImage,
    threshold: u8,
    rdp_epsilon: f64,
    max_edge_len: f64,
    prune_min_len: f64,
) -> Result<(Vec<Point>, Vec<(u32, u32)>)> {
    let mask = Mask::from_gray(mask_image, threshold);
    if mask.count_set() == 0 {
        return Err(Error::validation("mask is empty after thresholding"));
    }
    let graph = mask_to_graph(&skeletonize(&mask))
        .rdp_simplify(rdp_epsilon)?
        .subdivide_edges(max_edge_len)?
        .prune(prune_min_len, false);
    // keep only vertices that still carry road structure
    let deg = graph.degrees();
    let mut remap = vec![u32::MAX; graph.vertices.len()];
    let mut keypoints = Vec::new();
    for (i, p) in graph.vertices.iter().enumerate() {
        if deg[i] > 0 {
            remap[i] = keypoints.len() as u32;
            keypoints.push(*p);
        }
    }
    if keypoints.is_empty() {
        return Err(Error::validation("no road structure above the threshold"));
    }
    let edges = graph
        .edges
        .iter()
        .map(|&(a, b)| (remap[a as usize], remap[b as usize]))
        .collect();
    Ok((keypoints, edges))
}

// ---------------------------------------------------------------------------
// tiling

/// Row-major overlapping patch grid. Interior neighbors overlap by exactly
/// `overlap`; the last patch per axis is clamped to the image edge and may
/// overlap more. Patches never exceed the image bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub patch_size: u32,
    pub overlap: u32,
    pub offsets: Vec<(u32, u32)>,
    width: u32,
    height: u32,
}

fn axis_offsets(extent: u32, patch: u32, stride: u32) -> Vec<u32> {
    if extent <= patch {
        return vec![0];
    }
    let last = extent - patch;
    let mut out: Vec<u32> = (0..).map(|i| i * stride).take_while(|&x| x < last).collect();
    out.push(last);
    out
}

impl TilePlan {
    pub fn new(width: u32, height: u32, patch_size: u32, overlap: u32) -> Result<TilePlan> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image must be nonempty"));
        }
        if patch_size == 0 {
            return Err(Error::validation("patch size must be positive"));
        }
        if overlap >= patch_size {
            return Err(Error::validation("overlap must be smaller than the patch size"));
        }
        let stride = patch_size - overlap;
        let mut offsets = Vec::new();
        for y in axis_offsets(height, patch_size, stride) {
            for x in axis_offsets(width, patch_size, stride) {
                offsets.push((x, y));
            }
        }
        Ok(TilePlan { patch_size, overlap, offsets, width, height })
    }

    /// Patch rectangle (x, y, w, h) for one offset; clamped to the image.
    pub fn rect(&self, i: usize) -> (u32, u32, u32, u32) {
        let (x, y) = self.offsets[i];
        (x, y, self.patch_size.min(self.width), self.patch_size.min(self.height))
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

pub fn crop(image: &GrayImage, x: u32, y: u32, w: u32, h: u32) -> GrayImage {
    let mut out = GrayImage::new(w, h, 0);
    for dy in 0..h {
        for dx in 0..w {
            out.set(dx as i64, dy as i64, image.get((x + dx) as i64, (y + dy) as i64));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// tiled inference with sequential fusion

/// Already-fused structure clipped to one patch, in patch-local coordinates.
#[derive(Debug, Clone, Default)]
pub struct PatchSeed {
    pub keypoints: Vec<Point>,
    pub edges: Vec<(u32, u32)>,
}

/// Produces a road graph proposal for one patch, honoring edges already
/// fixed by earlier patches. Coordinates are patch-local pixels; `rect` is
/// the patch placement (x, y, w, h) for solvers with auxiliary channels.
pub trait PatchSolver {
    fn solve(
        &self,
        patch: &GrayImage,
        rect: (u32, u32, u32, u32),
        seed: &PatchSeed,
    ) -> Result<(Vec<Point>, Vec<(u32, u32)>)>;
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Vertex-snapping radius between patch results, px.
    pub tolerance: f64,
    /// Raw union: no seeding, no snapping (the known-bad baseline).
    pub naive: bool,
    /// Components shorter than this are dropped from the final graph.
    pub prune_min_len: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { tolerance: 3.0, naive: false, prune_min_len: 8.0 }
    }
}

fn nearest_within(points: &[Point], p: Point, tol: f64) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (i, q) in points.iter().enumerate() {
        let d = p.dist(q);
        if d <= tol && best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, i as u32));
        }
    }
    best.map(|(_, i)| i)
}

/// Process patches in row-major order. Each patch is solved with the
/// already-fused edges inside it as the seed; its result is merged back by
/// snapping vertices within `tolerance` px and unioning edges. Naive mode
/// skips both, demonstrating the duplicate/over-connection failure.
pub fn infer_tiled<S: PatchSolver>(
    image: &GrayImage,
    solver: &S,
    plan: &TilePlan,
    fusion: &FusionConfig,
) -> Result<SpatialGraph> {
    let mut vertices: Vec<Point> = Vec::new();
    let mut edges: std::collections::BTreeSet<(u32, u32)> = std::collections::BTreeSet::new();
    for i in 0..plan.len() {
        let (px, py, pw, ph) = plan.rect(i);
        let patch = crop(image, px, py, pw, ph);
        let (fx, fy) = (px as f64, py as f64);
        let inside = |p: Point| {
            p.x >= fx && p.x < fx + pw as f64 && p.y >= fy && p.y < fy + ph as f64
        };
        let seed = if fusion.naive {
            PatchSeed::default()
        } else {
            let mut local = vec![u32::MAX; vertices.len()];
            let mut kps = Vec::new();
            for (vi, &p) in vertices.iter().enumerate() {
                if inside(p) {
                    local[vi] = kps.len() as u32;
                    kps.push(Point { x: p.x - fx, y: p.y - fy });
                }
            }
            let seed_edges = edges
                .iter()
                .filter(|&&(a, b)| local[a as usize] != u32::MAX && local[b as usize] != u32::MAX)
                .map(|&(a, b)| (local[a as usize], local[b as usize]))
                .collect();
            PatchSeed { keypoints: kps, edges: seed_edges }
        };
        let (pts, new_edges) = solver.solve(&patch, (px, py, pw, ph), &seed)?;
        // map patch-local results into the fused graph
        let mut map = Vec::with_capacity(pts.len());
        for p in &pts {
            let g = Point {
                x: (p.x + fx).clamp(0.0, image.width as f64),
                y: (p.y + fy).clamp(0.0, image.height as f64),
            };
            let id = if fusion.naive {
                None
            } else {
                nearest_within(&vertices, g, fusion.tolerance)
            };
            map.push(id.unwrap_or_else(|| {
                vertices.push(g);
                vertices.len() as u32 - 1
            }));
        }
        for &(a, b) in &new_edges {
            let (ga, gb) = (map[a as usize], map[b as usize]);
            if ga != gb {
                edges.insert((ga.min(gb), ga.max(gb)));
            }
        }
    }
    let (graph, _) = SpatialGraph::build(
        image.width,
        image.height,
        vertices,
        edges.into_iter().collect(),
    )?;
    Ok(graph.prune(fusion.prune_min_len, false))
}

/// Patch solver backed by a trained model: extract keypoints from the mask
/// channel (or the patch itself), merge in the seed structure, and play a
/// greedy episode on the patch image.
pub struct NetPatchSolver<'a> {
    pub params: &'a ModelParams,
    pub search: SearchConfig,
    pub env: EnvConfig,
    /// Keypoint source; extraction falls back to the patch image when absent.
    pub mask: Option<&'a GrayImage>,
    pub threshold: u8,
    pub rdp_epsilon: f64,
    pub max_edge_len: f64,
    pub prune_min_len: f64,
    /// Seed points closer than this to an extracted keypoint reuse it.
    pub merge_tolerance: f64,
}

impl<'a> NetPatchSolver<'a> {
    pub fn new(params: &'a ModelParams, search: SearchConfig, env: EnvConfig) -> Self {
        NetPatchSolver {
            params,
            search,
            env,
            mask: None,
            threshold: 128,
            rdp_epsilon: 2.0,
            max_edge_len: 40.0,
            prune_min_len: 8.0,
            merge_tolerance: 3.0,
        }
    }
}

impl PatchSolver for NetPatchSolver<'_> {
    fn solve(
        &self,
        patch: &GrayImage,
        rect: (u32, u32, u32, u32),
        seed: &PatchSeed,
    ) -> Result<(Vec<Point>, Vec<(u32, u32)>)> {
        let mask_patch = self.mask.map(|m| crop(m, rect.0, rect.1, rect.2, rect.3));
        let extracted = match extract_keypoints(
            mask_patch.as_ref().unwrap_or(patch),
            self.threshold,
            self.rdp_epsilon,
            self.max_edge_len,
            self.prune_min_len,
        ) {
            Ok((kps, _)) => kps,
            // a patch without road structure contributes nothing new
            Err(e) if e.is_validation() => Vec::new(),

            Err(e) => return Err(e),
        };
        let mut keypoints = extracted;
        let mut seed_map = Vec::with_capacity(seed.keypoints.len());
        for &p in &seed.keypoints {
            seed_map.push(match nearest_within(&keypoints, p, self.merge_tolerance) {
                Some(i) => i,
                None => {
                    keypoints.push(p);
                    keypoints.len() as u32 - 1
                }
            });
        }
        if keypoints.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let initial: Vec<(u32, u32)> = seed
            .edges
            .iter()
            .map(|&(a, b)| (seed_map[a as usize], seed_map[b as usize]))
            .filter(|&(a, b)| a != b)
            .collect();
        let search = SearchConfig { exploration_fraction: 0.0, ..self.search.clone() };
        let state = env::reset(
            Arc::new(patch.clone()),
            Arc::new(keypoints.clone()),
            &initial,
            None,
            &self.env,
        )?;
        let tensor = SceneTensor::new(patch, &keypoints, &self.params.dims);
        let model = NetModel::new(self.params, &tensor, state.n_max());
        let (_, end) = play_episode(&model, state, &search, Some(0.0), 0)?;
        let pred = end.prediction();
        Ok((keypoints, pred.edges))
    }
}
