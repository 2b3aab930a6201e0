//! Synthetic training scenes: perturbed-grid road networks rendered over a
//! value-noise background, with disc-shaped occluders scattered along the
//! roads. Occlusion density is the difficulty knob.

use crate::geom::Point;
use crate::graph::SpatialGraph;
use crate::raster::{rasterize, GrayImage, Mask};
use crate::rng::{self, salt};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Square canvas side in pixels.
    pub size: u32,
    /// Road lattice cells per side.
    pub grid_cells: u32,
    /// Vertex jitter as a fraction of the lattice step. Kept small so
    /// junction angles stay within the 0°/90° histogram bins.
    pub jitter: f64,
    /// Probability of keeping each non-tree lattice edge.
    pub branch_probability: f64,
    /// Occluder coverage knob in [0, 1].
    pub vegetation_density: f64,
    /// Occluder radius range in pixels.
    pub occluder_radius: (f64, f64),
    /// Rasterized road width in pixels.
    pub road_width: u32,
    pub road_shade: u8,
    /// Value-noise background range (light, so roads stand out dark).
    pub background: (u8, u8),
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            size: 300,
            grid_cells: 5,
            jitter: 0.05,
            branch_probability: 0.25,
            vegetation_density: 0.3,
            occluder_radius: (4.0, 12.0),
            road_width: 3,
            road_shade: 60,
            background: (160, 230),
        }
    }
}

impl SceneParams {
    /// Small profile for fast tests: 64 px canvas, thin roads.
    pub fn tiny() -> Self {
        SceneParams {
            size: 64,
            grid_cells: 3,
            occluder_radius: (2.0, 5.0),
            road_width: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::validation("scene size must be at least 16 px"));
        }
        if self.grid_cells < 2 {
            return Err(Error::validation("grid_cells must be at least 2"));
        }
        if !(0.0..=0.49).contains(&self.jitter) {
            return Err(Error::validation("jitter must be in [0, 0.49]"));
        }
        if !(0.0..=1.0).contains(&self.branch_probability) {
            return Err(Error::validation("branch_probability must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.vegetation_density) || !self.vegetation_density.is_finite() {
            return Err(Error::validation("vegetation_density must be in [0, 1]"));
        }
        let (lo, hi) = self.occluder_radius;
        if !(lo > 0.0 && hi >= lo && hi < self.size as f64 / 2.0) {
            return Err(Error::validation("occluder_radius must satisfy 0 < min <= max < size/2"));
        }
        if self.road_width == 0 {
            return Err(Error::validation("road_width must be positive"));
        }
        if self.background.0 > self.background.1 {
            return Err(Error::validation("background range must be (lo, hi) with lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub shade: u8,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub params: SceneParams,
    pub gt: SpatialGraph,
    pub image: GrayImage,
    pub road_mask: Mask,
    pub occlusion_mask: Mask,
    pub occluders: Vec<Occluder>,
    /// Occluded road pixels / road pixels, in [0, 1].
    pub difficulty: f64,
}

/// Perturbed lattice: random spanning tree over grid-neighbor edges plus
/// branch extras. Always connected.
pub fn generate_town(seed: u64, params: &SceneParams) -> Result<SpatialGraph> {
    params.validate()?;
    let mut rng = rng::stream(seed, salt::SCENE);
    let n = (params.grid_cells + 1) as usize;
    let step = params.size as f64 / (params.grid_cells as f64 + 2.0);
    let origin = step;
    let mut vertices = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let jx = rng.gen_range(-params.jitter..=params.jitter) * step;
            let jy = rng.gen_range(-params.jitter..=params.jitter) * step;
            vertices.push(Point {
                x: (origin + i as f64 * step + jx).clamp(1.0, params.size as f64 - 1.0),
                y: (origin + j as f64 * step + jy).clamp(1.0, params.size as f64 - 1.0),
            });
        }
    }
    let mut candidates = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let v = (j * n + i) as u32;
            if i + 1 < n {
                candidates.push((v, v + 1));
            }
            if j + 1 < n {
                candidates.push((v, v + n as u32));
            }
        }
    }
    candidates.shuffle(&mut rng);

    // Kruskal over the shuffled candidates
    let mut parent: Vec<usize> = (0..n * n).collect();
    fn find(parent: &mut Vec<usize>, mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut edges = Vec::new();
    let mut extras = Vec::new();
    for &(a, b) in &candidates {
        let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
        if ra != rb {
            parent[ra] = rb;
            edges.push((a, b));
        } else {
            extras.push((a, b));
        }
    }
    for (a, b) in extras {
        if rng.gen_bool(params.branch_probability) {
            edges.push((a, b));
        }
    }
    let (g, _) = SpatialGraph::build(params.size, params.size, vertices, edges)?;
    Ok(g)
}

/// Deterministic per-lattice-cell value in [0, 1).
fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = rng::derive(seed, (ix as u64) << 32 ^ (iy as u64) ^ 0x5eed_0000);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise over a 16 px lattice.
fn value_noise_background(seed: u64, params: &SceneParams) -> GrayImage {
    const CELL: f64 = 16.0;
    let (lo, hi) = params.background;
    let mut img = GrayImage::new(params.size, params.size, lo);
    for y in 0..params.size as i64 {
        for x in 0..params.size as i64 {
            let (fx, fy) = (x as f64 / CELL, y as f64 / CELL);
            let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let v00 = lattice_value(seed, ix, iy);
            let v10 = lattice_value(seed, ix + 1, iy);
            let v01 = lattice_value(seed, ix, iy + 1);
            let v11 = lattice_value(seed, ix + 1, iy + 1);
            let v = v00 * (1.0 - tx) * (1.0 - ty)
                + v10 * tx * (1.0 - ty)
                + v01 * (1.0 - tx) * ty
                + v11 * tx * ty;
            img.set(x, y, lo + (v * (hi - lo) as f64) as u8);
        }
    }
    img
}

fn disc_pixels(o: &Occluder, size: u32) -> Vec<(i64, i64)> {
    let r = o.radius;
    let mut px = Vec::new();
    let (x0, x1) = ((o.x - r).floor() as i64, (o.x + r).ceil() as i64);
    let (y0, y1) = ((o.y - r).floor() as i64, (o.y + r).ceil() as i64);
    for y in y0.max(0)..=y1.min(size as i64 - 1) {
        for x in x0.max(0)..=x1.min(size as i64 - 1) {
            let (dx, dy) = (x as f64 - o.x, y as f64 - o.y);
            if dx * dx + dy * dy <= r * r {
                px.push((x, y));
            }
        }
    }
    px
}

/// Generate the full scene for a seed: town, background, occluders, masks.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SyntheticScene> {
    let gt = generate_town(seed, params)?;
    let road_mask = rasterize(&gt, params.road_width);
    let mut image = value_noise_background(rng::derive(seed, salt::SCENE), params);
    for (x, y) in road_mask.iter_set() {
        image.set(x, y, params.road_shade);
    }

    // occluders: count scales with density and total road length, centers
    // sampled along the road polylines (so they genuinely occlude roads)
    let mut rng = rng::stream(seed, salt::SCENE ^ 0xa11);
    let total_len = gt.total_length();
    let count = (params.vegetation_density * total_len / 8.0).round() as usize;
    let edges: Vec<(u32, u32)> = gt.edges.iter().map(|e| (e.0, e.1)).collect();
    let cumulative: Vec<f64> = edges
        .iter()
        .scan(0.0, |acc, &e| {
            *acc += gt.edge_length(e);
            Some(*acc)
        })
        .collect();
    let mut occluders = Vec::with_capacity(count);
    for _ in 0..count {
        let roll = rng.gen_range(0.0..total_len.max(1e-9));
        let idx = cumulative.partition_point(|&c| c < roll).min(edges.len() - 1);
        let (a, b) = edges[idx];
        let (pa, pb) = (&gt.vertices[a as usize], &gt.vertices[b as usize]);
        let t = rng.gen_range(0.0..=1.0);
        let radius = rng.gen_range(params.occluder_radius.0..=params.occluder_radius.1);
        let shade = rng.gen_range(75..=115u8);
        occluders.push(Occluder {
            x: pa.x + t * (pb.x - pa.x),
            y: pa.y + t * (pb.y - pa.y),
            radius,
            shade,
        });
    }
    // painter's order: later occluders cover earlier ones
    let mut occlusion_mask = Mask::new(params.size, params.size);
    for o in &occluders {
        for (x, y) in disc_pixels(o, params.size) {
            image.set(x, y, o.shade);
            if road_mask.get(x, y) {
                occlusion_mask.set(x, y, true);
            }
        }
    }
    let difficulty = difficulty(&road_mask, &occlusion_mask)?;
    Ok(SyntheticScene {
        seed,
        params: params.clone(),
        gt,
        image,
        road_mask,
        occlusion_mask,
        occluders,
        difficulty,
    })
}

/// Fraction of road pixels hidden by occluders.
pub fn difficulty(road_mask: &Mask, occlusion_mask: &Mask) -> Result<f64> {
    let road = road_mask.count_set();
    if road == 0 {
        return Err(Error::validation("road mask is empty; difficulty undefined"));
    }
    Ok(occlusion_mask.count_set() as f64 / road as f64)
}

/// Keypoints an oracle extractor would propose: the ground-truth vertices
/// (edges longer than `max_edge_len` subdivided), plus `n_distractors` decoy
/// points at least `min_spacing` px from every other keypoint. Returns the
/// keypoints and the ground-truth edges re-indexed into them.
pub fn oracle_keypoints(
    gt: &SpatialGraph,
    seed: u64,
    n_distractors: usize,
    max_edge_len: f64,
    min_spacing: f64,
) -> Result<(Vec<Point>, Vec<(u32, u32)>)> {
    let sub = gt.subdivide_edges(max_edge_len)?;
    let mut keypoints = sub.vertices.clone();
    let edges: Vec<(u32, u32)> = sub.edges.iter().map(|e| (e.0, e.1)).collect();
    let mut rng = rng::stream(seed, salt::KEYPOINTS);
    let mut placed = 0;
    let mut attempts = 0;
    let limit = 200 * n_distractors.max(1);
    while placed < n_distractors && attempts < limit {
        attempts += 1;
        let cand = Point {
            x: rng.gen_range(2.0..gt.width as f64 - 2.0),
            y: rng.gen_range(2.0..gt.height as f64 - 2.0),
        };
        if keypoints.iter().all(|p| p.dist(&cand) >= min_spacing) {
            keypoints.push(cand);
            placed += 1;
        }
    }
    if placed < n_distractors {
        log::warn!("placed {placed}/{n_distractors} distractors before giving up");
    }
    Ok((keypoints, edges))
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    difficulty: f64,
    params: SceneParams,
    occluders: Vec<Occluder>,
}

impl SyntheticScene {
    /// Write the scene as a directory: image.pgm, road_mask.pgm,
    /// occlusion_mask.pgm, graph.json, meta.json.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.image.write_pgm(&dir.join("image.pgm"))?;
        self.road_mask.write_pgm(&dir.join("road_mask.pgm"))?;
        self.occlusion_mask.write_pgm(&dir.join("occlusion_mask.pgm"))?;
        self.gt.write_json(&dir.join("graph.json"))?;
        let meta = SceneMeta {
            seed: self.seed,
            difficulty: self.difficulty,
            params: self.params.clone(),
            occluders: self.occluders.clone(),
        };
        let body = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::validation(format!("meta serialize: {e}")))?;
        std::fs::write(dir.join("meta.json"), body)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SyntheticScene> {
        let image = GrayImage::read_pnm(&dir.join("image.pgm"))?;
        let road_mask = Mask::read_pgm(&dir.join("road_mask.pgm"))?;
        let occlusion_mask = Mask::read_pgm(&dir.join("occlusion_mask.pgm"))?;
        let gt = SpatialGraph::read_json(&dir.join("graph.json"))?;
        let raw = std::fs::read_to_string(dir.join("meta.json"))?;
        let meta: SceneMeta =
            serde_json::from_str(&raw).map_err(|e| Error::validation(format!("meta.json: {e}")))?;
        Ok(SyntheticScene {
            seed: meta.seed,
            params: meta.params,
            gt,
            image,
            road_mask,
            occlusion_mask,
            occluders: meta.occluders,
            difficulty: meta.difficulty,
        })
    }
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        let (a, b) = (rx[i] - mean, ry[i] - mean);
        cov += a * b;
        vx += a * a;
        vy += b * b;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{episode_return, reset, EnvConfig};
    use crate::metrics::graph_statistics;
    use std::sync::Arc;

    #[test]
    fn bad_params_are_rejected() {
        let mut p = SceneParams::default();
        p.vegetation_density = 1.5;
        assert!(p.validate().is_err());
        let mut p = SceneParams::default();
        p.grid_cells = 1;
        assert!(p.validate().is_err());
        let mut p = SceneParams::default();
        p.occluder_radius = (0.0, 4.0);
        assert!(p.validate().is_err());
        let mut p = SceneParams::default();
        p.jitter = 0.6;
        assert!(p.validate().is_err());
        assert!(generate_scene(1, &p).is_err());
    }

    #[test]
    fn towns_are_connected_and_deterministic() {
        let params = SceneParams::default();
        for seed in 0..20 {
            let g = generate_town(seed, &params).unwrap();
            let n_comp = g.components().iter().collect::<std::collections::BTreeSet<_>>().len();
            assert_eq!(n_comp, 1, "seed {seed} not connected");
            assert!(g.vertices.len() == 36);
        }
        let a = generate_town(5, &params).unwrap();
        let b = generate_town(5, &params).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
        let c = generate_town(6, &params).unwrap();
        assert_ne!(a.to_json_string(), c.to_json_string());
    }

    #[test]
    fn junction_angles_concentrate_on_grid_bins() {
        let params = SceneParams::default();
        let mut on_grid = 0u64;
        let mut total = 0u64;
        for seed in 0..100 {
            let g = generate_town(seed, &params).unwrap();
            let stats = graph_statistics(&g);
            let h = &stats.junction_angle_histogram;
            on_grid += h[0] + h[17];
            total += h.iter().sum::<u64>();
        }
        assert!(total > 0);
        let frac = on_grid as f64 / total as f64;
        assert!(frac >= 0.7, "grid-angle mass {frac:.3} below 0.7");
    }

    #[test]
    fn scenes_are_bit_identical_per_seed() {
        let params = SceneParams::tiny();
        let a = generate_scene(11, &params).unwrap();
        let b = generate_scene(11, &params).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.road_mask, b.road_mask);
        assert_eq!(a.occlusion_mask, b.occlusion_mask);
        assert_eq!(a.gt.to_json_string(), b.gt.to_json_string());
        assert_eq!(a.difficulty, b.difficulty);
        assert_eq!(a.occluders, b.occluders);
    }

    #[test]
    fn zero_density_means_zero_difficulty() {
        let mut params = SceneParams::tiny();
        params.vegetation_density = 0.0;
        let s = generate_scene(3, &params).unwrap();
        assert!(s.occluders.is_empty());
        assert_eq!(s.difficulty, 0.0);
        assert_eq!(s.occlusion_mask.count_set(), 0);
    }

    #[test]
    fn difficulty_rises_with_density() {
        let mut lo = SceneParams::tiny();
        lo.vegetation_density = 0.2;
        let mut hi = SceneParams::tiny();
        hi.vegetation_density = 1.0;
        let a = generate_scene(7, &lo).unwrap();
        let b = generate_scene(7, &hi).unwrap();
        assert_eq!(a.gt.to_json_string(), b.gt.to_json_string(), "same town, different occlusion");
        assert!(b.difficulty > a.difficulty, "{} vs {}", b.difficulty, a.difficulty);
        assert!((0.0..=1.0).contains(&a.difficulty));
        assert!((0.0..=1.0).contains(&b.difficulty));
    }

    #[test]
    fn density_ranks_difficulty_across_seeds() {
        let mut densities = Vec::new();
        let mut difficulties = Vec::new();
        for i in 0..60 {
            let mut params = SceneParams::tiny();
            params.vegetation_density = 0.05 + 0.9 * i as f64 / 59.0;
            let s = generate_scene(1000 + i as u64, &params).unwrap();
            densities.push(params.vegetation_density);
            difficulties.push(s.difficulty);
        }
        let rho = spearman(&densities, &difficulties);
        assert!(rho >= 0.9, "spearman {rho:.3}");
    }

    #[test]
    fn occluders_sit_on_roads() {
        let mut params = SceneParams::tiny();
        params.vegetation_density = 0.5;
        let s = generate_scene(9, &params).unwrap();
        assert!(!s.occluders.is_empty());
        // every occluder disc overlaps the rasterized road band
        for o in &s.occluders {
            assert!(
                disc_pixels(o, s.params.size).iter().any(|&(x, y)| s.road_mask.get(x, y)),
                "occluder at ({}, {}) misses the road",
                o.x,
                o.y
            );
        }
        // occlusion mask is the road/occluder intersection
        for (x, y) in s.occlusion_mask.iter_set() {
            assert!(s.road_mask.get(x, y));
        }
        assert!(s.occlusion_mask.count_set() > 0);
    }

    #[test]
    fn image_layers_compose_in_painter_order() {
        let mut params = SceneParams::tiny();
        params.vegetation_density = 0.4;
        let s = generate_scene(13, &params).unwrap();
        // last occluder is painted last, so its center pixel keeps its shade
        let last = s.occluders.last().unwrap();
        assert_eq!(s.image.get(last.x.round() as i64, last.y.round() as i64), last.shade);
        // some road pixel outside every occluder keeps the road shade
        let road_visible = s
            .road_mask
            .iter_set()
            .any(|(x, y)| s.image.get(x, y) == s.params.road_shade);
        assert!(road_visible);
        // background stays in the configured range
        let bg = s.image.get(1, 1);
        assert!(bg >= s.params.background.0 && bg <= s.params.background.1);
    }

    #[test]
    fn oracle_keypoints_default_to_gt_vertices() {
        let gt = generate_town(2, &SceneParams::default()).unwrap();
        let (kps, edges) = oracle_keypoints(&gt, 0, 0, 1e9, 2.0).unwrap();
        assert_eq!(kps, gt.vertices);
        let gt_edges: Vec<(u32, u32)> = gt.edges.iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(edges, gt_edges);
    }

    #[test]
    fn oracle_keypoints_space_out_distractors() {
        let gt = generate_town(4, &SceneParams::default()).unwrap();
        let (kps, _) = oracle_keypoints(&gt, 21, 12, 40.0, 2.0).unwrap();
        assert!(kps.len() > gt.vertices.len(), "subdivision plus distractors");
        for i in 0..kps.len() {
            for j in i + 1..kps.len() {
                assert!(kps[i].dist(&kps[j]) >= 2.0 - 1e-9, "{i} and {j} too close");
            }
        }
    }

    #[test]
    fn scene_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(17, &SceneParams::tiny()).unwrap();
        s.save(dir.path()).unwrap();
        let back = SyntheticScene::load(dir.path()).unwrap();
        assert_eq!(back.seed, 17);
        assert_eq!(back.image, s.image);
        assert_eq!(back.road_mask, s.road_mask);
        assert_eq!(back.gt.to_json_string(), s.gt.to_json_string());
        assert_eq!(back.difficulty, s.difficulty);
        assert_eq!(back.occluders, s.occluders);
        assert_eq!(back.params, s.params);
    }

    #[test]
    fn replaying_ground_truth_edges_scores_nearly_perfect() {
        let s = generate_scene(23, &SceneParams::tiny()).unwrap();
        let (kps, edges) = oracle_keypoints(&s.gt, 23, 0, 24.0, 2.0).unwrap();
        let mut state = reset(
            Arc::new(s.image.clone()),
            Arc::new(kps.clone()),
            &[],
            Some(Arc::new(s.gt.clone())),
            &EnvConfig { n_max: Some(edges.len() + 2), ..Default::default() },
        )
        .unwrap();
        let mut rewards = Vec::new();
        for &(a, b) in &edges {
            for tok in [a, b] {
                let (next, r, _) = state.step(tok).unwrap();
                state = next;
                rewards.push(r);
            }
        }
        let (state, r, done) = state.step(kps.len() as u32).unwrap();
        rewards.push(r);
        assert!(done);
        assert!(
            state.cached_score >= 0.99,
            "perfect replay scored {}",
            state.cached_score
        );
        assert!((episode_return(&rewards) - state.cached_score).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_known_orderings() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]), -1.0);
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]);
        assert!(rho > 0.5 && rho < 1.0);
    }
}
