//! Morphological thinning and skeleton-to-graph tracing.

use std::collections::HashMap;

use crate::graph::SpatialGraph;
use crate::raster::Mask;

/// Zhang-Suen two-subiteration thinning.
///
/// Pixels are deleted in parallel per subiteration until a full iteration
/// changes nothing. Plain Zhang-Suen annihilates isolated 2x2 blocks; each
/// subiteration therefore keeps the smallest pixel of any component that
/// would otherwise vanish, so the 8-connected component count is preserved.
pub fn skeletonize(mask: &Mask) -> Mask {
    let mut cur = mask.clone();
    loop {
        let d1 = thin_subiteration(&mut cur, true);
        let d2 = thin_subiteration(&mut cur, false);
        if d1 == 0 && d2 == 0 {
            return cur;
        }
    }
}

/// Ring of 8 neighbors in Zhang-Suen order: N, NE, E, SE, S, SW, W, NW.
fn ring(mask: &Mask, x: i64, y: i64) -> [bool; 8] {
    [
        mask.get(x, y - 1),
        mask.get(x + 1, y - 1),
        mask.get(x + 1, y),
        mask.get(x + 1, y + 1),
        mask.get(x, y + 1),
        mask.get(x - 1, y + 1),
        mask.get(x - 1, y),
        mask.get(x - 1, y - 1),
    ]
}

fn thin_subiteration(mask: &mut Mask, first: bool) -> usize {
    let mut deletions: Vec<(i64, i64)> = Vec::new();
    for (x, y) in mask.iter_set() {
        let p = ring(mask, x, y);
        let b = p.iter().filter(|v| **v).count();
        if !(2..=6).contains(&b) {
            continue;
        }
        let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
        if a != 1 {
            continue;
        }
        // p[0]=N p[2]=E p[4]=S p[6]=W
        let ok = if first {
            !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
        } else {
            !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
        };
        if ok {
            deletions.push((x, y));
        }
    }
    if deletions.is_empty() {
        return 0;
    }

    // guard: a component may not disappear in one parallel sweep
    let labels = label_components(mask);
    let mut comp_size: HashMap<u32, usize> = HashMap::new();
    for (x, y) in mask.iter_set() {
        *comp_size.entry(labels[(y * mask.width as i64 + x) as usize]).or_insert(0) += 1;
    }
    let mut comp_deleted: HashMap<u32, usize> = HashMap::new();
    for &(x, y) in &deletions {
        *comp_deleted
            .entry(labels[(y * mask.width as i64 + x) as usize])
            .or_insert(0) += 1;
    }
    let mut spared: HashMap<u32, (i64, i64)> = HashMap::new();
    for &(x, y) in &deletions {
        let c = labels[(y * mask.width as i64 + x) as usize];
        if comp_deleted[&c] == comp_size[&c] {
            let e = spared.entry(c).or_insert((x, y));
            if (y, x) < (e.1, e.0) {
                *e = (x, y);
            }
        }
    }

    let mut count = 0;
    for (x, y) in deletions {
        let c = labels[(y * mask.width as i64 + x) as usize];
        if spared.get(&c) == Some(&(x, y)) {
            continue;
        }
        mask.set(x, y, false);
        count += 1;
    }
    count
}

fn label_components(mask: &Mask) -> Vec<u32> {
    let w = mask.width as i64;
    let n = (mask.width as usize) * (mask.height as usize);
    let mut labels = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for (x, y) in mask.iter_set() {
        let idx = (y * w + x) as usize;
        if labels[idx] != u32::MAX {
            continue;
        }
        labels[idx] = next;
        stack.push((x, y));
        while let Some((cx, cy)) = stack.pop() {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (cx + dx, cy + dy);
                    if mask.get(nx, ny) {
                        let nidx = (ny * w + nx) as usize;
                        if labels[nidx] == u32::MAX {
                            labels[nidx] = next;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// Traces a 1-pixel skeleton into a spatial graph.
///
/// Pixel adjacency is 8-connected with redundant diagonals dropped: a
/// diagonal step is ignored when an orthogonal 2-step bridge exists, which
/// removes spurious 3-cycles at corners. Vertices are placed at pixels of
/// degree != 2 and wherever a chain changes direction, so rasterizing the
/// result at width 1 reproduces the skeleton (straight runs collapse to a
/// single edge). Pure pixel cycles are anchored at their smallest (y, x).
pub fn mask_to_graph(skeleton: &Mask) -> SpatialGraph {
    let neighbors = |x: i64, y: i64| -> Vec<(i64, i64)> {
        let mut out = Vec::with_capacity(8);
        for (dx, dy) in [
            (0i64, -1i64),
            (1, -1),
            (1, 0),
            (1, 1),
            (0, 1),
            (-1, 1),
            (-1, 0),
            (-1, -1),
        ] {
            let (nx, ny) = (x + dx, y + dy);
            if !skeleton.get(nx, ny) {
                continue;
            }
            if dx != 0 && dy != 0 && (skeleton.get(x, ny) || skeleton.get(nx, y)) {
                continue; // orthogonal bridge exists
            }
            out.push((nx, ny));
        }
        out
    };

    let pixels: Vec<(i64, i64)> = skeleton.iter_set().collect();
    let mut degree: HashMap<(i64, i64), usize> = HashMap::new();
    for &(x, y) in &pixels {
        degree.insert((x, y), neighbors(x, y).len());
    }

    let mut vertex_of: HashMap<(i64, i64), u32> = HashMap::new();
    let mut vertices: Vec<crate::Point> = Vec::new();
    let vertex = |p: (i64, i64), vs: &mut Vec<crate::Point>, map: &mut HashMap<(i64, i64), u32>| -> u32 {
        *map.entry(p).or_insert_with(|| {
            vs.push(crate::Point::new(p.0 as f64, p.1 as f64));
            (vs.len() - 1) as u32
        })
    };

    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut used: std::collections::HashSet<((i64, i64), (i64, i64))> = std::collections::HashSet::new();
    let norm = |a: (i64, i64), b: (i64, i64)| if (a.1, a.0) <= (b.1, b.0) { (a, b) } else { (b, a) };

    let emit_chain = |chain: &[(i64, i64)],
                          vertices: &mut Vec<crate::Point>,
                          vertex_of: &mut HashMap<(i64, i64), u32>,
                          edges: &mut Vec<(u32, u32)>| {
        // keep endpoints and every direction change
        let mut kept = vec![chain[0]];
        for i in 1..chain.len() - 1 {
            let d_in = (chain[i].0 - chain[i - 1].0, chain[i].1 - chain[i - 1].1);
            let d_out = (chain[i + 1].0 - chain[i].0, chain[i + 1].1 - chain[i].1);
            if d_in != d_out {
                kept.push(chain[i]);
            }
        }
        kept.push(*chain.last().unwrap());
        for pair in kept.windows(2) {
            let a = vertex(pair[0], vertices, vertex_of);
            let b = vertex(pair[1], vertices, vertex_of);
            if a != b {
                edges.push((a, b));
            }
        }
    };

    // chains out of every non-degree-2 pixel
    for &(x, y) in &pixels {
        if degree[&(x, y)] == 2 {
            continue;
        }
        for (nx, ny) in neighbors(x, y) {
            if used.contains(&norm((x, y), (nx, ny))) {
                continue;
            }
            let mut chain = vec![(x, y), (nx, ny)];
            used.insert(norm((x, y), (nx, ny)));
            let (mut prev, mut cur) = ((x, y), (nx, ny));
            while degree[&cur] == 2 {
                let ns = neighbors(cur.0, cur.1);
                let next = if ns[0] == prev { ns[1] } else { ns[0] };
                used.insert(norm(cur, next));
                chain.push(next);
                prev = cur;
                cur = next;
            }
            emit_chain(&chain, &mut vertices, &mut vertex_of, &mut edges);
        }
    }

    // leftovers are pure cycles; pixels iterate row-major so the anchor is
    // the smallest (y, x) of its cycle
    for &(x, y) in &pixels {
        if degree[&(x, y)] != 2 {
            continue;
        }
        let first = neighbors(x, y)
            .into_iter()
            .find(|&n| !used.contains(&norm((x, y), n)));
        let Some(first) = first else { continue };
        let mut chain = vec![(x, y), first];
        used.insert(norm((x, y), first));
        let (mut prev, mut cur) = ((x, y), first);
        while cur != (x, y) {
            let ns = neighbors(cur.0, cur.1);
            let next = if ns[0] == prev { ns[1] } else { ns[0] };
            used.insert(norm(cur, next));
            chain.push(next);
            prev = cur;
            cur = next;
        }
        emit_chain(&chain, &mut vertices, &mut vertex_of, &mut edges);
    }

    // isolated pixels become bare vertices
    for &(x, y) in &pixels {
        if degree[&(x, y)] == 0 {
            vertex((x, y), &mut vertices, &mut vertex_of);
        }
    }

    SpatialGraph::build(skeleton.width, skeleton.height, vertices, edges)
        .expect("traced pixels are always in canvas")
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent reference implementation of plain Zhang-Suen over a
    /// Vec<Vec<bool>> grid, written directly from the published conditions.
    /// Used as the oracle for fixtures where no component can vanish.
    fn reference_zhang_suen(grid: &mut Vec<Vec<bool>>) {
        let h = grid.len();
        let w = grid[0].len();
        let at = |g: &Vec<Vec<bool>>, x: i64, y: i64| -> bool {
            x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && g[y as usize][x as usize]
        };
        loop {
            let mut changed = false;
            for step in 0..2 {
                let mut kill = Vec::new();
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        if !at(grid, x, y) {
                            continue;
                        }
                        let p = [
                            at(grid, x, y - 1),
                            at(grid, x + 1, y - 1),
                            at(grid, x + 1, y),
                            at(grid, x + 1, y + 1),
                            at(grid, x, y + 1),
                            at(grid, x - 1, y + 1),
                            at(grid, x - 1, y),
                            at(grid, x - 1, y - 1),
                        ];
                        let b = p.iter().filter(|v| **v).count();
                        let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                        let (c1, c2) = if step == 0 {
                            (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                        } else {
                            (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                        };
                        if (2..=6).contains(&b) && a == 1 && !c1 && !c2 {
                            kill.push((x as usize, y as usize));
                        }
                    }
                }
                for (x, y) in kill.drain(..) {
                    grid[y][x] = false;
                    changed = true;
                }
            }
            if !changed {
                return;
            }
        }
    }

    fn bar_mask() -> Mask {
        let mut m = Mask::new(16, 11);
        for y in 4..=6 {
            for x in 2..=12 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn empty_mask_stays_empty() {
        let m = Mask::new(8, 8);
        assert_eq!(skeletonize(&m).count_set(), 0);
    }

    #[test]
    fn bar_thins_to_centerline_matching_reference() {
        let m = bar_mask();
        let skel = skeletonize(&m);

        let mut grid = vec![vec![false; 16]; 11];
        for (x, y) in m.iter_set() {
            grid[y as usize][x as usize] = true;
        }
        reference_zhang_suen(&mut grid);
        let mut expect = Mask::new(16, 11);
        for (y, row) in grid.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                expect.set(x as i64, y as i64, *v);
            }
        }
        assert_eq!(skel, expect, "must agree with the independent reference");
        assert!(skel.iter_set().all(|(_, y)| y == 5), "centerline sits on the middle row");
        assert!(skel.count_set() >= 7, "line survives thinning");
        assert_eq!(skel.component_count(), 1);
    }

    #[test]
    fn disc_collapses_to_center_blob() {
        let mut m = Mask::new(11, 11);
        for y in 0..11i64 {
            for x in 0..11i64 {
                if (x - 5) * (x - 5) + (y - 5) * (y - 5) <= 16 {
                    m.set(x, y, true);
                }
            }
        }
        let skel = skeletonize(&m);
        assert!(skel.count_set() <= 5, "disc reduces to a tiny blob, got {}", skel.count_set());
        assert!(skel.get(5, 5), "center survives");
    }

    #[test]
    fn result_is_one_pixel_wide() {
        let skel = skeletonize(&bar_mask());
        for (x, y) in skel.iter_set() {
            let p = ring(&skel, x, y);
            let b = p.iter().filter(|v| **v).count();
            assert!(b <= 2, "pixel ({x},{y}) has {b} neighbors");
        }
    }

    #[test]
    fn component_count_is_preserved_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let mut m = Mask::new(40, 40);
            for _ in 0..rng.gen_range(1..6) {
                let x0 = rng.gen_range(0..36i64);
                let y0 = rng.gen_range(0..36i64);
                let w = rng.gen_range(1..12i64);
                let h = rng.gen_range(1..12i64);
                for y in y0..(y0 + h).min(40) {
                    for x in x0..(x0 + w).min(40) {
                        m.set(x, y, true);
                    }
                }
            }
            // sprinkle single pixels and 2x2 blocks, the annihilation case
            for _ in 0..rng.gen_range(0..4) {
                let x = rng.gen_range(0..39i64);
                let y = rng.gen_range(0..39i64);
                m.set(x, y, true);
                if rng.gen_bool(0.5) {
                    m.set(x + 1, y, true);
                    m.set(x, y + 1, true);
                    m.set(x + 1, y + 1, true);
                }
            }
            let before = m.component_count();
            let after = skeletonize(&m).component_count();
            assert_eq!(before, after, "component count changed on trial {trial}");
        }
    }

    #[test]
    fn single_pixel_becomes_bare_vertex() {
        let mut m = Mask::new(8, 8);
        m.set(3, 4, true);
        let g = mask_to_graph(&m);
        assert_eq!(g.vertices.len(), 1);
        assert_eq!(g.vertices[0], crate::Point::new(3.0, 4.0));
        assert!(g.edges.is_empty());
    }

    #[test]
    fn straight_chain_collapses_to_single_edge() {
        let mut m = Mask::new(16, 8);
        for x in 3..13 {
            m.set(x, 4, true);
        }
        let g = mask_to_graph(&m);
        assert_eq!(g.vertices.len(), 2, "only the endpoints remain");
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn plus_sign_keeps_crossing_and_tips() {
        let mut m = Mask::new(11, 11);
        for i in 1..10 {
            m.set(i, 5, true);
            m.set(5, i, true);
        }
        let g = mask_to_graph(&m);
        assert_eq!(g.vertices.len(), 5, "4 tips + 1 crossing");
        assert_eq!(g.edges.len(), 4);
        let center = g
            .vertices
            .iter()
            .position(|p| *p == crate::Point::new(5.0, 5.0))
            .unwrap();
        assert_eq!(g.vertex_degree(center).unwrap(), 4);
    }

    #[test]
    fn corner_chain_keeps_the_corner() {
        let mut m = Mask::new(12, 12);
        for x in 2..=8 {
            m.set(x, 2, true);
        }
        for y in 2..=9 {
            m.set(8, y, true);
        }
        let g = mask_to_graph(&m);
        assert_eq!(g.vertices.len(), 3, "two tips and the corner");
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn pixel_cycle_traces_as_closed_ring() {
        let mut m = Mask::new(12, 12);
        for i in 2..=8 {
            m.set(i, 2, true);
            m.set(i, 8, true);
            m.set(2, i, true);
            m.set(8, i, true);
        }
        let g = mask_to_graph(&m);
        let deg = g.degrees();
        assert!(deg.iter().all(|&d| d == 2), "ring: {deg:?}");
        assert_eq!(g.vertices.len(), 4, "four corners");
    }

    #[test]
    fn traced_graph_covers_skeleton_within_one_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let mut m = Mask::new(48, 48);
            for _ in 0..rng.gen_range(2..5) {
                let x0 = rng.gen_range(2..44i64);
                let y0 = rng.gen_range(2..44i64);
                let x1 = rng.gen_range(2..44i64);
                let y1 = rng.gen_range(2..44i64);
                for (x, y) in crate::raster::bresenham(x0, y0, x1, y1) {
                    m.set(x, y, true);
                    m.set(x + 1, y, true);
                    m.set(x, y + 1, true);
                }
            }
            let skel = skeletonize(&m);
            let g = mask_to_graph(&skel);
            let redrawn = rasterize(&g, 1);
            let total = skel.count_set();
            if total == 0 {
                continue;
            }
            let covered = skel
                .iter_set()
                .filter(|&(x, y)| {
                    (-1..=1).any(|dy| (-1..=1).any(|dx| redrawn.get(x + dx, y + dy)))
                })
                .count();
            assert!(
                covered as f64 >= 0.95 * total as f64,
                "coverage {covered}/{total}"
            );
        }
    }
}
