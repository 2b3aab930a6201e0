//! Binary masks, grayscale images, PGM I/O, and graph rasterization.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;

/// Row-major binary occupancy grid. (0, 0) is the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        self.contains(x, y) && self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: i64, y: i64, v: bool) {
        if self.contains(x, y) {
            self.bits[y as usize * self.width as usize + x as usize] = v;
        }
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i % w) as i64, (i / w) as i64))
    }

    /// Number of 8-connected components of set pixels.
    pub fn component_count(&self) -> usize {
        let w = self.width as usize;
        let n = self.bits.len();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if !self.bits[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let x = (i % w) as i64;
                let y = (i / w) as i64;
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if self.get(nx, ny) {
                            let j = ny as usize * w + nx as usize;
                            if !seen[j] {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect(),
        }
    }

    /// Threshold a grayscale image: pixels >= `threshold` are set.
    pub fn from_gray(img: &GrayImage, threshold: u8) -> Self {
        Mask {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|p| *p >= threshold).collect(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        self.to_gray().write_pgm(path)
    }

    /// Reads a PGM; any pixel above 127 counts as set.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        Ok(Mask::from_gray(&GrayImage::read_pnm(path)?, 128))
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, fill: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![fill; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> u8 {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            self.pixels[y as usize * self.width as usize + x as usize]
        } else {
            0
        }
    }

    #[inline]
    pub fn set(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            self.pixels[y as usize * self.width as usize + x as usize] = v;
        }
    }

    /// Binary PGM (P5), maxval 255. Output is byte-identical for equal images.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }

    /// Reads binary PGM (P5). PPM (P6) is accepted and luma-converted.
    pub fn read_pnm(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        Self::parse_pnm(&raw).map_err(|m| Error::validation(format!("{}: {m}", path.display())))
    }

    fn parse_pnm(raw: &[u8]) -> std::result::Result<Self, String> {
        fn next_token(raw: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
            // skip whitespace and '#' comments
            loop {
                while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < raw.len() && raw[*pos] == b'#' {
                    while *pos < raw.len() && raw[*pos] != b'\n' {
                        *pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = *pos;
            while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
        }

        let mut pos = 0usize;
        let magic = next_token(raw, &mut pos)?;
        if magic != "P5" && magic != "P6" {
            return Err(format!("unsupported magic {magic:?}, want P5 or P6"));
        }
        let width: u32 = next_token(raw, &mut pos)?.parse().map_err(|_| "bad width".to_string())?;
        let height: u32 = next_token(raw, &mut pos)?.parse().map_err(|_| "bad height".to_string())?;
        let maxval: u32 = next_token(raw, &mut pos)?.parse().map_err(|_| "bad maxval".to_string())?;
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        pos += 1; // single whitespace byte after maxval
        let n = (width as usize) * (height as usize);
        let channels = if magic == "P5" { 1 } else { 3 };
        let body = raw
            .get(pos..pos + n * channels)
            .ok_or_else(|| "truncated pixel data".to_string())?;
        let pixels = if channels == 1 {
            body.to_vec()
        } else {
            // Rec. 601 luma
            body.chunks_exact(3)
                .map(|c| {
                    (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64).round() as u8
                })
                .collect()
        };
        Ok(GrayImage { width, height, pixels })
    }
}

/// Draws every edge of `graph` as a thick Bresenham line.
///
/// Width extends perpendicular to the dominant axis of each edge, so a
/// horizontal edge of width 3 covers exactly three rows over the same
/// column span as the width-1 line. Width 0 is treated as 1.
pub fn rasterize(graph: &SpatialGraph, line_width: u32) -> Mask {
    let mut mask = Mask::new(graph.width, graph.height);
    let w = line_width.max(1) as i64;
    let lo = (w - 1) / 2;
    let hi = w / 2;
    for &(i, j) in &graph.edges {
        let a = graph.vertices[i as usize];
        let b = graph.vertices[j as usize];
        let (x0, y0) = (a.x.round() as i64, a.y.round() as i64);
        let (x1, y1) = (b.x.round() as i64, b.y.round() as i64);
        let x_major = (x1 - x0).abs() >= (y1 - y0).abs();
        for (x, y) in bresenham(x0, y0, x1, y1) {
            for off in -lo..=hi {
                if x_major {
                    mask.set(x, y + off, true);
                } else {
                    mask.set(x + off, y, true);
                }
            }
        }
    }
    mask
}

/// Integer Bresenham line from (x0, y0) to (x1, y1), inclusive.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SpatialGraph;
    use crate::Point;

    fn line_graph() -> SpatialGraph {
        SpatialGraph::build(
            12,
            12,
            vec![Point::new(2.0, 5.0), Point::new(8.0, 5.0)],
            vec![(0, 1)],
        )
        .unwrap()
        .0
    }

    #[test]
    fn empty_graph_rasterizes_to_empty_mask() {
        let g = SpatialGraph::build(8, 8, vec![], vec![]).unwrap().0;
        assert_eq!(rasterize(&g, 3).count_set(), 0);
    }

    #[test]
    fn horizontal_edge_width_1() {
        let m = rasterize(&line_graph(), 1);
        let expect: Vec<(i64, i64)> = (2..=8).map(|x| (x, 5)).collect();
        let got: Vec<(i64, i64)> = m.iter_set().collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn horizontal_edge_width_3_extends_perpendicular_only() {
        let m = rasterize(&line_graph(), 3);
        for y in 4..=6 {
            for x in 2..=8 {
                assert!(m.get(x, y), "missing ({x},{y})");
            }
        }
        assert_eq!(m.count_set(), 21, "width 3 must not extend along the line axis");
    }

    #[test]
    fn rasterize_is_deterministic() {
        let a = rasterize(&line_graph(), 3);
        let b = rasterize(&line_graph(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_canvas_pixels_are_clipped() {
        let g = SpatialGraph::build(
            4,
            4,
            vec![Point::new(0.0, 0.0), Point::new(3.0, 0.0)],
            vec![(0, 1)],
        )
        .unwrap()
        .0;
        let m = rasterize(&g, 5);
        assert!(m.iter_set().all(|(x, y)| x < 4 && y < 4));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = rasterize(&line_graph(), 3);
        m.write_pgm(&p).unwrap();
        let back = Mask::read_pgm(&p).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn ppm_is_luma_converted() {
        // hand-built 1x2 P6: red and white
        let raw = b"P6\n2 1\n255\n\xff\x00\x00\xff\xff\xff";
        let img = GrayImage::parse_pnm(raw).unwrap();
        assert_eq!(img.pixels, vec![76, 255]);
    }

    #[test]
    fn component_count_counts_diagonals_as_connected() {
        let mut m = Mask::new(4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true); // diagonal touch: one component
        m.set(3, 3, true); // separate
        assert_eq!(m.component_count(), 2);
    }
}
