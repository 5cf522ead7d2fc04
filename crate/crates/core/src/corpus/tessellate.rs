//! Fixed-size tile grid over a slide with tissue-coverage and pen-marking filters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

/// Boolean pixel grids for one slide plus the tiling rule.
#[derive(Clone, Debug, PartialEq)]
pub struct TessellationSpec {
    pub width: usize,
    pub height: usize,
    /// Tissue mask, row-major `height x width`.
    pub mask: Vec<bool>,
    /// Pen-marking mask, same extents as `mask`.
    pub exclusion: Vec<bool>,
    pub tile_size: usize,
    pub coverage_threshold: f64,
}

/// Pixel origin of a kept tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub y: usize,
    pub x: usize,
}

impl TessellationSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.mask.len() != n || self.exclusion.len() != n {
            return Err(Error::invalid("mask and exclusion must share extents"));
        }
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be positive"));
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(Error::invalid("coverage threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Summed-area table with a zero border: `at(y, x)` counts set pixels in
/// `[0, y) x [0, x)`.
struct Integral {
    stride: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(grid: &[bool], width: usize, height: usize) -> Self {
        let stride = width + 1;
        let mut sums = vec![0u32; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += grid[y * width + x] as u32;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Integral { stride, sums }
    }

    fn count(&self, y: usize, x: usize, size: usize) -> u32 {
        let s = |yy: usize, xx: usize| self.sums[yy * self.stride + xx];
        s(y + size, x + size) + s(y, x) - s(y, x + size) - s(y + size, x)
    }
}

/// Origin-anchored non-overlapping grid; partial edge tiles are dropped. A tile
/// is kept iff its tissue fraction is at least the threshold and it touches no
/// excluded pixel. Output is sorted row-major.
pub fn tessellate(spec: &TessellationSpec) -> Result<Vec<TileCoord>> {
    spec.validate()?;
    let tissue = Integral::new(&spec.mask, spec.width, spec.height);
    let pen = Integral::new(&spec.exclusion, spec.width, spec.height);
    let area = (spec.tile_size * spec.tile_size) as f64;
    let mut kept = Vec::new();
    for ty in 0..spec.height / spec.tile_size {
        for tx in 0..spec.width / spec.tile_size {
            let (y, x) = (ty * spec.tile_size, tx * spec.tile_size);
            if pen.count(y, x, spec.tile_size) > 0 {
                continue;
            }
            let coverage = tissue.count(y, x, spec.tile_size) as f64 / area;
            if coverage >= spec.coverage_threshold {
                kept.push(TileCoord { y, x });
            }
        }
    }
    Ok(kept)
}

/// A synthetic slide: an irregular elliptical tissue section with an optional
/// pen stroke, on a `tiles_per_side x tiles_per_side` grid of `tile_size` pixels.
pub fn synthetic_slide(
    rng: &mut Rng,
    tiles_per_side: usize,
    tile_size: usize,
    coverage_threshold: f64,
) -> TessellationSpec {
    let side = tiles_per_side * tile_size;
    let s = side as f64;
    let cy = s * rng.random_range(0.35..0.65);
    let cx = s * rng.random_range(0.35..0.65);
    let ry = s * rng.random_range(0.2..0.42);
    let rx = s * rng.random_range(0.2..0.42);
    let wobble = rng.random_range(0.0..0.25);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let angle = dy.atan2(dx);
            let limit = 1.0 + wobble * (3.0 * angle + phase).sin();
            mask[y * side + x] = dy * dy + dx * dx <= limit * limit;
        }
    }
    let mut exclusion = vec![false; side * side];
    if rng.random_bool(0.3) {
        // short horizontal pen stroke, a couple of pixels thick
        let y0 = rng.random_range(0..side);
        let x0 = rng.random_range(0..side / 2);
        let len = rng.random_range(side / 8..side / 2);
        for y in y0..(y0 + 2).min(side) {
            for x in x0..(x0 + len).min(side) {
                exclusion[y * side + x] = true;
            }
        }
    }
    TessellationSpec {
        width: side,
        height: side,
        mask,
        exclusion,
        tile_size,
        coverage_threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(w: usize, h: usize, tile: usize, mask: Vec<bool>) -> TessellationSpec {
        TessellationSpec {
            width: w,
            height: h,
            exclusion: vec![false; mask.len()],
            mask,
            tile_size: tile,
            coverage_threshold: 0.05,
        }
    }

    #[test]
    fn full_tissue_two_by_two() {
        let tiles = tessellate(&spec(8, 8, 4, vec![true; 64])).unwrap();
        assert_eq!(
            tiles,
            vec![
                TileCoord { y: 0, x: 0 },
                TileCoord { y: 0, x: 4 },
                TileCoord { y: 4, x: 0 },
                TileCoord { y: 4, x: 4 }
            ]
        );
    }

    #[test]
    fn empty_mask_has_no_tiles() {
        assert!(tessellate(&spec(8, 8, 4, vec![false; 64])).unwrap().is_empty());
    }

    #[test]
    fn five_percent_boundary_is_inclusive() {
        // 20x20 tile: 20 tissue pixels is exactly 5%
        let mut mask = vec![false; 400];
        mask[..20].iter_mut().for_each(|m| *m = true);
        assert_eq!(tessellate(&spec(20, 20, 20, mask.clone())).unwrap().len(), 1);
        mask[19] = false;
        assert!(tessellate(&spec(20, 20, 20, mask)).unwrap().is_empty());
    }

    #[test]
    fn any_pen_pixel_rejects_the_tile() {
        let mut s = spec(8, 4, 4, vec![true; 32]);
        s.exclusion[4 * 8 - 1] = true;
        assert_eq!(tessellate(&s).unwrap(), vec![TileCoord { y: 0, x: 0 }]);
    }

    #[test]
    fn partial_edge_tiles_are_dropped() {
        assert_eq!(tessellate(&spec(10, 9, 4, vec![true; 90])).unwrap().len(), 4);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(4, 4, 4, vec![true; 16]);
        s.exclusion.pop();
        assert!(tessellate(&s).is_err());
        let mut s = spec(4, 4, 4, vec![true; 16]);
        s.coverage_threshold = 0.0;
        assert!(tessellate(&s).is_err());
    }
}
