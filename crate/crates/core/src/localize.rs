//! Reference-mask localization: threshold, keep the biggest 8-connected component,
//! and report its minimum box in panorama pixels. On panoramas the box may cross the
//! seam, in which case `x0 + width > W` and columns are read modulo `W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::matcher::Mask;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Binary grid at feature resolution, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Grid {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Grid> {
        if cells.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} grid needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            cells,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Grid {
        let cells = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Grid {
            height,
            width,
            cells,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub wrap: bool,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Whether pixel column `x` lies inside the box, reading columns modulo `pano_width`.
    pub fn covers_column(&self, x: usize, pano_width: usize) -> bool {
        (x + pano_width - self.x0 % pano_width) % pano_width < self.width
    }

    /// Intersection over union on a panorama of width `pano_width`.
    pub fn iou(&self, other: &BoundingBox, pano_width: usize) -> f64 {
        let cols = (0..pano_width)
            .filter(|&x| self.covers_column(x, pano_width) && other.covers_column(x, pano_width))
            .count();
        let top = self.y0.max(other.y0);
        let bottom = (self.y0 + self.height).min(other.y0 + other.height);
        let inter = cols * bottom.saturating_sub(top);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Cells with value `>= t`.
pub fn threshold_mask(mask: &Mask, t: f64) -> Result<Grid> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!(
            "mask threshold must be in (0, 1), got {t}"
        )));
    }
    Grid::new(
        mask.height(),
        mask.width(),
        mask.values().iter().map(|&v| v >= t).collect(),
    )
}

/// Labels 8-connected components in row-major discovery order.
fn components(grid: &Grid, wrap_horizontal: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (grid.height, grid.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !grid.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut cells = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            cells.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let nr = r as i64 + dr;
                    let mut nc = c as i64 + dc;
                    if nr < 0 || nr >= h as i64 {
                        continue;
                    }
                    if wrap_horizontal {
                        nc = nc.rem_euclid(w as i64);
                    } else if nc < 0 || nc >= w as i64 {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if grid.cells[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        cells.sort_unstable();
        out.push(cells);
    }
    out
}

/// Largest 8-connected component as sorted `(row, col)` cells; equal sizes go to the
/// component whose first cell comes first in row-major order. Empty grid, empty set.
pub fn biggest_component(grid: &Grid, wrap_horizontal: bool) -> Vec<(usize, usize)> {
    let mut best: Vec<(usize, usize)> = Vec::new();
    for comp in components(grid, wrap_horizontal) {
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Column span `(first, count)` of a set of occupied columns. With wrap, the span is
/// the complement of the largest circular gap; on equal gaps the non-crossing span wins,
/// then the earliest gap.
fn column_span(occupied: &[bool], wrap: bool) -> (usize, usize) {
    let w = occupied.len();
    let cols: Vec<usize> = (0..w).filter(|&c| occupied[c]).collect();
    let (first, last) = (cols[0], *cols.last().expect("non-empty"));
    if !wrap || cols.len() == w {
        return (first, last - first + 1);
    }
    // Gap that contains the seam, then gaps between consecutive occupied columns.
    let mut best_gap = w - 1 - last + first;
    let mut best_start = first;
    let mut best_len = last - first + 1;
    for pair in cols.windows(2) {
        let gap = pair[1] - pair[0] - 1;
        if gap > best_gap {
            best_gap = gap;
            best_start = pair[1];
            best_len = w - gap;
        }
    }
    (best_start, best_len)
}

/// Minimum box around the biggest component, in reference pixels. `reference_height`
/// and `reference_width` must be the same integer multiple of the mask extents.
pub fn localize(
    mask: &Mask,
    reference_height: usize,
    reference_width: usize,
    t: f64,
    wrap_horizontal: bool,
) -> Result<Option<BoundingBox>> {
    let (h, w) = (mask.height(), mask.width());
    let d = reference_width / w;
    if d == 0 || reference_width != d * w || reference_height != d * h {
        return Err(Error::invalid(format!(
            "reference {reference_height}x{reference_width} is not an integer multiple of mask {h}x{w}"
        )));
    }
    let grid = threshold_mask(mask, t)?;
    Ok(
        component_box(&grid, wrap_horizontal).map(|cells| BoundingBox {
            x0: cells.x0 * d,
            y0: cells.y0 * d,
            width: cells.width * d,
            height: cells.height * d,
            wrap: cells.wrap,
        }),
    )
}

/// Box of the biggest component in cell units.
pub fn component_box(grid: &Grid, wrap_horizontal: bool) -> Option<BoundingBox> {
    let comp = biggest_component(grid, wrap_horizontal);
    if comp.is_empty() {
        return None;
    }
    let top = comp.iter().map(|c| c.0).min().expect("non-empty");
    let bottom = comp.iter().map(|c| c.0).max().expect("non-empty");
    let mut occupied = vec![false; grid.width];
    for &(_, c) in &comp {
        occupied[c] = true;
    }
    let (x0, width) = column_span(&occupied, wrap_horizontal);
    Some(BoundingBox {
        x0,
        y0: top,
        width,
        height: bottom - top + 1,
        wrap: x0 + width > grid.width,
    })
}

/// Copy of the panorama (as RGB) with the box outline drawn in red.
pub fn draw_box(panorama: &Image, bbox: &BoundingBox) -> Image {
    let (h, w) = (panorama.height(), panorama.width());
    let rgb = panorama.to_rgb();
    let right = (bbox.x0 + bbox.width + w - 1) % w;
    let bottom = (bbox.y0 + bbox.height).min(h) - 1;
    Image::from_fn(h, w, 3, |y, x, c| {
        let inside_rows = y >= bbox.y0 && y <= bottom;
        let inside_cols = bbox.covers_column(x, w);
        let edge = (inside_cols && (y == bbox.y0 || y == bottom))
            || (inside_rows && (x == bbox.x0 % w || x == right));
        if edge {
            [1.0, 0.0, 0.0][c]
        } else {
            rgb.get(y, x, c)
        }
    })
    .expect("extents taken from an existing image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mask(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Mask {
        Mask(Tensor::from_fn(&[h, w, 1], |i| {
            if on(i / w, i % w) {
                0.9
            } else {
                0.1
            }
        }))
    }

    #[test]
    fn threshold_uses_greater_or_equal() {
        let m = Mask(Tensor::new(vec![1, 3, 1], vec![0.5, 0.4999, 0.9]).unwrap());
        assert_eq!(
            threshold_mask(&m, 0.5).unwrap().cells,
            vec![true, false, true]
        );
        assert_eq!(
            threshold_mask(&mask(2, 2, |_, _| true), 0.5)
                .unwrap()
                .count(),
            4
        );
        assert_eq!(
            threshold_mask(&mask(2, 2, |_, _| false), 0.5)
                .unwrap()
                .count(),
            0
        );
        assert!(threshold_mask(&m, 1.0).is_err());
    }

    #[test]
    fn larger_blob_wins() {
        let g = Grid::from_fn(5, 8, |r, c| (r < 1 && c < 5) || (r == 4 && c >= 5));
        let comp = biggest_component(&g, false);
        assert_eq!(comp.len(), 5);
        assert!(comp.iter().all(|&(r, _)| r == 0));
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let g = Grid::from_fn(3, 3, |r, c| r == c);
        assert_eq!(biggest_component(&g, false).len(), 3);
    }

    #[test]
    fn equal_components_prefer_row_major_first() {
        let g = Grid::from_fn(4, 6, |r, c| (r == 3 && c < 2) || (r == 0 && c >= 4));
        assert_eq!(biggest_component(&g, false), vec![(0, 4), (0, 5)]);
    }

    #[test]
    fn empty_mask_localizes_to_none() {
        let m = mask(4, 4, |_, _| false);
        assert!(biggest_component(&threshold_mask(&m, 0.5).unwrap(), true).is_empty());
        assert_eq!(localize(&m, 32, 32, 0.5, true).unwrap(), None);
    }

    #[test]
    fn blob_maps_to_pixel_box() {
        let m = mask(4, 8, |r, c| (1..=2).contains(&r) && (3..=5).contains(&c));
        let b = localize(&m, 32, 64, 0.5, true).unwrap().unwrap();
        assert_eq!(
            b,
            BoundingBox {
                x0: 24,
                y0: 8,
                width: 24,
                height: 16,
                wrap: false
            }
        );
    }

    #[test]
    fn seam_blob_wraps() {
        let m = mask(8, 16, |_, c| [0, 1, 14, 15].contains(&c));
        let grid = threshold_mask(&m, 0.5).unwrap();
        assert_eq!(biggest_component(&grid, true).len(), 32);
        assert_eq!(biggest_component(&grid, false).len(), 16);
        let b = localize(&m, 64, 128, 0.5, true).unwrap().unwrap();
        assert_eq!(
            b,
            BoundingBox {
                x0: 112,
                y0: 0,
                width: 32,
                height: 64,
                wrap: true
            }
        );
    }

    #[test]
    fn full_ring_is_one_unwrapped_box() {
        let g = Grid::from_fn(2, 6, |r, _| r == 1);
        let b = component_box(&g, true).unwrap();
        assert_eq!((b.x0, b.width, b.wrap), (0, 6, false));
    }

    #[test]
    fn reference_extents_must_be_a_multiple() {
        assert!(localize(&mask(2, 4, |_, _| true), 16, 30, 0.5, true).is_err());
    }

    #[test]
    fn iou_handles_the_seam() {
        let a = BoundingBox {
            x0: 120,
            y0: 0,
            width: 16,
            height: 8,
            wrap: true,
        };
        let b = BoundingBox {
            x0: 0,
            y0: 0,
            width: 8,
            height: 8,
            wrap: false,
        };
        assert!((a.iou(&b, 128) - 0.5).abs() < 1e-15);
        assert_eq!(a.iou(&a, 128), 1.0);
        let far = BoundingBox {
            x0: 40,
            y0: 0,
            width: 8,
            height: 8,
            wrap: false,
        };
        assert_eq!(a.iou(&far, 128), 0.0);
    }

    #[test]
    fn drawn_box_outline_is_red() {
        let pano = Image::new(8, 16, 1, vec![0.5; 128]).unwrap();
        let b = BoundingBox {
            x0: 14,
            y0: 2,
            width: 4,
            height: 3,
            wrap: true,
        };
        let img = draw_box(&pano, &b);
        assert_eq!((img.get(2, 14, 0), img.get(2, 14, 1)), (1.0, 0.0));
        assert_eq!(img.get(4, 1, 0), 1.0);
        assert_eq!(img.get(3, 0, 0), 0.5);
        assert_eq!(img.get(3, 5, 0), 0.5);
    }
}
