//! Discrete feature maps bound to continuous coordinates in the unit square.
//!
//! Cell (r, c) of an H x W grid is centered at ((c+0.5)/W, (r+0.5)/H), so one
//! query coordinate addresses every pyramid level at once.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("query ({x}, {y}) outside the unit square")]
    OutOfRange { x: f64, y: f64 },
    #[error("grid values shape {got:?} does not match (C={c}, H={h}, W={w})")]
    BadShape { got: Vec<usize>, c: usize, h: usize, w: usize },
}

/// Continuous query position, both components in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryCoord {
    pub x: f64,
    pub y: f64,
}

impl QueryCoord {
    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

/// One pyramid level: C feature channels on an H x W grid at stride 2^level.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub level: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Shape (C, H, W).
    pub values: Tensor,
}

/// Result of a nearest-latent lookup.
#[derive(Debug, Clone)]
pub struct NearestLatent {
    pub row: usize,
    pub col: usize,
    pub code: Vec<f64>,
    pub center: QueryCoord,
    /// q - center, rescaled by (W, H) so each component lies in [-0.5, 0.5].
    pub delta: [f64; 2],
}

impl FeatureGrid {
    pub fn new(level: u32, values: Tensor) -> Result<Self, GridError> {
        if values.shape.len() != 3 {
            return Err(GridError::BadShape { got: values.shape.clone(), c: 0, h: 0, w: 0 });
        }
        let (c, h, w) = (values.shape[0], values.shape[1], values.shape[2]);
        Ok(FeatureGrid { level, channels: c, height: h, width: w, values })
    }

    pub fn stride(&self) -> u64 {
        1u64 << self.level
    }

    pub fn cell_center(&self, row: usize, col: usize) -> QueryCoord {
        QueryCoord {
            x: (col as f64 + 0.5) / self.width as f64,
            y: (row as f64 + 0.5) / self.height as f64,
        }
    }

    pub fn code_at(&self, row: usize, col: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.channels)
            .map(|c| self.values.data[c * hw + row * self.width + col])
            .collect()
    }

    /// Index of the cell whose center is Euclidean-nearest to `q`; exact
    /// midpoint ties break toward the smaller index on each axis, which is
    /// lexicographically smallest (row, col) overall.
    pub fn nearest_cell(&self, q: QueryCoord) -> Result<(usize, usize), GridError> {
        if !q.in_unit_square() {
            return Err(GridError::OutOfRange { x: q.x, y: q.y });
        }
        Ok((
            nearest_index(q.y, self.height),
            nearest_index(q.x, self.width),
        ))
    }

    pub fn nearest_latent(&self, q: QueryCoord) -> Result<NearestLatent, GridError> {
        let (row, col) = self.nearest_cell(q)?;
        let center = self.cell_center(row, col);
        let delta = [
            (q.x - center.x) * self.width as f64,
            (q.y - center.y) * self.height as f64,
        ];
        Ok(NearestLatent { row, col, code: self.code_at(row, col), center, delta })
    }

    /// Bilinear interpolation over the four surrounding cell centers with
    /// edge replication at the borders.
    pub fn bilinear_at(&self, q: QueryCoord) -> Result<Vec<f64>, GridError> {
        if !q.in_unit_square() {
            return Err(GridError::OutOfRange { x: q.x, y: q.y });
        }
        let (x0, x1, wx) = axis_span(q.x, self.width);
        let (y0, y1, wy) = axis_span(q.y, self.height);
        let hw = self.height * self.width;
        let w = self.width;
        Ok((0..self.channels)
            .map(|c| {
                let base = c * hw;
                let v00 = self.values.data[base + y0 * w + x0];
                let v01 = self.values.data[base + y0 * w + x1];
                let v10 = self.values.data[base + y1 * w + x0];
                let v11 = self.values.data[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                top + (bot - top) * wy
            })
            .collect())
    }
}

/// Nearest cell (row, col) for a query on an h x w grid.
pub fn nearest_rc(h: usize, w: usize, q: QueryCoord) -> (usize, usize) {
    (nearest_index(q.y, h), nearest_index(q.x, w))
}

/// Per-level normalized delta: (q - center) scaled by (W, H), so each
/// component lies in [-0.5, 0.5] regardless of level.
pub fn normalized_delta(h: usize, w: usize, q: QueryCoord, row: usize, col: usize) -> [f64; 2] {
    [
        (q.x - (col as f64 + 0.5) / w as f64) * w as f64,
        (q.y - (row as f64 + 0.5) / h as f64) * h as f64,
    ]
}

/// Nearest cell index along one axis of n cells with centers (i+0.5)/n.
/// Ties at exact midpoints go to the smaller index.
fn nearest_index(coord: f64, n: usize) -> usize {
    let s = coord * n as f64 - 0.5; // continuous cell-index space
    if s <= 0.0 {
        return 0;
    }
    let i0 = s.floor() as usize;
    if i0 >= n - 1 {
        return n - 1;
    }
    // distance to i0 center is (s - i0), to i0+1 is (i0 + 1 - s)
    if s - i0 as f64 <= (i0 + 1) as f64 - s {
        i0
    } else {
        i0 + 1
    }
}

/// Surrounding index pair and interpolation weight along one axis.
fn axis_span(coord: f64, n: usize) -> (usize, usize, f64) {
    let s = coord * n as f64 - 0.5;
    if s <= 0.0 {
        (0, 0, 0.0)
    } else if s >= (n - 1) as f64 {
        (n - 1, n - 1, 0.0)
    } else {
        let i0 = s.floor() as usize;
        (i0, i0 + 1, s - i0 as f64)
    }
}

/// Pixel-center coordinate of cell (row, col) in an h x w raster.
pub fn query_grid_point(row: usize, col: usize, h: usize, w: usize) -> QueryCoord {
    QueryCoord {
        x: (col as f64 + 0.5) / w as f64,
        y: (row as f64 + 0.5) / h as f64,
    }
}

/// Pixel-center query coordinates for an h x w output raster, row-major.
pub fn query_grid(h_out: usize, w_out: usize) -> Vec<QueryCoord> {
    assert!(h_out >= 1 && w_out >= 1, "query_grid needs h_out, w_out >= 1");
    let mut out = Vec::with_capacity(h_out * w_out);
    for r in 0..h_out {
        for c in 0..w_out {
            out.push(QueryCoord {
                x: (c as f64 + 0.5) / w_out as f64,
                y: (r as f64 + 0.5) / h_out as f64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> FeatureGrid {
        let data = (0..c * h * w).map(f).collect();
        FeatureGrid::new(2, Tensor::new(vec![c, h, w], data)).unwrap()
    }

    #[test]
    fn nearest_quadrant_membership() {
        let g = grid(2, 2, 1, |i| i as f64);
        let nl = g.nearest_latent(QueryCoord { x: 0.3, y: 0.7 }).unwrap();
        assert_eq!((nl.row, nl.col), (1, 0));
        assert_eq!(nl.center, QueryCoord { x: 0.25, y: 0.75 });
    }

    #[test]
    fn nearest_at_center_has_zero_delta() {
        let g = grid(3, 5, 2, |i| i as f64);
        let q = g.cell_center(1, 3);
        let nl = g.nearest_latent(q).unwrap();
        assert_eq!((nl.row, nl.col), (1, 3));
        assert_eq!(nl.delta, [0.0, 0.0]);
    }

    #[test]
    fn midpoint_tie_breaks_low() {
        // Midpoint between columns 0 and 1 of a 2-wide grid is x = 0.5.
        let g = grid(2, 2, 1, |i| i as f64);
        let nl = g.nearest_latent(QueryCoord { x: 0.5, y: 0.5 }).unwrap();
        assert_eq!((nl.row, nl.col), (0, 0));
    }

    #[test]
    fn out_of_range_rejected() {
        let g = grid(2, 2, 1, |i| i as f64);
        assert!(g.nearest_latent(QueryCoord { x: 1.1, y: 0.0 }).is_err());
        assert!(g.bilinear_at(QueryCoord { x: 0.0, y: -0.1 }).is_err());
    }

    #[test]
    fn query_grid_small_cases() {
        assert_eq!(query_grid(1, 1), vec![QueryCoord { x: 0.5, y: 0.5 }]);
        assert_eq!(
            query_grid(2, 2),
            vec![
                QueryCoord { x: 0.25, y: 0.25 },
                QueryCoord { x: 0.75, y: 0.25 },
                QueryCoord { x: 0.25, y: 0.75 },
                QueryCoord { x: 0.75, y: 0.75 },
            ]
        );
        let g35 = query_grid(3, 5);
        assert_eq!(g35.len(), 15);
        assert!(g35
            .iter()
            .all(|q| q.x > 0.0 && q.x < 1.0 && q.y > 0.0 && q.y < 1.0));
    }

    #[test]
    fn bilinear_identity_at_centers_and_midpoints() {
        let g = grid(3, 4, 2, |i| (i * i) as f64);
        for r in 0..3 {
            for c in 0..4 {
                let v = g.bilinear_at(g.cell_center(r, c)).unwrap();
                assert_eq!(v, g.code_at(r, c));
            }
        }
        // midway between two horizontally adjacent centers
        let a = g.cell_center(1, 1);
        let b = g.cell_center(1, 2);
        let mid = QueryCoord { x: 0.5 * (a.x + b.x), y: a.y };
        let v = g.bilinear_at(mid).unwrap();
        let (va, vb) = (g.code_at(1, 1), g.code_at(1, 2));
        for ((m, x), y) in v.iter().zip(&va).zip(&vb) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_resolution_lookup_is_bijective() {
        let g = grid(4, 6, 1, |i| i as f64);
        let mut seen = vec![false; 24];
        for q in query_grid(4, 6) {
            let nl = g.nearest_latent(q).unwrap();
            assert_eq!(nl.delta, [0.0, 0.0]);
            let idx = nl.row * 6 + nl.col;
            assert!(!seen[idx]);
            seen[idx] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
