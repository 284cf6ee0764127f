//! Pyramid grid geometry: which image point each feature cell stands for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn new(level: usize, row: usize, col: usize) -> Self {
        Self { level, row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LevelGrid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Cells whose centers lie inside the `width x height` content region,
    /// in row-major order.
    pub fn cells_within(&self, width: usize, height: usize) -> (usize, usize) {
        let s = self.stride;
        // (2i + 1) s < 2 extent
        let fit = |extent: usize| ((2 * extent + s - 1) / (2 * s)).max(1);
        let rows = fit(height).min(self.rows);
        let cols = fit(width).min(self.cols);
        (rows, cols)
    }
}

/// Grid dims of every pyramid level for a (padded) `width x height` input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidGrid {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<LevelGrid>,
}

impl PyramidGrid {
    pub fn level(&self, level: usize) -> &LevelGrid {
        &self.levels[level]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn cell_center(&self, cell: CellIndex) -> Result<(f64, f64)> {
        let lg = self.levels.get(cell.level).ok_or_else(|| {
            Error::ContractViolation(format!(
                "level {} outside pyramid of {}",
                cell.level,
                self.levels.len()
            ))
        })?;
        if cell.row >= lg.rows || cell.col >= lg.cols {
            return Err(Error::ContractViolation(format!(
                "cell ({}, {}) outside {}x{} grid at level {}",
                cell.row, cell.col, lg.rows, lg.cols, cell.level
            )));
        }
        Ok(lg.center(cell.row, cell.col))
    }
}

/// `rows = ceil(H / s)`, `cols = ceil(W / s)` for each stride.
pub fn grid_geometry(width: usize, height: usize, strides: &[usize]) -> PyramidGrid {
    let levels = strides
        .iter()
        .map(|&s| LevelGrid {
            stride: s,
            rows: height.div_ceil(s).max(1),
            cols: width.div_ceil(s).max(1),
        })
        .collect();
    PyramidGrid {
        width,
        height,
        levels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

    #[test]
    fn standard_input_dims() {
        let g = grid_geometry(608, 608, &STRIDES);
        let dims: Vec<_> = g.levels.iter().map(|l| (l.rows, l.cols)).collect();
        assert_eq!(dims, [(76, 76), (38, 38), (19, 19), (10, 10), (5, 5)]);
        let g = grid_geometry(256, 256, &STRIDES);
        assert_eq!((g.level(0).rows, g.level(4).rows), (32, 2));
        let g = grid_geometry(8, 8, &STRIDES);
        assert_eq!((g.level(0).rows, g.level(0).cols), (1, 1));
    }

    #[test]
    fn centers() {
        let g = grid_geometry(608, 608, &STRIDES);
        assert_eq!(g.cell_center(CellIndex::new(0, 0, 1)).unwrap(), (12.0, 4.0));
        assert_eq!(
            g.cell_center(CellIndex::new(4, 0, 0)).unwrap(),
            (64.0, 64.0)
        );
        let (x0, _) = g.cell_center(CellIndex::new(2, 3, 4)).unwrap();
        let (x1, _) = g.cell_center(CellIndex::new(2, 3, 5)).unwrap();
        assert_eq!(x1 - x0, 32.0);
        assert!(g.cell_center(CellIndex::new(0, 76, 0)).is_err());
        assert!(g.cell_center(CellIndex::new(5, 0, 0)).is_err());
    }

    #[test]
    fn content_region_counts_cells_by_center() {
        let lg = LevelGrid {
            stride: 8,
            rows: 76,
            cols: 76,
        };
        // Centers at 4, 12, ..., 396 lie below 400; 404 does not.
        assert_eq!(lg.cells_within(400, 608), (76, 50));
        assert_eq!(lg.cells_within(3, 3), (1, 1));
        let brute = |extent: usize| {
            (0..76)
                .filter(|&i| (i as f64 + 0.5) * 8.0 < extent as f64)
                .count()
                .max(1)
        };
        for e in 1..608 {
            assert_eq!(lg.cells_within(e, e).0, brute(e), "extent {e}");
        }
    }
}
