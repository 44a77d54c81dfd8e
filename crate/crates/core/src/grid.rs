//! Component ordering, distances, predecessor sets and local boxes.
//!
//! Indices are 0-based. A `Ring` is periodic (Lorenz-96 style); a `Rect` is
//! not, and boxes clip at its edges. Box membership uses the Chebyshev
//! distance, while [`GridGeometry::taper_weight`] uses the Euclidean one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("grid extents must be at least 1")]
    EmptyGrid,
    #[error("radius {radius} exceeds the largest grid extent {extent}")]
    RadiusTooLarge { radius: usize, extent: usize },
    #[error("index {index} outside a grid of {size} components")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("coordinate {coord:?} outside the grid shape")]
    CoordOutOfRange { coord: Coord },
    #[error("taper radius must be positive")]
    ZeroTaperRadius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Ring(usize),
    Rect { rows: usize, cols: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    #[default]
    RowMajor,
    ColumnMajor,
}

/// Grid coordinate: `Ring` uses `row = 0` and `col` as position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredecessorSet {
    pub component: usize,
    pub predecessors: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    shape: Shape,
    ordering: Ordering,
    radius: usize,
}

impl GridGeometry {
    pub fn new(shape: Shape, ordering: Ordering, radius: usize) -> Result<Self, GeometryError> {
        let extent = match shape {
            Shape::Ring(n) if n >= 1 => n,
            Shape::Rect { rows, cols } if rows >= 1 && cols >= 1 => rows.max(cols),
            _ => return Err(GeometryError::EmptyGrid),
        };
        if radius > extent {
            return Err(GeometryError::RadiusTooLarge { radius, extent });
        }
        Ok(Self {
            shape,
            ordering,
            radius,
        })
    }

    pub fn ring(n: usize, radius: usize) -> Result<Self, GeometryError> {
        Self::new(Shape::Ring(n), Ordering::RowMajor, radius)
    }

    pub fn rect(
        rows: usize,
        cols: usize,
        ordering: Ordering,
        radius: usize,
    ) -> Result<Self, GeometryError> {
        Self::new(Shape::Rect { rows, cols }, ordering, radius)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Same grid with a different radius of influence.
    pub fn with_radius(&self, radius: usize) -> Result<Self, GeometryError> {
        Self::new(self.shape, self.ordering, radius)
    }

    pub fn size(&self) -> usize {
        match self.shape {
            Shape::Ring(n) => n,
            Shape::Rect { rows, cols } => rows * cols,
        }
    }

    fn check_index(&self, k: usize) -> Result<(), GeometryError> {
        if k < self.size() {
            Ok(())
        } else {
            Err(GeometryError::IndexOutOfRange {
                index: k,
                size: self.size(),
            })
        }
    }

    pub fn index_of(&self, coord: Coord) -> Result<usize, GeometryError> {
        match self.shape {
            Shape::Ring(n) if coord.row == 0 && coord.col < n => Ok(coord.col),
            Shape::Rect { rows, cols } if coord.row < rows && coord.col < cols => {
                Ok(match self.ordering {
                    Ordering::RowMajor => coord.row * cols + coord.col,
                    Ordering::ColumnMajor => coord.col * rows + coord.row,
                })
            }
            _ => Err(GeometryError::CoordOutOfRange { coord }),
        }
    }

    pub fn coord_of(&self, k: usize) -> Result<Coord, GeometryError> {
        self.check_index(k)?;
        Ok(match self.shape {
            Shape::Ring(_) => Coord { row: 0, col: k },
            Shape::Rect { rows, cols } => match self.ordering {
                Ordering::RowMajor => Coord {
                    row: k / cols,
                    col: k % cols,
                },
                Ordering::ColumnMajor => Coord {
                    row: k % rows,
                    col: k / rows,
                },
            },
        })
    }

    /// Per-axis offsets `(drow, dcol)` between two cells; periodic on a ring.
    fn offsets(&self, a: Coord, b: Coord) -> (usize, usize) {
        match self.shape {
            Shape::Ring(n) => {
                let d = a.col.abs_diff(b.col);
                (0, d.min(n - d))
            }
            Shape::Rect { .. } => (a.row.abs_diff(b.row), a.col.abs_diff(b.col)),
        }
    }

    /// Chebyshev distance between components.
    pub fn box_distance(&self, k: usize, l: usize) -> Result<usize, GeometryError> {
        let (dr, dc) = self.offsets(self.coord_of(k)?, self.coord_of(l)?);
        Ok(dr.max(dc))
    }

    /// Euclidean distance between components (arc distance on a ring).
    pub fn distance(&self, k: usize, l: usize) -> Result<f64, GeometryError> {
        let (dr, dc) = self.offsets(self.coord_of(k)?, self.coord_of(l)?);
        Ok(((dr * dr + dc * dc) as f64).sqrt())
    }

    /// Every component within the radius box around `k`, including `k`, ascending.
    pub fn local_box(&self, k: usize) -> Result<Vec<usize>, GeometryError> {
        let c = self.coord_of(k)?;
        let z = self.radius;
        let mut out = match self.shape {
            Shape::Ring(n) => {
                if 2 * z + 1 >= n {
                    (0..n).collect()
                } else {
                    (0..=2 * z).map(|o| (k + n + o - z) % n).collect::<Vec<_>>()
                }
            }
            Shape::Rect { rows, cols } => {
                let r0 = c.row.saturating_sub(z);
                let r1 = (c.row + z).min(rows - 1);
                let c0 = c.col.saturating_sub(z);
                let c1 = (c.col + z).min(cols - 1);
                let mut v = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
                for row in r0..=r1 {
                    for col in c0..=c1 {
                        v.push(self.index_of(Coord { row, col })?);
                    }
                }
                v
            }
        };
        out.sort_unstable();
        Ok(out)
    }

    /// Components of the local box that precede `k` in the ordering.
    pub fn predecessors(&self, k: usize) -> Result<PredecessorSet, GeometryError> {
        let predecessors = self.local_box(k)?.into_iter().filter(|&j| j < k).collect();
        Ok(PredecessorSet {
            component: k,
            predecessors,
        })
    }

    /// Gaussian taper `exp(-d² / (2ζ²))` for the given taper radius.
    pub fn taper_weight(&self, k: usize, l: usize, radius: f64) -> Result<f64, GeometryError> {
        if radius <= 0.0 {
            return Err(GeometryError::ZeroTaperRadius);
        }
        let d = self.distance(k, l)?;
        Ok((-d * d / (2.0 * radius * radius)).exp())
    }

    /// Dense taper matrix over the whole grid.
    pub fn taper_matrix(&self, radius: f64) -> Result<DenseMatrix, GeometryError> {
        let n = self.size();
        let mut m = DenseMatrix::zeros(n, n);
        for k in 0..n {
            for l in 0..n {
                m[(k, l)] = self.taper_weight(k, l, radius)?;
            }
        }
        Ok(m)
    }
}
