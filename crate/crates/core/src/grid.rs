//! Point sets: uniform lattices and the measurement / kernel-center pairing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Axis-aligned uniform lattice, nodes numbered row-major with `x1` fastest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub dims: [usize; 2],
    pub origin: Point,
    pub spacing: [f64; 2],
}

impl UniformGrid {
    pub fn new(dims: [usize; 2], origin: Point, spacing: [f64; 2]) -> Result<Self> {
        if dims[0] < 2 || dims[1] < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 nodes per axis, got {}x{}",
                dims[0], dims[1]
            )));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0 && spacing[0].is_finite() && spacing[1].is_finite()) {
            return Err(Error::InvalidParameter(format!("grid spacing must be positive, got {spacing:?}")));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(Error::InvalidParameter("grid origin must be finite".into()));
        }
        Ok(Self { dims, origin, spacing })
    }

    /// Grid with `dims` nodes spanning the box `[lower, upper]` (both ends included).
    pub fn spanning(dims: [usize; 2], lower: Point, upper: Point) -> Result<Self> {
        if dims[0] < 2 || dims[1] < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 nodes per axis, got {}x{}",
                dims[0], dims[1]
            )));
        }
        let spacing = [
            (upper[0] - lower[0]) / (dims[0] - 1) as f64,
            (upper[1] - lower[1]) / (dims[1] - 1) as f64,
        ];
        Self::new(dims, lower, spacing)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.dims[0] + i
    }

    pub fn ij(&self, index: usize) -> (usize, usize) {
        (index % self.dims[0], index / self.dims[0])
    }

    pub fn point(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    pub fn upper(&self) -> Point {
        self.point(self.dims[0] - 1, self.dims[1] - 1)
    }

    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.dims[1] {
            for i in 0..self.dims[0] {
                out.push(self.point(i, j));
            }
        }
        out
    }

    /// Same bounding box, different resolution.
    pub fn with_dims(&self, dims: [usize; 2]) -> Result<Self> {
        Self::spanning(dims, self.origin, self.upper())
    }
}

/// Measurement points `x_J` paired with kernel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGrid {
    pub measurement_points: Vec<Point>,
    pub kernel_centers: Vec<Point>,
    /// Reference length for support sizes: the kernel-center spacing.
    pub spacing: f64,
    /// Lattice layout of the measurement points, when they form one.
    pub layout: Option<UniformGrid>,
}

impl NodeGrid {
    pub fn new(measurement_points: Vec<Point>, kernel_centers: Vec<Point>, spacing: f64) -> Result<Self> {
        let grid = Self {
            measurement_points,
            kernel_centers,
            spacing,
            layout: None,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Uniform measurement lattice with a uniform center lattice over the same bounding box.
    pub fn uniform(measurement: UniformGrid, center_dims: [usize; 2]) -> Result<Self> {
        let centers = measurement.with_dims(center_dims)?;
        let grid = Self {
            measurement_points: measurement.points(),
            kernel_centers: centers.points(),
            spacing: centers.spacing[0],
            layout: Some(measurement),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn num_points(&self) -> usize {
        self.measurement_points.len()
    }

    pub fn num_centers(&self) -> usize {
        self.kernel_centers.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("spacing must be positive, got {}", self.spacing)));
        }
        check_points("measurement point", &self.measurement_points)?;
        check_points("kernel center", &self.kernel_centers)?;
        Ok(())
    }
}

fn check_points(what: &str, points: &[Point]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidParameter(format!("no {what}s")));
    }
    if let Some(k) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::InvalidParameter(format!("{what} {k} is not finite")));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).unwrap());
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(Error::InvalidParameter(format!("duplicate {what}s {} and {}", w[0], w[1])));
        }
    }
    Ok(())
}
