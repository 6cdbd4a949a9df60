//! Reproducing-kernel shape functions on 2D point sets.
//!
//! A shape function centered at `x̄_I` is the window `φ^a(x − x̄_I)` corrected
//! by a polynomial `H(x − x̄_I)ᵀ c(x)`, with `c(x) = M(x)⁻¹ H(0)` chosen so that
//! every monomial of degree `≤ n` is reproduced exactly.
//!
//! Internally the monomials are evaluated on `(x − x̄_I) / a`. That is a
//! diagonal change of polynomial basis, so the shape functions are unchanged,
//! but the moment matrix stays well scaled whatever length unit the data uses.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NodeGrid, Point};

/// Moment matrices with a condition estimate above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Highest supported polynomial order.
pub const MAX_ORDER: usize = 2;

/// Compactly supported window family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// `w(s) = 2/3 − 4s² + 4s³` on `[0, ½)`, `(4/3)(1 − s)³` on `[½, 1)`, zero beyond.
    #[default]
    CubicBspline,
}

impl Window {
    /// Value and derivative with respect to the normalized distance `s = r / a`.
    fn eval(self, s: f64) -> (f64, f64) {
        match self {
            Window::CubicBspline => {
                if s < 0.5 {
                    (2.0 / 3.0 - 4.0 * s * s + 4.0 * s * s * s, -8.0 * s + 12.0 * s * s)
                } else if s < 1.0 {
                    let t = 1.0 - s;
                    (4.0 / 3.0 * t * t * t, -4.0 * t * t)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

/// Cubic B-spline window at distance `r` for support `a`.
pub fn window_eval(r: f64, a: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidParameter(format!("support size must be positive, got {a}")));
    }
    if !(r >= 0.0) {
        return Err(Error::InvalidParameter(format!("distance must be non-negative, got {r}")));
    }
    Ok(Window::CubicBspline.eval(r / a).0)
}

/// Number of 2D monomials of degree `≤ n`.
pub fn num_monomials(n: usize) -> usize {
    (n + 1) * (n + 2) / 2
}

/// Monomials of degree `≤ n` in graded lexicographic order:
/// `1, d1, d2, d1², d1·d2, d2², …`.
pub fn monomial_basis(d: Point, n: usize) -> Result<Vec<f64>> {
    check_order(n)?;
    let mut out = vec![0.0; num_monomials(n)];
    let mut dx = [vec![0.0; out.len()], vec![0.0; out.len()]];
    monomials(d, n, &mut out, &mut dx);
    Ok(out)
}

fn check_order(n: usize) -> Result<()> {
    if n > MAX_ORDER {
        return Err(Error::InvalidParameter(format!(
            "polynomial order {n} not supported (max {MAX_ORDER})"
        )));
    }
    Ok(())
}

/// Monomials and their partial derivatives, graded-lex order.
fn monomials(d: Point, n: usize, h: &mut [f64], dh: &mut [Vec<f64>; 2]) {
    let mut k = 0;
    for deg in 0..=n {
        for py in 0..=deg {
            let px = deg - py;
            h[k] = d[0].powi(px as i32) * d[1].powi(py as i32);
            dh[0][k] = if px > 0 {
                px as f64 * d[0].powi(px as i32 - 1) * d[1].powi(py as i32)
            } else {
                0.0
            };
            dh[1][k] = if py > 0 {
                py as f64 * d[0].powi(px as i32) * d[1].powi(py as i32 - 1)
            } else {
                0.0
            };
            k += 1;
        }
    }
}

/// Weighted Gram matrix of the (support-scaled) monomials at one point.
#[derive(Clone, Debug)]
pub struct MomentMatrix {
    pub entries: DMatrix<f64>,
    pub condition: f64,
}

/// Moment matrix at `x` over `centers`, with monomials evaluated on `(x − x̄_I)/a`.
pub fn moment_matrix(x: Point, centers: &[Point], a: f64, n: usize) -> Result<MomentMatrix> {
    let kernel = RkKernel::new(centers.to_vec(), a, n, Window::CubicBspline)?;
    let local = kernel.local(x, 0)?;
    Ok(MomentMatrix {
        entries: local.moment,
        condition: local.condition,
    })
}

/// One nonzero entry of a shape-function row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeEntry {
    pub center: usize,
    pub value: f64,
    pub grad: [f64; 2],
}

/// Kernel centers plus the approximation parameters; evaluates shape functions anywhere.
#[derive(Clone, Debug)]
pub struct RkKernel {
    centers: Vec<Point>,
    support: f64,
    order: usize,
    window: Window,
}

struct Local {
    moment: DMatrix<f64>,
    condition: f64,
    /// Centers in support with their offset `x − x̄_I`.
    neighbors: Vec<(usize, Point)>,
}

impl RkKernel {
    pub fn new(centers: Vec<Point>, support: f64, order: usize, window: Window) -> Result<Self> {
        check_order(order)?;
        if !(support > 0.0 && support.is_finite()) {
            return Err(Error::InvalidParameter(format!("support size must be positive, got {support}")));
        }
        if centers.len() < num_monomials(order) {
            return Err(Error::InvalidParameter(format!(
                "{} centers cannot support order {order} ({} monomials)",
                centers.len(),
                num_monomials(order)
            )));
        }
        Ok(Self {
            centers,
            support,
            order,
            window,
        })
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn support(&self) -> f64 {
        self.support
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn window(&self) -> Window {
        self.window
    }

    fn local(&self, x: Point, point_index: usize) -> Result<Local> {
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::InvalidParameter(format!("evaluation point {point_index} is not finite")));
        }
        let m = num_monomials(self.order);
        let a = self.support;
        let mut moment = DMatrix::zeros(m, m);
        let mut neighbors = Vec::new();
        let mut h = vec![0.0; m];
        let mut dh = [vec![0.0; m], vec![0.0; m]];
        for (i, c) in self.centers.iter().enumerate() {
            let d = [x[0] - c[0], x[1] - c[1]];
            let r = d[0].hypot(d[1]);
            if r >= a {
                continue;
            }
            let (w, _) = self.window.eval(r / a);
            monomials([d[0] / a, d[1] / a], self.order, &mut h, &mut dh);
            for p in 0..m {
                for q in p..m {
                    moment[(p, q)] += h[p] * w * h[q];
                }
            }
            neighbors.push((i, d));
        }
        for p in 0..m {
            for q in 0..p {
                moment[(p, q)] = moment[(q, p)];
            }
        }
        let condition = if neighbors.len() < m {
            f64::INFINITY
        } else {
            condition_estimate(&moment)
        };
        if !(condition <= SINGULAR_CONDITION) {
            return Err(Error::SingularMoment {
                point: point_index,
                centers: neighbors.len(),
                condition,
            });
        }
        Ok(Local {
            moment,
            condition,
            neighbors,
        })
    }

    /// All nonzero shape functions at `x` with their gradients.
    ///
    /// `point_index` only labels errors.
    pub fn evaluate(&self, x: Point, point_index: usize) -> Result<Vec<ShapeEntry>> {
        let local = self.local(x, point_index)?;
        let m = num_monomials(self.order);
        let a = self.support;
        let chol = local
            .moment
            .clone()
            .cholesky()
            .ok_or(Error::SingularMoment {
                point: point_index,
                centers: local.neighbors.len(),
                condition: local.condition,
            })?;
        let mut e1 = DVector::zeros(m);
        e1[0] = 1.0;
        let b = chol.solve(&e1);

        // Per-neighbor monomials, window, and their x-derivatives.
        let mut cache = Vec::with_capacity(local.neighbors.len());
        let mut dm = [DMatrix::zeros(m, m), DMatrix::zeros(m, m)];
        let mut h = vec![0.0; m];
        let mut dh = [vec![0.0; m], vec![0.0; m]];
        for &(idx, d) in &local.neighbors {
            let r = d[0].hypot(d[1]);
            let (w, dw_ds) = self.window.eval(r / a);
            let dw = if r > 0.0 {
                [dw_ds / a * d[0] / r, dw_ds / a * d[1] / r]
            } else {
                [0.0, 0.0]
            };
            monomials([d[0] / a, d[1] / a], self.order, &mut h, &mut dh);
            let hk = DVector::from_column_slice(&h);
            let dhk = [
                DVector::from_iterator(m, dh[0].iter().map(|v| v / a)),
                DVector::from_iterator(m, dh[1].iter().map(|v| v / a)),
            ];
            for k in 0..2 {
                // ∂M/∂x_k = Σ (∂h φ hᵀ + h ∂φ hᵀ + h φ ∂hᵀ)
                let outer = &dhk[k] * hk.transpose();
                dm[k] += (&outer + outer.transpose()) * w + &hk * hk.transpose() * dw[k];
            }
            cache.push((idx, hk, dhk, w, dw));
        }
        // ∂b/∂x_k = −M⁻¹ (∂M/∂x_k) b
        let db = [chol.solve(&(&dm[0] * &b)) * -1.0, chol.solve(&(&dm[1] * &b)) * -1.0];

        Ok(cache
            .into_iter()
            .map(|(center, hk, dhk, w, dw)| {
                let hb = hk.dot(&b);
                let mut grad = [0.0; 2];
                for k in 0..2 {
                    grad[k] = dhk[k].dot(&b) * w + hk.dot(&db[k]) * w + hb * dw[k];
                }
                ShapeEntry {
                    center,
                    value: hb * w,
                    grad,
                }
            })
            .collect())
    }

    /// Shape function of center `center` at `x`; zero outside its support.
    pub fn shape_function(&self, x: Point, center: usize) -> Result<f64> {
        self.check_center(center)?;
        Ok(self
            .evaluate(x, 0)?
            .into_iter()
            .find(|e| e.center == center)
            .map_or(0.0, |e| e.value))
    }

    /// Gradient of the shape function of center `center` at `x`.
    pub fn shape_gradient(&self, x: Point, center: usize) -> Result<[f64; 2]> {
        self.check_center(center)?;
        Ok(self
            .evaluate(x, 0)?
            .into_iter()
            .find(|e| e.center == center)
            .map_or([0.0, 0.0], |e| e.grad))
    }

    fn check_center(&self, center: usize) -> Result<()> {
        if center >= self.centers.len() {
            return Err(Error::InvalidParameter(format!(
                "center index {center} out of range ({} centers)",
                self.centers.len()
            )));
        }
        Ok(())
    }

    /// Precompute shape rows at every point. Rows are independent, so this runs in parallel.
    pub fn assemble(&self, points: &[Point]) -> Result<RkBasis> {
        let rows: Vec<Result<Vec<ShapeEntry>>> = points
            .par_iter()
            .enumerate()
            .map(|(j, &x)| self.evaluate(x, j))
            .collect();
        let mut failed = Vec::new();
        let mut ok = Vec::with_capacity(rows.len());
        for (j, row) in rows.into_iter().enumerate() {
            match row {
                Ok(r) => ok.push(r),
                Err(Error::SingularMoment { .. }) => failed.push(j),
                Err(e) => return Err(e),
            }
        }
        if !failed.is_empty() {
            return Err(Error::AssemblyFailed { points: failed });
        }
        Ok(RkBasis {
            kernel: self.clone(),
            points: points.to_vec(),
            rows: ok,
        })
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Shape functions and gradients precomputed at a fixed set of evaluation points.
#[derive(Clone, Debug)]
pub struct RkBasis {
    kernel: RkKernel,
    points: Vec<Point>,
    rows: Vec<Vec<ShapeEntry>>,
}

impl RkBasis {
    pub fn kernel(&self) -> &RkKernel {
        &self.kernel
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_centers(&self) -> usize {
        self.kernel.num_centers()
    }

    pub fn order(&self) -> usize {
        self.kernel.order
    }

    pub fn support(&self) -> f64 {
        self.kernel.support
    }

    pub fn row(&self, j: usize) -> &[ShapeEntry] {
        &self.rows[j]
    }

    pub fn rows(&self) -> &[Vec<ShapeEntry>] {
        &self.rows
    }

    /// Dense `N_NP × N_RK` matrix of shape-function values.
    pub fn shape_matrix(&self) -> DMatrix<f64> {
        self.dense(|e| e.value)
    }

    /// Dense matrix of `∂Φ/∂x_k` (`k` = 0 or 1).
    pub fn grad_matrix(&self, k: usize) -> DMatrix<f64> {
        assert!(k < 2, "gradient component must be 0 or 1");
        self.dense(|e| e.grad[k])
    }

    fn dense(&self, f: impl Fn(&ShapeEntry) -> f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.points.len(), self.num_centers());
        for (j, row) in self.rows.iter().enumerate() {
            for e in row {
                out[(j, e.center)] = f(e);
            }
        }
        out
    }
}

/// Shape functions of `grid`'s centers evaluated at its measurement points.
pub fn assemble_basis(grid: &NodeGrid, a: f64, n: usize, window: Window) -> Result<RkBasis> {
    if grid.num_points() < num_monomials(n) {
        return Err(Error::InvalidParameter(format!(
            "{} measurement points cannot determine order {n}",
            grid.num_points()
        )));
    }
    let kernel = RkKernel::new(grid.kernel_centers.clone(), a, n, window)?;
    kernel.assemble(&grid.measurement_points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UniformGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn standard_grid() -> NodeGrid {
        let m = UniformGrid::spanning([21, 21], [0.0, 0.0], [1.0, 1.0]).unwrap();
        NodeGrid::uniform(m, [10, 10]).unwrap()
    }

    #[test]
    fn window_values() {
        let a = 0.7;
        assert_eq!(window_eval(a, a).unwrap(), 0.0);
        assert!((window_eval(0.0, a).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // (4/3)(1 − 0.5)³ = 1/6, and the inner piece 2/3 − 1 + 0.5 agrees.
        assert!((window_eval(0.5 * a, a).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let inner: f64 = 2.0 / 3.0 - 4.0 * 0.25 + 4.0 * 0.125;
        assert!((inner - 1.0 / 6.0).abs() < 1e-15);
        assert!(window_eval(0.99 * a, a).unwrap() > 0.0);
        assert!(window_eval(0.5, 0.0).is_err());
        assert!(window_eval(0.5, -1.0).is_err());
    }

    #[test]
    fn window_is_c2_at_breakpoint() {
        let w = Window::CubicBspline;
        let eps = 1e-9;
        let (l, dl) = w.eval(0.5 - eps);
        let (r, dr) = w.eval(0.5);
        assert!((l - r).abs() < 1e-8);
        assert!((dl - dr).abs() < 1e-7);
        // second derivative: −8 + 24s vs 8(1 − s)
        assert!(((-8.0 + 24.0 * 0.5) - 8.0 * 0.5_f64).abs() < 1e-15);
    }

    #[test]
    fn monomials_graded_lex() {
        assert_eq!(monomial_basis([0.0, 0.0], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(monomial_basis([2.0, -3.0], 1).unwrap(), vec![1.0, 2.0, -3.0]);
        assert_eq!(
            monomial_basis([2.0, -3.0], 2).unwrap(),
            vec![1.0, 2.0, -3.0, 4.0, -6.0, 9.0]
        );
        assert_eq!(monomial_basis([2.0, -3.0], 0).unwrap(), vec![1.0]);
        assert!(monomial_basis([0.0, 0.0], 3).is_err());
    }

    #[test]
    fn moment_matrix_empty_support_is_singular() {
        let err = moment_matrix([10.0, 10.0], &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.5, 1).unwrap_err();
        assert!(matches!(err, Error::SingularMoment { centers: 0, .. }));
    }

    #[test]
    fn moment_matrix_single_center_order_zero() {
        let m = moment_matrix([0.3, 0.4], &[[0.3, 0.4]], 1.0, 0).unwrap();
        assert_eq!(m.entries.shape(), (1, 1));
        assert!((m.entries[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.condition - 1.0).abs() < 1e-15);
    }

    #[test]
    fn moment_matrix_matches_direct_sum() {
        let grid = standard_grid();
        let a = 3.1 * grid.spacing;
        let x = [0.5, 0.5];
        let m = moment_matrix(x, &grid.kernel_centers, a, 1).unwrap();
        // Direct sum over every center, window written out independently.
        let mut oracle = [[0.0; 3]; 3];
        for c in &grid.kernel_centers {
            let d = [(x[0] - c[0]) / a, (x[1] - c[1]) / a];
            let s = d[0].hypot(d[1]);
            let w = if s < 0.5 {
                2.0 / 3.0 - 4.0 * s * s + 4.0 * s.powi(3)
            } else if s < 1.0 {
                4.0 / 3.0 * (1.0 - s).powi(3)
            } else {
                0.0
            };
            let h = [1.0, d[0], d[1]];
            for p in 0..3 {
                for q in 0..3 {
                    oracle[p][q] += h[p] * h[q] * w;
                }
            }
        }
        for p in 0..3 {
            for q in 0..3 {
                assert!((m.entries[(p, q)] - oracle[p][q]).abs() < 1e-12);
                assert_eq!(m.entries[(p, q)], m.entries[(q, p)]);
            }
        }
    }

    #[test]
    fn reproduction_and_compact_support() {
        let grid = standard_grid();
        let kernel = RkKernel::new(grid.kernel_centers.clone(), 3.1 * grid.spacing, 1, Window::CubicBspline).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let row = kernel.evaluate(x, 0).unwrap();
            let sum: f64 = row.iter().map(|e| e.value).sum();
            assert!((sum - 1.0).abs() < 1e-10);
            for k in 0..2 {
                let lin: f64 = row.iter().map(|e| e.value * grid.kernel_centers[e.center][k]).sum();
                assert!((lin - x[k]).abs() < 1e-10);
                let g0: f64 = row.iter().map(|e| e.grad[k]).sum();
                assert!(g0.abs() < 1e-8);
                for l in 0..2 {
                    let g: f64 = row.iter().map(|e| e.grad[k] * grid.kernel_centers[e.center][l]).sum();
                    let expect = if k == l { 1.0 } else { 0.0 };
                    assert!((g - expect).abs() < 1e-8);
                }
            }
            for (i, c) in grid.kernel_centers.iter().enumerate() {
                let r = (x[0] - c[0]).hypot(x[1] - c[1]);
                let present = row.iter().any(|e| e.center == i);
                assert_eq!(present, r < kernel.support());
            }
        }
        let far = grid
            .kernel_centers
            .iter()
            .position(|c| c[0].hypot(c[1]) > 0.5)
            .unwrap();
        assert_eq!(kernel.shape_function([0.0, 0.0], far).unwrap(), 0.0);
        assert_eq!(kernel.shape_gradient([0.0, 0.0], far).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn quadratic_order_reproduces_quadratics() {
        let grid = standard_grid();
        let kernel = RkKernel::new(grid.kernel_centers.clone(), 3.1 * grid.spacing, 2, Window::CubicBspline).unwrap();
        let p = |x: Point| 0.3 + x[0] - 2.0 * x[1] + 0.7 * x[0] * x[0] - 1.1 * x[0] * x[1] + 0.4 * x[1] * x[1];
        let dp = |x: Point| [1.0 + 1.4 * x[0] - 1.1 * x[1], -2.0 - 1.1 * x[0] + 0.8 * x[1]];
        for x in [[0.1, 0.2], [0.5, 0.5], [0.93, 0.07], [0.0, 1.0]] {
            let row = kernel.evaluate(x, 0).unwrap();
            let v: f64 = row.iter().map(|e| e.value * p(grid.kernel_centers[e.center])).sum();
            assert!((v - p(x)).abs() < 1e-9 * (1.0 + p(x).abs()));
            for k in 0..2 {
                let g: f64 = row.iter().map(|e| e.grad[k] * p(grid.kernel_centers[e.center])).sum();
                assert!((g - dp(x)[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn tiny_support_fails_assembly() {
        let grid = standard_grid();
        let err = assemble_basis(&grid, 0.1 * grid.spacing, 1, Window::CubicBspline).unwrap_err();
        match err {
            Error::AssemblyFailed { points } => assert!(!points.is_empty()),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn assembled_rows_are_sparse() {
        let grid = standard_grid();
        let a = 2.1 * grid.spacing;
        let basis = assemble_basis(&grid, a, 1, Window::CubicBspline).unwrap();
        // Unit cells around lattice points inside the disc all fit in a disc of
        // radius r + √2/2, so the count is at most π(r + √2/2)² in units of Δx.
        let bound = (std::f64::consts::PI * (2.1 + 0.5_f64.sqrt()).powi(2)).ceil() as usize;
        for (x, row) in basis.points().iter().zip(basis.rows()) {
            let inside = grid
                .kernel_centers
                .iter()
                .filter(|c| (x[0] - c[0]).hypot(x[1] - c[1]) < a)
                .count();
            assert_eq!(row.len(), inside);
            assert!(row.len() <= bound, "{} > {bound}", row.len());
        }
        // at a center the disc holds exactly the 13 lattice points with i² + j² < 4.41
        let interior = grid.kernel_centers[44];
        assert_eq!(basis.kernel().evaluate(interior, 0).unwrap().len(), 13);
        assert_eq!(basis.shape_matrix().shape(), (441, 100));
    }

    #[test]
    fn assembly_is_deterministic() {
        let grid = standard_grid();
        let a = assemble_basis(&grid, 3.1 * grid.spacing, 1, Window::CubicBspline).unwrap();
        let b = assemble_basis(&grid, 3.1 * grid.spacing, 1, Window::CubicBspline).unwrap();
        assert_eq!(a.shape_matrix(), b.shape_matrix());
        assert_eq!(a.grad_matrix(0), b.grad_matrix(0));
        assert_eq!(a.grad_matrix(1), b.grad_matrix(1));
    }
}
