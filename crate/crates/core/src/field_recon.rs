//! Displacement, displacement-gradient, and Green–Lagrange strain fields from
//! kernel coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::rk_basis::RkBasis;

pub type Tensor2 = [[f64; 2]; 2];

/// Per-center vector coefficients `ū_I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub values: Vec<[f64; 2]>,
}

impl CoefficientField {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coefficients flattened component-major: all `u1` then all `u2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.values.len();
        let mut out = vec![0.0; 2 * n];
        for (i, v) in self.values.iter().enumerate() {
            out[i] = v[0];
            out[n + i] = v[1];
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        Self {
            values: (0..n).map(|i| [flat[i], flat[n + i]]).collect(),
        }
    }
}

/// Displacements and their gradients at evaluation points.
/// `grad_u[p][i][j] = ∂u_i/∂x_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub u: Vec<[f64; 2]>,
    pub grad_u: Vec<Tensor2>,
}

/// Green–Lagrange strain components and principal strains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainField {
    pub e11: Vec<f64>,
    pub e12: Vec<f64>,
    pub e22: Vec<f64>,
    pub principal_min: Vec<f64>,
    pub principal_max: Vec<f64>,
}

impl StrainField {
    pub fn len(&self) -> usize {
        self.e11.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e11.is_empty()
    }

    pub fn from_gradients(grads: &[Tensor2]) -> Self {
        let mut out = StrainField {
            e11: Vec::with_capacity(grads.len()),
            e12: Vec::with_capacity(grads.len()),
            e22: Vec::with_capacity(grads.len()),
            principal_min: Vec::with_capacity(grads.len()),
            principal_max: Vec::with_capacity(grads.len()),
        };
        for g in grads {
            let e = green_lagrange(g);
            let (lo, hi) = principal_strains(&e);
            out.e11.push(e[0][0]);
            out.e12.push(e[0][1]);
            out.e22.push(e[1][1]);
            out.principal_min.push(lo);
            out.principal_max.push(hi);
        }
        out
    }
}

/// `u(x) = Σ_I Φ_I(x) ū_I` and `∇u(x) = Σ_I ∇Φ_I(x) ū_I` at every basis point.
pub fn reconstruct_displacement(coeffs: &CoefficientField, basis: &RkBasis) -> Result<DisplacementField> {
    check_dims(coeffs, basis)?;
    let mut u = Vec::with_capacity(basis.num_points());
    let mut grad_u = Vec::with_capacity(basis.num_points());
    for row in basis.rows() {
        let mut uj = [0.0; 2];
        let mut gj = [[0.0; 2]; 2];
        for e in row {
            let c = coeffs.values[e.center];
            for i in 0..2 {
                uj[i] += e.value * c[i];
                for j in 0..2 {
                    gj[i][j] += e.grad[j] * c[i];
                }
            }
        }
        u.push(uj);
        grad_u.push(gj);
    }
    Ok(DisplacementField { u, grad_u })
}

pub(crate) fn check_dims(coeffs: &CoefficientField, basis: &RkBasis) -> Result<()> {
    if coeffs.len() != basis.num_centers() {
        return Err(Error::InvalidParameter(format!(
            "{} coefficients for {} kernel centers",
            coeffs.len(),
            basis.num_centers()
        )));
    }
    Ok(())
}

/// `E = ½(∇u + ∇uᵀ + ∇uᵀ∇u)`.
pub fn green_lagrange(g: &Tensor2) -> Tensor2 {
    let mut e = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in i..2 {
            let quad = g[0][i] * g[0][j] + g[1][i] * g[1][j];
            e[i][j] = 0.5 * (g[i][j] + g[j][i] + quad);
        }
    }
    e[1][0] = e[0][1];
    e
}

/// Eigenvalues `(min, max)` of a symmetric 2×2 tensor.
pub fn principal_strains(e: &Tensor2) -> (f64, f64) {
    let mean = 0.5 * (e[0][0] + e[1][1]);
    let half_diff = 0.5 * (e[0][0] - e[1][1]);
    let radius = half_diff.hypot(e[0][1]);
    (mean - radius, mean + radius)
}

/// Strain at every point of `basis`.
pub fn strain_field(coeffs: &CoefficientField, basis: &RkBasis) -> Result<StrainField> {
    let disp = reconstruct_displacement(coeffs, basis)?;
    Ok(StrainField::from_gradients(&disp.grad_u))
}

/// Nodal gradients of lattice data by finite differences: central in the
/// interior, one-sided on the edges. This is the unsmoothed baseline.
pub fn lattice_gradients(layout: &UniformGrid, u: &[[f64; 2]]) -> Result<Vec<Tensor2>> {
    if u.len() != layout.len() {
        return Err(Error::InvalidParameter(format!(
            "{} values for a {}x{} lattice",
            u.len(),
            layout.dims[0],
            layout.dims[1]
        )));
    }
    let [nx, ny] = layout.dims;
    let mut out = vec![[[0.0; 2]; 2]; u.len()];
    for j in 0..ny {
        for i in 0..nx {
            let here = layout.index(i, j);
            let steps = [
                (i.saturating_sub(1), (i + 1).min(nx - 1), 0),
                (j.saturating_sub(1), (j + 1).min(ny - 1), 1),
            ];
            for (lo, hi, axis) in steps {
                let (a, b) = if axis == 0 {
                    (layout.index(lo, j), layout.index(hi, j))
                } else {
                    (layout.index(i, lo), layout.index(i, hi))
                };
                let h = (hi - lo) as f64 * layout.spacing[axis];
                for c in 0..2 {
                    out[here][c][axis] = (u[b][c] - u[a][c]) / h;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NodeGrid;
    use crate::rk_basis::{assemble_basis, Window};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis() -> RkBasis {
        let m = UniformGrid::spanning([21, 21], [0.0, 0.0], [1.0, 1.0]).unwrap();
        let g = NodeGrid::uniform(m, [10, 10]).unwrap();
        assemble_basis(&g, 3.1 * g.spacing, 1, Window::CubicBspline).unwrap()
    }

    fn sample_at_centers(basis: &RkBasis, f: impl Fn([f64; 2]) -> [f64; 2]) -> CoefficientField {
        CoefficientField {
            values: basis.kernel().centers().iter().map(|&c| f(c)).collect(),
        }
    }

    #[test]
    fn zero_coefficients_give_zero_fields() {
        let b = basis();
        let d = reconstruct_displacement(&CoefficientField::zeros(100), &b).unwrap();
        assert!(d.u.iter().all(|v| *v == [0.0, 0.0]));
        assert!(d.grad_u.iter().all(|g| *g == [[0.0; 2]; 2]));
        let s = strain_field(&CoefficientField::zeros(100), &b).unwrap();
        assert!(s.e11.iter().chain(&s.e12).chain(&s.e22).all(|v| *v == 0.0));
    }

    #[test]
    fn affine_fields_are_reproduced() {
        let b = basis();
        let a = [[0.03, -0.01], [0.02, 0.05]];
        let t = [0.1, -0.2];
        let f = |x: [f64; 2]| {
            [
                a[0][0] * x[0] + a[0][1] * x[1] + t[0],
                a[1][0] * x[0] + a[1][1] * x[1] + t[1],
            ]
        };
        let d = reconstruct_displacement(&sample_at_centers(&b, f), &b).unwrap();
        for (x, (u, g)) in b.points().iter().zip(d.u.iter().zip(&d.grad_u)) {
            let expect = f(*x);
            for i in 0..2 {
                assert!((u[i] - expect[i]).abs() < 1e-9);
                for j in 0..2 {
                    assert!((g[i][j] - a[i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn quadratic_field_matches_direct_summation() {
        let b = basis();
        let f = |x: [f64; 2]| [x[0] * x[0], x[0] * x[1]];
        let coeffs = sample_at_centers(&b, f);
        let d = reconstruct_displacement(&coeffs, &b).unwrap();
        let phi = b.shape_matrix();
        for j in 0..b.num_points() {
            for i in 0..2 {
                let mut s = 0.0;
                for c in 0..b.num_centers() {
                    s += phi[(j, c)] * coeffs.values[c][i];
                }
                assert!((d.u[j][i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let b = basis();
        assert!(matches!(
            reconstruct_displacement(&CoefficientField::zeros(99), &b),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn green_lagrange_cases() {
        assert_eq!(green_lagrange(&[[0.0; 2]; 2]), [[0.0; 2]; 2]);
        let th: f64 = 0.3;
        let g = [[th.cos() - 1.0, -th.sin()], [th.sin(), th.cos() - 1.0]];
        let e = green_lagrange(&g);
        for row in e {
            for v in row {
                assert!(v.abs() < 1e-12);
            }
        }
        let e = green_lagrange(&[[0.1, 0.0], [0.0, -0.05]]);
        assert!((e[0][0] - 0.105).abs() < 1e-15);
        assert!((e[1][1] + 0.04875).abs() < 1e-15);
        assert_eq!(e[0][1], 0.0);
    }

    #[test]
    fn green_lagrange_is_symmetric_and_matches_matrix_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = [
                [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            ];
            let f = nalgebra::Matrix2::new(1.0 + g[0][0], g[0][1], g[1][0], 1.0 + g[1][1]);
            let oracle = (f.transpose() * f - nalgebra::Matrix2::identity()) * 0.5;
            let e = green_lagrange(&g);
            assert_eq!(e[0][1], e[1][0]);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((e[i][j] - oracle[(i, j)]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn principal_strain_cases() {
        assert_eq!(principal_strains(&[[0.105, 0.0], [0.0, -0.04875]]), (-0.04875, 0.105));
        let (lo, hi) = principal_strains(&[[0.0, 0.1], [0.1, 0.0]]);
        assert!((lo + 0.1).abs() < 1e-15 && (hi - 0.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (a, b, c): (f64, f64, f64) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            // λ² − (a + c)λ + (ac − b²) = 0
            let tr = a + c;
            let det = a * c - b * b;
            let disc: f64 = (tr * tr - 4.0 * det).max(0.0_f64).sqrt();
            let (r1, r2) = ((tr - disc) / 2.0, (tr + disc) / 2.0);
            let (lo, hi) = principal_strains(&[[a, b], [b, c]]);
            assert!(lo <= hi);
            assert!((lo - r1).abs() < 1e-12 && (hi - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_stretch_strain() {
        let b = basis();
        let coeffs = sample_at_centers(&b, |x| [0.01 * x[0], 0.01 * x[1]]);
        let s = strain_field(&coeffs, &b).unwrap();
        let expect = 0.01 + 0.5 * 0.0001;
        for j in 0..s.len() {
            assert!((s.e11[j] - expect).abs() < 1e-9);
            assert!((s.e22[j] - expect).abs() < 1e-9);
            assert!(s.e12[j].abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_has_no_strain() {
        let b = basis();
        let th: f64 = 0.2;
        let coeffs = sample_at_centers(&b, |x| {
            [
                th.cos() * x[0] - th.sin() * x[1] - x[0] + 0.3,
                th.sin() * x[0] + th.cos() * x[1] - x[1] - 0.1,
            ]
        });
        let s = strain_field(&coeffs, &b).unwrap();
        for j in 0..s.len() {
            assert!(s.e11[j].abs() < 1e-9 && s.e12[j].abs() < 1e-9 && s.e22[j].abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_is_linear() {
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_field = || CoefficientField {
            values: (0..100).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
        };
        let (c1, c2) = (rand_field(), rand_field());
        let (al, be) = (0.7, -1.3);
        let mix = CoefficientField {
            values: c1
                .values
                .iter()
                .zip(&c2.values)
                .map(|(p, q)| [al * p[0] + be * q[0], al * p[1] + be * q[1]])
                .collect(),
        };
        let (d1, d2, dm) = (
            reconstruct_displacement(&c1, &b).unwrap(),
            reconstruct_displacement(&c2, &b).unwrap(),
            reconstruct_displacement(&mix, &b).unwrap(),
        );
        for j in 0..b.num_points() {
            for i in 0..2 {
                assert!((dm.u[j][i] - (al * d1.u[j][i] + be * d2.u[j][i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lattice_gradients_are_exact_for_affine_data() {
        let g = UniformGrid::spanning([6, 5], [0.0, 0.0], [1.0, 2.0]).unwrap();
        let u: Vec<[f64; 2]> = g.points().iter().map(|x| [0.3 * x[0] - 0.1 * x[1], 0.2 * x[1]]).collect();
        for grad in lattice_gradients(&g, &u).unwrap() {
            assert!((grad[0][0] - 0.3).abs() < 1e-12 && (grad[0][1] + 0.1).abs() < 1e-12);
            assert!(grad[1][0].abs() < 1e-12 && (grad[1][1] - 0.2).abs() < 1e-12);
        }
        assert!(lattice_gradients(&g, &u[1..]).is_err());
    }
}
