//! Nonlocal peridynamic operator on uniform lattices.
//!
//! Displacements live on an extended lattice: the interior nodes of `Ω` plus a
//! collar of boundary nodes wide enough to evaluate every bond (and, for
//! state-based models, every dilatation) that an interior node touches.
//! Bonds are midpoint quadrature with nodal volume `Δx²` and a linear
//! partial-volume factor near the horizon edge.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_recon::Tensor2;
use crate::grid::{Point, UniformGrid};

pub type Vec2 = [f64; 2];

/// One lattice bond, shared by every node.
#[derive(Clone, Debug, PartialEq)]
pub struct Bond {
    pub offset: [i64; 2],
    pub xi: Vec2,
    pub length: f64,
    /// Quadrature weight (area).
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Horizon {
    pub delta: f64,
    pub spacing: f64,
    pub bonds: Vec<Bond>,
    /// Largest lattice offset along either axis.
    pub reach: usize,
}

impl Horizon {
    pub fn new(delta: f64, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite() && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("bad horizon delta={delta} spacing={spacing}")));
        }
        let cut = delta * (1.0 - 1e-12);
        let span = (delta / spacing).ceil() as i64;
        let volume = spacing * spacing;
        let mut bonds = Vec::new();
        for j in -span..=span {
            for i in -span..=span {
                if i == 0 && j == 0 {
                    continue;
                }
                let xi = [i as f64 * spacing, j as f64 * spacing];
                let length = xi[0].hypot(xi[1]);
                if length >= cut {
                    continue;
                }
                let factor = if length <= delta - 0.5 * spacing {
                    1.0
                } else {
                    (delta + 0.5 * spacing - length) / spacing
                };
                bonds.push(Bond { offset: [i, j], xi, length, weight: factor * volume });
            }
        }
        if bonds.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "horizon {delta} is smaller than the lattice spacing {spacing}"
            )));
        }
        let reach = bonds.iter().map(|b| b.offset[0].unsigned_abs().max(b.offset[1].unsigned_abs())).max().unwrap() as usize;
        Ok(Self { delta, spacing, bonds, reach })
    }
}

/// Interior lattice plus boundary collar.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriGrid {
    pub interior: UniformGrid,
    pub horizon: Horizon,
    /// Collar width in nodes (twice the horizon reach).
    pub collar: usize,
    pub full: UniformGrid,
}

impl PeriGrid {
    pub fn new(interior: UniformGrid, delta: f64) -> Result<Self> {
        let [hx, hy] = interior.spacing;
        if (hx - hy).abs() > 1e-12 * hx.max(hy) {
            return Err(Error::InvalidParameter(format!("peridynamic lattice must be square, got spacing {hx} x {hy}")));
        }
        let horizon = Horizon::new(delta, hx)?;
        let collar = 2 * horizon.reach;
        let origin = [interior.origin[0] - collar as f64 * hx, interior.origin[1] - collar as f64 * hx];
        let full = UniformGrid::new([interior.dims[0] + 2 * collar, interior.dims[1] + 2 * collar], origin, [hx, hx])?;
        Ok(Self { interior, horizon, collar, full })
    }

    /// Split a measured lattice into interior and collar, so the outer layers act as boundary data.
    pub fn inset(lattice: UniformGrid, delta: f64) -> Result<Self> {
        let h = lattice.spacing[0];
        let c = 2 * Horizon::new(delta, h)?.reach;
        let [nx, ny] = lattice.dims;
        if nx < 2 * c + 2 || ny < 2 * c + 2 {
            return Err(Error::InvalidParameter(format!(
                "{nx}x{ny} lattice leaves no interior inside a {c}-node boundary collar"
            )));
        }
        let origin = [lattice.origin[0] + c as f64 * h, lattice.origin[1] + c as f64 * h];
        let interior = UniformGrid::new([nx - 2 * c, ny - 2 * c], origin, lattice.spacing)?;
        let mut grid = Self::new(interior, delta)?;
        grid.full = lattice;
        Ok(grid)
    }

    /// Full-lattice index of interior node `(i, j)`.
    pub fn full_index(&self, i: usize, j: usize) -> usize {
        self.full.index(i + self.collar, j + self.collar)
    }

    /// Full-lattice indices of the interior nodes, in interior order.
    pub fn interior_nodes(&self) -> Vec<usize> {
        let [nx, ny] = self.interior.dims;
        (0..ny).flat_map(|j| (0..nx).map(move |i| (i, j))).map(|(i, j)| self.full_index(i, j)).collect()
    }

    /// Layers between a full-lattice node and the interior (0 inside).
    pub fn depth(&self, k: usize) -> usize {
        let (i, j) = self.full.ij(k);
        let c = self.collar;
        let gap = |p: usize, n: usize| if p < c { c - p } else if p >= c + n { p + 1 - c - n } else { 0 };
        gap(i, self.interior.dims[0]).max(gap(j, self.interior.dims[1]))
    }

    pub fn neighbor(&self, k: usize, offset: [i64; 2]) -> usize {
        let (i, j) = self.full.ij(k);
        self.full.index((i as i64 + offset[0]) as usize, (j as i64 + offset[1]) as usize)
    }

    /// Evaluate `f` on every node of the extended lattice.
    pub fn sample(&self, f: impl Fn(Point) -> Vec2) -> Vec<Vec2> {
        self.full.points().into_iter().map(f).collect()
    }

    /// Extended field with interior values from `interior_u` and collar values from `boundary`.
    pub fn with_interior(&self, boundary: &[Vec2], interior_u: &[Vec2]) -> Result<Vec<Vec2>> {
        if boundary.len() != self.full.len() || interior_u.len() != self.interior.len() {
            return Err(Error::InvalidParameter("field length does not match the lattice".into()));
        }
        let mut u = boundary.to_vec();
        for (k, v) in self.interior_nodes().into_iter().zip(interior_u) {
            u[k] = *v;
        }
        Ok(u)
    }

    /// Restrict an extended field to the interior nodes.
    pub fn restrict(&self, u: &[Vec2]) -> Vec<Vec2> {
        self.interior_nodes().into_iter().map(|k| u[k]).collect()
    }
}

/// Radial profile of the influence function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Influence {
    #[default]
    Constant,
    Conical,
}

/// Influence function `ω(ξ) = ρ(|ξ|)(1 + κ(ξ1² − ξ2²)/|ξ|²)`; `κ` aligns stiffness with the first axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub delta: f64,
    pub profile: Influence,
    pub anisotropy: f64,
}

impl Kernel {
    pub fn isotropic(delta: f64) -> Self {
        Self { delta, profile: Influence::Constant, anisotropy: 0.0 }
    }

    pub fn eval(&self, xi: Vec2) -> f64 {
        let r2 = xi[0] * xi[0] + xi[1] * xi[1];
        let r = r2.sqrt();
        if r >= self.delta || r == 0.0 {
            return 0.0;
        }
        let radial = match self.profile {
            Influence::Constant => 1.0,
            Influence::Conical => 1.0 - r / self.delta,
        };
        radial * (1.0 + self.anisotropy * (xi[0] * xi[0] - xi[1] * xi[1]) / r2)
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidModel(format!("kernel radius must be positive, got {}", self.delta)));
        }
        if !(self.anisotropy.abs() < 1.0) {
            return Err(Error::InvalidModel(format!("anisotropy must lie in (-1, 1), got {}", self.anisotropy)));
        }
        Ok(())
    }
}

pub trait ForceStateModel: Sync {
    /// Influence function, zero outside the horizon.
    fn omega(&self, xi: Vec2) -> f64;

    /// Fiber orientation angle at `x`.
    fn alpha(&self, _x: Point) -> f64 {
        0.0
    }

    /// Scalar force state `t(ω, θ, e, |ξ|)`.
    fn scalar_force(&self, omega: f64, theta: f64, extension: f64, length: f64) -> f64;

    /// Whether `scalar_force` reads θ. Bond-based models return false.
    fn uses_dilatation(&self) -> bool {
        true
    }

    /// `∂t/∂e` in closed form, if known.
    fn force_derivative(&self, _omega: f64, _theta: f64, _extension: f64, _length: f64) -> Option<f64> {
        None
    }
}

/// `t = c ω e / |ξ|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearBond {
    pub c: f64,
    pub kernel: Kernel,
    pub alpha: f64,
}

impl LinearBond {
    pub fn new(c: f64, kernel: Kernel) -> Result<Self> {
        kernel.validate()?;
        if !c.is_finite() {
            return Err(Error::InvalidModel(format!("stiffness must be finite, got {c}")));
        }
        Ok(Self { c, kernel, alpha: 0.0 })
    }

    /// Plane micromodulus matching Young's modulus `e` for a constant kernel.
    pub fn from_modulus(e: f64, delta: f64) -> Result<Self> {
        Self::new(9.0 * e / (std::f64::consts::PI * delta.powi(3)), Kernel::isotropic(delta))
    }
}

impl ForceStateModel for LinearBond {
    fn omega(&self, xi: Vec2) -> f64 {
        self.kernel.eval(xi)
    }
    fn alpha(&self, _x: Point) -> f64 {
        self.alpha
    }
    fn scalar_force(&self, omega: f64, _theta: f64, extension: f64, length: f64) -> f64 {
        self.c * omega * extension / length
    }
    fn uses_dilatation(&self) -> bool {
        false
    }
    fn force_derivative(&self, omega: f64, _theta: f64, _extension: f64, length: f64) -> Option<f64> {
        Some(self.c * omega / length)
    }
}

/// `t = a θ ω |ξ| + c ω e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearState {
    pub a: f64,
    pub c: f64,
    pub kernel: Kernel,
    pub alpha: f64,
}

impl LinearState {
    pub fn new(a: f64, c: f64, kernel: Kernel) -> Result<Self> {
        kernel.validate()?;
        if !(a.is_finite() && c.is_finite()) {
            return Err(Error::InvalidModel(format!("coefficients must be finite, got a={a} c={c}")));
        }
        Ok(Self { a, c, kernel, alpha: 0.0 })
    }
}

impl ForceStateModel for LinearState {
    fn omega(&self, xi: Vec2) -> f64 {
        self.kernel.eval(xi)
    }
    fn alpha(&self, _x: Point) -> f64 {
        self.alpha
    }
    fn scalar_force(&self, omega: f64, theta: f64, extension: f64, length: f64) -> f64 {
        self.a * theta * omega * length + self.c * omega * extension
    }
    fn force_derivative(&self, omega: f64, _theta: f64, _extension: f64, _length: f64) -> Option<f64> {
        Some(self.c * omega)
    }
}

/// Config-file description of a bundled model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearBond {
        c: f64,
        #[serde(default)]
        influence: Influence,
        #[serde(default)]
        anisotropy: f64,
        #[serde(default)]
        alpha: f64,
    },
    LinearState {
        a: f64,
        c: f64,
        #[serde(default)]
        influence: Influence,
        #[serde(default)]
        anisotropy: f64,
        #[serde(default)]
        alpha: f64,
    },
}

impl ModelSpec {
    pub fn build(&self, delta: f64) -> Result<Box<dyn ForceStateModel + Send>> {
        Ok(match *self {
            ModelSpec::LinearBond { c, influence, anisotropy, alpha } => {
                let mut m = LinearBond::new(c, Kernel { delta, profile: influence, anisotropy })?;
                m.alpha = alpha;
                Box::new(m)
            }
            ModelSpec::LinearState { a, c, influence, anisotropy, alpha } => {
                let mut m = LinearState::new(a, c, Kernel { delta, profile: influence, anisotropy })?;
                m.alpha = alpha;
                Box::new(m)
            }
        })
    }
}

/// `R(−α)ξ`.
pub fn rotate_bond(xi: Vec2, alpha: f64) -> Vec2 {
    let (s, c) = alpha.sin_cos();
    [c * xi[0] + s * xi[1], -s * xi[0] + c * xi[1]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BondState {
    pub neighbor: usize,
    pub xi: Vec2,
    pub eta: Vec2,
    pub extension: f64,
    pub direction: Vec2,
    pub weight: f64,
}

fn bond_state(grid: &PeriGrid, u: &[Vec2], k: usize, bond: &Bond) -> Result<BondState> {
    let q = grid.neighbor(k, bond.offset);
    let eta = [u[q][0] - u[k][0], u[q][1] - u[k][1]];
    let y = [bond.xi[0] + eta[0], bond.xi[1] + eta[1]];
    let len = y[0].hypot(y[1]);
    if !(len >= 1e-14 * bond.length) {
        return Err(Error::DegenerateBond { from: k, to: q });
    }
    Ok(BondState {
        neighbor: q,
        xi: bond.xi,
        eta,
        extension: len - bond.length,
        direction: [y[0] / len, y[1] / len],
        weight: bond.weight,
    })
}

/// Bond states of full-lattice node `k`. The node must sit within one horizon reach of the interior.
pub fn bond_states(grid: &PeriGrid, u: &[Vec2], k: usize) -> Result<Vec<BondState>> {
    check_length(grid, u)?;
    if grid.depth(k) > grid.collar - grid.horizon.reach {
        return Err(Error::InvalidParameter(format!("node {k} is too close to the lattice edge")));
    }
    grid.horizon.bonds.iter().map(|b| bond_state(grid, u, k, b)).collect()
}

fn check_length(grid: &PeriGrid, u: &[Vec2]) -> Result<()> {
    if u.len() != grid.full.len() {
        return Err(Error::InvalidParameter(format!(
            "field has {} nodes, extended lattice has {}",
            u.len(),
            grid.full.len()
        )));
    }
    Ok(())
}

fn check_boundary(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<()> {
    check_length(grid, u)?;
    let needed = if model.uses_dilatation() { grid.collar } else { grid.horizon.reach };
    let nodes: Vec<usize> = (0..u.len())
        .filter(|&k| !(u[k][0].is_finite() && u[k][1].is_finite()) && grid.depth(k) <= needed)
        .collect();
    if nodes.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingBoundary { nodes })
    }
}

fn dilatation_at(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2], k: usize) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for b in &grid.horizon.bonds {
        let s = bond_state(grid, u, k, b)?;
        let w = model.omega(b.xi);
        num += w * s.extension * b.length * b.weight;
        den += w * b.length * b.length * b.weight;
    }
    if !(den > 0.0) {
        return Err(Error::InvalidModel(format!("dilatation denominator is {den}")));
    }
    Ok(num / den)
}

/// Nonlocal dilatation `θ` at full-lattice node `k`.
pub fn dilatation(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2], k: usize) -> Result<f64> {
    check_length(grid, u)?;
    if grid.depth(k) > grid.collar - grid.horizon.reach {
        return Err(Error::InvalidParameter(format!("node {k} is too close to the lattice edge")));
    }
    dilatation_at(grid, model, u, k)
}

/// Per-node θ and α on every node that an interior bond reaches.
struct NodeData {
    theta: Vec<f64>,
    alpha: Vec<f64>,
}

fn node_data(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<NodeData> {
    let reach = grid.horizon.reach;
    let points = grid.full.points();
    let alpha: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(k, &x)| if grid.depth(k) <= reach { model.alpha(x) } else { 0.0 })
        .collect();
    let theta = if model.uses_dilatation() {
        (0..u.len())
            .into_par_iter()
            .map(|k| if grid.depth(k) <= reach { dilatation_at(grid, model, u, k) } else { Ok(0.0) })
            .collect::<Result<Vec<f64>>>()?
    } else {
        vec![0.0; u.len()]
    };
    Ok(NodeData { theta, alpha })
}

/// Force terms of one bond: `t_x`, `t_q` and the bond state.
fn bond_forces(
    grid: &PeriGrid,
    model: &dyn ForceStateModel,
    u: &[Vec2],
    data: &NodeData,
    k: usize,
    bond: &Bond,
) -> Result<(f64, f64, BondState)> {
    let s = bond_state(grid, u, k, bond)?;
    let q = s.neighbor;
    let wx = model.omega(rotate_bond(bond.xi, data.alpha[k]));
    let wq = model.omega(rotate_bond([-bond.xi[0], -bond.xi[1]], data.alpha[q]));
    let tx = model.scalar_force(wx, data.theta[k], s.extension, bond.length);
    let tq = model.scalar_force(wq, data.theta[q], s.extension, bond.length);
    Ok((tx, tq, s))
}

/// `G[u]` at the interior nodes, in interior order.
pub fn apply_operator(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<Vec<Vec2>> {
    check_boundary(grid, model, u)?;
    let data = node_data(grid, model, u)?;
    grid.interior_nodes()
        .into_par_iter()
        .map(|k| {
            let mut g = [0.0; 2];
            for b in &grid.horizon.bonds {
                let (tx, tq, s) = bond_forces(grid, model, u, &data, k, b)?;
                let f = (tx + tq) * s.weight;
                g[0] += f * s.direction[0];
                g[1] += f * s.direction[1];
            }
            Ok(g)
        })
        .collect()
}

/// First Piola–Kirchhoff stress `Σ t D ⊗ ξ w` at each interior node.
pub fn pk1_field(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<Vec<Tensor2>> {
    check_boundary(grid, model, u)?;
    let data = node_data(grid, model, u)?;
    grid.interior_nodes()
        .into_par_iter()
        .map(|k| {
            let mut p = [[0.0; 2]; 2];
            for b in &grid.horizon.bonds {
                let (tx, _, s) = bond_forces(grid, model, u, &data, k, b)?;
                for (i, row) in p.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += tx * s.direction[i] * b.xi[j] * s.weight;
                    }
                }
            }
            Ok(p)
        })
        .collect()
}

/// Interior average of the nodal first Piola–Kirchhoff stress.
pub fn average_pk1(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<Tensor2> {
    let field = pk1_field(grid, model, u)?;
    let n = field.len() as f64;
    let mut avg = [[0.0; 2]; 2];
    for p in &field {
        for i in 0..2 {
            for j in 0..2 {
                avg[i][j] += p[i][j] / n;
            }
        }
    }
    Ok(avg)
}

/// Discrete L² norm over the interior with nodal volume `Δx²`.
pub fn l2_norm(grid: &PeriGrid, f: &[Vec2]) -> f64 {
    let h = grid.horizon.spacing;
    f.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>().sqrt() * h
}

/// Mean of `‖G[u] + b‖ / ‖b‖` over samples of (extended `u`, interior `b`).
pub fn residual_loss(grid: &PeriGrid, model: &dyn ForceStateModel, samples: &[(Vec<Vec2>, Vec<Vec2>)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    let mut total = 0.0;
    for (s, (u, b)) in samples.iter().enumerate() {
        if b.len() != grid.interior.len() {
            return Err(Error::InvalidParameter(format!("loading of sample {s} has wrong length")));
        }
        let bn = l2_norm(grid, b);
        if bn == 0.0 {
            return Err(Error::ZeroDenominator(format!("loading of sample {s} has zero L2 norm")));
        }
        let g = apply_operator(grid, model, u)?;
        let r: Vec<Vec2> = g.iter().zip(b).map(|(g, b)| [g[0] + b[0], g[1] + b[1]]).collect();
        total += l2_norm(grid, &r) / bn;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Floor for `‖b‖` in the relative residual, so `b = 0` is solvable.
    pub loading_floor: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            loading_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Extended displacement field.
    pub u: Vec<Vec2>,
    pub iterations: usize,
    /// Relative residual before each update and at exit.
    pub history: Vec<f64>,
    /// True when the analytic bond tangent drove the iteration, false for the
    /// finite-difference Jacobian used by dilatation-coupled models.
    pub newton: bool,
}

/// Solve `G[u] + b = 0` for the interior displacements with `u` fixed to `bc` on the collar.
///
/// `bc` is an extended field; its interior values are the initial guess.
pub fn solve_displacement(
    grid: &PeriGrid,
    model: &dyn ForceStateModel,
    b: &[Vec2],
    bc: &[Vec2],
    params: &SolverParams,
) -> Result<Solution> {
    if b.len() != grid.interior.len() {
        return Err(Error::InvalidParameter("loading length does not match the interior".into()));
    }
    if !(params.tolerance > 0.0 && params.loading_floor > 0.0) {
        return Err(Error::InvalidParameter("solver tolerance and loading floor must be positive".into()));
    }
    check_boundary(grid, model, bc)?;
    let nodes = grid.interior_nodes();
    let n = nodes.len();
    let scale = l2_norm(grid, b).max(params.loading_floor);
    let newton = !model.uses_dilatation() && model.force_derivative(1.0, 0.0, 0.0, 1.0).is_some();

    let residual = |u: &[Vec2]| -> Result<(DVector<f64>, f64)> {
        let g = apply_operator(grid, model, u)?;
        let r = DVector::from_fn(2 * n, |m, _| g[m / 2][m % 2] + b[m / 2][m % 2]);
        let norm = r.norm() * grid.horizon.spacing / scale;
        Ok((r, norm))
    };

    let mut u = bc.to_vec();
    let (mut r, mut norm) = residual(&u)?;
    let mut history = vec![norm];

    for it in 0..params.max_iterations {
        if norm < params.tolerance {
            return Ok(Solution { u, iterations: it, history, newton });
        }
        let jac = if newton { jacobian(grid, model, &u)? } else { fd_jacobian(grid, model, &u)? };
        let step = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::NotConverged { iterations: it, history: history.clone() })?;

        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = u.clone();
            for (m, &k) in nodes.iter().enumerate() {
                trial[k][0] += damping * step[2 * m];
                trial[k][1] += damping * step[2 * m + 1];
            }
            if let Ok((tr, tn)) = residual(&trial) {
                if tn < norm {
                    u = trial;
                    r = tr;
                    norm = tn;
                    accepted = true;
                    break;
                }
            }
            damping *= 0.5;
        }
        history.push(norm);
        if !accepted {
            break;
        }
    }
    if norm < params.tolerance {
        let iterations = history.len() - 1;
        return Ok(Solution { u, iterations, history, newton });
    }
    Err(Error::NotConverged { iterations: history.len() - 1, history })
}

/// Forward-difference `∂G/∂u` over interior unknowns.
fn fd_jacobian(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<DMatrix<f64>> {
    let nodes = grid.interior_nodes();
    let g0 = apply_operator(grid, model, u)?;
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v[0].abs()).max(v[1].abs()));
    let h = 1e-7 * umax.max(grid.horizon.spacing);
    let cols: Vec<DVector<f64>> = (0..2 * nodes.len())
        .into_par_iter()
        .map(|col| {
            let mut up = u.to_vec();
            up[nodes[col / 2]][col % 2] += h;
            let g = apply_operator(grid, model, &up)?;
            Ok(DVector::from_fn(2 * g.len(), |m, _| (g[m / 2][m % 2] - g0[m / 2][m % 2]) / h))
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Analytic `∂G/∂u` over interior unknowns for models without dilatation.
fn jacobian(grid: &PeriGrid, model: &dyn ForceStateModel, u: &[Vec2]) -> Result<DMatrix<f64>> {
    let nodes = grid.interior_nodes();
    let mut slot = vec![usize::MAX; grid.full.len()];
    for (m, &k) in nodes.iter().enumerate() {
        slot[k] = m;
    }
    let data = node_data(grid, model, u)?;
    let blocks: Vec<Vec<(usize, [[f64; 2]; 2])>> = nodes
        .par_iter()
        .map(|&k| {
            let mut out = Vec::with_capacity(grid.horizon.bonds.len());
            for b in &grid.horizon.bonds {
                let wx = model.omega(rotate_bond(b.xi, data.alpha[k]));
                let q = grid.neighbor(k, b.offset);
                let wq = model.omega(rotate_bond([-b.xi[0], -b.xi[1]], data.alpha[q]));
                let tangent = {
                    let (tx, tq, s) = bond_forces(grid, model, u, &data, k, b)?;
                    let (th_x, th_q) = (data.theta[k], data.theta[q]);
                    let dt = model.force_derivative(wx, th_x, s.extension, b.length).unwrap_or(0.0)
                        + model.force_derivative(wq, th_q, s.extension, b.length).unwrap_or(0.0);
                    let ylen = b.length + s.extension;
                    let secant = (tx + tq) / ylen;
                    let d = s.direction;
                    let mut t = [[0.0; 2]; 2];
                    for i in 0..2 {
                        for j in 0..2 {
                            let id = if i == j { 1.0 } else { 0.0 };
                            t[i][j] = b.weight * (dt * d[i] * d[j] + secant * (id - d[i] * d[j]));
                        }
                    }
                    t
                };
                out.push((q, tangent));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n = nodes.len();
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for (m, list) in blocks.iter().enumerate() {
        for &(q, t) in list {
            for i in 0..2 {
                for j in 0..2 {
                    jac[(2 * m + i, 2 * m + j)] -= t[i][j];
                    if slot[q] != usize::MAX {
                        jac[(2 * m + i, 2 * slot[q] + j)] += t[i][j];
                    }
                }
            }
        }
    }
    Ok(jac)
}
