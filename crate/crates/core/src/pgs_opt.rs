//! Kernel-coefficient fitting with a penalty on compressive normal strains.
//!
//! The fit starts from the unconstrained least-squares coefficients. If any
//! penalized normal strain is negative there, the coefficients are refined
//! with Adam on `loss_u + β·loss_E`, where `β` is rescaled by the warm-start
//! losses so that a single `β̃` works across length scales.

use nalgebra::{DMatrix, DVector, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_recon::{check_dims, CoefficientField, StrainField};
use crate::rk_basis::RkBasis;

/// Condition numbers of the shape matrix above this count as rank deficient.
pub const RANK_CONDITION: f64 = 1e12;

/// Which normal strains must stay non-negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMask {
    pub e11: bool,
    pub e22: bool,
}

impl ConstraintMask {
    pub const BOTH: Self = Self { e11: true, e22: true };
    pub const NONE: Self = Self { e11: false, e22: false };

    pub fn new(e11: bool, e22: bool) -> Self {
        Self { e11, e22 }
    }
}

impl Default for ConstraintMask {
    fn default() -> Self {
        Self::BOTH
    }
}

/// One DIC snapshot on a fixed measurement grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementSample {
    pub u_exp: Vec<[f64; 2]>,
    pub protocol_id: String,
    pub constraint_mask: ConstraintMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// How the warm-start losses rescale `β̃`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// `β = β̃ · loss_u / loss_E`, which makes `β·loss_E` commensurate with `loss_u`.
    #[default]
    LossRatio,
    /// `β = β̃ · loss_E / loss_u`, the reciprocal form; kept for comparison runs.
    InverseRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgsConfig {
    pub beta_tilde: f64,
    pub max_epochs: usize,
    pub tol_u: f64,
    pub tol_e: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Overrides the sample's own mask when set.
    pub constraint_mask: Option<ConstraintMask>,
    /// Warm-start strains below `-strain_eps` count as negative.
    pub strain_eps: f64,
    pub adam: AdamParams,
    pub beta_rule: BetaRule,
}

impl Default for PgsConfig {
    fn default() -> Self {
        Self {
            beta_tilde: 100.0,
            max_epochs: 50_000,
            tol_u: 3.0,
            tol_e: 1e-5,
            learning_rate: 1e-5,
            lr_decay: 0.9,
            lr_decay_every: 1_000,
            constraint_mask: None,
            strain_eps: 0.0,
            adam: AdamParams::default(),
            beta_rule: BetaRule::default(),
        }
    }
}

impl PgsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.beta_tilde >= 0.0 && self.beta_tilde.is_finite()) {
            return bad(format!("beta_tilde must be non-negative, got {}", self.beta_tilde));
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.tol_u > 0.0 && self.tol_e > 0.0) {
            return bad(format!("tolerances must be positive, got {} and {}", self.tol_u, self.tol_e));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_decay_every < 1 {
            return bad("lr_decay_every must be at least 1".into());
        }
        if !(self.strain_eps >= 0.0) {
            return bad(format!("strain_eps must be non-negative, got {}", self.strain_eps));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgsReport {
    /// `β_u`: data loss of the least-squares warm start.
    pub loss_u_initial: f64,
    /// `β_E`: strain penalty of the warm start.
    pub loss_e_initial: f64,
    pub beta_effective: f64,
    pub epochs_run: usize,
    pub loss_u_final: f64,
    pub loss_e_final: f64,
    pub converged: bool,
    pub skipped: bool,
    /// Epoch at which both stopping tests first held.
    pub break_epoch: Option<usize>,
    pub break_loss_u: Option<f64>,
    pub break_loss_e: Option<f64>,
}

/// `Σ_J |Σ_I Φ_I(x_J) ū_I − u_exp(x_J)|²`.
pub fn loss_u(coeffs: &CoefficientField, basis: &RkBasis, sample: &DisplacementSample) -> Result<f64> {
    check_dims(coeffs, basis)?;
    check_sample(sample, basis)?;
    let mut total = 0.0;
    for (row, target) in basis.rows().iter().zip(&sample.u_exp) {
        let mut u = [0.0; 2];
        for e in row {
            let c = coeffs.values[e.center];
            u[0] += e.value * c[0];
            u[1] += e.value * c[1];
        }
        total += (u[0] - target[0]).powi(2) + (u[1] - target[1]).powi(2);
    }
    Ok(total)
}

/// `Σ_J (relu(−E11) + relu(−E22))²` over the components selected by the sample's mask.
pub fn loss_e(coeffs: &CoefficientField, basis: &RkBasis, sample: &DisplacementSample) -> Result<f64> {
    check_sample(sample, basis)?;
    loss_e_masked(coeffs, basis, sample.constraint_mask)
}

pub fn loss_e_masked(coeffs: &CoefficientField, basis: &RkBasis, mask: ConstraintMask) -> Result<f64> {
    check_dims(coeffs, basis)?;
    let strain = crate::field_recon::strain_field(coeffs, basis)?;
    Ok(strain_penalty(&strain, mask))
}

/// Penalty value of an already computed strain field.
pub fn strain_penalty(strain: &StrainField, mask: ConstraintMask) -> f64 {
    (0..strain.len())
        .map(|j| {
            let s = masked_violation(strain.e11[j], mask.e11) + masked_violation(strain.e22[j], mask.e22);
            s * s
        })
        .sum()
}

fn masked_violation(e: f64, active: bool) -> f64 {
    if active && e < 0.0 {
        -e
    } else {
        0.0
    }
}

/// Fraction of points where any masked normal strain is below `-threshold`.
pub fn negative_fraction(strain: &StrainField, mask: ConstraintMask, threshold: f64) -> f64 {
    if strain.is_empty() {
        return 0.0;
    }
    let count = (0..strain.len())
        .filter(|&j| (mask.e11 && strain.e11[j] < -threshold) || (mask.e22 && strain.e22[j] < -threshold))
        .count();
    count as f64 / strain.len() as f64
}

fn check_sample(sample: &DisplacementSample, basis: &RkBasis) -> Result<()> {
    if sample.u_exp.len() != basis.num_points() {
        return Err(Error::InvalidParameter(format!(
            "sample has {} displacements for {} measurement points",
            sample.u_exp.len(),
            basis.num_points()
        )));
    }
    if sample.u_exp.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("sample contains non-finite displacements".into()));
    }
    Ok(())
}

/// Least-squares solver for `Φ ū = U_exp`, factorized once per basis.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rows: usize,
}

impl LeastSquares {
    pub fn new(basis: &RkBasis) -> Result<Self> {
        let phi = basis.shape_matrix();
        if phi.nrows() < phi.ncols() {
            return Err(Error::RankDeficient {
                smallest_singular: 0.0,
                condition: f64::INFINITY,
            });
        }
        let rows = phi.nrows();
        let svd = SVD::new(phi, true, true);
        let (min, max) = svd
            .singular_values
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= RANK_CONDITION) {
            return Err(Error::RankDeficient {
                smallest_singular: min,
                condition,
            });
        }
        Ok(Self { svd, rows })
    }

    pub fn condition(&self) -> f64 {
        let s = &self.svd.singular_values;
        s.max() / s.min()
    }

    /// Minimizer of `loss_u`, solved per displacement component.
    pub fn solve(&self, u_exp: &[[f64; 2]]) -> Result<CoefficientField> {
        if u_exp.len() != self.rows {
            return Err(Error::InvalidParameter(format!(
                "{} displacements for {} measurement points",
                u_exp.len(),
                self.rows
            )));
        }
        let rhs = DMatrix::from_fn(self.rows, 2, |j, i| u_exp[j][i]);
        let sol = self
            .svd
            .solve(&rhs, 0.0)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(CoefficientField {
            values: (0..sol.nrows()).map(|c| [sol[(c, 0)], sol[(c, 1)]]).collect(),
        })
    }
}

/// `ū† = argmin loss_u`, via the SVD of the shape matrix.
pub fn analytic_fit(basis: &RkBasis, sample: &DisplacementSample) -> Result<CoefficientField> {
    check_sample(sample, basis)?;
    LeastSquares::new(basis)?.solve(&sample.u_exp)
}

/// Effective penalty weight, or `None` when there is nothing to penalize.
pub fn rescale_beta(beta_tilde: f64, beta_u: f64, beta_e: f64) -> Option<f64> {
    rescale_beta_with(BetaRule::LossRatio, beta_tilde, beta_u, beta_e)
}

pub fn rescale_beta_with(rule: BetaRule, beta_tilde: f64, beta_u: f64, beta_e: f64) -> Option<f64> {
    if !(beta_e > 0.0) {
        return None;
    }
    if beta_tilde == 0.0 {
        return Some(0.0);
    }
    Some(match rule {
        BetaRule::LossRatio => beta_tilde * beta_u / beta_e,
        BetaRule::InverseRatio => beta_tilde * beta_e / beta_u,
    })
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: &AdamParams) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g;
        state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// Value of the hybrid objective with its analytic gradient.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss_u: f64,
    pub loss_e: f64,
    /// Gradient of `loss_u + β·loss_E`, component-major like [`CoefficientField::to_flat`].
    pub grad: Vec<f64>,
}

/// `loss_u + β·loss_E` and its gradient with respect to the flattened coefficients.
///
/// The relu subgradient at exactly zero strain is taken as zero.
pub fn objective(flat: &[f64], basis: &RkBasis, u_exp: &[[f64; 2]], mask: ConstraintMask, beta: f64) -> Objective {
    let n = basis.num_centers();
    assert_eq!(flat.len(), 2 * n);
    assert_eq!(u_exp.len(), basis.num_points());
    let mut grad = vec![0.0; 2 * n];
    let mut lu = 0.0;
    let mut le = 0.0;
    for (row, target) in basis.rows().iter().zip(u_exp) {
        let mut u = [0.0; 2];
        let mut g = [[0.0; 2]; 2];
        for e in row {
            let c = [flat[e.center], flat[n + e.center]];
            for i in 0..2 {
                u[i] += e.value * c[i];
                g[i][0] += e.grad[0] * c[i];
                g[i][1] += e.grad[1] * c[i];
            }
        }
        let r = [u[0] - target[0], u[1] - target[1]];
        lu += r[0] * r[0] + r[1] * r[1];

        let e11 = g[0][0] + 0.5 * (g[0][0] * g[0][0] + g[1][0] * g[1][0]);
        let e22 = g[1][1] + 0.5 * (g[0][1] * g[0][1] + g[1][1] * g[1][1]);
        let s = masked_violation(e11, mask.e11) + masked_violation(e22, mask.e22);
        le += s * s;

        // ∂(β s²)/∂E = −2βs on active components
        let d11 = if mask.e11 && e11 < 0.0 { -2.0 * beta * s } else { 0.0 };
        let d22 = if mask.e22 && e22 < 0.0 { -2.0 * beta * s } else { 0.0 };
        // chain through E11 = G11 + ½(G11² + G21²), E22 = G22 + ½(G12² + G22²)
        let dg = [
            [d11 * (1.0 + g[0][0]), d22 * g[0][1]],
            [d11 * g[1][0], d22 * (1.0 + g[1][1])],
        ];
        for e in row {
            for i in 0..2 {
                grad[i * n + e.center] += 2.0 * r[i] * e.value + dg[i][0] * e.grad[0] + dg[i][1] * e.grad[1];
            }
        }
    }
    Objective {
        loss_u: lu,
        loss_e: le,
        grad,
    }
}

/// Warm start plus penalized refinement for one sample.
pub fn run_pgs(
    sample: &DisplacementSample,
    basis: &RkBasis,
    config: &PgsConfig,
) -> Result<(CoefficientField, PgsReport)> {
    let lsq = LeastSquares::new(basis)?;
    run_pgs_with(sample, basis, &lsq, config)
}

/// As [`run_pgs`], reusing a factorization of the basis.
pub fn run_pgs_with(
    sample: &DisplacementSample,
    basis: &RkBasis,
    lsq: &LeastSquares,
    config: &PgsConfig,
) -> Result<(CoefficientField, PgsReport)> {
    config.validate()?;
    check_sample(sample, basis)?;
    let mask = config.constraint_mask.unwrap_or(sample.constraint_mask);
    let warm = lsq.solve(&sample.u_exp)?;
    let flat = warm.to_flat();
    let start = objective(&flat, basis, &sample.u_exp, mask, 0.0);
    let (beta_u, beta_e) = (start.loss_u, start.loss_e);

    let strain = crate::field_recon::strain_field(&warm, basis)?;
    let has_negative = (0..strain.len()).any(|j| {
        (mask.e11 && strain.e11[j] < -config.strain_eps) || (mask.e22 && strain.e22[j] < -config.strain_eps)
    });
    let beta = rescale_beta_with(config.beta_rule, config.beta_tilde, beta_u, beta_e);
    let beta = match beta {
        Some(b) if has_negative && b > 0.0 => b,
        _ => {
            let report = PgsReport {
                loss_u_initial: beta_u,
                loss_e_initial: beta_e,
                beta_effective: beta.unwrap_or(0.0),
                epochs_run: 0,
                loss_u_final: beta_u,
                loss_e_final: beta_e,
                converged: true,
                skipped: true,
                break_epoch: None,
                break_loss_u: None,
                break_loss_e: None,
            };
            return Ok((warm, report));
        }
    };

    let tol_e = config.tol_e * beta_e;
    let tol_u = config.tol_u * beta_u;
    let mut x = flat;
    let mut adam = AdamState::new(x.len());
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut last = (beta_u, beta_e);
    let mut break_at = None;
    let mut epochs_run = 0;
    for epoch in 0..=config.max_epochs {
        let obj = objective(&x, basis, &sample.u_exp, mask, beta);
        last = (obj.loss_u, obj.loss_e);
        if obj.loss_e <= tol_e && best.as_ref().is_none_or(|b| obj.loss_u < b.1) {
            best = Some((x.clone(), obj.loss_u, obj.loss_e));
        }
        if obj.loss_e <= tol_e && obj.loss_u <= tol_u {
            break_at = Some((epoch, obj.loss_u, obj.loss_e));
            break;
        }
        if epoch == config.max_epochs {
            break;
        }
        let lr = config.learning_rate * config.lr_decay.powi((epoch / config.lr_decay_every) as i32);
        adam_step(&mut x, &obj.grad, &mut adam, lr, &config.adam);
        epochs_run += 1;
    }

    let (coeffs, loss_u_final, loss_e_final) = match best {
        Some((b, lu, le)) => (b, lu, le),
        None => (x, last.0, last.1),
    };
    let report = PgsReport {
        loss_u_initial: beta_u,
        loss_e_initial: beta_e,
        beta_effective: beta,
        epochs_run,
        loss_u_final,
        loss_e_final,
        converged: break_at.is_some(),
        skipped: false,
        break_epoch: break_at.map(|b| b.0),
        break_loss_u: break_at.map(|b| b.1),
        break_loss_e: break_at.map(|b| b.2),
    };
    Ok((CoefficientField::from_flat(&coeffs), report))
}

/// Independent per-sample runs over a shared basis, in input order.
pub fn run_batch(
    samples: &[DisplacementSample],
    basis: &RkBasis,
    config: &PgsConfig,
) -> Result<Vec<Result<(CoefficientField, PgsReport)>>> {
    let lsq = LeastSquares::new(basis)?;
    Ok(samples
        .par_iter()
        .map(|s| run_pgs_with(s, basis, &lsq, config))
        .collect())
}

/// `2Φᵀ(Φū − U)` for each component; used to check first-order optimality.
pub fn data_gradient(coeffs: &CoefficientField, basis: &RkBasis, u_exp: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let phi = basis.shape_matrix();
    let mut out = vec![[0.0; 2]; basis.num_centers()];
    for i in 0..2 {
        let c = DVector::from_iterator(coeffs.len(), coeffs.values.iter().map(|v| v[i]));
        let u = DVector::from_iterator(u_exp.len(), u_exp.iter().map(|v| v[i]));
        let g = phi.transpose() * (&phi * c - u) * 2.0;
        for (k, v) in g.iter().enumerate() {
            out[k][i] = *v;
        }
    }
    out
}
