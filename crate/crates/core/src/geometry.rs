//! Linear action-space constraints and the projection QP.
//!
//! A [`LinearConstraintSet`] holds `n_in` half-planes `row_i · a <= b_i` over an
//! `n_act`-dimensional action space. Rows are unit vectors built from
//! generalized spherical angles, and every offset is decomposed as
//! `b_i = row_i · â + b⁺_i` with `b⁺_i > 0`, so the interior point `â` is
//! always strictly feasible and the polytope is never empty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecops::{dot, sigmoid};

/// Feasibility tolerance used by the projection when checking candidates.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Ratio of the smallest allowed positive offset to the half action range.
pub const MIN_OFFSET_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("action box dimension {index}: lower bound {lower} is not below upper bound {upper}")]
    InvalidBox { index: usize, lower: f64, upper: f64 },
    #[error("no candidate active set satisfies the constraints (n_in = {n_in}, n_act = {n_act})")]
    Infeasible { n_in: usize, n_act: usize },
    #[error("constraint set invariant violated: {0}")]
    Invariant(String),
}

/// Per-dimension action bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ActionBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeometryError> {
        assert_eq!(lower.len(), upper.len(), "action box bound lengths differ");
        for (index, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) {
                return Err(GeometryError::InvalidBox {
                    index,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-half, half]^dim`.
    pub fn symmetric(half: f64, dim: usize) -> Self {
        Self::new(vec![-half; dim], vec![half; dim]).expect("half must be positive")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect()
    }

    /// Half of the action range. For non-square boxes this is the smallest
    /// half-width, so offsets derived from it fit every axis.
    pub fn half_range(&self) -> f64 {
        self.half_widths().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Lower bound on the positive offsets `b⁺`.
    pub fn min_positive_offset(&self) -> f64 {
        MIN_OFFSET_FRACTION * self.half_range()
    }

    /// Upper bound on the positive offsets `b⁺`.
    pub fn max_positive_offset(&self) -> f64 {
        self.half_range()
    }

    pub fn contains(&self, action: &[f64], tol: f64) -> bool {
        action
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&a, (&lo, &hi))| a >= lo - tol && a <= hi + tol)
    }

    pub fn clamp(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }
}

/// Maps `n_act - 1` angles to a unit vector in `R^n_act`.
///
/// `x_0 = cos φ_1`, `x_k = sin φ_1 … sin φ_k cos φ_{k+1}`, and the last
/// component is the product of all sines.
pub fn spherical_to_cartesian(angles: &[f64]) -> Vec<f64> {
    let n_act = angles.len() + 1;
    assert!(n_act >= 2, "spherical coordinates need at least one angle");
    let mut out = Vec::with_capacity(n_act);
    let mut sin_prod = 1.0;
    for &phi in angles {
        out.push(sin_prod * phi.cos());
        sin_prod *= phi.sin();
    }
    out.push(sin_prod);
    out
}

/// Jacobian of [`spherical_to_cartesian`], shaped `n_act × (n_act - 1)`
/// (row `k` holds `∂x_k/∂φ_m`).
pub fn spherical_jacobian(angles: &[f64]) -> Vec<Vec<f64>> {
    let n_ang = angles.len();
    assert!(n_ang >= 1, "spherical coordinates need at least one angle");
    let n_act = n_ang + 1;
    let sines: Vec<f64> = angles.iter().map(|p| p.sin()).collect();
    let cosines: Vec<f64> = angles.iter().map(|p| p.cos()).collect();
    let mut jac = vec![vec![0.0; n_ang]; n_act];
    for (k, row) in jac.iter_mut().enumerate() {
        // x_k = (∏_{j<k} sin φ_j) · c_k with c_k = cos φ_k, or 1 for the last component.
        for (m, entry) in row.iter_mut().enumerate() {
            if m > k {
                continue;
            }
            let mut value = 1.0;
            for j in 0..k.min(n_ang) {
                value *= if j == m { cosines[j] } else { sines[j] };
            }
            if k < n_ang {
                value *= if m == k { -sines[k] } else { cosines[k] };
            }
            *entry = value;
        }
    }
    jac
}

pub fn satisfaction_margin(g: f64) -> f64 {
    (-g).max(0.0)
}

pub fn violation_margin(g: f64) -> f64 {
    g.max(0.0)
}

/// Half-planes `rows · a <= offsets` with a guaranteed interior point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraintSet {
    rows: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    interior_point: Vec<f64>,
    positive_offsets: Vec<f64>,
}

impl LinearConstraintSet {
    /// Builds a set from unit rows, an interior point and positive offsets;
    /// the offsets `b` are derived from the decomposition.
    pub fn from_parts(
        rows: Vec<Vec<f64>>,
        interior_point: Vec<f64>,
        positive_offsets: Vec<f64>,
    ) -> Self {
        assert_eq!(rows.len(), positive_offsets.len());
        let offsets = rows
            .iter()
            .zip(&positive_offsets)
            .map(|(row, bp)| {
                assert_eq!(row.len(), interior_point.len());
                dot(row, &interior_point) + bp
            })
            .collect();
        Self {
            rows,
            offsets,
            interior_point,
            positive_offsets,
        }
    }

    /// Raw `(A, b)` without an interior-point decomposition. Used for
    /// hand-built sets in tests and tooling; the interior point is left
    /// empty and `positive_offsets` mirrors `b`.
    pub fn from_rows_offsets(rows: Vec<Vec<f64>>, offsets: Vec<f64>) -> Self {
        assert_eq!(rows.len(), offsets.len());
        let n_act = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_act), "ragged constraint rows");
        Self {
            positive_offsets: offsets.clone(),
            rows,
            offsets,
            interior_point: Vec::new(),
        }
    }

    /// The empty set of constraints over `n_act` dimensions.
    pub fn unconstrained(n_act: usize) -> Self {
        Self {
            rows: Vec::new(),
            offsets: Vec::new(),
            interior_point: vec![0.0; n_act],
            positive_offsets: Vec::new(),
        }
    }

    pub fn n_constraints(&self) -> usize {
        self.rows.len()
    }

    pub fn n_act(&self) -> usize {
        self.rows
            .first()
            .map_or(self.interior_point.len(), Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn interior_point(&self) -> &[f64] {
        &self.interior_point
    }

    pub fn positive_offsets(&self) -> &[f64] {
        &self.positive_offsets
    }

    /// `g_i(a) = row_i · a - b_i`; non-positive means satisfied.
    pub fn constraint_value(&self, i: usize, action: &[f64]) -> f64 {
        assert!(i < self.rows.len(), "constraint index {i} out of range");
        assert_eq!(action.len(), self.rows[i].len(), "action dimension mismatch");
        dot(&self.rows[i], action) - self.offsets[i]
    }

    pub fn constraint_values(&self, action: &[f64]) -> Vec<f64> {
        (0..self.rows.len())
            .map(|i| self.constraint_value(i, action))
            .collect()
    }

    /// Largest constraint value, or `-inf` without constraints.
    pub fn max_value(&self, action: &[f64]) -> f64 {
        self.constraint_values(action)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// All constraints satisfied with the non-strict `g_i <= tol` convention.
    pub fn is_satisfied(&self, action: &[f64], tol: f64) -> bool {
        self.constraint_values(action).iter().all(|&g| g <= tol)
    }

    /// Checks the structural invariants against the bounds derived from `bounds`.
    pub fn check_invariants(&self, bounds: &ActionBox) -> Result<(), GeometryError> {
        let fail = |msg: String| Err(GeometryError::Invariant(msg));
        let bmin = bounds.min_positive_offset();
        let bmax = bounds.max_positive_offset();
        if self.interior_point.len() != bounds.dim() {
            return fail(format!(
                "interior point has dimension {}, expected {}",
                self.interior_point.len(),
                bounds.dim()
            ));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let norm = dot(row, row).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return fail(format!("row {i} has norm {norm}"));
            }
            let bp = self.positive_offsets[i];
            // Tolerate one ulp of slack at the saturated ends of the squash.
            let slack = 1e-12 * bmax;
            if bp < bmin - slack || bp > bmax + slack {
                return fail(format!("b⁺[{i}] = {bp} outside [{bmin}, {bmax}]"));
            }
            let expected = dot(row, &self.interior_point) + bp;
            if expected != self.offsets[i] {
                return fail(format!("offset decomposition broken at row {i}"));
            }
            let margin = -self.constraint_value(i, &self.interior_point);
            if margin < bmin * (1.0 - 1e-9) {
                return fail(format!("interior point slack {margin} below {bmin} at row {i}"));
            }
        }
        Ok(())
    }
}

/// Builds a constraint set from unconstrained network outputs.
///
/// * `raw_angles`: `n_in × (n_act - 1)` angles, row-major.
/// * `raw_offsets`: `n_in` values squashed by an affine sigmoid onto
///   `[b⁺_min, b⁺_max]`.
/// * `raw_interior`: `n_act` values squashed by `tanh` into the box.
pub fn assemble(
    raw_angles: &[f64],
    raw_offsets: &[f64],
    raw_interior: &[f64],
    bounds: &ActionBox,
) -> LinearConstraintSet {
    let n_act = raw_interior.len();
    let n_in = raw_offsets.len();
    assert_eq!(n_act, bounds.dim(), "interior point dimension mismatch");
    assert!(n_act >= 2, "spherical rows need n_act >= 2");
    assert_eq!(raw_angles.len(), n_in * (n_act - 1), "angle count mismatch");

    let rows = raw_angles
        .chunks(n_act - 1)
        .map(spherical_to_cartesian)
        .collect();
    let bmin = bounds.min_positive_offset();
    let bmax = bounds.max_positive_offset();
    let positive_offsets = raw_offsets
        .iter()
        .map(|&r| bmin + (bmax - bmin) * sigmoid(r))
        .collect();
    let center = bounds.center();
    let half = bounds.half_widths();
    let interior = raw_interior
        .iter()
        .zip(center.iter().zip(&half))
        .map(|(&r, (&c, &h))| c + h * r.tanh())
        .collect();
    LinearConstraintSet::from_parts(rows, interior, positive_offsets)
}

/// Gradient of a scalar loss with respect to the assembled `(A, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSetGrad {
    pub rows: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl ConstraintSetGrad {
    pub fn zeros(n_in: usize, n_act: usize) -> Self {
        Self {
            rows: vec![vec![0.0; n_act]; n_in],
            offsets: vec![0.0; n_in],
        }
    }
}

/// Gradients with respect to the raw inputs of [`assemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawConstraintGrad {
    pub angles: Vec<f64>,
    pub offsets: Vec<f64>,
    pub interior: Vec<f64>,
}

/// Reverse-mode pass through [`assemble`].
pub fn assemble_backward(
    raw_angles: &[f64],
    raw_offsets: &[f64],
    raw_interior: &[f64],
    bounds: &ActionBox,
    grad: &ConstraintSetGrad,
) -> RawConstraintGrad {
    let n_act = raw_interior.len();
    let n_ang = n_act - 1;
    let center = bounds.center();
    let half = bounds.half_widths();
    let interior: Vec<f64> = raw_interior
        .iter()
        .zip(center.iter().zip(&half))
        .map(|(&r, (&c, &h))| c + h * r.tanh())
        .collect();

    // b_i = row_i · â + b⁺_i
    let mut grad_interior_point = vec![0.0; n_act];
    let mut angles_grad = vec![0.0; raw_angles.len()];
    for (i, angles) in raw_angles.chunks(n_ang).enumerate() {
        let row = spherical_to_cartesian(angles);
        let gb = grad.offsets[i];
        let grad_row: Vec<f64> = grad.rows[i]
            .iter()
            .zip(&interior)
            .map(|(gr, ai)| gr + gb * ai)
            .collect();
        for (gi, ri) in grad_interior_point.iter_mut().zip(&row) {
            *gi += gb * ri;
        }
        let jac = spherical_jacobian(angles);
        for m in 0..n_ang {
            angles_grad[i * n_ang + m] = (0..n_act).map(|k| grad_row[k] * jac[k][m]).sum();
        }
    }

    let span = bounds.max_positive_offset() - bounds.min_positive_offset();
    let offsets_grad = raw_offsets
        .iter()
        .zip(&grad.offsets)
        .map(|(&r, &gb)| {
            let s = sigmoid(r);
            gb * span * s * (1.0 - s)
        })
        .collect();
    let interior_grad = raw_interior
        .iter()
        .zip(&half)
        .zip(&grad_interior_point)
        .map(|((&r, &h), &g)| {
            let t = r.tanh();
            g * h * (1.0 - t * t)
        })
        .collect();

    RawConstraintGrad {
        angles: angles_grad,
        offsets: offsets_grad,
        interior: interior_grad,
    }
}

/// Solution of the projection QP with its KKT multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub action: Vec<f64>,
    /// One multiplier per constraint; zero outside the active set.
    pub multipliers: Vec<f64>,
    pub active: Vec<usize>,
}

impl Projection {
    pub fn corrected(&self) -> bool {
        !self.active.is_empty()
    }
}

/// `argmin ‖a - a_tilde‖²  s.t.  A a <= b`.
pub fn project_action(
    a_tilde: &[f64],
    set: &LinearConstraintSet,
) -> Result<Vec<f64>, GeometryError> {
    project_action_kkt(a_tilde, set).map(|p| p.action)
}

/// Projection by exhaustive active-set enumeration.
///
/// For each subset `S` of at most `n_act` constraints the equality-constrained
/// problem gives `λ_S = (A_S A_Sᵀ)⁻¹ (A_S ã - b_S)` and `a = ã - A_Sᵀ λ_S`.
/// A subset is accepted when its multipliers are non-negative and `a` is
/// primal feasible; the closest accepted candidate is returned. Singular
/// subsets (parallel or duplicate rows) are skipped.
pub fn project_action_kkt(
    a_tilde: &[f64],
    set: &LinearConstraintSet,
) -> Result<Projection, GeometryError> {
    let n_in = set.n_constraints();
    let n_act = a_tilde.len();
    if n_in > 0 {
        assert_eq!(set.n_act(), n_act, "action dimension mismatch");
    }
    if set.is_satisfied(a_tilde, 0.0) {
        return Ok(Projection {
            action: a_tilde.to_vec(),
            multipliers: vec![0.0; n_in],
            active: Vec::new(),
        });
    }

    let violation_scale = set
        .offsets()
        .iter()
        .map(|b| b.abs())
        .chain(a_tilde.iter().map(|a| a.abs()))
        .fold(1.0, f64::max);
    let feas_tol = FEASIBILITY_TOL * violation_scale;

    let mut best: Option<(f64, Projection)> = None;
    for size in 1..=n_in.min(n_act) {
        for subset in Combinations::new(n_in, size) {
            let Some((action, lambda)) = solve_equality_subset(a_tilde, set, &subset) else {
                continue;
            };
            if lambda.iter().any(|&l| l < -feas_tol) {
                continue;
            }
            if !set.is_satisfied(&action, feas_tol) {
                continue;
            }
            let dist: f64 = action
                .iter()
                .zip(a_tilde)
                .map(|(a, t)| (a - t) * (a - t))
                .sum();
            if best.as_ref().map_or(true, |(d, _)| dist < *d) {
                let mut multipliers = vec![0.0; n_in];
                for (&i, &l) in subset.iter().zip(&lambda) {
                    multipliers[i] = l.max(0.0);
                }
                best = Some((
                    dist,
                    Projection {
                        action,
                        multipliers,
                        active: subset,
                    },
                ));
            }
        }
        // Candidates of a given size are KKT points; a larger active set cannot
        // be closer once a valid one exists.
        if best.is_some() {
            break;
        }
    }
    best.map(|(_, p)| p).ok_or(GeometryError::Infeasible { n_in, n_act })
}

fn solve_equality_subset(
    a_tilde: &[f64],
    set: &LinearConstraintSet,
    subset: &[usize],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let k = subset.len();
    let rows = set.rows();
    let gram = DMatrix::from_fn(k, k, |r, c| dot(&rows[subset[r]], &rows[subset[c]]));
    let rhs = DVector::from_iterator(
        k,
        subset.iter().map(|&i| dot(&rows[i], a_tilde) - set.offsets()[i]),
    );
    let chol = gram.cholesky()?;
    // Unit rows: the Gram diagonal is 1, so a tiny pivot means near-parallel rows.
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d));
    if min_pivot < 1e-7 {
        return None;
    }
    let lambda = chol.solve(&rhs);
    let mut action = a_tilde.to_vec();
    for (j, &i) in subset.iter().enumerate() {
        for (a, r) in action.iter_mut().zip(&rows[i]) {
            *a -= lambda[j] * r;
        }
    }
    Some((action, lambda.iter().copied().collect()))
}

/// Largest violation among stationarity, primal feasibility, dual
/// feasibility and complementary slackness.
pub fn kkt_residual(a_tilde: &[f64], set: &LinearConstraintSet, projection: &Projection) -> f64 {
    let mut stationarity: Vec<f64> = projection
        .action
        .iter()
        .zip(a_tilde)
        .map(|(a, t)| a - t)
        .collect();
    for (row, &l) in set.rows().iter().zip(&projection.multipliers) {
        for (s, r) in stationarity.iter_mut().zip(row) {
            *s += l * r;
        }
    }
    let mut residual = stationarity.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    for (i, &l) in projection.multipliers.iter().enumerate() {
        let g = set.constraint_value(i, &projection.action);
        residual = residual.max(g.max(0.0)).max((-l).max(0.0)).max((l * g).abs());
    }
    residual
}

/// Vertices (counter-clockwise) of the feasible polygon clipped to the box.
/// Two-dimensional action spaces only.
pub fn feasible_polygon(set: &LinearConstraintSet, bounds: &ActionBox) -> Vec<[f64; 2]> {
    assert_eq!(bounds.dim(), 2, "polygon extraction needs a 2-D action space");
    let (lo, hi) = (bounds.lower(), bounds.upper());
    let mut poly = vec![
        [lo[0], lo[1]],
        [hi[0], lo[1]],
        [hi[0], hi[1]],
        [lo[0], hi[1]],
    ];
    for (row, &b) in set.rows().iter().zip(set.offsets()) {
        if poly.is_empty() {
            break;
        }
        let g = |p: &[f64; 2]| row[0] * p[0] + row[1] * p[1] - b;
        let mut clipped = Vec::with_capacity(poly.len() + 1);
        for idx in 0..poly.len() {
            let cur = poly[idx];
            let next = poly[(idx + 1) % poly.len()];
            let (gc, gn) = (g(&cur), g(&next));
            if gc <= 0.0 {
                clipped.push(cur);
            }
            if (gc < 0.0 && gn > 0.0) || (gc > 0.0 && gn < 0.0) {
                let t = gc / (gc - gn);
                clipped.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
        poly = clipped;
    }
    poly
}

/// Lexicographic k-subsets of `0..n`.
struct Combinations {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let k = self.current.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.current[i] < self.n - k + i {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn spherical_axis_cases() {
        assert!(close(&spherical_to_cartesian(&[0.0]), &[1.0, 0.0], 1e-15));
        assert!(close(&spherical_to_cartesian(&[FRAC_PI_2]), &[0.0, 1.0], 1e-15));
        assert!(close(&spherical_to_cartesian(&[0.0, 0.0]), &[1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    #[should_panic]
    fn spherical_rejects_scalar_space() {
        spherical_to_cartesian(&[]);
    }

    #[test]
    fn spherical_jacobian_matches_central_differences() {
        let angles = [0.3, -1.2, 2.1, 0.7];
        let jac = spherical_jacobian(&angles);
        let h = 1e-6;
        for m in 0..angles.len() {
            let mut plus = angles;
            let mut minus = angles;
            plus[m] += h;
            minus[m] -= h;
            let (xp, xm) = (spherical_to_cartesian(&plus), spherical_to_cartesian(&minus));
            for k in 0..=angles.len() {
                let fd = (xp[k] - xm[k]) / (2.0 * h);
                assert!((fd - jac[k][m]).abs() < 1e-8, "k={k} m={m}: {fd} vs {}", jac[k][m]);
            }
        }
    }

    #[test]
    fn constraint_value_examples() {
        let set = LinearConstraintSet::from_rows_offsets(vec![vec![1.0, 0.0]], vec![0.05]);
        assert!((set.constraint_value(0, &[0.03, 0.0]) + 0.02).abs() < 1e-15);
        assert_eq!(set.constraint_value(0, &[0.05, 0.0]), 0.0);
        let set = LinearConstraintSet::from_rows_offsets(vec![vec![0.0, 1.0]], vec![0.02]);
        assert!((set.constraint_value(0, &[0.0, 0.1]) - 0.08).abs() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn constraint_value_index_out_of_range() {
        let set = LinearConstraintSet::from_rows_offsets(vec![vec![1.0, 0.0]], vec![0.05]);
        set.constraint_value(1, &[0.0, 0.0]);
    }

    #[test]
    fn margins() {
        assert_eq!((satisfaction_margin(-0.3), violation_margin(-0.3)), (0.3, 0.0));
        assert_eq!((satisfaction_margin(0.0), violation_margin(0.0)), (0.0, 0.0));
        assert_eq!((satisfaction_margin(0.5), violation_margin(0.5)), (0.0, 0.5));
    }

    #[test]
    fn assemble_offsets_stay_in_bounds() {
        let bounds = ActionBox::symmetric(0.1, 2);
        for raw in [-1e6, -30.0, -1.0, 0.0, 2.5, 40.0, 1e6] {
            let set = assemble(&[0.4, -2.0], &[raw, -raw], &[0.3, -0.2], &bounds);
            for &bp in set.positive_offsets() {
                assert!((0.01..=0.1).contains(&bp), "b⁺ = {bp}");
            }
            set.check_invariants(&bounds).unwrap();
        }
        let low = assemble(&[0.0], &[-800.0], &[0.0, 0.0], &bounds);
        assert!((low.positive_offsets()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn assemble_zero_interior_is_box_center() {
        let bounds = ActionBox::new(vec![-0.1, 0.2], vec![0.3, 0.4]).unwrap();
        let set = assemble(&[1.0], &[0.0], &[0.0, 0.0], &bounds);
        assert!(close(set.interior_point(), &[0.1, 0.3], 1e-15));
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(matches!(
            ActionBox::new(vec![0.0, 1.0], vec![1.0, 1.0]),
            Err(GeometryError::InvalidBox { index: 1, .. })
        ));
    }

    #[test]
    fn projection_keeps_feasible_actions() {
        let set = LinearConstraintSet::from_rows_offsets(vec![vec![1.0, 0.0]], vec![0.05]);
        assert_eq!(project_action(&[0.01, -0.07], &set).unwrap(), vec![0.01, -0.07]);
        // Boundary counts as feasible.
        assert_eq!(project_action(&[0.05, 0.0], &set).unwrap(), vec![0.05, 0.0]);
    }

    #[test]
    fn projection_onto_axis_half_plane() {
        let set = LinearConstraintSet::from_rows_offsets(vec![vec![1.0, 0.0]], vec![0.0]);
        let p = project_action(&[0.08, 0.03], &set).unwrap();
        assert!(close(&p, &[0.0, 0.03], 1e-15));
    }

    #[test]
    fn projection_into_corner() {
        let set = LinearConstraintSet::from_rows_offsets(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
        );
        let p = project_action_kkt(&[0.05, 0.02], &set).unwrap();
        assert!(close(&p.action, &[0.0, 0.0], 1e-15));
        assert_eq!(p.active, vec![0, 1]);
        assert!(kkt_residual(&[0.05, 0.02], &set, &p) < 1e-12);
    }

    #[test]
    fn duplicate_rows_are_tolerated() {
        let set = LinearConstraintSet::from_rows_offsets(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.02, 0.02, 0.5],
        );
        let p = project_action(&[0.09, 0.0], &set).unwrap();
        assert!(close(&p, &[0.02, 0.0], 1e-15));
    }

    #[test]
    fn contradictory_rows_report_infeasible() {
        let set = LinearConstraintSet::from_rows_offsets(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![-0.05, -0.05],
        );
        assert!(matches!(
            project_action(&[0.0, 0.0], &set),
            Err(GeometryError::Infeasible { .. })
        ));
    }

    #[test]
    fn polygon_without_constraints_is_the_box() {
        let bounds = ActionBox::symmetric(0.1, 2);
        let poly = feasible_polygon(&LinearConstraintSet::unconstrained(2), &bounds);
        assert_eq!(poly.len(), 4);
        let set = LinearConstraintSet::from_rows_offsets(vec![vec![1.0, 0.0]], vec![0.0]);
        let poly = feasible_polygon(&set, &bounds);
        assert!(poly.iter().all(|p| p[0] <= 1e-15));
        assert_eq!(poly.len(), 4);
    }

    #[test]
    fn combinations_enumerate_all_subsets() {
        assert_eq!(Combinations::new(4, 2).count(), 6);
        assert_eq!(Combinations::new(3, 3).collect::<Vec<_>>(), vec![vec![0, 1, 2]]);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }

    fn arb_set(max_in: usize, dims: usize) -> impl Strategy<Value = LinearConstraintSet> {
        (1..=max_in).prop_flat_map(move |n_in| {
            (
                prop::collection::vec(-4.0..4.0f64, n_in * (dims - 1)),
                prop::collection::vec(-4.0..4.0f64, n_in),
                prop::collection::vec(-3.0..3.0f64, dims),
            )
                .prop_map(move |(ang, off, int)| {
                    assemble(&ang, &off, &int, &ActionBox::symmetric(0.1, dims))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn spherical_rows_are_unit(angles in prop::collection::vec(-10.0..10.0f64, 1..8)) {
            let x = spherical_to_cartesian(&angles);
            let norm = dot(&x, &x).sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn projection_is_idempotent_and_kkt(
            set in arb_set(6, 3),
            a in prop::collection::vec(-0.3..0.3f64, 3),
        ) {
            let bounds = ActionBox::symmetric(0.1, 3);
            prop_assert!(set.check_invariants(&bounds).is_ok());
            let p = project_action_kkt(&a, &set).unwrap();
            prop_assert!(kkt_residual(&a, &set, &p) < 1e-6);
            let again = project_action(&p.action, &set).unwrap();
            prop_assert!(close(&again, &p.action, 1e-8));
            if set.is_satisfied(&a, 0.0) {
                prop_assert_eq!(&p.action, &a);
            }
        }

        #[test]
        fn assembled_interior_point_has_min_slack(set in arb_set(8, 2)) {
            let bounds = ActionBox::symmetric(0.1, 2);
            let slack = -set.max_value(set.interior_point());
            prop_assert!(slack >= bounds.min_positive_offset() * (1.0 - 1e-12));
        }
    }
}
