//! Friction functionals `G_t(x)` acting on the trading rate, their convex
//! conjugates (the dual friction) and gradients.
//!
//! A friction is convex in the rate, minimal at zero (where it equals the
//! participation cost) and bounded below by `H |x|^alpha` for some `alpha > 1`.
//! The conjugate `G*(y) = sup_x (x.y - G(x))` drives every dual quantity in the
//! crate: market bounds, certificate penalties and utility upper bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrictionKind {
    /// `G(x) = K + Lambda |x|^alpha` (Euclidean norm for `d > 1`).
    PowerScalar,
    /// `G_t(x) = K + sum_i (lambda / 2) S^i_t (x^i)^2`, price-scaled quadratic impact.
    QuadraticImpact,
    /// `G(x) = K + x' Lambda x` with a symmetric positive-definite matrix.
    MatrixQuadratic,
    /// Piecewise-linear interpolation of a convex table, `+inf` outside its hull.
    Tabulated,
}

impl FrictionKind {
    pub fn name(self) -> &'static str {
        match self {
            FrictionKind::PowerScalar => "PowerScalar",
            FrictionKind::QuadraticImpact => "QuadraticImpact",
            FrictionKind::MatrixQuadratic => "MatrixQuadratic",
            FrictionKind::Tabulated => "Tabulated",
        }
    }
}

fn default_alpha() -> f64 {
    2.0
}

/// Serializable friction description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionSpec {
    pub kind: FrictionKind,
    #[serde(rename = "lambda", default)]
    pub lambda_coef: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(rename = "matrix", default, skip_serializing_if = "Option::is_none")]
    pub impact_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub participation_cost: f64,
    pub h_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_g: Option<Vec<f64>>,
}

/// Value of the conjugate together with a maximizer of `x.y - G(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEval {
    pub value: f64,
    pub argsup: Vec<f64>,
}

/// Tolerances used when checking friction axioms and conjugate identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub inequality_abs: f64,
    pub equality_rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            inequality_abs: 1e-9,
            equality_rel: 1e-6,
        }
    }
}

/// `sup_r (r |y| - h |r|^alpha)` in closed form.
pub fn power_conjugate(h: f64, alpha: f64, y_abs: f64) -> f64 {
    if y_abs == 0.0 {
        return 0.0;
    }
    let e = 1.0 / (1.0 - alpha);
    (alpha - 1.0) / alpha * alpha.powf(e) * h.powf(e) * y_abs.powf(alpha / (alpha - 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FrictionSpec {
    pub fn power_scalar(lambda: f64, alpha: f64) -> Self {
        FrictionSpec {
            kind: FrictionKind::PowerScalar,
            lambda_coef: lambda,
            alpha,
            impact_matrix: None,
            participation_cost: 0.0,
            h_floor: lambda,
            grid_x: None,
            grid_g: None,
        }
    }

    /// Price-scaled quadratic impact. `h_floor` must not exceed `lambda / 2 * min S`
    /// over the prices the friction is evaluated at.
    pub fn quadratic_impact(lambda: f64, h_floor: f64) -> Self {
        FrictionSpec {
            kind: FrictionKind::QuadraticImpact,
            lambda_coef: lambda,
            alpha: 2.0,
            impact_matrix: None,
            participation_cost: 0.0,
            h_floor,
            grid_x: None,
            grid_g: None,
        }
    }

    /// Quadratic form `x' Lambda x`; the floor defaults to the smallest eigenvalue.
    pub fn matrix_quadratic(matrix: Vec<Vec<f64>>) -> Self {
        let d = matrix.len();
        let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
        let h = if flat.len() == d * d && d > 0 {
            let m = DMatrix::from_row_slice(d, d, &flat);
            m.symmetric_eigenvalues().min()
        } else {
            0.0
        };
        FrictionSpec {
            kind: FrictionKind::MatrixQuadratic,
            lambda_coef: 0.0,
            alpha: 2.0,
            impact_matrix: Some(matrix),
            participation_cost: 0.0,
            h_floor: h,
            grid_x: None,
            grid_g: None,
        }
    }

    pub fn tabulated(grid_x: Vec<f64>, grid_g: Vec<f64>, h_floor: f64, alpha: f64) -> Self {
        let mut spec = FrictionSpec {
            kind: FrictionKind::Tabulated,
            lambda_coef: 0.0,
            alpha,
            impact_matrix: None,
            participation_cost: 0.0,
            h_floor,
            grid_x: Some(grid_x),
            grid_g: Some(grid_g),
        };
        let g0 = spec.interpolate(0.0);
        if g0.is_finite() {
            spec.participation_cost = g0;
        }
        spec
    }

    pub fn with_participation_cost(mut self, k: f64) -> Self {
        if self.kind == FrictionKind::Tabulated {
            if let Some(g) = self.grid_g.as_mut() {
                let shift = k - self.participation_cost;
                g.iter_mut().for_each(|v| *v += shift);
            }
        }
        self.participation_cost = k;
        self
    }

    pub fn with_h_floor(mut self, h: f64) -> Self {
        self.h_floor = h;
        self
    }

    /// Superlinearity exponent of the lower envelope.
    pub fn exponent(&self) -> f64 {
        match self.kind {
            FrictionKind::PowerScalar | FrictionKind::Tabulated => self.alpha,
            FrictionKind::QuadraticImpact | FrictionKind::MatrixQuadratic => 2.0,
        }
    }

    /// Whether `G_t` depends on the current price.
    pub fn price_dependent(&self) -> bool {
        self.kind == FrictionKind::QuadraticImpact
    }

    pub fn is_differentiable(&self) -> bool {
        self.kind != FrictionKind::Tabulated
    }

    /// Dimension the friction is restricted to, if any.
    pub fn fixed_dimension(&self) -> Option<usize> {
        match self.kind {
            FrictionKind::MatrixQuadratic => self.impact_matrix.as_ref().map(|m| m.len()),
            FrictionKind::Tabulated => Some(1),
            _ => None,
        }
    }

    /// Checks the static axioms: positivity of coefficients, symmetric
    /// positive-definite matrix, convex tabulation with minimum at zero, and a
    /// lower envelope compatible with the declared coefficients.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidFriction(m.to_string()));
        if !(self.participation_cost.is_finite() && self.participation_cost >= 0.0) {
            return bad("participation_cost must be finite and nonnegative");
        }
        if !(self.h_floor.is_finite() && self.h_floor > 0.0) {
            return bad("h_floor must be finite and positive");
        }
        match self.kind {
            FrictionKind::PowerScalar => {
                if !(self.lambda_coef.is_finite() && self.lambda_coef > 0.0) {
                    return bad("lambda must be positive");
                }
                if !(self.alpha.is_finite() && self.alpha > 1.0) {
                    return bad("alpha must exceed 1");
                }
                if self.h_floor > self.lambda_coef * (1.0 + 1e-12) {
                    return bad("h_floor exceeds lambda; the envelope G >= H|x|^alpha fails");
                }
            }
            FrictionKind::QuadraticImpact => {
                if !(self.lambda_coef.is_finite() && self.lambda_coef > 0.0) {
                    return bad("lambda must be positive");
                }
            }
            FrictionKind::MatrixQuadratic => {
                let m = self
                    .impact_matrix
                    .as_ref()
                    .ok_or_else(|| Error::InvalidFriction("matrix is required".into()))?;
                let d = m.len();
                if d == 0 || m.iter().any(|row| row.len() != d) {
                    return bad("matrix must be square and nonempty");
                }
                for i in 0..d {
                    for j in 0..d {
                        if !m[i][j].is_finite() {
                            return bad("matrix entries must be finite");
                        }
                        if (m[i][j] - m[j][i]).abs() > 1e-12 * (1.0 + m[i][j].abs()) {
                            return bad("matrix must be symmetric");
                        }
                    }
                }
                let lam_min = self.matrix().symmetric_eigenvalues().min();
                if lam_min <= 0.0 {
                    return bad("matrix must be positive definite");
                }
                if self.h_floor > lam_min * (1.0 + 1e-12) {
                    return bad("h_floor exceeds the smallest eigenvalue of the matrix");
                }
            }
            FrictionKind::Tabulated => {
                if !(self.alpha.is_finite() && self.alpha > 1.0) {
                    return bad("alpha must exceed 1");
                }
                let (xs, gs) = self.table()?;
                if xs.len() < 3 || xs.len() != gs.len() {
                    return bad("grid_x and grid_g must have equal length >= 3");
                }
                if xs.windows(2).any(|w| !(w[1] > w[0]))
                    || xs.iter().chain(gs).any(|v| !v.is_finite())
                {
                    return bad("grid_x must be finite and strictly increasing");
                }
                if !(xs[0] < 0.0 && xs[xs.len() - 1] > 0.0) {
                    return bad("grid hull must contain 0 in its interior");
                }
                let slopes: Vec<f64> = (0..xs.len() - 1)
                    .map(|i| (gs[i + 1] - gs[i]) / (xs[i + 1] - xs[i]))
                    .collect();
                for i in 1..slopes.len() {
                    if slopes[i] < slopes[i - 1] - 1e-9 * (1.0 + slopes[i - 1].abs()) {
                        return Err(Error::NonConvexTabulation { x: xs[i] });
                    }
                }
                let g0 = self.interpolate(0.0);
                if (g0 - self.participation_cost).abs() > 1e-9 * (1.0 + g0.abs()) {
                    return bad("participation_cost must equal the tabulated value at 0");
                }
                if gs.iter().any(|g| *g < g0 - 1e-12) {
                    return bad("tabulated friction must be minimal at 0");
                }
                for (x, g) in xs.iter().zip(gs) {
                    if *g < self.h_floor * x.abs().powf(self.alpha) - 1e-12 {
                        return bad("tabulated values violate the declared envelope H|x|^alpha");
                    }
                }
            }
        }
        Ok(())
    }

    fn matrix(&self) -> DMatrix<f64> {
        let m = self
            .impact_matrix
            .as_ref()
            .expect("matrix friction without matrix");
        let d = m.len();
        DMatrix::from_fn(d, d, |i, j| m[i][j])
    }

    fn table(&self) -> Result<(&[f64], &[f64])> {
        match (&self.grid_x, &self.grid_g) {
            (Some(x), Some(g)) => Ok((x.as_slice(), g.as_slice())),
            _ => Err(Error::InvalidFriction(
                "tabulated friction requires grid_x and grid_g".into(),
            )),
        }
    }

    fn interpolate(&self, x: f64) -> f64 {
        let (xs, gs) = match self.table() {
            Ok(t) => t,
            Err(_) => return f64::NAN,
        };
        let n = xs.len();
        if x < xs[0] || x > xs[n - 1] {
            return f64::INFINITY;
        }
        let i = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => return gs[i],
            Err(i) => i,
        };
        let (x0, x1) = (xs[i - 1], xs[i]);
        let w = (x - x0) / (x1 - x0);
        gs[i - 1] * (1.0 - w) + gs[i] * w
    }

    fn check_dims(&self, s: &[f64], x: &[f64]) -> Result<()> {
        if let Some(d) = self.fixed_dimension() {
            if x.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "{} friction is {d}-dimensional, got a {}-vector",
                    self.kind.name(),
                    x.len()
                )));
            }
        }
        if self.price_dependent() {
            if s.len() != x.len() {
                return Err(Error::ShapeMismatch(format!(
                    "price has {} entries, rate has {}",
                    s.len(),
                    x.len()
                )));
            }
            if let Some(p) = s.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPrice { price: *p });
            }
        }
        Ok(())
    }

    /// Cost rate `G_t(x)` at price `s`.
    pub fn eval_g(&self, s: &[f64], x: &[f64]) -> Result<f64> {
        self.check_dims(s, x)?;
        let k = self.participation_cost;
        Ok(match self.kind {
            FrictionKind::PowerScalar => k + self.lambda_coef * norm(x).powf(self.alpha),
            FrictionKind::QuadraticImpact => {
                k + x
                    .iter()
                    .zip(s)
                    .map(|(xi, si)| 0.5 * self.lambda_coef * si * xi * xi)
                    .sum::<f64>()
            }
            FrictionKind::MatrixQuadratic => {
                let m = self.impact_matrix.as_ref().unwrap();
                let mut q = 0.0;
                for (i, row) in m.iter().enumerate() {
                    q += x[i] * dot(row, x);
                }
                k + q
            }
            FrictionKind::Tabulated => self.interpolate(x[0]),
        })
    }

    /// Dual friction `G*_t(y)` at price `s`, with a maximizer.
    pub fn eval_g_star(&self, s: &[f64], y: &[f64]) -> Result<DualEval> {
        self.check_dims(s, y)?;
        let k = self.participation_cost;
        match self.kind {
            FrictionKind::PowerScalar => {
                let r = norm(y);
                let (lam, alpha) = (self.lambda_coef, self.alpha);
                let value = power_conjugate(lam, alpha, r) - k;
                let argsup = if r == 0.0 {
                    vec![0.0; y.len()]
                } else {
                    let rho = (r / (alpha * lam)).powf(1.0 / (alpha - 1.0));
                    y.iter().map(|yi| rho * yi / r).collect()
                };
                Ok(DualEval { value, argsup })
            }
            FrictionKind::QuadraticImpact => {
                let lam = self.lambda_coef;
                let value = y
                    .iter()
                    .zip(s)
                    .map(|(yi, si)| yi * yi / (2.0 * lam * si))
                    .sum::<f64>()
                    - k;
                let argsup = y.iter().zip(s).map(|(yi, si)| yi / (lam * si)).collect();
                Ok(DualEval { value, argsup })
            }
            FrictionKind::MatrixQuadratic => {
                let m = self.matrix();
                let chol = m.cholesky().ok_or_else(|| {
                    Error::InvalidFriction("matrix is not positive definite".into())
                })?;
                let yv = DVector::from_column_slice(y);
                let sol = chol.solve(&yv);
                let argsup: Vec<f64> = sol.iter().map(|v| 0.5 * v).collect();
                let value = 0.25 * yv.dot(&sol) - k;
                Ok(DualEval { value, argsup })
            }
            FrictionKind::Tabulated => self.tabulated_conjugate(y[0]),
        }
    }

    /// Golden-section search over the tabulation hull, then two refinement
    /// passes over the vertices (the objective is piecewise linear and concave,
    /// so the supremum sits on a vertex).
    fn tabulated_conjugate(&self, y: f64) -> Result<DualEval> {
        let (xs, gs) = self.table()?;
        let n = xs.len();
        let f = |i: usize| xs[i] * y - gs[i];
        let obj = |x: f64| x * y - self.interpolate(x);
        let (mut a, mut b) = (xs[0], xs[n - 1]);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (obj(c), obj(d));
        let tol = 1e-12 * (xs[n - 1] - xs[0]);
        while b - a > tol {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = obj(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = obj(d);
            }
        }
        let x_gold = 0.5 * (a + b);
        // First pass: the better endpoint of the segment holding the golden point.
        let seg = xs.partition_point(|v| *v <= x_gold).clamp(1, n - 1);
        let mut best = if f(seg - 1) >= f(seg) { seg - 1 } else { seg };
        // Second pass: climb to a vertex that beats both neighbours.
        loop {
            if best > 0 && f(best - 1) > f(best) {
                best -= 1;
            } else if best + 1 < n && f(best + 1) > f(best) {
                best += 1;
            } else {
                break;
            }
        }
        let boundary_slope_exceeded = (best == n - 1
            && y > (gs[n - 1] - gs[n - 2]) / (xs[n - 1] - xs[n - 2]))
            || (best == 0 && y < (gs[1] - gs[0]) / (xs[1] - xs[0]));
        if boundary_slope_exceeded {
            return Err(Error::ConjugateDiverged { x: xs[best] });
        }
        Ok(DualEval {
            value: f(best),
            argsup: vec![xs[best]],
        })
    }

    /// Gradient of `G_t` in the rate.
    pub fn eval_g_prime(&self, s: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if self.kind == FrictionKind::Tabulated {
            return Err(Error::NotDifferentiable("Tabulated"));
        }
        self.check_dims(s, x)?;
        Ok(match self.kind {
            FrictionKind::PowerScalar => {
                let r = norm(x);
                if r == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    let c = self.alpha * self.lambda_coef * r.powf(self.alpha - 2.0);
                    x.iter().map(|xi| c * xi).collect()
                }
            }
            FrictionKind::QuadraticImpact => x
                .iter()
                .zip(s)
                .map(|(xi, si)| self.lambda_coef * si * xi)
                .collect(),
            FrictionKind::MatrixQuadratic => {
                let m = self.impact_matrix.as_ref().unwrap();
                m.iter().map(|row| 2.0 * dot(row, x)).collect()
            }
            FrictionKind::Tabulated => unreachable!(),
        })
    }

    /// Gradient where it exists; for tabulated frictions the slope of the
    /// segment to the right of `x` (to the left at the upper grid end).
    pub fn eval_subgradient(&self, s: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if self.kind != FrictionKind::Tabulated {
            return self.eval_g_prime(s, x);
        }
        self.check_dims(s, x)?;
        let (xs, gs) = self.table()?;
        let n = xs.len();
        let i = xs.partition_point(|v| *v <= x[0]).clamp(1, n - 1);
        Ok(vec![(gs[i] - gs[i - 1]) / (xs[i] - xs[i - 1])])
    }

    /// Upper envelope of `G*` implied by `G >= H |x|^alpha`; for `d > 1` the
    /// floor is split evenly across coordinates.
    pub fn dual_bound_envelope(&self, y: &[f64]) -> f64 {
        let alpha = self.exponent();
        let d = y.len();
        if d == 1 {
            power_conjugate(self.h_floor, alpha, y[0].abs())
        } else {
            let h = self.h_floor / d as f64;
            y.iter().map(|yi| power_conjugate(h, alpha, yi.abs())).sum()
        }
    }

    /// Whether `G_t(x) >= H |x|^alpha` holds at this price and rate.
    pub fn envelope_holds(&self, s: &[f64], x: &[f64], tol: Tolerance) -> Result<bool> {
        let g = self.eval_g(s, x)?;
        Ok(g >= self.h_floor * norm(x).powf(self.exponent()) - tol.inequality_abs)
    }
}

/// Probe-grid verification of the friction axioms at a fixed price: minimum at
/// zero, envelope domination and midpoint convexity.
pub fn check_axioms(
    spec: &FrictionSpec,
    s: &[f64],
    probes: &[Vec<f64>],
    tol: Tolerance,
) -> Result<()> {
    spec.validate()?;
    let zero = vec![0.0; probes.first().map_or(s.len().max(1), |p| p.len())];
    let g0 = spec.eval_g(s, &zero)?;
    if g0 > spec.participation_cost + tol.inequality_abs {
        return Err(Error::InvalidFriction(format!(
            "G(0) = {g0} exceeds the participation cost"
        )));
    }
    for x in probes {
        let gx = spec.eval_g(s, x)?;
        if gx < g0 - tol.inequality_abs {
            return Err(Error::InvalidFriction(format!("G(x) < G(0) at x = {x:?}")));
        }
        if !spec.envelope_holds(s, x, tol)? {
            return Err(Error::InvalidFriction(format!(
                "envelope H|x|^alpha violated at x = {x:?}"
            )));
        }
    }
    for a in probes {
        for b in probes {
            let mid: Vec<f64> = a.iter().zip(b).map(|(u, v)| 0.5 * (u + v)).collect();
            let lhs = spec.eval_g(s, &mid)?;
            let rhs = 0.5 * (spec.eval_g(s, a)? + spec.eval_g(s, b)?);
            if lhs > rhs + tol.inequality_abs * (1.0 + rhs.abs()) {
                return Err(Error::InvalidFriction(format!(
                    "midpoint convexity fails between {a:?} and {b:?}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_g_examples() {
        let p = FrictionSpec::power_scalar(1.0, 2.0);
        assert_eq!(p.eval_g(&[1.0], &[3.0]).unwrap(), 9.0);
        let q = FrictionSpec::quadratic_impact(0.5, 1.0);
        assert!((q.eval_g(&[100.0], &[2.0]).unwrap() - 100.0).abs() < 1e-12);
        let m = FrictionSpec::matrix_quadratic(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((m.eval_g(&[1.0, 1.0], &[1.0, 2.0]).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_impact_rejects_nonpositive_price() {
        let q = FrictionSpec::quadratic_impact(0.5, 1.0);
        assert!(matches!(
            q.eval_g(&[0.0], &[1.0]),
            Err(Error::InvalidPrice { .. })
        ));
        assert!(matches!(
            q.eval_g_star(&[-1.0], &[1.0]),
            Err(Error::InvalidPrice { .. })
        ));
    }

    #[test]
    fn conjugate_examples() {
        let p = FrictionSpec::power_scalar(1.0, 2.0);
        assert!((p.eval_g_star(&[1.0], &[2.0]).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(p.eval_g_star(&[1.0], &[0.0]).unwrap().value, 0.0);
        let q = FrictionSpec::quadratic_impact(0.5, 1.0);
        // y^2 / (2 lambda S)
        assert!((q.eval_g_star(&[4.0], &[2.0]).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn participation_cost_shifts_conjugate() {
        let p = FrictionSpec::power_scalar(1.0, 2.0).with_participation_cost(0.3);
        assert!((p.eval_g_star(&[1.0], &[0.0]).unwrap().value + 0.3).abs() < 1e-15);
        assert!((p.eval_g(&[1.0], &[0.0]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn tabulated_conjugate_matches_closed_form() {
        let xs: Vec<f64> = (0..=2000).map(|i| -10.0 + 0.01 * i as f64).collect();
        let gs: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let t = FrictionSpec::tabulated(xs, gs, 1.0, 2.0);
        t.validate().unwrap();
        let v = t.eval_g_star(&[1.0], &[3.0]).unwrap();
        assert!((v.value - 2.25).abs() < 1e-6, "{}", v.value);
        assert!((v.argsup[0] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn tabulated_rejects_nonconvex_and_diverging() {
        let t = FrictionSpec::tabulated(
            vec![-1.0, 0.0, 0.5, 1.0],
            vec![1.0, 0.0, 0.4, 0.5],
            0.1,
            2.0,
        );
        assert!(matches!(
            t.validate(),
            Err(Error::NonConvexTabulation { .. })
        ));
        let t = FrictionSpec::tabulated(vec![-1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0], 1.0, 2.0);
        t.validate().unwrap();
        assert!(matches!(
            t.eval_g_star(&[1.0], &[5.0]),
            Err(Error::ConjugateDiverged { .. })
        ));
        assert!(matches!(
            t.eval_g_prime(&[1.0], &[0.5]),
            Err(Error::NotDifferentiable(_))
        ));
        assert_eq!(t.eval_g(&[1.0], &[2.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gradient_examples() {
        let q = FrictionSpec::quadratic_impact(1.0, 0.5);
        assert_eq!(q.eval_g_prime(&[2.0], &[3.0]).unwrap(), vec![6.0]);
        let p = FrictionSpec::power_scalar(1.0, 2.0);
        assert_eq!(p.eval_g_prime(&[1.0], &[-1.0]).unwrap(), vec![-2.0]);
        let p = FrictionSpec::power_scalar(1.0, 1.5);
        assert_eq!(p.eval_g_prime(&[1.0], &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn matrix_gradient_matches_finite_differences() {
        let m = FrictionSpec::matrix_quadratic(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let x = [1.0, 1.0];
        let g = m.eval_g_prime(&[1.0, 1.0], &x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.eval_g(&[1.0, 1.0], &xp).unwrap() - m.eval_g(&[1.0, 1.0], &xm).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_examples() {
        let p = FrictionSpec::power_scalar(1.0, 2.0);
        assert!((p.dual_bound_envelope(&[2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(p.dual_bound_envelope(&[0.0]), 0.0);
        let env = p.dual_bound_envelope(&[1.0, 1.0]);
        assert!((env - 1.0).abs() < 1e-12);
        let gstar = p.eval_g_star(&[1.0, 1.0], &[1.0, 1.0]).unwrap().value;
        assert!(gstar <= env);
    }

    #[test]
    fn validation_errors() {
        assert!(FrictionSpec::power_scalar(1.0, 1.0).validate().is_err());
        assert!(FrictionSpec::power_scalar(1.0, 2.0)
            .with_h_floor(2.0)
            .validate()
            .is_err());
        assert!(
            FrictionSpec::matrix_quadratic(vec![vec![1.0, 2.0], vec![2.0, 1.0]])
                .validate()
                .is_err()
        );
        assert!(
            FrictionSpec::matrix_quadratic(vec![vec![1.0, 0.5], vec![0.4, 1.0]])
                .validate()
                .is_err()
        );
        FrictionSpec::matrix_quadratic(vec![vec![2.0, 0.5], vec![0.5, 1.0]])
            .validate()
            .unwrap();
    }

    #[test]
    fn axioms_on_probe_grid() {
        let probes: Vec<Vec<f64>> = (-20..=20).map(|i| vec![0.25 * i as f64]).collect();
        check_axioms(
            &FrictionSpec::power_scalar(0.7, 1.6),
            &[1.0],
            &probes,
            Tolerance::default(),
        )
        .unwrap();
        check_axioms(
            &FrictionSpec::quadratic_impact(0.5, 0.2),
            &[1.0],
            &probes,
            Tolerance::default(),
        )
        .unwrap();
        let bad = FrictionSpec::quadratic_impact(0.5, 2.0);
        assert!(check_axioms(&bad, &[1.0], &probes, Tolerance::default()).is_err());
    }

    #[test]
    fn json_shape() {
        let spec = FrictionSpec::power_scalar(1.0, 2.0);
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["kind"], "PowerScalar");
        assert_eq!(v["lambda"], 1.0);
        let back: FrictionSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
    }
}
