//! Noise/scale parameterizations of the probability-flow ODE time axis.
//!
//! A parameterization fixes the schedule functions `sigma(t)` and `s(t)` that
//! relate integration time to noise level and state scaling:
//!
//! * `edm`: `sigma(t) = t`, `s(t) = 1`
//! * `ve`:  `sigma(t) = sqrt(t)`, `s(t) = 1`
//! * `vp`:  `sigma(t) = sqrt(exp(u(t)) - 1)` with `u(t) = 0.5*beta_d*t^2 + beta_min*t`,
//!   `s(t) = exp(-u(t)/2)`
//!
//! All derivative formulas used by the velocity and curvature code are closed
//! form. For `vp` the useful identities are `B(t) = beta_min + beta_d*t`,
//! `sigma_dot = B/2 * (sigma + 1/sigma)`, `s_dot = -B/2 * s`, and
//! `1 + sigma^2 = exp(u)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{StepMeta, TimestepSchedule};

/// Noise levels below this floor make `1/sigma` terms unreliable; derivative
/// evaluations refuse to run there.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Relative tolerance of the bracketed root finder behind `vp` time inversion.
const INV_REL_TOL: f64 = 1e-12;

/// Which schedule family the parameterization belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Edm,
    Vp,
    Ve,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Edm => "edm",
            Kind::Vp => "vp",
            Kind::Ve => "ve",
        }
    }
}

/// Serialized form: `beta_d`/`beta_min` appear only for `vp`.
#[derive(Serialize, Deserialize)]
struct Wire {
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta_min: Option<f64>,
    sigma_min: f64,
    sigma_max: f64,
}

/// A concrete schedule with its noise range `[sigma_min, sigma_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Wire", into = "Wire")]
pub struct Parameterization {
    kind: Kind,
    beta_d: f64,
    beta_min: f64,
    sigma_min: f64,
    sigma_max: f64,
}

impl From<Parameterization> for Wire {
    fn from(p: Parameterization) -> Wire {
        let vp = p.kind == Kind::Vp;
        Wire {
            kind: p.kind,
            beta_d: vp.then_some(p.beta_d),
            beta_min: vp.then_some(p.beta_min),
            sigma_min: p.sigma_min,
            sigma_max: p.sigma_max,
        }
    }
}

impl TryFrom<Wire> for Parameterization {
    type Error = Error;
    fn try_from(w: Wire) -> Result<Parameterization> {
        match w.kind {
            Kind::Vp => Parameterization::vp(
                w.beta_d.unwrap_or(19.9),
                w.beta_min.unwrap_or(0.1),
                w.sigma_min,
                w.sigma_max,
            ),
            Kind::Edm => Parameterization::edm(w.sigma_min, w.sigma_max),
            Kind::Ve => Parameterization::ve(w.sigma_min, w.sigma_max),
        }
    }
}

impl Parameterization {
    fn validated(self) -> Result<Self> {
        if !(self.sigma_min.is_finite() && self.sigma_max.is_finite()) {
            return Err(Error::Domain("sigma range must be finite".into()));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(Error::Domain(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.kind == Kind::Vp {
            if !(self.beta_d >= 0.0 && self.beta_min >= 0.0 && self.beta_d + self.beta_min > 0.0) {
                return Err(Error::Domain(format!(
                    "vp needs beta_d, beta_min >= 0 and not both zero, got ({}, {})",
                    self.beta_d, self.beta_min
                )));
            }
        }
        Ok(self)
    }

    /// `sigma(t) = t`.
    pub fn edm(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Parameterization { kind: Kind::Edm, beta_d: 0.0, beta_min: 0.0, sigma_min, sigma_max }
            .validated()
    }

    /// `sigma(t) = sqrt(t)`.
    pub fn ve(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Parameterization { kind: Kind::Ve, beta_d: 0.0, beta_min: 0.0, sigma_min, sigma_max }
            .validated()
    }

    /// Variance-preserving schedule with linear `B(t) = beta_min + beta_d*t`.
    pub fn vp(beta_d: f64, beta_min: f64, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Parameterization { kind: Kind::Vp, beta_d, beta_min, sigma_min, sigma_max }.validated()
    }

    /// The `edm` schedule on the conventional range `[0.002, 80]`.
    pub fn edm_default() -> Self {
        Parameterization::edm(0.002, 80.0).expect("default range is valid")
    }

    /// The `vp` schedule with the conventional constants.
    pub fn vp_default() -> Self {
        Parameterization::vp(19.9, 0.1, 0.002, 80.0).expect("default range is valid")
    }

    /// The `ve` schedule on the conventional range.
    pub fn ve_default() -> Self {
        Parameterization::ve(0.002, 80.0).expect("default range is valid")
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// `beta_d` (zero for non-`vp` kinds).
    pub fn beta_d(&self) -> f64 {
        self.beta_d
    }

    /// `beta_min` (zero for non-`vp` kinds).
    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Domain(format!("time {t} outside [0, inf)")));
        }
        Ok(())
    }

    /// `u(t)` for the `vp` kind.
    fn vp_u(&self, t: f64) -> f64 {
        0.5 * self.beta_d * t * t + self.beta_min * t
    }

    /// `B(t) = beta_min + beta_d*t` for the `vp` kind.
    fn vp_big_b(&self, t: f64) -> f64 {
        self.beta_min + self.beta_d * t
    }

    /// Noise level at time `t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.kind {
            Kind::Edm => t,
            Kind::Ve => t.sqrt(),
            // expm1 keeps precision near t = 0 where u is tiny.
            Kind::Vp => self.vp_u(t).exp_m1().sqrt(),
        })
    }

    /// `(sigma_dot, sigma_ddot)` at time `t`. Errors below the sigma floor.
    pub fn sigma_derivatives(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        let sigma = self.sigma(t)?;
        if sigma < SIGMA_FLOOR {
            return Err(Error::SingularSigma { sigma, floor: SIGMA_FLOOR });
        }
        Ok(match self.kind {
            Kind::Edm => (1.0, 0.0),
            Kind::Ve => (0.5 / sigma, -0.25 / (sigma * sigma * sigma)),
            Kind::Vp => {
                let b = self.vp_big_b(t);
                let inv = 1.0 / sigma;
                let dot = 0.5 * b * (sigma + inv);
                let ddot = 0.5 * self.beta_d * (sigma + inv)
                    + 0.25 * b * b * (sigma - inv * inv * inv);
                (dot, ddot)
            }
        })
    }

    /// `(s, s_dot, s_ddot)` at time `t`.
    pub fn scale_derivatives(&self, t: f64) -> Result<(f64, f64, f64)> {
        self.check_time(t)?;
        Ok(match self.kind {
            Kind::Edm | Kind::Ve => (1.0, 0.0, 0.0),
            Kind::Vp => {
                let b = self.vp_big_b(t);
                let s = (-0.5 * self.vp_u(t)).exp();
                let s_dot = -0.5 * b * s;
                let s_ddot = (0.25 * b * b - 0.5 * self.beta_d) * s;
                (s, s_dot, s_ddot)
            }
        })
    }

    /// Inverse of `sigma`: the time at which the schedule reaches `sigma`.
    ///
    /// `edm` and `ve` invert in closed form; `vp` brackets the root of
    /// `u(t) = log(1 + sigma^2)` and bisects to relative tolerance `1e-12`.
    pub fn sigma_inv(&self, sigma: f64) -> Result<f64> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Domain(format!("sigma {sigma} outside [0, inf)")));
        }
        if sigma == 0.0 {
            return Ok(0.0);
        }
        Ok(match self.kind {
            Kind::Edm => sigma,
            Kind::Ve => sigma * sigma,
            Kind::Vp => {
                let target = sigma.mul_add(sigma, 0.0).ln_1p();
                let f = |t: f64| self.vp_u(t) - target;
                let mut hi = 1.0_f64;
                let mut guard = 0;
                while f(hi) < 0.0 {
                    hi *= 2.0;
                    guard += 1;
                    if guard > 200 {
                        return Err(Error::BudgetExceeded("vp sigma_inv bracketing".into()));
                    }
                }
                let mut lo = 0.0_f64;
                for _ in 0..300 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= INV_REL_TOL * hi {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        })
    }

    /// Time at which the schedule reaches `sigma_max`; sampling starts here.
    pub fn t_max(&self) -> f64 {
        self.sigma_inv(self.sigma_max).expect("sigma_max is validated")
    }

    /// Time at which the schedule reaches `sigma_min`; the last step jumps
    /// from here to exactly zero.
    pub fn t_min(&self) -> f64 {
        self.sigma_inv(self.sigma_min).expect("sigma_min is validated")
    }

    /// The rho-warped reference grid over `[sigma_min, sigma_max]`:
    /// `sigma_i = (sigma_max^(1/rho) + i/(n-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`
    /// for `i < n`, closed by `sigma_n = 0`. Returns `n + 1` grid points.
    pub fn edm_reference_grid(&self, n: usize, rho: f64) -> Result<TimestepSchedule> {
        if n < 2 {
            return Err(Error::Domain("grid needs at least two steps".into()));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::Domain(format!("rho {rho} outside (0, inf)")));
        }
        let mut sigmas = Vec::with_capacity(n + 1);
        let hi = self.sigma_max.powf(1.0 / rho);
        let lo = self.sigma_min.powf(1.0 / rho);
        for i in 0..n {
            let sigma = if i == 0 {
                self.sigma_max
            } else if i == n - 1 {
                self.sigma_min
            } else {
                let frac = i as f64 / (n - 1) as f64;
                (hi + frac * (lo - hi)).powf(rho)
            };
            sigmas.push(sigma);
        }
        sigmas.push(0.0);
        let times = sigmas
            .iter()
            .map(|&s| self.sigma_inv(s))
            .collect::<Result<Vec<f64>>>()?;
        TimestepSchedule::new(times, sigmas, Vec::<StepMeta>::new(), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn edm_is_identity() {
        let p = Parameterization::edm_default();
        assert_eq!(p.sigma(3.5).unwrap(), 3.5);
        assert_eq!(p.sigma_derivatives(3.5).unwrap(), (1.0, 0.0));
        assert_eq!(p.scale_derivatives(3.5).unwrap(), (1.0, 0.0, 0.0));
        assert_eq!(p.sigma_inv(3.5).unwrap(), 3.5);
    }

    #[test]
    fn ve_derivatives_at_unit_time() {
        let p = Parameterization::ve_default();
        assert_eq!(p.sigma(1.0).unwrap(), 1.0);
        assert_eq!(p.sigma_derivatives(1.0).unwrap(), (0.5, -0.25));
        assert_eq!(p.sigma_inv(2.0).unwrap(), 4.0);
    }

    #[test]
    fn vp_sigma_at_unit_time() {
        // sqrt(exp(0.5*19.9 + 0.1) - 1) evaluated at 50-digit precision.
        let p = Parameterization::vp(19.9, 0.1, 0.002, 200.0).unwrap();
        assert_relative_eq!(
            p.sigma(1.0).unwrap(),
            152.16697028394647,
            max_relative = 1e-13
        );
    }

    #[test]
    fn vp_scale_at_zero() {
        let p = Parameterization::vp_default();
        let (s, s_dot, _) = p.scale_derivatives(0.0).unwrap();
        assert_eq!(s, 1.0);
        assert_relative_eq!(s_dot, -0.05, max_relative = 1e-15);
    }

    #[test]
    fn vp_inverse_roundtrip() {
        let p = Parameterization::vp_default();
        for &t in &[1e-4, 1e-2, 0.1, 0.5, 0.93351114324070397] {
            let sigma = p.sigma(t).unwrap();
            let back = p.sigma_inv(sigma).unwrap();
            assert_relative_eq!(back, t, max_relative = 1e-10);
        }
    }

    #[test]
    fn vp_sigma_derivative_matches_finite_difference() {
        let p = Parameterization::vp_default();
        for &t in &[0.05, 0.3, 0.8] {
            let h = 1e-6 * t;
            let (dot, ddot) = p.sigma_derivatives(t).unwrap();
            let up = p.sigma(t + h).unwrap();
            let dn = p.sigma(t - h).unwrap();
            assert_relative_eq!(dot, (up - dn) / (2.0 * h), max_relative = 1e-7);
            // Second differences need a larger step to stay above roundoff.
            let h2 = 1e-3 * t;
            let up2 = p.sigma(t + h2).unwrap();
            let dn2 = p.sigma(t - h2).unwrap();
            let mid = p.sigma(t).unwrap();
            assert_relative_eq!(ddot, (up2 - 2.0 * mid + dn2) / (h2 * h2), max_relative = 1e-4);
        }
    }

    #[test]
    fn vp_scale_derivative_matches_finite_difference() {
        let p = Parameterization::vp_default();
        for &t in &[0.05, 0.3, 0.8] {
            let h = 1e-6 * t;
            let (_, s_dot, s_ddot) = p.scale_derivatives(t).unwrap();
            let (up, _, _) = p.scale_derivatives(t + h).unwrap();
            let (dn, _, _) = p.scale_derivatives(t - h).unwrap();
            assert_relative_eq!(s_dot, (up - dn) / (2.0 * h), max_relative = 1e-7);
            // Second differences need a larger step to stay above roundoff.
            let h2 = 1e-3 * t;
            let (up2, _, _) = p.scale_derivatives(t + h2).unwrap();
            let (mid, _, _) = p.scale_derivatives(t).unwrap();
            let (dn2, _, _) = p.scale_derivatives(t - h2).unwrap();
            assert_relative_eq!(s_ddot, (up2 - 2.0 * mid + dn2) / (h2 * h2), max_relative = 1e-4);
        }
    }

    #[test]
    fn grid_midpoint_matches_reference_value() {
        // i = 9 of the 18-step rho = 7 grid on [0.002, 80], 50-digit reference.
        let p = Parameterization::edm_default();
        let grid = p.edm_reference_grid(18, 7.0).unwrap();
        assert_eq!(grid.times.len(), 19);
        assert_relative_eq!(grid.sigmas[9], 1.9233398370400499, max_relative = 1e-14);
        assert_eq!(grid.sigmas[0], 80.0);
        assert_eq!(grid.sigmas[17], 0.002);
        assert_eq!(grid.sigmas[18], 0.0);
        assert_eq!(grid.times[18], 0.0);
    }

    #[test]
    fn grid_times_invert_to_grid_sigmas() {
        for p in [
            Parameterization::edm_default(),
            Parameterization::vp_default(),
            Parameterization::ve_default(),
        ] {
            let grid = p.edm_reference_grid(12, 7.0).unwrap();
            for (t, sigma) in grid.times.iter().zip(&grid.sigmas) {
                assert_relative_eq!(p.sigma(*t).unwrap(), *sigma, max_relative = 1e-10);
            }
            for w in grid.times.windows(2) {
                assert!(w[0] > w[1]);
            }
        }
    }

    #[test]
    fn grid_edge_shapes() {
        let p = Parameterization::edm_default();
        let two = p.edm_reference_grid(2, 7.0).unwrap();
        assert_eq!(two.sigmas, vec![80.0, 0.002, 0.0]);
        let lin = p.edm_reference_grid(5, 1.0).unwrap();
        for w in lin.sigmas[..5].windows(2) {
            assert_relative_eq!(w[0] - w[1], (80.0 - 0.002) / 4.0, max_relative = 1e-12);
        }
        assert!(p.edm_reference_grid(1, 7.0).is_err());
        assert!(p.edm_reference_grid(4, 0.0).is_err());
    }

    #[test]
    fn domain_errors() {
        let p = Parameterization::edm_default();
        assert!(p.sigma(-1.0).is_err());
        assert!(p.sigma_inv(-0.5).is_err());
        assert!(p.sigma_derivatives(0.0).is_err());
        assert!(Parameterization::edm(0.0, 80.0).is_err());
        assert!(Parameterization::edm(2.0, 1.0).is_err());
    }

    #[test]
    fn serde_roundtrip_keeps_vp_betas() {
        let p = Parameterization::vp(10.0, 0.2, 0.01, 50.0).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: Parameterization = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        let edm = Parameterization::edm_default();
        let text = serde_json::to_string(&edm).unwrap();
        assert!(!text.contains("beta"));
        assert_eq!(edm, serde_json::from_str::<Parameterization>(&text).unwrap());
    }
}
