//! Independent oracles and fixtures for the test suites.
//!
//! Everything here reaches its answer by a different route than the library
//! code it checks: closed forms for the centered single-Gaussian family,
//! plain quadrature for posterior means, permutation search for transport.
//! Enabled for this crate's own tests and, via the `testkit` feature, for
//! downstream test suites.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::oracle::{GaussianMixture, COV_JITTER};
use crate::param::Parameterization;

/// Exact flow contraction factor for a centered Gaussian with variance
/// `c2`, including the oracle's covariance jitter `j`. Writing
/// `q = c2 + j + sigma^2` and `a = j / (c2 + j)`, the state at `t_to` is
/// the state at `t_from` times
/// `(s1/s0) * (sigma1/sigma0)^a * (q1/q0)^((1-a)/2)`.
/// Both noise levels must be positive; the sub-floor region the reference
/// integrator freezes is outside this formula's domain.
pub fn gaussian_flow_factor(
    p: &Parameterization,
    c2: f64,
    t_from: f64,
    t_to: f64,
) -> Result<f64> {
    let (s0, _, _) = p.scale_derivatives(t_from)?;
    let (s1, _, _) = p.scale_derivatives(t_to)?;
    let sig0 = p.sigma(t_from)?;
    let sig1 = p.sigma(t_to)?;
    let a = COV_JITTER / (c2 + COV_JITTER);
    let q0 = c2 + COV_JITTER + sig0 * sig0;
    let q1 = c2 + COV_JITTER + sig1 * sig1;
    let ln_factor =
        (s1 / s0).ln() + a * (sig1 / sig0).ln() + 0.5 * (1.0 - a) * (q1 / q0).ln();
    Ok(ln_factor.exp())
}

/// Velocity multiplier for the same family: `v = factor * x` with
/// `factor = s_dot/s + sigma_dot * (sigma^2 + j) / (sigma * (c2 + j + sigma^2))`,
/// `j` the oracle's covariance jitter.
pub fn gaussian_velocity_factor(p: &Parameterization, c2: f64, t: f64) -> Result<f64> {
    let (s, s_dot, _) = p.scale_derivatives(t)?;
    let sigma = p.sigma(t)?;
    let (sig_dot, _) = p.sigma_derivatives(t)?;
    let q = c2 + COV_JITTER + sigma * sigma;
    Ok(s_dot / s + sig_dot * (sigma * sigma + COV_JITTER) / (sigma * q))
}

/// Acceleration multiplier at identity scaling (`sigma = t`):
/// `x_ddot = c2 * (1 - j/t^2) / (c2 + j + t^2)^2 * x`.
pub fn gaussian_curvature_factor_edm(c2: f64, t: f64) -> f64 {
    let denom = c2 + COV_JITTER + t * t;
    c2 * (1.0 - COV_JITTER / (t * t)) / (denom * denom)
}

/// Posterior-mean multiplier `D(y; sigma) = c2 / (c2 + j + sigma^2) * y`.
pub fn gaussian_denoised_factor(c2: f64, sigma: f64) -> f64 {
    c2 / (c2 + COV_JITTER + sigma * sigma)
}

/// Noise derivative of the multiplier: `-2 sigma c2 / (c2 + j + sigma^2)^2`.
pub fn gaussian_denoised_sigma_deriv_factor(c2: f64, sigma: f64) -> f64 {
    let denom = c2 + COV_JITTER + sigma * sigma;
    -2.0 * sigma * c2 / (denom * denom)
}

/// Composite Simpson rule with `panels` (even) subdivisions.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, panels: usize) -> f64 {
    assert!(panels >= 2 && panels % 2 == 0, "Simpson needs an even panel count");
    let h = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * i as f64);
    }
    acc * h / 3.0
}

/// Posterior mean of a 1-D mixture by direct quadrature over the prior's
/// support, with the same covariance jitter the library applies. No
/// Gaussian-integral identities are used, so this is an independent route
/// to the denoiser.
pub fn denoise_quadrature_1d(gm: &GaussianMixture, x: f64, sigma: f64) -> Result<f64> {
    if gm.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: gm.dim() });
    }
    let comps = gm.components();
    let var = sigma * sigma + COV_JITTER;
    // The posterior peak of each component sits between the component mean
    // and the observation, so the window must span both: prior support
    // alone cuts off the mass when x lies far outside it at small sigma.
    let mut lo = x - 14.0 * var.sqrt();
    let mut hi = x + 14.0 * var.sqrt();
    let mut c_min = f64::INFINITY;
    for c in comps {
        let sd = c.cov[(0, 0)].sqrt();
        lo = lo.min(c.mean[0] - 14.0 * sd);
        hi = hi.max(c.mean[0] + 14.0 * sd);
        c_min = c_min.min(sd);
    }
    let scale = c_min.min(sigma).max(1e-6);
    let mut panels = (((hi - lo) / (scale / 8.0)).ceil() as usize).max(4096);
    panels = (panels + panels % 2).min(1 << 21);

    let log_integrand = |x0: f64| -> f64 {
        // log of the prior density, as a logsumexp so tail regions that
        // underflow a linear-space sum still carry their exponent.
        let terms: Vec<f64> = comps
            .iter()
            .map(|c| {
                let v = c.cov[(0, 0)];
                let d = x0 - c.mean[0];
                c.weight.ln()
                    - 0.5 * d * d / v
                    - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
            })
            .collect();
        let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_prior = m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln();
        let d = x - x0;
        log_prior - 0.5 * d * d / var
    };
    // Far outside the prior the product of the two densities underflows,
    // so both integrals carry a common exp(-shift) taken at the grid
    // maximum; the shift cancels in the ratio.
    let h = (hi - lo) / panels as f64;
    let shift = (0..=panels)
        .map(|i| log_integrand(lo + h * i as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::NonFinite("quadrature posterior mass".into()));
    }
    let mass = simpson(|x0| (log_integrand(x0) - shift).exp(), lo, hi, panels);
    let first = simpson(|x0| x0 * (log_integrand(x0) - shift).exp(), lo, hi, panels);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::NonFinite("quadrature posterior mass".into()));
    }
    Ok(first / mass)
}

/// Central first difference of a vector-valued function of time.
pub fn central_diff<F>(f: F, t: f64, h: f64) -> Result<DVector<f64>>
where
    F: Fn(f64) -> Result<DVector<f64>>,
{
    Ok((f(t + h)? - f(t - h)?) / (2.0 * h))
}

/// Central second difference of a vector-valued function of time.
pub fn second_central_diff<F>(f: F, t: f64, h: f64) -> Result<DVector<f64>>
where
    F: Fn(f64) -> Result<DVector<f64>>,
{
    Ok((f(t + h)? - f(t)? * 2.0 + f(t - h)?) / (h * h))
}

/// Exact transport distance by trying every pairing. Factorial cost, so
/// the input is capped at nine points.
pub fn w2_brute_force(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    let n = a.len();
    if n == 0 || n != b.len() {
        return Err(Error::DimensionMismatch { expected: n.max(1), got: b.len() });
    }
    if n > 9 {
        return Err(Error::SizeCapExceeded { n, cap: 9 });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |perm: &[usize]| -> f64 {
        perm.iter().enumerate().map(|(i, &j)| (&a[i] - &b[j]).norm_squared()).sum()
    };
    let mut best = total(&perm);
    // Heap's algorithm over all permutations.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::preset;
    use approx::assert_relative_eq;

    #[test]
    fn simpson_integrates_polynomials_exactly() {
        let got = simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 3.0, 64);
        // antiderivative: x^4/4 - x^2 + x
        let exact = (81.0 / 4.0 - 9.0 + 3.0) - (0.25 - 1.0 - 1.0);
        assert_relative_eq!(got, exact, max_relative = 1e-13);
    }

    #[test]
    fn quadrature_matches_single_gaussian_closed_form() {
        let gm = preset("single-gaussian-1d").unwrap();
        for (x, sigma) in [(0.7, 0.5), (-1.3, 2.0), (4.0, 0.25)] {
            let got = denoise_quadrature_1d(&gm, x, sigma).unwrap();
            let want = gaussian_denoised_factor(1.0, sigma) * x;
            assert_relative_eq!(got, want, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn brute_force_finds_the_crossing_pairing() {
        let a = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])];
        let b = vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0])];
        assert_eq!(w2_brute_force(&a, &b).unwrap(), 0.0);
        let big = vec![DVector::from_vec(vec![0.0]); 10];
        assert!(w2_brute_force(&big, &big).is_err());
    }

    #[test]
    fn flow_factor_is_multiplicative_across_intervals() {
        let p = Parameterization::vp_default();
        let t = [0.9, 0.5, 0.2];
        let whole = gaussian_flow_factor(&p, 2.0, t[0], t[2]).unwrap();
        let split = gaussian_flow_factor(&p, 2.0, t[0], t[1]).unwrap()
            * gaussian_flow_factor(&p, 2.0, t[1], t[2]).unwrap();
        assert_relative_eq!(whole, split, max_relative = 1e-13);
    }
}
