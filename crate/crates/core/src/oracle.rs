//! Analytic denoising oracle backed by a Gaussian mixture.
//!
//! For data `x0 ~ sum_k w_k N(mean_k, cov_k)` corrupted as `x = x0 + sigma*eps`,
//! the posterior mean `D(x; sigma) = E[x0 | x]` is available in closed form:
//!
//! ```text
//! D(x; sigma) = sum_k r_k(x) m_k(x)
//! r_k(x) ∝ w_k N(x; mean_k, cov_k + sigma^2 I)          (responsibilities)
//! m_k(x) = mean_k + cov_k (cov_k + sigma^2 I)^-1 (x - mean_k)
//! ```
//!
//! The same structure yields the exact Jacobian `dD/dx` and noise derivative
//! `dD/dsigma`, including the cross terms from differentiating the
//! responsibilities. Responsibilities are computed in log space with the
//! max trick, and a `1e-10` jitter is added alongside `sigma^2` when
//! factorizing so that point-mass components stay invertible.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameterization;
use crate::rng::stream;

/// Added to `sigma^2` on the diagonal before factorizing.
pub const COV_JITTER: f64 = 1e-10;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// One mixture component.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Cholesky factor of `cov + jitter*I`, used for sampling.
    sample_chol: DMatrix<f64>,
}

/// Wire format: `{dim, components: [{weight, mean, cov}]}`.
#[derive(Serialize, Deserialize)]
struct ComponentWire {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureWire {
    dim: usize,
    components: Vec<ComponentWire>,
}

/// A Gaussian mixture with an instrumented evaluation counter.
///
/// The counter increments once per `denoise` call and exists so tests can
/// cross-check solver evaluation ledgers against ground truth.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "MixtureWire", into = "MixtureWire")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    #[serde(skip)]
    evals: AtomicU64,
}

impl Clone for GaussianMixture {
    fn clone(&self) -> Self {
        GaussianMixture {
            dim: self.dim,
            components: self.components.clone(),
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl From<GaussianMixture> for MixtureWire {
    fn from(gm: GaussianMixture) -> MixtureWire {
        MixtureWire {
            dim: gm.dim,
            components: gm
                .components
                .iter()
                .map(|c| ComponentWire {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    cov: (0..c.cov.nrows())
                        .map(|i| c.cov.row(i).iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MixtureWire> for GaussianMixture {
    type Error = Error;
    fn try_from(w: MixtureWire) -> Result<GaussianMixture> {
        let weights: Vec<f64> = w.components.iter().map(|c| c.weight).collect();
        let means: Vec<Vec<f64>> = w.components.iter().map(|c| c.mean.clone()).collect();
        let covs: Vec<Vec<Vec<f64>>> = w.components.iter().map(|c| c.cov.clone()).collect();
        GaussianMixture::from_parts(w.dim, &weights, &means, &covs)
    }
}

/// Result of one oracle evaluation.
#[derive(Debug, Clone)]
pub struct OracleEval {
    /// Posterior mean `D(x; sigma)`.
    pub denoised: DVector<f64>,
    /// Score `(denoised - x) / sigma^2`.
    pub score: DVector<f64>,
    /// `dD/dx`, present when requested.
    pub jacobian: Option<DMatrix<f64>>,
    /// `dD/dsigma`, present when requested.
    pub sigma_deriv: Option<DVector<f64>>,
}

impl GaussianMixture {
    /// Build and validate a mixture from raw parts.
    ///
    /// Weights must be positive and sum to 1 within `1e-9` (they are
    /// renormalized exactly); covariances must be symmetric positive
    /// semidefinite.
    pub fn from_parts(
        dim: usize,
        weights: &[f64],
        means: &[Vec<f64>],
        covs: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMixture("dim must be at least 1".into()));
        }
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidMixture(
                "weights, means, and covs must be equal-length and nonempty".into(),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::InvalidMixture("weights must be positive".into()));
        }
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!("weights sum to {wsum}, expected 1")));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (k, ((&w, mean), cov)) in weights.iter().zip(means).zip(covs).enumerate() {
            if mean.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: mean has length {}, expected {dim}",
                    mean.len()
                )));
            }
            if cov.len() != dim || cov.iter().any(|row| row.len() != dim) {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: cov must be {dim}x{dim}"
                )));
            }
            let mut m = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    m[(i, j)] = cov[i][j];
                }
            }
            let scale = 1.0_f64.max(m.amax());
            if (&m - m.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidMixture(format!("component {k}: cov not symmetric")));
            }
            let m = (&m + m.transpose()) * 0.5;
            let eig = m.clone().symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: cov not positive semidefinite"
                )));
            }
            let jittered = &m + DMatrix::identity(dim, dim) * COV_JITTER;
            let chol = Cholesky::new(jittered).ok_or_else(|| {
                Error::InvalidMixture(format!("component {k}: cov factorization failed"))
            })?;
            components.push(Component {
                weight: w / wsum,
                mean: DVector::from_row_slice(mean),
                cov: m,
                sample_chol: chol.l(),
            });
        }
        Ok(GaussianMixture { dim, components, evals: AtomicU64::new(0) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Number of `denoise` calls made against this mixture so far.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("oracle input point".into()));
        }
        Ok(())
    }

    /// Per-component Cholesky factorizations of `cov_k + (sigma^2 + jitter) I`.
    fn noised_factors(&self, sigma: f64) -> Result<Vec<Cholesky<f64, Dyn>>> {
        let diag = sigma * sigma + COV_JITTER;
        self.components
            .iter()
            .map(|c| {
                let noised = &c.cov + DMatrix::identity(self.dim, self.dim) * diag;
                Cholesky::new(noised)
                    .ok_or_else(|| Error::NonFinite("noised covariance factorization".into()))
            })
            .collect()
    }

    /// Posterior responsibilities of each component at `(x, sigma)`.
    pub fn responsibilities(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        self.check_point(x)?;
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Domain(format!("sigma {sigma} outside (0, inf)")));
        }
        let factors = self.noised_factors(sigma)?;
        let (resp, _) = self.log_resp(x, &factors);
        Ok(resp)
    }

    /// Log-space responsibility computation; also returns `a_k = Sigma_k^-1 (x - mean_k)`.
    fn log_resp(
        &self,
        x: &DVector<f64>,
        factors: &[Cholesky<f64, Dyn>],
    ) -> (DVector<f64>, Vec<DVector<f64>>) {
        let n = self.components.len();
        let mut log_terms = Vec::with_capacity(n);
        let mut aks = Vec::with_capacity(n);
        for (c, chol) in self.components.iter().zip(factors) {
            let d = x - &c.mean;
            let a = chol.solve(&d);
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let log_n = -0.5 * (d.dot(&a) + logdet + self.dim as f64 * LN_2PI);
            log_terms.push(c.weight.ln() + log_n);
            aks.push(a);
        }
        let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp = DVector::<f64>::zeros(n);
        let mut total = 0.0;
        for (i, &lt) in log_terms.iter().enumerate() {
            let e = (lt - max).exp();
            resp[i] = e;
            total += e;
        }
        resp /= total;
        (resp, aks)
    }

    /// Evaluate the posterior-mean denoiser at `(x, sigma)`.
    ///
    /// Set `want_jacobian` / `want_sigma_deriv` to also get `dD/dx` and
    /// `dD/dsigma`. One call counts as one evaluation regardless of which
    /// derivatives are requested.
    pub fn denoise(
        &self,
        x: &DVector<f64>,
        sigma: f64,
        want_jacobian: bool,
        want_sigma_deriv: bool,
    ) -> Result<OracleEval> {
        self.check_point(x)?;
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Domain(format!("sigma {sigma} outside (0, inf)")));
        }
        self.evals.fetch_add(1, Ordering::Relaxed);

        let factors = self.noised_factors(sigma)?;
        let (resp, aks) = self.log_resp(x, &factors);

        let n = self.components.len();
        let mut posterior_means = Vec::with_capacity(n);
        let mut denoised = DVector::<f64>::zeros(self.dim);
        for k in 0..n {
            let m = &self.components[k].mean + &self.components[k].cov * &aks[k];
            denoised += &m * resp[k];
            posterior_means.push(m);
        }
        let score = (&denoised - x) / (sigma * sigma);

        let jacobian = want_jacobian.then(|| {
            // dD/dx = sum_k r_k cov_k Sigma_k^-1
            //       + D a_bar^T - sum_k r_k m_k a_k^T   (responsibility gradients)
            let mut a_bar = DVector::<f64>::zeros(self.dim);
            for k in 0..n {
                a_bar += &aks[k] * resp[k];
            }
            let mut jac = &denoised * a_bar.transpose();
            for k in 0..n {
                let gain = factors[k].solve(&self.components[k].cov);
                jac += gain.transpose() * resp[k];
                jac -= &posterior_means[k] * (aks[k].transpose() * resp[k]);
            }
            jac
        });

        let sigma_deriv = want_sigma_deriv.then(|| {
            // d(log N_k)/dsigma = sigma * (|a_k|^2 - tr(Sigma_k^-1)), and
            // dm_k/dsigma = -2 sigma cov_k Sigma_k^-1 a_k.
            let mut lprime = Vec::with_capacity(n);
            let mut lbar = 0.0;
            for k in 0..n {
                let inv_trace = factors[k]
                    .solve(&DMatrix::<f64>::identity(self.dim, self.dim))
                    .trace();
                let lp = sigma * (aks[k].norm_squared() - inv_trace);
                lbar += resp[k] * lp;
                lprime.push(lp);
            }
            let mut deriv = DVector::<f64>::zeros(self.dim);
            for k in 0..n {
                let b = factors[k].solve(&aks[k]);
                deriv += &posterior_means[k] * (resp[k] * (lprime[k] - lbar));
                deriv -= (&self.components[k].cov * b) * (2.0 * sigma * resp[k]);
            }
            deriv
        });

        Ok(OracleEval { denoised, score, jacobian, sigma_deriv })
    }

    /// Draw `n` exact samples from the forward-process marginal at time `t`:
    /// `x = s(t) * (x0 + sigma(t) * eps)` with `x0` from the mixture.
    ///
    /// Rows of the result are samples. Each sample uses its own derived
    /// stream, so the result is independent of batching or thread count.
    pub fn sample_marginal(
        &self,
        p: &Parameterization,
        t: f64,
        n: usize,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        let sigma = p.sigma(t)?;
        let (s, _, _) = p.scale_derivatives(t)?;
        let mut out = DMatrix::<f64>::zeros(n, self.dim);
        for j in 0..n {
            let mut rng = stream(seed, "marginal", j as u64);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (k, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let c = &self.components[pick];
            let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut x = &c.mean + &c.sample_chol * z;
            for i in 0..self.dim {
                let eps: f64 = rng.sample(StandardNormal);
                x[i] = s * (x[i] + sigma * eps);
            }
            out.row_mut(j).copy_from(&x.transpose());
        }
        Ok(out)
    }
}

/// Names of the bundled example mixtures.
pub fn preset_names() -> &'static [&'static str] {
    &[
        "single-gaussian-1d",
        "bimodal-1d",
        "trimodal-1d",
        "two-moons-gmm-8",
        "anisotropic-2d",
    ]
}

/// Construct a bundled example mixture by name.
pub fn preset(name: &str) -> Result<GaussianMixture> {
    match name {
        "single-gaussian-1d" => GaussianMixture::from_parts(
            1,
            &[1.0],
            &[vec![0.0]],
            &[vec![vec![1.0]]],
        ),
        "bimodal-1d" => GaussianMixture::from_parts(
            1,
            &[0.65, 0.35],
            &[vec![-1.2], vec![1.8]],
            &[vec![vec![0.09]], vec![vec![0.25]]],
        ),
        "trimodal-1d" => GaussianMixture::from_parts(
            1,
            &[0.5, 0.3, 0.2],
            &[vec![-2.0], vec![0.5], vec![2.5]],
            &[vec![vec![0.25]], vec![vec![0.04]], vec![vec![0.09]]],
        ),
        "two-moons-gmm-8" => {
            let angles = [15.0_f64, 65.0, 115.0, 165.0];
            let mut means = Vec::new();
            for a in angles {
                let r = a.to_radians();
                means.push(vec![r.cos(), r.sin()]);
            }
            for a in angles {
                let r = a.to_radians();
                means.push(vec![1.0 - r.cos(), 0.4 - r.sin()]);
            }
            let covs = vec![vec![vec![0.02, 0.0], vec![0.0, 0.02]]; 8];
            GaussianMixture::from_parts(2, &[0.125; 8], &means, &covs)
        }
        "anisotropic-2d" => GaussianMixture::from_parts(
            2,
            &[0.5, 0.5],
            &[vec![-1.0, 0.0], vec![1.0, 0.0]],
            &[
                vec![vec![0.4, 0.18], vec![0.18, 0.12]],
                vec![vec![0.1, -0.05], vec![-0.05, 0.3]],
            ],
        ),
        _ => Err(Error::InvalidMixture(format!("unknown preset {name:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(c2: f64) -> GaussianMixture {
        GaussianMixture::from_parts(1, &[1.0], &[vec![0.0]], &[vec![vec![c2]]]).unwrap()
    }

    #[test]
    fn single_gaussian_denoiser_is_linear_shrinkage() {
        // D(x; sigma) = c^2 / (c^2 + sigma^2 + jitter) * x for a centered
        // Gaussian; the jitter enters through the noised covariance.
        let gm = single(4.0);
        let x = DVector::from_vec(vec![2.5]);
        let eval = gm.denoise(&x, 1.5, true, true).unwrap();
        let quad = 4.0 + 2.25 + COV_JITTER;
        let gamma = 4.0 / quad;
        assert_relative_eq!(eval.denoised[0], gamma * 2.5, max_relative = 1e-12);
        assert_relative_eq!(eval.jacobian.unwrap()[(0, 0)], gamma, max_relative = 1e-9);
        // dD/dsigma = -2 sigma c^2 / (c^2 + sigma^2 + jitter)^2 * x
        let dref = -2.0 * 1.5 * 4.0 / (quad * quad) * 2.5;
        assert_relative_eq!(eval.sigma_deriv.unwrap()[0], dref, max_relative = 1e-9);
    }

    #[test]
    fn score_identity_holds() {
        let gm = preset("bimodal-1d").unwrap();
        for &(x, s) in &[(0.3, 0.5), (-2.0, 1.0), (5.0, 10.0)] {
            let xv = DVector::from_vec(vec![x]);
            let eval = gm.denoise(&xv, s, false, false).unwrap();
            let recon = s * s * eval.score[0] + x;
            assert_relative_eq!(recon, eval.denoised[0], max_relative = 1e-13);
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let gm = preset("two-moons-gmm-8").unwrap();
        for &(a, b, s) in &[(0.0, 0.0, 0.1), (3.0, -2.0, 1.0), (-40.0, 55.0, 80.0)] {
            let r = gm
                .responsibilities(&DVector::from_vec(vec![a, b]), s)
                .unwrap();
            assert_relative_eq!(r.sum(), 1.0, max_relative = 1e-12);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let gm = preset("anisotropic-2d").unwrap();
        let x = DVector::from_vec(vec![0.4, -0.3]);
        let sigma = 0.7;
        let jac = gm.denoise(&x, sigma, true, false).unwrap().jacobian.unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += h;
            dn[j] -= h;
            let du = gm.denoise(&up, sigma, false, false).unwrap().denoised;
            let dd = gm.denoise(&dn, sigma, false, false).unwrap().denoised;
            for i in 0..2 {
                let fd = (du[i] - dd[i]) / (2.0 * h);
                assert_relative_eq!(jac[(i, j)], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn sigma_derivative_matches_finite_differences() {
        let gm = preset("trimodal-1d").unwrap();
        let x = DVector::from_vec(vec![0.9]);
        for &sigma in &[0.05, 0.4, 2.0, 20.0] {
            let d = gm
                .denoise(&x, sigma, false, true)
                .unwrap()
                .sigma_deriv
                .unwrap();
            let h = 1e-6 * sigma;
            let du = gm.denoise(&x, sigma + h, false, false).unwrap().denoised;
            let dd = gm.denoise(&x, sigma - h, false, false).unwrap().denoised;
            let fd = (du[0] - dd[0]) / (2.0 * h);
            assert_relative_eq!(d[0], fd, epsilon = 1e-8, max_relative = 1e-5);
        }
    }

    #[test]
    fn high_noise_denoiser_approaches_global_mean() {
        let gm = preset("bimodal-1d").unwrap();
        let mean = 0.65 * -1.2 + 0.35 * 1.8;
        let eval = gm
            .denoise(&DVector::from_vec(vec![0.1]), 5_000.0, false, false)
            .unwrap();
        assert_relative_eq!(eval.denoised[0], mean, epsilon = 1e-3);
    }

    #[test]
    fn marginal_sampling_is_deterministic_and_scaled() {
        let gm = preset("bimodal-1d").unwrap();
        let p = Parameterization::vp_default();
        let a = gm.sample_marginal(&p, 0.5, 64, 7).unwrap();
        let b = gm.sample_marginal(&p, 0.5, 64, 7).unwrap();
        assert_eq!(a, b);
        let c = gm.sample_marginal(&p, 0.5, 64, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn marginal_at_zero_time_is_noise_free() {
        let gm = single(0.0); // point mass at origin, enabled by the jitter
        let p = Parameterization::edm_default();
        let x = gm.sample_marginal(&p, 0.0, 8, 3).unwrap();
        for v in x.iter() {
            assert!(v.abs() < 1e-4, "point-mass sample drifted: {v}");
        }
    }

    #[test]
    fn eval_counter_counts_denoise_calls() {
        let gm = preset("bimodal-1d").unwrap();
        let x = DVector::from_vec(vec![0.0]);
        let before = gm.eval_count();
        gm.denoise(&x, 1.0, false, false).unwrap();
        gm.denoise(&x, 1.0, true, true).unwrap();
        assert_eq!(gm.eval_count() - before, 2);
    }

    #[test]
    fn mixture_wire_roundtrip() {
        let gm = preset("anisotropic-2d").unwrap();
        let text = serde_json::to_string(&gm).unwrap();
        let back: GaussianMixture = serde_json::from_str(&text).unwrap();
        assert_eq!(back.dim(), 2);
        let x = DVector::from_vec(vec![0.3, 0.6]);
        assert_eq!(
            gm.denoise(&x, 0.9, false, false).unwrap().denoised,
            back.denoise(&x, 0.9, false, false).unwrap().denoised
        );
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        assert!(GaussianMixture::from_parts(1, &[0.5, 0.4], &[vec![0.0], vec![1.0]],
            &[vec![vec![1.0]], vec![vec![1.0]]]).is_err());
        assert!(GaussianMixture::from_parts(1, &[1.0], &[vec![0.0]], &[vec![vec![-1.0]]]).is_err());
        assert!(GaussianMixture::from_parts(2, &[1.0], &[vec![0.0]], &[vec![vec![1.0]]]).is_err());
        assert!(preset("nope").is_err());
    }
}
