//! Manifold-density authentication score.
//!
//! A window is scored by linearizing the decoder at the encoded latent:
//! the thin SVD of the Jacobian spans the local tangent space, the window
//! splits into a tangent component and an orthogonal residual, and the
//! log-density factors into a parallel part (inverse singular values times
//! the uniform prior) and an orthogonal part (hypersphere-shell geometry
//! times an offline-fitted residual-norm density). All probability
//! arithmetic stays in log space; the determinant term would underflow
//! linear space at m = 600.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{LatentCode, ModelParams};
use crate::nn::Value;
use crate::preprocessing::SensorWindow;

pub const SINGULAR_VALUE_FLOOR: f64 = 1e-8;
pub const RESIDUAL_FLOOR: f64 = 1e-12;
pub const DENSITY_FLOOR: f64 = 1e-12;
pub const TAIL_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

/// Per-window log-density decomposition plus the thresholded verdict.
/// `log_p` always equals the sum of the three terms exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub log_p: f64,
    /// −Σ log s_i over the Jacobian's singular values.
    pub log_det_term: f64,
    /// Log-density of the latent under the uniform prior on (−1,1)^n.
    pub log_prior_term: f64,
    /// Hypersphere-shell factor times the residual-norm tail density.
    pub log_perp_term: f64,
    pub residual_norm: f64,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// How many singular values hit the 1e-8 floor before the log.
    pub clamped_singular_values: usize,
    pub verdict: Verdict,
    pub threshold: f64,
}

/// Histogram density of legitimate-user residual norms, add-one smoothed,
/// queried by linear interpolation between bin centers with a hard floor
/// outside the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTailDensity {
    pub bin_edges: Vec<f64>,
    pub bin_log_densities: Vec<f64>,
    pub floor: f64,
    pub sample_count: usize,
}

impl ResidualTailDensity {
    /// Fit on at least 50 nonnegative residual norms; bins cover
    /// [0, 1.5 × max].
    pub fn fit(residual_norms: &[f64]) -> Result<ResidualTailDensity> {
        if residual_norms.len() < 50 {
            return Err(Error::data(format!(
                "residual-density fit needs at least 50 values, got {}; calibrate on more legitimate windows",
                residual_norms.len()
            )));
        }
        if residual_norms.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::numeric("residual norms must be finite and >= 0"));
        }
        let max = residual_norms.iter().cloned().fold(0.0, f64::max);
        let hi = if max > 0.0 { 1.5 * max } else { RESIDUAL_FLOOR };
        let width = hi / TAIL_BINS as f64;
        let mut counts = vec![0usize; TAIL_BINS];
        for &r in residual_norms {
            let mut bin = (r / width) as usize;
            if bin >= TAIL_BINS {
                bin = TAIL_BINS - 1;
            }
            counts[bin] += 1;
        }
        let n = residual_norms.len();
        let total = (n + TAIL_BINS) as f64;
        let bin_log_densities: Vec<f64> = counts
            .iter()
            .map(|&c| (((c + 1) as f64) / (total * width)).ln())
            .collect();
        let bin_edges: Vec<f64> = (0..=TAIL_BINS).map(|i| i as f64 * width).collect();
        Ok(ResidualTailDensity {
            bin_edges,
            bin_log_densities,
            floor: DENSITY_FLOOR,
            sample_count: n,
        })
    }

    fn width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }

    /// Density integral before flooring; 1 up to rounding by construction.
    pub fn integral(&self) -> f64 {
        let w = self.width();
        self.bin_log_densities.iter().map(|&l| l.exp() * w).sum()
    }

    /// Log-density at `r`: linear interpolation of the bin densities between
    /// bin centers, clamped to the nearest bin beyond the first/last center,
    /// and the floor outside [0, last edge].
    pub fn log_density(&self, r: f64) -> f64 {
        let hi = *self.bin_edges.last().unwrap();
        if !(0.0..=hi).contains(&r) {
            return self.floor.ln();
        }
        let w = self.width();
        let pos = r / w - 0.5; // fractional bin-center index
        let d = if pos <= 0.0 {
            self.bin_log_densities[0].exp()
        } else if pos >= (TAIL_BINS - 1) as f64 {
            self.bin_log_densities[TAIL_BINS - 1].exp()
        } else {
            let i = pos.floor() as usize;
            let t = pos - i as f64;
            let a = self.bin_log_densities[i].exp();
            let b = self.bin_log_densities[i + 1].exp();
            a + t * (b - a)
        };
        d.max(self.floor).ln()
    }
}

// ---------------------------------------------------------------------------
// Decoder linearization
// ---------------------------------------------------------------------------

/// Anything that can encode a window and expose the decoder Jacobian at a
/// latent point. The trained model implements this; tests plug in
/// closed-form decoders.
pub trait ScoreModel {
    fn latent_dim(&self) -> usize;
    /// Flattened output dimension m.
    fn output_dim(&self) -> usize;
    fn encode_window(&self, window: &SensorWindow) -> Result<Array1<f64>>;
    /// `(m, latent_dim)` matrix of ∂(flattened decoder output)/∂latent.
    fn jacobian_at(&self, latent: &Array1<f64>) -> Result<Array2<f64>>;
}

impl ScoreModel for ModelParams {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.input_height * self.spec.input_width
    }

    fn encode_window(&self, window: &SensorWindow) -> Result<Array1<f64>> {
        crate::networks::encode(&window.values, self).map(|z| z.0)
    }

    fn jacobian_at(&self, latent: &Array1<f64>) -> Result<Array2<f64>> {
        decoder_jacobian(&LatentCode(latent.clone()), self)
    }
}

/// Exact Jacobian of the decoder at `latent`, evaluated with normalization
/// in inference mode: one primal pass plus a batched tangent propagation of
/// the latent basis vectors.
pub fn decoder_jacobian(latent: &LatentCode, model: &ModelParams) -> Result<Array2<f64>> {
    let n = model.spec.latent_dim;
    if latent.dim() != n {
        return Err(Error::config(format!(
            "latent has {} components, model expects {n}",
            latent.dim()
        )));
    }
    let z = Value::Features(
        latent
            .0
            .to_owned()
            .into_shape_with_order((1, n))
            .unwrap(),
    );
    let (_, caches) = model.decoder.forward_infer(&z)?;
    let basis = Array2::<f64>::eye(n);
    let cols = model
        .decoder
        .jvp(&caches, Value::Features(basis))?
        .into_map()?;
    let (t, _, h, w) = cols.dim();
    debug_assert_eq!(t, n);
    let m = h * w;
    let flat = cols.into_shape_with_order((n, m)).unwrap();
    let jac = flat.t().to_owned();
    if !jac.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!(
            "decoder Jacobian non-finite at latent {:?}",
            latent.0.as_slice().unwrap()
        )));
    }
    Ok(jac)
}

/// Thin-SVD split of a flattened window against the tangent space spanned
/// by the Jacobian: tangent coordinates, orthogonal residual norm (computed
/// as ‖x − U∥U∥ᵀx‖ without materializing the orthogonal basis) and the
/// singular values in descending order.
pub fn tangent_decompose(
    x: &Array1<f64>,
    jacobian: &Array2<f64>,
) -> Result<(Array1<f64>, f64, Vec<f64>)> {
    let (m, n) = jacobian.dim();
    if m <= n {
        return Err(Error::config(format!(
            "jacobian must be tall (m > latent_dim), got {m}x{n}"
        )));
    }
    if x.len() != m {
        return Err(Error::config(format!(
            "window has {} cells, jacobian expects {m}",
            x.len()
        )));
    }
    let dm = nalgebra::DMatrix::from_row_iterator(m, n, jacobian.iter().copied());
    let svd = dm.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::numeric("SVD failed to produce U"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    // y_par[k] = u_col_k . x, in descending singular-value order
    let mut y_par = Array1::zeros(n);
    for (k, &col) in order.iter().enumerate() {
        let mut dot = 0.0;
        for r in 0..m {
            dot += u[(r, col)] * x[r];
        }
        y_par[k] = dot;
    }
    // residual = x - U (U^T x)
    let mut residual_sq = 0.0;
    for r in 0..m {
        let mut proj = 0.0;
        for (k, &col) in order.iter().enumerate() {
            proj += u[(r, col)] * y_par[k];
        }
        let d = x[r] - proj;
        residual_sq += d * d;
    }
    Ok((y_par, residual_sq.max(0.0).sqrt(), singular_values))
}

/// Fit the residual-norm density on legitimate calibration windows.
pub fn fit_residual_density(residual_norms: &[f64]) -> Result<ResidualTailDensity> {
    ResidualTailDensity::fit(residual_norms)
}

/// Residual norm of one window against the model's tangent space; the
/// quantity the tail density is fitted on.
pub fn residual_norm_of<M: ScoreModel>(window: &SensorWindow, model: &M) -> Result<f64> {
    let z = model.encode_window(window)?;
    let jac = model.jacobian_at(&z)?;
    let x = flatten_window(window);
    let (_, residual, _) = tangent_decompose(&x, &jac)?;
    Ok(residual)
}

pub fn flatten_window(window: &SensorWindow) -> Array1<f64> {
    Array1::from_iter(window.values.iter().copied())
}

/// Exact log-gamma for positive integer and half-integer arguments
/// (the hypersphere exponent (m−n)/2 is always one of those).
pub fn ln_gamma_half(two_a: usize) -> f64 {
    assert!(two_a >= 1, "argument must be >= 1/2");
    if two_a % 2 == 0 {
        // ln Γ(k) = ln (k-1)!
        let k = two_a / 2;
        (2..k).map(|i| (i as f64).ln()).sum()
    } else {
        // ln Γ(k + 1/2) = ln √π + Σ_{j=1..k} ln(j − 1/2)
        let k = two_a / 2;
        0.5 * std::f64::consts::PI.ln()
            + (1..=k).map(|j| (j as f64 - 0.5).ln()).sum::<f64>()
    }
}

/// Score one window: encode, linearize the decoder, decompose, and assemble
/// the factored log-density. Accept iff `log_p >= tau`.
pub fn score<M: ScoreModel>(
    window: &SensorWindow,
    model: &M,
    tail: &ResidualTailDensity,
    tau: f64,
) -> Result<ScoreBreakdown> {
    let z = model.encode_window(window)?;
    let jac = model.jacobian_at(&z)?;
    let x = flatten_window(window);
    let (_, residual_norm, singular_values) = tangent_decompose(&x, &jac)?;

    let m = model.output_dim();
    let n = model.latent_dim();
    let mut clamped = 0;
    let log_det_term = -singular_values
        .iter()
        .map(|&s| {
            if s < SINGULAR_VALUE_FLOOR {
                clamped += 1;
                SINGULAR_VALUE_FLOOR.ln()
            } else {
                s.ln()
            }
        })
        .sum::<f64>();
    let log_prior_term = -(n as f64) * std::f64::consts::LN_2;

    let r = residual_norm.max(RESIDUAL_FLOOR);
    let mn = m - n;
    let log_perp_term = ln_gamma_half(mn) - std::f64::consts::LN_2
        - (mn as f64 / 2.0) * std::f64::consts::PI.ln()
        - (mn as f64) * r.ln()
        + tail.log_density(r);

    let log_p = log_det_term + log_prior_term + log_perp_term;
    Ok(ScoreBreakdown {
        log_p,
        log_det_term,
        log_prior_term,
        log_perp_term,
        residual_norm,
        clamped_singular_values: clamped,
        singular_values,
        verdict: if log_p >= tau {
            Verdict::Accept
        } else {
            Verdict::Reject
        },
        threshold: tau,
    })
}

/// Largest-tpr threshold: the lower-interpolated (1 − target_tpr) quantile
/// of the legitimate validation scores, so at least `target_tpr` of them
/// score at or above the returned τ.
pub fn calibrate_threshold(validation_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if validation_scores.is_empty() {
        return Err(Error::data("cannot calibrate a threshold on zero scores"));
    }
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::config(format!(
            "target TPR must be in [0,1], got {target_tpr}"
        )));
    }
    let mut sorted = validation_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((1.0 - target_tpr) * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Test-only decoder f(z) = A·z with a fixed matrix.
    struct LinearDecoder {
        a: Array2<f64>, // m × n, orthonormal columns
    }

    impl ScoreModel for LinearDecoder {
        fn latent_dim(&self) -> usize {
            self.a.dim().1
        }
        fn output_dim(&self) -> usize {
            self.a.dim().0
        }
        fn encode_window(&self, window: &SensorWindow) -> Result<Array1<f64>> {
            let x = flatten_window(window);
            Ok(self.a.t().dot(&x))
        }
        fn jacobian_at(&self, _latent: &Array1<f64>) -> Result<Array2<f64>> {
            Ok(self.a.clone())
        }
    }

    fn orthonormal_columns(m: usize, n: usize, seed: u64) -> Array2<f64> {
        // Gram-Schmidt on random columns
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0));
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = (0..m).map(|r| a[(r, j)] * a[(r, k)]).sum();
                for r in 0..m {
                    a[(r, j)] -= dot * a[(r, k)];
                }
            }
            let norm: f64 = (0..m).map(|r| a[(r, j)] * a[(r, j)]).sum::<f64>().sqrt();
            for r in 0..m {
                a[(r, j)] /= norm;
            }
        }
        a
    }

    fn window_from_vec(x: &Array1<f64>, h: usize, w: usize) -> SensorWindow {
        SensorWindow {
            values: x.to_owned().into_shape_with_order((h, w)).unwrap(),
            user_id: "u".into(),
            session_id: "s".into(),
            start_ms: 0.0,
        }
    }

    /// Independent log-gamma (Lanczos, g=7) for cross-checking the exact
    /// integer/half-integer evaluation.
    fn ln_gamma_lanczos(x: f64) -> f64 {
        const G: [f64; 9] = [
            0.99999999999980993,
            676.5203681218851,
            -1259.1392167224028,
            771.32342877765313,
            -176.61502916214059,
            12.507343278686905,
            -0.13857109526572012,
            9.9843695780195716e-6,
            1.5056327351493116e-7,
        ];
        if x < 0.5 {
            let pi = std::f64::consts::PI;
            return pi.ln() - (pi * x).sin().ln() - ln_gamma_lanczos(1.0 - x);
        }
        let x = x - 1.0;
        let mut acc = G[0];
        for (i, &g) in G.iter().enumerate().skip(1) {
            acc += g / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }

    #[test]
    fn ln_gamma_half_matches_lanczos() {
        for two_a in [1usize, 2, 3, 5, 10, 99, 268, 536, 1072, 1736] {
            let exact = ln_gamma_half(two_a);
            let approx = ln_gamma_lanczos(two_a as f64 / 2.0);
            assert!(
                (exact - approx).abs() < 1e-8 * exact.abs().max(1.0),
                "2a={two_a}: exact {exact} vs lanczos {approx}"
            );
        }
    }

    #[test]
    fn in_span_window_has_zero_residual() {
        let a = orthonormal_columns(60, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coeffs = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let x = a.dot(&coeffs);
        let (y_par, residual, s) = tangent_decompose(&x, &a).unwrap();
        assert!(residual < 1e-9, "residual {residual}");
        assert!((y_par.dot(&y_par) - x.dot(&x)).abs() < 1e-9);
        for v in s {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_window_has_unit_residual() {
        // J = [e1..ek], x = e_{k+1}
        let m = 20;
        let k = 4;
        let mut j = Array2::zeros((m, k));
        for i in 0..k {
            j[(i, i)] = 1.0;
        }
        let mut x = Array1::zeros(m);
        x[k] = 1.0;
        let (y_par, residual, _) = tangent_decompose(&x, &j).unwrap();
        assert!(y_par.iter().all(|&v| v.abs() < 1e-12));
        assert!((residual - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pythagoras_on_random_decompositions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..100 {
            let j = Array2::from_shape_fn((600, 64), |_| rng.random_range(-1.0..1.0));
            let x = Array1::from_shape_fn(600, |_| rng.random_range(-1.0..1.0));
            let (y_par, residual, _) = tangent_decompose(&x, &j).unwrap();
            let lhs = y_par.dot(&y_par) + residual * residual;
            let rhs = x.dot(&x);
            assert!(
                (lhs - rhs).abs() < 1e-8 * rhs.max(1.0),
                "case {case}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn linear_decoder_score_matches_closed_form() {
        let (m, n) = (60, 8);
        let a = orthonormal_columns(m, n, 4);
        let model = LinearDecoder { a: a.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        // residuals near a small constant for the tail fit
        let residuals: Vec<f64> = (0..200).map(|_| 0.01 + rng.random_range(0.0..0.002)).collect();
        let tail = fit_residual_density(&residuals).unwrap();

        // x = A·c + delta · (unit vector orthogonal to span A)
        let coeffs = Array1::from_shape_fn(n, |_| rng.random_range(-0.5..0.5));
        let mut perp = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
        let proj = a.dot(&a.t().dot(&perp));
        perp -= &proj;
        let pn = perp.dot(&perp).sqrt();
        perp.mapv_inplace(|v| v / pn);
        let delta = 0.011;
        let x = a.dot(&coeffs) + delta * &perp;
        let window = window_from_vec(&x, 6, 10);

        let got = score(&window, &model, &tail, f64::NEG_INFINITY).unwrap();

        // closed form, coded independently of score()
        let expected_det = 0.0; // all singular values are 1
        let expected_prior = -(n as f64) * 2.0f64.ln();
        let mn = (m - n) as f64;
        let expected_perp = ln_gamma_lanczos(mn / 2.0)
            - 2.0f64.ln()
            - (mn / 2.0) * std::f64::consts::PI.ln()
            - mn * delta.ln()
            + tail.log_density(delta);
        assert!((got.log_det_term - expected_det).abs() < 1e-6);
        assert!((got.log_prior_term - expected_prior).abs() < 1e-12);
        assert!(
            (got.log_perp_term - expected_perp).abs() < 1e-6,
            "perp {} vs {}",
            got.log_perp_term,
            expected_perp
        );
        assert!(
            (got.log_p - (expected_det + expected_prior + expected_perp)).abs() < 1e-6
        );
        assert!((got.residual_norm - delta).abs() < 1e-9);
    }

    #[test]
    fn breakdown_terms_sum_exactly() {
        let a = orthonormal_columns(60, 8, 7);
        let model = LinearDecoder { a: a.clone() };
        let residuals: Vec<f64> = (0..100).map(|i| 0.05 + 0.001 * i as f64).collect();
        let tail = fit_residual_density(&residuals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = Array1::from_shape_fn(60, |_| rng.random_range(-1.0..1.0));
            let b = score(&window_from_vec(&x, 6, 10), &model, &tail, 0.0).unwrap();
            let sum = b.log_det_term + b.log_prior_term + b.log_perp_term;
            assert!((b.log_p - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_score_identically_and_threshold_flips_once() {
        let a = orthonormal_columns(60, 8, 9);
        let model = LinearDecoder { a };
        let residuals: Vec<f64> = (0..100).map(|i| 0.05 + 0.001 * i as f64).collect();
        let tail = fit_residual_density(&residuals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array1::from_shape_fn(60, |_| rng.random_range(-1.0..1.0));
        let w = window_from_vec(&x, 6, 10);
        let s1 = score(&w, &model, &tail, 0.0).unwrap();
        let s2 = score(&w, &model, &tail, 0.0).unwrap();
        assert_eq!(s1.log_p.to_bits(), s2.log_p.to_bits());

        // verdict flips exactly when tau crosses log_p
        let eps = 1e-9;
        let below = score(&w, &model, &tail, s1.log_p - eps).unwrap();
        let at = score(&w, &model, &tail, s1.log_p).unwrap();
        let above = score(&w, &model, &tail, s1.log_p + eps).unwrap();
        assert_eq!(below.verdict, Verdict::Accept);
        assert_eq!(at.verdict, Verdict::Accept);
        assert_eq!(above.verdict, Verdict::Reject);
    }

    #[test]
    fn perp_term_decreases_in_residual_for_flat_tail() {
        // hold everything fixed, increase the residual: the shell term falls
        let residuals: Vec<f64> = (0..1000).map(|i| 0.001 * (i % 100) as f64 + 0.01).collect();
        let tail = fit_residual_density(&residuals).unwrap();
        let (m, n) = (600, 64);
        let mn = (m - n) as f64;
        let perp = |r: f64| {
            ln_gamma_half(m - n) - std::f64::consts::LN_2
                - (mn / 2.0) * std::f64::consts::PI.ln()
                - mn * r.ln()
                + tail.log_density(r)
        };
        let mut last = f64::INFINITY;
        for r in [0.011, 0.02, 0.04, 0.07, 0.1] {
            let v = perp(r);
            assert!(v < last, "perp term not decreasing at r={r}");
            last = v;
        }
    }

    #[test]
    fn residual_density_recovers_half_normal() {
        // 1000 draws of |N(0, sigma)|: fitted density within 15% of truth at
        // the distribution's median.
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let draws: Vec<f64> = (0..1000)
            .map(|_| rand_distr::Distribution::sample(&normal, &mut rng) as f64)
            .map(f64::abs)
            .collect();
        let tail = fit_residual_density(&draws).unwrap();
        assert!((tail.integral() - 1.0).abs() < 1e-6);

        // half-normal median: sigma times the 0.75 quantile of the standard normal
        let median = sigma * 0.6744897501960817;
        let truth = (2.0 / (std::f64::consts::PI * sigma * sigma)).sqrt()
            * (-median * median / (2.0 * sigma * sigma)).exp();
        let got = tail.log_density(median).exp();
        assert!(
            (got - truth).abs() / truth < 0.15,
            "density at median: {got} vs {truth}"
        );
    }

    #[test]
    fn degenerate_identical_residuals_concentrate() {
        let draws = vec![0.4; 200];
        let tail = fit_residual_density(&draws).unwrap();
        let peak = tail
            .bin_log_densities
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let at_r = tail.log_density(0.4);
        // interpolation between centers costs a little; the mass is in one bin
        assert!(at_r > peak + (0.8f64).ln(), "query {at_r} vs peak {peak}");
        let second = {
            let mut v = tail.bin_log_densities.clone();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v[1]
        };
        assert!(peak - second > (50.0f64).ln(), "mass not concentrated");
    }

    #[test]
    fn queries_beyond_support_hit_the_floor() {
        let draws: Vec<f64> = (0..100).map(|i| 0.01 + 0.001 * i as f64).collect();
        let tail = fit_residual_density(&draws).unwrap();
        assert_eq!(tail.log_density(10.0), DENSITY_FLOOR.ln());
        assert_eq!(tail.log_density(-1.0), DENSITY_FLOOR.ln());
    }

    #[test]
    fn too_few_residuals_is_a_calibration_error() {
        let draws = vec![0.1; 49];
        assert!(fit_residual_density(&draws).is_err());
    }

    #[test]
    fn threshold_quantile_examples() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(calibrate_threshold(&scores, 0.97).unwrap(), 3.0);
        assert_eq!(calibrate_threshold(&scores, 1.0).unwrap(), 1.0);
        let constant = vec![5.5; 40];
        assert_eq!(calibrate_threshold(&constant, 0.97).unwrap(), 5.5);
        assert!(calibrate_threshold(&[], 0.97).is_err());
    }

    #[test]
    fn calibrated_threshold_meets_target_on_its_own_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-100.0..0.0)).collect();
            let tau = calibrate_threshold(&scores, 0.97).unwrap();
            let tpr = scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64;
            assert!(tpr >= 0.97, "tpr {tpr} below target");
        }
    }
}
