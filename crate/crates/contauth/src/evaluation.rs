//! Biometric metrics and the train/calibrate/test protocols.
//!
//! Scores are log-densities; accept means score >= threshold. FAR is the
//! fraction of impostor windows accepted, FRR the fraction of legitimate
//! windows rejected. The EER sweeps every distinct score as a threshold and
//! linearly interpolates where FAR and FRR cross; AUROC integrates the ROC
//! by trapezoid with tied scores collapsed into single steps.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ModelParams, NetworkSpec};
use crate::preprocessing::{
    fit_normalization_windows, normalize_window, preprocess_recordings, NormalizationStats,
    PreprocessConfig, SensorRecording, SensorWindow,
};
use crate::scoring::{
    calibrate_threshold, fit_residual_density, residual_norm_of, score, ResidualTailDensity,
    Verdict,
};
use crate::training::{train, TrainConfig};

/// One scored window with its ground-truth label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub is_legitimate: bool,
    /// `user_id/session_id@start_ms` of the window behind the score.
    pub window_ref: String,
}

impl LabeledScore {
    pub fn new(score: f64, is_legitimate: bool, window_ref: impl Into<String>) -> Self {
        LabeledScore {
            score,
            is_legitimate,
            window_ref: window_ref.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub far: f64,
    pub frr: f64,
    pub eer: f64,
    pub auroc: f64,
    pub operating_threshold: f64,
    pub confusion: Confusion,
    /// (false-positive rate, true-positive rate) pairs, one per distinct
    /// score plus the two trivial endpoints.
    pub roc: Vec<(f64, f64)>,
}

/// FAR/FRR at the operating threshold plus threshold-free EER and AUROC.
pub fn compute_metrics(scores: &[LabeledScore], operating_threshold: f64) -> Result<MetricReport> {
    let positives = scores.iter().filter(|s| s.is_legitimate).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::data(format!(
            "metrics need both classes; got {positives} legitimate and {negatives} impostor scores"
        )));
    }
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::numeric("scores must be finite"));
    }
    let p = positives as f64;
    let n = negatives as f64;

    // confusion at the operating threshold (accept iff score >= threshold)
    let mut conf = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for s in scores {
        let accepted = s.score >= operating_threshold;
        match (s.is_legitimate, accepted) {
            (true, true) => conf.tp += 1,
            (true, false) => conf.fn_ += 1,
            (false, true) => conf.fp += 1,
            (false, false) => conf.tn += 1,
        }
    }
    let far = conf.fp as f64 / n;
    let frr = conf.fn_ as f64 / p;

    // sweep all distinct scores ascending: FAR falls, FRR rises
    let mut sorted: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.is_legitimate)).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // cumulative counts below each distinct threshold
    let mut sweep: Vec<(f64, f64, f64)> = Vec::new(); // (threshold, far, frr)
    let mut legit_below = 0usize;
    let mut imp_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        // threshold = t: rejected are the strictly-below scores
        sweep.push((
            t,
            (negatives - imp_below) as f64 / n,
            legit_below as f64 / p,
        ));
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                legit_below += 1;
            } else {
                imp_below += 1;
            }
            i += 1;
        }
    }
    // threshold above every score: reject all
    sweep.push((f64::INFINITY, 0.0, 1.0));

    let mut eer = f64::NAN;
    for pair in sweep.windows(2) {
        let (_, far0, frr0) = pair[0];
        let (_, far1, frr1) = pair[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            eer = far0;
            break;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            // linear interpolation between the two sweep points
            let t = d0 / (d0 - d1);
            eer = far0 + t * (far1 - far0);
            break;
        }
    }
    if eer.is_nan() {
        // FAR never meets FRR inside the sweep; take the closest endpoint
        eer = sweep
            .iter()
            .map(|&(_, f, r)| (f - r).abs().min(f.max(r)))
            .fold(f64::INFINITY, f64::min);
    }

    // ROC by descending threshold with tie plateaus as single steps
    let mut roc = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut j = sorted.len();
    while j > 0 {
        let t = sorted[j - 1].0;
        while j > 0 && sorted[j - 1].0 == t {
            if sorted[j - 1].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j -= 1;
        }
        roc.push((fp as f64 / n, tp as f64 / p));
    }
    let auroc: f64 = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();

    Ok(MetricReport {
        far,
        frr,
        eer,
        auroc,
        operating_threshold,
        confusion: conf,
        roc,
    })
}

// ---------------------------------------------------------------------------
// Protocol configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub train: TrainConfig,
    /// Calibration target: fraction of legitimate validation windows that
    /// must score at or above the threshold.
    pub target_tpr: f64,
    /// Legitimate-window split fractions; the remainder after train and
    /// calibration is the test slice.
    pub train_fraction: f64,
    pub calibration_fraction: f64,
    pub latent_dim: usize,
    pub neighborhood: usize,
    pub projection_kernel: usize,
    /// Optional seeded cap on scored impostor windows per source, for
    /// desk-scale runs where scoring every impostor window dominates cost.
    pub max_impostor_scored: Option<usize>,
    /// Drives the split shuffle and impostor subsampling.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train: TrainConfig::default(),
            target_tpr: 0.97,
            train_fraction: 0.8,
            calibration_fraction: 0.1,
            latent_dim: 64,
            neighborhood: 5,
            projection_kernel: 1,
            max_impostor_scored: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.target_tpr) {
            return Err(Error::config("target_tpr must be in [0,1]"));
        }
        if self.train_fraction <= 0.0
            || self.calibration_fraction <= 0.0
            || self.train_fraction + self.calibration_fraction >= 1.0
        {
            return Err(Error::config(
                "train and calibration fractions must be positive and leave a test remainder",
            ));
        }
        Ok(())
    }
}

/// A user's fitted authentication state: everything needed to score windows.
pub struct FittedUser {
    pub model: ModelParams,
    pub stats: NormalizationStats,
    pub tail: ResidualTailDensity,
    pub tau: f64,
    /// Held-out legitimate test windows, already normalized.
    pub test_windows: Vec<SensorWindow>,
    pub spec: NetworkSpec,
}

fn window_ref(w: &SensorWindow) -> String {
    format!("{}/{}@{}", w.user_id, w.session_id, w.start_ms)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Split legitimate windows, fit normalization on the training slice only,
/// train the model, and calibrate the residual density and threshold on the
/// calibration slice.
pub fn fit_user(legit_windows: &[SensorWindow], config: &EvalConfig) -> Result<FittedUser> {
    config.validate()?;
    if legit_windows.is_empty() {
        return Err(Error::data("no legitimate windows"));
    }
    let user = &legit_windows[0].user_id;
    if legit_windows.iter().any(|w| &w.user_id != user) {
        return Err(Error::data(
            "legitimate set mixes user ids; one-class training needs a single user",
        ));
    }

    let n = legit_windows.len();
    let n_train = (n as f64 * config.train_fraction).floor() as usize;
    let n_cal = (n as f64 * config.calibration_fraction).floor() as usize;
    let n_test = n - n_train - n_cal;
    if n_train < config.train.batch_size || n_cal < 50 || n_test == 0 {
        return Err(Error::data(format!(
            "split of {n} windows gives train {n_train} / calibration {n_cal} / test {n_test}; \
             need train >= batch size, calibration >= 50 and a nonempty test slice"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let order = shuffled_indices(n, &mut rng);
    let pick = |r: std::ops::Range<usize>| -> Vec<&SensorWindow> {
        order[r].iter().map(|&i| &legit_windows[i]).collect()
    };
    let train_raw = pick(0..n_train);
    let cal_raw = pick(n_train..n_train + n_cal);
    let test_raw = pick(n_train + n_cal..n);

    // leakage guard: statistics come from the training slice only
    let train_owned: Vec<SensorWindow> = train_raw.iter().map(|w| (*w).clone()).collect();
    let stats = fit_normalization_windows(&train_owned)?;
    let normalize = |ws: &[&SensorWindow]| -> Vec<SensorWindow> {
        ws.iter().map(|w| normalize_window(w, &stats)).collect()
    };
    let train_windows = normalize(&train_raw);
    let cal_windows = normalize(&cal_raw);
    let test_windows = normalize(&test_raw);

    let (h, w) = train_windows[0].values.dim();
    let spec = NetworkSpec::default_for(
        h,
        w,
        config.latent_dim,
        config.neighborhood,
        config.projection_kernel,
    )?;
    let outcome = train(&train_windows, &config.train, &spec)?;
    let model = outcome.model;

    let residuals: Vec<f64> = cal_windows
        .par_iter()
        .map(|w| residual_norm_of(w, &model))
        .collect::<Result<Vec<_>>>()?;
    let tail = fit_residual_density(&residuals)?;

    let cal_scores: Vec<f64> = cal_windows
        .par_iter()
        .map(|w| score(w, &model, &tail, f64::NEG_INFINITY).map(|b| b.log_p))
        .collect::<Result<Vec<_>>>()?;
    let tau = calibrate_threshold(&cal_scores, config.target_tpr)?;

    Ok(FittedUser {
        model,
        stats,
        tail,
        tau,
        test_windows,
        spec,
    })
}

impl FittedUser {
    /// Score arbitrary (unnormalized) windows with this user's statistics
    /// and model.
    pub fn score_windows(&self, windows: &[SensorWindow]) -> Result<Vec<(String, f64, Verdict)>> {
        windows
            .par_iter()
            .map(|w| {
                let normalized = normalize_window(w, &self.stats);
                score(&normalized, &self.model, &self.tail, self.tau)
                    .map(|b| (window_ref(w), b.log_p, b.verdict))
            })
            .collect()
    }

    fn scored_test_legit(&self) -> Result<Vec<LabeledScore>> {
        self.test_windows
            .par_iter()
            .map(|w| {
                score(w, &self.model, &self.tail, self.tau)
                    .map(|b| LabeledScore::new(b.log_p, true, window_ref(w)))
            })
            .collect()
    }
}

fn subsample<'a>(
    windows: &'a [SensorWindow],
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a SensorWindow> {
    match cap {
        Some(cap) if windows.len() > cap => {
            let order = shuffled_indices(windows.len(), rng);
            order[..cap].iter().map(|&i| &windows[i]).collect()
        }
        _ => windows.iter().collect(),
    }
}

/// The holdout protocol: split the legitimate user's windows, train on the
/// training slice, calibrate the density and threshold, then score the test
/// slice against every impostor window (subject to the configured cap).
pub fn evaluate_user(
    legit_windows: &[SensorWindow],
    impostor_windows: &[SensorWindow],
    config: &EvalConfig,
) -> Result<(MetricReport, FittedUser)> {
    let fitted = fit_user(legit_windows, config)?;
    let mut scores = fitted.scored_test_legit()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let picked = subsample(impostor_windows, config.max_impostor_scored, &mut rng);
    let impostor_scores: Vec<LabeledScore> = picked
        .par_iter()
        .map(|w| {
            let normalized = normalize_window(w, &fitted.stats);
            score(&normalized, &fitted.model, &fitted.tail, fitted.tau)
                .map(|b| LabeledScore::new(b.log_p, false, window_ref(w)))
        })
        .collect::<Result<Vec<_>>>()?;
    scores.extend(impostor_scores);

    let report = compute_metrics(&scores, fitted.tau)?;
    Ok((report, fitted))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub far: f64,
    pub frr: f64,
    pub eer: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<MetricReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

fn summarize(folds: &[MetricReport]) -> (MetricSummary, MetricSummary) {
    let k = folds.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| folds.iter().map(f).sum::<f64>() / k;
    let m = MetricSummary {
        far: mean(|r| r.far),
        frr: mean(|r| r.frr),
        eer: mean(|r| r.eer),
        auroc: mean(|r| r.auroc),
    };
    let std = |f: fn(&MetricReport) -> f64, mu: f64| {
        (folds.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / k).sqrt()
    };
    let s = MetricSummary {
        far: std(|r| r.far, m.far),
        frr: std(|r| r.frr, m.frr),
        eer: std(|r| r.eer, m.eer),
        auroc: std(|r| r.auroc, m.auroc),
    };
    (m, s)
}

/// Deterministic k-fold assignment of `n` items.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled_indices(n, &mut rng);
    let mut assignment = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = rank % folds;
    }
    assignment
}

/// K-fold protocol over the legitimate windows: each fold in turn is the
/// legitimate test slice, the rest trains (with a calibration slice carved
/// out), and every impostor window scores against every fold's model.
pub fn cross_validate(
    legit_windows: &[SensorWindow],
    impostor_windows: &[SensorWindow],
    folds: usize,
    config: &EvalConfig,
) -> Result<CrossValidationReport> {
    if folds < 2 {
        return Err(Error::config("cross-validation needs at least 2 folds"));
    }
    if legit_windows.len() < folds {
        return Err(Error::data(format!(
            "{} windows cannot fill {folds} folds",
            legit_windows.len()
        )));
    }
    let assignment = fold_assignment(legit_windows.len(), folds, config.seed);
    let mut reports = Vec::with_capacity(folds);
    for fold in 0..folds {
        let held: Vec<SensorWindow> = legit_windows
            .iter()
            .zip(assignment.iter())
            .filter(|(_, &a)| a == fold)
            .map(|(w, _)| w.clone())
            .collect();
        let rest: Vec<SensorWindow> = legit_windows
            .iter()
            .zip(assignment.iter())
            .filter(|(_, &a)| a != fold)
            .map(|(w, _)| w.clone())
            .collect();
        if held.is_empty() || rest.is_empty() {
            return Err(Error::data("a fold came out empty"));
        }
        // carve calibration from the training side; the held fold is test
        let fold_config = EvalConfig {
            seed: config.seed.wrapping_add(fold as u64 + 1),
            ..config.clone()
        };
        let report = evaluate_fold(&rest, &held, impostor_windows, &fold_config)?;
        reports.push(report);
    }
    let (mean, std) = summarize(&reports);
    Ok(CrossValidationReport {
        folds: reports,
        mean,
        std,
    })
}

fn evaluate_fold(
    train_pool: &[SensorWindow],
    held_legit: &[SensorWindow],
    impostors: &[SensorWindow],
    config: &EvalConfig,
) -> Result<MetricReport> {
    // reuse fit_user's split on the pool for train/calibration; its own test
    // remainder is unused because the held fold is the test slice
    let fitted = fit_user(train_pool, config)?;
    let mut scores: Vec<LabeledScore> = held_legit
        .par_iter()
        .map(|w| {
            let normalized = normalize_window(w, &fitted.stats);
            score(&normalized, &fitted.model, &fitted.tail, fitted.tau)
                .map(|b| LabeledScore::new(b.log_p, true, window_ref(w)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let picked = subsample(impostors, config.max_impostor_scored, &mut rng);
    scores.extend(
        picked
            .par_iter()
            .map(|w| {
                let normalized = normalize_window(w, &fitted.stats);
                score(&normalized, &fitted.model, &fitted.tail, fitted.tau)
                    .map(|b| LabeledScore::new(b.log_p, false, window_ref(w)))
            })
            .collect::<Result<Vec<LabeledScore>>>()?,
    );
    compute_metrics(&scores, fitted.tau)
}

// ---------------------------------------------------------------------------
// Window-size sweep
// ---------------------------------------------------------------------------

/// Rerun the whole pipeline per window size (seconds); the architecture's
/// spatial dimensions adapt to each window length.
pub fn window_size_sweep(
    legit_recordings: &[SensorRecording],
    impostor_recordings: &[SensorRecording],
    sizes: &[f64],
    preprocess: &PreprocessConfig,
    config: &EvalConfig,
) -> Result<Vec<(f64, MetricReport)>> {
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let samples = (size * preprocess.rate_hz).round() as usize;
        if samples < 8 {
            return Err(Error::config(format!(
                "window of {size}s gives {samples} samples; need at least 8"
            )));
        }
        let cfg = PreprocessConfig {
            window_seconds: size,
            ..*preprocess
        };
        let (legit, _) = preprocess_recordings(legit_recordings, &cfg)?;
        let (impostors, _) = preprocess_recordings(impostor_recordings, &cfg)?;
        let (report, _) = evaluate_user(&legit, &impostors, config)?;
        out.push((size, report));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Random-attack protocol
// ---------------------------------------------------------------------------

/// Train on the legitimate user, then measure metrics separately against
/// each foreign attacker source; attacker windows are normalized with the
/// legitimate user's statistics.
pub fn random_attack_eval(
    legit_windows: &[SensorWindow],
    attacker_sources: &[(String, Vec<SensorWindow>)],
    config: &EvalConfig,
) -> Result<(Vec<(String, MetricReport)>, FittedUser)> {
    let fitted = fit_user(legit_windows, config)?;
    let legit_scores = fitted.scored_test_legit()?;
    let mut out = Vec::with_capacity(attacker_sources.len());
    for (name, windows) in attacker_sources {
        if windows.is_empty() {
            return Err(Error::data(format!("attacker source {name} is empty")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa77ac4);
        let picked = subsample(windows, config.max_impostor_scored, &mut rng);
        let mut scores = legit_scores.clone();
        scores.extend(
            picked
                .par_iter()
                .map(|w| {
                    let normalized = normalize_window(w, &fitted.stats);
                    score(&normalized, &fitted.model, &fitted.tail, fitted.tau)
                        .map(|b| LabeledScore::new(b.log_p, false, window_ref(w)))
                })
                .collect::<Result<Vec<LabeledScore>>>()?,
        );
        out.push((name.clone(), compute_metrics(&scores, fitted.tau)?));
    }
    Ok((out, fitted))
}
