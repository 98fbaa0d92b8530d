//! The adversarial training loop over legitimate-user windows only.
//!
//! Each iteration corrupts a batch with Gaussian noise, encodes it, draws a
//! uniform prior batch, then performs three updates in a fixed order:
//! sample discriminator (real windows vs decoded prior draws), latent
//! discriminator (encoded latents vs prior draws), and finally the
//! autoencoder on λ·L_rec plus the two flipped-target adversarial terms.
//! Discriminator targets are realized as binary cross-entropy against the
//! given constant.

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ModelParams, NetworkSpec};
use crate::nn::{Adam, NetworkGrads, Value};
use crate::preprocessing::SensorWindow;

const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_latent_disc: f64,
    pub lr_sample_disc: f64,
    /// Weight of the reconstruction term in the autoencoder update.
    pub lambda_rec: f64,
    /// Standard deviation of the corruption noise.
    pub noise_std: f64,
    pub seed: u64,
    /// Scale on the generator-side adversarial terms. 0 reduces training to
    /// a plain denoising autoencoder (discriminators frozen); kept for
    /// diagnostics and degenerate-mode tests.
    pub adversarial_weight: f64,
    /// Compute the gradient-free terms of the autoencoder losses (they only
    /// affect logging; parameter trajectories are identical either way).
    pub include_constant_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr_encoder: 5e-5,
            lr_decoder: 3e-4,
            lr_latent_disc: 1e-5,
            lr_sample_disc: 1e-4,
            lambda_rec: 10.0,
            noise_std: 0.2,
            seed: 0,
            adversarial_weight: 1.0,
            include_constant_terms: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_latent_disc", self.lr_latent_disc),
            ("lr_sample_disc", self.lr_sample_disc),
        ] {
            if !(lr > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.lambda_rec > 0.0) {
            return Err(Error::config("lambda_rec must be > 0"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if self.adversarial_weight < 0.0 {
            return Err(Error::config("adversarial_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Per-iteration losses in the order they are produced: both discriminator
/// losses are measured before the autoencoder update runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub step: u64,
    pub rec: f64,
    pub latent_adv: f64,
    pub sample_adv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    SampleDiscriminator,
    LatentDiscriminator,
    Autoencoder,
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: Vec<LossBundle>,
}

/// Mean over the batch of the summed squared error per sample.
pub fn reconstruction_loss(x: &Array4<f64>, x_hat: &Array4<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::config(format!(
            "reconstruction loss shape mismatch: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let n = x.dim().0 as f64;
    Ok(x.iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Binary cross-entropy of a column of probabilities against one constant
/// target, averaged over the batch; probabilities clamp to
/// [1e-7, 1 - 1e-7] before the logs.
pub fn bce_loss(p: &Array2<f64>, target: f64) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .map(|&v| {
            let v = v.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(target * v.ln() + (1.0 - target) * (1.0 - v).ln())
        })
        .sum::<f64>()
        / n
}

fn bce_grad(p: &Array2<f64>, target: f64, scale: f64) -> Array2<f64> {
    let n = p.len() as f64;
    p.mapv(|v| {
        let v = v.clamp(BCE_EPS, 1.0 - BCE_EPS);
        scale * (v - target) / (v * (1.0 - v)) / n
    })
}

/// Stack windows into a `(batch, 1, h, w)` training tensor.
pub fn windows_to_batch(windows: &[SensorWindow], indices: &[usize]) -> Array4<f64> {
    let (h, w) = windows[indices[0]].values.dim();
    let mut out = Array4::zeros((indices.len(), 1, h, w));
    for (row, &idx) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .index_axis_mut(Axis(0), 0)
            .assign(&windows[idx].values);
    }
    out
}

fn uniform_prior(rng: &mut ChaCha8Rng, batch: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0))
}

/// Measure the three Algorithm-1 loss values at the model's current
/// parameters without updating anything (inference-mode normalization).
pub fn adversarial_losses(
    windows: &[SensorWindow],
    model: &ModelParams,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBundle> {
    if windows.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let indices: Vec<usize> = (0..windows.len()).collect();
    let x = windows_to_batch(windows, &indices);
    let batch = x.dim().0;
    let noise = gaussian_like(&x, config.noise_std, rng);
    let x_noisy = &x + &noise;
    let (z, _) = model.encoder.forward_infer(&Value::Map(x_noisy))?;
    let z_tilde = uniform_prior(rng, batch, model.spec.latent_dim);
    let (x_fake, _) = model
        .decoder
        .forward_infer(&Value::Features(z_tilde.clone()))?;

    let (p_fake, _) = model.sample_disc.forward_infer(&x_fake)?;
    let (p_real, _) = model.sample_disc.forward_infer(&Value::Map(x.clone()))?;
    let sample_adv = bce_loss(p_fake.as_features()?, 0.0) + bce_loss(p_real.as_features()?, 1.0);

    let (d_z, _) = model.latent_disc.forward_infer(&z)?;
    let (d_zt, _) = model.latent_disc.forward_infer(&Value::Features(z_tilde))?;
    let latent_adv = bce_loss(d_z.as_features()?, 0.0) + bce_loss(d_zt.as_features()?, 1.0);

    let (x_rec, _) = model.decoder.forward_infer(&z)?;
    let rec = reconstruction_loss(&x, x_rec.as_map()?)?;

    Ok(LossBundle {
        step: 0,
        rec,
        latent_adv,
        sample_adv,
    })
}

fn gaussian_like(x: &Array4<f64>, std: f64, rng: &mut ChaCha8Rng) -> Array4<f64> {
    if std == 0.0 {
        return Array4::zeros(x.dim());
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    Array4::from_shape_fn(x.dim(), |_| normal.sample(rng))
}

/// Train on the legitimate user's windows per the three-update loop. The
/// dataset carries no labels; one-class by construction.
pub fn train(
    dataset: &[SensorWindow],
    config: &TrainConfig,
    spec: &NetworkSpec,
) -> Result<TrainOutcome> {
    train_with_observer(dataset, config, spec, &mut |_, _, _| {})
}

/// [`train`] with a per-phase callback `(step, phase, loss)`; phases arrive
/// in Algorithm order within each iteration.
pub fn train_with_observer(
    dataset: &[SensorWindow],
    config: &TrainConfig,
    spec: &NetworkSpec,
    observer: &mut dyn FnMut(u64, TrainPhase, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    if dataset.len() < config.batch_size {
        return Err(Error::data(format!(
            "dataset has {} windows, need at least batch_size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    for w in dataset {
        if w.values.dim() != (spec.input_height, spec.input_width) {
            return Err(Error::config(format!(
                "window is {:?}, architecture expects {}x{}",
                w.values.dim(),
                spec.input_height,
                spec.input_width
            )));
        }
    }

    let mut model = ModelParams::new(spec, config.seed)?;
    let mut adam_enc = Adam::new(&model.encoder, config.lr_encoder);
    let mut adam_dec = Adam::new(&model.decoder, config.lr_decoder);
    let mut adam_ld = Adam::new(&model.latent_disc, config.lr_latent_disc);
    let mut adam_sd = Adam::new(&model.sample_disc, config.lr_sample_disc);

    let mut grads_enc = NetworkGrads::zeros_like(&model.encoder);
    let mut grads_dec = NetworkGrads::zeros_like(&model.decoder);
    let mut grads_ld = NetworkGrads::zeros_like(&model.latent_disc);
    let mut grads_sd = NetworkGrads::zeros_like(&model.sample_disc);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1); // distinct from the parameter-init stream

    let batches_per_epoch = dataset.len() / config.batch_size;
    let adversarial = config.adversarial_weight > 0.0;
    let mut log = Vec::with_capacity(config.epochs * batches_per_epoch);
    let mut step: u64 = 0;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        for batch_idx in 0..batches_per_epoch {
            step += 1;
            let indices = &order[batch_idx * config.batch_size..(batch_idx + 1) * config.batch_size];
            let x = windows_to_batch(dataset, indices);
            let batch = x.dim().0;

            // corrupt, encode, draw the prior
            let noise = gaussian_like(&x, config.noise_std, &mut rng);
            let x_noisy = &x + &noise;
            let (z, enc_caches) = model.encoder.forward_train(&Value::Map(x_noisy))?;
            let z_tilde = uniform_prior(&mut rng, batch, model.spec.latent_dim);
            let (x_fake, dec_caches_fake) = model
                .decoder
                .forward_train(&Value::Features(z_tilde.clone()))?;

            // --- sample discriminator update ---
            let sample_adv = if adversarial {
                let (p_fake, sd_c1) = model.sample_disc.forward_train(&x_fake)?;
                let (p_real, sd_c2) = model.sample_disc.forward_train(&Value::Map(x.clone()))?;
                let loss = bce_loss(p_fake.as_features()?, 0.0)
                    + bce_loss(p_real.as_features()?, 1.0);
                grads_sd.zero();
                let g_fake = bce_grad(p_fake.as_features()?, 0.0, 1.0);
                let g_real = bce_grad(p_real.as_features()?, 1.0, 1.0);
                model
                    .sample_disc
                    .backward(&sd_c1, Value::Features(g_fake), &mut grads_sd)?;
                model
                    .sample_disc
                    .backward(&sd_c2, Value::Features(g_real), &mut grads_sd)?;
                adam_sd.step(&mut model.sample_disc, &grads_sd);
                loss
            } else {
                let (p_fake, _) = model.sample_disc.forward_infer(&x_fake)?;
                let (p_real, _) = model.sample_disc.forward_infer(&Value::Map(x.clone()))?;
                bce_loss(p_fake.as_features()?, 0.0) + bce_loss(p_real.as_features()?, 1.0)
            };
            observer(step, TrainPhase::SampleDiscriminator, sample_adv);

            // --- latent discriminator update ---
            let latent_adv = if adversarial {
                let (d_z, ld_c1) = model.latent_disc.forward_train(&z)?;
                let (d_zt, ld_c2) = model
                    .latent_disc
                    .forward_train(&Value::Features(z_tilde.clone()))?;
                let loss =
                    bce_loss(d_z.as_features()?, 0.0) + bce_loss(d_zt.as_features()?, 1.0);
                grads_ld.zero();
                let g_z = bce_grad(d_z.as_features()?, 0.0, 1.0);
                let g_zt = bce_grad(d_zt.as_features()?, 1.0, 1.0);
                model
                    .latent_disc
                    .backward(&ld_c1, Value::Features(g_z), &mut grads_ld)?;
                model
                    .latent_disc
                    .backward(&ld_c2, Value::Features(g_zt), &mut grads_ld)?;
                adam_ld.step(&mut model.latent_disc, &grads_ld);
                loss
            } else {
                let (d_z, _) = model.latent_disc.forward_infer(&z)?;
                let (d_zt, _) = model
                    .latent_disc
                    .forward_infer(&Value::Features(z_tilde.clone()))?;
                bce_loss(d_z.as_features()?, 0.0) + bce_loss(d_zt.as_features()?, 1.0)
            };
            observer(step, TrainPhase::LatentDiscriminator, latent_adv);

            // --- autoencoder update ---
            let (x_rec, dec_caches_rec) = model.decoder.forward_train(&z)?;
            let x_rec_map = x_rec.as_map()?;
            let rec = reconstruction_loss(&x, x_rec_map)?;

            grads_enc.zero();
            grads_dec.zero();
            // λ · d L_rec / d x_rec
            let d_xrec = {
                let n = batch as f64;
                let mut d = x_rec_map - &x;
                d.mapv_inplace(|v| config.lambda_rec * 2.0 * v / n);
                Value::Map(d)
            };
            let dz_rec = model
                .decoder
                .backward(&dec_caches_rec, d_xrec, &mut grads_dec)?;
            let mut dz_total = dz_rec.into_features()?;

            let mut ae_total = config.lambda_rec * rec;
            if adversarial {
                // generator side: D_s(De(z_tilde), 1) pushes the decoder
                let (p_fake2, sd_c3) = model.sample_disc.forward_train(&x_fake)?;
                let gen_sample = bce_loss(p_fake2.as_features()?, 1.0);
                let g = bce_grad(p_fake2.as_features()?, 1.0, config.adversarial_weight);
                let mut scratch_sd = NetworkGrads::zeros_like(&model.sample_disc);
                let d_xfake =
                    model
                        .sample_disc
                        .backward(&sd_c3, Value::Features(g), &mut scratch_sd)?;
                model
                    .decoder
                    .backward(&dec_caches_fake, d_xfake, &mut grads_dec)?;

                // generator side: D_l(z, 1) pushes the encoder
                let (d_z2, ld_c3) = model.latent_disc.forward_train(&z)?;
                let gen_latent = bce_loss(d_z2.as_features()?, 1.0);
                let g = bce_grad(d_z2.as_features()?, 1.0, config.adversarial_weight);
                let mut scratch_ld = NetworkGrads::zeros_like(&model.latent_disc);
                let dz_latent =
                    model
                        .latent_disc
                        .backward(&ld_c3, Value::Features(g), &mut scratch_ld)?;
                dz_total += &dz_latent.into_features()?;

                let mut gen_sample_full = gen_sample;
                let mut gen_latent_full = gen_latent;
                if config.include_constant_terms {
                    // gradient-free halves of the flipped-target losses,
                    // measured without touching normalization statistics
                    let (p_real_c, _) = model.sample_disc.forward_infer(&Value::Map(x.clone()))?;
                    gen_sample_full += bce_loss(p_real_c.as_features()?, 0.0);
                    let (d_zt_c, _) = model
                        .latent_disc
                        .forward_infer(&Value::Features(z_tilde.clone()))?;
                    gen_latent_full += bce_loss(d_zt_c.as_features()?, 0.0);
                }
                ae_total += config.adversarial_weight * (gen_sample_full + gen_latent_full);
            }

            model
                .encoder
                .backward(&enc_caches, Value::Features(dz_total), &mut grads_enc)?;
            adam_enc.step(&mut model.encoder, &grads_enc);
            adam_dec.step(&mut model.decoder, &grads_dec);
            observer(step, TrainPhase::Autoencoder, ae_total);

            let bundle = LossBundle {
                step,
                rec,
                latent_adv,
                sample_adv,
            };
            if !(bundle.rec.is_finite()
                && bundle.latent_adv.is_finite()
                && bundle.sample_adv.is_finite())
            {
                return Err(Error::numeric(format!(
                    "training aborted at step {step}: rec={} latent_adv={} sample_adv={}",
                    bundle.rec, bundle.latent_adv, bundle.sample_adv
                )));
            }
            log.push(bundle);
        }
    }

    Ok(TrainOutcome { model, log })
}

/// Fisher-Yates driven by the run's seeded stream.
fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Serialize a training log as CSV (`step,rec,latent_adv,sample_adv`).
pub fn log_to_csv(log: &[LossBundle]) -> String {
    let mut out = String::from("step,rec,latent_adv,sample_adv\n");
    for b in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.step, b.rec, b.latent_adv, b.sample_adv
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkSpec;
    use ndarray::Array2;

    fn synthetic_windows(count: usize, seed: u64) -> Vec<SensorWindow> {
        // smooth per-channel sinusoids with channel-dependent frequency, in [0,1]
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let values = Array2::from_shape_fn((12, 50), |(c, t)| {
                    let f = 1.0 + c as f64 * 0.35;
                    0.5 + 0.4 * (phase0 + f * t as f64 * 0.05).sin()
                });
                SensorWindow {
                    values,
                    user_id: "u0".into(),
                    session_id: "s0".into(),
                    start_ms: k as f64 * 500.0,
                }
            })
            .collect()
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::default_for(12, 50, 16, 3, 1).unwrap()
    }

    #[test]
    fn reconstruction_loss_identity_is_zero() {
        let x = Array4::from_elem((2, 1, 12, 50), 0.7);
        assert_eq!(reconstruction_loss(&x, &x.clone()).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_loss_unit_gap_counts_cells() {
        let x = Array4::zeros((3, 1, 12, 50));
        let y = Array4::from_elem((3, 1, 12, 50), 1.0);
        assert_eq!(reconstruction_loss(&x, &y).unwrap(), 600.0);
    }

    #[test]
    fn reconstruction_loss_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((4, 1, 12, 50), |_| rng.random_range(0.0..1.0));
        let y = Array4::from_shape_fn((4, 1, 12, 50), |_| rng.random_range(0.0..1.0));
        let got = reconstruction_loss(&x, &y).unwrap();
        let mut oracle = 0.0;
        for n in 0..4 {
            for i in 0..12 {
                for j in 0..50 {
                    let d = x[(n, 0, i, j)] - y[(n, 0, i, j)];
                    oracle += d * d;
                }
            }
        }
        oracle /= 4.0;
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn bce_at_half_is_ln2_per_term() {
        let p = Array2::from_elem((8, 1), 0.5);
        assert!((bce_loss(&p, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&p, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_limits_with_clamping() {
        let ones = Array2::from_elem((4, 1), 1.0);
        let zeros = Array2::from_elem((4, 1), 0.0);
        // perfect discriminator: loss ~ 0
        let disc = bce_loss(&ones, 1.0) + bce_loss(&zeros, 0.0);
        assert!(disc < 1e-6);
        // fooled generator target: large but finite
        let gen = bce_loss(&ones, 0.0);
        assert!(gen > 10.0 && gen.is_finite());
    }

    #[test]
    fn zeroed_heads_give_2ln2_adversarial_losses() {
        let spec = tiny_spec();
        let mut model = ModelParams::new(&spec, 3).unwrap();
        use crate::nn::Layer;
        for layer in model.latent_disc.layers.iter_mut().rev() {
            if let Layer::Linear(l) = layer {
                l.weights.fill(0.0);
                l.bias.fill(0.0);
                break;
            }
        }
        for layer in model.sample_disc.layers.iter_mut().rev() {
            if let Layer::Conv(c) = layer {
                c.weights.fill(0.0);
                c.bias.fill(0.0);
                break;
            }
        }
        let windows = synthetic_windows(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let losses =
            adversarial_losses(&windows, &model, &TrainConfig::default(), &mut rng).unwrap();
        assert!((losses.sample_adv - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((losses.latent_adv - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn two_runs_are_bit_identical() {
        let windows = synthetic_windows(8, 7);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let spec = tiny_spec();
        let a = train(&windows, &config, &spec).unwrap();
        let b = train(&windows, &config, &spec).unwrap();
        assert_eq!(a.log.len(), 4);
        for (x, y) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(x.rec.to_bits(), y.rec.to_bits());
            assert_eq!(x.latent_adv.to_bits(), y.latent_adv.to_bits());
            assert_eq!(x.sample_adv.to_bits(), y.sample_adv.to_bits());
        }
    }

    #[test]
    fn iteration_count_is_epochs_times_full_batches() {
        let windows = synthetic_windows(10, 9);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&windows, &config, &tiny_spec()).unwrap();
        // 3 epochs x floor(10/4) = 6 iterations, remainder dropped
        assert_eq!(out.log.len(), 6);
        assert_eq!(out.log.last().unwrap().step, 6);
    }

    #[test]
    fn phases_arrive_in_algorithm_order() {
        let windows = synthetic_windows(4, 11);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let mut phases = Vec::new();
        train_with_observer(&windows, &config, &tiny_spec(), &mut |step, phase, _| {
            phases.push((step, phase));
        })
        .unwrap();
        assert_eq!(
            phases,
            vec![
                (1, TrainPhase::SampleDiscriminator),
                (1, TrainPhase::LatentDiscriminator),
                (1, TrainPhase::Autoencoder),
                (2, TrainPhase::SampleDiscriminator),
                (2, TrainPhase::LatentDiscriminator),
                (2, TrainPhase::Autoencoder),
            ]
        );
    }

    #[test]
    fn constant_terms_do_not_change_parameters() {
        let windows = synthetic_windows(8, 13);
        let base = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let with = TrainConfig {
            include_constant_terms: true,
            ..base.clone()
        };
        let without = TrainConfig {
            include_constant_terms: false,
            ..base
        };
        let spec = tiny_spec();
        let a = train(&windows, &with, &spec).unwrap();
        let b = train(&windows, &without, &spec).unwrap();
        use crate::nn::Layer;
        for (la, lb) in a
            .model
            .encoder
            .layers
            .iter()
            .chain(a.model.decoder.layers.iter())
            .zip(b.model.encoder.layers.iter().chain(b.model.decoder.layers.iter()))
        {
            match (la, lb) {
                (Layer::Conv(x), Layer::Conv(y)) => assert_eq!(x.weights, y.weights),
                (Layer::TConv(x), Layer::TConv(y)) => assert_eq!(x.weights, y.weights),
                (Layer::Linear(x), Layer::Linear(y)) => assert_eq!(x.weights, y.weights),
                _ => {}
            }
        }
    }

    #[test]
    fn plain_autoencoder_mode_decreases_rec_loss() {
        // noise off, adversarial terms weighted zero: moving-average L_rec
        // must fall monotonically over the run.
        let windows = synthetic_windows(16, 15);
        let config = TrainConfig {
            epochs: 12,
            batch_size: 8,
            noise_std: 0.0,
            adversarial_weight: 0.0,
            lr_encoder: 2e-3,
            lr_decoder: 2e-3,
            ..Default::default()
        };
        let out = train(&windows, &config, &tiny_spec()).unwrap();
        let recs: Vec<f64> = out.log.iter().map(|b| b.rec).collect();
        let window = 8;
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let first = avg(&recs[..window]);
        let last = avg(&recs[recs.len() - window..]);
        assert!(
            last < first,
            "rec loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn empty_and_undersized_datasets_are_rejected() {
        let spec = tiny_spec();
        let config = TrainConfig::default();
        assert!(train(&[], &config, &spec).is_err());
        let windows = synthetic_windows(4, 17);
        assert!(train(&windows, &config, &spec).is_err()); // batch_size 16 > 4
    }

    #[test]
    fn overfit_one_sample_reduces_error_90_percent() {
        // plain-autoencoder sanity run on a single window
        let windows = synthetic_windows(1, 19);
        let config = TrainConfig {
            epochs: 400,
            batch_size: 1,
            noise_std: 0.0,
            adversarial_weight: 0.0,
            lr_encoder: 3e-3,
            lr_decoder: 3e-3,
            ..Default::default()
        };
        let spec = tiny_spec();
        let untrained = ModelParams::new(&spec, config.seed).unwrap();
        let x = windows_to_batch(&windows, &[0]);
        let rec_of = |model: &ModelParams| {
            let (z, _) = model
                .encoder
                .forward_infer(&Value::Map(x.clone()))
                .unwrap();
            let (xr, _) = model.decoder.forward_infer(&z).unwrap();
            reconstruction_loss(&x, xr.as_map().unwrap()).unwrap()
        };
        let before = rec_of(&untrained);
        let out = train(&windows, &config, &spec).unwrap();
        let after = rec_of(&out.model);
        assert!(
            after < 0.1 * before,
            "overfit failed: before {before}, after {after}"
        );
    }
}
