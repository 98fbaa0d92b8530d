use contauth::ingestion::SyntheticDatasetSpec;
use contauth::networks::{ModelParams, NetworkSpec};
use contauth::preprocessing::{fit_normalization_windows, normalize_window, preprocess_recordings, PreprocessConfig};
use contauth::scoring::{residual_norm_of};
use contauth::training::{train, TrainConfig};
use std::time::Instant;

fn main() {
    // generate a small user
    let t0 = Instant::now();
    let spec = SyntheticDatasetSpec::desk(2, 160, 7);
    let users = spec.generate().unwrap();
    let cfg = PreprocessConfig::default();
    let (raw, _) = preprocess_recordings(&users[0].recordings, &cfg).unwrap();
    println!("gen+preprocess: {:?} ({} windows)", t0.elapsed(), raw.len());

    let stats = fit_normalization_windows(&raw).unwrap();
    let windows: Vec<_> = raw.iter().map(|w| normalize_window(w, &stats)).collect();

    // time training iterations at default architecture
    let net_spec = NetworkSpec::standard();
    let tc = TrainConfig { epochs: 1, batch_size: 16, seed: 1, ..Default::default() };
    let t0 = Instant::now();
    let out = train(&windows, &tc, &net_spec).unwrap();
    let iters = out.log.len();
    println!("train 1 epoch = {} iters: {:?} ({:?}/iter)", iters, t0.elapsed(), t0.elapsed() / iters as u32);

    // time scoring (jacobian + svd) per window
    let model: ModelParams = out.model;
    let t0 = Instant::now();
    let k = 8;
    for w in windows.iter().take(k) {
        let _ = residual_norm_of(w, &model).unwrap();
    }
    println!("score {} windows: {:?} ({:?}/window)", k, t0.elapsed(), t0.elapsed() / k as u32);

    // parallel scoring throughput
    use rayon::prelude::*;
    let t0 = Instant::now();
    let k = 16;
    let _: Vec<f64> = windows.par_iter().take(k).map(|w| residual_norm_of(w, &model).unwrap()).collect();
    println!("parallel score {} windows: {:?} ({:?}/window)", k, t0.elapsed(), t0.elapsed() / k as u32);
}
