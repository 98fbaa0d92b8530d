use contauth::ingestion::SyntheticDatasetSpec;
use contauth::networks::{encode, NetworkSpec};
use contauth::preprocessing::{fit_normalization_windows, normalize_window, preprocess_recordings, PreprocessConfig};
use contauth::scoring::{decoder_jacobian, flatten_window, tangent_decompose};
use contauth::training::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let spec = SyntheticDatasetSpec::desk(1, 120, 7);
    let users = spec.generate().unwrap();
    let cfg = PreprocessConfig::default();
    let (raw, _) = preprocess_recordings(&users[0].recordings, &cfg).unwrap();
    let stats = fit_normalization_windows(&raw).unwrap();
    let windows: Vec<_> = raw.iter().map(|w| normalize_window(w, &stats)).collect();
    let net_spec = NetworkSpec::default_for(12, 50, 64, std::env::var("K").map(|v| v.parse().unwrap()).unwrap_or(5), 1).unwrap();
    let tc = TrainConfig { epochs: 1, batch_size: 16, seed: 1, ..Default::default() };
    let model = train(&windows[..32], &tc, &net_spec).unwrap().model;

    let w = &windows[0];
    let z = encode(&w.values, &model).unwrap();
    let t0 = Instant::now();
    let n = 10;
    let mut jac = decoder_jacobian(&z, &model).unwrap();
    for _ in 0..n - 1 { jac = decoder_jacobian(&z, &model).unwrap(); }
    println!("jacobian: {:?}/call", t0.elapsed() / n);

    let x = flatten_window(w);
    let t0 = Instant::now();
    for _ in 0..n { let _ = tangent_decompose(&x, &jac).unwrap(); }
    println!("svd+decompose: {:?}/call", t0.elapsed() / n);

    let t0 = Instant::now();
    for _ in 0..n { let _ = encode(&w.values, &model).unwrap(); }
    println!("encode: {:?}/call", t0.elapsed() / n);
}
