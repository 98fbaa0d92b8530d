//! Local relative attention over 2D feature maps.
//!
//! Each output position attends to a k×k neighborhood of itself. Query, key
//! and value maps come from learned convolution projections of the input
//! (1×1 by default, i.e. per-position linear transforms); the attention
//! weight between a position and a neighbor is the softmax of their
//! query·key product over the neighborhood, and the output is the
//! weight-averaged value vectors. Neighborhoods are clipped at map borders
//! and the softmax renormalizes over the surviving neighbors.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::nn::kernels::{
    conv_backward_bias, conv_backward_input, conv_backward_weights, conv_forward, ConvGeometry,
};

/// A `(channels, height, width)` map of finite reals.
pub type FeatureMap = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Side of the square attention neighborhood; odd.
    pub neighborhood: usize,
    /// Spatial extent of the query/key/value projections; odd. 1 makes the
    /// projections per-position linear maps.
    pub projection_kernel: usize,
}

impl AttentionConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        AttentionConfig {
            in_channels,
            out_channels,
            neighborhood: 5,
            projection_kernel: 1,
        }
    }

    pub fn with_neighborhood(mut self, k: usize) -> Self {
        self.neighborhood = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("attention channel counts must be >= 1"));
        }
        if self.neighborhood == 0 || self.neighborhood % 2 == 0 {
            return Err(Error::config(format!(
                "attention neighborhood must be odd and >= 1, got {}",
                self.neighborhood
            )));
        }
        if self.projection_kernel == 0 || self.projection_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "projection kernel must be odd and >= 1, got {}",
                self.projection_kernel
            )));
        }
        Ok(())
    }

    fn geometry(&self) -> ConvGeometry {
        let k = self.projection_kernel;
        ConvGeometry::new(k, k, 1, (k - 1) / 2)
    }
}

/// Learned projection weights, shaped `(out_channels, in_channels, k, k)`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query_weights: Array4<f64>,
    pub key_weights: Array4<f64>,
    pub value_weights: Array4<f64>,
    pub query_bias: Option<Array1<f64>>,
    pub key_bias: Option<Array1<f64>>,
    pub value_bias: Option<Array1<f64>>,
}

impl AttentionParams {
    /// All-zero parameters for the given config.
    pub fn zeros(config: &AttentionConfig, bias: bool) -> Self {
        let k = config.projection_kernel;
        let shape = (config.out_channels, config.in_channels, k, k);
        let b = if bias {
            Some(Array1::zeros(config.out_channels))
        } else {
            None
        };
        AttentionParams {
            query_weights: Array4::zeros(shape),
            key_weights: Array4::zeros(shape),
            value_weights: Array4::zeros(shape),
            query_bias: b.clone(),
            key_bias: b.clone(),
            value_bias: b,
        }
    }

    pub fn validate(&self, config: &AttentionConfig) -> Result<()> {
        let k = config.projection_kernel;
        let expect = (config.out_channels, config.in_channels, k, k);
        for (name, w) in [
            ("query", &self.query_weights),
            ("key", &self.key_weights),
            ("value", &self.value_weights),
        ] {
            if w.dim() != expect {
                return Err(Error::config(format!(
                    "{name} weights shaped {:?}, expected {:?}",
                    w.dim(),
                    expect
                )));
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("{name} weights contain non-finite values")));
            }
        }
        for (name, b) in [
            ("query", &self.query_bias),
            ("key", &self.key_bias),
            ("value", &self.value_bias),
        ] {
            if let Some(b) = b {
                if b.len() != config.out_channels {
                    return Err(Error::config(format!(
                        "{name} bias length {} != out_channels {}",
                        b.len(),
                        config.out_channels
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = self.query_weights.len() + self.key_weights.len() + self.value_weights.len();
        for b in [&self.query_bias, &self.key_bias, &self.value_bias] {
            n += b.as_ref().map_or(0, |b| b.len());
        }
        n
    }

    fn weight_mat(w: &Array4<f64>) -> Array2<f64> {
        let (o, c, kh, kw) = w.dim();
        w.to_shape((o, c * kh * kw)).unwrap().to_owned()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// Iterate the clipped k×k neighborhood of `(i, j)`; at most k² entries.
fn neighbors(i: usize, j: usize, h: usize, w: usize, k: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = (k / 2) as isize;
    let (i, j) = (i as isize, j as isize);
    let a0 = (i - r).max(0) as usize;
    let a1 = ((i + r) as usize).min(h - 1);
    let b0 = (j - r).max(0) as usize;
    let b1 = ((j + r) as usize).min(w - 1);
    (a0..=a1).flat_map(move |a| (b0..=b1).map(move |b| (a, b)))
}

/// Forward pass state reused by the backward pass and the tangent
/// propagation: projected maps in position-major layout plus the softmax
/// weights per position.
pub struct AttentionCache {
    pub height: usize,
    pub width: usize,
    /// `(h*w, out_channels)` each.
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Flattened softmax weights, position-major; `offsets[p]..offsets[p+1]`
    /// indexes position `p`'s neighbors in row-major neighbor order.
    pub weights: Vec<f64>,
    pub offsets: Vec<usize>,
}

fn to_position_major(map: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let flat = map.view().into_shape_with_order((c, h * w)).unwrap();
    let mut out = Array2::zeros((h * w, c));
    for (p, mut row) in out.rows_mut().into_iter().enumerate() {
        for ch in 0..c {
            row[ch] = flat[(ch, p)];
        }
    }
    out
}

fn from_position_major(mat: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    {
        let mut flat = out.view_mut().into_shape_with_order((c, h * w)).unwrap();
        for (p, row) in mat.rows().into_iter().enumerate() {
            for ch in 0..c {
                flat[(ch, p)] = row[ch];
            }
        }
    }
    out
}

fn check_input(input: ArrayView3<f64>, config: &AttentionConfig) -> Result<()> {
    config.validate()?;
    let (c, h, w) = input.dim();
    if c != config.in_channels {
        return Err(Error::config(format!(
            "input has {c} channels, config expects {}",
            config.in_channels
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::config("input map dimensions must be >= 1"));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("attention input contains non-finite values"));
    }
    Ok(())
}

/// Forward pass retaining the cache needed by [`attention_backward_cached`]
/// and [`attention_jvp`].
pub fn attention_forward_cached(
    input: ArrayView3<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<(FeatureMap, AttentionCache)> {
    check_input(input, config)?;
    params.validate(config)?;
    let (_, h, w) = input.dim();
    let geom = config.geometry();
    let d_out = config.out_channels;

    let q = conv_forward(
        input,
        AttentionParams::weight_mat(&params.query_weights).view(),
        params.query_bias.as_ref().and_then(|b| b.as_slice()),
        &geom,
    );
    let k = conv_forward(
        input,
        AttentionParams::weight_mat(&params.key_weights).view(),
        params.key_bias.as_ref().and_then(|b| b.as_slice()),
        &geom,
    );
    let v = conv_forward(
        input,
        AttentionParams::weight_mat(&params.value_weights).view(),
        params.value_bias.as_ref().and_then(|b| b.as_slice()),
        &geom,
    );

    let qp = to_position_major(&q);
    let kp = to_position_major(&k);
    let vp = to_position_major(&v);

    let kk = config.neighborhood;
    let positions = h * w;
    let mut weights = Vec::with_capacity(positions * kk * kk);
    let mut offsets = Vec::with_capacity(positions + 1);
    offsets.push(0);
    let mut out = Array2::<f64>::zeros((positions, d_out));
    let mut logits: Vec<f64> = Vec::with_capacity(kk * kk);

    let qs = qp.as_slice().unwrap();
    let ks = kp.as_slice().unwrap();
    let vs = vp.as_slice().unwrap();
    let outs = out.as_slice_mut().unwrap();

    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let qrow = &qs[p * d_out..(p + 1) * d_out];
            logits.clear();
            for (a, b) in neighbors(i, j, h, w, kk) {
                let n = a * w + b;
                logits.push(dot(qrow, &ks[n * d_out..(n + 1) * d_out]));
            }
            debug_assert!(logits.len() <= kk * kk);
            // softmax with max-logit subtraction
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                total += *l;
            }
            let orow = &mut outs[p * d_out..(p + 1) * d_out];
            for ((a, b), e) in neighbors(i, j, h, w, kk).zip(logits.iter()) {
                let wgt = e / total;
                weights.push(wgt);
                let n = a * w + b;
                axpy(wgt, &vs[n * d_out..(n + 1) * d_out], orow);
            }
            offsets.push(weights.len());
        }
    }

    let out_map = from_position_major(&out, d_out, h, w);
    Ok((
        out_map,
        AttentionCache {
            height: h,
            width: w,
            q: qp,
            k: kp,
            v: vp,
            weights,
            offsets,
        },
    ))
}

/// Relative attention forward: for every position, softmax(q·k over the
/// clipped k×k neighborhood) applied to the neighborhood's value vectors.
pub fn relative_attention_forward(
    input: &FeatureMap,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<FeatureMap> {
    attention_forward_cached(input.view(), params, config).map(|(out, _)| out)
}

/// Per-position attention weights with their neighbor coordinates, for
/// inspection and property tests. Entry `[p]` lists `((a, b), weight)` in
/// row-major neighbor order for position `p = i*width + j`.
pub fn relative_attention_weights(
    input: &FeatureMap,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<Vec<Vec<((usize, usize), f64)>>> {
    let (_, cache) = attention_forward_cached(input.view(), params, config)?;
    let (h, w) = (cache.height, cache.width);
    let mut all = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let span = &cache.weights[cache.offsets[p]..cache.offsets[p + 1]];
            all.push(
                neighbors(i, j, h, w, config.neighborhood)
                    .zip(span.iter().copied())
                    .collect(),
            );
        }
    }
    Ok(all)
}

/// Backward pass from a retained cache. Accumulates nothing: returns fresh
/// gradients for the input and every parameter tensor.
pub fn attention_backward_cached(
    input: ArrayView3<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
    cache: &AttentionCache,
    upstream: ArrayView3<f64>,
) -> Result<(FeatureMap, AttentionParams)> {
    let (_, h, w) = input.dim();
    if upstream.dim() != (config.out_channels, h, w) {
        return Err(Error::config(format!(
            "upstream gradient shaped {:?}, expected {:?}",
            upstream.dim(),
            (config.out_channels, h, w)
        )));
    }
    let kk = config.neighborhood;
    let d_out = config.out_channels;
    let positions = h * w;

    let dy = to_position_major(&upstream.to_owned());
    let mut dq = Array2::<f64>::zeros((positions, d_out));
    let mut dk = Array2::<f64>::zeros((positions, d_out));
    let mut dv = Array2::<f64>::zeros((positions, d_out));

    {
        let dys = dy.as_slice().unwrap();
        let qsl = cache.q.as_slice().unwrap();
        let ksl = cache.k.as_slice().unwrap();
        let vsl = cache.v.as_slice().unwrap();
        let dqs = dq.as_slice_mut().unwrap();
        let dks = dk.as_slice_mut().unwrap();
        let dvs = dv.as_slice_mut().unwrap();

        let mut gvals: Vec<f64> = Vec::with_capacity(kk * kk);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let span = &cache.weights[cache.offsets[p]..cache.offsets[p + 1]];
                let dyrow = &dys[p * d_out..(p + 1) * d_out];
                // dv_n += w_n * dy_p ; g_n = dy_p . v_n
                gvals.clear();
                for ((a, b), &wgt) in neighbors(i, j, h, w, kk).zip(span.iter()) {
                    let n = a * w + b;
                    gvals.push(dot(dyrow, &vsl[n * d_out..(n + 1) * d_out]));
                    axpy(wgt, dyrow, &mut dvs[n * d_out..(n + 1) * d_out]);
                }
                // softmax backward: dl_n = w_n * (g_n - sum_m w_m g_m)
                let s: f64 = span.iter().zip(gvals.iter()).map(|(w, g)| w * g).sum();
                let qrow = &qsl[p * d_out..(p + 1) * d_out];
                for (((a, b), &wgt), &g) in
                    neighbors(i, j, h, w, kk).zip(span.iter()).zip(gvals.iter())
                {
                    let n = a * w + b;
                    let dl = wgt * (g - s);
                    for (acc, &kv) in dqs[p * d_out..(p + 1) * d_out]
                        .iter_mut()
                        .zip(ksl[n * d_out..(n + 1) * d_out].iter())
                    {
                        *acc += dl * kv;
                    }
                    axpy(dl, qrow, &mut dks[n * d_out..(n + 1) * d_out]);
                }
            }
        }
    }

    let dq_map = from_position_major(&dq, d_out, h, w);
    let dk_map = from_position_major(&dk, d_out, h, w);
    let dv_map = from_position_major(&dv, d_out, h, w);

    let geom = config.geometry();
    let (c_in, kh, kw) = (
        config.in_channels,
        config.projection_kernel,
        config.projection_kernel,
    );
    let reshape_w = |m: Array2<f64>| {
        m.into_shape_with_order((d_out, c_in, kh, kw)).unwrap()
    };

    let wq = AttentionParams::weight_mat(&params.query_weights);
    let wk = AttentionParams::weight_mat(&params.key_weights);
    let wv = AttentionParams::weight_mat(&params.value_weights);

    let mut grad_input = conv_backward_input(dq_map.view(), wq.view(), &geom, c_in, h, w);
    grad_input += &conv_backward_input(dk_map.view(), wk.view(), &geom, c_in, h, w);
    grad_input += &conv_backward_input(dv_map.view(), wv.view(), &geom, c_in, h, w);

    let grad_params = AttentionParams {
        query_weights: reshape_w(conv_backward_weights(input, dq_map.view(), &geom)),
        key_weights: reshape_w(conv_backward_weights(input, dk_map.view(), &geom)),
        value_weights: reshape_w(conv_backward_weights(input, dv_map.view(), &geom)),
        query_bias: params
            .query_bias
            .as_ref()
            .map(|_| Array1::from_vec(conv_backward_bias(dq_map.view()))),
        key_bias: params
            .key_bias
            .as_ref()
            .map(|_| Array1::from_vec(conv_backward_bias(dk_map.view()))),
        value_bias: params
            .value_bias
            .as_ref()
            .map(|_| Array1::from_vec(conv_backward_bias(dv_map.view()))),
    };

    Ok((grad_input, grad_params))
}

/// Exact gradients of the forward map with respect to the input and all
/// parameters, contracted with `upstream`.
pub fn relative_attention_backward(
    input: &FeatureMap,
    params: &AttentionParams,
    config: &AttentionConfig,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, AttentionParams)> {
    let (_, cache) = attention_forward_cached(input.view(), params, config)?;
    attention_backward_cached(input.view(), params, config, &cache, upstream.view())
}

/// Directional derivatives of the forward map: propagates `tangents` (a
/// batch of input perturbation directions, each shaped like the input)
/// through the layer at the cached linearization point. Parameters are held
/// fixed. Used to build decoder Jacobians column-block-wise.
///
/// Tangent projections run as one matrix product across the whole batch and
/// the combine works on `(position, tangent, channel)` blocks so every inner
/// loop is contiguous.
pub fn attention_jvp(
    params: &AttentionParams,
    config: &AttentionConfig,
    cache: &AttentionCache,
    tangents: &[FeatureMap],
) -> Vec<FeatureMap> {
    use rayon::prelude::*;

    let (h, w) = (cache.height, cache.width);
    let kk = config.neighborhood;
    let d_out = config.out_channels;
    let positions = h * w;
    let t_count = tangents.len();
    if t_count == 0 {
        return Vec::new();
    }
    let geom = config.geometry();
    let wq = AttentionParams::weight_mat(&params.query_weights);
    let wk = AttentionParams::weight_mat(&params.key_weights);
    let wv = AttentionParams::weight_mat(&params.value_weights);

    // project the whole tangent batch in one product per weight set (for the
    // default per-position projections), keeping per-tangent (P, O) blocks
    let project_all = |wmat: &Array2<f64>| -> Vec<Array2<f64>> {
        if config.projection_kernel == 1 {
            let c_in = config.in_channels;
            let mut x_all = Array2::<f64>::zeros((c_in, t_count * positions));
            for (t, tx) in tangents.iter().enumerate() {
                let flat = tx.view().into_shape_with_order((c_in, positions)).unwrap();
                for c in 0..c_in {
                    let src = flat.row(c);
                    x_all.row_mut(c).into_slice().unwrap()[t * positions..(t + 1) * positions]
                        .copy_from_slice(src.as_slice().unwrap());
                }
            }
            let projected = wmat.dot(&x_all); // (d_out, t_count * positions)
            (0..t_count)
                .map(|t| {
                    let mut block = Array2::<f64>::zeros((positions, d_out));
                    let bs = block.as_slice_mut().unwrap();
                    for o in 0..d_out {
                        let src = projected.row(o);
                        let src =
                            &src.as_slice().unwrap()[t * positions..(t + 1) * positions];
                        for (p, &v) in src.iter().enumerate() {
                            bs[p * d_out + o] = v;
                        }
                    }
                    block
                })
                .collect()
        } else {
            tangents
                .iter()
                .map(|tx| to_position_major(&conv_forward(tx.view(), wmat.view(), None, &geom)))
                .collect()
        }
    };
    let tqs = project_all(&wq);
    let tks = project_all(&wk);
    let tvs = project_all(&wv);

    let qsl = cache.q.as_slice().unwrap();
    let ksl = cache.k.as_slice().unwrap();
    let vsl = cache.v.as_slice().unwrap();

    // combine per tangent; each task's working set stays cache-sized
    let outs: Vec<FeatureMap> = tqs
        .into_par_iter()
        .zip(tks.into_par_iter().zip(tvs.into_par_iter()))
        .map(|(tq, (tk, tv))| {
            let tqs = tq.as_slice().unwrap();
            let tks = tk.as_slice().unwrap();
            let tvs = tv.as_slice().unwrap();
            let mut ty = vec![0.0; positions * d_out];
            let mut dls: Vec<f64> = Vec::with_capacity(kk * kk);
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let span = &cache.weights[cache.offsets[p]..cache.offsets[p + 1]];
                    let qrow = &qsl[p * d_out..(p + 1) * d_out];
                    let tqrow = &tqs[p * d_out..(p + 1) * d_out];
                    dls.clear();
                    let mut mean = 0.0;
                    for ((a, b), &wgt) in neighbors(i, j, h, w, kk).zip(span.iter()) {
                        let n = a * w + b;
                        let dl = dot(tqrow, &ksl[n * d_out..(n + 1) * d_out])
                            + dot(qrow, &tks[n * d_out..(n + 1) * d_out]);
                        dls.push(dl);
                        mean += wgt * dl;
                    }
                    let out = &mut ty[p * d_out..(p + 1) * d_out];
                    for (((a, b), &wgt), &dl) in
                        neighbors(i, j, h, w, kk).zip(span.iter()).zip(dls.iter())
                    {
                        let n = a * w + b;
                        axpy(wgt * (dl - mean), &vsl[n * d_out..(n + 1) * d_out], out);
                        axpy(wgt, &tvs[n * d_out..(n + 1) * d_out], out);
                    }
                }
            }
            let mut map = Array3::<f64>::zeros((d_out, h, w));
            {
                let ms = map.as_slice_mut().unwrap();
                for p in 0..positions {
                    for o in 0..d_out {
                        ms[o * positions + p] = ty[p * d_out + o];
                    }
                }
            }
            map
        })
        .collect();
    outs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(config: &AttentionConfig, rng: &mut ChaCha8Rng, bias: bool) -> AttentionParams {
        let k = config.projection_kernel;
        let shape = (config.out_channels, config.in_channels, k, k);
        let mut gen = |_: ()| rng.random_range(-0.5..0.5);
        let q = Array4::from_shape_fn(shape, |_| gen(()));
        let kw = Array4::from_shape_fn(shape, |_| gen(()));
        let v = Array4::from_shape_fn(shape, |_| gen(()));
        let b = |rng: &mut ChaCha8Rng| {
            if bias {
                Some(Array1::from_shape_fn(config.out_channels, |_| {
                    rng.random_range(-0.2..0.2)
                }))
            } else {
                None
            }
        };
        AttentionParams {
            query_weights: q,
            key_weights: kw,
            value_weights: v,
            query_bias: b(rng),
            key_bias: b(rng),
            value_bias: b(rng),
        }
    }

    #[test]
    fn single_neighbor_softmax_is_identity_weight() {
        // 1x1x1 input, k=1: output equals W_V * x exactly.
        let config = AttentionConfig {
            in_channels: 1,
            out_channels: 1,
            neighborhood: 1,
            projection_kernel: 1,
        };
        let mut params = AttentionParams::zeros(&config, false);
        params.query_weights[[0, 0, 0, 0]] = 0.7;
        params.key_weights[[0, 0, 0, 0]] = -1.3;
        params.value_weights[[0, 0, 0, 0]] = 2.5;
        let input = arr3(&[[[3.0]]]);
        let out = relative_attention_forward(&input, &params, &config).unwrap();
        assert!((out[[0, 0, 0]] - 2.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_yields_uniform_weights() {
        let config = AttentionConfig::new(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_params(&config, &mut rng, false);
        let input = Array3::from_elem((2, 6, 7), 0.42);
        let weights = relative_attention_weights(&input, &params, &config).unwrap();
        for (p, entry) in weights.iter().enumerate() {
            let n = entry.len() as f64;
            assert!(n as usize <= config.neighborhood * config.neighborhood);
            for &(_, w) in entry {
                assert!(
                    (w - 1.0 / n).abs() < 1e-12,
                    "position {p}: weight {w} != uniform {}",
                    1.0 / n
                );
            }
        }
    }

    #[test]
    fn weights_sum_to_one_everywhere() {
        let config = AttentionConfig::new(3, 4).with_neighborhood(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_params(&config, &mut rng, true);
        let input = Array3::from_shape_fn((3, 8, 9), |_| rng.random_range(-2.0..2.0));
        let weights = relative_attention_weights(&input, &params, &config).unwrap();
        for entry in &weights {
            let sum: f64 = entry.iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(entry.iter().all(|&(_, w)| w >= 0.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = AttentionConfig::new(2, 2).with_neighborhood(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&config, &mut rng, true);
        let input = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-1.0..1.0));
        let upstream = Array3::zeros((2, 4, 4));
        let (gi, gp) = relative_attention_backward(&input, &params, &config, &upstream).unwrap();
        assert!(gi.iter().all(|&v| v == 0.0));
        assert!(gp.query_weights.iter().all(|&v| v == 0.0));
        assert!(gp.key_weights.iter().all(|&v| v == 0.0));
        assert!(gp.value_weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_case_value_gradient_is_input() {
        // k=1 single position: y = w_v * x with softmax weight exactly 1,
        // so dy/dw_v = x.
        let config = AttentionConfig {
            in_channels: 1,
            out_channels: 1,
            neighborhood: 1,
            projection_kernel: 1,
        };
        let mut params = AttentionParams::zeros(&config, false);
        params.query_weights[[0, 0, 0, 0]] = 0.3;
        params.key_weights[[0, 0, 0, 0]] = 0.9;
        params.value_weights[[0, 0, 0, 0]] = -1.1;
        let input = arr3(&[[[1.7]]]);
        let upstream = arr3(&[[[1.0]]]);
        let (_, gp) = relative_attention_backward(&input, &params, &config, &upstream).unwrap();
        assert!((gp.value_weights[[0, 0, 0, 0]] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let config = AttentionConfig::new(3, 2);
        let params = AttentionParams::zeros(&config, false);
        let input = Array3::zeros((2, 4, 4));
        let err = relative_attention_forward(&input, &params, &config).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Config);
    }

    #[test]
    fn rejects_non_finite_input() {
        let config = AttentionConfig::new(1, 1);
        let params = AttentionParams::zeros(&config, false);
        let mut input = Array3::zeros((1, 2, 2));
        input[[0, 1, 1]] = f64::NAN;
        let err = relative_attention_forward(&input, &params, &config).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Numeric);
    }

    #[test]
    fn jvp_matches_finite_difference_of_forward() {
        let config = AttentionConfig::new(2, 3).with_neighborhood(3);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = random_params(&config, &mut rng, true);
        let input = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let direction = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = attention_forward_cached(input.view(), &params, &config).unwrap();
        let jvp = attention_jvp(&params, &config, &cache, std::slice::from_ref(&direction));

        let h = 1e-6;
        let plus = relative_attention_forward(&(&input + &(h * &direction)), &params, &config)
            .unwrap();
        let minus = relative_attention_forward(&(&input - &(h * &direction)), &params, &config)
            .unwrap();
        let fd = (&plus - &minus) / (2.0 * h);
        for (a, b) in jvp[0].iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6, "jvp {a} vs fd {b}");
        }
    }
}
