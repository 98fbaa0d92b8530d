//! Raw sensor streams to normalized 12×50 windows: spike repair and
//! flat-segment removal, resampling to a shared 100 Hz grid, magnitude
//! channels, min-max normalization and non-overlapping windowing.
//!
//! Channel order is fixed throughout the crate:
//! acc x,y,z,M · gyr x,y,z,M · mag x,y,z,M.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 12;
pub const RAW_CHANNELS: usize = 9;
pub const DEFAULT_RATE_HZ: f64 = 100.0;
pub const DEFAULT_WINDOW_SECONDS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sensor {
    Accelerometer,
    Gyroscope,
    Magnetometer,
}

impl Sensor {
    pub const ALL: [Sensor; 3] = [Sensor::Accelerometer, Sensor::Gyroscope, Sensor::Magnetometer];

    pub fn tag(self) -> &'static str {
        match self {
            Sensor::Accelerometer => "acc",
            Sensor::Gyroscope => "gyr",
            Sensor::Magnetometer => "mag",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Sensor> {
        match tag {
            "acc" => Some(Sensor::Accelerometer),
            "gyr" => Some(Sensor::Gyroscope),
            "mag" => Some(Sensor::Magnetometer),
            _ => None,
        }
    }
}

/// One sensor's timestamped 3-axis stream; timestamps strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct SensorStream {
    pub timestamps_ms: Vec<f64>,
    pub samples: Vec<[f64; 3]>,
}

impl SensorStream {
    pub fn len(&self) -> usize {
        self.timestamps_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps_ms.is_empty()
    }

    pub fn axis(&self, axis: usize) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(move |s| s[axis])
    }

    fn validate(&self, sensor: Sensor) -> Result<()> {
        if self.timestamps_ms.len() != self.samples.len() {
            return Err(Error::data(format!(
                "{}: {} timestamps but {} samples",
                sensor.tag(),
                self.timestamps_ms.len(),
                self.samples.len()
            )));
        }
        for pair in self.timestamps_ms.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::data(format!(
                    "{}: timestamps not strictly increasing at {} -> {}",
                    sensor.tag(),
                    pair[0],
                    pair[1]
                )));
            }
        }
        Ok(())
    }
}

/// Raw per-session streams from all three sensors, pre-normalization.
#[derive(Debug, Clone)]
pub struct SensorRecording {
    pub user_id: String,
    pub session_id: String,
    pub accelerometer: SensorStream,
    pub gyroscope: SensorStream,
    pub magnetometer: SensorStream,
}

impl SensorRecording {
    pub fn stream(&self, sensor: Sensor) -> &SensorStream {
        match sensor {
            Sensor::Accelerometer => &self.accelerometer,
            Sensor::Gyroscope => &self.gyroscope,
            Sensor::Magnetometer => &self.magnetometer,
        }
    }

    pub fn stream_mut(&mut self, sensor: Sensor) -> &mut SensorStream {
        match sensor {
            Sensor::Accelerometer => &mut self.accelerometer,
            Sensor::Gyroscope => &mut self.gyroscope,
            Sensor::Magnetometer => &mut self.magnetometer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for sensor in Sensor::ALL {
            self.stream(sensor).validate(sensor)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        Sensor::ALL.iter().all(|&s| self.stream(s).is_empty())
    }
}

/// A 12-channel series on a uniform time grid (all sensors aligned),
/// magnitude channels included.
#[derive(Debug, Clone)]
pub struct ChannelSeries {
    pub user_id: String,
    pub session_id: String,
    pub start_ms: f64,
    pub rate_hz: f64,
    /// `(12, samples)`
    pub values: Array2<f64>,
}

/// The unit of training and scoring: a 12×n matrix of sensor readings.
/// Values lie in [0, 1] once normalization has been applied.
#[derive(Debug, Clone)]
pub struct SensorWindow {
    pub values: Array2<f64>,
    pub user_id: String,
    pub session_id: String,
    pub start_ms: f64,
}

/// Per-channel min/max fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Channels where max == min; emitted as the constant 0.5.
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Repair a sample whose deviation from its local median exceeds this
    /// multiple of the channel's median absolute deviation.
    pub peak_mad_k: f64,
    /// Local median window, in samples.
    pub median_window: usize,
    /// Minimum duration of a flat span to drop, seconds.
    pub flat_window_s: f64,
    /// A span is flat when every channel's variance stays below this.
    pub flat_var_eps: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            peak_mad_k: 6.0,
            median_window: 5,
            flat_window_s: 2.0,
            flat_var_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NoiseReport {
    pub repaired_samples: usize,
    pub dropped_spans: usize,
    pub dropped_samples: usize,
    /// True when noise removal consumed the whole recording.
    pub emptied: bool,
}

// ---------------------------------------------------------------------------
// Noise removal
// ---------------------------------------------------------------------------

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Replace isolated spikes by the median of their local neighborhood.
/// A sample is a spike when its absolute deviation from the neighborhood
/// median exceeds `peak_mad_k` times the channel's median absolute deviation.
fn repair_spikes(stream: &mut SensorStream, params: &NoiseParams) -> usize {
    let n = stream.len();
    if n == 0 {
        return 0;
    }
    let half = params.median_window / 2;
    let mut repaired = 0;
    for axis in 0..3 {
        let channel: Vec<f64> = stream.axis(axis).collect();
        let med = median_of(channel.clone());
        let mad = median_of(channel.iter().map(|v| (v - med).abs()).collect());
        let threshold = params.peak_mad_k * mad;
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let local = median_of(channel[lo..hi].to_vec());
            if (channel[i] - local).abs() > threshold {
                stream.samples[i][axis] = local;
                repaired += 1;
            }
        }
    }
    repaired
}

/// Maximal time spans over which every axis of `stream` has variance below
/// `eps`, as `(t_start, t_end)` closed intervals.
fn flat_spans(stream: &SensorStream, eps: f64) -> Vec<(f64, f64)> {
    let n = stream.len();
    if n == 0 {
        return Vec::new();
    }
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n {
        // grow [start, end) while all-axis variance stays under eps
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut end = start;
        while end < n {
            let s = stream.samples[end];
            let m = (end - start + 1) as f64;
            let mut ok = true;
            for a in 0..3 {
                let ns = sum[a] + s[a];
                let nq = sumsq[a] + s[a] * s[a];
                let var = nq / m - (ns / m) * (ns / m);
                if var >= eps {
                    ok = false;
                    break;
                }
            }
            if !ok {
                break;
            }
            for a in 0..3 {
                sum[a] += s[a];
                sumsq[a] += s[a] * s[a];
            }
            end += 1;
        }
        if end > start + 1 {
            spans.push((stream.timestamps_ms[start], stream.timestamps_ms[end - 1]));
            start = end;
        } else {
            start += 1;
        }
    }
    spans
}

fn intersect_spans(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo <= hi {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Spike repair followed by flat-segment removal. Flat spans are dropped
/// from all sensors with original timestamps preserved, which leaves time
/// gaps; [`split_at_gaps`] turns those into independent segments.
pub fn remove_noise(
    recording: &SensorRecording,
    params: &NoiseParams,
) -> (SensorRecording, NoiseReport) {
    let mut rec = recording.clone();
    let mut report = NoiseReport::default();
    for sensor in Sensor::ALL {
        report.repaired_samples += repair_spikes(rec.stream_mut(sensor), params);
    }

    // A span counts as flat only where all three sensors are flat at once.
    let mut flats = flat_spans(&rec.accelerometer, params.flat_var_eps);
    flats = intersect_spans(&flats, &flat_spans(&rec.gyroscope, params.flat_var_eps));
    flats = intersect_spans(&flats, &flat_spans(&rec.magnetometer, params.flat_var_eps));
    let min_ms = params.flat_window_s * 1000.0;
    let flats: Vec<(f64, f64)> = flats
        .into_iter()
        .filter(|(lo, hi)| hi - lo >= min_ms)
        .collect();
    report.dropped_spans = flats.len();

    if !flats.is_empty() {
        for sensor in Sensor::ALL {
            let stream = rec.stream_mut(sensor);
            let keep: Vec<bool> = stream
                .timestamps_ms
                .iter()
                .map(|&t| !flats.iter().any(|&(lo, hi)| t >= lo && t <= hi))
                .collect();
            report.dropped_samples += keep.iter().filter(|&&k| !k).count();
            let mut ts = Vec::new();
            let mut ss = Vec::new();
            for (i, &k) in keep.iter().enumerate() {
                if k {
                    ts.push(stream.timestamps_ms[i]);
                    ss.push(stream.samples[i]);
                }
            }
            stream.timestamps_ms = ts;
            stream.samples = ss;
        }
    }
    report.emptied = rec.is_empty();
    (rec, report)
}

/// Split a recording wherever any sensor pauses for longer than
/// `max_gap_ms`; each segment is preprocessed and windowed independently so
/// no window spans a gap.
pub fn split_at_gaps(recording: &SensorRecording, max_gap_ms: f64) -> Vec<SensorRecording> {
    let mut cut_points: Vec<f64> = Vec::new();
    for sensor in Sensor::ALL {
        let ts = &recording.stream(sensor).timestamps_ms;
        for pair in ts.windows(2) {
            if pair[1] - pair[0] > max_gap_ms {
                // cut in the middle of the gap
                cut_points.push(0.5 * (pair[0] + pair[1]));
            }
        }
    }
    if cut_points.is_empty() {
        return vec![recording.clone()];
    }
    cut_points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cut_points.dedup();

    let mut segments = Vec::new();
    let mut bounds = vec![f64::NEG_INFINITY];
    bounds.extend(cut_points.iter().copied());
    bounds.push(f64::INFINITY);
    for (seg_idx, lohi) in bounds.windows(2).enumerate() {
        let (lo, hi) = (lohi[0], lohi[1]);
        let mut seg = SensorRecording {
            user_id: recording.user_id.clone(),
            session_id: format!("{}/{}", recording.session_id, seg_idx),
            accelerometer: SensorStream::default(),
            gyroscope: SensorStream::default(),
            magnetometer: SensorStream::default(),
        };
        for sensor in Sensor::ALL {
            let src = recording.stream(sensor);
            let dst = seg.stream_mut(sensor);
            for (t, s) in src.timestamps_ms.iter().zip(src.samples.iter()) {
                if *t > lo && *t <= hi {
                    dst.timestamps_ms.push(*t);
                    dst.samples.push(*s);
                }
            }
        }
        if !seg.is_empty() {
            segments.push(seg);
        }
    }
    segments
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

fn interp_stream(stream: &SensorStream, t: f64) -> [f64; 3] {
    let ts = &stream.timestamps_ms;
    // exact node hit returns the stored sample bit-identically
    match ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(i) => stream.samples[i],
        Err(i) => {
            let (i0, i1) = (i - 1, i);
            let t0 = ts[i0];
            let t1 = ts[i1];
            let alpha = (t - t0) / (t1 - t0);
            let a = stream.samples[i0];
            let b = stream.samples[i1];
            [
                a[0] + alpha * (b[0] - a[0]),
                a[1] + alpha * (b[1] - a[1]),
                a[2] + alpha * (b[2] - a[2]),
            ]
        }
    }
}

/// Linear interpolation of all three sensors onto a shared uniform grid
/// covering the overlap of their time ranges.
pub fn resample(recording: &SensorRecording, rate_hz: f64) -> Result<SensorRecording> {
    recording.validate()?;
    for sensor in Sensor::ALL {
        if recording.stream(sensor).len() < 2 {
            return Err(Error::data(format!(
                "session {}: sensor {} has fewer than 2 samples",
                recording.session_id,
                sensor.tag()
            )));
        }
    }
    let t_start = Sensor::ALL
        .iter()
        .map(|&s| recording.stream(s).timestamps_ms[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let t_end = Sensor::ALL
        .iter()
        .map(|&s| *recording.stream(s).timestamps_ms.last().unwrap())
        .fold(f64::INFINITY, f64::min);
    if t_end < t_start {
        return Err(Error::data(format!(
            "session {}: sensor time ranges do not overlap (start {t_start} > end {t_end})",
            recording.session_id
        )));
    }
    let dt = 1000.0 / rate_hz;
    let count = ((t_end - t_start) / dt).floor() as usize + 1;

    let mut out = SensorRecording {
        user_id: recording.user_id.clone(),
        session_id: recording.session_id.clone(),
        accelerometer: SensorStream::default(),
        gyroscope: SensorStream::default(),
        magnetometer: SensorStream::default(),
    };
    for sensor in Sensor::ALL {
        let src = recording.stream(sensor);
        let dst = out.stream_mut(sensor);
        dst.timestamps_ms.reserve(count);
        dst.samples.reserve(count);
        for k in 0..count {
            let t = t_start + k as f64 * dt;
            dst.timestamps_ms.push(t);
            dst.samples.push(interp_stream(src, t));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Magnitude and channel assembly
// ---------------------------------------------------------------------------

/// Euclidean magnitude of one 3-axis frame.
pub fn magnitude(x: f64, y: f64, z: f64) -> f64 {
    (x * x + y * y + z * z).sqrt()
}

/// Append the magnitude as a fourth axis.
pub fn add_magnitude(frame: [f64; 3]) -> [f64; 4] {
    [
        frame[0],
        frame[1],
        frame[2],
        magnitude(frame[0], frame[1], frame[2]),
    ]
}

/// Assemble a resampled recording into the fixed 12-channel layout.
/// Magnitudes are computed from the raw (pre-normalization) axes.
pub fn to_channel_series(recording: &SensorRecording, rate_hz: f64) -> Result<ChannelSeries> {
    let n = recording.accelerometer.len();
    for sensor in Sensor::ALL {
        if recording.stream(sensor).len() != n {
            return Err(Error::data(
                "channel assembly requires sensors on a shared grid; resample first",
            ));
        }
    }
    if n == 0 {
        return Err(Error::data("empty recording"));
    }
    let mut values = Array2::zeros((CHANNELS, n));
    for (si, sensor) in Sensor::ALL.iter().enumerate() {
        let stream = recording.stream(*sensor);
        for (t, s) in stream.samples.iter().enumerate() {
            let f = add_magnitude(*s);
            for a in 0..4 {
                values[(si * 4 + a, t)] = f[a];
            }
        }
    }
    Ok(ChannelSeries {
        user_id: recording.user_id.clone(),
        session_id: recording.session_id.clone(),
        start_ms: recording.accelerometer.timestamps_ms[0],
        rate_hz,
        values,
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel min/max over the training split only.
pub fn fit_normalization<'a>(
    training: impl IntoIterator<Item = &'a ChannelSeries>,
) -> Result<NormalizationStats> {
    let mut min = vec![f64::INFINITY; CHANNELS];
    let mut max = vec![f64::NEG_INFINITY; CHANNELS];
    let mut seen = false;
    for series in training {
        seen = true;
        for c in 0..CHANNELS {
            for &v in series.values.row(c) {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
    }
    if !seen {
        return Err(Error::data("no training data to fit normalization on"));
    }
    let degenerate = min.iter().zip(max.iter()).map(|(a, b)| a == b).collect();
    Ok(NormalizationStats { min, max, degenerate })
}

/// Same fit over already-windowed (unnormalized) data.
pub fn fit_normalization_windows(training: &[SensorWindow]) -> Result<NormalizationStats> {
    if training.is_empty() {
        return Err(Error::data("no training windows to fit normalization on"));
    }
    let mut min = vec![f64::INFINITY; CHANNELS];
    let mut max = vec![f64::NEG_INFINITY; CHANNELS];
    for w in training {
        for c in 0..CHANNELS {
            for &v in w.values.row(c) {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
    }
    let degenerate = min.iter().zip(max.iter()).map(|(a, b)| a == b).collect();
    Ok(NormalizationStats { min, max, degenerate })
}

fn normalize_value(v: f64, min: f64, max: f64, degenerate: bool) -> f64 {
    if degenerate {
        0.5
    } else {
        ((v - min) / (max - min)).clamp(0.0, 1.0)
    }
}

/// Min-max normalize a series with fitted stats; values outside the training
/// range clip to [0, 1].
pub fn apply_normalization(series: &ChannelSeries, stats: &NormalizationStats) -> ChannelSeries {
    let mut out = series.clone();
    for c in 0..CHANNELS {
        let (min, max, deg) = (stats.min[c], stats.max[c], stats.degenerate[c]);
        for v in out.values.row_mut(c) {
            *v = normalize_value(*v, min, max, deg);
        }
    }
    out
}

pub fn normalize_window(window: &SensorWindow, stats: &NormalizationStats) -> SensorWindow {
    let mut out = window.clone();
    for c in 0..CHANNELS {
        let (min, max, deg) = (stats.min[c], stats.max[c], stats.degenerate[c]);
        for v in out.values.row_mut(c) {
            *v = normalize_value(*v, min, max, deg);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct WindowingOutcome {
    pub windows: Vec<SensorWindow>,
    pub dropped_samples: usize,
}

/// Cut a series into consecutive non-overlapping windows of
/// `window_seconds`; the trailing remainder is dropped.
pub fn window(series: &ChannelSeries, window_seconds: f64) -> WindowingOutcome {
    let samples_per_window = (window_seconds * series.rate_hz).round() as usize;
    if samples_per_window == 0 {
        return WindowingOutcome::default();
    }
    let total = series.values.dim().1;
    let count = total / samples_per_window;
    let dropped = total - count * samples_per_window;
    let dt = 1000.0 / series.rate_hz;
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let lo = k * samples_per_window;
        let hi = lo + samples_per_window;
        windows.push(SensorWindow {
            values: series.values.slice(ndarray::s![.., lo..hi]).to_owned(),
            user_id: series.user_id.clone(),
            session_id: series.session_id.clone(),
            start_ms: series.start_ms + lo as f64 * dt,
        });
    }
    WindowingOutcome {
        windows,
        dropped_samples: dropped,
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub noise: NoiseParams,
    /// Split sessions at pauses longer than this.
    pub gap_split_ms: f64,
    pub rate_hz: f64,
    pub window_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            noise: NoiseParams::default(),
            gap_split_ms: 250.0,
            rate_hz: DEFAULT_RATE_HZ,
            window_seconds: DEFAULT_WINDOW_SECONDS,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessReport {
    pub noise: NoiseReport,
    pub segments: usize,
    pub rejected_segments: usize,
    pub dropped_samples: usize,
}

/// Noise removal, gap splitting, resampling, magnitude and windowing for one
/// recording. Output windows are UNNORMALIZED; fit stats on the training
/// split and apply [`normalize_window`] downstream.
pub fn preprocess_recording(
    recording: &SensorRecording,
    cfg: &PreprocessConfig,
) -> Result<(Vec<SensorWindow>, PreprocessReport)> {
    recording.validate()?;
    let mut report = PreprocessReport::default();
    let (clean, noise_report) = remove_noise(recording, &cfg.noise);
    report.noise = noise_report;
    let mut windows = Vec::new();
    if clean.is_empty() {
        return Ok((windows, report));
    }
    for segment in split_at_gaps(&clean, cfg.gap_split_ms) {
        report.segments += 1;
        let resampled = match resample(&segment, cfg.rate_hz) {
            Ok(r) => r,
            Err(_) => {
                report.rejected_segments += 1;
                continue;
            }
        };
        let series = match to_channel_series(&resampled, cfg.rate_hz) {
            Ok(s) => s,
            Err(_) => {
                report.rejected_segments += 1;
                continue;
            }
        };
        let outcome = window(&series, cfg.window_seconds);
        report.dropped_samples += outcome.dropped_samples;
        windows.extend(outcome.windows);
    }
    Ok((windows, report))
}

/// Preprocess many recordings, concatenating their windows.
pub fn preprocess_recordings(
    recordings: &[SensorRecording],
    cfg: &PreprocessConfig,
) -> Result<(Vec<SensorWindow>, PreprocessReport)> {
    let mut all = Vec::new();
    let mut total = PreprocessReport::default();
    for rec in recordings {
        let (windows, report) = preprocess_recording(rec, cfg)?;
        all.extend(windows);
        total.noise.repaired_samples += report.noise.repaired_samples;
        total.noise.dropped_spans += report.noise.dropped_spans;
        total.noise.dropped_samples += report.noise.dropped_samples;
        total.segments += report.segments;
        total.rejected_segments += report.rejected_segments;
        total.dropped_samples += report.dropped_samples;
    }
    Ok((all, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream_from(ts: Vec<f64>, vals: Vec<[f64; 3]>) -> SensorStream {
        SensorStream {
            timestamps_ms: ts,
            samples: vals,
        }
    }

    fn constant_recording(n: usize, dt: f64, value: f64) -> SensorRecording {
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let vals = vec![[value; 3]; n];
        SensorRecording {
            user_id: "u".into(),
            session_id: "s".into(),
            accelerometer: stream_from(ts.clone(), vals.clone()),
            gyroscope: stream_from(ts.clone(), vals.clone()),
            magnetometer: stream_from(ts, vals),
        }
    }

    fn sinusoid_recording(n: usize, dt_ms: f64, freq_hz: f64, amp: f64) -> SensorRecording {
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * dt_ms).collect();
        let vals: Vec<[f64; 3]> = ts
            .iter()
            .map(|&t| {
                let phase = 2.0 * std::f64::consts::PI * freq_hz * t / 1000.0;
                [amp * phase.sin(), amp * (phase + 1.0).sin(), amp * (phase + 2.0).sin()]
            })
            .collect();
        SensorRecording {
            user_id: "u".into(),
            session_id: "s".into(),
            accelerometer: stream_from(ts.clone(), vals.clone()),
            gyroscope: stream_from(ts.clone(), vals.clone()),
            magnetometer: stream_from(ts, vals),
        }
    }

    #[test]
    fn spike_on_flat_signal_is_repaired_to_zero() {
        let mut rec = constant_recording(100, 10.0, 0.0);
        rec.accelerometer.samples[50][0] = 1000.0;
        let (clean, report) = remove_noise(&rec, &NoiseParams { flat_window_s: f64::INFINITY, ..Default::default() });
        assert_eq!(clean.accelerometer.samples[50][0], 0.0);
        assert!(report.repaired_samples >= 1);
    }

    #[test]
    fn fully_constant_stream_is_dropped_as_flat() {
        let rec = constant_recording(1000, 10.0, 2.5); // 10 s
        let (clean, report) = remove_noise(&rec, &NoiseParams::default());
        assert!(clean.is_empty());
        assert!(report.emptied);
        assert_eq!(report.dropped_spans, 1);
    }

    #[test]
    fn injected_spikes_are_repaired_exactly_and_rest_untouched() {
        let rec = sinusoid_recording(500, 10.0, 1.5, 1.0);
        let mut spiked = rec.clone();
        let spike_at = [77usize, 200, 431];
        for &i in &spike_at {
            spiked.accelerometer.samples[i][1] += 50.0;
        }
        let (clean, report) = remove_noise(&spiked, &NoiseParams::default());
        assert_eq!(report.repaired_samples, 3);
        for i in 0..500 {
            for a in 0..3 {
                let got = clean.accelerometer.samples[i][a];
                if spike_at.contains(&i) && a == 1 {
                    assert!((got - rec.accelerometer.samples[i][a]).abs() < 0.2,
                        "spike at {i} repaired to {got}");
                } else {
                    assert_eq!(got, spiked.accelerometer.samples[i][a], "sample {i} axis {a} changed");
                }
            }
        }
    }

    #[test]
    fn resample_of_uniform_100hz_is_identity() {
        let rec = sinusoid_recording(300, 10.0, 2.0, 1.0);
        let out = resample(&rec, 100.0).unwrap();
        assert_eq!(out.accelerometer.len(), 300);
        for i in 0..300 {
            assert_eq!(out.accelerometer.timestamps_ms[i], rec.accelerometer.timestamps_ms[i]);
            assert_eq!(out.accelerometer.samples[i], rec.accelerometer.samples[i]);
        }
    }

    #[test]
    fn linear_ramp_resamples_exactly() {
        // 50 Hz ramp value = t; linear interpolation reproduces it at 100 Hz.
        let ts: Vec<f64> = (0..150).map(|i| i as f64 * 20.0).collect();
        let vals: Vec<[f64; 3]> = ts.iter().map(|&t| [t, 2.0 * t, -t]).collect();
        let rec = SensorRecording {
            user_id: "u".into(),
            session_id: "s".into(),
            accelerometer: stream_from(ts.clone(), vals.clone()),
            gyroscope: stream_from(ts.clone(), vals.clone()),
            magnetometer: stream_from(ts, vals),
        };
        let out = resample(&rec, 100.0).unwrap();
        for (t, s) in out
            .accelerometer
            .timestamps_ms
            .iter()
            .zip(out.accelerometer.samples.iter())
        {
            assert!((s[0] - t).abs() < 1e-9);
            assert!((s[1] - 2.0 * t).abs() < 1e-9);
        }
    }

    #[test]
    fn odd_rate_sinusoid_resample_bounded_error() {
        // ~3 s at ~87 Hz; expect 300 output samples at 100 Hz and interp
        // error within the h^2 * max|f''| / 8 bound.
        let f_sig = 2.0;
        let dt = 11.49; // ms, i.e. 87.03 Hz
        let n = 262; // last timestamp 2998.9 ms
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let vals: Vec<[f64; 3]> = ts
            .iter()
            .map(|&t| {
                let v = (2.0 * std::f64::consts::PI * f_sig * t / 1000.0).sin();
                [v, v, v]
            })
            .collect();
        let rec = SensorRecording {
            user_id: "u".into(),
            session_id: "s".into(),
            accelerometer: stream_from(ts.clone(), vals.clone()),
            gyroscope: stream_from(ts.clone(), vals.clone()),
            magnetometer: stream_from(ts, vals),
        };
        let out = resample(&rec, 100.0).unwrap();
        assert_eq!(out.accelerometer.len(), 300);
        let bound = (2.0 * std::f64::consts::PI * f_sig / 87.0).powi(2) / 8.0;
        for (t, s) in out
            .accelerometer
            .timestamps_ms
            .iter()
            .zip(out.accelerometer.samples.iter())
        {
            let truth = (2.0 * std::f64::consts::PI * f_sig * t / 1000.0).sin();
            assert!(
                (s[0] - truth).abs() <= bound,
                "t={t}: err {} > bound {bound}",
                (s[0] - truth).abs()
            );
        }
    }

    #[test]
    fn no_overlap_is_rejected() {
        let mut rec = constant_recording(10, 10.0, 1.0);
        rec.gyroscope.timestamps_ms = (0..10).map(|i| 5000.0 + i as f64 * 10.0).collect();
        assert!(resample(&rec, 100.0).is_err());
    }

    #[test]
    fn magnitude_345() {
        assert_eq!(magnitude(3.0, 4.0, 0.0), 5.0);
        assert_eq!(magnitude(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn magnitude_identity_holds() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..1000 {
            let (x, y, z) = (next(), next(), next());
            let m = magnitude(x, y, z);
            assert!((m * m - (x * x + y * y + z * z)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_of_simple_channel() {
        let series = ChannelSeries {
            user_id: "u".into(),
            session_id: "s".into(),
            start_ms: 0.0,
            rate_hz: 100.0,
            values: {
                let mut v = Array2::zeros((CHANNELS, 3));
                for c in 0..CHANNELS {
                    v[(c, 0)] = 0.0;
                    v[(c, 1)] = 5.0;
                    v[(c, 2)] = 10.0;
                }
                v
            },
        };
        let stats = fit_normalization([&series]).unwrap();
        let out = apply_normalization(&series, &stats);
        assert_eq!(out.values[(0, 0)], 0.0);
        assert_eq!(out.values[(0, 1)], 0.5);
        assert_eq!(out.values[(0, 2)], 1.0);
    }

    #[test]
    fn constant_channel_is_degenerate_half() {
        let series = ChannelSeries {
            user_id: "u".into(),
            session_id: "s".into(),
            start_ms: 0.0,
            rate_hz: 100.0,
            values: Array2::from_elem((CHANNELS, 5), 3.3),
        };
        let stats = fit_normalization([&series]).unwrap();
        assert!(stats.degenerate.iter().all(|&d| d));
        let out = apply_normalization(&series, &stats);
        assert!(out.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn values_beyond_training_range_clip() {
        let train = ChannelSeries {
            user_id: "u".into(),
            session_id: "s".into(),
            start_ms: 0.0,
            rate_hz: 100.0,
            values: {
                let mut v = Array2::zeros((CHANNELS, 2));
                v.column_mut(1).fill(1.0);
                v
            },
        };
        let stats = fit_normalization([&train]).unwrap();
        let mut test = train.clone();
        test.values.fill(7.0);
        let out = apply_normalization(&test, &stats);
        assert!(out.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn window_counts_and_dropping() {
        // 12.3 s at 100 Hz: 24 windows of 50 samples, 30 dropped.
        let series = ChannelSeries {
            user_id: "u".into(),
            session_id: "s".into(),
            start_ms: 0.0,
            rate_hz: 100.0,
            values: Array2::zeros((CHANNELS, 1230)),
        };
        let out = window(&series, 0.5);
        assert_eq!(out.windows.len(), 24);
        assert_eq!(out.dropped_samples, 30);

        let exact = ChannelSeries {
            values: Array2::zeros((CHANNELS, 50)),
            ..series.clone()
        };
        let out = window(&exact, 0.5);
        assert_eq!(out.windows.len(), 1);
        assert_eq!(out.dropped_samples, 0);
    }

    #[test]
    fn windows_are_lossless_and_non_overlapping() {
        let mut values = Array2::zeros((CHANNELS, 1000));
        for c in 0..CHANNELS {
            for t in 0..1000 {
                values[(c, t)] = (c * 1000 + t) as f64;
            }
        }
        let series = ChannelSeries {
            user_id: "u".into(),
            session_id: "s".into(),
            start_ms: 0.0,
            rate_hz: 100.0,
            values,
        };
        let out = window(&series, 0.5);
        assert_eq!(out.windows.len(), 20);
        // concatenation reproduces the source exactly
        for (k, w) in out.windows.iter().enumerate() {
            assert_eq!(w.start_ms, k as f64 * 500.0);
            for c in 0..CHANNELS {
                for t in 0..50 {
                    assert_eq!(w.values[(c, t)], series.values[(c, k * 50 + t)]);
                }
            }
        }
        // start times differ by exactly 500 ms
        for pair in out.windows.windows(2) {
            assert_eq!(pair[1].start_ms - pair[0].start_ms, 500.0);
        }
    }

    #[test]
    fn pipeline_produces_12x50_windows() {
        let rec = sinusoid_recording(1200, 10.0, 1.5, 2.0);
        let cfg = PreprocessConfig::default();
        let (windows, _) = preprocess_recording(&rec, &cfg).unwrap();
        assert!(!windows.is_empty());
        let stats = fit_normalization_windows(&windows).unwrap();
        for w in &windows {
            assert_eq!(w.values.dim(), (12, 50));
            let n = normalize_window(w, &stats);
            assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn recording_shorter_than_one_window_yields_nothing() {
        let rec = sinusoid_recording(30, 10.0, 1.5, 2.0);
        let cfg = PreprocessConfig::default();
        let (windows, _) = preprocess_recording(&rec, &cfg).unwrap();
        assert!(windows.is_empty());
    }
}
