//! Dataset adapters and the synthetic generator.
//!
//! The generic CSV schema is the canonical interchange: UTF-8, comma
//! separated, header row `user_id,session_id,sensor,timestamp_ms,x,y,z`,
//! sensor one of `acc|gyr|mag`, timestamps integer milliseconds, decimal
//! point `.`. Public-dataset adapters are thin column mappers onto it; each
//! documents the on-disk layout it assumes, which must be version-checked
//! against the dataset release in use.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::{Sensor, SensorRecording, SensorStream};

pub const GENERIC_HEADER: [&str; 7] =
    ["user_id", "session_id", "sensor", "timestamp_ms", "x", "y", "z"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaTag {
    Generic,
    Hmog,
    Brainrun,
    Idnet,
    Synthetic,
}

/// On-disk dataset description: `{schema, root, users:[{id, sessions:[..]}]}`.
/// Session paths are relative to `root`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: SchemaTag,
    pub root: PathBuf,
    pub users: Vec<UserEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEntry {
    pub id: String,
    pub sessions: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for user in &self.users {
            if !seen.insert(&user.id) {
                return Err(Error::data(format!("duplicate user id {}", user.id)));
            }
        }
        Ok(())
    }

    pub fn user(&self, id: &str) -> Result<&UserEntry> {
        self.users
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::data(format!("user {id} not in manifest")))
    }
}

#[derive(Debug, Clone)]
pub struct UserRecordings {
    pub user_id: String,
    pub recordings: Vec<SensorRecording>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub rejected_rows: usize,
    pub duplicate_timestamps: usize,
    pub skipped_sessions: usize,
}

// ---------------------------------------------------------------------------
// Generic CSV
// ---------------------------------------------------------------------------

struct RawStreams {
    per_sensor: BTreeMap<&'static str, Vec<(i64, [f64; 3])>>,
}

/// Parse a generic-schema CSV into one recording per (user, session).
/// Rows group by user and session, sort by timestamp, and duplicate
/// timestamps within a stream keep the last row. Rows with an unknown
/// sensor tag are dropped and counted; sessions missing any of the three
/// sensors are skipped and counted (the 12-channel input needs all three).
pub fn load_generic_csv(path: &Path) -> Result<(Vec<SensorRecording>, LoadReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let mut column = [0usize; 7];
    for (i, want) in GENERIC_HEADER.iter().enumerate() {
        column[i] = headers
            .iter()
            .position(|h| h == *want)
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: line 1: missing column `{want}`",
                    path.display()
                ))
            })?;
    }

    let mut report = LoadReport::default();
    let mut groups: BTreeMap<(String, String), RawStreams> = BTreeMap::new();
    for (line_idx, row) in reader.records().enumerate() {
        let line = line_idx + 2; // header is line 1
        let row = row.map_err(|e| Error::data(format!("{}: line {line}: {e}", path.display())))?;
        let field = |i: usize| -> Result<&str> {
            row.get(column[i]).ok_or_else(|| {
                Error::data(format!(
                    "{}: line {line}: missing column `{}`",
                    path.display(),
                    GENERIC_HEADER[i]
                ))
            })
        };
        let sensor_tag = field(2)?;
        let sensor = match Sensor::from_tag(sensor_tag) {
            Some(s) => s,
            None => {
                log::warn!(
                    "{}: line {line}: unknown sensor tag `{sensor_tag}`, row dropped",
                    path.display()
                );
                report.rejected_rows += 1;
                continue;
            }
        };
        let ts: i64 = field(3)?.parse().map_err(|e| {
            Error::data(format!(
                "{}: line {line}: bad timestamp_ms: {e}",
                path.display()
            ))
        })?;
        let mut xyz = [0.0f64; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            *v = field(4 + k)?.parse().map_err(|e| {
                Error::data(format!(
                    "{}: line {line}: bad {}: {e}",
                    path.display(),
                    GENERIC_HEADER[4 + k]
                ))
            })?;
        }
        let key = (field(0)?.to_string(), field(1)?.to_string());
        groups
            .entry(key)
            .or_insert_with(|| RawStreams {
                per_sensor: BTreeMap::new(),
            })
            .per_sensor
            .entry(sensor.tag())
            .or_default()
            .push((ts, xyz));
    }

    let mut recordings = Vec::new();
    for ((user_id, session_id), mut raw) in groups {
        let mut rec = SensorRecording {
            user_id,
            session_id,
            accelerometer: SensorStream::default(),
            gyroscope: SensorStream::default(),
            magnetometer: SensorStream::default(),
        };
        let mut complete = true;
        let (uid, sid) = (rec.user_id.clone(), rec.session_id.clone());
        for sensor in Sensor::ALL {
            match raw.per_sensor.remove(sensor.tag()) {
                Some(mut rows) => {
                    rows.sort_by_key(|&(ts, _)| ts);
                    let stream = rec.stream_mut(sensor);
                    for (ts, xyz) in rows {
                        if stream.timestamps_ms.last() == Some(&(ts as f64)) {
                            // keep the last row for a duplicated timestamp
                            *stream.samples.last_mut().unwrap() = xyz;
                            report.duplicate_timestamps += 1;
                            log::warn!(
                                "{}: duplicate timestamp {ts} in {uid}/{sid} {}",
                                path.display(),
                                sensor.tag()
                            );
                        } else {
                            stream.timestamps_ms.push(ts as f64);
                            stream.samples.push(xyz);
                        }
                    }
                }
                None => complete = false,
            }
        }
        if complete {
            rec.validate()?;
            recordings.push(rec);
        } else {
            report.skipped_sessions += 1;
            log::warn!(
                "{}: session {}/{} lacks a sensor, skipped",
                path.display(),
                rec.user_id,
                rec.session_id
            );
        }
    }
    Ok((recordings, report))
}

/// Write recordings in the generic schema. Timestamps are written as
/// integer milliseconds (rounded); axis values round-trip exactly through
/// the shortest-representation float format.
pub fn write_generic_csv(path: &Path, recordings: &[SensorRecording]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(GENERIC_HEADER)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for rec in recordings {
        for sensor in Sensor::ALL {
            let stream = rec.stream(sensor);
            for (t, s) in stream.timestamps_ms.iter().zip(stream.samples.iter()) {
                writer
                    .write_record([
                        rec.user_id.as_str(),
                        rec.session_id.as_str(),
                        sensor.tag(),
                        &format!("{}", t.round() as i64),
                        &format!("{}", s[0]),
                        &format!("{}", s[1]),
                        &format!("{}", s[2]),
                    ])
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            }
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Public-dataset adapters
// ---------------------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn push_sorted_dedup(stream: &mut SensorStream, mut rows: Vec<(f64, [f64; 3])>) {
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (ts, xyz) in rows {
        if stream.timestamps_ms.last() == Some(&ts) {
            *stream.samples.last_mut().unwrap() = xyz;
        } else {
            stream.timestamps_ms.push(ts);
            stream.samples.push(xyz);
        }
    }
}

/// Hand-movement dataset layout: one directory per session containing
/// `Accelerometer.csv`, `Gyroscope.csv`, `Magnetometer.csv`, each headerless
/// with columns `systime_ms,event_time,activity_id,x,y,z,orientation`.
/// `systime_ms` becomes the timestamp.
pub fn load_hmog_session(user_id: &str, dir: &Path) -> Result<SensorRecording> {
    let mut rec = SensorRecording {
        user_id: user_id.to_string(),
        session_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "session".into()),
        accelerometer: SensorStream::default(),
        gyroscope: SensorStream::default(),
        magnetometer: SensorStream::default(),
    };
    for (sensor, file) in [
        (Sensor::Accelerometer, "Accelerometer.csv"),
        (Sensor::Gyroscope, "Gyroscope.csv"),
        (Sensor::Magnetometer, "Magnetometer.csv"),
    ] {
        let path = dir.join(file);
        let mut rows = Vec::new();
        for (i, line) in read_lines(&path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 6 {
                return Err(Error::data(format!(
                    "{}: line {}: expected >= 6 columns, got {}",
                    path.display(),
                    i + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse().map_err(|e| {
                    Error::data(format!("{}: line {}: bad {what}: {e}", path.display(), i + 1))
                })
            };
            let ts = parse(fields[0], "systime")?;
            rows.push((
                ts,
                [
                    parse(fields[3], "x")?,
                    parse(fields[4], "y")?,
                    parse(fields[5], "z")?,
                ],
            ));
        }
        push_sorted_dedup(rec.stream_mut(sensor), rows);
    }
    rec.validate()?;
    Ok(rec)
}

/// Gesture-capture dataset layout: one JSON file per session shaped
/// `{"accelerometer": [{"timestamp": ms, "x":, "y":, "z":}, ...],
///   "gyroscope": [...], "magnetometer": [...]}`.
pub fn load_brainrun_session(user_id: &str, path: &Path) -> Result<SensorRecording> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut rec = SensorRecording {
        user_id: user_id.to_string(),
        session_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "session".into()),
        accelerometer: SensorStream::default(),
        gyroscope: SensorStream::default(),
        magnetometer: SensorStream::default(),
    };
    for (sensor, key) in [
        (Sensor::Accelerometer, "accelerometer"),
        (Sensor::Gyroscope, "gyroscope"),
        (Sensor::Magnetometer, "magnetometer"),
    ] {
        let entries = value
            .get(key)
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::data(format!("{}: missing array `{key}`", path.display())))?;
        let mut rows = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let get = |name: &str| -> Result<f64> {
                e.get(name).and_then(|v| v.as_f64()).ok_or_else(|| {
                    Error::data(format!(
                        "{}: {key}[{i}]: missing numeric `{name}`",
                        path.display()
                    ))
                })
            };
            rows.push((get("timestamp")?, [get("x")?, get("y")?, get("z")?]));
        }
        push_sorted_dedup(rec.stream_mut(sensor), rows);
    }
    rec.validate()?;
    Ok(rec)
}

/// Gait dataset layout: one directory per walk session containing
/// `*_accelerometer.txt`, `*_gyroscope.txt`, `*_magnetometer.txt`, each with
/// whitespace-separated `timestamp_ns x y z` rows; timestamps convert from
/// nanoseconds to milliseconds.
pub fn load_idnet_session(user_id: &str, dir: &Path) -> Result<SensorRecording> {
    let mut rec = SensorRecording {
        user_id: user_id.to_string(),
        session_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "session".into()),
        accelerometer: SensorStream::default(),
        gyroscope: SensorStream::default(),
        magnetometer: SensorStream::default(),
    };
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut found: BTreeMap<&'static str, PathBuf> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        for (needle, sensor) in [
            ("accelerometer", Sensor::Accelerometer),
            ("gyroscope", Sensor::Gyroscope),
            ("magnetometer", Sensor::Magnetometer),
        ] {
            if name.contains(needle) {
                found.insert(sensor.tag(), entry.path());
            }
        }
    }
    for sensor in Sensor::ALL {
        let path = found.get(sensor.tag()).ok_or_else(|| {
            Error::data(format!(
                "{}: no {} file in session directory",
                dir.display(),
                sensor.tag()
            ))
        })?;
        let mut rows = Vec::new();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::data(format!(
                    "{}: line {}: expected 4 columns, got {}",
                    path.display(),
                    i + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|e| {
                    Error::data(format!("{}: line {}: bad {what}: {e}", path.display(), i + 1))
                })
            };
            let ts_ns = parse(fields[0], "timestamp_ns")?;
            rows.push((
                ts_ns / 1e6,
                [
                    parse(fields[1], "x")?,
                    parse(fields[2], "y")?,
                    parse(fields[3], "z")?,
                ],
            ));
        }
        push_sorted_dedup(rec.stream_mut(sensor), rows);
    }
    rec.validate()?;
    Ok(rec)
}

/// Load every user's sessions per the manifest's schema tag.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<UserRecordings>> {
    manifest.validate()?;
    let mut out = Vec::with_capacity(manifest.users.len());
    for user in &manifest.users {
        let mut recordings = Vec::new();
        for session in &user.sessions {
            let path = manifest.root.join(session);
            if !path.exists() {
                return Err(Error::data(format!(
                    "manifest references missing path {}",
                    path.display()
                )));
            }
            match manifest.schema {
                SchemaTag::Generic | SchemaTag::Synthetic => {
                    let (mut recs, _) = load_generic_csv(&path)?;
                    // a generic file may hold several sessions; keep this user's
                    recs.retain(|r| r.user_id == user.id);
                    recordings.extend(recs);
                }
                SchemaTag::Hmog => recordings.push(load_hmog_session(&user.id, &path)?),
                SchemaTag::Brainrun => recordings.push(load_brainrun_session(&user.id, &path)?),
                SchemaTag::Idnet => recordings.push(load_idnet_session(&user.id, &path)?),
            }
        }
        out.push(UserRecordings {
            user_id: user.id.clone(),
            recordings,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// One synthetic user: a sinusoid bank per raw channel plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUserSpec {
    pub user_id: String,
    pub seed: u64,
    /// 9 banks (acc xyz, gyr xyz, mag xyz); each component is
    /// `(frequency_hz, amplitude, phase_radians)`.
    pub channel_banks: Vec<Vec<(f64, f64, f64)>>,
    pub noise_std: f64,
    pub rate_hz: f64,
    pub duration_s: f64,
}

impl SyntheticUserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channel_banks.len() != 9 {
            return Err(Error::config(format!(
                "expected 9 channel banks, got {}",
                self.channel_banks.len()
            )));
        }
        if !(self.duration_s > 0.0) || !(self.rate_hz > 0.0) {
            return Err(Error::config("duration and rate must be positive"));
        }
        for bank in &self.channel_banks {
            for &(f, _, _) in bank {
                if !(f > 0.0 && f < self.rate_hz / 2.0) {
                    return Err(Error::config(format!(
                        "sinusoid frequency {f} outside (0, {})",
                        self.rate_hz / 2.0
                    )));
                }
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Deterministic per-seed synthetic recording: each raw channel is its
/// sinusoid-bank sum plus Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticUserSpec, session_id: &str) -> Result<SensorRecording> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    spec.validate()?;
    let count = (spec.duration_s * spec.rate_hz).round() as usize;
    let dt_ms = 1000.0 / spec.rate_hz;
    let mut rec = SensorRecording {
        user_id: spec.user_id.clone(),
        session_id: session_id.to_string(),
        accelerometer: SensorStream::default(),
        gyroscope: SensorStream::default(),
        magnetometer: SensorStream::default(),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    // distinct noise stream per session of the same user
    rng.set_stream(fxhash(session_id));
    let normal = if spec.noise_std > 0.0 {
        Some(rand_distr::Normal::new(0.0, spec.noise_std).expect("valid std"))
    } else {
        None
    };
    for (si, sensor) in Sensor::ALL.iter().enumerate() {
        let stream = rec.stream_mut(*sensor);
        stream.timestamps_ms.reserve(count);
        stream.samples.reserve(count);
        for k in 0..count {
            let t_s = k as f64 / spec.rate_hz;
            let mut frame = [0.0f64; 3];
            for (axis, value) in frame.iter_mut().enumerate() {
                let bank = &spec.channel_banks[si * 3 + axis];
                let mut v = 0.0;
                for &(f, a, p) in bank {
                    v += a * (std::f64::consts::TAU * f * t_s + p).sin();
                }
                if let Some(n) = &normal {
                    v += n.sample(&mut rng);
                }
                *value = v;
            }
            stream.timestamps_ms.push(k as f64 * dt_ms);
            stream.samples.push(frame);
        }
    }
    Ok(rec)
}

fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A whole synthetic dataset: several users, several sessions each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    pub sessions_per_user: usize,
    pub users: Vec<SyntheticUserSpec>,
}

impl SyntheticDatasetSpec {
    /// Desk-scale family: `users` users with disjoint frequency bands
    /// (user u occupies [1 + 2.5u, 1 + 2.5u + 2) Hz across its channels),
    /// sized so each user yields about `windows_per_user` half-second
    /// windows after preprocessing.
    pub fn desk(users: usize, windows_per_user: usize, seed: u64) -> SyntheticDatasetSpec {
        Self::family(users, windows_per_user, seed, 1.0, 2.5, 1)
    }

    /// A second family with a different spectral shape (higher bands and
    /// stacked harmonics), for random-attack protocols.
    pub fn attack_family(users: usize, windows_per_user: usize, seed: u64) -> SyntheticDatasetSpec {
        Self::family(users, windows_per_user, seed, 18.0, 3.0, 3)
    }

    fn family(
        users: usize,
        windows_per_user: usize,
        seed: u64,
        base_hz: f64,
        band_hz: f64,
        harmonics: usize,
    ) -> SyntheticDatasetSpec {
        use rand::Rng as _;
        use rand::SeedableRng;
        let sessions_per_user = 2;
        // margin covers resampling edge loss and window remainders
        let duration_s = (windows_per_user as f64 * 0.5) / sessions_per_user as f64 + 2.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let users = (0..users)
            .map(|u| {
                let lo = base_hz + u as f64 * band_hz;
                let channel_banks = (0..9)
                    .map(|c| {
                        (0..harmonics.max(1))
                            .map(|h| {
                                let f = lo
                                    + (c as f64 / 9.0) * (band_hz * 0.7)
                                    + h as f64 * 0.13
                                    + rng.random_range(0.0..0.05);
                                let a = 1.0 / (1.0 + h as f64) + rng.random_range(0.0..0.2);
                                let p = rng.random_range(0.0..std::f64::consts::TAU);
                                (f, a, p)
                            })
                            .collect()
                    })
                    .collect();
                SyntheticUserSpec {
                    user_id: format!("synth{u:02}"),
                    seed: seed.wrapping_add(u as u64 * 0x9e3779b97f4a7c15),
                    channel_banks,
                    noise_std: 0.05,
                    rate_hz: 100.0,
                    duration_s,
                }
            })
            .collect();
        SyntheticDatasetSpec {
            seed,
            sessions_per_user,
            users,
        }
    }

    /// Generate all recordings in memory, grouped per user.
    pub fn generate(&self) -> Result<Vec<UserRecordings>> {
        self.users
            .iter()
            .map(|user| {
                let recordings = (0..self.sessions_per_user)
                    .map(|s| generate_synthetic(user, &format!("session{s:02}")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(UserRecordings {
                    user_id: user.user_id.clone(),
                    recordings,
                })
            })
            .collect()
    }
}

/// Write a synthetic dataset under `dir` in the generic schema (one CSV per
/// user and session) plus a `manifest.json`; byte-deterministic per spec.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticDatasetSpec) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = DatasetManifest {
        schema: SchemaTag::Synthetic,
        root: dir.to_path_buf(),
        users: Vec::new(),
    };
    for user in &spec.users {
        let user_dir = dir.join(&user.user_id);
        fs::create_dir_all(&user_dir).map_err(|e| Error::io(user_dir.display().to_string(), e))?;
        let mut sessions = Vec::new();
        for s in 0..spec.sessions_per_user {
            let session_id = format!("session{s:02}");
            let rec = generate_synthetic(user, &session_id)?;
            let rel = PathBuf::from(&user.user_id).join(format!("{session_id}.csv"));
            write_generic_csv(&dir.join(&rel), std::slice::from_ref(&rec))?;
            sessions.push(rel);
        }
        manifest.users.push(UserEntry {
            id: user.user_id.clone(),
            sessions,
        });
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
