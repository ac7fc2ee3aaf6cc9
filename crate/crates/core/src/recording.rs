//! Portable recording container and dataset manifests.
//!
//! A recording lives in two files next to each other: `<name>.meta.json`
//! holds the sensor geometry and sizes, `<name>.f32` holds the samples as
//! little-endian `f32`, channel-major (all samples of channel 0, then channel
//! 1, ...).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Sensor {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub channel_id: String,
    pub sensor_index: usize,
    pub component_index: usize,
}

/// Sensor positions plus the channel-to-sensor map. Every sensor carries the
/// same number `c` of channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub sensors: Vec<Sensor>,
    pub channels: Vec<Channel>,
}

impl SensorArray {
    /// Build an array where sensor `m` owns channels `m*c .. m*c + c`.
    pub fn with_components(sensors: Vec<Sensor>, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config("components per sensor must be >= 1".into()));
        }
        let channels = sensors
            .iter()
            .enumerate()
            .flat_map(|(m, s)| {
                (0..c).map(move |k| Channel {
                    channel_id: format!("{}-{}", s.id, k),
                    sensor_index: m,
                    component_index: k,
                })
            })
            .collect();
        let array = SensorArray { sensors, channels };
        array.validate()?;
        Ok(array)
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Signals per sensor.
    pub fn components(&self) -> usize {
        if self.sensors.is_empty() {
            0
        } else {
            self.channels.len() / self.sensors.len()
        }
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.sensors.iter().map(Sensor::position).collect()
    }

    /// `table[sensor][component]` = channel row index.
    pub fn channel_table(&self) -> Vec<Vec<usize>> {
        let c = self.components();
        let mut table = vec![vec![usize::MAX; c]; self.sensors.len()];
        for (row, ch) in self.channels.iter().enumerate() {
            table[ch.sensor_index][ch.component_index] = row;
        }
        table
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(Error::Validation("sensor array has no sensors".into()));
        }
        for s in &self.sensors {
            if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite()) {
                return Err(Error::Validation(format!(
                    "sensor {} has non-finite coordinates",
                    s.id
                )));
            }
        }
        let n = self.sensors.len();
        if self.channels.len() % n != 0 {
            return Err(Error::Validation(format!(
                "{} channels cannot be split evenly over {} sensors",
                self.channels.len(),
                n
            )));
        }
        let c = self.channels.len() / n;
        let mut seen = vec![vec![false; c]; n];
        for ch in &self.channels {
            if ch.sensor_index >= n {
                return Err(Error::Validation(format!(
                    "channel {} references sensor {} (only {} sensors)",
                    ch.channel_id, ch.sensor_index, n
                )));
            }
            if ch.component_index >= c {
                return Err(Error::Validation(format!(
                    "channel {} has component {} but c = {}",
                    ch.channel_id, ch.component_index, c
                )));
            }
            let slot = &mut seen[ch.sensor_index][ch.component_index];
            if *slot {
                return Err(Error::Validation(format!(
                    "sensor {} component {} assigned twice",
                    ch.sensor_index, ch.component_index
                )));
            }
            *slot = true;
        }
        Ok(())
    }
}

/// A multi-channel recording, `n` channels by `T` samples, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate_hz: f64,
    pub subject_id: String,
    pub sensor_array: Arc<SensorArray>,
    n_samples: usize,
    data: Vec<f32>,
}

impl Recording {
    pub fn new(
        sample_rate_hz: f64,
        subject_id: impl Into<String>,
        sensor_array: Arc<SensorArray>,
        n_samples: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if n_samples == 0 {
            return Err(Error::Data(
                "recording must hold at least one sample".into(),
            ));
        }
        sensor_array.validate()?;
        let expected = sensor_array.n_channels() * n_samples;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "expected {} values ({} channels x {} samples), got {}",
                expected,
                sensor_array.n_channels(),
                n_samples,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite sample at channel {} index {}",
                i / n_samples,
                i % n_samples
            )));
        }
        Ok(Recording {
            sample_rate_hz,
            subject_id: subject_id.into(),
            sensor_array,
            n_samples,
            data,
        })
    }

    /// Build from per-channel `f64` rows, rounding to the stored precision.
    pub fn from_rows(
        sample_rate_hz: f64,
        subject_id: impl Into<String>,
        sensor_array: Arc<SensorArray>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let n_samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(Error::Shape("channel rows differ in length".into()));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(sample_rate_hz, subject_id, sensor_array, n_samples, data)
    }

    pub fn n_channels(&self) -> usize {
        self.sensor_array.n_channels()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.n_channels())
            .map(|i| self.channel(i).iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    pub fn duration_ms(&self) -> f64 {
        self.n_samples as f64 * 1000.0 / self.sample_rate_hz
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordingMeta {
    sample_rate_hz: f64,
    subject_id: String,
    sensors: Vec<Sensor>,
    channels: Vec<Channel>,
    n_samples: usize,
}

/// Resolve `<name>`, `<name>.meta.json` or `<name>.f32` to the two container
/// files.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".meta.json")
        .or_else(|| s.strip_suffix(".f32"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.meta.json")),
        PathBuf::from(format!("{base}.f32")),
    )
}

pub fn write_recording(rec: &Recording, path: &Path) -> Result<()> {
    let (meta_path, data_path) = container_paths(path);
    if let Some(dir) = meta_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let meta = RecordingMeta {
        sample_rate_hz: rec.sample_rate_hz,
        subject_id: rec.subject_id.clone(),
        sensors: rec.sensor_array.sensors.clone(),
        channels: rec.sensor_array.channels.clone(),
        n_samples: rec.n_samples,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    let mut bytes = Vec::with_capacity(rec.data.len() * 4);
    for v in &rec.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    let (meta_path, data_path) = container_paths(path);
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RecordingMeta =
        serde_json::from_slice(&text).map_err(|e| Error::json(&meta_path, e))?;
    let array = SensorArray {
        sensors: meta.sensors,
        channels: meta.channels,
    };
    array.validate()?;

    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = array.n_channels() * meta.n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &data_path,
            format!(
                "header declares {} channels x {} samples ({} bytes) but payload holds {} bytes",
                array.n_channels(),
                meta.n_samples,
                expected,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Recording::new(
        meta.sample_rate_hz,
        meta.subject_id,
        Arc::new(array),
        meta.n_samples,
        data,
    )
}

/// A fixed-length window cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub sensor_array: Arc<SensorArray>,
    /// Channel-major, `n_channels * t` values.
    pub data: Vec<f32>,
    pub t: usize,
    pub label: Option<u8>,
    pub recording_id: String,
    pub start_sample: usize,
}

impl Clip {
    pub fn n_channels(&self) -> usize {
        self.sensor_array.n_channels()
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.data[i * self.t..(i + 1) * self.t]
    }

    /// Treat a whole recording as one clip.
    pub fn from_recording(rec: &Recording, label: Option<u8>, id: impl Into<String>) -> Self {
        Clip {
            sensor_array: rec.sensor_array.clone(),
            data: rec.data.clone(),
            t: rec.n_samples,
            label,
            recording_id: id.into(),
            start_sample: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<Split>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSONL, one entry per line. Relative clip paths are written as given.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|err| Error::json(path, err))?;
            writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Load a JSONL manifest. Relative clip paths resolve against the
    /// manifest's directory; every referenced clip must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            if entry.label > 1 {
                return Err(Error::format(
                    path,
                    format!("line {}: label {} is not 0 or 1", i + 1, entry.label),
                ));
            }
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            let (meta, _) = container_paths(&entry.path);
            if !meta.exists() {
                return Err(Error::Validation(format!(
                    "manifest {} references missing clip {}",
                    path.display(),
                    meta.display()
                )));
            }
            entries.push(entry);
        }
        let split = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| match s {
                "train" => Some(Split::Train),
                "val" => Some(Split::Val),
                "test" => Some(Split::Test),
                _ => None,
            });
        Ok(DatasetManifest { entries, split })
    }

    pub fn subjects(&self) -> std::collections::BTreeSet<&str> {
        self.entries.iter().map(|e| e.subject.as_str()).collect()
    }

    /// Read every clip listed in the manifest, attaching its label.
    pub fn load_clips(&self) -> Result<Vec<Clip>> {
        self.entries
            .iter()
            .map(|e| {
                let rec = read_recording(&e.path)?;
                Ok(Clip::from_recording(
                    &rec,
                    Some(e.label),
                    e.path.to_string_lossy().into_owned(),
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn array(n: usize, c: usize) -> Arc<SensorArray> {
        let sensors = (0..n)
            .map(|i| Sensor {
                id: format!("S{i:03}"),
                x: i as f64 * 0.01,
                y: 0.0,
                z: 0.05,
            })
            .collect();
        Arc::new(SensorArray::with_components(sensors, c).unwrap())
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arr = array(4, 2);
        let data: Vec<f32> = (0..8 * 5).map(|i| (i as f32).sin() * 1e-3 + 0.1).collect();
        let rec = Recording::new(1000.0, "subj", arr, 5, data).unwrap();
        let path = dir.path().join("r1");
        write_recording(&rec, &path).unwrap();
        let back = read_recording(&path.with_extension("meta.json")).unwrap();
        assert_eq!(rec, back);
        for (a, b) in rec.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn meg_sized_array_is_accepted() {
        let arr = array(102, 3);
        assert_eq!(arr.n_channels(), 306);
        assert_eq!(arr.components(), 3);
        let rec = Recording::new(1000.0, "s", arr, 10, vec![0.0; 3060]).unwrap();
        assert_eq!(rec.n_channels(), 306);
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let arr = array(10, 1);
        let rec = Recording::new(100.0, "s", arr, 3, vec![1.0; 30]).unwrap();
        let path = dir.path().join("r");
        write_recording(&rec, &path).unwrap();
        // drop one channel row from the payload
        let (_, data_path) = container_paths(&path);
        let bytes = fs::read(&data_path).unwrap();
        fs::write(&data_path, &bytes[..9 * 3 * 4]).unwrap();
        match read_recording(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(100.0, "s", array(1, 1), 2, vec![1.0, 2.0]).unwrap();
        let path = dir.path().join("r");
        write_recording(&rec, &path).unwrap();
        let (_, data_path) = container_paths(&path);
        let mut bytes = f32::NAN.to_le_bytes().to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(&data_path, bytes).unwrap();
        assert!(matches!(read_recording(&path), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_sensor_reference_rejected() {
        let mut arr = (*array(2, 1)).clone();
        arr.channels[1].sensor_index = 5;
        assert!(matches!(arr.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_roundtrip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(100.0, "s1", array(1, 1), 2, vec![1.0, 2.0]).unwrap();
        write_recording(&rec, &dir.path().join("clips/c0")).unwrap();
        let manifest = DatasetManifest {
            entries: vec![ManifestEntry {
                path: PathBuf::from("clips/c0.meta.json"),
                label: 1,
                subject: "s1".into(),
            }],
            split: Some(Split::Train),
        };
        let mpath = dir.path().join("train.jsonl");
        manifest.save(&mpath).unwrap();
        let back = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(back.split, Some(Split::Train));
        assert_eq!(back.entries[0].label, 1);
        let clips = back.load_clips().unwrap();
        assert_eq!(clips[0].data, vec![1.0, 2.0]);
        assert_eq!(clips[0].label, Some(1));
    }

    #[test]
    fn manifest_with_missing_clip_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.jsonl");
        fs::write(
            &mpath,
            "{\"path\":\"nope\",\"label\":0,\"subject\":\"a\"}\n",
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(&mpath),
            Err(Error::Validation(_))
        ));
    }
}
