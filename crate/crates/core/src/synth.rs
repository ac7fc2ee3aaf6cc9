//! Synthetic datasets with spatially localized spike events.
//!
//! Sensors sit on a Fibonacci lattice over a hemisphere. Background activity
//! is pink (1/f) noise, standardized per channel. Positive clips carry one
//! biphasic transient that appears simultaneously on a contiguous patch of
//! `spread` sensors. Negative clips may carry the same number of isolated,
//! unsynchronized transients on random sensors, so that only the spatial
//! arrangement separates the classes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::{
    write_recording, DatasetManifest, ManifestEntry, Recording, Sensor, SensorArray, Split,
};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sensors: usize,
    pub components: usize,
    pub sample_rate_hz: f64,
    pub clip_ms: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of clips in each split carrying a regional spike.
    pub positive_fraction: f64,
    /// Spike peak amplitude over background standard deviation.
    pub snr: f64,
    /// Sensors receiving each regional spike.
    pub spread: usize,
    /// Probability that a negative clip carries isolated transients.
    pub distractor_prob: f64,
    /// Share of background power that is 1/f; the rest is white.
    pub pink_fraction: f64,
    pub width_ms: (f64, f64),
    pub subjects_per_split: (usize, usize, usize),
    /// Head radius in meters.
    pub radius_m: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sensors: 32,
            components: 1,
            sample_rate_hz: 1000.0,
            clip_ms: 128.0,
            n_train: 400,
            n_val: 100,
            n_test: 100,
            positive_fraction: 0.5,
            snr: 4.0,
            spread: 6,
            distractor_prob: 0.5,
            pink_fraction: 1.0,
            width_ms: (20.0, 70.0),
            subjects_per_split: (8, 2, 2),
            radius_m: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn clip_samples(&self) -> Result<usize> {
        samples_for(self.clip_ms, self.sample_rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sensors == 0 || self.components == 0 {
            return Err(Error::Config(
                "need at least one sensor and component".into(),
            ));
        }
        if self.spread == 0 || self.spread > self.n_sensors {
            return Err(Error::Config(format!(
                "spread {} must be in 1..={} (sensor count)",
                self.spread, self.n_sensors
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction)
            || !(0.0..=1.0).contains(&self.distractor_prob)
            || !(0.0..=1.0).contains(&self.pink_fraction)
        {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::Config("snr must be finite and non-negative".into()));
        }
        let (lo, hi) = self.width_ms;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(
                "width range must satisfy 0 < lo <= hi".into(),
            ));
        }
        let t = self.clip_samples()?;
        let longest = spike_support(hi * self.sample_rate_hz / 1000.0 / 6.0);
        if longest >= t {
            return Err(Error::Config(format!(
                "clip of {t} samples cannot hold a {hi} ms spike"
            )));
        }
        let (a, b, c) = self.subjects_per_split;
        if a == 0 || b == 0 || c == 0 {
            return Err(Error::Config(
                "every split needs at least one subject".into(),
            ));
        }
        Ok(())
    }

    fn split_sizes(&self) -> [(Split, usize, usize); 3] {
        let (a, b, c) = self.subjects_per_split;
        [
            (Split::Train, self.n_train, a),
            (Split::Val, self.n_val, b),
            (Split::Test, self.n_test, c),
        ]
    }
}

/// Samples per clip; errors unless `clip_ms` maps to a whole positive count.
pub fn samples_for(clip_ms: f64, sample_rate_hz: f64) -> Result<usize> {
    let t = clip_ms * sample_rate_hz / 1000.0;
    let rounded = t.round();
    if rounded < 1.0 || (t - rounded).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "{clip_ms} ms at {sample_rate_hz} Hz is not a positive whole number of samples"
        )));
    }
    Ok(rounded as usize)
}

/// Sensors on the upper hemisphere, Fibonacci lattice.
pub fn hemisphere_array(n_sensors: usize, components: usize, radius_m: f64) -> Result<SensorArray> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let sensors = (0..n_sensors)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n_sensors as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Sensor {
                id: format!("S{:03}", i + 1),
                x: radius_m * r * phi.cos(),
                y: radius_m * r * phi.sin(),
                z: radius_m * z,
            }
        })
        .collect();
    SensorArray::with_components(sensors, components)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Symmetrized k-nearest-neighbor graph over sensor positions.
pub fn knn_adjacency(positions: &[[f64; 3]], k: usize) -> Vec<BTreeSet<usize>> {
    let n = positions.len();
    let mut adj = vec![BTreeSet::new(); n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            dist2(&positions[i], &positions[a])
                .total_cmp(&dist2(&positions[i], &positions[b]))
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    adj
}

/// Whether `set` induces a connected subgraph of `adj`.
pub fn is_contiguous(set: &[usize], adj: &[BTreeSet<usize>]) -> bool {
    let Some(&start) = set.first() else {
        return true;
    };
    let members: BTreeSet<usize> = set.iter().copied().collect();
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for &u in &adj[v] {
            if members.contains(&u) && seen.insert(u) {
                stack.push(u);
            }
        }
    }
    seen.len() == members.len()
}

/// Grow a connected patch from `center`, always adding the frontier sensor
/// closest to the center. Returns `None` if the component is too small.
pub fn grow_patch(
    center: usize,
    size: usize,
    positions: &[[f64; 3]],
    adj: &[BTreeSet<usize>],
) -> Option<Vec<usize>> {
    let mut patch = vec![center];
    let mut inside = BTreeSet::from([center]);
    while patch.len() < size {
        let next = patch
            .iter()
            .flat_map(|&v| adj[v].iter().copied())
            .filter(|u| !inside.contains(u))
            .min_by(|&a, &b| {
                dist2(&positions[center], &positions[a])
                    .total_cmp(&dist2(&positions[center], &positions[b]))
                    .then(a.cmp(&b))
            })?;
        inside.insert(next);
        patch.push(next);
    }
    Some(patch)
}

fn spike_support(sigma: f64) -> usize {
    // main lobe from -3 sigma, opposite lobe ends at 2.5 sigma + 3 * 1.5 sigma
    (10.0 * sigma).ceil() as usize + 1
}

/// Biphasic transient: a sharp Gaussian followed by a broader one of opposite
/// sign, normalized to unit peak magnitude. `sigma` is in samples.
pub fn spike_waveform(sigma: f64) -> Vec<f64> {
    let sigma = sigma.max(0.5);
    let n = spike_support(sigma);
    let broad = 1.5 * sigma;
    let lag = 2.5 * sigma;
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let tau = i as f64 - 3.0 * sigma;
            (-tau * tau / (2.0 * sigma * sigma)).exp()
                - 0.5 * (-(tau - lag).powi(2) / (2.0 * broad * broad)).exp()
        })
        .collect();
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    w.iter_mut().for_each(|v| *v /= peak);
    w
}

/// Pink noise via a parallel bank of one-pole filters on white noise
/// (Kellet's refined method), standardized to zero mean and unit variance.
/// Unit-variance background: `pink_fraction` of the power is 1/f, the rest white.
fn background<R: Rng>(rng: &mut R, n: usize, pink_fraction: f64) -> Vec<f64> {
    let mut out = pink_noise(rng, n);
    if pink_fraction < 1.0 {
        let (a, b) = (pink_fraction.sqrt(), (1.0 - pink_fraction).sqrt());
        for v in out.iter_mut() {
            let white: f64 = StandardNormal.sample(rng);
            *v = a * *v + b * white;
        }
        standardize(&mut out);
    }
    out
}

fn standardize(out: &mut [f64]) {
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

fn pink_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    const BURN_IN: usize = 512;
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + BURN_IN {
        let white: f64 = StandardNormal.sample(rng);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let pink = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        if i >= BURN_IN {
            out.push(pink);
        }
    }
    standardize(&mut out);
    out
}

/// Ground truth for one generated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub center: usize,
    /// Sensor indices in growth order.
    pub sensors: Vec<usize>,
    pub onset: usize,
    pub width_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub recording: Recording,
    pub label: u8,
    pub event: Option<SpikeEvent>,
    pub split: Split,
    pub index: usize,
}

/// Everything the generator needs that does not change between clips.
pub struct SynthContext {
    pub array: Arc<SensorArray>,
    positions: Vec<[f64; 3]>,
    adjacency: Vec<BTreeSet<usize>>,
    t: usize,
}

impl SynthContext {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let array = Arc::new(hemisphere_array(
            cfg.n_sensors,
            cfg.components,
            cfg.radius_m,
        )?);
        let positions = array.positions();
        let adjacency = knn_adjacency(&positions, 4);
        Ok(SynthContext {
            array,
            positions,
            adjacency,
            t: cfg.clip_samples()?,
        })
    }

    pub fn adjacency(&self) -> &[BTreeSet<usize>] {
        &self.adjacency
    }
}

fn add_transient(row: &mut [f64], wave: &[f64], onset: usize, amplitude: f64) {
    for (i, w) in wave.iter().enumerate() {
        if let Some(v) = row.get_mut(onset + i) {
            *v += amplitude * w;
        }
    }
}

fn generate_one(
    cfg: &SynthConfig,
    ctx: &SynthContext,
    seed: u64,
    split: Split,
    index: usize,
    label: u8,
    subject: &str,
) -> Result<SynthClip> {
    let mut rng = rng_for(seed, split.name(), index as u64);
    let n_ch = ctx.array.n_channels();
    let c = cfg.components;
    let t = ctx.t;
    let mut rows: Vec<Vec<f64>> = (0..n_ch)
        .map(|_| background(&mut rng, t, cfg.pink_fraction))
        .collect();
    let table = ctx.array.channel_table();
    let samples_per_ms = cfg.sample_rate_hz / 1000.0;
    let draw_width = |rng: &mut rand_chacha::ChaCha8Rng| {
        let (lo, hi) = cfg.width_ms;
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };

    let mut event = None;
    if label == 1 {
        let width = draw_width(&mut rng);
        let wave = spike_waveform(width * samples_per_ms / 6.0);
        let onset = rng.gen_range(0..=t - wave.len());
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        // a center whose connected component is large enough always exists
        // for the lattice geometries used here; scan deterministically otherwise
        let first = rng.gen_range(0..cfg.n_sensors);
        let (center, patch) = (0..cfg.n_sensors)
            .map(|k| (first + k) % cfg.n_sensors)
            .find_map(|s| grow_patch(s, cfg.spread, &ctx.positions, &ctx.adjacency).map(|p| (s, p)))
            .ok_or_else(|| Error::Config("no connected sensor patch of requested spread".into()))?;
        let gains: Vec<f64> = (0..patch.len())
            .map(|r| {
                if patch.len() > 1 {
                    1.0 - 0.4 * r as f64 / (patch.len() - 1) as f64
                } else {
                    1.0
                }
            })
            .collect();
        let comp_gain: Vec<f64> = (0..c).map(|_| rng.gen_range(0.7..1.0)).collect();
        for (&s, g) in patch.iter().zip(&gains) {
            for k in 0..c {
                add_transient(
                    &mut rows[table[s][k]],
                    &wave,
                    onset,
                    sign * cfg.snr * g * comp_gain[k],
                );
            }
        }
        event = Some(SpikeEvent {
            center,
            sensors: patch,
            onset,
            width_ms: width,
        });
    } else if rng.gen_bool(cfg.distractor_prob) {
        let mut sensors: Vec<usize> = (0..cfg.n_sensors).collect();
        sensors.shuffle(&mut rng);
        for &s in sensors.iter().take(cfg.spread) {
            let width = draw_width(&mut rng);
            let wave = spike_waveform(width * samples_per_ms / 6.0);
            let onset = rng.gen_range(0..=t - wave.len());
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * cfg.snr * rng.gen_range(0.6..1.0);
            for k in 0..c {
                add_transient(&mut rows[table[s][k]], &wave, onset, amp);
            }
        }
    }

    let recording = Recording::from_rows(cfg.sample_rate_hz, subject, ctx.array.clone(), &rows)?;
    Ok(SynthClip {
        recording,
        label,
        event,
        split,
        index,
    })
}

fn split_labels(n: usize, positive_fraction: f64, seed: u64, split: Split) -> Vec<u8> {
    let n_pos = (n as f64 * positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng_for(seed, &format!("labels-{}", split.name()), 0));
    labels
}

/// Generate every clip in memory. Pure function of `(cfg, seed)`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<(Arc<SensorArray>, Vec<SynthClip>)> {
    let ctx = SynthContext::new(cfg)?;
    let mut clips = Vec::new();
    for (split, n, n_subjects) in cfg.split_sizes() {
        let labels = split_labels(n, cfg.positive_fraction, seed, split);
        for (i, &label) in labels.iter().enumerate() {
            let subject = format!("{}-s{:02}", split.name(), i % n_subjects);
            clips.push(generate_one(cfg, &ctx, seed, split, i, label, &subject)?);
        }
    }
    Ok((ctx.array, clips))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub path: PathBuf,
    pub label: u8,
    pub event: Option<SpikeEvent>,
}

pub struct SynthDataset {
    pub sensor_array: Arc<SensorArray>,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub events: Vec<EventRecord>,
}

/// Generate and write a dataset under `out_dir`:
/// `{train,val,test}.jsonl`, `events.jsonl`, `sensors.json` and one
/// recording container per clip in `clips/`.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<SynthDataset> {
    let (array, clips) = generate(cfg, seed)?;
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;

    let mut manifests = [Split::Train, Split::Val, Split::Test].map(|s| DatasetManifest {
        entries: Vec::new(),
        split: Some(s),
    });
    let mut events = Vec::new();
    for clip in &clips {
        let rel = PathBuf::from(format!(
            "clips/{}_{:05}.meta.json",
            clip.split.name(),
            clip.index
        ));
        write_recording(&clip.recording, &out_dir.join(&rel))?;
        let m = match clip.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        manifests[m].entries.push(ManifestEntry {
            path: rel.clone(),
            label: clip.label,
            subject: clip.recording.subject_id.clone(),
        });
        events.push(EventRecord {
            path: rel,
            label: clip.label,
            event: clip.event.clone(),
        });
    }
    for m in &manifests {
        let split = m.split.expect("split set above");
        m.save(&out_dir.join(format!("{}.jsonl", split.name())))?;
    }
    let ev_path = out_dir.join("events.jsonl");
    let mut lines = String::new();
    for e in &events {
        lines.push_str(&serde_json::to_string(e).map_err(|err| Error::json(&ev_path, err))?);
        lines.push('\n');
    }
    fs::write(&ev_path, lines).map_err(|e| Error::io(&ev_path, e))?;
    let sensors_path = out_dir.join("sensors.json");
    let json = serde_json::to_vec_pretty(&*array).map_err(|e| Error::json(&sensors_path, e))?;
    fs::write(&sensors_path, json).map_err(|e| Error::io(&sensors_path, e))?;

    // reload so manifest paths are absolute and verified
    let [train, val, test] = [Split::Train, Split::Val, Split::Test]
        .map(|s| out_dir.join(format!("{}.jsonl", s.name())));
    Ok(SynthDataset {
        sensor_array: array,
        train: DatasetManifest::load(&train)?,
        val: DatasetManifest::load(&val)?,
        test: DatasetManifest::load(&test)?,
        events,
    })
}

pub fn load_sensor_array(path: &Path) -> Result<SensorArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let array: SensorArray = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    array.validate()?;
    Ok(array)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_sensors: 20,
            n_train: 12,
            n_val: 4,
            n_test: 4,
            subjects_per_split: (3, 1, 1),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_positive_fraction_gives_all_negative() {
        let cfg = SynthConfig {
            positive_fraction: 0.0,
            ..small()
        };
        let (_, clips) = generate(&cfg, 3).unwrap();
        assert!(clips.iter().all(|c| c.label == 0 && c.event.is_none()));
    }

    #[test]
    fn spread_larger_than_array_is_config_error() {
        let cfg = SynthConfig {
            spread: 21,
            ..small()
        };
        assert!(matches!(generate(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(&cfg, 11, a.path()).unwrap();
        synth_dataset(&cfg, 11, b.path()).unwrap();
        for name in [
            "train.jsonl",
            "events.jsonl",
            "clips/train_00003.f32",
            "clips/test_00001.f32",
        ] {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
    }

    #[test]
    fn labels_balanced_and_subjects_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&small(), 5, dir.path()).unwrap();
        let pos = ds.train.entries.iter().filter(|e| e.label == 1).count();
        assert_eq!(pos, 6);
        let train = ds.train.subjects();
        assert!(ds.test.subjects().is_disjoint(&train));
        assert!(ds.val.subjects().is_disjoint(&train));
    }

    #[test]
    fn injected_patches_are_contiguous() {
        let cfg = SynthConfig {
            n_sensors: 64,
            n_train: 40,
            n_val: 1,
            n_test: 1,
            ..SynthConfig::default()
        };
        let ctx = SynthContext::new(&cfg).unwrap();
        let (_, clips) = generate(&cfg, 2).unwrap();
        let mut seen = 0;
        for clip in clips.iter().filter(|c| c.label == 1) {
            let ev = clip.event.as_ref().unwrap();
            assert_eq!(ev.sensors.len(), 6);
            assert!(is_contiguous(&ev.sensors, ctx.adjacency()));
            seen += 1;
        }
        assert!(seen > 0);
    }

    #[test]
    fn waveform_is_biphasic_with_unit_peak() {
        let w = spike_waveform(3.0);
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        let min = w.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(min < -0.1);
    }

    #[test]
    fn hemisphere_points_lie_on_sphere() {
        let arr = hemisphere_array(50, 1, 0.1).unwrap();
        for s in &arr.sensors {
            let r = (s.x * s.x + s.y * s.y + s.z * s.z).sqrt();
            assert!((r - 0.1).abs() < 1e-12);
            assert!(s.z > 0.0);
        }
    }

    #[test]
    fn clip_length_must_be_whole_samples() {
        assert_eq!(samples_for(300.0, 1000.0).unwrap(), 300);
        assert!(samples_for(1.0, 250.0).is_err());
    }
}
