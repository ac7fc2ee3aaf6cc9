//! End-to-end runs: synthetic data, clustering, encoding, training and
//! evaluation under one serializable configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{encode_clips, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, grad_cam, youden_threshold, EvalReport, ScoreRow};
use crate::model::{Model, ModelConfig};
use crate::preprocess::PreprocessConfig;
use crate::recording::{Clip, SensorArray};
use crate::seed::derive_seed;
use crate::spatial::{
    build_layout, kmeans, load_layout, permute_layout, ClusterLayout, ClusterResult, IntraStrategy,
    PermutationKind, DEFAULT_RESTARTS,
};
use crate::synth::{synth_dataset, SpikeEvent, SynthConfig, SynthDataset};
use crate::train::{train_loop, TrainConfig, TrainOutcome};

/// How sensors are arranged on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutSource {
    Clustered,
    ShuffleChannels { seed: u64 },
    ShuffleClusters { seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSpec {
    pub g: usize,
    /// Slots per row; `None` uses the largest cluster.
    pub l: Option<usize>,
    pub intra: IntraStrategy,
    pub restarts: usize,
    pub source: LayoutSource,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            g: 8,
            l: None,
            intra: IntraStrategy::Center,
            restarts: DEFAULT_RESTARTS,
            source: LayoutSource::Clustered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Replace `threshold` by the Youden-optimal threshold on validation data.
    pub youden: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            youden: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: Option<PreprocessConfig>,
    pub layout: LayoutSpec,
    /// `input` is filled in from the layout and clip length.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::synthetic()
    }
}

impl ExperimentConfig {
    /// Small synthetic benchmark: 32 single-component sensors at 1 kHz,
    /// 128 ms clips, 8 clusters, compact depth-9 network.
    pub fn synthetic() -> Self {
        let synth = SynthConfig::default();
        ExperimentConfig {
            seed: 1,
            model: ModelConfig::compact([8, 6, 128, 1]),
            train: TrainConfig {
                batch_size: 16,
                epochs: 20,
                ..TrainConfig::default()
            },
            synth,
            preprocess: None,
            layout: LayoutSpec::default(),
            eval: EvalOptions::default(),
        }
    }

    /// 102 triple-component sensors, 13 x 10 grid, 300 ms at 1 kHz, depth 17.
    pub fn meg_like() -> Self {
        ExperimentConfig {
            seed: 1,
            synth: SynthConfig {
                n_sensors: 102,
                components: 3,
                sample_rate_hz: 1000.0,
                clip_ms: 300.0,
                ..SynthConfig::default()
            },
            preprocess: Some(PreprocessConfig::standard(1000.0)),
            layout: LayoutSpec {
                g: 13,
                l: Some(10),
                ..LayoutSpec::default()
            },
            model: ModelConfig::table_one(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }

    /// 19 single-component electrodes, 4 x 5 grid, 2400 ms at 250 Hz.
    pub fn eeg_like() -> Self {
        ExperimentConfig {
            seed: 1,
            synth: SynthConfig {
                n_sensors: 19,
                components: 1,
                sample_rate_hz: 250.0,
                clip_ms: 2400.0,
                spread: 4,
                ..SynthConfig::default()
            },
            preprocess: Some(PreprocessConfig::standard(250.0)),
            layout: LayoutSpec {
                g: 4,
                l: Some(5),
                ..LayoutSpec::default()
            },
            model: ModelConfig {
                input: [4, 5, 600, 1],
                ..ModelConfig::table_one()
            },
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "synthetic" => Ok(Self::synthetic()),
            "meg-like" => Ok(Self::meg_like()),
            "eeg-like" => Ok(Self::eeg_like()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (synthetic, meg-like, eeg-like)"
            ))),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage, 0)
    }
}

/// k-means over sensor positions and the resulting grid. With `l = None`
/// rows get as many slots as the largest cluster.
pub fn cluster_sensors(
    array: &SensorArray,
    g: usize,
    l: Option<usize>,
    intra: IntraStrategy,
    seed: u64,
    restarts: usize,
) -> Result<(ClusterResult, ClusterLayout)> {
    let clusters = kmeans(&array.positions(), g, seed, restarts)?;
    let l = l.unwrap_or_else(|| clusters.sizes().into_iter().max().unwrap_or(1));
    let layout = build_layout(&clusters, array, l, intra, None)?;
    Ok((clusters, layout))
}

/// Resolve a layout spec for `array`.
pub fn make_layout(spec: &LayoutSpec, array: &SensorArray, seed: u64) -> Result<ClusterLayout> {
    if let LayoutSource::File { path } = &spec.source {
        return load_layout(path, array);
    }
    let (_, base) = cluster_sensors(array, spec.g, spec.l, spec.intra, seed, spec.restarts)?;
    Ok(match spec.source {
        LayoutSource::ShuffleChannels { seed } => {
            permute_layout(&base, PermutationKind::ShuffleChannels, seed)
        }
        LayoutSource::ShuffleClusters { seed } => {
            permute_layout(&base, PermutationKind::ShuffleClusters, seed)
        }
        _ => base,
    })
}

/// Loaded clips of every split.
pub struct ClipSets {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
}

impl ClipSets {
    pub fn load(data: &SynthDataset) -> Result<Self> {
        Ok(ClipSets {
            train: data.train.load_clips()?,
            val: data.val.load_clips()?,
            test: data.test.load_clips()?,
        })
    }
}

pub struct RunResult {
    pub layout: ClusterLayout,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub scores: Vec<ScoreRow>,
    pub test: Vec<Sample>,
}

impl RunResult {
    pub fn model(&self) -> &Model {
        &self.outcome.best.model
    }
}

/// Generate the configured synthetic dataset under `dir`.
pub fn prepare_synthetic(cfg: &ExperimentConfig, dir: &Path) -> Result<SynthDataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    synth_dataset(&cfg.synth, cfg.stage_seed("synth"), dir)
}

/// Encode with `layout`, train, then score the test split with the best
/// checkpoint.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    clips: &ClipSets,
    layout: ClusterLayout,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let train = encode_clips(&clips.train, &layout)?;
    let val = encode_clips(&clips.val, &layout)?;
    let test = encode_clips(&clips.test, &layout)?;
    let dims = train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?
        .dims;
    let model_cfg = ModelConfig {
        input: dims,
        ..cfg.model.clone()
    };
    let model = Model::new(model_cfg, derive_seed(cfg.train.seed, "init", 0))?;
    let outcome = train_loop(model, &train, &val, &cfg.train, out_dir)?;
    let best = &outcome.best.model;
    let threshold = if cfg.eval.youden && !val.is_empty() {
        let (_, rows) = evaluate(best, &val, cfg.eval.threshold)?;
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        youden_threshold(&scores, &labels)?
    } else {
        cfg.eval.threshold
    };
    let (report, scores) = evaluate(best, &test, threshold)?;
    Ok(RunResult {
        layout,
        outcome,
        report,
        scores,
        test,
    })
}

/// Grid row holding most of the event's sensors; ties go to the row of the
/// sensor grown first.
pub fn injected_row(event: &SpikeEvent, layout: &ClusterLayout) -> Option<usize> {
    let mut counts = vec![0usize; layout.g()];
    let mut first_seen = vec![usize::MAX; layout.g()];
    for (k, &s) in event.sensors.iter().enumerate() {
        let r = layout.row_of(s)?;
        counts[r] += 1;
        first_seen[r] = first_seen[r].min(k);
    }
    (0..layout.g()).max_by(|&a, &b| {
        counts[a]
            .cmp(&counts[b])
            .then(first_seen[b].cmp(&first_seen[a]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Localization {
    pub hits: usize,
    pub total: usize,
}

impl Localization {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Share of positive samples whose Grad-CAM argmax row is the injected row.
/// Samples are matched to events by clip file name.
pub fn localization(
    model: &Model,
    samples: &[Sample],
    data: &SynthDataset,
    layout: &ClusterLayout,
) -> Result<Localization> {
    let file_name = |p: &Path| p.file_name().map(|n| n.to_os_string());
    let events: std::collections::HashMap<_, _> = data
        .events
        .iter()
        .filter_map(|e| Some((file_name(&e.path)?, e.event.as_ref()?)))
        .collect();
    let mut out = Localization { hits: 0, total: 0 };
    for sample in samples.iter().filter(|s| s.label == 1) {
        let Some(event) = file_name(Path::new(&sample.id)).and_then(|n| events.get(&n)) else {
            continue;
        };
        let Some(row) = injected_row(event, layout) else {
            continue;
        };
        let map = grad_cam(model, &sample.input, 1, &sample.id)?;
        out.total += 1;
        out.hits += usize::from(map.argmax_row() == row);
    }
    Ok(out)
}
