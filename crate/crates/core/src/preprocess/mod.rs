//! Signal cleaning: resampling, band-pass and notch filtering, FastICA
//! artifact removal and clip segmentation.

mod filter;
mod ica;
mod resample;
mod segment;

use serde::{Deserialize, Serialize};

pub use filter::{apply_filter, Biquad, Cascade, FilterKind, FilterSpec};
pub use ica::{
    excess_kurtosis, fit_fastica, fit_fastica_rows, flag_components, pearson, remove_artifacts,
    remove_artifacts_rows, ArtifactRemoval, ArtifactRule, IcaModel,
};
pub use resample::{resample, resample_signal};
pub use segment::segment;

use crate::error::Result;
use crate::recording::Recording;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaSettings {
    /// Defaults to the channel count.
    pub n_components: Option<usize>,
    pub seed: u64,
    pub rule: ArtifactRule,
}

/// Ordered cleaning chain. Steps left as `None` are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_hz: Option<f64>,
    pub filters: Vec<FilterSpec>,
    pub ica: Option<IcaSettings>,
}

impl PreprocessConfig {
    /// Resample to `target_hz`, band-pass 3-80 Hz, notch 50 Hz, then FastICA.
    pub fn standard(target_hz: f64) -> Self {
        PreprocessConfig {
            target_hz: Some(target_hz),
            filters: vec![FilterSpec::bandpass(3.0, 80.0), FilterSpec::notch(50.0)],
            ica: Some(IcaSettings {
                n_components: None,
                seed: 0,
                rule: ArtifactRule::default(),
            }),
        }
    }
}

/// What one step did, for the provenance record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum AppliedStep {
    Resample {
        from_hz: f64,
        to_hz: f64,
        n_samples: usize,
    },
    Filter {
        spec: FilterSpec,
    },
    Ica {
        n_components: usize,
        converged: bool,
        iterations: usize,
        flagged: Vec<usize>,
    },
}

pub fn run_pipeline(
    rec: &Recording,
    cfg: &PreprocessConfig,
    references: Option<&[Vec<f64>]>,
) -> Result<(Recording, Vec<AppliedStep>)> {
    let mut steps = Vec::new();
    let mut cur = rec.clone();
    if let Some(target) = cfg.target_hz {
        let from = cur.sample_rate_hz;
        cur = resample(&cur, target)?;
        steps.push(AppliedStep::Resample {
            from_hz: from,
            to_hz: target,
            n_samples: cur.n_samples(),
        });
    }
    for spec in &cfg.filters {
        cur = apply_filter(&cur, spec)?;
        steps.push(AppliedStep::Filter { spec: *spec });
    }
    if let Some(ica) = &cfg.ica {
        let k = ica.n_components.unwrap_or(cur.n_channels());
        let model = fit_fastica(&cur, k, ica.seed)?;
        // resampling changes reference length too
        let refs: Option<Vec<Vec<f64>>> = references.map(|r| {
            r.iter()
                .map(|row| match cfg.target_hz {
                    Some(t) if t != rec.sample_rate_hz => {
                        resample_signal(row, rec.sample_rate_hz, t).unwrap_or_default()
                    }
                    _ => row.clone(),
                })
                .collect()
        });
        let out = remove_artifacts(&cur, &model, refs.as_deref(), &ica.rule)?;
        steps.push(AppliedStep::Ica {
            n_components: model.n_components,
            converged: model.converged,
            iterations: model.iterations,
            flagged: out.flagged,
        });
        cur = out.recording;
    }
    Ok((cur, steps))
}
