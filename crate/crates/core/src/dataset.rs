//! Encoded, labelled examples ready for the network.

use crate::encoder::encode_clip;
use crate::error::{Error, Result};
use crate::recording::{Clip, DatasetManifest};
use crate::spatial::ClusterLayout;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(g, l, t, c)` row-major.
    pub input: Vec<f64>,
    pub dims: [usize; 4],
    pub label: u8,
}

pub fn encode_clips(clips: &[Clip], layout: &ClusterLayout) -> Result<Vec<Sample>> {
    clips
        .iter()
        .map(|clip| {
            let label = clip.label.ok_or_else(|| {
                Error::Validation(format!("clip {} has no label", clip.recording_id))
            })?;
            let tensor = encode_clip(clip, layout)?;
            Ok(Sample {
                id: clip.recording_id.clone(),
                input: tensor.to_f64(),
                dims: tensor.dims,
                label,
            })
        })
        .collect()
}

/// Read and encode every clip of a manifest.
pub fn encode_manifest(manifest: &DatasetManifest, layout: &ClusterLayout) -> Result<Vec<Sample>> {
    encode_clips(&manifest.load_clips()?, layout)
}
