use crate::error::Result;
use crate::recording::{Clip, Recording};
use crate::synth::samples_for;

/// Cut a recording into consecutive non-overlapping clips of `clip_ms`.
/// A trailing partial clip is dropped; a recording shorter than one clip
/// yields no clips.
pub fn segment(rec: &Recording, clip_ms: f64, recording_id: &str) -> Result<Vec<Clip>> {
    let t = samples_for(clip_ms, rec.sample_rate_hz)?;
    let n = rec.n_channels();
    let clips = (0..rec.n_samples() / t)
        .map(|k| {
            let start = k * t;
            let mut data = Vec::with_capacity(n * t);
            for ch in 0..n {
                data.extend_from_slice(&rec.channel(ch)[start..start + t]);
            }
            Clip {
                sensor_array: rec.sensor_array.clone(),
                data,
                t,
                label: None,
                recording_id: recording_id.to_string(),
                start_sample: start,
            }
        })
        .collect();
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::{Sensor, SensorArray};
    use std::sync::Arc;

    fn rec(n_samples: usize) -> Recording {
        let sensors = (0..2)
            .map(|i| Sensor {
                id: format!("S{i}"),
                x: i as f64,
                y: 0.0,
                z: 0.0,
            })
            .collect();
        let arr = Arc::new(SensorArray::with_components(sensors, 1).unwrap());
        let data = (0..2 * n_samples).map(|v| v as f32).collect();
        Recording::new(1000.0, "s", arr, n_samples, data).unwrap()
    }

    #[test]
    fn exact_division() {
        let clips = segment(&rec(900), 300.0, "r").unwrap();
        assert_eq!(clips.len(), 3);
        assert!(clips.iter().all(|c| c.t == 300));
    }

    #[test]
    fn remainder_dropped_and_values_preserved() {
        let r = rec(950);
        let clips = segment(&r, 300.0, "r").unwrap();
        assert_eq!(clips.len(), 3);
        for (k, clip) in clips.iter().enumerate() {
            assert_eq!(clip.start_sample, k * 300);
            for ch in 0..2 {
                assert_eq!(clip.channel(ch), &r.channel(ch)[k * 300..(k + 1) * 300]);
            }
        }
    }

    #[test]
    fn short_recording_gives_no_clips() {
        assert!(segment(&rec(100), 300.0, "r").unwrap().is_empty());
    }

    #[test]
    fn fractional_clip_length_rejected() {
        assert!(segment(&rec(100), 0.5, "r").is_err());
    }
}
