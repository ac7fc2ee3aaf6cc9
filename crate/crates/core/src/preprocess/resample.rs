//! Band-limited resampling with a Kaiser-windowed sinc kernel.

use crate::error::{Error, Result};
use crate::recording::Recording;

const KAISER_BETA: f64 = 8.0;
/// Kernel half-width in zero crossings of the (lower) Nyquist sinc.
const HALF_TAPS: f64 = 16.0;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample one signal from `from_hz` to `to_hz`.
pub fn resample_signal(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(from_hz > 0.0 && to_hz > 0.0) {
        return Err(Error::Config(format!(
            "sample rates must be positive, got {from_hz} -> {to_hz}"
        )));
    }
    if from_hz == to_hz {
        return Ok(x.to_vec());
    }
    let n_out = (x.len() as f64 * to_hz / from_hz).round() as usize;
    let step = from_hz / to_hz;
    // cutoff relative to the input Nyquist
    let cutoff = (to_hz / from_hz).min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let norm = bessel_i0(KAISER_BETA);

    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let center = k as f64 * step;
        let lo = ((center - half_width).ceil().max(0.0)) as usize;
        let hi = ((center + half_width).floor() as isize).min(x.len() as isize - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        if hi >= lo as isize {
            for (j, &v) in x.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let d = j as f64 - center;
                let r = d / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                let w = cutoff * sinc(cutoff * d) * window;
                acc += w * v;
                wsum += w;
            }
        }
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 });
    }
    Ok(out)
}

pub fn resample(rec: &Recording, target_hz: f64) -> Result<Recording> {
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::Config(format!(
            "target sample rate must be positive, got {target_hz}"
        )));
    }
    if target_hz == rec.sample_rate_hz {
        return Ok(rec.clone());
    }
    let rows = rec
        .rows_f64()
        .iter()
        .map(|r| resample_signal(r, rec.sample_rate_hz, target_hz))
        .collect::<Result<Vec<_>>>()?;
    Recording::from_rows(
        target_hz,
        rec.subject_id.clone(),
        rec.sensor_array.clone(),
        &rows,
    )
}
