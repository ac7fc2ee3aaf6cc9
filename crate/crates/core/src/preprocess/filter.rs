//! IIR filtering: Butterworth band-pass and biquad notch, applied as biquad
//! cascades, optionally zero-phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::Recording;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass { low_hz: f64, high_hz: f64 },
    Notch { center_hz: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    /// Butterworth order of each edge for band-pass; ignored for notch.
    pub order: usize,
    pub zero_phase: bool,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass { low_hz, high_hz },
            order: 4,
            zero_phase: true,
        }
    }

    pub fn notch(center_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Notch { center_hz, q: 30.0 },
            order: 2,
            zero_phase: true,
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let nyq = sample_rate_hz / 2.0;
        match self.kind {
            FilterKind::Bandpass { low_hz, high_hz } => {
                if !(0.0 < low_hz && low_hz < high_hz && high_hz < nyq) {
                    return Err(Error::Config(format!(
                        "band-pass needs 0 < low < high < {nyq} Hz, got ({low_hz}, {high_hz})"
                    )));
                }
                if self.order == 0 {
                    return Err(Error::Config("band-pass order must be >= 1".into()));
                }
            }
            FilterKind::Notch { center_hz, q } => {
                if !(0.0 < center_hz && center_hz < nyq) {
                    return Err(Error::Config(format!(
                        "notch needs 0 < center < {nyq} Hz, got {center_hz}"
                    )));
                }
                if !(q > 0.0) {
                    return Err(Error::Config(format!("notch Q must be positive, got {q}")));
                }
            }
        }
        Ok(())
    }

    /// Design the cascade for a given sample rate.
    pub fn design(&self, sample_rate_hz: f64) -> Result<Cascade> {
        self.validate(sample_rate_hz)?;
        let sections = match self.kind {
            FilterKind::Bandpass { low_hz, high_hz } => {
                let mut s = butterworth(Edge::High, self.order, low_hz, sample_rate_hz);
                s.extend(butterworth(Edge::Low, self.order, high_hz, sample_rate_hz));
                s
            }
            FilterKind::Notch { center_hz, q } => vec![notch(center_hz, q, sample_rate_hz)],
        };
        Ok(Cascade { sections })
    }
}

/// Second-order section in direct form II transposed, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Biquad {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -self.b[1] * s1 - self.b[2] * s2;
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -self.a[0] * s1 - self.a[1] * s2;
        ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
enum Edge {
    Low,
    High,
}

/// Bilinear-transform Butterworth as biquads (plus one first-order section
/// written as a biquad with zero second-order terms when `order` is odd).
fn butterworth(edge: Edge, order: usize, cutoff_hz: f64, fs: f64) -> Vec<Biquad> {
    let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / fs;
    let (sin, cos) = w0.sin_cos();
    let mut out = Vec::new();
    for k in 1..=order / 2 {
        let theta = (2 * k - 1) as f64 * std::f64::consts::PI / (2 * order) as f64;
        let q = 1.0 / (2.0 * theta.sin());
        let alpha = sin / (2.0 * q);
        let b = match edge {
            Edge::Low => [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            Edge::High => [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
        };
        out.push(Biquad::normalized(b, 1.0 + alpha, -2.0 * cos, 1.0 - alpha));
    }
    if order % 2 == 1 {
        let k = (w0 / 2.0).tan();
        let b = match edge {
            Edge::Low => [k, k, 0.0],
            Edge::High => [1.0, -1.0, 0.0],
        };
        out.push(Biquad::normalized(b, 1.0 + k, k - 1.0, 0.0));
    }
    out
}

fn notch(center_hz: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * std::f64::consts::PI * center_hz / fs;
    let (sin, cos) = w0.sin_cos();
    let alpha = sin / (2.0 * q);
    Biquad::normalized([1.0, -2.0 * cos, 1.0], 1.0 + alpha, -2.0 * cos, 1.0 - alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub sections: Vec<Biquad>,
}

impl Cascade {
    pub fn order(&self) -> usize {
        self.sections
            .iter()
            .map(|s| if s.a[1] == 0.0 && s.b[2] == 0.0 { 1 } else { 2 })
            .sum()
    }

    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        self.sections
            .iter()
            .map(|s| s.magnitude(freq_hz, fs))
            .product()
    }

    /// Causal filtering. State starts at the steady state for a constant
    /// input equal to `x[0]`, which removes the start-up step transient.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut level = x.first().copied().unwrap_or(0.0);
        for s in &self.sections {
            let out_level = s.dc_gain() * level;
            let mut z2 = s.b[2] * level - s.a[1] * out_level;
            let mut z1 = out_level - s.b[0] * level;
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[0] * out + z2;
                z2 = s.b[2] * input - s.a[1] * out;
                *v = out;
            }
            level = out_level;
        }
        y
    }

    /// Zero-phase filtering: the forward-then-backward and
    /// backward-then-forward passes over an odd-reflected extension are
    /// averaged, so the operator commutes exactly with time reversal.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * self.order()).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let reversed = |v: Vec<f64>| -> Vec<f64> { v.into_iter().rev().collect() };
        // forward, then backward
        let fb = reversed(self.filter(&reversed(self.filter(&ext))));
        // backward, then forward
        let bf = self.filter(&reversed(self.filter(&reversed(ext))));
        fb.iter()
            .zip(&bf)
            .skip(pad)
            .take(n)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn apply(&self, x: &[f64], zero_phase: bool) -> Vec<f64> {
        if zero_phase {
            self.filtfilt(x)
        } else {
            self.filter(x)
        }
    }
}

/// Filter every channel of a recording.
pub fn apply_filter(rec: &Recording, spec: &FilterSpec) -> Result<Recording> {
    let cascade = spec.design(rec.sample_rate_hz)?;
    let rows: Vec<Vec<f64>> = rec
        .rows_f64()
        .iter()
        .map(|row| cascade.apply(row, spec.zero_phase))
        .collect();
    Recording::from_rows(
        rec.sample_rate_hz,
        rec.subject_id.clone(),
        rec.sensor_array.clone(),
        &rows,
    )
}
