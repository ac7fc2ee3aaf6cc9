//! Clip to `(g, l, t, c)` tensor encoding, and padding of 4D maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::Clip;
use crate::spatial::ClusterLayout;

/// An encoded clip. Slot `(r, s)` of the layout holds the `c` channels of
/// its sensor; empty slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    /// `(g, l, t, c)`
    pub dims: [usize; 4],
    /// Row-major over `(g, l, t, c)`.
    pub values: Vec<f32>,
    pub label: Option<u8>,
    pub layout_hash: String,
}

impl ClipTensor {
    pub fn index(&self, r: usize, s: usize, j: usize, k: usize) -> usize {
        let [_, l, t, c] = self.dims;
        ((r * l + s) * t + j) * c + k
    }

    pub fn get(&self, r: usize, s: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(r, s, j, k)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn encode_clip(clip: &Clip, layout: &ClusterLayout) -> Result<ClipTensor> {
    let array = &clip.sensor_array;
    if array.n_sensors() != layout.n_sensors()
        || array
            .sensors
            .iter()
            .zip(&layout.sensor_ids)
            .any(|(s, id)| &s.id != id)
    {
        return Err(Error::Validation(format!(
            "clip sensors ({}) do not match layout sensors ({})",
            array.n_sensors(),
            layout.n_sensors()
        )));
    }
    let c = array.components();
    let t = clip.t;
    if clip.data.len() != array.n_channels() * t {
        return Err(Error::Validation(format!(
            "clip holds {} values, expected {} channels x {t}",
            clip.data.len(),
            array.n_channels()
        )));
    }
    let table = array.channel_table();
    let dims = [layout.g(), layout.l, t, c];
    let mut values = vec![0.0f32; dims.iter().product()];
    for (r, row) in layout.rows.iter().enumerate() {
        for (s, slot) in row.iter().enumerate() {
            let Some(m) = slot else { continue };
            for (k, &ch) in table[*m].iter().enumerate() {
                let src = clip.channel(ch);
                let base = ((r * layout.l + s) * t) * c + k;
                for (j, &v) in src.iter().enumerate() {
                    values[base + j * c] = v;
                }
            }
        }
    }
    Ok(ClipTensor {
        dims,
        values,
        label: clip.label,
        layout_hash: layout.hash(),
    })
}

/// Invert `encode_clip`: channel-major rows in the sensor array's order.
pub fn decode_clip(tensor: &ClipTensor, layout: &ClusterLayout, table: &[Vec<usize>]) -> Vec<f32> {
    let [_, _, t, c] = tensor.dims;
    let n_channels = table.len() * c;
    let mut data = vec![0.0f32; n_channels * t];
    for (r, row) in layout.rows.iter().enumerate() {
        for (s, slot) in row.iter().enumerate() {
            let Some(m) = slot else { continue };
            for (k, &ch) in table[*m].iter().enumerate() {
                for j in 0..t {
                    data[ch * t + j] = tensor.get(r, s, j, k);
                }
            }
        }
    }
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Circular,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimPad {
    pub mode: PadMode,
    pub before: usize,
    pub after: usize,
}

impl DimPad {
    pub const NONE: DimPad = DimPad {
        mode: PadMode::Zero,
        before: 0,
        after: 0,
    };

    pub fn zero(w: usize) -> Self {
        DimPad {
            mode: PadMode::Zero,
            before: w,
            after: w,
        }
    }

    pub fn circular(w: usize) -> Self {
        DimPad {
            mode: PadMode::Circular,
            before: w,
            after: w,
        }
    }

    pub fn total(&self) -> usize {
        self.before + self.after
    }

    /// Source index for padded position `p` of a dimension of size `n`.
    pub fn source(&self, p: usize, n: usize) -> Option<usize> {
        let i = p as isize - self.before as isize;
        if (0..n as isize).contains(&i) {
            return Some(i as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Circular => Some(i.rem_euclid(n as isize) as usize),
        }
    }
}

/// Padding for the cluster, slot and time dimensions. The depth dimension is
/// never padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    pub g: DimPad,
    pub l: DimPad,
    pub t: DimPad,
}

impl PadSpec {
    pub const NONE: PadSpec = PadSpec {
        g: DimPad::NONE,
        l: DimPad::NONE,
        t: DimPad::NONE,
    };

    /// Circular on clusters, zero on slots and time.
    pub fn spatial(g: usize, l: usize, t: usize) -> Self {
        PadSpec {
            g: DimPad::circular(g),
            l: DimPad::zero(l),
            t: DimPad::zero(t),
        }
    }

    pub fn time_only(t: usize) -> Self {
        PadSpec {
            t: DimPad::zero(t),
            ..PadSpec::NONE
        }
    }

    pub fn dims(&self) -> [DimPad; 3] {
        [self.g, self.l, self.t]
    }
}

/// Pad a row-major `(g, l, t, c)` array.
pub fn pad(values: &[f64], dims: [usize; 4], spec: &PadSpec) -> (Vec<f64>, [usize; 4]) {
    let [g, l, t, c] = dims;
    let out_dims = [
        g + spec.g.total(),
        l + spec.l.total(),
        t + spec.t.total(),
        c,
    ];
    let mut out = vec![0.0; out_dims.iter().product()];
    for pg in 0..out_dims[0] {
        let Some(sg) = spec.g.source(pg, g) else {
            continue;
        };
        for pl in 0..out_dims[1] {
            let Some(sl) = spec.l.source(pl, l) else {
                continue;
            };
            for pt in 0..out_dims[2] {
                let Some(st) = spec.t.source(pt, t) else {
                    continue;
                };
                let dst = ((pg * out_dims[1] + pl) * out_dims[2] + pt) * c;
                let src = ((sg * l + sl) * t + st) * c;
                out[dst..dst + c].copy_from_slice(&values[src..src + c]);
            }
        }
    }
    (out, out_dims)
}

/// Cached encoded clip: 16-byte header of four little-endian `u32` dims
/// followed by `f32` values in `(g, l, t, c)` row-major order.
pub fn write_tensor(tensor: &ClipTensor, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + tensor.values.len() * 4);
    for d in tensor.dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in &tensor.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "tensor file shorter than its header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let b = &bytes[i * 4..i * 4 + 4];
        *d = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    }
    let n: usize = dims.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!(
                "header declares {n} values, payload holds {}",
                (bytes.len() - 16) / 4
            ),
        ));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, values))
}
