//! 3D cross-correlation over `(G, L, T, C)` maps.
//!
//! The direct loop in [`conv3d_reference`] defines the semantics. The
//! production path lowers to patch extraction plus a matrix product and must
//! agree with the reference to rounding.

use crate::encoder::PadSpec;
use crate::error::{Error, Result};

/// Resolved sizes and padded-index maps for one convolution.
#[derive(Debug, Clone)]
pub struct ConvGeometry {
    pub input: [usize; 4],
    pub kernel: [usize; 3],
    pub c_out: usize,
    pub stride: [usize; 3],
    pub out: [usize; 3],
    /// For each dim: `out * k` entries, source index or `None` for zero pad.
    src: [Vec<Option<usize>>; 3],
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: &PadSpec,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects x (G,L,T,C) and w (kg,kl,kt,Cin,Cout), got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[3] != w_shape[3] {
            return Err(Error::Shape(format!(
                "conv3d input depth {} does not match kernel depth {}",
                x_shape[3], w_shape[3]
            )));
        }
        if stride.contains(&0) {
            return Err(Error::Shape("conv3d stride must be >= 1".into()));
        }
        let pads = pad.dims();
        let mut out = [0; 3];
        let mut src: [Vec<Option<usize>>; 3] = Default::default();
        for d in 0..3 {
            let n = x_shape[d];
            let k = w_shape[d];
            let padded = n + pads[d].total();
            if k == 0 || k > padded {
                return Err(Error::Shape(format!(
                    "kernel size {k} does not fit padded input {padded} in dim {d}"
                )));
            }
            out[d] = (padded - k) / stride[d] + 1;
            src[d] = (0..out[d])
                .flat_map(|o| (0..k).map(move |a| (o, a)))
                .map(|(o, a)| pads[d].source(o * stride[d] + a, n))
                .collect();
        }
        Ok(ConvGeometry {
            input: [x_shape[0], x_shape[1], x_shape[2], x_shape[3]],
            kernel: [w_shape[0], w_shape[1], w_shape[2]],
            c_out: w_shape[4],
            stride,
            out,
            src,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.out[0], self.out[1], self.out[2], self.c_out]
    }

    pub fn positions(&self) -> usize {
        self.out.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.input[3]
    }

    /// Multiply-accumulates of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.positions() * self.patch_len() * self.c_out) as u64
    }

    /// Visit every (patch row, patch column offset, input offset) triple with
    /// a non-padded source; each visit covers `C_in` contiguous values.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [_, l, t, cin] = self.input;
        let [kg, kl, kt] = self.kernel;
        let [og, ol, ot] = self.out;
        let k = self.patch_len();
        for go in 0..og {
            for lo in 0..ol {
                for to in 0..ot {
                    let row = ((go * ol + lo) * ot + to) * k;
                    for a in 0..kg {
                        let Some(sg) = self.src[0][go * kg + a] else {
                            continue;
                        };
                        for b in 0..kl {
                            let Some(sl) = self.src[1][lo * kl + b] else {
                                continue;
                            };
                            for c in 0..kt {
                                let Some(st) = self.src[2][to * kt + c] else {
                                    continue;
                                };
                                let col = ((a * kl + b) * kt + c) * cin;
                                let x_off = ((sg * l + sl) * t + st) * cin;
                                f(row + col, x_off);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cin = self.input[3];
        let mut patches = vec![0.0; self.positions() * self.patch_len()];
        self.for_each_tap(|p, xo| patches[p..p + cin].copy_from_slice(&x[xo..xo + cin]));
        patches
    }

    fn col2im(&self, dpatches: &[f64], dx: &mut [f64]) {
        let cin = self.input[3];
        self.for_each_tap(|p, xo| {
            for (d, s) in dx[xo..xo + cin].iter_mut().zip(&dpatches[p..p + cin]) {
                *d += s;
            }
        });
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    assert!(
        k == 0 || max_index(m, k, a_strides) < a.len(),
        "gemm: A out of bounds"
    );
    assert!(
        k == 0 || max_index(k, n, b_strides) < b.len(),
        "gemm: B out of bounds"
    );
    assert!(m * n <= c.len(), "gemm: C out of bounds");
    // SAFETY: the assertions above keep every strided access in bounds, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv3d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = geo.positions();
    let k = geo.patch_len();
    let co = geo.c_out;
    let mut out = Vec::with_capacity(p * co);
    for _ in 0..p {
        out.extend_from_slice(bias);
    }
    let patches = geo.im2col(x);
    gemm(p, k, co, &patches, (k, 1), w, (co, 1), 1.0, &mut out);
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv3d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let p = geo.positions();
    let k = geo.patch_len();
    let co = geo.c_out;
    let db = need.2.then(|| {
        let mut db = vec![0.0; co];
        for row in dout.chunks_exact(co) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    let dw = need.1.then(|| {
        let patches = geo.im2col(x);
        let mut dw = vec![0.0; k * co];
        // patches^T (k x p) times dout (p x co)
        gemm(k, p, co, &patches, (1, k), dout, (co, 1), 0.0, &mut dw);
        dw
    });
    let dx = need.0.then(|| {
        let mut dpatches = vec![0.0; p * k];
        // dout (p x co) times w^T (co x k)
        gemm(p, co, k, dout, (co, 1), w, (1, co), 0.0, &mut dpatches);
        let mut dx = vec![0.0; geo.input.iter().product()];
        geo.col2im(&dpatches, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Direct nested-loop cross-correlation; the semantic definition.
pub fn conv3d_reference(
    x: &[f64],
    x_shape: [usize; 4],
    w: &[f64],
    w_shape: [usize; 5],
    bias: &[f64],
    stride: [usize; 3],
    pad: &PadSpec,
) -> Result<(Vec<f64>, [usize; 4])> {
    let geo = ConvGeometry::new(&x_shape, &w_shape, stride, pad)?;
    let [_, l, t, cin] = x_shape;
    let [kg, kl, kt, _, cout] = w_shape;
    let [og, ol, ot] = geo.out;
    let pads = pad.dims();
    let mut out = vec![0.0; og * ol * ot * cout];
    for go in 0..og {
        for lo in 0..ol {
            for to in 0..ot {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for a in 0..kg {
                        let Some(sg) = pads[0].source(go * stride[0] + a, x_shape[0]) else {
                            continue;
                        };
                        for b in 0..kl {
                            let Some(sl) = pads[1].source(lo * stride[1] + b, l) else {
                                continue;
                            };
                            for c in 0..kt {
                                let Some(st) = pads[2].source(to * stride[2] + c, t) else {
                                    continue;
                                };
                                for ci in 0..cin {
                                    let xv = x[((sg * l + sl) * t + st) * cin + ci];
                                    let wv = w[(((a * kl + b) * kt + c) * cin + ci) * cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((go * ol + lo) * ot + to) * cout + co] = acc;
                }
            }
        }
    }
    Ok((out, geo.out_shape()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng_for(seed, "conv-test", 0);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = random(3 * 4 * 5, 1);
        let geo =
            ConvGeometry::new(&[3, 4, 5, 1], &[1, 1, 1, 1, 1], [1, 1, 1], &PadSpec::NONE).unwrap();
        assert_eq!(conv3d_forward(&geo, &x, &[1.0], &[0.0]), x);
    }

    #[test]
    fn ones_kernel_on_ones_gives_27_inside() {
        let (g, l, t) = (5, 5, 5);
        let x = vec![1.0; g * l * t];
        let pad = PadSpec::spatial(1, 1, 1);
        let geo = ConvGeometry::new(&[g, l, t, 1], &[3, 3, 3, 1, 1], [1, 1, 1], &pad).unwrap();
        let out = conv3d_forward(&geo, &x, &[1.0; 27], &[0.0]);
        let (oracle, shape) = conv3d_reference(
            &x,
            [g, l, t, 1],
            &[1.0; 27],
            [3, 3, 3, 1, 1],
            &[0.0],
            [1, 1, 1],
            &pad,
        )
        .unwrap();
        assert_eq!(shape, [5, 5, 5, 1]);
        assert_eq!(out, oracle);
        for gi in 0..g {
            for li in 1..l - 1 {
                for ti in 1..t - 1 {
                    assert_eq!(out[(gi * l + li) * t + ti], 27.0);
                }
            }
        }
        // zero-padded edge in l sees 2 of 3 columns; circular g never loses rows
        assert_eq!(out[(0 * l + 0) * t + 2], 18.0);
    }

    #[test]
    fn table_one_stem_shape() {
        let geo = ConvGeometry::new(
            &[13, 10, 300, 3],
            &[1, 1, 5, 3, 64],
            [1, 1, 2],
            &PadSpec::time_only(2),
        )
        .unwrap();
        assert_eq!(geo.out_shape(), [13, 10, 150, 64]);
    }

    #[test]
    fn kernel_larger_than_input_is_shape_error() {
        assert!(
            ConvGeometry::new(&[2, 2, 2, 1], &[3, 3, 3, 1, 1], [1, 1, 1], &PadSpec::NONE).is_err()
        );
        assert!(
            ConvGeometry::new(&[2, 2, 2, 2], &[1, 1, 1, 1, 1], [1, 1, 1], &PadSpec::NONE).is_err()
        );
    }

    #[test]
    fn fast_path_matches_reference() {
        let cases = [
            (
                [4, 3, 9, 2],
                [3, 3, 3, 2, 3],
                [1, 1, 2],
                PadSpec::spatial(1, 1, 1),
            ),
            (
                [5, 4, 7, 3],
                [1, 1, 5, 3, 4],
                [1, 1, 2],
                PadSpec::time_only(2),
            ),
            (
                [3, 3, 6, 2],
                [1, 1, 3, 2, 2],
                [1, 1, 1],
                PadSpec::time_only(1),
            ),
            ([6, 2, 4, 1], [3, 2, 2, 1, 2], [2, 1, 1], PadSpec::NONE),
        ];
        for (i, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
            let x = random(xs.iter().product(), i as u64);
            let w = random(ws.iter().product(), 100 + i as u64);
            let b = random(ws[4], 200 + i as u64);
            let (oracle, _) = conv3d_reference(&x, xs, &w, ws, &b, stride, &pad).unwrap();
            let geo = ConvGeometry::new(&xs, &ws, stride, &pad).unwrap();
            let fast = conv3d_forward(&geo, &x, &w, &b);
            for (a, o) in fast.iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-10 * o.abs().max(1.0));
            }
        }
    }

    #[test]
    fn circular_padding_is_shift_equivariant() {
        let xs = [6, 3, 5, 2];
        let ws = [3, 3, 3, 2, 2];
        let x = random(xs.iter().product(), 7);
        let w = random(ws.iter().product(), 8);
        let pad = PadSpec::spatial(1, 1, 1);
        let geo = ConvGeometry::new(&xs, &ws, [1, 1, 1], &pad).unwrap();
        let base = conv3d_forward(&geo, &x, &w, &[0.1, -0.2]);
        let row = 3 * 5 * 2;
        for k in 1..6 {
            let shifted: Vec<f64> = (0..6)
                .flat_map(|r| x[((r + 6 - k) % 6) * row..][..row].to_vec())
                .collect();
            let out = conv3d_forward(&geo, &shifted, &w, &[0.1, -0.2]);
            for r in 0..6 {
                assert_eq!(
                    &out[r * row..(r + 1) * row],
                    &base[((r + 6 - k) % 6) * row..][..row]
                );
            }
        }
    }
}
