//! Symmetric FastICA with a tanh contrast, and component-based artifact
//! removal.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::Recording;
use crate::seed::rng_for;

const MAX_ITER: usize = 200;
const TOLERANCE: f64 = 1e-4;
/// Eigenvalues below this fraction of the largest count as rank loss.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct IcaModel {
    /// Per-channel offset removed before whitening.
    pub mean: Vec<f64>,
    /// `k x n`, maps centered channels to whitened components.
    pub whitening: DMatrix<f64>,
    /// `n x k`, pseudo-inverse of `whitening`.
    pub dewhitening: DMatrix<f64>,
    /// `k x k` orthogonal rotation in whitened space.
    pub unmixing: DMatrix<f64>,
    pub n_components: usize,
    pub converged: bool,
    pub iterations: usize,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, t, |i, j| rows[i][j])
}

/// `(W W^T)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}

impl IcaModel {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    /// Whitened (but unrotated) components, `k x T`.
    pub fn whiten(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let mut x = rows_to_matrix(rows);
        for (i, m) in self.mean.iter().enumerate() {
            x.row_mut(i).add_scalar_mut(-m);
        }
        &self.whitening * x
    }

    /// Independent components, `k x T`.
    pub fn sources(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        &self.unmixing * self.whiten(rows)
    }

    /// Rebuild channels from components, dropping those in `zeroed`.
    pub fn reconstruct(&self, sources: &DMatrix<f64>, zeroed: &[usize]) -> Vec<Vec<f64>> {
        let mut s = sources.clone();
        for &k in zeroed {
            s.row_mut(k).fill(0.0);
        }
        let x = &self.dewhitening * self.unmixing.transpose() * s;
        (0..x.nrows())
            .map(|i| x.row(i).iter().map(|v| v + self.mean[i]).collect())
            .collect()
    }
}

/// Fit on channel rows (`n` rows of `T` samples).
pub fn fit_fastica_rows(rows: &[Vec<f64>], n_components: usize, seed: u64) -> Result<IcaModel> {
    let n = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    if n_components == 0 || n_components > n {
        return Err(Error::Config(format!(
            "n_components {n_components} must be in 1..={n} (channel count)"
        )));
    }
    if t < 10 * n {
        return Err(Error::Config(format!(
            "FastICA needs at least {} samples for {n} channels, got {t}",
            10 * n
        )));
    }
    let mean: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().sum::<f64>() / t as f64)
        .collect();
    let mut x = rows_to_matrix(rows);
    for (i, m) in mean.iter().enumerate() {
        x.row_mut(i).add_scalar_mut(-m);
    }
    let cov = &x * x.transpose() / t as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > top * RANK_TOL)
        .count();
    let k = if rank < n_components {
        log::warn!(
            "covariance has rank {rank}; reducing ICA from {n_components} to {rank} components"
        );
        rank
    } else {
        n_components
    };
    if k == 0 {
        return Err(Error::Data("channel covariance is zero".into()));
    }

    let mut whitening = DMatrix::zeros(k, n);
    let mut dewhitening = DMatrix::zeros(n, k);
    for (r, &i) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        // fix the eigenvector sign so the fit does not depend on solver quirks
        let pivot = v
            .iter()
            .fold(0.0f64, |m, &e| if e.abs() > m.abs() { e } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            whitening[(r, j)] = sign * v[j] / lambda.sqrt();
            dewhitening[(j, r)] = sign * v[j] * lambda.sqrt();
        }
    }
    let z = &whitening * &x;

    let mut rng = rng_for(seed, "fastica", 0);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let g = (&w * &z).map(f64::tanh);
        let g_prime_mean: Vec<f64> = (0..k)
            .map(|i| g.row(i).iter().map(|v| 1.0 - v * v).sum::<f64>() / t as f64)
            .collect();
        let mut next = &g * z.transpose() / t as f64;
        for i in 0..k {
            for j in 0..k {
                next[(i, j)] -= g_prime_mean[i] * w[(i, j)];
            }
        }
        let next = symmetric_decorrelation(&next);
        let change = (0..k)
            .map(|i| (1.0 - next.row(i).dot(&w.row(i)).abs()).abs())
            .fold(0.0f64, f64::max);
        w = next;
        if change < TOLERANCE {
            converged = true;
            break;
        }
    }

    Ok(IcaModel {
        mean,
        whitening,
        dewhitening,
        unmixing: w,
        n_components: k,
        converged,
        iterations,
    })
}

pub fn fit_fastica(rec: &Recording, n_components: usize, seed: u64) -> Result<IcaModel> {
    fit_fastica_rows(&rec.rows_f64(), n_components, seed)
}

/// Thresholds deciding which components count as artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRule {
    /// Flag a component whose |Pearson r| with any reference exceeds this.
    pub correlation: f64,
    /// Without references, flag components whose |excess kurtosis| exceeds this.
    pub kurtosis: f64,
}

impl Default for ArtifactRule {
    fn default() -> Self {
        ArtifactRule {
            correlation: 0.7,
            kurtosis: 10.0,
        }
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

/// Component indices flagged as artifacts.
pub fn flag_components(
    sources: &DMatrix<f64>,
    references: Option<&[Vec<f64>]>,
    rule: &ArtifactRule,
) -> Vec<usize> {
    (0..sources.nrows())
        .filter(|&k| {
            let s: Vec<f64> = sources.row(k).iter().copied().collect();
            match references {
                Some(refs) if !refs.is_empty() => {
                    refs.iter().any(|r| pearson(&s, r).abs() > rule.correlation)
                }
                _ => excess_kurtosis(&s).abs() > rule.kurtosis,
            }
        })
        .collect()
}

pub struct ArtifactRemoval {
    pub recording: Recording,
    pub flagged: Vec<usize>,
}

pub fn remove_artifacts_rows(
    rows: &[Vec<f64>],
    model: &IcaModel,
    references: Option<&[Vec<f64>]>,
    rule: &ArtifactRule,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if rows.len() != model.n_channels() {
        return Err(Error::Shape(format!(
            "ICA model expects {} channels, recording has {}",
            model.n_channels(),
            rows.len()
        )));
    }
    let t = rows.first().map_or(0, Vec::len);
    if let Some(refs) = references {
        if let Some(bad) = refs.iter().find(|r| r.len() != t) {
            return Err(Error::Shape(format!(
                "reference has {} samples, recording has {t}",
                bad.len()
            )));
        }
    }
    let sources = model.sources(rows);
    let flagged = flag_components(&sources, references, rule);
    Ok((model.reconstruct(&sources, &flagged), flagged))
}

pub fn remove_artifacts(
    rec: &Recording,
    model: &IcaModel,
    references: Option<&[Vec<f64>]>,
    rule: &ArtifactRule,
) -> Result<ArtifactRemoval> {
    let (rows, flagged) = remove_artifacts_rows(&rec.rows_f64(), model, references, rule)?;
    let recording = Recording::from_rows(
        rec.sample_rate_hz,
        rec.subject_id.clone(),
        rec.sensor_array.clone(),
        &rows,
    )?;
    Ok(ArtifactRemoval { recording, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mix(sources: &[Vec<f64>], a: &[&[f64]]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..sources[0].len())
                    .map(|j| row.iter().zip(sources).map(|(c, s)| c * s[j]).sum())
                    .collect()
            })
            .collect()
    }

    fn toy_sources(t: usize) -> Vec<Vec<f64>> {
        let sine = (0..t).map(|i| (i as f64 * 0.05).sin()).collect();
        let square = (0..t)
            .map(|i| if (i / 37) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        vec![sine, square]
    }

    #[test]
    fn recovers_sine_and_square() {
        let truth = toy_sources(2000);
        let x = mix(&truth, &[&[1.0, 0.6], &[0.4, 1.2]]);
        let model = fit_fastica_rows(&x, 2, 42).unwrap();
        assert!(model.converged);
        let s = model.sources(&x);
        for src in &truth {
            let best = (0..2)
                .map(|k| pearson(&s.row(k).iter().copied().collect::<Vec<_>>(), src).abs())
                .fold(0.0, f64::max);
            assert!(best > 0.95, "best |r| = {best}");
        }
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let truth = toy_sources(1500);
        let x = mix(&truth, &[&[2.0, 0.3], &[0.1, 0.7]]);
        let model = fit_fastica_rows(&x, 2, 1).unwrap();
        let z = model.whiten(&x);
        let cov = &z * z.transpose() / z.ncols() as f64;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - expect).abs() < 1e-6);
            }
        }
        for i in 0..2 {
            assert!((model.unmixing.row(i).norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_many_components_is_config_error() {
        let x = mix(&toy_sources(100), &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(fit_fastica_rows(&x, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn too_short_is_config_error() {
        let x = mix(&toy_sources(15), &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(fit_fastica_rows(&x, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rank_deficient_input_reduces_components() {
        let truth = toy_sources(600);
        // third channel duplicates the first
        let x = mix(&truth, &[&[1.0, 0.5], &[0.2, 1.0], &[1.0, 0.5]]);
        let model = fit_fastica_rows(&x, 3, 0).unwrap();
        assert_eq!(model.n_components, 2);
    }

    #[test]
    fn deterministic_for_seed() {
        let x = mix(&toy_sources(800), &[&[1.0, 0.6], &[0.4, 1.2]]);
        let a = fit_fastica_rows(&x, 2, 9).unwrap();
        let b = fit_fastica_rows(&x, 2, 9).unwrap();
        assert_eq!(a.unmixing, b.unmixing);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn no_flags_reconstructs_input() {
        let x = mix(&toy_sources(1000), &[&[1.0, 0.6], &[0.4, 1.2]]);
        let model = fit_fastica_rows(&x, 2, 3).unwrap();
        let (y, flagged) =
            remove_artifacts_rows(&x, &model, None, &ArtifactRule::default()).unwrap();
        assert!(flagged.is_empty());
        for (a, b) in x.iter().flatten().zip(y.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn all_flagged_leaves_channel_means() {
        let x: Vec<Vec<f64>> = mix(&toy_sources(500), &[&[1.0, 0.6], &[0.4, 1.2]])
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.into_iter().map(|v| v + i as f64 + 1.0).collect())
            .collect();
        let model = fit_fastica_rows(&x, 2, 3).unwrap();
        let rule = ArtifactRule {
            correlation: 0.7,
            kurtosis: -1.0,
        };
        let (y, flagged) = remove_artifacts_rows(&x, &model, None, &rule).unwrap();
        assert_eq!(flagged, vec![0, 1]);
        for (row, m) in y.iter().zip(&model.mean) {
            assert!(row.iter().all(|v| (v - m).abs() < 1e-9));
        }
    }

    #[test]
    fn ecg_like_component_removed_with_reference() {
        let t = 4000;
        let mut rng = rng_for(5, "test", 0);
        let brain1: Vec<f64> = (0..t).map(|i| (i as f64 * 0.031).sin()).collect();
        let brain2: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let brain3: Vec<f64> = (0..t)
            .map(|i| ((i as f64 * 0.007).sin() * 3.0).tanh())
            .collect();
        // heartbeat: sharp periodic spikes
        let ecg: Vec<f64> = (0..t)
            .map(|i| {
                let phase = (i % 180) as f64 - 20.0;
                3.0 * (-phase * phase / 8.0).exp() - 0.5 * (-(phase - 8.0).powi(2) / 30.0).exp()
            })
            .collect();
        let sources = vec![brain1, brain2, brain3, ecg.clone()];
        let x = mix(
            &sources,
            &[
                &[1.0, 0.3, 0.2, 0.8],
                &[0.2, 1.0, 0.4, 0.6],
                &[0.5, 0.1, 1.0, 0.9],
                &[0.3, 0.6, 0.2, 0.7],
            ],
        );
        for row in &x {
            assert!(pearson(row, &ecg).abs() > 0.3);
        }
        let model = fit_fastica_rows(&x, 4, 11).unwrap();
        let refs = vec![ecg.clone()];
        let (y, flagged) =
            remove_artifacts_rows(&x, &model, Some(&refs), &ArtifactRule::default()).unwrap();
        assert_eq!(flagged.len(), 1);
        for row in &y {
            let r = pearson(row, &ecg).abs();
            assert!(r < 0.2, "residual correlation {r}");
        }
    }
}
