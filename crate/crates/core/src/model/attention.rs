//! Cluster-aware spatial attention over a `(g, l, t, depth)` feature map.

use super::config::ClusterMaxMode;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Intermediate nodes of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    /// `(g, l)` time/depth average.
    pub f: Var,
    /// Per-cluster slot softmax times the cluster maximum.
    pub scaled: Var,
    pub sorted: Var,
    /// `perm[r * l + i]` is the slot whose score ranks `i`-th in cluster `r`.
    pub perm: Vec<usize>,
    /// Softmax over clusters of the sorted scores; column `i` compares the
    /// `i`-th ranked slot of every cluster and sums to 1.
    pub ranked: Var,
    /// `ranked` moved back to slot order, row by row.
    pub w: Var,
}

/// Inverse of per-row permutations stored row-major.
pub fn invert_rows(perm: &[usize], l: usize) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (row, chunk) in perm.chunks_exact(l).enumerate() {
        for (i, &src) in chunk.iter().enumerate() {
            inv[row * l + src] = i;
        }
    }
    inv
}

pub fn spatial_attention(
    graph: &mut Graph,
    feature: Var,
    mode: ClusterMaxMode,
) -> Result<AttentionVars> {
    let shape = graph.shape(feature).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "attention expects a (g, l, t, depth) map, got {shape:?}"
        )));
    }
    let (g, l) = (shape[0], shape[1]);
    let f = graph.mean_over(feature, &[2, 3])?;
    let within = graph.softmax_along(f, 1)?;
    let cluster_max = match mode {
        ClusterMaxMode::FeatureMap => graph.max_over(feature, &[1, 2, 3])?,
        ClusterMaxMode::Pooled => graph.max_over(f, &[1])?,
    };
    let cluster_max = graph.reshape(cluster_max, &[g, 1])?;
    let scaled = graph.mul(within, cluster_max)?;
    let (sorted, perm) = graph.sort_desc(scaled, 1)?;
    let ranked = graph.softmax_along(sorted, 0)?;
    let w = graph.gather_along(ranked, 1, invert_rows(&perm, l))?;
    Ok(AttentionVars {
        f,
        scaled,
        sorted,
        perm,
        ranked,
        w,
    })
}
