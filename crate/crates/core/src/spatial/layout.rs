//! The g x l slot grid placing every sensor into one cluster row.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kmeans::{dist2, ClusterResult, Point};
use crate::error::{Error, Result};
use crate::recording::SensorArray;
use crate::seed::rng_for;

/// Where the sensors of a row sit inside its `l` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntraStrategy {
    Left,
    Right,
    Center,
}

impl IntraStrategy {
    /// First occupied slot for `m` sensors in `l` slots.
    pub fn start(self, m: usize, l: usize) -> usize {
        match self {
            IntraStrategy::Left => 0,
            IntraStrategy::Right => l - m,
            IntraStrategy::Center => (l - m) / 2,
        }
    }
}

impl std::str::FromStr for IntraStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(IntraStrategy::Left),
            "right" => Ok(IntraStrategy::Right),
            "center" => Ok(IntraStrategy::Center),
            other => Err(Error::Config(format!("unknown intra strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationKind {
    /// Scatter all sensors over all filled slots.
    ShuffleChannels,
    /// Reorder rows only.
    ShuffleClusters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayout {
    pub l: usize,
    /// `g` rows of `l` slots, each empty or a sensor index.
    pub rows: Vec<Vec<Option<usize>>>,
    pub intra_strategy: Option<IntraStrategy>,
    /// Source cluster for each row, when the layout came from clustering.
    pub inter_order: Option<Vec<usize>>,
    pub sensor_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayoutFile {
    g: usize,
    l: usize,
    #[serde(default)]
    intra_strategy: Option<IntraStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inter_order: Option<Vec<usize>>,
    rows: Vec<Vec<Option<String>>>,
}

impl ClusterLayout {
    pub fn g(&self) -> usize {
        self.rows.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    /// Row and slot of every sensor.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let mut pos = vec![(usize::MAX, usize::MAX); self.sensor_ids.len()];
        for (r, row) in self.rows.iter().enumerate() {
            for (s, slot) in row.iter().enumerate() {
                if let Some(m) = slot {
                    pos[*m] = (r, s);
                }
            }
        }
        pos
    }

    pub fn row_of(&self, sensor: usize) -> Option<usize> {
        self.rows.iter().position(|row| row.contains(&Some(sensor)))
    }

    pub fn row_counts(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|s| s.is_some()).count())
            .collect()
    }

    pub fn empty_slots(&self) -> usize {
        self.g() * self.l - self.rows.iter().flatten().filter(|s| s.is_some()).count()
    }

    /// Every sensor appears exactly once and rows have `l` slots.
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.l == 0 {
            return Err(Error::Validation(
                "layout must have g >= 1 and l >= 1".into(),
            ));
        }
        let mut seen = vec![false; self.sensor_ids.len()];
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.l {
                return Err(Error::Validation(format!(
                    "row {r} has {} slots, expected l = {}",
                    row.len(),
                    self.l
                )));
            }
            for m in row.iter().flatten() {
                let Some(flag) = seen.get_mut(*m) else {
                    return Err(Error::Validation(format!(
                        "row {r} names unknown sensor {m}"
                    )));
                };
                if *flag {
                    return Err(Error::Validation(format!(
                        "sensor {} placed more than once",
                        self.sensor_ids[*m]
                    )));
                }
                *flag = true;
            }
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "sensor {} missing from layout",
                self.sensor_ids[m]
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_file()).expect("layout serializes");
        let digest = Sha256::digest(json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn to_file(&self) -> LayoutFile {
        LayoutFile {
            g: self.g(),
            l: self.l,
            intra_strategy: self.intra_strategy,
            inter_order: self.inter_order.clone(),
            rows: self
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|s| s.map(|m| self.sensor_ids[m].clone()))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("layout serializes")
    }

    pub fn from_json(text: &str, sensors: &SensorArray) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("layout JSON: {e}")))?;
        let index: HashMap<&str, usize> = sensors
            .sensors
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        if file.rows.len() != file.g {
            return Err(Error::Validation(format!(
                "layout declares g = {} but has {} rows",
                file.g,
                file.rows.len()
            )));
        }
        let rows = file
            .rows
            .iter()
            .map(|row| {
                let mut slots: Vec<Option<usize>> = row
                    .iter()
                    .map(|id| match id {
                        None => Ok(None),
                        Some(id) => index.get(id.as_str()).copied().map(Some).ok_or_else(|| {
                            Error::Validation(format!("layout names unknown sensor '{id}'"))
                        }),
                    })
                    .collect::<Result<_>>()?;
                // short rows are left-packed; pad to l
                if slots.len() < file.l {
                    slots.resize(file.l, None);
                }
                Ok(slots)
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = ClusterLayout {
            l: file.l,
            rows,
            intra_strategy: file.intra_strategy,
            inter_order: file.inter_order,
            sensor_ids: sensors.sensors.iter().map(|s| s.id.clone()).collect(),
        };
        layout.validate()?;
        Ok(layout)
    }
}

pub fn save_layout(layout: &ClusterLayout, path: &Path) -> Result<()> {
    fs::write(path, layout.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_layout(path: &Path, sensors: &SensorArray) -> Result<ClusterLayout> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClusterLayout::from_json(&text, sensors)
}

/// Cluster rows ordered by descending centroid z, then y, then x.
pub fn default_cluster_order(centroids: &[Point]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&centroids[a], &centroids[b]);
        cb[2]
            .total_cmp(&ca[2])
            .then(cb[1].total_cmp(&ca[1]))
            .then(cb[0].total_cmp(&ca[0]))
            .then(a.cmp(&b))
    });
    order
}

/// Place clustered sensors into a `g x l` grid. Within a row sensors are
/// sorted by distance to their centroid and packed per `intra`.
pub fn build_layout(
    clusters: &ClusterResult,
    sensors: &SensorArray,
    l: usize,
    intra: IntraStrategy,
    inter_order: Option<Vec<usize>>,
) -> Result<ClusterLayout> {
    let g = clusters.g();
    if clusters.assignments.len() != sensors.n_sensors() {
        return Err(Error::Validation(format!(
            "clustering covers {} sensors, array has {}",
            clusters.assignments.len(),
            sensors.n_sensors()
        )));
    }
    let order = match inter_order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..g).collect::<Vec<_>>() {
                return Err(Error::Validation(format!(
                    "inter-cluster order {o:?} is not a permutation of 0..{g}"
                )));
            }
            o
        }
        None => default_cluster_order(&clusters.centroids),
    };
    let positions = sensors.positions();
    let mut rows = Vec::with_capacity(g);
    for &c in &order {
        let mut members = clusters.members(c);
        if members.len() > l {
            return Err(Error::Capacity {
                cluster: c,
                size: members.len(),
                capacity: l,
            });
        }
        let centroid = clusters.centroids[c];
        members.sort_by(|&a, &b| {
            dist2(&positions[a], &centroid)
                .total_cmp(&dist2(&positions[b], &centroid))
                .then(a.cmp(&b))
        });
        let mut row = vec![None; l];
        let start = intra.start(members.len(), l);
        for (k, m) in members.into_iter().enumerate() {
            row[start + k] = Some(m);
        }
        rows.push(row);
    }
    let layout = ClusterLayout {
        l,
        rows,
        intra_strategy: Some(intra),
        inter_order: Some(order),
        sensor_ids: sensors.sensors.iter().map(|s| s.id.clone()).collect(),
    };
    layout.validate()?;
    Ok(layout)
}

pub fn permute_layout(layout: &ClusterLayout, kind: PermutationKind, seed: u64) -> ClusterLayout {
    let mut out = layout.clone();
    match kind {
        PermutationKind::ShuffleChannels => {
            let mut rng = rng_for(seed, "shuffle-channels", 0);
            let mut sensors: Vec<usize> = layout.rows.iter().flatten().flatten().copied().collect();
            sensors.shuffle(&mut rng);
            let mut it = sensors.into_iter();
            for slot in out.rows.iter_mut().flatten().filter(|s| s.is_some()) {
                *slot = it.next();
            }
            out.inter_order = None;
        }
        PermutationKind::ShuffleClusters => {
            let mut rng = rng_for(seed, "shuffle-clusters", 0);
            let mut perm: Vec<usize> = (0..layout.g()).collect();
            perm.shuffle(&mut rng);
            out.rows = perm.iter().map(|&r| layout.rows[r].clone()).collect();
            out.inter_order = layout
                .inter_order
                .as_ref()
                .map(|o| perm.iter().map(|&r| o[r]).collect());
        }
    }
    out
}
