//! Sensor clustering and the cluster-slot layout.

mod kmeans;
mod layout;

pub use kmeans::{
    dist2, kmeans, partition_inertia, ClusterResult, Point, DEFAULT_RESTARTS, MAX_LLOYD_ITERATIONS,
};
pub use layout::{
    build_layout, default_cluster_order, load_layout, permute_layout, save_layout, ClusterLayout,
    IntraStrategy, PermutationKind,
};
