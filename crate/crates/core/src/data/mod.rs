//! Datasets and non-iid client populations.

mod bundle;
mod dataset;
pub mod idx;
pub mod partition;
mod synthetic;

pub use bundle::{
    make_balanced_holdout, make_bundles, make_global_test, BundleIndices, ClientDataBundle,
    HeldOut, SplitFractions,
};
pub use dataset::LabeledDataset;
pub use idx::load_idx;
pub use partition::{
    partition, partition_dirichlet, partition_dirichlet_per_client, partition_majority, ClassPool,
    DirichletAxis, PartitionScheme, PartitionSpec,
};
pub use synthetic::{gen_synthetic, SyntheticSpec};
