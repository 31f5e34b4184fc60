//! Ground-truth generators.

mod ns;
mod ssm;

pub use ns::{
    bilinear_resize, ns_generate, ns_generate_streams, write_ns_dataset, NsConfig, NsDataset,
    NsSidecar, NsSolver, SpectralField,
};
pub use ssm::{LinearSsm, SsmSpec, DENSE_PRIOR_LIMIT};
