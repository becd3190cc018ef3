pub mod attack;
pub mod corpus;
pub mod embedding;
pub mod io;
pub mod metrics;
pub mod pca;
pub mod protocol;
pub mod rng;

/// Version of the structured config files read by the `protocol` command.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;
