//! Library side of the `petalgan` binary, exposed for integration tests.

pub mod server;
