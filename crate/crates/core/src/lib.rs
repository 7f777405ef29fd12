pub mod bench;
pub mod channel;
pub mod chunk;
pub mod codec;
pub mod dictionary;
pub mod enclave;
pub mod error;
pub mod extsort;
pub mod keys;
pub mod psi;
pub mod service;

pub use error::{Error, Result};
