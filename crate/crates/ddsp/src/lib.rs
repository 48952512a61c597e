//! Files, datasets and the `ddsp` command-line tool on top of `ddsp-core`.

pub mod binary;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod wav;

pub use error::{Error, Result};

// Training allocates and frees multi-megabyte tape buffers every step; the
// system allocator returns them to the kernel each time and the page faults
// dominate step time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
