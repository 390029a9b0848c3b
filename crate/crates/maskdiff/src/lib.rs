//! Filesystem, CLI and service layer over `maskdiff-core`.

pub mod checkpoint;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod review;
pub mod sweep;
