//! Criterion benchmarks for the numeric kernels live in `benches/kernels.rs`.
//!
//! Run them with `cargo bench -p fslab-bench`.
