//! Criterion benchmarks for the per-stage kernels; see `benches/stages.rs`.
//!
//! Run with `cargo bench -p dspal-bench`.
