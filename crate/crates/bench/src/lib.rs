//! Criterion benchmarks for confscale; see `benches/kernels.rs`.
