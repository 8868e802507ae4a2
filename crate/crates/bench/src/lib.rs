//! Criterion benchmarks for `anacil-core`; see `benches/kernels.rs`.
//! Run with `cargo bench -p anacil-bench`.
