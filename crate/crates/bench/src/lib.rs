//! Benchmark-only crate; see `benches/core_benchmarks.rs`.
