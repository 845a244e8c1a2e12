//! Criterion benchmarks for the pipeline stages; see `benches/`.
