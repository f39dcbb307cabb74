//! Criterion benchmarks for expnet-core live under `benches/`.
