//! Criterion benchmarks for qsgp-core live under `benches/`.
