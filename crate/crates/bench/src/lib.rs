//! Criterion benchmarks for esmc-core; see `benches/`.
