//! Criterion benchmarks for duality-nets; see `benches/`.
