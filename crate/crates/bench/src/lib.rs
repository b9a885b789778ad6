//! Criterion benchmarks for `g2kin`; see `benches/`.
