//! Criterion benchmarks for the maskpoint crates; see `benches/`.
