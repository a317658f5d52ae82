//! Criterion benchmarks for the kernels and the desk-sized network; see
//! `benches/kernels.rs`.
