//! Criterion benchmarks for the pipeline kernels live in `benches/`.
