//! Criterion benchmarks of the hot kernels live in `benches/`.
