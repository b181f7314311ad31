//! Criterion benchmarks for the pixmatch kernels live in `benches/`.
