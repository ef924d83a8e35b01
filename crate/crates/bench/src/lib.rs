//! Criterion benches for the retention kernels live in `benches/`.
