//! Criterion benchmarks for the denoiser; see `benches/`.
