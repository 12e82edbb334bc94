//! Benchmarks for the DR-PO laboratory live in `benches/`.
