//! Benchmark-only package; see `benches/engines.rs`. Run with `cargo bench`.
