//! Benchmark-only crate: see `benches/hot_paths.rs`. The library target is
//! intentionally empty.
