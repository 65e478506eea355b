//! Benchmarks live in `benches/`; run them with `cargo bench -p storyboard-bench`.
