//! Criterion benchmarks for `headshare-core`; see `benches/headshare.rs`.
