//! bench helpers live in benches/
