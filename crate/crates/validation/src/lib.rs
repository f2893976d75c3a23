//! Holds the `acceptance` test target. Its package sorts after the others so
//! `cargo test --workspace` runs every other suite before it.
