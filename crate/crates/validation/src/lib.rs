//! End-to-end acceptance checks for the workspace. See `tests/acceptance.rs`.
