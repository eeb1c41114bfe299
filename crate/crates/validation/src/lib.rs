//! Acceptance suite for the workspace; see `tests/acceptance.rs`.
