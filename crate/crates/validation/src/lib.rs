//! End-to-end acceptance suite for the workspace; everything lives in
//! `tests/acceptance.rs`, which prints one PASS/FAIL line per check.
