//! Acceptance criteria for the `mpcqn` workspace live in `tests/acceptance.rs`.
