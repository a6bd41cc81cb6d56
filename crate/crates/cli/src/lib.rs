//! Library side of the `wicklab` command: verification suites shared by
//! `verify-all` and the acceptance tests.

pub mod verify;
