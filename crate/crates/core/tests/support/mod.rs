//! Oracles shared by the property tests and the acceptance suite.
#![allow(dead_code)]

pub mod merge;
pub mod wilson;
