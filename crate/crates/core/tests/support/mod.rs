//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

pub mod fid_oracle;
pub mod oracle;
pub mod tdr_oracle;
pub mod transfer;
