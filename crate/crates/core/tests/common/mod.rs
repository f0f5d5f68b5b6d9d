//! Checks and reference implementations shared between integration tests.
#![allow(dead_code)]

pub mod gradients;
pub mod ssim;
