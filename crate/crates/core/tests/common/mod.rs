#![allow(dead_code)]

pub mod cflt;
pub mod lesion;
pub mod memory;
