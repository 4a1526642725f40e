#![allow(dead_code)]

pub mod gradcheck;
pub mod map_oracle;
pub mod uib;
pub mod baseline;
pub mod fixtures;
pub mod files;
