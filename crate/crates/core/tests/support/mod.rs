#![allow(dead_code)]

pub mod oracles;
pub mod resources;
pub mod tolerances;
