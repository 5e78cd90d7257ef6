#![allow(dead_code)]

pub mod dataflow;
pub mod merge;
