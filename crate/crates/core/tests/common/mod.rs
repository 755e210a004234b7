#![allow(dead_code)]

pub mod crash;
pub mod flash;
pub mod traces;
