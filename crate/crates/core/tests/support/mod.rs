#![allow(dead_code)]
pub mod grad_cases;
pub mod operator_cases;
pub mod protocol_cases;
