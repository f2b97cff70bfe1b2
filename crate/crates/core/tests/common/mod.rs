#![allow(dead_code)]

pub mod grad_check;
pub mod metric_oracle;
