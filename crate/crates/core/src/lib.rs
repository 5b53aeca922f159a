#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod covariance;
pub mod deformation;
pub mod error;
pub mod estimation;
pub mod fields;
pub mod linalg;
pub mod scaling;
pub mod smoothers;
