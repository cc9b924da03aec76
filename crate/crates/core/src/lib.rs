//! Bayesian hierarchical penalized-spline estimation of the proportion of
//! stillbirths that occur intrapartum, by place, country, region and year.

pub mod aggregation;
pub mod cli;
pub mod data;
pub mod estimation;
pub mod manifest;
pub mod math;
pub mod posterior;
pub mod sampler;
pub mod splines;
pub mod synthetic;
pub mod validation;

#[cfg(test)]
pub(crate) mod test_support;
