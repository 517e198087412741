//! Fairness-aware robust training over adversarial-attribute neighborhoods.
//!
//! Modules, bottom up: [`numkit`] (dense math, RNG), [`model`] (MLP with
//! analytic backprop), [`aan`] (neighborhoods, robust weights, objective),
//! [`scraan`] (stochastic compositional optimizer and two-stage trainer),
//! [`fairness`] (evaluation metrics), [`data`] (datasets, generators,
//! sampler) and [`experiment`] (config-driven runner used by the CLI).

pub mod numkit;
pub mod model;
pub mod aan;
pub mod data;
pub mod fairness;
pub mod scraan;
pub mod experiment;
