//! Continuous domain adaptation on synthetic rotation benchmarks.
//!
//! A shared encoder feeds two pairs of classifiers, one pair per labeled
//! source domain. Training alternates a pull step, which draws unlabeled probe
//! domains toward both sources, with a shrinkage step, which draws the two
//! sources toward each other. Discrepancies come from the agreement between a
//! content classifier and an adversarial auxiliary classifier.

pub mod autodiff;
pub mod cli;
pub mod discrepancy;
pub mod domain_synth;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod optim;
pub mod plot;
pub mod queues;
pub mod theory;
pub mod trainer;
