//! Simulator for optically rephased photon-echo quantum memories in a
//! four-level inhomogeneously broadened ensemble.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod exec;
pub mod experiment;
pub mod ionensemble;
pub mod noisebudget;
pub mod physmodel;
pub mod profile;
pub mod protocols;
pub mod pulseshape;
pub mod specprep;
