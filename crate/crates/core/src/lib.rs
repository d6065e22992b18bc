//! Crowd navigation toolkit: a deterministic 2D pedestrian simulator with
//! pluggable crowd policies, a from-scratch value-network stack for learning
//! robot navigation among unreliable pedestrians, per-pedestrian deviation
//! estimation from short observation windows, and a benchmarking harness
//! with tail-risk (CVaR) reporting.

pub mod action;
pub mod eval;
pub mod nn;
pub mod obs;
pub mod par;
pub mod policies;
pub mod reward;
pub mod rng;
pub mod sim;
pub mod svg;
pub mod traj;
pub mod trainer;
pub mod uncertainty;
pub mod value;
pub mod vec2;
