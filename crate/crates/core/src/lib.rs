//! Desk-scale laboratory for backdoor embedding attacks and the latent-space
//! defenses they target.

pub mod data;
pub mod defenses;
pub mod experiment;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod selftest;
pub mod tensor;
pub mod train;
