//! Desk-scale laboratory for comparing autoregressive and absorbing-state
//! discrete-diffusion transformers under matched training budgets.

pub mod model;
pub mod tensor;
pub mod text;
pub mod verify;
