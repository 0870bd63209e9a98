use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("matrix is not Schur stable (spectral radius {rho:.6})")]
    NotSchurStable { rho: f64 },
    #[error("input matrix is not symmetric (asymmetry {asym:.3e})")]
    NonSymmetricInput { asym: f64 },
    #[error("pair is not stabilizable: {0}")]
    NotStabilizable(String),
    #[error("insufficient data: need {needed} samples, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("flow imbalance {imbalance:.3e} at node `{node}`")]
    FlowImbalance { node: String, imbalance: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("network graph is disconnected")]
    Disconnected,
    #[error("sampling interval {tau} exceeds the Euler stability limit {limit}")]
    StepTooLarge { tau: f64, limit: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("data matrix is rank deficient (condition number {cond:.3e})")]
    RankDeficientData { cond: f64 },
    #[error("parameterized closed loop is infeasible (spectral radius {rho:.6})")]
    Infeasible { rho: f64 },
    #[error("policy step rejected after {halvings} stepsize halvings")]
    StepRejected { halvings: u32 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("closed loop diverged at step {step}")]
    DivergenceDetected { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
