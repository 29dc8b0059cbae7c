//! Glauber-Kawasaki particle dynamics on the level-N Sierpinski gasket graph,
//! together with the discrete calculus (Laplacian, Dirichlet energy, harmonic
//! extension, effective resistance) and the limiting reaction-diffusion solver.
//!
//! The crate is organized around the gasket discretization:
//!
//! - [`gasket`]: the graph `G_N = (V_N, E_N)`, cells, neighborhoods and the
//!   shape catalog of rescaled neighborhoods.
//! - [`rates`]: local flip-rate families `c(xi; shape)` and the reaction
//!   function `Phi(rho)` they induce.
//! - [`kmc`]: exact continuous-time simulation of the sped-up generator
//!   `5^N (L^K + 5^-N L^G + b^-N L^B)`.
//! - [`calculus`]: discrete Laplacian, normal derivative, Dirichlet energy,
//!   harmonic extension and effective resistance.
//! - [`pde`]: method-of-lines solver for `d rho/dt = Delta_M rho + Phi(rho)`
//!   with Dirichlet, Robin or Neumann boundary handling, plus weak-form
//!   residual checks.
//! - [`harness`]: seeded, reproducible experiments confronting simulator and
//!   solver (convergence, boundary regimes, martingale scaling, block
//!   diagnostics, resistance scaling).

pub mod calculus;
pub mod gasket;
pub mod harness;
pub mod kmc;
pub mod pde;
pub mod rates;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("level {0} out of range (0..={1})")]
    LevelOutOfRange(u32, u32),
    #[error("word of length {0} too long for level {1}")]
    WordTooLong(usize, u32),
    #[error("site {0} is not a boundary site")]
    NotBoundary(usize),
    #[error("site {0} is not an interior site")]
    NotInterior(usize),
    #[error("sites {0} and {1} are disconnected in the induced graph")]
    Disconnected(usize, usize),
    #[error("catalog level {level} too small for range {l0} (need level >= l0 + 2)")]
    CatalogLevelTooSmall { level: u32, l0: u32 },
    #[error("missing rate table entry for shape `{shape}` occupancy {bits:#b}")]
    MissingTableEntry { shape: String, bits: u32 },
    #[error("nonpositive rate {rate} for shape `{shape}` occupancy {bits:#b}")]
    NonpositiveRate { shape: String, bits: u32, rate: f64 },
    #[error("empty cell: word of length {0} at level {1} has no interior sites")]
    EmptyCell(usize, u32),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
