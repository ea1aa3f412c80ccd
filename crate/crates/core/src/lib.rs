//! Reflected diffusions in the heavy-traffic cone of a bandwidth-sharing
//! network: cone geometry, generator and Lyapunov checks, reflected Euler
//! simulation, killed hitting kernels, the normalized-limit machinery for
//! killed Markov chains, and the flow-level prelimit network.

pub mod cone;
pub mod ergodic;
pub mod generator;
pub mod hitting;
pub mod prelimit;
pub mod report;
pub mod sim;

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] cone::GeometryError),
    #[error(transparent)]
    Generator(#[from] generator::GeneratorError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Hitting(#[from] hitting::HittingError),
    #[error(transparent)]
    Ergodic(#[from] ergodic::ErgodicError),
    #[error(transparent)]
    Prelimit(#[from] prelimit::PrelimitError),
}
