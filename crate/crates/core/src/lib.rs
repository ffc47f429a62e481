//! Numerical engine for the large-N asymptotics of many-boson dynamics on a
//! finite lattice: Hartree flow, complex-germ/Riccati transport, the
//! multiparticle canonical operator into the symmetric N-particle sector, and
//! a brute-force exact oracle the asymptotics are verified against.

pub mod branches;
pub mod corrections;
pub mod error;
pub mod linalg;
pub mod fock;
pub mod lattice;
pub mod meanfield;
pub mod oracle;
pub mod packet;

pub use error::{Error, Result};
