//! Function fission and fusion over a small register-and-slot IR.
pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod diffeval;
pub mod fission;
pub mod fusion;
pub mod interp;
pub mod ir;
pub mod pipeline;
pub mod provenance;
pub mod samples;
