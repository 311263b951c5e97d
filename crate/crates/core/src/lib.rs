//! Markovian stochastic process algebra toolkit: parsing, flat CTMC
//! semantics with derivation provenance, structural analysis of
//! synchronisation, and lifting of flat rate modifications back into the
//! sequential components.

pub mod bench;
pub mod combinatorics;
pub mod equations;
pub mod export;
pub mod lifting;
pub mod model;
pub mod parser;
pub mod semantics;
pub mod structure;
