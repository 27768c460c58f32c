pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod matching;
pub mod network;
pub mod synthgen;
pub mod transfer;
