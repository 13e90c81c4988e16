//! Pairwise masked language modelling for protein sequences.

pub mod encoder;
pub mod evalkit;
pub mod gradcheck;
pub mod heads;
pub mod masking;
pub mod numcore;
pub mod seqio;
pub mod synthgen;
pub mod trainer;
