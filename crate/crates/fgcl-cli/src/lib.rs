//! Command-line front end for the dyadic graph pipeline: dataset synthesis,
//! graph construction, contrastive pretraining, embedding, transductive
//! classification, evaluation, and representation diagnostics.

pub mod commands;
pub mod config;
