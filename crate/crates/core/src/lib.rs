//! Convolutional sentence classification for adverse-drug-reaction detection.
//!
//! The pipeline reads the ADE corpus, optionally collapses duplicate
//! sentences, builds a per-fold vocabulary backed by pretrained word vectors,
//! trains one of two 1D-CNN graphs with Adam under a max-norm constraint, and
//! reports cross-validated accuracy, precision, recall, F1, specificity and
//! AUROC.

pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod experiment;
pub mod metrics;
pub mod neuralnet;
pub mod textprep;
pub mod train;
