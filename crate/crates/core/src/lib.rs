//! Hybrid electricity-theft detection.
//!
//! The pipeline engineers per-state consumption features (including the grid
//! imbalance index), scores temporal anomalies with an LSTM autoencoder,
//! classifies records with a graph convolutional network over the temporal
//! record graph and with a random forest, fuses the three scores and
//! calibrates a decision threshold on a precision–recall scan.

pub mod artifact;
pub mod config;
pub mod features;
pub mod forest;
pub mod fusion;
pub mod gcn;
pub mod graph;
pub mod ingestion;
pub mod labeling;
pub mod lstm_ae;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod synth;
