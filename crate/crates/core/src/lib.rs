//! Contrastive prototypical few-shot 3D object detection.
//!
//! An episodic N-way K-shot detector over point clouds. A small set-abstraction
//! backbone extracts seed features; a momentum-updated bank of geometric
//! prototypes labels foreground seeds and refines them by cross-attention;
//! votes are clustered into proposals that are refined with class prototypes
//! pooled from support instances. Two contrastive objectives shape the
//! features during training: a semantic one over batch-wise class prototypes
//! and a primitive one over bank assignments.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod detector;
pub mod episodes;
pub mod error;
pub mod eval3d;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod plot;
pub mod protobank;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
