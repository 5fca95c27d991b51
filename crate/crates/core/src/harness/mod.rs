//! Synthetic data, file formats and the command-line front end.

pub mod cli;
mod dataset;
pub mod io;

pub use dataset::{
    generate_dataset, matched_proposal_ious, split, DatasetConfig, Scene, BACKGROUND_MAX_IOU,
    COORD_GRID,
};
