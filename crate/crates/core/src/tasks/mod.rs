//! Desk-scale experiment generators, metrics and file formats.

pub mod dataset;
pub mod denoise;
pub mod pgm;
pub mod tagging;
