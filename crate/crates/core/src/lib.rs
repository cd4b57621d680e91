//! Audiovisual emotion preference optimization.
//!
//! Preference losses, a toy multimodal scorer, preference and benchmark
//! pipelines, evaluation metrics and a training loop.

pub mod io;
pub mod losses;
pub mod scorer;
pub mod types;
pub mod annotator;
pub mod text;
pub mod world;
pub mod prefdata;
pub mod bench;
pub mod eval;
pub mod train;
