//! Multi-agent question answering over whole-slide pathology images.

pub mod allocation;
pub mod backends;
pub mod bench;
pub mod config;
pub mod domain;
pub mod ekv;
pub mod icv;
pub mod judging;
pub mod knowledge;
pub mod lexicon;
pub mod memory;
pub mod pipeline;
pub mod summary;
pub mod vizfusion;
