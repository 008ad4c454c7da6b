//! Class activation maps trained with mixup augmentation plus entropy and
//! spatial-concentration regularizers, on a synthetic multi-label dataset.

pub mod classnet;
pub mod config;
pub mod diffcore;
pub mod evalkit;
pub mod imageio;
pub mod mixaug;
pub mod objective;
pub mod parallel;
pub mod run;
pub mod synthdata;
pub mod train;
