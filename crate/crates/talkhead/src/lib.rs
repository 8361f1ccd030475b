//! File formats, corpus generation and the command line for the talking
//! head pipeline. The numerics live in `talkhead-core`.

pub mod asset;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod etg;
pub mod fsio;
pub mod image;
pub mod report;
