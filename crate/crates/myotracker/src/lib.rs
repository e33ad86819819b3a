//! File formats, dataset IO and the command-line front end for the
//! `myotracker-core` point tracker.

pub mod cli;
pub mod dataset;
pub mod formats;
pub mod parallel;
