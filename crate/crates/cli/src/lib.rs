//! Command-line front end: formulas, recipes, run configuration and commands.

pub mod config;
pub mod formula;
pub mod recipe;
pub mod run;
