mod binio;
pub mod dataset;
pub mod seeding;
pub mod graphbuild;
pub mod encoder;
pub mod objectives;
pub mod engine;
pub mod eval;
pub mod config;
pub mod cli;
