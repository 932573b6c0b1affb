pub mod batch;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod io;
pub mod matching;
pub mod probe;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;
