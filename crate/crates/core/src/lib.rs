pub mod components;
pub mod config;
pub mod curriculum;
pub mod dataset;
pub mod jsonl;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod noisy_eval;
pub mod raster;
pub mod review_api;
pub mod run;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
