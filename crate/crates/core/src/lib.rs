pub mod analytics;
pub mod clock;
pub mod config;
pub mod dialogue;
pub mod draft;
pub mod error;
pub mod fixtures;
pub mod gateway;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod pool;
pub mod prompt;
pub mod simulator;
