pub mod config;
pub mod corpus;
pub mod divergence;
pub mod inference;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod prompts;
pub mod report;
