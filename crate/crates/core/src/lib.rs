pub mod chat;
pub mod choices;
pub mod datasets;
pub mod evaluator;
pub mod metrics;
pub mod run;
pub mod strategies;
