pub mod corpus;
pub mod extractor;
pub mod gateway;
pub mod planner;
pub mod prompts;
pub mod text;
pub mod normalizer;
pub mod sandbox;
pub mod analyst;
pub mod evaluator;
pub mod benchgen;
pub mod reference;
pub mod orchestrator;
