pub mod cli;
pub mod evaluation_pipeline;
pub mod integrity_guard;
pub mod lm_gateway;
pub mod program_store;
pub mod prompt_engine;
pub mod telemetry;
