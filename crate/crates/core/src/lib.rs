pub mod analysis;
pub mod checkpoint;
pub mod discovery;
pub mod evaluate;
pub mod graph;
pub mod heuristics;
pub mod ingest;
pub mod metrics;
pub mod ranker;
pub mod splits;
pub mod synthetic;
