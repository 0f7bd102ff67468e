//! Synthetic workloads and experiment drivers: benign trace generation,
//! attack campaigns, the gray-box adversary and the throughput benchmark.

mod bench;
mod campaign;
mod scenario;

pub use bench::{bench_throughput, synthetic_profile, BenchRow};
pub use campaign::{
    calls_of, corpus_calls, generate_context_sequential, graybox, run_campaign, splice_exfiltration,
    structurally_valid, Call, CallTrace, CampaignMode, CampaignReport, GrayboxConfig, GrayboxReport,
};
pub use scenario::{
    generate_benign, generate_from, BenignSample, Repeat, Scenario, ScenarioError, Template, ToolGen,
    ValueGen,
};
