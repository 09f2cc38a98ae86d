//! Search-user side of sieve: planted corpora, scripted feedback policies,
//! query templates and the experiment runners behind the `sieve` binary.

pub mod corpus;
pub mod experiments;
pub mod policy;
pub mod report;
pub mod workloads;
