//! Event-driven latency and functional simulator for an LPDDR5 processing-in-memory
//! accelerator that places two INT8 compute units in every DRAM bank.
//!
//! The crate is layered bottom-up: [`arch`] holds device and PIM organisation,
//! [`isa`] the three PIM commands, [`datapath`] a bit-exact compute-unit model,
//! [`mapping`] the KV-cache layouts, [`workload`] the LLM operator graphs,
//! [`sim`] the scheduler and [`report`] sweeps and charts. [`verify`] bundles the
//! self-checks used by `pimsim verify`.
pub mod arch;
pub mod datapath;
pub mod isa;
pub mod mapping;
pub mod workload;
pub mod sim;
pub mod report;
pub mod verify;
