//! Wire envelopes, pull replication, encrypted blob sharding, and the
//! deterministic network simulator.

pub mod envelope;
pub mod peer;
pub mod shard;
pub mod simnet;
pub mod tcp;
