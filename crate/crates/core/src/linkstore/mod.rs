//! Per-peer versioned quad store.
//!
//! Each peer's namespace is an append-only chain of signed commits over
//! canonical quad sets, plus a content-addressed blob store. Everything else
//! (resolution with version pins, history, diff, fork, merge, query) is a
//! pure function of the commit log.

pub mod quad;
mod store;

pub use quad::{BlobRef, CommitId, Literal, Num, Object, Quad, QuadSet};
pub use store::{
    decode_commit, encode_commit, CommitRecord, ConflictKey, LinkStore, ObjectRecord, Pattern,
    StoreError,
};
