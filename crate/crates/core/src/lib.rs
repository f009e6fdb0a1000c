//! folkfed-core: the local half of a peer-first linked data system.
//!
//! Everything a single peer owns lives here: signing identities and petname
//! handles, the `.fld` text dialect and its quad model, the append-only
//! per-namespace linkstore, schema flattening and translation, federation
//! policy and tracker economics, and the workflow/lockfile engine. The
//! networked half (envelopes, replication, sharding, simulation) builds on
//! this crate from `folkfed-net`.

pub mod dsl;
pub mod federation;
pub mod identity;
pub mod linkstore;
pub mod schema;
pub mod workflow;

pub use dsl::address::{Address, DeclName};
pub use dsl::version::{Version, VersionOp, VersionReq};
pub use identity::{HandleTable, IdentityRecord, PeerId, SecretHandle};
pub use linkstore::quad::{Literal, Object, Quad, QuadSet};
pub use linkstore::{CommitId, CommitRecord, LinkStore, ObjectRecord};
