//! The store proper: signed commit chains, blobs, and derived views.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::address::Address;
use crate::dsl::version::match_version;
use crate::identity::{verify, verify_identity, IdentityError, IdentityRecord, PeerId, SecretHandle};
use crate::linkstore::quad::{
    canonical_quadset, parse_canonical_quads, reserved, BlobRef, CommitId, Literal, Object, Quad,
    QuadSet,
};

/// Record separator for commit encoding. Canonical quad text escapes every
/// control character, so this byte never appears inside a field.
const REC_SEP: u8 = 0x1d;
const COMMIT_DOMAIN: &str = "folkfed/commit/v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("namespace @{0} is not known locally")]
    UnknownNamespace(PeerId),
    #[error("unknown commit {0}")]
    UnknownCommit(CommitId),
    #[error("no identity registered for @{0}")]
    UnregisteredIdentity(PeerId),
    #[error("secret does not hold the current key for @{0}")]
    NotOwner(PeerId),
    #[error("quad authored by @{got} cannot be committed into @{ns}'s namespace")]
    ForeignAdd { ns: PeerId, got: PeerId },
    #[error("only the author may remove a quad; add a retraction link instead")]
    ForeignRemoval,
    #[error("removed quad is not in the visible set")]
    RemoveMissing,
    #[error("no announced version of {address} satisfies the pin")]
    NoMatchingVersion { address: String },
    #[error("{0} is already populated")]
    DestPopulated(String),
    #[error("merge leaves {} unresolved conflict(s)", .0.len())]
    UnresolvedConflicts(Vec<ConflictKey>),
    #[error("unknown blob {0}")]
    UnknownBlob(String),
    #[error("blob {0} failed its content hash")]
    CorruptBlob(String),
    #[error("commit log for @{peer} is malformed: {message}")]
    MalformedLog { peer: PeerId, message: String },
    #[error("commit {0} does not extend the current head")]
    NotNext(CommitId),
    #[error("commit signature does not verify")]
    BadCommitSignature,
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One signed step in a namespace's history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub id: CommitId,
    pub parents: Vec<CommitId>,
    pub author: PeerId,
    pub added: QuadSet,
    pub removed: QuadSet,
    pub logical_time: u64,
    pub signature: [u8; 64],
}

/// Resolution result: the quads at (or under) an address, and the commit the
/// snapshot was taken at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub address: Address,
    pub quads: QuadSet,
    pub at_commit: CommitId,
}

/// Query pattern; unbound fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pattern {
    pub author: Option<PeerId>,
    pub subject: Option<Address>,
    pub predicate: Option<Address>,
    pub object: Option<Object>,
}

impl Pattern {
    pub fn matches(&self, q: &Quad) -> bool {
        self.author.map_or(true, |a| a == q.author)
            && self.subject.as_ref().map_or(true, |s| *s == q.subject)
            && self.predicate.as_ref().map_or(true, |p| *p == q.predicate)
            && self.object.as_ref().map_or(true, |o| *o == q.object)
    }
}

/// A merge slot both sides fill differently.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConflictKey {
    pub subject: Address,
    pub predicate: Address,
}

#[derive(Debug, Default)]
struct Namespace {
    commits: Vec<CommitRecord>,
    visible: QuadSet,
}

/// A peer's local store. Disk-backed when opened on a directory, purely in
/// memory otherwise; the on-disk layout is an append-only log per namespace
/// plus a fan-out blob directory, so state is a replay of what is on disk.
#[derive(Debug, Default)]
pub struct LinkStore {
    root: Option<PathBuf>,
    namespaces: BTreeMap<PeerId, Namespace>,
    identities: BTreeMap<PeerId, IdentityRecord>,
    commit_index: BTreeMap<CommitId, (PeerId, usize)>,
    mem_blobs: BTreeMap<[u8; 32], Vec<u8>>,
}

impl LinkStore {
    /// An in-memory store; nothing is persisted.
    pub fn memory() -> Self {
        LinkStore::default()
    }

    /// Opens (creating if needed) a store rooted at `dir` and replays every
    /// log found there. Identities load first so signatures can be checked.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let mut store = LinkStore { root: Some(dir.to_path_buf()), ..LinkStore::default() };
        for sub in ["logs", "blobs", "identities"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut idents: Vec<_> = fs::read_dir(dir.join("identities"))?
            .collect::<Result<Vec<_>, _>>()?;
        idents.sort_by_key(|e| e.file_name());
        for entry in idents {
            let record = IdentityRecord::decode(&fs::read(entry.path())?)?;
            verify_identity(&record)?;
            store.identities.insert(record.peer_id, record);
        }
        let mut logs: Vec<_> = fs::read_dir(dir.join("logs"))?.collect::<Result<Vec<_>, _>>()?;
        logs.sort_by_key(|e| e.file_name());
        for entry in logs {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            let peer_text = name.strip_suffix(".log").unwrap_or(&name);
            let peer = PeerId::parse(peer_text)?;
            let bytes = fs::read(entry.path())?;
            store.import_log(peer, &bytes)?;
        }
        Ok(store)
    }

    /// Registers (or updates, on rotation) a peer's identity record. Commits
    /// are only accepted for registered identities.
    pub fn register_identity(&mut self, record: &IdentityRecord) -> Result<(), StoreError> {
        verify_identity(record)?;
        if let Some(existing) = self.identities.get(&record.peer_id) {
            if existing.generation > record.generation {
                return Ok(());
            }
        }
        if let Some(root) = &self.root {
            let path = root.join("identities").join(format!("{}.fid", record.peer_id.render()));
            fs::write(path, record.encode())?;
        }
        self.identities.insert(record.peer_id, record.clone());
        Ok(())
    }

    pub fn identity(&self, peer: &PeerId) -> Option<&IdentityRecord> {
        self.identities.get(peer)
    }

    pub fn identities(&self) -> impl Iterator<Item = &IdentityRecord> {
        self.identities.values()
    }

    /// Peers with at least one commit.
    pub fn peers(&self) -> impl Iterator<Item = &PeerId> {
        self.namespaces.keys()
    }

    pub fn head(&self, peer: &PeerId) -> Option<CommitId> {
        self.namespaces.get(peer).and_then(|ns| ns.commits.last()).map(|c| c.id)
    }

    /// Number of commits in a namespace (the next logical time).
    pub fn chain_len(&self, peer: &PeerId) -> u64 {
        self.namespaces.get(peer).map_or(0, |ns| ns.commits.len() as u64)
    }

    /// The visible quad set at a namespace head.
    pub fn visible(&self, peer: &PeerId) -> Option<&QuadSet> {
        self.namespaces.get(peer).map(|ns| &ns.visible)
    }

    pub fn commit_record(&self, id: &CommitId) -> Option<&CommitRecord> {
        let (peer, idx) = self.commit_index.get(id)?;
        Some(&self.namespaces[peer].commits[*idx])
    }

    /// Commits from logical time `from` onward (for replication).
    pub fn commits_since(&self, peer: &PeerId, from: u64) -> &[CommitRecord] {
        match self.namespaces.get(peer) {
            Some(ns) if (from as usize) < ns.commits.len() => &ns.commits[from as usize..],
            _ => &[],
        }
    }

    /// Advances the author's head. Added quads must carry the author; removed
    /// quads must be visible and the author's own.
    pub fn commit(
        &mut self,
        author: PeerId,
        secret: &SecretHandle,
        add: QuadSet,
        remove: QuadSet,
    ) -> Result<CommitRecord, StoreError> {
        let record =
            self.identities.get(&author).ok_or(StoreError::UnregisteredIdentity(author))?;
        if secret.verifying_key().to_bytes() != record.current_key {
            return Err(StoreError::NotOwner(author));
        }
        self.check_mutation(author, &add, &remove)?;
        let (parents, logical_time) = match self.namespaces.get(&author) {
            Some(ns) if !ns.commits.is_empty() => {
                (vec![ns.commits.last().unwrap().id], ns.commits.len() as u64)
            }
            _ => (Vec::new(), 0),
        };
        self.commit_with_parents(author, secret, add, remove, parents, logical_time)
    }

    fn commit_with_parents(
        &mut self,
        author: PeerId,
        secret: &SecretHandle,
        add: QuadSet,
        remove: QuadSet,
        mut parents: Vec<CommitId>,
        logical_time: u64,
    ) -> Result<CommitRecord, StoreError> {
        parents.sort();
        parents.dedup();
        let body = commit_body(&parents, author, logical_time, &add, &remove);
        let id = CommitId(Sha256::digest(&body).into());
        let signature = secret.sign(&body);
        let commit = CommitRecord {
            id,
            parents,
            author,
            added: add,
            removed: remove,
            logical_time,
            signature,
        };
        self.append(commit.clone())?;
        Ok(commit)
    }

    fn check_mutation(
        &self,
        author: PeerId,
        add: &QuadSet,
        remove: &QuadSet,
    ) -> Result<(), StoreError> {
        if let Some(q) = add.iter().find(|q| q.author != author) {
            return Err(StoreError::ForeignAdd { ns: author, got: q.author });
        }
        if remove.is_empty() {
            return Ok(());
        }
        if let Some(q) = remove.iter().find(|q| q.author != author) {
            let _ = q;
            return Err(StoreError::ForeignRemoval);
        }
        let empty = QuadSet::new();
        let visible = self.namespaces.get(&author).map_or(&empty, |ns| &ns.visible);
        if remove.iter().any(|q| !visible.contains(q)) {
            return Err(StoreError::RemoveMissing);
        }
        Ok(())
    }

    /// Accepts a commit produced elsewhere (replication). Returns false when
    /// the commit is already present. The commit must be the next step of its
    /// author's chain, carry a valid signature, and satisfy the same mutation
    /// rules as a local commit.
    pub fn ingest_commit(&mut self, commit: CommitRecord) -> Result<bool, StoreError> {
        if let Some((peer, idx)) = self.commit_index.get(&commit.id) {
            let known = &self.namespaces[peer].commits[*idx];
            if *known == commit {
                return Ok(false);
            }
            return Err(StoreError::MalformedLog {
                peer: commit.author,
                message: "commit id collision with differing content".into(),
            });
        }
        let record = self
            .identities
            .get(&commit.author)
            .ok_or(StoreError::UnregisteredIdentity(commit.author))?;
        let body = commit_body(
            &commit.parents,
            commit.author,
            commit.logical_time,
            &commit.added,
            &commit.removed,
        );
        if CommitId(Sha256::digest(&body).into()) != commit.id {
            return Err(StoreError::MalformedLog {
                peer: commit.author,
                message: "commit id does not match its content".into(),
            });
        }
        if !verify(record, &body, &commit.signature) {
            return Err(StoreError::BadCommitSignature);
        }
        let chain_len = self.chain_len(&commit.author);
        if commit.logical_time != chain_len {
            return Err(StoreError::NotNext(commit.id));
        }
        if chain_len > 0 {
            let head = self.head(&commit.author).unwrap();
            if !commit.parents.contains(&head) {
                return Err(StoreError::NotNext(commit.id));
            }
        }
        self.check_mutation(commit.author, &commit.added, &commit.removed)?;
        self.append(commit)?;
        Ok(true)
    }

    fn append(&mut self, commit: CommitRecord) -> Result<(), StoreError> {
        if let Some(root) = &self.root {
            let path = root.join("logs").join(format!("{}.log", commit.author.render()));
            let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
            let bytes = encode_commit(&commit);
            file.write_all(&(bytes.len() as u32).to_be_bytes())?;
            file.write_all(&bytes)?;
        }
        let ns = self.namespaces.entry(commit.author).or_default();
        for q in &commit.removed {
            ns.visible.remove(q);
        }
        for q in &commit.added {
            ns.visible.insert(q.clone());
        }
        self.commit_index.insert(commit.id, (commit.author, ns.commits.len()));
        ns.commits.push(commit);
        Ok(())
    }

    /// Everything at or under an address. A version pin selects the newest
    /// commit announcing a satisfying `@fed:version` on the pinned prefix and
    /// resolves within that snapshot.
    pub fn resolve(&self, address: &Address) -> Result<ObjectRecord, StoreError> {
        let ns = self
            .namespaces
            .get(&address.peer)
            .ok_or(StoreError::UnknownNamespace(address.peer))?;
        let version_pred = reserved::version();
        if let Some((prefix, req, rest)) = address.first_pin() {
            let target = rest.without_pins();
            let snapshot = ns.commits.iter().rposition(|c| {
                c.added.iter().any(|q| {
                    q.subject == prefix
                        && q.predicate == version_pred
                        && matches!(&q.object, Object::Lit(Literal::Version(v)) if match_version(v, &req))
                })
            });
            let idx = snapshot
                .ok_or_else(|| StoreError::NoMatchingVersion { address: address.render() })?;
            let mut visible = QuadSet::new();
            for c in &ns.commits[..=idx] {
                for q in &c.removed {
                    visible.remove(q);
                }
                for q in &c.added {
                    visible.insert(q.clone());
                }
            }
            let quads = visible.iter().filter(|q| q.subject.is_under(&target)).cloned().collect();
            return Ok(ObjectRecord { address: target, quads, at_commit: ns.commits[idx].id });
        }
        let target = address.without_pins();
        let quads = ns.visible.iter().filter(|q| q.subject.is_under(&target)).cloned().collect();
        // Pin at the last commit that touched the subtree, so the pin is
        // stable under unrelated activity in the namespace.
        let at_commit = ns
            .commits
            .iter()
            .rev()
            .find(|c| {
                c.added.iter().chain(c.removed.iter()).any(|q| q.subject.is_under(&target))
            })
            .unwrap_or_else(|| ns.commits.last().expect("namespaces hold at least one commit"))
            .id;
        Ok(ObjectRecord { address: target, quads, at_commit })
    }

    /// Commits that touched the address's subtree, newest first.
    pub fn history(&self, address: &Address) -> Result<Vec<CommitRecord>, StoreError> {
        let ns = self
            .namespaces
            .get(&address.peer)
            .ok_or(StoreError::UnknownNamespace(address.peer))?;
        let target = address.without_pins();
        Ok(ns
            .commits
            .iter()
            .rev()
            .filter(|c| {
                c.added.iter().chain(c.removed.iter()).any(|q| q.subject.is_under(&target))
            })
            .cloned()
            .collect())
    }

    fn visible_at(&self, id: &CommitId) -> Result<QuadSet, StoreError> {
        let (peer, idx) = self.commit_index.get(id).ok_or(StoreError::UnknownCommit(*id))?;
        let mut visible = QuadSet::new();
        for c in &self.namespaces[peer].commits[..=*idx] {
            for q in &c.removed {
                visible.remove(q);
            }
            for q in &c.added {
                visible.insert(q.clone());
            }
        }
        Ok(visible)
    }

    /// The patch that turns the visible set at `a` into the one at `b`.
    pub fn diff(&self, a: &CommitId, b: &CommitId) -> Result<(QuadSet, QuadSet), StoreError> {
        let va = self.visible_at(a)?;
        let vb = self.visible_at(b)?;
        let added = vb.difference(&va).cloned().collect();
        let removed = va.difference(&vb).cloned().collect();
        Ok((added, removed))
    }

    /// Copies everything under `source` beneath `dest` (re-authored as the
    /// forker's own propositions) plus a provenance quad pinning the source
    /// commit, so later source commits never change the fork.
    pub fn fork(
        &mut self,
        source: &Address,
        dest: &Address,
        author: PeerId,
        secret: &SecretHandle,
    ) -> Result<CommitRecord, StoreError> {
        let src = self.resolve(source)?;
        if let Some(ns) = self.namespaces.get(&dest.peer) {
            let target = dest.without_pins();
            if ns.visible.iter().any(|q| q.subject.is_under(&target)) {
                return Err(StoreError::DestPopulated(dest.render()));
            }
        }
        let mut add: QuadSet =
            src.quads.iter().map(|q| rebase_quad(q, &src.address, dest, author)).collect();
        add.insert(Quad {
            author,
            subject: dest.clone(),
            predicate: reserved::fork_of(),
            object: Object::AddrAt(src.address.clone(), src.at_commit),
        });
        self.commit(author, secret, add, QuadSet::new())
    }

    /// Merges two addresses into `dest`. Non-conflicting quads pass through;
    /// every slot (subject, predicate) the sides fill differently must be
    /// covered by `resolution`. Swapping `a` and `b` yields the same set.
    #[allow(clippy::too_many_arguments)]
    pub fn merge(
        &mut self,
        a: &Address,
        b: &Address,
        dest: &Address,
        resolution: &BTreeMap<ConflictKey, Quad>,
        author: PeerId,
        secret: &SecretHandle,
    ) -> Result<CommitRecord, StoreError> {
        let ra = self.resolve(a)?;
        let rb = self.resolve(b)?;
        let qa: QuadSet =
            ra.quads.iter().map(|q| rebase_quad(q, &ra.address, dest, author)).collect();
        let qb: QuadSet =
            rb.quads.iter().map(|q| rebase_quad(q, &rb.address, dest, author)).collect();

        let slots_a = slot_map(&qa);
        let slots_b = slot_map(&qb);
        let mut add = QuadSet::new();
        let mut conflicts = Vec::new();
        for (key, objs_a) in &slots_a {
            match slots_b.get(key) {
                Some(objs_b) if objs_a != objs_b => {
                    if let Some(chosen) = resolution.get(key) {
                        add.insert(Quad {
                            author,
                            subject: key.subject.clone(),
                            predicate: key.predicate.clone(),
                            object: chosen.object.clone(),
                        });
                    } else {
                        conflicts.push(key.clone());
                    }
                }
                _ => {
                    add.extend(quads_for(key, objs_a, author));
                }
            }
        }
        for (key, objs_b) in &slots_b {
            if !slots_a.contains_key(key) {
                add.extend(quads_for(key, objs_b, author));
            }
        }
        if !conflicts.is_empty() {
            conflicts.sort();
            return Err(StoreError::UnresolvedConflicts(conflicts));
        }
        for (addr, at) in [(&ra.address, ra.at_commit), (&rb.address, rb.at_commit)] {
            add.insert(Quad {
                author,
                subject: dest.clone(),
                predicate: reserved::merge_of(),
                object: Object::AddrAt(addr.clone(), at),
            });
        }
        self.commit(author, secret, add, QuadSet::new())
    }

    pub fn put_blob(&mut self, content: &[u8], codec: &str) -> Result<BlobRef, StoreError> {
        let hash: [u8; 32] = Sha256::digest(content).into();
        let reference = BlobRef { hash, len: content.len() as u64, codec: codec.to_string() };
        match &self.root {
            Some(root) => {
                let path = blob_path(root, &hash);
                if !path.exists() {
                    fs::create_dir_all(path.parent().unwrap())?;
                    fs::write(path, content)?;
                }
            }
            None => {
                self.mem_blobs.entry(hash).or_insert_with(|| content.to_vec());
            }
        }
        Ok(reference)
    }

    pub fn get_blob(&self, reference: &BlobRef) -> Result<Vec<u8>, StoreError> {
        let content = match &self.root {
            Some(root) => {
                let path = blob_path(root, &reference.hash);
                if !path.exists() {
                    return Err(StoreError::UnknownBlob(reference.render()));
                }
                fs::read(path)?
            }
            None => self
                .mem_blobs
                .get(&reference.hash)
                .cloned()
                .ok_or_else(|| StoreError::UnknownBlob(reference.render()))?,
        };
        let hash: [u8; 32] = Sha256::digest(&content).into();
        if hash != reference.hash || content.len() as u64 != reference.len {
            return Err(StoreError::CorruptBlob(reference.render()));
        }
        Ok(content)
    }

    pub fn has_blob(&self, reference: &BlobRef) -> bool {
        match &self.root {
            Some(root) => blob_path(root, &reference.hash).exists(),
            None => self.mem_blobs.contains_key(&reference.hash),
        }
    }

    /// Every visible quad (all namespaces) matching the pattern.
    pub fn local_query(&self, pattern: &Pattern) -> QuadSet {
        self.namespaces
            .values()
            .flat_map(|ns| ns.visible.iter())
            .filter(|q| pattern.matches(q))
            .cloned()
            .collect()
    }

    /// A namespace's raw commit log (the export sidecar).
    pub fn export_log(&self, peer: &PeerId) -> Result<Vec<u8>, StoreError> {
        let ns = self.namespaces.get(peer).ok_or(StoreError::UnknownNamespace(*peer))?;
        let mut out = Vec::new();
        for commit in &ns.commits {
            let bytes = encode_commit(commit);
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    /// Replays an exported log, skipping records already present.
    pub fn import_log(&mut self, peer: PeerId, bytes: &[u8]) -> Result<usize, StoreError> {
        let malformed = |message: &str| StoreError::MalformedLog {
            peer,
            message: message.to_string(),
        };
        let mut ingested = 0;
        let mut at = 0usize;
        while at < bytes.len() {
            if at + 4 > bytes.len() {
                return Err(malformed("truncated length prefix"));
            }
            let len =
                u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
                    as usize;
            at += 4;
            if at + len > bytes.len() {
                return Err(malformed("truncated record"));
            }
            let commit = decode_commit(&bytes[at..at + len])
                .map_err(|e| malformed(&e.to_string()))?;
            at += len;
            if commit.author != peer {
                return Err(malformed("record for a different namespace"));
            }
            if self.ingest_commit(commit)? {
                ingested += 1;
            }
        }
        Ok(ingested)
    }
}

fn blob_path(root: &Path, hash: &[u8; 32]) -> PathBuf {
    let hex = hex::encode(hash);
    root.join("blobs").join(&hex[..2]).join(&hex[2..4]).join(&hex)
}

/// Moves a quad from under `source` to under `dest`, re-authoring it.
/// Subjects and predicates inside the source subtree shift with it; plain
/// address objects inside the subtree shift too, but pinned-at-commit
/// objects stay put (they point at history, not at the copy).
fn rebase_quad(q: &Quad, source: &Address, dest: &Address, author: PeerId) -> Quad {
    let shift = |addr: &Address| -> Address {
        match addr.tail_under(source) {
            Some(tail) => dest.descend(tail),
            None => addr.clone(),
        }
    };
    let object = match &q.object {
        Object::Addr(a) => Object::Addr(shift(a)),
        other => other.clone(),
    };
    Quad { author, subject: shift(&q.subject), predicate: shift(&q.predicate), object }
}

fn slot_map(quads: &QuadSet) -> BTreeMap<ConflictKey, QuadSet> {
    let mut out: BTreeMap<ConflictKey, QuadSet> = BTreeMap::new();
    for q in quads {
        out.entry(ConflictKey { subject: q.subject.clone(), predicate: q.predicate.clone() })
            .or_default()
            .insert(q.clone());
    }
    out
}

fn quads_for(key: &ConflictKey, objects: &QuadSet, author: PeerId) -> QuadSet {
    objects
        .iter()
        .map(|q| Quad {
            author,
            subject: key.subject.clone(),
            predicate: key.predicate.clone(),
            object: q.object.clone(),
        })
        .collect()
}

fn commit_body(
    parents: &[CommitId],
    author: PeerId,
    logical_time: u64,
    added: &QuadSet,
    removed: &QuadSet,
) -> Vec<u8> {
    let parent_text =
        parents.iter().map(CommitId::render).collect::<Vec<_>>().join(",");
    let mut out = Vec::new();
    out.extend_from_slice(COMMIT_DOMAIN.as_bytes());
    out.push(REC_SEP);
    out.extend_from_slice(parent_text.as_bytes());
    out.push(REC_SEP);
    out.extend_from_slice(author.render().as_bytes());
    out.push(REC_SEP);
    out.extend_from_slice(logical_time.to_string().as_bytes());
    out.push(REC_SEP);
    out.extend_from_slice(&canonical_quadset(added));
    out.push(REC_SEP);
    out.extend_from_slice(&canonical_quadset(removed));
    out
}

/// Wire/disk form of a commit: the hashed body plus the signature in hex.
pub fn encode_commit(commit: &CommitRecord) -> Vec<u8> {
    let mut out = commit_body(
        &commit.parents,
        commit.author,
        commit.logical_time,
        &commit.added,
        &commit.removed,
    );
    out.push(REC_SEP);
    out.extend_from_slice(hex::encode(commit.signature).as_bytes());
    out
}

pub fn decode_commit(bytes: &[u8]) -> Result<CommitRecord, String> {
    let fields: Vec<&[u8]> = bytes.split(|&b| b == REC_SEP).collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 commit fields, found {}", fields.len()));
    }
    let text = |i: usize| -> Result<&str, String> {
        std::str::from_utf8(fields[i]).map_err(|_| format!("field {i} is not utf-8"))
    };
    if text(0)? != COMMIT_DOMAIN {
        return Err("bad commit domain".into());
    }
    let mut parents = Vec::new();
    let parent_text = text(1)?;
    if !parent_text.is_empty() {
        for part in parent_text.split(',') {
            parents.push(CommitId::parse(part).ok_or("bad parent commit id")?);
        }
    }
    let author = PeerId::parse(text(2)?).map_err(|e| e.to_string())?;
    let logical_time: u64 = text(3)?.parse().map_err(|_| "bad logical time".to_string())?;
    let added: QuadSet =
        parse_canonical_quads(fields[4]).map_err(|e| e.to_string())?.into_iter().collect();
    let removed: QuadSet =
        parse_canonical_quads(fields[5]).map_err(|e| e.to_string())?.into_iter().collect();
    let sig_bytes = hex::decode(text(6)?).map_err(|_| "bad signature hex".to_string())?;
    let signature: [u8; 64] =
        sig_bytes.try_into().map_err(|_| "signature must be 64 bytes".to_string())?;
    let body = commit_body(&parents, author, logical_time, &added, &removed);
    let id = CommitId(Sha256::digest(&body).into());
    Ok(CommitRecord { id, parents, author, added, removed, logical_time, signature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::version::{Version, VersionReq};
    use crate::identity::generate_identity;
    use crate::linkstore::quad::Literal;

    fn ident(tag: &str) -> (IdentityRecord, SecretHandle) {
        generate_identity(Some(tag.as_bytes()), tag, "").unwrap()
    }

    fn addr(peer: PeerId, segs: &[&str]) -> Address {
        Address::peer_only(peer)
            .descend(&segs.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    fn quad(author: PeerId, subject: Address, pred: Address, object: Object) -> Quad {
        Quad { author, subject, predicate: pred, object }
    }

    fn token(t: &str) -> Object {
        Object::Lit(Literal::Token(t.to_string()))
    }

    fn fixture_quads(me: PeerId, nwb: PeerId) -> QuadSet {
        let root = addr(me, &["my-data"]);
        let mut quads = QuadSet::new();
        quads.insert(quad(me, root.clone(), reserved::type_pred(), Object::Addr(addr(nwb, &["NWBFile"]))));
        quads.insert(quad(
            me,
            root.clone(),
            addr(nwb, &["ElectricalSeries", "electrodes"]),
            Object::Lit(Literal::List(vec![
                crate::linkstore::quad::Num::Int(1),
                crate::linkstore::quad::Num::Int(2),
            ])),
        ));
        quads.insert(quad(me, root.clone(), root.child("note"), token("raw")));
        quads.insert(quad(me, root, reserved::version(), Object::Lit(Literal::Version(Version::parse("0.1.0").unwrap()))));
        quads
    }

    #[test]
    fn commit_then_resolve_returns_the_quads() {
        let (rec, secret) = ident("jonny");
        let (nwb, _) = ident("nwb");
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let quads = fixture_quads(rec.peer_id, nwb.peer_id);
        let c = store.commit(rec.peer_id, &secret, quads.clone(), QuadSet::new()).unwrap();
        assert_eq!(c.logical_time, 0);
        assert!(c.parents.is_empty());
        let got = store.resolve(&addr(rec.peer_id, &["my-data"])).unwrap();
        assert_eq!(got.quads, quads);
        assert_eq!(got.at_commit, c.id);
    }

    #[test]
    fn empty_commit_advances_the_head_only() {
        let (rec, secret) = ident("e");
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let a = store.commit(rec.peer_id, &secret, QuadSet::new(), QuadSet::new()).unwrap();
        let b = store.commit(rec.peer_id, &secret, QuadSet::new(), QuadSet::new()).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(b.parents, vec![a.id]);
        assert_eq!(store.head(&rec.peer_id), Some(b.id));
        assert!(store.visible(&rec.peer_id).unwrap().is_empty());
    }

    #[test]
    fn removal_rules_are_enforced() {
        let (rec, secret) = ident("r");
        let (other, _) = ident("o");
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let me = rec.peer_id;
        let q = quad(me, addr(me, &["t"]), addr(me, &["t", "p"]), token("x"));
        let foreign = quad(other.peer_id, addr(me, &["t"]), addr(me, &["t", "p"]), token("y"));

        let mut add = QuadSet::new();
        add.insert(foreign.clone());
        assert!(matches!(
            store.commit(me, &secret, add, QuadSet::new()),
            Err(StoreError::ForeignAdd { .. })
        ));

        let mut add = QuadSet::new();
        add.insert(q.clone());
        store.commit(me, &secret, add, QuadSet::new()).unwrap();

        let mut rm = QuadSet::new();
        rm.insert(foreign);
        assert!(matches!(
            store.commit(me, &secret, QuadSet::new(), rm),
            Err(StoreError::ForeignRemoval)
        ));

        let mut rm = QuadSet::new();
        rm.insert(quad(me, addr(me, &["t"]), addr(me, &["t", "p"]), token("absent")));
        assert!(matches!(
            store.commit(me, &secret, QuadSet::new(), rm),
            Err(StoreError::RemoveMissing)
        ));

        let mut rm = QuadSet::new();
        rm.insert(q.clone());
        store.commit(me, &secret, QuadSet::new(), rm).unwrap();
        assert!(store.resolve(&addr(me, &["t"])).unwrap().quads.is_empty());
        // history still shows both commits
        assert_eq!(store.history(&addr(me, &["t"])).unwrap().len(), 2);
    }

    #[test]
    fn version_pins_resolve_against_snapshots() {
        let (rec, secret) = ident("pin");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let root = addr(me, &["my-data"]);

        let mut add = QuadSet::new();
        add.insert(quad(me, root.clone(), reserved::version(), Object::Lit(Literal::Version(Version::parse("0.1.0").unwrap()))));
        add.insert(quad(me, root.child("raw"), root.child("raw").child("note"), token("first")));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();

        let mut add = QuadSet::new();
        add.insert(quad(me, root.clone(), reserved::version(), Object::Lit(Literal::Version(Version::parse("0.2.0").unwrap()))));
        add.insert(quad(me, root.child("raw"), root.child("raw").child("note"), token("second")));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();

        // pinned to v0.1.0: only the first note exists in that snapshot
        let mut pinned = root.child("raw");
        pinned.pins.insert(1, VersionReq::parse("0.1.0").unwrap());
        let got = store.resolve(&pinned).unwrap();
        assert_eq!(got.quads.len(), 1);
        assert!(got.quads.iter().any(|q| q.object == token("first")));

        // unpinned: both notes are visible
        assert_eq!(store.resolve(&root.child("raw")).unwrap().quads.len(), 2);

        // unsatisfiable pin
        let mut bad = root.child("raw");
        bad.pins.insert(1, VersionReq::parse("^0.3.*").unwrap());
        assert!(matches!(
            store.resolve(&bad),
            Err(StoreError::NoMatchingVersion { .. })
        ));
    }

    #[test]
    fn history_is_newest_first_and_subtree_scoped() {
        let (rec, secret) = ident("h");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let a = addr(me, &["a"]);
        let b = addr(me, &["b"]);
        let mut ids = Vec::new();
        for (i, root) in [&a, &b, &a].iter().enumerate() {
            let mut add = QuadSet::new();
            add.insert(quad(me, (*root).clone(), root.child("n"), Object::Lit(Literal::Int(i as i64))));
            ids.push(store.commit(me, &secret, add, QuadSet::new()).unwrap().id);
        }
        let hist = store.history(&a).unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(hist[0].id, ids[2]);
        assert_eq!(hist[1].id, ids[0]);
        assert!(hist[0].logical_time > hist[1].logical_time);
        assert_eq!(store.history(&addr(me, &["fresh"])).unwrap().len(), 0);
    }

    #[test]
    fn diff_is_a_sound_patch() {
        let (rec, secret) = ident("d");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let s = addr(me, &["s"]);
        let q1 = quad(me, s.clone(), s.child("p"), token("one"));
        let q2 = quad(me, s.clone(), s.child("p"), token("two"));

        let mut add = QuadSet::new();
        add.insert(q1.clone());
        let a = store.commit(me, &secret, add, QuadSet::new()).unwrap();
        let mut add = QuadSet::new();
        add.insert(q2.clone());
        let mut rm = QuadSet::new();
        rm.insert(q1.clone());
        let b = store.commit(me, &secret, add.clone(), rm.clone()).unwrap();

        assert_eq!(store.diff(&a.id, &a.id).unwrap(), (QuadSet::new(), QuadSet::new()));
        assert_eq!(store.diff(&a.id, &b.id).unwrap(), (add, rm));
        // and the reverse direction swaps the sides
        let (ra, rr) = store.diff(&b.id, &a.id).unwrap();
        assert!(ra.contains(&q1) && rr.contains(&q2));
    }

    #[test]
    fn fork_pins_the_source_commit() {
        let (rec, secret) = ident("f");
        let (friend_rec, friend_secret) = ident("fr");
        let me = rec.peer_id;
        let friend = friend_rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        store.register_identity(&friend_rec).unwrap();

        let src = addr(me, &["bin-spikes"]);
        let mut add = QuadSet::new();
        add.insert(quad(me, src.clone(), reserved::type_pred(), token("analysis")));
        add.insert(quad(me, src.clone(), src.child("bin_width"), Object::Lit(Literal::Int(10))));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();
        let src_head = store.head(&me).unwrap();

        let dest = addr(friend, &["bin-spikes"]);
        store.fork(&src, &dest, friend, &friend_secret).unwrap();
        let forked = store.resolve(&dest).unwrap();
        assert_eq!(forked.quads.len(), 3);
        // slot predicates moved with the subtree and the copy is re-authored
        assert!(forked.quads.iter().any(|q| {
            q.predicate == dest.child("bin_width") && q.author == friend
        }));
        let prov: Vec<_> = forked
            .quads
            .iter()
            .filter(|q| q.predicate == reserved::fork_of())
            .collect();
        assert_eq!(prov.len(), 1);
        assert_eq!(prov[0].object, Object::AddrAt(src.clone(), src_head));

        // later source commits do not touch the fork
        let before = forked.quads.clone();
        let mut add = QuadSet::new();
        add.insert(quad(me, src.clone(), src.child("bin_width"), Object::Lit(Literal::Int(99))));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();
        assert_eq!(store.resolve(&dest).unwrap().quads, before);

        // and the destination now refuses a second fork
        assert!(matches!(
            store.fork(&src, &dest, friend, &friend_secret),
            Err(StoreError::DestPopulated(_))
        ));
    }

    #[test]
    fn fork_of_an_empty_subtree_is_just_provenance() {
        let (rec, secret) = ident("fe");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let mut add = QuadSet::new();
        add.insert(quad(me, addr(me, &["other"]), addr(me, &["other", "p"]), token("x")));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();
        store.fork(&addr(me, &["empty"]), &addr(me, &["copy"]), me, &secret).unwrap();
        let got = store.resolve(&addr(me, &["copy"])).unwrap();
        assert_eq!(got.quads.len(), 1);
        assert_eq!(got.quads.iter().next().unwrap().predicate, reserved::fork_of());
    }

    #[test]
    fn merge_is_symmetric_and_conflicts_must_be_covered() {
        let (rec, secret) = ident("m");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let a = addr(me, &["a"]);
        let b = addr(me, &["b"]);
        let mut add = QuadSet::new();
        add.insert(quad(me, a.clone(), a.child("shared"), token("same")));
        add.insert(quad(me, a.clone(), a.child("only-a"), token("left")));
        add.insert(quad(me, a.clone(), a.child("color"), token("red")));
        add.insert(quad(me, b.clone(), b.child("shared"), token("same")));
        add.insert(quad(me, b.clone(), b.child("only-b"), token("right")));
        add.insert(quad(me, b.clone(), b.child("color"), token("blue")));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();

        let dest = addr(me, &["merged"]);
        let err = store.merge(&a, &b, &dest, &BTreeMap::new(), me, &secret).unwrap_err();
        let StoreError::UnresolvedConflicts(keys) = err else {
            panic!("expected conflicts");
        };
        assert_eq!(keys.len(), 1);
        assert_eq!(keys[0].predicate, dest.child("color"));

        let mut resolution = BTreeMap::new();
        resolution.insert(
            keys[0].clone(),
            quad(me, dest.clone(), dest.child("color"), token("red")),
        );
        store.merge(&a, &b, &dest, &resolution, me, &secret).unwrap();
        let merged = store.resolve(&dest).unwrap().quads;
        assert!(merged.iter().any(|q| q.object == token("red")));
        assert!(!merged.iter().any(|q| q.object == token("blue")));
        assert!(merged.iter().any(|q| q.object == token("left")));
        assert!(merged.iter().any(|q| q.object == token("right")));
        assert_eq!(merged.iter().filter(|q| q.predicate == reserved::merge_of()).count(), 2);

        // swapped inputs produce the identical set at a fresh destination
        let dest2 = addr(me, &["merged2"]);
        let mut resolution2 = BTreeMap::new();
        resolution2.insert(
            ConflictKey { subject: dest2.clone(), predicate: dest2.child("color") },
            quad(me, dest2.clone(), dest2.child("color"), token("red")),
        );
        store.merge(&b, &a, &dest2, &resolution2, me, &secret).unwrap();
        let swapped = store.resolve(&dest2).unwrap().quads;
        let rebased: QuadSet =
            merged.iter().map(|q| rebase_quad(q, &dest, &dest2, me)).collect();
        // mergeOf objects differ only in argument order, which the set erases
        assert_eq!(rebased, swapped);
    }

    #[test]
    fn merging_a_fork_back_adds_only_provenance() {
        let (rec, secret) = ident("mf");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let x = addr(me, &["x"]);
        let mut add = QuadSet::new();
        add.insert(quad(me, x.clone(), reserved::type_pred(), token("thing")));
        add.insert(quad(me, x.child("lea"), x.child("lea").child("p"), token("deep")));
        store.commit(me, &secret, add.clone(), QuadSet::new()).unwrap();
        let f = addr(me, &["fork"]);
        store.fork(&x, &f, me, &secret).unwrap();
        let dest = addr(me, &["joined"]);
        store.merge(&f, &x, &dest, &BTreeMap::new(), me, &secret).unwrap();
        let merged = store.resolve(&dest).unwrap().quads;
        let expected_data: QuadSet =
            add.iter().map(|q| rebase_quad(q, &x, &dest, me)).collect();
        let data: QuadSet = merged
            .iter()
            .filter(|q| q.predicate != reserved::fork_of() && q.predicate != reserved::merge_of())
            .cloned()
            .collect();
        assert_eq!(data, expected_data);
        assert_eq!(merged.len(), expected_data.len() + 3);
    }

    #[test]
    fn blobs_round_trip_and_detect_corruption() {
        let dir = std::env::temp_dir().join(format!("folkfed-blob-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut store = LinkStore::open(&dir).unwrap();
        let r0 = store.put_blob(b"", "bin").unwrap();
        assert_eq!(r0.len, 0);
        assert_eq!(store.get_blob(&r0).unwrap(), b"");
        let r1 = store.put_blob(b"spike times", "csv").unwrap();
        let r2 = store.put_blob(b"spike times", "csv").unwrap();
        assert_eq!(r1, r2);
        assert_eq!(store.get_blob(&r1).unwrap(), b"spike times");

        // flip a bit on disk
        let path = blob_path(&dir, &r1.hash);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.get_blob(&r1), Err(StoreError::CorruptBlob(_))));

        let missing = BlobRef { hash: [9u8; 32], len: 1, codec: "bin".into() };
        assert!(matches!(store.get_blob(&missing), Err(StoreError::UnknownBlob(_))));
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn local_query_filters_on_every_bound_field() {
        let (rec, secret) = ident("q");
        let (nwb, _) = ident("nwb");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        store.commit(me, &secret, fixture_quads(me, nwb.peer_id), QuadSet::new()).unwrap();

        let all = store.local_query(&Pattern::default());
        assert_eq!(all.len(), 4);

        let typed = store.local_query(&Pattern {
            predicate: Some(reserved::type_pred()),
            object: Some(Object::Addr(addr(nwb.peer_id, &["NWBFile"]))),
            ..Pattern::default()
        });
        assert_eq!(typed.len(), 1);
        assert_eq!(typed.iter().next().unwrap().subject, addr(me, &["my-data"]));

        let none = store.local_query(&Pattern {
            author: Some(nwb.peer_id),
            ..Pattern::default()
        });
        assert!(none.is_empty());
        assert!(LinkStore::memory().local_query(&Pattern::default()).is_empty());
    }

    #[test]
    fn store_reopens_to_the_same_state() {
        let dir = std::env::temp_dir().join(format!("folkfed-store-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let (rec, secret) = ident("p");
        let (nwb, _) = ident("nwb");
        let me = rec.peer_id;
        let head;
        {
            let mut store = LinkStore::open(&dir).unwrap();
            store.register_identity(&rec).unwrap();
            store.commit(me, &secret, fixture_quads(me, nwb.peer_id), QuadSet::new()).unwrap();
            let mut rm = QuadSet::new();
            rm.insert(quad(me, addr(me, &["my-data"]), addr(me, &["my-data", "note"]), token("raw")));
            head = store.commit(me, &secret, QuadSet::new(), rm).unwrap().id;
        }
        let store = LinkStore::open(&dir).unwrap();
        assert_eq!(store.head(&me), Some(head));
        assert_eq!(store.resolve(&addr(me, &["my-data"])).unwrap().quads.len(), 3);
        assert_eq!(store.identity(&me), Some(&rec));
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn tampered_logs_are_rejected() {
        let (rec, secret) = ident("t");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let mut add = QuadSet::new();
        add.insert(quad(me, addr(me, &["s"]), addr(me, &["s", "p"]), token("v")));
        store.commit(me, &secret, add, QuadSet::new()).unwrap();
        let mut log = store.export_log(&me).unwrap();

        let mut fresh = LinkStore::memory();
        fresh.register_identity(&rec).unwrap();
        assert_eq!(fresh.import_log(me, &log).unwrap(), 1);
        // importing again is a no-op
        assert_eq!(fresh.import_log(me, &log).unwrap(), 0);

        // flip a byte inside the record body: either the id check or the
        // canonical parse refuses it
        let n = log.len();
        log[n - 70] ^= 1;
        let mut fresh = LinkStore::memory();
        fresh.register_identity(&rec).unwrap();
        assert!(fresh.import_log(me, &log).is_err());
    }

    #[test]
    fn commits_are_signed_and_verified_on_ingest() {
        let (rec, secret) = ident("s");
        let (other_rec, other_secret) = ident("imposter");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let mut add = QuadSet::new();
        add.insert(quad(me, addr(me, &["s"]), addr(me, &["s", "p"]), token("v")));
        let commit = store.commit(me, &secret, add.clone(), QuadSet::new()).unwrap();

        // an imposter signing the same body is rejected downstream
        let body = commit_body(&commit.parents, me, 0, &add, &QuadSet::new());
        let forged = CommitRecord { signature: other_secret.sign(&body), ..commit.clone() };
        let mut fresh = LinkStore::memory();
        fresh.register_identity(&rec).unwrap();
        let _ = other_rec;
        assert!(matches!(fresh.ingest_commit(forged), Err(StoreError::BadCommitSignature)));

        // the genuine record ingests
        let mut fresh = LinkStore::memory();
        fresh.register_identity(&rec).unwrap();
        assert!(fresh.ingest_commit(commit.clone()).unwrap());
        assert!(!fresh.ingest_commit(commit).unwrap());
    }

    #[test]
    fn commit_encoding_round_trips() {
        let (rec, secret) = ident("enc");
        let (nwb, _) = ident("nwb");
        let me = rec.peer_id;
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        let c = store.commit(me, &secret, fixture_quads(me, nwb.peer_id), QuadSet::new()).unwrap();
        let decoded = decode_commit(&encode_commit(&c)).unwrap();
        assert_eq!(decoded, c);
    }

    #[test]
    fn secret_must_match_the_registered_key() {
        let (rec, _) = ident("owner");
        let (_, wrong) = ident("wrong");
        let mut store = LinkStore::memory();
        store.register_identity(&rec).unwrap();
        assert!(matches!(
            store.commit(rec.peer_id, &wrong, QuadSet::new(), QuadSet::new()),
            Err(StoreError::NotOwner(_))
        ));
        assert!(matches!(
            LinkStore::memory().commit(rec.peer_id, &wrong, QuadSet::new(), QuadSet::new()),
            Err(StoreError::UnregisteredIdentity(_))
        ));
    }
}
