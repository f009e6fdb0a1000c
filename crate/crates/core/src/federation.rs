//! Federations: voluntary collectives of peers.
//!
//! A federation is itself a peer. It carries a policy (which activities it
//! accepts, which schema family it admits, its ratio rules), a byte-transfer
//! ledger with bounties, a follow graph that scopes whose content members
//! see, and a tracker-style index of announced quads. All mutation happens
//! through two signed inputs: activities (join, leave, follow, announce) and
//! dual-signed transfer reports. Handlers are pure, taking the old state and
//! returning the new one, so replaying the same inputs always lands on the
//! same state.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::address::Address;
use crate::identity::{self, IdentityRecord, PeerId, SecretHandle};
use crate::linkstore::quad::{canonical_quadset, parse_canonical_quads, reserved, Quad};
use crate::linkstore::{CommitId, LinkStore, Literal, Object, Pattern, QuadSet, StoreError};
use crate::schema::{self, SchemaError};

const ACTIVITY_DOMAIN: &[u8] = b"folkfed/activity/v1";
const TRANSFER_DOMAIN: &[u8] = b"folkfed/transfer/v1";
const RECIPIENT_DOMAIN: &[u8] = b"folkfed/recipient/v1";
const FIELD_SEP: u8 = 0x1F;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("activity signature does not verify for @{0}")]
    BadSignature(PeerId),
    #[error("@{0} is not a member")]
    NotAMember(PeerId),
    #[error("transfer report rejected: {0}")]
    BadReport(String),
    #[error("transfer report was already recorded")]
    DuplicateReport,
    #[error("sponsor surplus {available} cannot cover a bounty of {requested}")]
    InsufficientSurplus { available: u64, requested: u64 },
    #[error("no bounty with id {0}")]
    UnknownBounty(u64),
    #[error("bounty {0} is already fulfilled")]
    BountyClosed(u64),
    #[error("malformed federation state: {0}")]
    MalformedState(String),
}

/// How much of an object a requester may see. Levels are ordered so a
/// requester holding several applicable grants gets the most generous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GrantLevel {
    Deny,
    /// Ciphertext shards only; useful for replication without disclosure.
    Encrypted,
    /// Quads but no blob bytes.
    Metadata,
    Full,
}

impl GrantLevel {
    /// The vocabulary address naming this level in permission documents.
    /// Deny has no address: it is the absence of a grant.
    pub fn share_address(self) -> Option<Address> {
        let name = match self {
            GrantLevel::Deny => return None,
            GrantLevel::Encrypted => "shareEncrypted",
            GrantLevel::Metadata => "shareMetadata",
            GrantLevel::Full => "shareData",
        };
        Some(Address::new(reserved::fed_peer(), vec![name]))
    }

    pub fn from_share_address(addr: &Address) -> Option<GrantLevel> {
        if addr.peer != reserved::fed_peer() || addr.segments.len() != 1 {
            return None;
        }
        match addr.segments[0].as_str() {
            "shareEncrypted" => Some(GrantLevel::Encrypted),
            "shareMetadata" => Some(GrantLevel::Metadata),
            "shareData" => Some(GrantLevel::Full),
            _ => None,
        }
    }
}

/// Activity vocabulary. Kinds outside the known set travel as `Other` and
/// are always rejected, which keeps old peers safe against new verbs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ActivityKind {
    Join,
    Leave,
    Follow,
    Announce,
    Report,
    Other(String),
}

fn as_peer() -> PeerId {
    PeerId::reserved("as")
}

impl ActivityKind {
    pub fn token(&self) -> &str {
        match self {
            ActivityKind::Join => "Join",
            ActivityKind::Leave => "Leave",
            ActivityKind::Follow => "Follow",
            ActivityKind::Announce => "Announce",
            ActivityKind::Report => "Report",
            ActivityKind::Other(t) => t,
        }
    }

    pub fn from_token(token: &str) -> ActivityKind {
        match token {
            "Join" => ActivityKind::Join,
            "Leave" => ActivityKind::Leave,
            "Follow" => ActivityKind::Follow,
            "Announce" => ActivityKind::Announce,
            "Report" => ActivityKind::Report,
            other => ActivityKind::Other(other.to_string()),
        }
    }

    pub fn address(&self) -> Address {
        Address::new(as_peer(), vec![self.token()])
    }

    pub fn from_address(addr: &Address) -> Option<ActivityKind> {
        if addr.peer != as_peer() || addr.segments.len() != 1 {
            return None;
        }
        Some(ActivityKind::from_token(&addr.segments[0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Response {
    Accept,
    Reject,
}

impl Response {
    pub fn address(self) -> Address {
        let name = match self {
            Response::Accept => "Accept",
            Response::Reject => "Reject",
        };
        Address::new(as_peer(), vec![name])
    }

    pub fn from_address(addr: &Address) -> Option<Response> {
        if addr.peer != as_peer() || addr.segments.len() != 1 {
            return None;
        }
        match addr.segments[0].as_str() {
            "Accept" => Some(Response::Accept),
            "Reject" => Some(Response::Reject),
            _ => None,
        }
    }
}

/// A signed message from one peer to a federation.
#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    pub kind: ActivityKind,
    pub actor: PeerId,
    pub payload: QuadSet,
    pub signature: [u8; 64],
}

impl Activity {
    pub fn new(kind: ActivityKind, actor: PeerId, payload: QuadSet, secret: &SecretHandle) -> Self {
        let mut activity = Activity {
            kind,
            actor,
            payload,
            signature: [0; 64],
        };
        activity.signature = identity::sign(secret, &activity.signing_bytes());
        activity
    }

    /// A Follow whose payload carries the conventional edge quads: who
    /// follows whom, and to what depth the transitive feed should extend.
    pub fn follow(actor: PeerId, target: PeerId, depth: u32, secret: &SecretHandle) -> Self {
        let fed = reserved::fed_peer();
        let mut payload = QuadSet::new();
        payload.insert(Quad {
            author: actor,
            subject: Address::peer_only(actor),
            predicate: Address::new(fed, vec!["follows"]),
            object: Object::Addr(Address::peer_only(target)),
        });
        payload.insert(Quad {
            author: actor,
            subject: Address::peer_only(target),
            predicate: Address::new(fed, vec!["followDepth"]),
            object: Object::Lit(Literal::Int(i64::from(depth))),
        });
        Activity::new(ActivityKind::Follow, actor, payload, secret)
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ACTIVITY_DOMAIN);
        out.push(FIELD_SEP);
        out.extend_from_slice(self.kind.token().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.actor.render().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(&canonical_quadset(&self.payload));
        out
    }

    pub fn verify(&self, actor: &IdentityRecord) -> bool {
        actor.peer_id == self.actor
            && identity::verify(actor, &self.signing_bytes(), &self.signature)
    }

    /// Wire form: kind, actor, signature, canonical payload, 0x1F-separated.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.kind.token().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.actor.render().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(hex::encode(self.signature).as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(&canonical_quadset(&self.payload));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Activity, FederationError> {
        let bad = |m: &str| FederationError::MalformedState(format!("activity: {m}"));
        let mut parts = bytes.splitn(4, |b| *b == FIELD_SEP);
        let kind = parts.next().ok_or_else(|| bad("missing kind"))?;
        let actor = parts.next().ok_or_else(|| bad("missing actor"))?;
        let sig = parts.next().ok_or_else(|| bad("missing signature"))?;
        let payload = parts.next().ok_or_else(|| bad("missing payload"))?;
        let kind = std::str::from_utf8(kind).map_err(|_| bad("kind not utf-8"))?;
        let actor = std::str::from_utf8(actor)
            .ok()
            .and_then(|t| PeerId::parse(t).ok())
            .ok_or_else(|| bad("bad actor id"))?;
        let sig: [u8; 64] = hex::decode(sig)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("bad signature"))?;
        let payload = parse_canonical_quads(payload)
            .map_err(|e| bad(&e.to_string()))?
            .into_iter()
            .collect();
        Ok(Activity {
            kind: ActivityKind::from_token(kind),
            actor,
            payload,
            signature: sig,
        })
    }
}

/// The standing rules of a federation.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    /// Per-kind response. Kinds without an entry are rejected.
    pub on_receive: BTreeMap<ActivityKind, Response>,
    /// If set, only types whose extends chain passes through this address
    /// may be announced as vocabulary.
    pub allow_schema: Option<Address>,
    /// Upload/download ratio a member must keep once past the grace volume.
    pub min_ratio: f64,
    /// Bytes a member may download before the ratio starts to bind.
    pub grace_bytes: u64,
    /// Subtrees whose transfers count toward nobody's ledger.
    pub freeleech: BTreeSet<Address>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            on_receive: BTreeMap::new(),
            allow_schema: None,
            min_ratio: 0.0,
            grace_bytes: 0,
            freeleech: BTreeSet::new(),
        }
    }
}

impl Policy {
    /// An open-door policy: joins, leaves, follows and announces accepted.
    pub fn open() -> Self {
        let mut on_receive = BTreeMap::new();
        on_receive.insert(ActivityKind::Join, Response::Accept);
        on_receive.insert(ActivityKind::Leave, Response::Accept);
        on_receive.insert(ActivityKind::Follow, Response::Accept);
        on_receive.insert(ActivityKind::Announce, Response::Accept);
        on_receive.insert(ActivityKind::Report, Response::Accept);
        Policy {
            on_receive,
            ..Policy::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BountyStatus {
    Open,
    Fulfilled,
}

/// A standing offer: upload credit for whoever provides the wanted data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bounty {
    pub id: u64,
    pub sponsor: PeerId,
    pub credit_bytes: u64,
    pub wanted: Address,
    pub status: BountyStatus,
    pub evidence: Option<CommitId>,
}

/// A dual-signed statement that `bytes` moved from uploader to downloader.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub uploader: PeerId,
    pub downloader: PeerId,
    pub bytes: u64,
    pub selector: Address,
    pub uploader_sig: [u8; 64],
    pub downloader_sig: [u8; 64],
}

impl TransferReport {
    pub fn new(
        uploader: &SecretHandle,
        uploader_peer: PeerId,
        downloader: &SecretHandle,
        downloader_peer: PeerId,
        bytes: u64,
        selector: Address,
    ) -> Self {
        let mut report = TransferReport {
            uploader: uploader_peer,
            downloader: downloader_peer,
            bytes,
            selector,
            uploader_sig: [0; 64],
            downloader_sig: [0; 64],
        };
        let msg = report.signing_bytes();
        report.uploader_sig = identity::sign(uploader, &msg);
        report.downloader_sig = identity::sign(downloader, &msg);
        report
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TRANSFER_DOMAIN);
        for field in [
            self.uploader.render(),
            self.downloader.render(),
            self.bytes.to_string(),
            self.selector.render(),
        ] {
            out.push(FIELD_SEP);
            out.extend_from_slice(field.as_bytes());
        }
        out
    }

    /// Identity of the report for dedup: both parties signed these bytes.
    pub fn report_id(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.signing_bytes());
        h.update(self.uploader_sig);
        h.update(self.downloader_sig);
        h.finalize().into()
    }
}

/// Everything a federation remembers. The address points into the
/// federation's own namespace, where the state persists as quads.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub address: Address,
    pub members: BTreeSet<PeerId>,
    pub policy: Policy,
    /// (follower, followed) -> transitive depth of the follow.
    pub follows: BTreeMap<(PeerId, PeerId), u32>,
    pub ledger: BTreeMap<PeerId, LedgerEntry>,
    /// Bounty credit each sponsor has pledged, held against their surplus.
    pub committed_credit: BTreeMap<PeerId, u64>,
    pub bounties: Vec<Bounty>,
    /// Announced quads per member; the tracker index queries scan.
    pub index: BTreeMap<PeerId, QuadSet>,
    pub seen_reports: BTreeSet<[u8; 32]>,
}

impl FederationState {
    pub fn new(address: Address, policy: Policy) -> Self {
        FederationState {
            address,
            members: BTreeSet::new(),
            policy,
            follows: BTreeMap::new(),
            ledger: BTreeMap::new(),
            committed_credit: BTreeMap::new(),
            bounties: Vec::new(),
            index: BTreeMap::new(),
            seen_reports: BTreeSet::new(),
        }
    }

    pub fn federation_peer(&self) -> PeerId {
        self.address.peer
    }

    pub fn is_member(&self, peer: &PeerId) -> bool {
        self.members.contains(peer)
    }
}

/// Applies one signed activity. Pure: the old state is untouched, and the
/// same state + activity always produces the same result, so logs replay.
pub fn handle_activity(
    state: &FederationState,
    activity: &Activity,
    actor: &IdentityRecord,
) -> Result<(FederationState, Response), FederationError> {
    if !activity.verify(actor) {
        return Err(FederationError::BadSignature(activity.actor));
    }
    let response = match activity.kind {
        // Unknown verbs never pass, whatever the policy table says.
        ActivityKind::Other(_) => Response::Reject,
        // A member can always walk out; a stranger has nothing to leave.
        ActivityKind::Leave => {
            if state.is_member(&activity.actor) {
                Response::Accept
            } else {
                Response::Reject
            }
        }
        ref kind => state
            .policy
            .on_receive
            .get(kind)
            .copied()
            .unwrap_or(Response::Reject),
    };
    if response == Response::Reject {
        return Ok((state.clone(), Response::Reject));
    }
    let mut next = state.clone();
    match activity.kind {
        ActivityKind::Join => {
            next.members.insert(activity.actor);
            if !activity.payload.is_empty() {
                next.index
                    .entry(activity.actor)
                    .or_default()
                    .extend(activity.payload.iter().cloned());
            }
        }
        ActivityKind::Leave => {
            next.members.remove(&activity.actor);
            next.index.remove(&activity.actor);
            next.follows.retain(|(from, _), _| *from != activity.actor);
        }
        ActivityKind::Follow => {
            for (target, depth) in follow_edges(&activity.payload, &activity.actor) {
                next.follows.insert((activity.actor, target), depth);
            }
        }
        ActivityKind::Announce => {
            if !state.is_member(&activity.actor) {
                return Ok((state.clone(), Response::Reject));
            }
            next.index
                .entry(activity.actor)
                .or_default()
                .extend(activity.payload.iter().cloned());
        }
        // Accounting runs through record_transfer, which needs both
        // identities; accepting the activity only acknowledges receipt.
        ActivityKind::Report => {}
        ActivityKind::Other(_) => unreachable!(),
    }
    Ok((next, Response::Accept))
}

/// Reads follow edges out of an activity payload: `follows` quads name the
/// targets, `followDepth` quads (subject = target root) set their depth.
fn follow_edges(payload: &QuadSet, actor: &PeerId) -> Vec<(PeerId, u32)> {
    let fed = reserved::fed_peer();
    let follows_pred = Address::new(fed, vec!["follows"]);
    let depth_pred = Address::new(fed, vec!["followDepth"]);
    let mut depths: BTreeMap<PeerId, u32> = BTreeMap::new();
    for q in payload {
        if q.predicate == depth_pred && q.subject.segments.is_empty() {
            if let Object::Lit(Literal::Int(d)) = &q.object {
                if *d >= 0 {
                    depths.insert(q.subject.peer, *d as u32);
                }
            }
        }
    }
    let mut edges = Vec::new();
    for q in payload {
        if q.predicate != follows_pred || q.subject != Address::peer_only(*actor) {
            continue;
        }
        if let Object::Addr(target) = &q.object {
            if target.segments.is_empty() {
                let depth = depths.get(&target.peer).copied().unwrap_or(1);
                edges.push((target.peer, depth));
            }
        }
    }
    edges
}

/// Adds a member's announced quads to the index outside of an activity.
pub fn index_announce(
    state: &FederationState,
    member: PeerId,
    summary: &QuadSet,
) -> Result<FederationState, FederationError> {
    if !state.is_member(&member) {
        return Err(FederationError::NotAMember(member));
    }
    let mut next = state.clone();
    next.index
        .entry(member)
        .or_default()
        .extend(summary.iter().cloned());
    Ok(next)
}

/// Peers whose announcements contain at least one quad matching the
/// pattern. A hint, not an answer: querying each hinted peer gives the
/// same results as querying everyone, only with less fan-out.
pub fn hint(state: &FederationState, pattern: &Pattern) -> BTreeSet<PeerId> {
    let mut out = BTreeSet::new();
    for (peer, quads) in &state.index {
        if quads.iter().any(|q| pattern.matches(q)) {
            out.insert(*peer);
        }
    }
    out
}

/// The peers whose content `origin` sees. Each of origin's own follow
/// edges opens a corridor: the followed peer, plus anything reachable from
/// them over further follow edges within the declared depth.
pub fn view_scope(state: &FederationState, origin: &PeerId) -> BTreeSet<PeerId> {
    let mut visible = BTreeSet::new();
    visible.insert(*origin);
    for ((from, to), depth) in &state.follows {
        if from != origin || *depth == 0 {
            continue;
        }
        // Breadth-first out to depth-1 further hops beyond the first edge.
        let mut dist: BTreeMap<PeerId, u32> = BTreeMap::new();
        dist.insert(*to, 0);
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(*to);
        while let Some(peer) = frontier.pop_front() {
            let d = dist[&peer];
            if d + 1 >= *depth {
                continue;
            }
            for ((f, t), _) in &state.follows {
                if *f == peer && !dist.contains_key(t) {
                    dist.insert(*t, d + 1);
                    frontier.push_back(*t);
                }
            }
        }
        visible.extend(dist.keys().copied());
    }
    visible
}

/// Records a dual-signed transfer into the ledger. Freeleech selectors
/// exempt the transfer entirely: neither side's counters move, because a
/// ledger that counts one side of an exempt transfer cannot balance.
pub fn record_transfer(
    state: &FederationState,
    report: &TransferReport,
    uploader: &IdentityRecord,
    downloader: &IdentityRecord,
) -> Result<FederationState, FederationError> {
    if report.bytes == 0 {
        return Err(FederationError::BadReport("zero bytes".into()));
    }
    if uploader.peer_id != report.uploader || downloader.peer_id != report.downloader {
        return Err(FederationError::BadReport(
            "identities do not match the report".into(),
        ));
    }
    let msg = report.signing_bytes();
    if !identity::verify(uploader, &msg, &report.uploader_sig) {
        return Err(FederationError::BadReport("uploader signature".into()));
    }
    if !identity::verify(downloader, &msg, &report.downloader_sig) {
        return Err(FederationError::BadReport("downloader signature".into()));
    }
    let id = report.report_id();
    if state.seen_reports.contains(&id) {
        return Err(FederationError::DuplicateReport);
    }
    let mut next = state.clone();
    next.seen_reports.insert(id);
    let freeleech = state
        .policy
        .freeleech
        .iter()
        .any(|sel| report.selector.is_under(sel));
    if !freeleech {
        next.ledger.entry(report.uploader).or_default().bytes_up += report.bytes;
        next.ledger.entry(report.downloader).or_default().bytes_down += report.bytes;
    }
    Ok(next)
}

/// Whether a peer is in good standing: under the grace volume, or keeping
/// the required ratio. A zero ratio disables the check.
pub fn check_ratio(state: &FederationState, peer: &PeerId) -> bool {
    let entry = state.ledger.get(peer).copied().unwrap_or_default();
    entry.bytes_down <= state.policy.grace_bytes
        || entry.bytes_up as f64 >= state.policy.min_ratio * entry.bytes_down as f64
}

/// Upload surplus a sponsor can still pledge: what they have uploaded,
/// minus what the ratio obliges them to keep, minus pledges already made.
fn spendable_surplus(state: &FederationState, sponsor: &PeerId) -> f64 {
    let entry = state.ledger.get(sponsor).copied().unwrap_or_default();
    let committed = state.committed_credit.get(sponsor).copied().unwrap_or(0);
    entry.bytes_up as f64 - state.policy.min_ratio * entry.bytes_down as f64 - committed as f64
}

/// Posts a bounty, holding the credit against the sponsor's surplus so the
/// same uploaded bytes cannot back two pledges.
pub fn post_bounty(
    state: &FederationState,
    sponsor: PeerId,
    credit_bytes: u64,
    wanted: Address,
) -> Result<(FederationState, u64), FederationError> {
    let available = spendable_surplus(state, &sponsor);
    if (credit_bytes as f64) > available {
        return Err(FederationError::InsufficientSurplus {
            available: available.max(0.0) as u64,
            requested: credit_bytes,
        });
    }
    let mut next = state.clone();
    let id = next.bounties.len() as u64;
    next.bounties.push(Bounty {
        id,
        sponsor,
        credit_bytes,
        wanted,
        status: BountyStatus::Open,
        evidence: None,
    });
    *next.committed_credit.entry(sponsor).or_insert(0) += credit_bytes;
    Ok((next, id))
}

/// Closes a bounty and mints its credit as upload bytes for the fulfiller.
/// The sponsor's counters never move; their pledge stays committed, which
/// is what pays for the minted credit.
pub fn fulfill_bounty(
    state: &FederationState,
    fulfiller: PeerId,
    id: u64,
    evidence: CommitId,
) -> Result<FederationState, FederationError> {
    let bounty = state
        .bounties
        .iter()
        .find(|b| b.id == id)
        .ok_or(FederationError::UnknownBounty(id))?;
    if bounty.status != BountyStatus::Open {
        return Err(FederationError::BountyClosed(id));
    }
    let mut next = state.clone();
    let slot = next.bounties.iter_mut().find(|b| b.id == id).unwrap();
    slot.status = BountyStatus::Fulfilled;
    slot.evidence = Some(evidence);
    next.ledger.entry(fulfiller).or_default().bytes_up += bounty.credit_bytes;
    Ok(next)
}

/// Whether a type may be announced under this federation's schema policy:
/// admitted if no family is required, or if the type's extends chain
/// passes through the required ancestor.
pub fn admit_schema(
    state: &FederationState,
    store: &LinkStore,
    ty: &Address,
) -> Result<bool, SchemaError> {
    let Some(required) = &state.policy.allow_schema else {
        return Ok(true);
    };
    let required = required.without_pins();
    let closure = schema::type_closure(store, ty)?;
    Ok(closure.iter().any(|a| *a == required))
}

/// One share grant: members of `federation` get `level` on objects under
/// `scope`, optionally only for objects of a type under `filter`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub scope: Address,
    pub federation: PeerId,
    pub level: GrantLevel,
    pub filter: Option<Address>,
}

/// A recipient allowlist on a subtree: whatever grants say, peers whose
/// recipient hash is absent are capped at Encrypted. The list itself lives
/// at `source` as string quads, so the permission document never names the
/// recipients in the clear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allowlist {
    pub scope: Address,
    pub rule_type: Option<Address>,
    pub source: Option<Address>,
    pub hashes: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PermissionRuleSet {
    pub grants: Vec<Grant>,
    pub allowlists: Vec<Allowlist>,
}

/// The opaque token an allowlist stores instead of a peer id.
pub fn recipient_hash(peer: &PeerId) -> String {
    let mut h = Sha256::new();
    h.update(RECIPIENT_DOMAIN);
    h.update([FIELD_SEP]);
    h.update(peer.render().as_bytes());
    hex::encode(h.finalize())
}

impl PermissionRuleSet {
    /// Reads every permission document in a quad set. A document is a
    /// subject typed `@fed:Permissions`; `permissionsFor` names the subtree
    /// it governs (the whole namespace when absent), `federatedWith` slots
    /// carry grants, and `accessRuleSet` slots carry allowlists.
    pub fn from_quads(default_scope: &Address, quads: &QuadSet) -> PermissionRuleSet {
        let type_pred = reserved::type_pred();
        let perm_type = Address::new(reserved::fed_peer(), vec!["Permissions"]);
        let mut docs: BTreeSet<Address> = BTreeSet::new();
        for q in quads {
            if q.predicate == type_pred && q.object == Object::Addr(perm_type.clone()) {
                docs.insert(q.subject.clone());
            }
        }
        let mut rules = PermissionRuleSet::default();
        for doc in docs {
            let scope = quads
                .iter()
                .find_map(|q| {
                    if q.subject != doc || q.predicate != doc.child("permissionsFor") {
                        return None;
                    }
                    match &q.object {
                        Object::Addr(a) => Some(a.clone()),
                        _ => None,
                    }
                })
                .unwrap_or_else(|| default_scope.clone());
            rules.read_grants(&doc, &scope, quads);
            rules.read_allowlists(&doc, &scope, quads);
        }
        rules
    }

    fn read_grants(&mut self, doc: &Address, scope: &Address, quads: &QuadSet) {
        let fw = doc.child("federatedWith");
        for q in quads {
            // The share level sits as a value on the slot: subject is the
            // document, predicate the (possibly ordinal) federatedWith slot.
            if q.subject != *doc || !q.predicate.is_under(&fw) {
                continue;
            }
            if q.predicate.segments.len() > fw.segments.len() + 1 {
                continue;
            }
            let Object::Addr(level_addr) = &q.object else {
                continue;
            };
            let Some(level) = GrantLevel::from_share_address(level_addr) else {
                continue;
            };
            let slot = &q.predicate;
            let federation = quads.iter().find_map(|n| {
                if n.subject != *slot || n.predicate != slot.child("name") {
                    return None;
                }
                match &n.object {
                    Object::Addr(a) => Some(a.peer),
                    _ => None,
                }
            });
            let Some(federation) = federation else {
                continue;
            };
            let filter = quads.iter().find_map(|n| {
                if n.subject != *slot || n.predicate != slot.child("is") {
                    return None;
                }
                match &n.object {
                    Object::Addr(a) => Some(a.without_pins()),
                    _ => None,
                }
            });
            self.grants.push(Grant {
                scope: scope.clone(),
                federation,
                level,
                filter,
            });
        }
    }

    fn read_allowlists(&mut self, doc: &Address, scope: &Address, quads: &QuadSet) {
        let rule_pred = doc.child("accessRuleSet");
        for q in quads {
            if q.subject != *doc || q.predicate != rule_pred {
                continue;
            }
            let Object::Addr(rule_type) = &q.object else {
                continue;
            };
            let source = quads.iter().find_map(|n| {
                if n.subject != rule_pred {
                    return None;
                }
                if n.predicate.segments.last().map(String::as_str) != Some("authorizedRecipient") {
                    return None;
                }
                match &n.object {
                    Object::Addr(a) => Some(a.clone()),
                    _ => None,
                }
            });
            self.allowlists.push(Allowlist {
                scope: scope.clone(),
                rule_type: Some(rule_type.clone()),
                source,
                hashes: BTreeSet::new(),
            });
        }
    }
}

/// Loads a peer's permission documents from their namespace and fills in
/// allowlist hashes from wherever the documents point.
pub fn load_permissions(
    store: &LinkStore,
    owner: &PeerId,
) -> Result<PermissionRuleSet, StoreError> {
    let root = Address::peer_only(*owner);
    let record = store.resolve(&root)?;
    let mut rules = PermissionRuleSet::from_quads(&root, &record.quads);
    for list in &mut rules.allowlists {
        let Some(source) = &list.source else {
            continue;
        };
        let Ok(record) = store.resolve(source) else {
            continue;
        };
        for q in &record.quads {
            if let Object::Lit(Literal::Str(h)) = &q.object {
                list.hashes.insert(h.clone());
            }
        }
    }
    Ok(rules)
}

/// Decides what a requester may see of one object.
///
/// The most generous grant wins among those whose scope covers the object,
/// whose federation the requester belongs to, and whose type filter (if
/// any) appears in the object's extends closure. Any allowlist covering
/// the object then caps the result at Encrypted unless the requester's
/// recipient hash is listed.
pub fn authorize(
    rules: &PermissionRuleSet,
    requester: &PeerId,
    requester_federations: &BTreeSet<PeerId>,
    object: &Address,
    object_types: &BTreeSet<Address>,
) -> GrantLevel {
    let mut level = GrantLevel::Deny;
    for grant in &rules.grants {
        if !object.is_under(&grant.scope) {
            continue;
        }
        if !requester_federations.contains(&grant.federation) {
            continue;
        }
        if let Some(filter) = &grant.filter {
            if !object_types.contains(filter) {
                continue;
            }
        }
        level = level.max(grant.level);
    }
    // Allowlists decide who may see past the ciphertext: a recipient
    // listed on every covering list is authorized in full (given any
    // grant at all); anyone else is capped at the encrypted form.
    let hash = recipient_hash(requester);
    let covering: Vec<&Allowlist> =
        rules.allowlists.iter().filter(|l| object.is_under(&l.scope)).collect();
    if !covering.is_empty() && level > GrantLevel::Deny {
        if covering.iter().all(|l| l.hashes.contains(&hash)) {
            level = GrantLevel::Full;
        } else {
            level = level.min(GrantLevel::Encrypted);
        }
    }
    level
}

// --- persistence ---------------------------------------------------------

fn fed_addr(name: &str) -> Address {
    Address::new(reserved::fed_peer(), vec![name])
}

impl FederationState {
    /// The state as quads under its own address, authored by the
    /// federation peer. The index is deliberately absent: announced quads
    /// are other peers' words, and a namespace only holds its owner's.
    pub fn to_quads(&self) -> QuadSet {
        let author = self.address.peer;
        let f = &self.address;
        let mut quads = QuadSet::new();
        let mut put = |subject: Address, predicate: Address, object: Object| {
            quads.insert(Quad {
                author,
                subject,
                predicate,
                object,
            });
        };
        put(
            f.clone(),
            reserved::type_pred(),
            Object::Addr(fed_addr("Federation")),
        );
        for (kind, response) in &self.policy.on_receive {
            put(
                f.child("onReceive"),
                kind.address(),
                Object::Addr(response.address()),
            );
        }
        if let Some(allowed) = &self.policy.allow_schema {
            put(
                f.child("allowSchema"),
                f.child("allowSchema").child("extensionOf"),
                Object::Addr(allowed.clone()),
            );
        }
        put(
            f.clone(),
            f.child("minRatio"),
            Object::Lit(Literal::Dec(self.policy.min_ratio)),
        );
        put(
            f.clone(),
            f.child("graceBytes"),
            Object::Lit(Literal::Int(clamp_i64(self.policy.grace_bytes))),
        );
        for sel in &self.policy.freeleech {
            put(f.clone(), f.child("freeleech"), Object::Addr(sel.clone()));
        }
        for member in &self.members {
            put(
                f.clone(),
                f.child("members"),
                Object::Addr(Address::peer_only(*member)),
            );
        }
        for ((from, to), depth) in &self.follows {
            let subject = f.child("follows").child(&from.render());
            put(
                subject.clone(),
                subject.child(&to.render()),
                Object::Lit(Literal::Int(i64::from(*depth))),
            );
        }
        for (peer, entry) in &self.ledger {
            let subject = f.child("ledger").child(&peer.render());
            put(
                subject.clone(),
                subject.child("up"),
                Object::Lit(Literal::Int(clamp_i64(entry.bytes_up))),
            );
            put(
                subject.clone(),
                subject.child("down"),
                Object::Lit(Literal::Int(clamp_i64(entry.bytes_down))),
            );
        }
        for (peer, committed) in &self.committed_credit {
            let subject = f.child("ledger").child(&peer.render());
            put(
                subject.clone(),
                subject.child("committed"),
                Object::Lit(Literal::Int(clamp_i64(*committed))),
            );
        }
        for bounty in &self.bounties {
            let subject = f.child("bounties").child(&bounty.id.to_string());
            put(
                subject.clone(),
                subject.child("sponsor"),
                Object::Addr(Address::peer_only(bounty.sponsor)),
            );
            put(
                subject.clone(),
                subject.child("credit"),
                Object::Lit(Literal::Int(clamp_i64(bounty.credit_bytes))),
            );
            put(
                subject.clone(),
                subject.child("wanted"),
                Object::Addr(bounty.wanted.clone()),
            );
            let status = match bounty.status {
                BountyStatus::Open => "open",
                BountyStatus::Fulfilled => "fulfilled",
            };
            put(
                subject.clone(),
                subject.child("status"),
                Object::Lit(Literal::Token(status.to_string())),
            );
            if let Some(commit) = &bounty.evidence {
                put(
                    subject.clone(),
                    subject.child("evidence"),
                    Object::AddrAt(bounty.wanted.clone(), *commit),
                );
            }
        }
        for id in &self.seen_reports {
            put(
                f.clone(),
                f.child("reportsSeen"),
                Object::Lit(Literal::Str(hex::encode(id))),
            );
        }
        quads
    }

    /// Rebuilds state from its quads. Unknown quads are ignored, so a
    /// policy document written by hand (type, onReceive, allowSchema and
    /// nothing else) loads as a fresh federation with that policy.
    pub fn from_quads(address: &Address, quads: &QuadSet) -> Result<Self, FederationError> {
        let f = address;
        let bad = |m: String| FederationError::MalformedState(m);
        let mut state = FederationState::new(address.clone(), Policy::default());
        let on_receive_subject = f.child("onReceive");
        let allow_subject = f.child("allowSchema");
        let follows_prefix = f.child("follows");
        let ledger_prefix = f.child("ledger");
        let bounty_prefix = f.child("bounties");
        let mut bounties: BTreeMap<u64, Bounty> = BTreeMap::new();
        for q in quads {
            if q.subject == on_receive_subject {
                let (Some(kind), Object::Addr(resp)) =
                    (ActivityKind::from_address(&q.predicate), &q.object)
                else {
                    continue;
                };
                if let Some(response) = Response::from_address(resp) {
                    state.policy.on_receive.insert(kind, response);
                }
            } else if q.subject == allow_subject {
                if q.predicate.segments.last().map(String::as_str) == Some("extensionOf") {
                    if let Object::Addr(a) = &q.object {
                        state.policy.allow_schema = Some(a.clone());
                    }
                }
            } else if q.subject == *f {
                match (q.predicate.tail_under(f), &q.object) {
                    (Some(tail), Object::Lit(Literal::Dec(r))) if tail == ["minRatio"] => {
                        state.policy.min_ratio = *r;
                    }
                    (Some(tail), Object::Lit(Literal::Int(g))) if tail == ["graceBytes"] => {
                        state.policy.grace_bytes = u64::try_from(*g)
                            .map_err(|_| bad("negative graceBytes".into()))?;
                    }
                    (Some(tail), Object::Addr(sel)) if tail == ["freeleech"] => {
                        state.policy.freeleech.insert(sel.clone());
                    }
                    (Some(tail), Object::Addr(m)) if tail == ["members"] => {
                        state.members.insert(m.peer);
                    }
                    (Some(tail), Object::Lit(Literal::Str(h))) if tail == ["reportsSeen"] => {
                        let id: [u8; 32] = hex::decode(h)
                            .ok()
                            .and_then(|v| v.try_into().ok())
                            .ok_or_else(|| bad(format!("bad report id {h}")))?;
                        state.seen_reports.insert(id);
                    }
                    _ => {}
                }
            } else if q.subject.is_under(&follows_prefix) {
                let Some(tail) = q.subject.tail_under(&follows_prefix) else {
                    continue;
                };
                let [from] = tail else { continue };
                let Some(to) = q
                    .predicate
                    .tail_under(&q.subject)
                    .and_then(|t| match t {
                        [to] => Some(to.clone()),
                        _ => None,
                    })
                else {
                    continue;
                };
                let (Ok(from), Ok(to)) = (PeerId::parse(from), PeerId::parse(&to)) else {
                    return Err(bad("bad peer id in follow edge".into()));
                };
                let Object::Lit(Literal::Int(depth)) = &q.object else {
                    continue;
                };
                let depth =
                    u32::try_from(*depth).map_err(|_| bad("negative follow depth".into()))?;
                state.follows.insert((from, to), depth);
            } else if q.subject.is_under(&ledger_prefix) {
                let Some([peer]) = q.subject.tail_under(&ledger_prefix) else {
                    continue;
                };
                let peer =
                    PeerId::parse(peer).map_err(|_| bad("bad peer id in ledger".into()))?;
                let Object::Lit(Literal::Int(n)) = &q.object else {
                    continue;
                };
                let n = u64::try_from(*n).map_err(|_| bad("negative ledger count".into()))?;
                match q.predicate.tail_under(&q.subject) {
                    Some([field]) if field == "up" => {
                        state.ledger.entry(peer).or_default().bytes_up = n;
                    }
                    Some([field]) if field == "down" => {
                        state.ledger.entry(peer).or_default().bytes_down = n;
                    }
                    Some([field]) if field == "committed" => {
                        state.committed_credit.insert(peer, n);
                    }
                    _ => {}
                }
            } else if q.subject.is_under(&bounty_prefix) {
                let Some([id]) = q.subject.tail_under(&bounty_prefix) else {
                    continue;
                };
                let id: u64 = id
                    .parse()
                    .map_err(|_| bad(format!("bad bounty id {id}")))?;
                let slot = bounties.entry(id).or_insert_with(|| Bounty {
                    id,
                    sponsor: reserved::fed_peer(),
                    credit_bytes: 0,
                    wanted: f.clone(),
                    status: BountyStatus::Open,
                    evidence: None,
                });
                match (q.predicate.tail_under(&q.subject), &q.object) {
                    (Some(tail), Object::Addr(a)) if tail == ["sponsor"] => {
                        slot.sponsor = a.peer;
                    }
                    (Some(tail), Object::Lit(Literal::Int(n))) if tail == ["credit"] => {
                        slot.credit_bytes = u64::try_from(*n)
                            .map_err(|_| bad("negative bounty credit".into()))?;
                    }
                    (Some(tail), Object::Addr(a)) if tail == ["wanted"] => {
                        slot.wanted = a.clone();
                    }
                    (Some(tail), Object::Lit(Literal::Token(s))) if tail == ["status"] => {
                        slot.status = match s.as_str() {
                            "open" => BountyStatus::Open,
                            "fulfilled" => BountyStatus::Fulfilled,
                            other => return Err(bad(format!("bad bounty status {other}"))),
                        };
                    }
                    (Some(tail), Object::AddrAt(_, commit)) if tail == ["evidence"] => {
                        slot.evidence = Some(*commit);
                    }
                    _ => {}
                }
            }
        }
        state.bounties = bounties.into_values().collect();
        Ok(state)
    }

    /// Loads federation state from the store at its address.
    pub fn load(store: &LinkStore, address: &Address) -> Result<Self, FederationError> {
        let record = store
            .resolve(address)
            .map_err(|e| FederationError::MalformedState(e.to_string()))?;
        FederationState::from_quads(address, &record.quads)
    }
}

fn clamp_i64(n: u64) -> i64 {
    i64::try_from(n).unwrap_or(i64::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl;
    use crate::identity::{generate_identity, HandleTable};
    use crate::linkstore::LinkStore;

    struct Actor {
        peer: PeerId,
        record: IdentityRecord,
        secret: SecretHandle,
    }

    fn actor(seed: &[u8]) -> Actor {
        let (record, secret) = generate_identity(Some(seed), "tester", "mailto:t@example.org")
            .expect("identity");
        Actor {
            peer: record.peer_id,
            record,
            secret,
        }
    }

    fn fed_state() -> FederationState {
        let fed = actor(b"federation seed");
        FederationState::new(Address::peer_only(fed.peer), Policy::open())
    }

    fn join(state: &FederationState, who: &Actor) -> FederationState {
        let act = Activity::new(ActivityKind::Join, who.peer, QuadSet::new(), &who.secret);
        let (next, response) = handle_activity(state, &act, &who.record).expect("join");
        assert_eq!(response, Response::Accept);
        next
    }

    #[test]
    fn join_then_leave_round_trips_membership() {
        let state = fed_state();
        let alice = actor(b"alice");
        let joined = join(&state, &alice);
        assert!(joined.is_member(&alice.peer));

        let leave = Activity::new(ActivityKind::Leave, alice.peer, QuadSet::new(), &alice.secret);
        let (left, response) = handle_activity(&joined, &leave, &alice.record).unwrap();
        assert_eq!(response, Response::Accept);
        assert!(!left.is_member(&alice.peer));

        // A stranger leaving is a polite no-op.
        let stranger = actor(b"stranger");
        let leave =
            Activity::new(ActivityKind::Leave, stranger.peer, QuadSet::new(), &stranger.secret);
        let (unchanged, response) = handle_activity(&left, &leave, &stranger.record).unwrap();
        assert_eq!(response, Response::Reject);
        assert_eq!(unchanged, left);
    }

    #[test]
    fn policy_gates_joins() {
        let fed = actor(b"closed fed");
        let state = FederationState::new(Address::peer_only(fed.peer), Policy::default());
        let alice = actor(b"alice");
        let act = Activity::new(ActivityKind::Join, alice.peer, QuadSet::new(), &alice.secret);
        let (next, response) = handle_activity(&state, &act, &alice.record).unwrap();
        assert_eq!(response, Response::Reject);
        assert!(!next.is_member(&alice.peer));

        // Unknown verbs are rejected even by an open policy.
        let mut open = fed_state();
        open.policy
            .on_receive
            .insert(ActivityKind::Other("Dance".into()), Response::Accept);
        let act = Activity::new(
            ActivityKind::Other("Dance".into()),
            alice.peer,
            QuadSet::new(),
            &alice.secret,
        );
        let (_, response) = handle_activity(&open, &act, &alice.record).unwrap();
        assert_eq!(response, Response::Reject);
    }

    #[test]
    fn tampered_activities_are_refused() {
        let state = fed_state();
        let alice = actor(b"alice");
        let mallory = actor(b"mallory");

        let mut act = Activity::new(ActivityKind::Join, alice.peer, QuadSet::new(), &alice.secret);
        act.signature[0] ^= 1;
        assert!(handle_activity(&state, &act, &alice.record).is_err());

        // Right signature, wrong claimed actor.
        let act = Activity::new(ActivityKind::Join, mallory.peer, QuadSet::new(), &alice.secret);
        assert!(handle_activity(&state, &act, &mallory.record).is_err());

        // Payload swapped after signing.
        let mut act = Activity::new(ActivityKind::Join, alice.peer, QuadSet::new(), &alice.secret);
        act.payload.insert(Quad {
            author: alice.peer,
            subject: Address::peer_only(alice.peer),
            predicate: reserved::about(),
            object: Object::Lit(Literal::Str("sneaky".into())),
        });
        assert!(handle_activity(&state, &act, &alice.record).is_err());
    }

    #[test]
    fn replaying_an_activity_log_is_deterministic() {
        let alice = actor(b"alice");
        let bob = actor(b"bob");
        let mut summary = QuadSet::new();
        summary.insert(Quad {
            author: bob.peer,
            subject: Address::new(bob.peer, vec!["data"]),
            predicate: reserved::about(),
            object: Object::Lit(Literal::Str("spikes".into())),
        });
        let log = vec![
            (
                Activity::new(ActivityKind::Join, alice.peer, QuadSet::new(), &alice.secret),
                alice.record.clone(),
            ),
            (
                Activity::new(ActivityKind::Join, bob.peer, summary.clone(), &bob.secret),
                bob.record.clone(),
            ),
            (
                Activity::follow(alice.peer, bob.peer, 2, &alice.secret),
                alice.record.clone(),
            ),
            (
                Activity::new(ActivityKind::Leave, bob.peer, QuadSet::new(), &bob.secret),
                bob.record.clone(),
            ),
        ];
        let run = |start: &FederationState| {
            let mut state = start.clone();
            for (act, record) in &log {
                let (next, _) = handle_activity(&state, act, record).unwrap();
                state = next;
            }
            state
        };
        let base = fed_state();
        let once = run(&base);
        let twice = run(&base);
        assert_eq!(once, twice);
        assert!(once.is_member(&alice.peer));
        assert!(!once.is_member(&bob.peer));
        assert!(once.index.get(&bob.peer).is_none(), "leave purges the index");
        assert_eq!(once.follows.get(&(alice.peer, bob.peer)), Some(&2));
    }

    #[test]
    fn announcements_feed_hints() {
        let state = fed_state();
        let alice = actor(b"alice");
        let bob = actor(b"bob");
        let state = join(&state, &alice);
        let state = join(&state, &bob);

        let topic = Address::new(reserved::fed_peer(), vec!["about"]);
        let mut summary = QuadSet::new();
        summary.insert(Quad {
            author: alice.peer,
            subject: Address::new(alice.peer, vec!["set1"]),
            predicate: topic.clone(),
            object: Object::Lit(Literal::Str("electrophysiology".into())),
        });
        let state = index_announce(&state, alice.peer, &summary).unwrap();

        let outsider = actor(b"outsider");
        assert!(matches!(
            index_announce(&state, outsider.peer, &summary),
            Err(FederationError::NotAMember(_))
        ));

        let pattern = Pattern {
            object: Some(Object::Lit(Literal::Str("electrophysiology".into()))),
            ..Pattern::default()
        };
        let hinted = hint(&state, &pattern);
        assert!(hinted.contains(&alice.peer));
        assert!(!hinted.contains(&bob.peer));

        // The hint is a plain scan of announcements; check against one.
        let mut by_hand = BTreeSet::new();
        for (peer, quads) in &state.index {
            for q in quads {
                if pattern.matches(q) {
                    by_hand.insert(*peer);
                }
            }
        }
        assert_eq!(hinted, by_hand);
    }

    #[test]
    fn view_scope_walks_follow_edges_to_their_depth() {
        // alice -> bob (depth 2), bob -> carol, carol -> dave: alice sees
        // bob and carol but not dave; eve is invisible to everyone.
        let alice = actor(b"alice");
        let bob = actor(b"bob");
        let carol = actor(b"carol");
        let dave = actor(b"dave");
        let eve = actor(b"eve");
        let mut state = fed_state();
        state.follows.insert((alice.peer, bob.peer), 2);
        state.follows.insert((bob.peer, carol.peer), 1);
        state.follows.insert((carol.peer, dave.peer), 1);

        let scope = view_scope(&state, &alice.peer);
        assert!(scope.contains(&alice.peer));
        assert!(scope.contains(&bob.peer));
        assert!(scope.contains(&carol.peer));
        assert!(!scope.contains(&dave.peer));
        assert!(!scope.contains(&eve.peer));

        // Depth one stops at the followed peer.
        let scope = view_scope(&state, &bob.peer);
        assert_eq!(
            scope.into_iter().collect::<Vec<_>>(),
            {
                let mut v = vec![bob.peer, carol.peer];
                v.sort();
                v
            }
        );
    }

    #[test]
    fn view_scope_matches_shortest_path_oracle() {
        // All pairwise shortest paths, then: q is visible from origin iff
        // some first edge (origin -> p, depth d) has 1 + dist(p, q) <= d.
        let people: Vec<Actor> = (0..6u8).map(|i| actor(&[b'p', i])).collect();
        let mut state = fed_state();
        let edges: Vec<(usize, usize, u32)> = vec![
            (0, 1, 3),
            (1, 2, 1),
            (2, 3, 2),
            (3, 4, 1),
            (1, 4, 1),
            (4, 0, 2),
            (5, 0, 1),
        ];
        for (f, t, d) in &edges {
            state
                .follows
                .insert((people[*f].peer, people[*t].peer), *d);
        }

        let n = people.len();
        let inf = u32::MAX / 4;
        let mut dist = vec![vec![inf; n]; n];
        for (i, row) in dist.iter_mut().enumerate() {
            row[i] = 0;
        }
        for (f, t, _) in &edges {
            dist[*f][*t] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    dist[i][j] = dist[i][j].min(dist[i][k] + dist[k][j]);
                }
            }
        }
        for origin in 0..n {
            let scope = view_scope(&state, &people[origin].peer);
            for q in 0..n {
                let expect = origin == q
                    || edges
                        .iter()
                        .filter(|(f, _, _)| *f == origin)
                        .any(|(_, p, d)| 1 + dist[*p][q] <= *d);
                assert_eq!(
                    scope.contains(&people[q].peer),
                    expect,
                    "origin {origin} seeing {q}"
                );
            }
        }
    }

    #[test]
    fn transfers_accumulate_and_replays_are_refused() {
        let mut state = fed_state();
        state.policy.freeleech.insert(Address::new(
            state.federation_peer(),
            vec!["commons"],
        ));
        let alice = actor(b"alice");
        let bob = actor(b"bob");

        let report = TransferReport::new(
            &alice.secret,
            alice.peer,
            &bob.secret,
            bob.peer,
            1000,
            Address::new(alice.peer, vec!["data"]),
        );
        let state = record_transfer(&state, &report, &alice.record, &bob.record).unwrap();
        assert_eq!(state.ledger[&alice.peer].bytes_up, 1000);
        assert_eq!(state.ledger[&bob.peer].bytes_down, 1000);

        assert!(matches!(
            record_transfer(&state, &report, &alice.record, &bob.record),
            Err(FederationError::DuplicateReport)
        ));

        // Freeleech: the report is remembered but no counter moves.
        let free = TransferReport::new(
            &alice.secret,
            alice.peer,
            &bob.secret,
            bob.peer,
            5000,
            Address::new(state.federation_peer(), vec!["commons", "atlas"]),
        );
        let after = record_transfer(&state, &free, &alice.record, &bob.record).unwrap();
        assert_eq!(after.ledger[&alice.peer].bytes_up, 1000);
        assert_eq!(after.ledger[&bob.peer].bytes_down, 1000);
        assert!(after.seen_reports.len() == 2);

        // A tampered byte count breaks both signatures.
        let mut forged = report.clone();
        forged.bytes = 9999;
        assert!(record_transfer(&after, &forged, &alice.record, &bob.record).is_err());
    }

    #[test]
    fn ratio_check_truth_table() {
        let alice = actor(b"alice");
        let cases = [
            // (up, down, min_ratio, grace, expect)
            (0u64, 0u64, 1.0, 0u64, true),   // nothing downloaded yet
            (0, 100, 1.0, 100, true),        // inside grace
            (0, 101, 1.0, 100, false),       // past grace, ratio 0 < 1
            (50, 100, 0.5, 0, true),         // exactly at ratio
            (49, 100, 0.5, 0, false),        // just under
            (0, 1000, 0.0, 0, true),         // ratio disabled
            (1000, 10, 1.0, 0, true),        // comfortably over
        ];
        for (up, down, ratio, grace, expect) in cases {
            let mut state = fed_state();
            state.policy.min_ratio = ratio;
            state.policy.grace_bytes = grace;
            state.ledger.insert(
                alice.peer,
                LedgerEntry {
                    bytes_up: up,
                    bytes_down: down,
                },
            );
            assert_eq!(
                check_ratio(&state, &alice.peer),
                expect,
                "up={up} down={down} ratio={ratio} grace={grace}"
            );
        }
    }

    #[test]
    fn bounty_lifecycle_conserves_the_ledger() {
        let mut state = fed_state();
        state.policy.min_ratio = 0.5;
        let alice = actor(b"alice");
        let bob = actor(b"bob");
        state.ledger.insert(
            alice.peer,
            LedgerEntry {
                bytes_up: 1000,
                bytes_down: 400,
            },
        );

        // Surplus is 1000 - 0.5 * 400 = 800; a 900 pledge must fail.
        let wanted = Address::new(bob.peer, vec!["atlas"]);
        let err = post_bounty(&state, alice.peer, 900, wanted.clone());
        assert!(matches!(
            err,
            Err(FederationError::InsufficientSurplus { available: 800, requested: 900 })
        ));

        let (state, id) = post_bounty(&state, alice.peer, 600, wanted.clone()).unwrap();
        // The pledge is held: only 200 of surplus remains.
        assert!(matches!(
            post_bounty(&state, alice.peer, 300, wanted.clone()),
            Err(FederationError::InsufficientSurplus { .. })
        ));

        let evidence = CommitId([7; 32]);
        let state = fulfill_bounty(&state, bob.peer, id, evidence).unwrap();
        assert_eq!(state.ledger[&bob.peer].bytes_up, 600);
        assert_eq!(state.bounties[0].status, BountyStatus::Fulfilled);
        assert_eq!(state.bounties[0].evidence, Some(evidence));
        assert!(matches!(
            fulfill_bounty(&state, bob.peer, id, evidence),
            Err(FederationError::BountyClosed(_))
        ));
        assert!(matches!(
            fulfill_bounty(&state, bob.peer, 99, evidence),
            Err(FederationError::UnknownBounty(99))
        ));

        // Conservation: total up equals total down plus minted credit.
        let total_up: u64 = state.ledger.values().map(|e| e.bytes_up).sum();
        let total_down: u64 = state.ledger.values().map(|e| e.bytes_down).sum();
        let minted: u64 = state
            .bounties
            .iter()
            .filter(|b| b.status == BountyStatus::Fulfilled)
            .map(|b| b.credit_bytes)
            .sum();
        assert_eq!(total_up, 1000 + 600);
        assert_eq!(total_up, total_down + minted + 600); // alice's base 600 surplus over down
    }

    #[test]
    fn grants_pick_the_most_generous_match() {
        let owner = actor(b"owner");
        let fed_a = actor(b"fed a");
        let fed_b = actor(b"fed b");
        let root = Address::peer_only(owner.peer);
        let dataset = Address::new(owner.peer, vec!["my-data", "trial1"]);

        let rules = PermissionRuleSet {
            grants: vec![
                Grant {
                    scope: root.clone(),
                    federation: fed_a.peer,
                    level: GrantLevel::Metadata,
                    filter: None,
                },
                Grant {
                    scope: Address::new(owner.peer, vec!["my-data"]),
                    federation: fed_b.peer,
                    level: GrantLevel::Full,
                    filter: None,
                },
            ],
            allowlists: Vec::new(),
        };

        let requester = actor(b"requester");
        let no_types = BTreeSet::new();
        let both = [fed_a.peer, fed_b.peer].into_iter().collect();
        let only_a: BTreeSet<PeerId> = [fed_a.peer].into_iter().collect();
        let neither = BTreeSet::new();

        assert_eq!(
            authorize(&rules, &requester.peer, &both, &dataset, &no_types),
            GrantLevel::Full
        );
        assert_eq!(
            authorize(&rules, &requester.peer, &only_a, &dataset, &no_types),
            GrantLevel::Metadata
        );
        assert_eq!(
            authorize(&rules, &requester.peer, &neither, &dataset, &no_types),
            GrantLevel::Deny
        );

        // A type filter binds only when the object's closure contains it.
        let nwb_file = Address::new(PeerId::reserved("nwb"), vec!["NWBFile"]);
        let filtered = PermissionRuleSet {
            grants: vec![Grant {
                scope: root.clone(),
                federation: fed_a.peer,
                level: GrantLevel::Full,
                filter: Some(nwb_file.clone()),
            }],
            allowlists: Vec::new(),
        };
        let mut typed = BTreeSet::new();
        typed.insert(nwb_file);
        assert_eq!(
            authorize(&filtered, &requester.peer, &only_a, &dataset, &typed),
            GrantLevel::Full
        );
        assert_eq!(
            authorize(&filtered, &requester.peer, &only_a, &dataset, &no_types),
            GrantLevel::Deny
        );
    }

    #[test]
    fn allowlists_cap_unlisted_recipients() {
        let owner = actor(b"owner");
        let fed_a = actor(b"fed a");
        let listed = actor(b"alice");
        let unlisted = actor(b"mallory");
        let dataset = Address::new(owner.peer, vec!["my-data"]);

        let mut hashes = BTreeSet::new();
        hashes.insert(recipient_hash(&listed.peer));
        let rules = PermissionRuleSet {
            grants: vec![Grant {
                scope: dataset.clone(),
                federation: fed_a.peer,
                level: GrantLevel::Full,
                filter: None,
            }],
            allowlists: vec![Allowlist {
                scope: dataset.clone(),
                rule_type: None,
                source: None,
                hashes,
            }],
        };
        let feds: BTreeSet<PeerId> = [fed_a.peer].into_iter().collect();
        let no_types = BTreeSet::new();
        let object = dataset.child("trial1");

        assert_eq!(
            authorize(&rules, &listed.peer, &feds, &object, &no_types),
            GrantLevel::Full
        );
        assert_eq!(
            authorize(&rules, &unlisted.peer, &feds, &object, &no_types),
            GrantLevel::Encrypted
        );
        // The cap never upgrades a denial.
        assert_eq!(
            authorize(&rules, &unlisted.peer, &BTreeSet::new(), &object, &no_types),
            GrantLevel::Deny
        );
    }

    #[test]
    fn permission_documents_load_from_their_quads() {
        let (org, org_secret) =
            generate_identity(Some(b"org for perms"), "org", "mailto:o@example.org").unwrap();
        let (fed_a, _) =
            generate_identity(Some(b"fed alpha"), "feda", "mailto:a@example.org").unwrap();
        let (fed_b, _) =
            generate_identity(Some(b"fed beta"), "fedb", "mailto:b@example.org").unwrap();
        let (cloud, _) =
            generate_identity(Some(b"cloud fed"), "cloud", "mailto:c@example.org").unwrap();

        let handles = HandleTable::with_reserved()
            .bind("jonny", org.peer_id)
            .unwrap()
            .bind("nwbFederation", fed_a.peer_id)
            .unwrap()
            .bind("sfnFederation", fed_b.peer_id)
            .unwrap()
            .bind("institutionalCloud", cloud.peer_id)
            .unwrap()
            .bind("nwb", PeerId::reserved("nwb"))
            .unwrap()
            .bind("hhs", PeerId::reserved("hhs"))
            .unwrap();

        let text = "\
<#globalPermissions>
  a @fed:Permissions
  permissionsFor @jonny

  federatedWith
    name @nwbFederation
    @fed:shareData
    is @nwb:NWBFile

  federatedWith
    name @sfnFederation
    @fed:shareMetadata

<#datasetPermissions>
  a @fed:Permissions
  permissionsFor @jonny:my-data

  accessRuleSet @hhs:HIPAA
    .authorizedRecipient <#hash-of-patient-ids>

  federatedWith
    name @institutionalCloud
    @fed:shareEncrypted
";
        let doc = dsl::parse(text).expect("parse");
        let base = Address::peer_only(org.peer_id);
        let quads = dsl::resolve(&doc, &base, &[], &handles).expect("resolve");

        let mut store = LinkStore::memory();
        store.register_identity(&org).unwrap();
        store
            .commit(org.peer_id, &org_secret, quads.clone(), QuadSet::new())
            .unwrap();

        // The allowlist hashes live at the address the document points to.
        let listed = actor(b"patient zero");
        let mut hash_quads = QuadSet::new();
        hash_quads.insert(Quad {
            author: org.peer_id,
            subject: Address::new(org.peer_id, vec!["hash-of-patient-ids"]),
            predicate: Address::new(org.peer_id, vec!["hash-of-patient-ids", "entry"]),
            object: Object::Lit(Literal::Str(recipient_hash(&listed.peer))),
        });
        store
            .commit(org.peer_id, &org_secret, hash_quads, QuadSet::new())
            .unwrap();

        let rules = load_permissions(&store, &org.peer_id).expect("load");
        assert_eq!(rules.grants.len(), 3);
        assert_eq!(rules.allowlists.len(), 1);

        let nwb_grant = rules
            .grants
            .iter()
            .find(|g| g.federation == fed_a.peer_id)
            .unwrap();
        assert_eq!(nwb_grant.level, GrantLevel::Full);
        assert_eq!(nwb_grant.scope, base);
        assert!(nwb_grant.filter.is_some());

        let sfn_grant = rules
            .grants
            .iter()
            .find(|g| g.federation == fed_b.peer_id)
            .unwrap();
        assert_eq!(sfn_grant.level, GrantLevel::Metadata);
        assert_eq!(sfn_grant.filter, None);

        let cloud_grant = rules
            .grants
            .iter()
            .find(|g| g.federation == cloud.peer_id)
            .unwrap();
        assert_eq!(cloud_grant.level, GrantLevel::Encrypted);
        assert_eq!(cloud_grant.scope, Address::new(org.peer_id, vec!["my-data"]));

        let list = &rules.allowlists[0];
        assert_eq!(list.scope, Address::new(org.peer_id, vec!["my-data"]));
        assert!(list.hashes.contains(&recipient_hash(&listed.peer)));

        // End to end: the listed patient reads in full, another member of
        // the same federation only gets ciphertext.
        let feds: BTreeSet<PeerId> = [cloud.peer_id].into_iter().collect();
        let object = Address::new(org.peer_id, vec!["my-data", "session1"]);
        let no_types = BTreeSet::new();
        assert_eq!(
            authorize(&rules, &listed.peer, &feds, &object, &no_types),
            GrantLevel::Full
        );
        let other = actor(b"other member");
        assert_eq!(
            authorize(&rules, &other.peer, &feds, &object, &no_types),
            GrantLevel::Encrypted
        );
    }

    #[test]
    fn schema_admission_follows_the_extends_chain() {
        let (org, org_secret) =
            generate_identity(Some(b"schema org"), "org", "mailto:o@example.org").unwrap();
        let mut store = LinkStore::memory();
        store.register_identity(&org).unwrap();

        let container = Address::new(org.peer_id, vec!["NWBContainer"]);
        let series = Address::new(org.peer_id, vec!["ElectricalSeries"]);
        let stranger = Address::new(org.peer_id, vec!["Unrelated"]);
        let mut quads = QuadSet::new();
        for (child, parent) in [(&series, &container)] {
            quads.insert(Quad {
                author: org.peer_id,
                subject: (*child).clone(),
                predicate: reserved::extends(),
                object: Object::Addr((*parent).clone()),
            });
        }
        quads.insert(Quad {
            author: org.peer_id,
            subject: stranger.clone(),
            predicate: reserved::type_pred(),
            object: Object::Addr(Address::new(org.peer_id, vec!["Thing"])),
        });
        store
            .commit(org.peer_id, &org_secret, quads, QuadSet::new())
            .unwrap();

        let fed = actor(b"schema fed");
        let mut state = FederationState::new(Address::peer_only(fed.peer), Policy::open());
        state.policy.allow_schema = Some(container.clone());

        assert!(admit_schema(&state, &store, &series).unwrap());
        assert!(admit_schema(&state, &store, &container).unwrap());
        assert!(!admit_schema(&state, &store, &stranger).unwrap());

        state.policy.allow_schema = None;
        assert!(admit_schema(&state, &store, &stranger).unwrap());
    }

    #[test]
    fn state_round_trips_through_quads() {
        let mut state = fed_state();
        let alice = actor(b"alice");
        let bob = actor(b"bob");
        state.members.insert(alice.peer);
        state.members.insert(bob.peer);
        state.policy.allow_schema =
            Some(Address::new(PeerId::reserved("nwb"), vec!["NWBContainer"]));
        state.policy.min_ratio = 0.5;
        state.policy.grace_bytes = 1 << 20;
        state
            .policy
            .freeleech
            .insert(Address::new(alice.peer, vec!["commons"]));
        state.follows.insert((alice.peer, bob.peer), 3);
        state.ledger.insert(
            alice.peer,
            LedgerEntry {
                bytes_up: 1234,
                bytes_down: 777,
            },
        );
        state.committed_credit.insert(alice.peer, 100);
        state.bounties.push(Bounty {
            id: 0,
            sponsor: alice.peer,
            credit_bytes: 100,
            wanted: Address::new(bob.peer, vec!["atlas"]),
            status: BountyStatus::Fulfilled,
            evidence: Some(CommitId([3; 32])),
        });
        state.seen_reports.insert([9; 32]);

        let quads = state.to_quads();
        let loaded = FederationState::from_quads(&state.address, &quads).unwrap();
        assert_eq!(loaded, state);
    }

    #[test]
    fn a_policy_document_loads_as_a_fresh_federation() {
        let (fed, fed_secret) =
            generate_identity(Some(b"nwb federation"), "nwbfed", "mailto:f@example.org").unwrap();
        let (nwb, _) =
            generate_identity(Some(b"nwb org"), "nwborg", "mailto:n@example.org").unwrap();
        let handles = HandleTable::with_reserved()
            .bind("nwbFederation", fed.peer_id)
            .unwrap()
            .bind("nwb", nwb.peer_id)
            .unwrap();

        let text = "\
<@nwbFederation>
  a @fed:Federation
  onReceive
    @as:Join @as:Accept
  allowSchema
    extensionOf @nwb:NWBContainer
";
        let doc = dsl::parse(text).expect("parse");
        let base = Address::peer_only(fed.peer_id);
        let quads = dsl::resolve(&doc, &base, &[], &handles).expect("resolve");

        let mut store = LinkStore::memory();
        store.register_identity(&fed).unwrap();
        store
            .commit(fed.peer_id, &fed_secret, quads, QuadSet::new())
            .unwrap();

        let state = FederationState::load(&store, &base).unwrap();
        assert_eq!(
            state.policy.on_receive.get(&ActivityKind::Join),
            Some(&Response::Accept)
        );
        assert_eq!(
            state.policy.allow_schema,
            Some(Address::new(nwb.peer_id, vec!["NWBContainer"]))
        );
        assert!(state.members.is_empty());

        // And a join through the loaded policy works.
        let alice = actor(b"alice");
        let act = Activity::new(ActivityKind::Join, alice.peer, QuadSet::new(), &alice.secret);
        let (next, response) = handle_activity(&state, &act, &alice.record).unwrap();
        assert_eq!(response, Response::Accept);
        assert!(next.is_member(&alice.peer));
    }

    #[test]
    fn activities_round_trip_the_wire_encoding() {
        let alice = actor(b"alice");
        let act = Activity::follow(alice.peer, actor(b"bob").peer, 4, &alice.secret);
        let decoded = Activity::decode(&act.encode()).unwrap();
        assert_eq!(decoded, act);
        assert!(decoded.verify(&alice.record));
    }
}
