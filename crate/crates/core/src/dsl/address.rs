//! Addresses: `@peer:segment:segment` paths with optional version pins.
//!
//! `.` and `:` are both accepted as separators and canonicalize to `:`.
//! A colon-delimited chunk is a version pin when it is quoted or starts with
//! `v`+digit, a comparison operator, `^`, or `~`; bare numeric chunks stay
//! path segments so identifiers like `@doi:10.1121:1.5091776` survive.
//! Pins attach to the path position they follow (position 0 = right after
//! the peer), at most one per position.

use std::collections::BTreeMap;
use std::fmt;

use crate::dsl::version::VersionReq;
use crate::dsl::DslError;
use crate::identity::{HandleTable, PeerId};

/// Peer reference as written: an alias to look up, or a literal id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RawPeer {
    Alias(String),
    Id(PeerId),
}

impl RawPeer {
    pub fn parse(token: &str) -> Self {
        if PeerId::looks_like(token) {
            if let Ok(id) = PeerId::parse(token) {
                return RawPeer::Id(id);
            }
        }
        RawPeer::Alias(token.to_string())
    }

    pub fn resolve(&self, handles: &HandleTable) -> Result<PeerId, DslError> {
        match self {
            RawPeer::Id(id) => Ok(*id),
            RawPeer::Alias(a) => handles
                .resolve(a)
                .map_err(|_| DslError::UnboundAlias { alias: a.clone() }),
        }
    }
}

impl fmt::Display for RawPeer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawPeer::Alias(a) => f.write_str(a),
            RawPeer::Id(id) => f.write_str(&id.render()),
        }
    }
}

/// An address before alias resolution, as it appears in source text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawAddress {
    pub peer: RawPeer,
    pub segments: Vec<String>,
    pub pins: BTreeMap<usize, VersionReq>,
}

/// A fully resolved address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address {
    pub peer: PeerId,
    pub segments: Vec<String>,
    pub pins: BTreeMap<usize, VersionReq>,
}

/// Declaration header name: `<#path>` is relative to the base, `<@peer>`,
/// `<@peer#path>` and `<@peer:path>` are absolute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeclName {
    Local(Vec<String>),
    Absolute(RawAddress),
}

pub(crate) fn valid_token(tok: &str) -> bool {
    !tok.is_empty()
        && tok
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// True when a colon chunk reads as a version pin rather than a segment.
fn chunk_is_pin(chunk: &str) -> bool {
    if chunk.starts_with('"') {
        return true;
    }
    let mut chars = chunk.chars();
    match chars.next() {
        Some('v') => chars.next().is_some_and(|c| c.is_ascii_digit()),
        Some('^') | Some('~') | Some('>') | Some('<') | Some('=') | Some('≥') | Some('≤') => true,
        _ => false,
    }
}

/// Splits on `:` outside double quotes.
fn colon_chunks(text: &str) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    for ch in text.chars() {
        match ch {
            '"' => {
                in_quotes = !in_quotes;
                cur.push(ch);
            }
            ':' if !in_quotes => {
                chunks.push(std::mem::take(&mut cur));
            }
            _ => cur.push(ch),
        }
    }
    chunks.push(cur);
    chunks
}

impl RawAddress {
    pub fn peer_only(peer: RawPeer) -> Self {
        RawAddress { peer, segments: Vec::new(), pins: BTreeMap::new() }
    }

    /// Parses the text after and including `@`.
    pub fn parse(text: &str) -> Result<Self, DslError> {
        let err = |message: &str| DslError::BadAddress { text: text.to_string(), message: message.to_string() };
        let rest = text.strip_prefix('@').ok_or_else(|| err("missing @"))?;
        if rest.is_empty() {
            return Err(err("empty peer"));
        }
        let chunks = colon_chunks(rest);
        let mut segments: Vec<String> = Vec::new();
        let mut pins: BTreeMap<usize, VersionReq> = BTreeMap::new();
        let mut peer: Option<RawPeer> = None;
        for (ci, chunk) in chunks.iter().enumerate() {
            // Angle-bracketed chunks like `<Part_Number>` are placeholder
            // names; the brackets are presentation only.
            let chunk = match chunk.strip_prefix('<').and_then(|c| c.strip_suffix('>')) {
                Some(inner) => inner,
                None => chunk.as_str(),
            };
            if chunk.is_empty() {
                return Err(err("empty segment"));
            }
            if ci > 0 && chunk_is_pin(chunk) {
                let inner = chunk.trim_matches('"');
                let req = VersionReq::parse(inner).map_err(DslError::BadVersion)?;
                if pins.insert(segments.len(), req).is_some() {
                    return Err(err("two consecutive pins"));
                }
                continue;
            }
            // Dots subdivide a chunk into path tokens.
            for piece in chunk.split('.') {
                if piece.is_empty() {
                    return Err(err("empty segment"));
                }
                if peer.is_none() {
                    if !valid_token(piece) && !PeerId::looks_like(piece) {
                        return Err(err("bad peer token"));
                    }
                    peer = Some(RawPeer::parse(piece));
                } else {
                    if !valid_token(piece) {
                        return Err(err("bad path token"));
                    }
                    segments.push(piece.to_string());
                }
            }
        }
        Ok(RawAddress { peer: peer.ok_or_else(|| err("empty peer"))?, segments, pins })
    }

    pub fn resolve(&self, handles: &HandleTable) -> Result<Address, DslError> {
        Ok(Address {
            peer: self.peer.resolve(handles)?,
            segments: self.segments.clone(),
            pins: self.pins.clone(),
        })
    }
}

impl fmt::Display for RawAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_address(&self.peer.to_string(), &self.segments, &self.pins))
    }
}

fn render_pin(req: &VersionReq) -> String {
    use crate::dsl::version::{Pat, VersionOp};
    let plain_exact = req.op == VersionOp::Exact && req.pattern.iter().all(|p| matches!(p, Pat::Num(_)));
    if plain_exact {
        let nums: Vec<String> = req
            .pattern
            .iter()
            .map(|p| match p {
                Pat::Num(n) => n.to_string(),
                Pat::Wild => unreachable!(),
            })
            .collect();
        format!("v{}", nums.join("."))
    } else {
        format!("\"{}\"", req)
    }
}

fn render_address(peer: &str, segments: &[String], pins: &BTreeMap<usize, VersionReq>) -> String {
    let mut out = String::new();
    out.push('@');
    out.push_str(peer);
    for pos in 0..=segments.len() {
        if let Some(req) = pins.get(&pos) {
            out.push(':');
            out.push_str(&render_pin(req));
        }
        if pos < segments.len() {
            out.push(':');
            out.push_str(&segments[pos]);
        }
    }
    out
}

impl Address {
    pub fn peer_only(peer: PeerId) -> Self {
        Address { peer, segments: Vec::new(), pins: BTreeMap::new() }
    }

    pub fn new(peer: PeerId, segments: Vec<&str>) -> Self {
        Address {
            peer,
            segments: segments.into_iter().map(str::to_string).collect(),
            pins: BTreeMap::new(),
        }
    }

    /// Parses and resolves in one step.
    pub fn parse(text: &str, handles: &HandleTable) -> Result<Self, DslError> {
        RawAddress::parse(text)?.resolve(handles)
    }

    /// Parses canonical text where the peer must be a literal id.
    pub fn parse_canonical(text: &str) -> Result<Self, DslError> {
        let raw = RawAddress::parse(text)?;
        match raw.peer {
            RawPeer::Id(peer) => Ok(Address { peer, segments: raw.segments, pins: raw.pins }),
            RawPeer::Alias(a) => Err(DslError::BadAddress {
                text: text.to_string(),
                message: format!("alias {a:?} in canonical address"),
            }),
        }
    }

    /// Canonical text: literal peer id, `:` separators, inline pins.
    pub fn render(&self) -> String {
        render_address(&self.peer.render(), &self.segments, &self.pins)
    }

    /// Text with the peer shown by alias where the table knows one.
    pub fn render_with(&self, handles: &HandleTable) -> String {
        let peer = match handles.alias_of(&self.peer) {
            Some(alias) => alias.to_string(),
            None => self.peer.render(),
        };
        render_address(&peer, &self.segments, &self.pins)
    }

    pub fn without_pins(&self) -> Address {
        Address { peer: self.peer, segments: self.segments.clone(), pins: BTreeMap::new() }
    }

    /// The first pin in path order, with the prefix it pins.
    pub fn first_pin(&self) -> Option<(Address, VersionReq, Address)> {
        let (&pos, req) = self.pins.iter().next()?;
        let prefix = Address {
            peer: self.peer,
            segments: self.segments[..pos].to_vec(),
            pins: BTreeMap::new(),
        };
        let mut rest = Address {
            peer: self.peer,
            segments: self.segments.clone(),
            pins: BTreeMap::new(),
        };
        for (&p, r) in self.pins.iter().skip(1) {
            rest.pins.insert(p, r.clone());
        }
        Some((prefix, req.clone(), rest))
    }

    /// True when `self` equals `prefix` or sits beneath it (pins ignored).
    pub fn is_under(&self, prefix: &Address) -> bool {
        self.peer == prefix.peer
            && self.segments.len() >= prefix.segments.len()
            && self.segments[..prefix.segments.len()] == prefix.segments[..]
    }

    pub fn child(&self, token: &str) -> Address {
        let mut segments = self.segments.clone();
        segments.push(token.to_string());
        Address { peer: self.peer, segments, pins: BTreeMap::new() }
    }

    pub fn descend(&self, tokens: &[String]) -> Address {
        let mut segments = self.segments.clone();
        segments.extend(tokens.iter().cloned());
        Address { peer: self.peer, segments, pins: BTreeMap::new() }
    }

    /// Segments of `self` below `prefix`, when under it.
    pub fn tail_under(&self, prefix: &Address) -> Option<&[String]> {
        if self.is_under(prefix) {
            Some(&self.segments[prefix.segments.len()..])
        } else {
            None
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::version::{VersionOp, VersionReq};
    use crate::identity::generate_identity;

    fn table() -> (HandleTable, PeerId, PeerId) {
        let (j, _) = generate_identity(Some(b"jonny"), "jonny", "").unwrap();
        let (n, _) = generate_identity(Some(b"nwb"), "nwb", "").unwrap();
        let t = HandleTable::with_reserved()
            .bind("jonny", j.peer_id)
            .unwrap()
            .bind("nwb", n.peer_id)
            .unwrap();
        (t, j.peer_id, n.peer_id)
    }

    #[test]
    fn dots_and_colons_both_separate() {
        let (t, jonny, _) = table();
        let a = Address::parse("@jonny.mydata1:v0.1.0:raw", &t).unwrap();
        let b = Address::parse("@jonny:mydata1:v0.1.0:raw", &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.peer, jonny);
        assert_eq!(a.segments, vec!["mydata1", "raw"]);
        let (prefix, req, _) = a.first_pin().unwrap();
        assert_eq!(prefix.segments, vec!["mydata1"]);
        assert_eq!(req, VersionReq::parse("v0.1.0").unwrap());
    }

    #[test]
    fn pin_forms() {
        let (t, _, _) = table();
        for text in ["@jonny:data:^0.2.*:raw", "@jonny:data:≥0.1.1:raw", "@jonny:data:\"^20.*\":raw"] {
            let a = Address::parse(text, &t).unwrap();
            assert_eq!(a.segments, vec!["data", "raw"]);
            assert_eq!(a.pins.len(), 1);
            assert!(a.pins.contains_key(&1));
        }
        // Pin right after the peer.
        let a = Address::parse("@jonny:\"3.8\"", &t).unwrap();
        assert!(a.segments.is_empty());
        assert_eq!(a.pins.get(&0).unwrap().op, VersionOp::Exact);
    }

    #[test]
    fn numeric_identifiers_stay_path_segments() {
        let (t, _, _) = table();
        let t = t.bind("doi", PeerId::reserved("doi-test")).unwrap();
        let a = Address::parse("@doi:10.1121:1.5091776", &t).unwrap();
        assert_eq!(a.segments, vec!["10", "1121", "1", "5091776"]);
        assert!(a.pins.is_empty());
    }

    #[test]
    fn placeholder_chunks_drop_their_brackets() {
        let (t, _, _) = table();
        let t = t.bind("apwiki", PeerId::reserved("apwiki-test")).unwrap();
        let a = Address::parse("@apwiki:parts:<Part_Number>", &t).unwrap();
        assert_eq!(a.segments, vec!["parts", "Part_Number"]);
        assert!(a.pins.is_empty());
        // A real range pin still reads as one.
        let b = Address::parse("@apwiki:parts:\"<2.0\"", &t).unwrap();
        assert_eq!(b.pins.len(), 1);
    }

    #[test]
    fn errors() {
        let (t, _, _) = table();
        assert!(Address::parse("@jonny::x", &t).is_err());
        assert!(Address::parse("@", &t).is_err());
        assert!(Address::parse("@jonny:v1.0:v2.0", &t).is_err());
        assert!(Address::parse("@nobody:x", &t).is_err());
        assert!(Address::parse("@jonny:with space", &t).is_err());
    }

    #[test]
    fn zero_segment_addresses() {
        let (t, jonny, _) = table();
        let a = Address::parse("@jonny", &t).unwrap();
        assert_eq!(a.peer, jonny);
        assert!(a.segments.is_empty());
    }

    #[test]
    fn canonical_render_round_trips() {
        let (t, _, _) = table();
        for text in [
            "@jonny.mydata1:v0.1.0:raw",
            "@jonny:data:^0.2.*:raw",
            "@nwb:general:experimenter",
            "@jonny",
            "@jonny:\"^20.*\":x64",
        ] {
            let a = Address::parse(text, &t).unwrap();
            let b = Address::parse_canonical(&a.render()).unwrap();
            assert_eq!(a, b, "{text}");
        }
    }

    #[test]
    fn literal_peer_ids_parse_without_handles() {
        let (_, jonny, _) = table();
        let text = format!("@{}:my-data", jonny.render());
        let a = Address::parse_canonical(&text).unwrap();
        assert_eq!(a.peer, jonny);
        assert_eq!(a.segments, vec!["my-data"]);
    }

    #[test]
    fn prefix_relations() {
        let (t, _, _) = table();
        let root = Address::parse("@jonny:my-data", &t).unwrap();
        let leaf = Address::parse("@jonny:my-data:raw:part1", &t).unwrap();
        let other = Address::parse("@jonny:other", &t).unwrap();
        assert!(leaf.is_under(&root));
        assert!(root.is_under(&root));
        assert!(!other.is_under(&root));
        assert_eq!(leaf.tail_under(&root).unwrap(), &["raw", "part1"]);
    }
}
