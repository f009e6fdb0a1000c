//! Inline `[[wikilinks]]` in free text.
//!
//! `[[p :: o]]` links the enclosing subject to `o` under predicate `p`;
//! `[[o]]` uses the reserved mentions predicate. Link parts may be absolute
//! addresses, prefixed paths, subject-relative paths (leading colon), or
//! plain phrases that become pages under the author's root namespace with
//! spaces mapped to underscores. Anything that does not resolve is left as
//! prose, never an error.

use crate::dsl::address::{Address, RawAddress, RawPeer};
use crate::identity::PeerId;
use crate::linkstore::quad::{reserved, Literal, Object, Quad, QuadSet};

/// Extracts every well-formed wikilink in `text` as a quad.
pub fn extract_wikilinks(
    text: &str,
    prefixes: &[(String, Address)],
    author: PeerId,
    subject: &Address,
) -> QuadSet {
    let mut out = QuadSet::new();
    let mut rest = text;
    while let Some(open) = rest.find("[[") {
        let after = &rest[open + 2..];
        let Some(close) = after.find("]]") else {
            break;
        };
        let inner = &after[..close];
        rest = &after[close + 2..];
        if inner.contains('[') || inner.contains(']') {
            continue;
        }
        let (pred, obj_text) = match inner.split_once("::") {
            Some((p, o)) => {
                let Some(pred) = resolve_part(p.trim(), prefixes, author, subject) else {
                    continue;
                };
                (pred, o.trim())
            }
            None => (reserved::mentions(), inner.trim()),
        };
        let Some(object) = resolve_object(obj_text, prefixes, author, subject) else {
            continue;
        };
        out.insert(Quad { author, subject: subject.clone(), predicate: pred, object });
    }
    out
}

fn resolve_object(
    part: &str,
    prefixes: &[(String, Address)],
    author: PeerId,
    subject: &Address,
) -> Option<Object> {
    if let Ok(n) = part.parse::<i64>() {
        return Some(Object::Lit(Literal::Int(n)));
    }
    resolve_part(part, prefixes, author, subject).map(Object::Addr)
}

fn resolve_part(
    part: &str,
    prefixes: &[(String, Address)],
    author: PeerId,
    subject: &Address,
) -> Option<Address> {
    if part.is_empty() {
        return None;
    }
    if part.starts_with('@') {
        let raw = RawAddress::parse(part).ok()?;
        return match &raw.peer {
            RawPeer::Id(id) => Some(Address {
                peer: *id,
                segments: raw.segments.clone(),
                pins: raw.pins.clone(),
            }),
            RawPeer::Alias(alias) => {
                let target = lookup(prefixes, alias)?;
                let mut addr = target.clone();
                let offset = addr.segments.len();
                addr.segments.extend(raw.segments.iter().cloned());
                for (k, req) in &raw.pins {
                    addr.pins.insert(offset + k, req.clone());
                }
                Some(addr)
            }
        };
    }
    if let Some(tail) = part.strip_prefix(':') {
        let segments = page_segments(tail)?;
        return Some(subject.descend(&segments));
    }
    let segments = page_segments(part)?;
    if segments.len() > 1 {
        if let Some(target) = lookup(prefixes, &segments[0]) {
            return Some(target.descend(&segments[1..]));
        }
    }
    Some(Address::peer_only(author).descend(&segments))
}

fn lookup<'a>(prefixes: &'a [(String, Address)], alias: &str) -> Option<&'a Address> {
    // later bindings shadow earlier ones
    prefixes.iter().rev().find(|(a, _)| a == alias).map(|(_, t)| t)
}

/// Splits a phrase on `:` into namespace segments, mapping interior spaces
/// to underscores. Returns None if any segment is empty or not token-safe.
fn page_segments(part: &str) -> Option<Vec<String>> {
    let mut segments = Vec::new();
    for chunk in part.split(':') {
        let seg = chunk.trim().replace(' ', "_");
        if seg.is_empty() || !seg.chars().all(token_char) {
            return None;
        }
        segments.push(seg);
    }
    Some(segments)
}

fn token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-' || c == '.'
}
