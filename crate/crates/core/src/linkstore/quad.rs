//! Quads and their canonical byte encoding.
//!
//! A quad is an authored triple: (author, subject, predicate, object). The
//! canonical encoding is normative for hashing and signing: per quad the
//! fields author, subject, predicate, object-kind tag, object are rendered
//! as UTF-8 and joined by 0x1F; a quad set is its encoded quads sorted
//! bytewise and joined by 0x0A. Strings are escape-quoted so no raw control
//! bytes appear inside a field.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::address::Address;
use crate::dsl::version::Version;
use crate::identity::PeerId;

pub const FIELD_SEP: u8 = 0x1f;
pub const QUAD_SEP: u8 = 0x0a;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("bad canonical quad: {0}")]
    Malformed(String),
}

/// Reserved predicates live under the well-known `fed` namespace.
pub mod reserved {
    use super::Address;
    use crate::identity::PeerId;

    pub fn fed_peer() -> PeerId {
        PeerId::reserved("fed")
    }

    fn fed(token: &str) -> Address {
        Address::new(fed_peer(), vec![token])
    }

    /// `a` — the type predicate.
    pub fn type_pred() -> Address {
        fed("type")
    }

    /// `extends` — schema extension.
    pub fn extends() -> Address {
        fed("extends")
    }

    /// Bare values at declaration level: the declaration is about this.
    pub fn about() -> Address {
        fed("about")
    }

    /// Bare `[[o]]` wikilinks.
    pub fn mentions() -> Address {
        fed("mentions")
    }

    /// Version announcements on a subtree root.
    pub fn version() -> Address {
        fed("version")
    }

    pub fn fork_of() -> Address {
        fed("forkOf")
    }

    pub fn merge_of() -> Address {
        fed("mergeOf")
    }
}

/// Strict lowercase hex. Canonical encodings never emit uppercase, so
/// decoders reject it rather than admit a second spelling of the same value
/// (one that signatures over re-rendered content would not catch).
pub(crate) fn decode_hex_strict(text: &str) -> Option<Vec<u8>> {
    if !text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return None;
    }
    hex::decode(text).ok()
}

/// Commit identifier: SHA-256 of the canonical commit body.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CommitId(pub [u8; 32]);

impl CommitId {
    pub fn render(&self) -> String {
        hex::encode(self.0)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let bytes = decode_hex_strict(text)?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(CommitId(arr))
    }
}

impl fmt::Debug for CommitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CommitId({})", &self.render()[..8])
    }
}

impl fmt::Display for CommitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Content-addressed blob reference.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlobRef {
    pub hash: [u8; 32],
    pub len: u64,
    pub codec: String,
}

impl BlobRef {
    pub fn render(&self) -> String {
        format!("blob:{}:{}:{}", hex::encode(self.hash), self.len, self.codec)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let rest = text.strip_prefix("blob:")?;
        let mut parts = rest.splitn(3, ':');
        let hash: [u8; 32] = hex::decode(parts.next()?).ok()?.try_into().ok()?;
        let len = parts.next()?.parse().ok()?;
        let codec = parts.next()?.to_string();
        Some(BlobRef { hash, len, codec })
    }
}

/// Numeric list element. Integers and decimals stay distinct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Num {
    Int(i64),
    Dec(f64),
}

impl Num {
    pub fn as_f64(&self) -> f64 {
        match self {
            Num::Int(i) => *i as f64,
            Num::Dec(d) => *d,
        }
    }

    fn render(&self) -> String {
        match self {
            Num::Int(i) => i.to_string(),
            Num::Dec(d) => render_decimal(*d),
        }
    }
}

impl Eq for Num {}

impl PartialOrd for Num {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Num {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Num::Int(a), Num::Int(b)) => a.cmp(b),
            (Num::Dec(a), Num::Dec(b)) => a.total_cmp(b),
            (Num::Int(_), Num::Dec(_)) => Ordering::Less,
            (Num::Dec(_), Num::Int(_)) => Ordering::Greater,
        }
    }
}

/// Decimals always render with a decimal point so they re-parse as decimals.
pub fn render_decimal(d: f64) -> String {
    let s = format!("{}", d);
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{}.0", s)
    }
}

/// Literal object values.
#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Int(i64),
    Dec(f64),
    /// Bare word or colon path kept verbatim: `table1`, `Step1:output`.
    Token(String),
    /// `"key"="value"`.
    Pair(String, String),
    List(Vec<Num>),
    Version(Version),
}

impl Eq for Literal {}

impl PartialOrd for Literal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Literal {
    fn cmp(&self, other: &Self) -> Ordering {
        use Literal::*;
        fn rank(l: &Literal) -> u8 {
            match l {
                Str(_) => 0,
                Int(_) => 1,
                Dec(_) => 2,
                Token(_) => 3,
                Pair(_, _) => 4,
                List(_) => 5,
                Version(_) => 6,
            }
        }
        match (self, other) {
            (Str(a), Str(b)) => a.cmp(b),
            (Int(a), Int(b)) => a.cmp(b),
            (Dec(a), Dec(b)) => a.total_cmp(b),
            (Token(a), Token(b)) => a.cmp(b),
            (Pair(ak, av), Pair(bk, bv)) => (ak, av).cmp(&(bk, bv)),
            (List(a), List(b)) => a.cmp(b),
            (Version(a), Version(b)) => a.cmp(b),
            (a, b) => rank(a).cmp(&rank(b)),
        }
    }
}

/// Object position of a quad.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Object {
    Addr(Address),
    /// An address pinned to a specific commit (fork/merge provenance).
    AddrAt(Address, CommitId),
    Blob(BlobRef),
    Lit(Literal),
}

impl Object {
    /// One-byte kind tag used in the canonical encoding.
    pub fn kind_tag(&self) -> &'static str {
        match self {
            Object::Addr(_) => "a",
            Object::AddrAt(_, _) => "@",
            Object::Blob(_) => "b",
            Object::Lit(Literal::Str(_)) => "s",
            Object::Lit(Literal::Int(_)) => "i",
            Object::Lit(Literal::Dec(_)) => "d",
            Object::Lit(Literal::Token(_)) => "t",
            Object::Lit(Literal::Pair(_, _)) => "p",
            Object::Lit(Literal::List(_)) => "l",
            Object::Lit(Literal::Version(_)) => "v",
        }
    }

    /// Canonical text form. Also the object syntax of serialized documents.
    pub fn render(&self) -> String {
        match self {
            Object::Addr(a) => a.render(),
            Object::AddrAt(a, c) => format!("{}@{}", a.render(), c.render()),
            Object::Blob(b) => b.render(),
            Object::Lit(Literal::Str(s)) => quote_string(s),
            Object::Lit(Literal::Int(i)) => i.to_string(),
            Object::Lit(Literal::Dec(d)) => render_decimal(*d),
            Object::Lit(Literal::Token(t)) => t.clone(),
            Object::Lit(Literal::Pair(k, v)) => format!("{}={}", quote_string(k), quote_string(v)),
            Object::Lit(Literal::List(items)) => {
                let parts: Vec<String> = items.iter().map(Num::render).collect();
                format!("[{}]", parts.join(", "))
            }
            Object::Lit(Literal::Version(v)) => format!("v{}", v),
        }
    }

    /// Parses a canonical object text given its kind tag.
    pub fn parse_canonical(tag: &str, text: &str) -> Result<Object, QuadError> {
        let bad = |m: &str| QuadError::Malformed(format!("{m}: {text:?}"));
        match tag {
            "a" => Address::parse_canonical(text)
                .map(Object::Addr)
                .map_err(|e| bad(&e.to_string())),
            "@" => {
                let at = text.rfind('@').ok_or_else(|| bad("missing commit"))?;
                if at == 0 {
                    return Err(bad("missing commit"));
                }
                let addr = Address::parse_canonical(&text[..at]).map_err(|e| bad(&e.to_string()))?;
                let commit = CommitId::parse(&text[at + 1..]).ok_or_else(|| bad("bad commit id"))?;
                Ok(Object::AddrAt(addr, commit))
            }
            "b" => BlobRef::parse(text).map(Object::Blob).ok_or_else(|| bad("bad blob ref")),
            "s" => unquote_string(text).map(|s| Object::Lit(Literal::Str(s))).ok_or_else(|| bad("bad string")),
            "i" => text.parse().map(|i| Object::Lit(Literal::Int(i))).map_err(|_| bad("bad int")),
            "d" => text.parse().map(|d| Object::Lit(Literal::Dec(d))).map_err(|_| bad("bad decimal")),
            "t" => Ok(Object::Lit(Literal::Token(text.to_string()))),
            "p" => {
                let (k, v) = split_pair(text).ok_or_else(|| bad("bad pair"))?;
                Ok(Object::Lit(Literal::Pair(k, v)))
            }
            "l" => {
                let inner = text
                    .strip_prefix('[')
                    .and_then(|t| t.strip_suffix(']'))
                    .ok_or_else(|| bad("bad list"))?;
                let mut items = Vec::new();
                let trimmed = inner.trim();
                if !trimmed.is_empty() {
                    for part in trimmed.split(',') {
                        let part = part.trim();
                        if part.contains('.') {
                            items.push(Num::Dec(part.parse().map_err(|_| bad("bad list item"))?));
                        } else {
                            items.push(Num::Int(part.parse().map_err(|_| bad("bad list item"))?));
                        }
                    }
                }
                Ok(Object::Lit(Literal::List(items)))
            }
            "v" => Version::parse(text)
                .map(|v| Object::Lit(Literal::Version(v)))
                .map_err(|_| bad("bad version")),
            _ => Err(bad("unknown kind tag")),
        }
    }
}

pub fn quote_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn unquote_string(text: &str) -> Option<String> {
    let inner = text.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next()? {
            '"' => out.push('"'),
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            't' => out.push('\t'),
            'u' => {
                if chars.next()? != '{' {
                    return None;
                }
                let mut hex = String::new();
                loop {
                    match chars.next()? {
                        '}' => break,
                        c => hex.push(c),
                    }
                }
                out.push(char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?);
            }
            _ => return None,
        }
    }
    Some(out)
}

fn split_pair(text: &str) -> Option<(String, String)> {
    // key and value are both escape-quoted; find the `=` between them.
    let mut in_quotes = false;
    let mut escaped = false;
    for (i, ch) in text.char_indices() {
        match ch {
            _ if escaped => escaped = false,
            '\\' => escaped = true,
            '"' => in_quotes = !in_quotes,
            '=' if !in_quotes => {
                let k = unquote_string(&text[..i])?;
                let v = unquote_string(&text[i + 1..])?;
                return Some((k, v));
            }
            _ => {}
        }
    }
    None
}

/// An authored link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Quad {
    pub author: PeerId,
    pub subject: Address,
    pub predicate: Address,
    pub object: Object,
}

impl Quad {
    pub fn new(author: PeerId, subject: Address, predicate: Address, object: Object) -> Self {
        Quad { author, subject, predicate, object }
    }

    /// Canonical bytes: fields joined by 0x1F.
    pub fn canonical(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.author.render().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.subject.render().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.predicate.render().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.object.kind_tag().as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.object.render().as_bytes());
        out
    }

    pub fn parse_canonical(bytes: &[u8]) -> Result<Quad, QuadError> {
        let text = std::str::from_utf8(bytes).map_err(|_| QuadError::Malformed("not utf-8".into()))?;
        let parts: Vec<&str> = text.split('\u{1f}').collect();
        if parts.len() != 5 {
            return Err(QuadError::Malformed(format!("expected 5 fields, got {}", parts.len())));
        }
        let author = PeerId::parse(parts[0]).map_err(|e| QuadError::Malformed(e.to_string()))?;
        let subject = Address::parse_canonical(parts[1]).map_err(|e| QuadError::Malformed(e.to_string()))?;
        let predicate = Address::parse_canonical(parts[2]).map_err(|e| QuadError::Malformed(e.to_string()))?;
        let object = Object::parse_canonical(parts[3], parts[4])?;
        Ok(Quad { author, subject, predicate, object })
    }
}

/// A set of quads. BTreeSet keeps iteration deterministic.
pub type QuadSet = BTreeSet<Quad>;

/// Canonical bytes of a quad set: encoded quads sorted bytewise, 0x0A-joined.
pub fn canonical_quadset(quads: &QuadSet) -> Vec<u8> {
    canonical_quads(quads.iter())
}

/// Same, for any quad sequence (duplicates collapse via the set contract
/// upstream; this function preserves whatever it is given).
pub fn canonical_quads<'a>(quads: impl Iterator<Item = &'a Quad>) -> Vec<u8> {
    let mut lines: Vec<Vec<u8>> = quads.map(Quad::canonical).collect();
    lines.sort();
    lines.join(&QUAD_SEP)
}

/// SHA-256 of the canonical quad set encoding.
pub fn hash_quadset(quads: &QuadSet) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"folkfed/quadset/v1");
    h.update([QUAD_SEP]);
    h.update(canonical_quadset(quads));
    h.finalize().into()
}

/// Parses a canonical quad-set encoding back to quads.
pub fn parse_canonical_quads(bytes: &[u8]) -> Result<Vec<Quad>, QuadError> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    bytes.split(|&b| b == QUAD_SEP).map(Quad::parse_canonical).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_identity;

    fn peers() -> (PeerId, PeerId) {
        let (a, _) = generate_identity(Some(b"qa"), "qa", "").unwrap();
        let (b, _) = generate_identity(Some(b"qb"), "qb", "").unwrap();
        (a.peer_id, b.peer_id)
    }

    fn sample_quads() -> QuadSet {
        let (a, b) = peers();
        let mut quads = QuadSet::new();
        quads.insert(Quad::new(
            a,
            Address::new(a, vec!["my-data"]),
            reserved::type_pred(),
            Object::Addr(Address::new(b, vec!["NWBFile"])),
        ));
        quads.insert(Quad::new(
            a,
            Address::new(a, vec!["my-data"]),
            Address::new(b, vec!["ElectricalSeries", "electrodes"]),
            Object::Lit(Literal::List(vec![Num::Int(1), Num::Int(2), Num::Int(3)])),
        ));
        quads.insert(Quad::new(
            a,
            Address::new(a, vec!["my-data"]),
            Address::new(b, vec!["note"]),
            Object::Lit(Literal::Str("multi\nline \"quoted\"".into())),
        ));
        quads.insert(Quad::new(
            a,
            Address::new(a, vec!["my-data"]),
            Address::new(b, vec!["dep"]),
            Object::Lit(Literal::Pair("libhdf5".into(), "x.y.z".into())),
        ));
        quads.insert(Quad::new(
            a,
            Address::new(a, vec!["my-data"]),
            reserved::version(),
            Object::Lit(Literal::Version(Version::parse("0.1.0").unwrap())),
        ));
        quads
    }

    #[test]
    fn canonical_quads_round_trip() {
        let quads = sample_quads();
        for q in &quads {
            let bytes = q.canonical();
            assert_eq!(&Quad::parse_canonical(&bytes).unwrap(), q);
        }
        let encoded = canonical_quadset(&quads);
        let parsed = parse_canonical_quads(&encoded).unwrap();
        let reparsed: QuadSet = parsed.into_iter().collect();
        assert_eq!(reparsed, quads);
    }

    #[test]
    fn hash_is_order_independent() {
        let quads = sample_quads();
        let h1 = hash_quadset(&quads);
        // Rebuild in reverse insertion order.
        let mut rev = QuadSet::new();
        for q in quads.iter().rev() {
            rev.insert(q.clone());
        }
        assert_eq!(h1, hash_quadset(&rev));
        // Adding a quad changes the hash.
        let (a, b) = peers();
        let mut more = quads.clone();
        more.insert(Quad::new(
            a,
            Address::new(a, vec!["my-data"]),
            Address::new(b, vec!["extra"]),
            Object::Lit(Literal::Int(1)),
        ));
        assert_ne!(h1, hash_quadset(&more));
    }

    #[test]
    fn decimals_keep_their_point() {
        assert_eq!(render_decimal(500.0), "500.0");
        assert_eq!(render_decimal(0.25), "0.25");
        let obj = Object::Lit(Literal::Dec(500.0));
        let back = Object::parse_canonical("d", &obj.render()).unwrap();
        assert_eq!(back, obj);
    }

    #[test]
    fn string_escaping_round_trips() {
        for s in ["plain", "with \"quotes\"", "new\nline", "tab\t", "back\\slash", "ctrl\u{1}"] {
            let quoted = quote_string(s);
            assert!(!quoted.contains('\n'));
            assert_eq!(unquote_string(&quoted).unwrap(), s);
        }
    }

    #[test]
    fn blob_and_addr_at_render() {
        let (a, _) = peers();
        let blob = BlobRef { hash: [7u8; 32], len: 42, codec: "num".into() };
        let obj = Object::Blob(blob.clone());
        assert_eq!(Object::parse_canonical("b", &obj.render()).unwrap(), obj);
        let at = Object::AddrAt(Address::new(a, vec!["x"]), CommitId([9u8; 32]));
        assert_eq!(Object::parse_canonical("@", &at.render()).unwrap(), at);
    }
}
