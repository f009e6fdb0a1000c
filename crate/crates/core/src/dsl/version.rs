//! Dotted numeric versions and version requirements.
//!
//! Versions are sequences of numeric segments of any length; comparison is
//! lexicographic with missing segments read as zero, so `1.2` == `1.2.0` and
//! `0.10` > `0.9`. Requirements pair an operator with a pattern whose
//! segments may be `*` wildcards.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VersionError {
    #[error("empty version string")]
    Empty,
    #[error("bad version segment {0:?}")]
    BadSegment(String),
    #[error("empty requirement pattern")]
    EmptyPattern,
    #[error("requirement {0:?} has no concrete segment")]
    AllWildcards(String),
}

/// A concrete release version: one or more numeric segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Version {
    pub segments: Vec<u64>,
}

impl Version {
    pub fn new(segments: Vec<u64>) -> Self {
        Version { segments }
    }

    /// Accepts `0.1.0` and `v0.1.0`; segments must be decimal integers.
    pub fn parse(text: &str) -> Result<Self, VersionError> {
        let text = text.trim();
        let text = text.strip_prefix('v').unwrap_or(text);
        if text.is_empty() {
            return Err(VersionError::Empty);
        }
        let mut segments = Vec::new();
        for part in text.split('.') {
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(VersionError::BadSegment(part.to_string()));
            }
            segments.push(part.parse::<u64>().map_err(|_| VersionError::BadSegment(part.to_string()))?);
        }
        Ok(Version { segments })
    }

    fn segment(&self, i: usize) -> u64 {
        self.segments.get(i).copied().unwrap_or(0)
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        let n = self.segments.len().max(other.segments.len());
        for i in 0..n {
            match self.segment(i).cmp(&other.segment(i)) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        Ordering::Equal
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.segments.iter().map(u64::to_string).collect();
        write!(f, "{}", parts.join("."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VersionOp {
    Exact,
    Caret,
    Tilde,
    Ge,
    Le,
    Gt,
    Lt,
}

/// One pattern segment: a concrete number or a wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pat {
    Num(u64),
    Wild,
}

/// A version requirement: operator plus pattern.
///
/// Semantics (shared with the brute-force oracle in the tests):
/// * `exact`: segment-wise equality, wildcards match anything, missing
///   segments on either side read as zero (a trailing wildcard also absorbs
///   all further segments).
/// * `caret`: at least the pattern floor and below the increment of the
///   leftmost nonzero concrete segment (below the increment of the last
///   concrete segment when all are zero).
/// * `tilde`: at least the floor and below the increment of the penultimate
///   pattern segment (the only segment for one-segment patterns).
/// * comparison ops: lexicographic against the floor (wildcards read as
///   zero).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VersionReq {
    pub op: VersionOp,
    pub pattern: Vec<Pat>,
}

impl VersionReq {
    pub fn exact(v: &Version) -> Self {
        VersionReq { op: VersionOp::Exact, pattern: v.segments.iter().map(|s| Pat::Num(*s)).collect() }
    }

    /// The all-wildcard requirement that matches every version.
    pub fn any() -> Self {
        VersionReq { op: VersionOp::Exact, pattern: vec![Pat::Wild] }
    }

    /// Parses `^20.*`, `~1.2`, `>=0.1.1`, `≥0.1.1`, `v0.1.0`, `3.8`, `*`.
    pub fn parse(text: &str) -> Result<Self, VersionError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(VersionError::EmptyPattern);
        }
        let (op, rest) = if let Some(r) = text.strip_prefix('^') {
            (VersionOp::Caret, r)
        } else if let Some(r) = text.strip_prefix('~') {
            (VersionOp::Tilde, r)
        } else if let Some(r) = text.strip_prefix(">=").or_else(|| text.strip_prefix('≥')) {
            (VersionOp::Ge, r)
        } else if let Some(r) = text.strip_prefix("<=").or_else(|| text.strip_prefix('≤')) {
            (VersionOp::Le, r)
        } else if let Some(r) = text.strip_prefix('>') {
            (VersionOp::Gt, r)
        } else if let Some(r) = text.strip_prefix('<') {
            (VersionOp::Lt, r)
        } else if let Some(r) = text.strip_prefix('=') {
            (VersionOp::Exact, r)
        } else {
            (VersionOp::Exact, text)
        };
        let rest = rest.trim();
        let rest = rest.strip_prefix('v').unwrap_or(rest);
        if rest.is_empty() {
            return Err(VersionError::EmptyPattern);
        }
        let mut pattern = Vec::new();
        for part in rest.split('.') {
            if part == "*" {
                pattern.push(Pat::Wild);
            } else if !part.is_empty() && part.bytes().all(|b| b.is_ascii_digit()) {
                pattern.push(Pat::Num(part.parse().map_err(|_| VersionError::BadSegment(part.to_string()))?));
            } else {
                return Err(VersionError::BadSegment(part.to_string()));
            }
        }
        let req = VersionReq { op, pattern };
        if req.op != VersionOp::Exact && !req.pattern.iter().any(|p| matches!(p, Pat::Num(_))) {
            return Err(VersionError::AllWildcards(text.to_string()));
        }
        Ok(req)
    }

    /// The lower bound implied by the pattern: wildcards read as zero.
    fn floor(&self) -> Version {
        Version::new(
            self.pattern
                .iter()
                .map(|p| match p {
                    Pat::Num(n) => *n,
                    Pat::Wild => 0,
                })
                .collect(),
        )
    }

    /// Exclusive upper bound for caret: increment at the leftmost nonzero
    /// concrete segment, or at the last concrete segment when all are zero.
    fn caret_ceiling(&self) -> Option<Version> {
        let mut last_concrete = None;
        for (i, p) in self.pattern.iter().enumerate() {
            if let Pat::Num(n) = p {
                last_concrete = Some(i);
                if *n != 0 {
                    return Some(increment_at(&self.pattern, i));
                }
            }
        }
        last_concrete.map(|i| increment_at(&self.pattern, i))
    }

    /// Exclusive upper bound for tilde: increment at the penultimate pattern
    /// segment (segment zero for one-segment patterns).
    fn tilde_ceiling(&self) -> Version {
        let at = self.pattern.len().saturating_sub(2);
        increment_at(&self.pattern, at)
    }
}

fn increment_at(pattern: &[Pat], at: usize) -> Version {
    let mut segs = Vec::with_capacity(at + 1);
    for p in &pattern[..at] {
        segs.push(match p {
            Pat::Num(n) => *n,
            Pat::Wild => 0,
        });
    }
    let last = match pattern[at] {
        Pat::Num(n) => n,
        Pat::Wild => 0,
    };
    segs.push(last + 1);
    Version::new(segs)
}

impl fmt::Display for VersionReq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            VersionOp::Exact => "",
            VersionOp::Caret => "^",
            VersionOp::Tilde => "~",
            VersionOp::Ge => ">=",
            VersionOp::Le => "<=",
            VersionOp::Gt => ">",
            VersionOp::Lt => "<",
        };
        let parts: Vec<String> = self
            .pattern
            .iter()
            .map(|p| match p {
                Pat::Num(n) => n.to_string(),
                Pat::Wild => "*".to_string(),
            })
            .collect();
        write!(f, "{}{}", op, parts.join("."))
    }
}

/// True when `version` satisfies `req`.
pub fn match_version(version: &Version, req: &VersionReq) -> bool {
    match req.op {
        VersionOp::Exact => {
            let n = version.segments.len().max(req.pattern.len());
            for i in 0..n {
                match req.pattern.get(i) {
                    Some(Pat::Wild) => {
                        // A trailing wildcard absorbs the rest of the version.
                        if i + 1 == req.pattern.len() {
                            return true;
                        }
                    }
                    Some(Pat::Num(want)) => {
                        if version.segment(i) != *want {
                            return false;
                        }
                    }
                    None => {
                        if version.segment(i) != 0 {
                            return false;
                        }
                    }
                }
            }
            true
        }
        VersionOp::Caret => {
            let floor = req.floor();
            if *version < floor {
                return false;
            }
            match req.caret_ceiling() {
                Some(ceil) => *version < ceil,
                None => true,
            }
        }
        VersionOp::Tilde => *version >= req.floor() && *version < req.tilde_ceiling(),
        VersionOp::Ge => *version >= req.floor(),
        VersionOp::Le => *version <= req.floor(),
        VersionOp::Gt => *version > req.floor(),
        VersionOp::Lt => *version < req.floor(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(text: &str) -> Version {
        Version::parse(text).unwrap()
    }

    fn r(text: &str) -> VersionReq {
        VersionReq::parse(text).unwrap()
    }

    #[test]
    fn parse_forms() {
        assert_eq!(v("1.2.3").segments, vec![1, 2, 3]);
        assert_eq!(v("v0.1.0").segments, vec![0, 1, 0]);
        assert_eq!(r("^20.*").op, VersionOp::Caret);
        assert_eq!(r("≥0.1.1").op, VersionOp::Ge);
        assert_eq!(r(">=0.1.1"), r("≥0.1.1"));
        assert_eq!(r("3.8").op, VersionOp::Exact);
        assert!(VersionReq::parse("^*.*").is_err());
        assert!(VersionReq::parse("").is_err());
        assert!(Version::parse("1..2").is_err());
    }

    #[test]
    fn ordering_pads_with_zero() {
        assert_eq!(v("1.2"), v("1.2"));
        assert!(v("1.2") < v("1.2.1"));
        assert_eq!(v("1.2").cmp(&v("1.2.0")), Ordering::Equal);
        assert!(v("0.10") > v("0.9"));
    }

    #[test]
    fn exact_and_wildcards() {
        assert!(match_version(&v("1.0.0"), &r("1.0.0")));
        assert!(!match_version(&v("1.0.1"), &r("1.0.0")));
        assert!(match_version(&v("1.0"), &r("1.0.0")));
        assert!(match_version(&v("20.4"), &r("20.*")));
        assert!(match_version(&v("20.4.9"), &r("20.*")));
        assert!(!match_version(&v("21.0"), &r("20.*")));
        assert!(match_version(&v("3.8"), &r("3.8")));
        assert!(!match_version(&v("3.8.1"), &r("3.8")));
    }

    #[test]
    fn caret_spans_leftmost_nonzero() {
        assert!(match_version(&v("20.04"), &r("^20.*")));
        assert!(match_version(&v("20.9.9"), &r("^20.*")));
        assert!(!match_version(&v("21.0"), &r("^20.*")));
        assert!(match_version(&v("4.2.0"), &r("^4.*.*")));
        assert!(!match_version(&v("5.0.0"), &r("^4.*.*")));
        assert!(match_version(&v("0.2.5"), &r("^0.2.*")));
        assert!(!match_version(&v("0.3.0"), &r("^0.2.*")));
        assert!(!match_version(&v("0.1.9"), &r("^0.2.*")));
        assert!(match_version(&v("0.0.3"), &r("^0.0.3")));
        assert!(!match_version(&v("0.0.4"), &r("^0.0.3")));
        assert!(match_version(&v("0.0.9"), &r("^0.0")));
        assert!(!match_version(&v("0.1.0"), &r("^0.0")));
    }

    #[test]
    fn tilde_spans_penultimate() {
        assert!(match_version(&v("1.2.3"), &r("~1.2.3")));
        assert!(match_version(&v("1.2.9"), &r("~1.2.3")));
        assert!(!match_version(&v("1.3.0"), &r("~1.2.3")));
        assert!(!match_version(&v("1.2.2"), &r("~1.2.3")));
        assert!(match_version(&v("1.9"), &r("~1.2")));
        assert!(!match_version(&v("2.0"), &r("~1.2")));
        assert!(match_version(&v("1.9"), &r("~1")));
        assert!(!match_version(&v("2.0"), &r("~1")));
    }

    #[test]
    fn comparisons_are_lexicographic() {
        assert!(match_version(&v("0.1.1"), &r("≥0.1.1")));
        assert!(match_version(&v("0.2.0"), &r("≥0.1.1")));
        assert!(!match_version(&v("0.1.0"), &r("≥0.1.1")));
        assert!(match_version(&v("0.1.0"), &r("<0.1.1")));
        assert!(!match_version(&v("0.1.1"), &r("<0.1.1")));
        assert!(match_version(&v("0.1.1"), &r("≤0.1.1")));
        assert!(match_version(&v("0.1.2"), &r(">0.1.1")));
    }

    #[test]
    fn display_round_trips() {
        for text in ["^20.*", "~1.2", ">=0.1.1", "1.0.0", "^4.*.*", "<=2.0"] {
            let req = r(text);
            assert_eq!(VersionReq::parse(&req.to_string()).unwrap(), req);
        }
        assert_eq!(v("1.2.3").to_string(), "1.2.3");
    }
}
