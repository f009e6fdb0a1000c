//! Canonical document serialization.
//!
//! The output is a normal parseable document in a fixed shape: one `@base`
//! section per author (authors sorted by id), one declaration per subject
//! (subjects sorted by canonical text), one statement line per (predicate,
//! object-group) sorted the same way. Reserved predicates use their sugar
//! forms (`a`, `extends`, bare value lines for `about`); a predicate that
//! extends its subject is written as a relative token path. Re-resolving the
//! output reproduces the input quad set byte for byte, and serialization of
//! the result is idempotent.
//!
//! Token literals are rendered verbatim, so programmatically built tokens
//! must still look like tokens (not like numbers, versions, or blob refs) to
//! survive the round trip; the parser never produces ambiguous ones.

use std::collections::BTreeMap;

use crate::dsl::address::Address;
use crate::identity::PeerId;
use crate::linkstore::quad::{reserved, Object, QuadSet};

/// Serializes a quad set to canonical text.
pub fn serialize(quads: &QuadSet) -> String {
    // author -> subject -> predicate -> objects
    let mut tree: BTreeMap<PeerId, BTreeMap<String, SubjectGroup>> = BTreeMap::new();
    for quad in quads {
        tree.entry(quad.author)
            .or_default()
            .entry(quad.subject.render())
            .or_insert_with(|| SubjectGroup {
                subject: quad.subject.clone(),
                preds: BTreeMap::new(),
            })
            .preds
            .entry(quad.predicate.render())
            .or_insert_with(|| PredGroup { pred: quad.predicate.clone(), objects: Vec::new() })
            .objects
            .push(quad.object.clone());
    }

    let type_pred = reserved::type_pred();
    let extends_pred = reserved::extends();
    let about_pred = reserved::about();

    let mut out = String::new();
    for (author, subjects) in &tree {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("@base @");
        out.push_str(&author.render());
        out.push('\n');
        for group in subjects.values() {
            out.push('\n');
            out.push('<');
            out.push_str(&group.subject.render());
            out.push_str(">\n");
            for pg in group.preds.values() {
                let mut objects: Vec<String> =
                    pg.objects.iter().map(Object::render).collect();
                objects.sort();
                if pg.pred == about_pred {
                    for obj in &objects {
                        out.push_str("  ");
                        out.push_str(obj);
                        out.push('\n');
                    }
                    continue;
                }
                let head = if pg.pred == type_pred {
                    "a".to_string()
                } else if pg.pred == extends_pred {
                    "extends".to_string()
                } else {
                    render_pred(&pg.pred, &group.subject)
                };
                out.push_str("  ");
                out.push_str(&head);
                for obj in &objects {
                    out.push(' ');
                    out.push_str(obj);
                }
                out.push('\n');
            }
        }
    }
    out
}

struct SubjectGroup {
    subject: Address,
    preds: BTreeMap<String, PredGroup>,
}

struct PredGroup {
    pred: Address,
    objects: Vec<Object>,
}

/// Relative token path when the predicate extends the subject and the tail
/// re-reads as a plain token path; absolute address otherwise.
fn render_pred(pred: &Address, subject: &Address) -> String {
    if pred.pins.is_empty() {
        if let Some(tail) = pred.tail_under(&subject.without_pins()) {
            if !tail.is_empty() {
                let joined = tail.join(":");
                if joined != "a" && joined != "extends" && reads_as_token_path(&joined) {
                    return joined;
                }
            }
        }
    }
    pred.render()
}

fn reads_as_token_path(text: &str) -> bool {
    // must survive the tokenizer as a bare word, not a number/version/blob
    if text.starts_with("blob:") {
        return false;
    }
    if text.parse::<i64>().is_ok() {
        return false;
    }
    let first = text.as_bytes()[0];
    if first == b'.' || first == b'@' || first == b'<' || first == b'"' || first == b'[' {
        return false;
    }
    // decimal- and version-shaped heads are re-classified by the tokenizer
    let head = text.split(':').next().unwrap_or(text);
    let decimal_shaped = {
        let body = head.strip_prefix('-').unwrap_or(head);
        !body.is_empty() && body.chars().all(|c| c.is_ascii_digit() || c == '.') && body.contains('.')
    };
    let version_shaped = head.len() >= 2
        && head.starts_with('v')
        && head.as_bytes()[1].is_ascii_digit()
        && head[1..].chars().all(|c| c.is_ascii_digit() || c == '.');
    !decimal_shaped && !version_shaped
}
