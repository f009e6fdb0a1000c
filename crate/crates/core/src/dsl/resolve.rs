//! Quadification: turning a parsed document into authored quads.
//!
//! Every statement sits in a scope with four addresses: the `subject` its
//! quads are issued about, the `slot` that bare token predicates extend, the
//! (`value_subject`, `value_pred`) pair that bare value lines attach to, and
//! an optional dot-expansion `anchor`. At the root of a declaration all of
//! these start at the declaration's own address, and bare values become
//! `about` quads. Descending into a statement's children shifts the scope:
//! token statements move subject and slot to their own slot address, while
//! address-predicate statements keep the subject and re-anchor on the
//! foreign address.
//!
//! Sibling token statements with the same predicate path get ordinal slot
//! segments (`federatedWith:0`, `federatedWith:1`) so that the grouping of
//! their children survives into the flat quad set.

use std::collections::BTreeMap;

use crate::dsl::address::{Address, DeclName, RawAddress, RawPeer};
use crate::dsl::ast::{Document, Item, NumLit, ObjectExpr, PredPath, Statement};
use crate::dsl::DslError;
use crate::identity::HandleTable;
use crate::linkstore::quad::{reserved, Literal, Num, Object, Quad, QuadSet};

/// A resolved document: the quads plus the subject of each declaration in
/// document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub quads: QuadSet,
    pub subjects: Vec<Address>,
}

/// Resolves a document to its quad set. `base` supplies the author and the
/// root for relative declaration names unless the document carries its own
/// `@base` directives; `prefixes` are pre-resolved alias expansions that the
/// document's own `#prefix` directives extend (and may shadow).
pub fn resolve(
    doc: &Document,
    base: &Address,
    prefixes: &[(String, Address)],
    handles: &HandleTable,
) -> Result<QuadSet, DslError> {
    Ok(resolve_document(doc, base, prefixes, handles)?.quads)
}

/// Like [`resolve`], but also reports each declaration's subject address.
pub fn resolve_document(
    doc: &Document,
    base: &Address,
    prefixes: &[(String, Address)],
    handles: &HandleTable,
) -> Result<Resolved, DslError> {
    let mut env = Env { prefixes: BTreeMap::new(), handles };
    for (alias, addr) in prefixes {
        env.prefixes.insert(alias.clone(), addr.clone());
    }
    for (alias, raw) in &doc.prefixes {
        let target = env.resolve_raw(raw)?;
        env.prefixes.insert(alias.clone(), target);
    }

    let mut out = QuadSet::new();
    let mut subjects = Vec::with_capacity(doc.decls.len());
    for (idx, decl) in doc.decls.iter().enumerate() {
        let section_base = match doc.bases.iter().rev().find(|b| b.before_decl <= idx) {
            Some(directive) => env.resolve_raw(&directive.addr)?,
            None => base.clone(),
        };
        let author = section_base.peer;
        let subject = match &decl.name {
            DeclName::Local(segments) => section_base.descend(segments),
            DeclName::Absolute(raw) => env.resolve_raw(raw)?,
        };
        let scope = Scope {
            subject: subject.clone(),
            slot: subject.clone(),
            value_subject: subject.clone(),
            value_pred: None,
            anchor: None,
        };
        resolve_items(&decl.body, &scope, author, &section_base, &env, &mut out)?;
        subjects.push(subject);
    }
    Ok(Resolved { quads: out, subjects })
}

struct Env<'a> {
    prefixes: BTreeMap<String, Address>,
    handles: &'a HandleTable,
}

impl Env<'_> {
    fn resolve_raw(&self, raw: &RawAddress) -> Result<Address, DslError> {
        match &raw.peer {
            RawPeer::Id(id) => Ok(Address {
                peer: *id,
                segments: raw.segments.clone(),
                pins: raw.pins.clone(),
            }),
            RawPeer::Alias(alias) => {
                if let Some(prefix) = self.prefixes.get(alias) {
                    let mut addr = prefix.clone();
                    let offset = addr.segments.len();
                    addr.segments.extend(raw.segments.iter().cloned());
                    for (k, req) in &raw.pins {
                        addr.pins.insert(offset + k, req.clone());
                    }
                    Ok(addr)
                } else if let Ok(peer) = self.handles.resolve(alias) {
                    Ok(Address {
                        peer,
                        segments: raw.segments.clone(),
                        pins: raw.pins.clone(),
                    })
                } else {
                    Err(DslError::UnboundAlias { alias: alias.clone() })
                }
            }
        }
    }
}

#[derive(Clone)]
struct Scope {
    subject: Address,
    slot: Address,
    value_subject: Address,
    /// `None` at declaration root: bare values become `about` quads there.
    value_pred: Option<Address>,
    anchor: Option<Address>,
}

fn resolve_items(
    items: &[Item],
    scope: &Scope,
    author: crate::identity::PeerId,
    base_root: &Address,
    env: &Env<'_>,
    out: &mut QuadSet,
) -> Result<(), DslError> {
    // Ordinals: a token predicate path that occurs on more than one sibling
    // statement gets per-occurrence slot segments.
    let mut path_totals: BTreeMap<&[String], usize> = BTreeMap::new();
    for item in items {
        if let Item::Stmt(Statement { pred: PredPath::Tokens(segs), .. }) = item {
            *path_totals.entry(segs.as_slice()).or_insert(0) += 1;
        }
    }
    let mut path_seen: BTreeMap<&[String], usize> = BTreeMap::new();

    let mut running_anchor = scope.anchor.clone();

    for item in items {
        match item {
            Item::Value { expr, .. } => {
                let obj = to_object(expr, base_root, env)?;
                if let Object::Addr(addr) = &obj {
                    running_anchor = Some(addr.clone());
                }
                let pred = match &scope.value_pred {
                    None => reserved::about(),
                    Some(p) => p.clone(),
                };
                out.insert(Quad::new(author, scope.value_subject.clone(), pred, obj));
            }
            Item::Context { addr, body, .. } => {
                let ctx = env.resolve_raw(addr)?;
                running_anchor = Some(ctx.clone());
                let child = Scope {
                    subject: scope.subject.clone(),
                    slot: ctx.clone(),
                    value_subject: scope.subject.clone(),
                    value_pred: Some(ctx.clone()),
                    anchor: Some(ctx),
                };
                resolve_items(body, &child, author, base_root, env, out)?;
            }
            Item::Stmt(stmt) => {
                let ordinal = match &stmt.pred {
                    PredPath::Tokens(segs) if path_totals[segs.as_slice()] > 1 => {
                        let k = path_seen.entry(segs.as_slice()).or_insert(0);
                        let ord = *k;
                        *k += 1;
                        Some(ord)
                    }
                    _ => None,
                };
                resolve_stmt(
                    stmt,
                    ordinal,
                    scope,
                    &mut running_anchor,
                    author,
                    base_root,
                    env,
                    out,
                )?;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn resolve_stmt(
    stmt: &Statement,
    ordinal: Option<usize>,
    scope: &Scope,
    running_anchor: &mut Option<Address>,
    author: crate::identity::PeerId,
    base_root: &Address,
    env: &Env<'_>,
    out: &mut QuadSet,
) -> Result<(), DslError> {
    let objects = stmt
        .objects
        .iter()
        .map(|e| to_object(e, base_root, env))
        .collect::<Result<Vec<_>, _>>()?;
    let last_addr = objects.iter().rev().find_map(|o| match o {
        Object::Addr(a) => Some(a.clone()),
        _ => None,
    });

    let (pred, child) = match &stmt.pred {
        PredPath::Type | PredPath::Extends => {
            let pred = if stmt.pred == PredPath::Type {
                reserved::type_pred()
            } else {
                reserved::extends()
            };
            if let Some(a) = &last_addr {
                *running_anchor = Some(a.clone());
            }
            let slot = last_addr.clone().unwrap_or_else(|| pred.clone());
            let child = Scope {
                subject: scope.subject.clone(),
                slot,
                value_subject: scope.subject.clone(),
                value_pred: Some(pred.clone()),
                anchor: last_addr.clone().or_else(|| running_anchor.clone()),
            };
            (pred, child)
        }
        PredPath::Tokens(segs) => {
            let mut slot = scope.slot.descend(segs);
            if let Some(k) = ordinal {
                slot = slot.child(&k.to_string());
            }
            if let Some(a) = &last_addr {
                *running_anchor = Some(a.clone());
            }
            let child = Scope {
                subject: slot.clone(),
                slot: slot.clone(),
                value_subject: scope.subject.clone(),
                value_pred: Some(slot.clone()),
                anchor: last_addr.clone().or_else(|| running_anchor.clone()),
            };
            (slot, child)
        }
        PredPath::Dotted(segs) => {
            let anchor = running_anchor
                .clone()
                .ok_or(DslError::DotWithoutContext { line: stmt.line })?;
            let pred = anchor.descend(segs);
            // Dotted statements use the anchor without updating it, so
            // consecutive dotted siblings expand under the same context.
            let child = Scope {
                subject: scope.subject.clone(),
                slot: pred.clone(),
                value_subject: scope.subject.clone(),
                value_pred: Some(pred.clone()),
                anchor: Some(pred.clone()),
            };
            (pred, child)
        }
        PredPath::Addr(raw) => {
            let pred = env.resolve_raw(raw)?;
            let anchor = last_addr.clone().unwrap_or_else(|| pred.clone());
            *running_anchor = Some(anchor.clone());
            let child = Scope {
                subject: scope.subject.clone(),
                slot: anchor.clone(),
                value_subject: scope.subject.clone(),
                value_pred: Some(pred.clone()),
                anchor: Some(anchor),
            };
            (pred, child)
        }
    };

    for obj in objects {
        out.insert(Quad::new(author, scope.subject.clone(), pred.clone(), obj));
    }
    resolve_items(&stmt.children, &child, author, base_root, env, out)
}

fn to_object(expr: &ObjectExpr, base_root: &Address, env: &Env<'_>) -> Result<Object, DslError> {
    Ok(match expr {
        ObjectExpr::Addr(raw) => Object::Addr(env.resolve_raw(raw)?),
        ObjectExpr::AddrAt(raw, commit) => Object::AddrAt(env.resolve_raw(raw)?, *commit),
        ObjectExpr::Blob(blob) => Object::Blob(blob.clone()),
        ObjectExpr::Ref(DeclName::Local(segs)) => Object::Addr(base_root.descend(segs)),
        ObjectExpr::Ref(DeclName::Absolute(raw)) => Object::Addr(env.resolve_raw(raw)?),
        ObjectExpr::Str(s) => Object::Lit(Literal::Str(s.clone())),
        ObjectExpr::Int(i) => Object::Lit(Literal::Int(*i)),
        ObjectExpr::Dec(d) => Object::Lit(Literal::Dec(*d)),
        ObjectExpr::Token(t) => Object::Lit(Literal::Token(t.clone())),
        ObjectExpr::Pair(k, v) => Object::Lit(Literal::Pair(k.clone(), v.clone())),
        ObjectExpr::List(items) => Object::Lit(Literal::List(
            items
                .iter()
                .map(|n| match n {
                    NumLit::Int(i) => Num::Int(*i),
                    NumLit::Dec(d) => Num::Dec(*d),
                })
                .collect(),
        )),
        ObjectExpr::Version(v) => Object::Lit(Literal::Version(v.clone())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parser::parse;
    use crate::identity::{generate_identity, PeerId};

    fn peer(tag: &str) -> PeerId {
        generate_identity(Some(tag.as_bytes()), tag, "").unwrap().0.peer_id
    }

    fn handles() -> (HandleTable, PeerId) {
        let mut t = HandleTable::with_reserved();
        let jonny = peer("jonny");
        for name in ["jonny", "nwb", "hdf", "schema", "hhs", "analysis", "pip", "git"] {
            t = t.bind(name, peer(name)).unwrap();
        }
        (t, jonny)
    }

    fn quads_of(src: &str) -> QuadSet {
        let (t, jonny) = handles();
        let doc = parse(src).unwrap();
        resolve(&doc, &Address::peer_only(jonny), &[], &t).unwrap()
    }

    fn find<'a>(quads: &'a QuadSet, pred: &Address) -> Vec<&'a Quad> {
        quads.iter().filter(|q| &q.predicate == pred).collect()
    }

    #[test]
    fn dotted_expands_under_context_address() {
        let quads = quads_of(
            "<#my-data>\n  a @nwb:NWBFile\n  @nwb:general:experimenter @jonny\n  @nwb:ElectricalSeries\n    .electrodes [1, 2, 3]\n    .rate 30000\n    .data [ ... ]\n",
        );
        assert_eq!(quads.len(), 4);
        let nwb = peer("nwb");
        let pred = Address::new(nwb, vec!["ElectricalSeries", "electrodes"]);
        let hits = find(&quads, &pred);
        assert_eq!(hits.len(), 1);
        let jonny = peer("jonny");
        assert_eq!(hits[0].subject, Address::new(jonny, vec!["my-data"]));
        assert_eq!(hits[0].author, jonny);
    }

    #[test]
    fn lone_type_statement_yields_one_quad() {
        let quads = quads_of("<#x>\n  a @nwb:NWBFile\n");
        assert_eq!(quads.len(), 1);
        let q = quads.iter().next().unwrap();
        assert_eq!(q.predicate, reserved::type_pred());
    }

    #[test]
    fn root_values_become_about_quads() {
        let quads = quads_of("<#links:super6>\n  @nwb:superstar6\n  @schema:exactMatch @hdf:SUPER6\n");
        assert_eq!(quads.len(), 2);
        let about = find(&quads, &reserved::about());
        assert_eq!(about.len(), 1);
        let jonny = peer("jonny");
        assert_eq!(about[0].subject, Address::new(jonny, vec!["links", "super6"]));
    }

    #[test]
    fn dotted_anchors_on_type_object_of_sibling() {
        let quads = quads_of(
            "<#f>\n  a @hdf:HDF5\n  .isVersion \"x.y.z\"\n  .hasDependency \"libhdf5\"=\"x.y.z\"\n",
        );
        let hdf = peer("hdf");
        assert_eq!(find(&quads, &Address::new(hdf, vec!["HDF5", "isVersion"])).len(), 1);
        assert_eq!(find(&quads, &Address::new(hdf, vec!["HDF5", "hasDependency"])).len(), 1);
    }

    #[test]
    fn dotted_anchors_on_parent_statement_object() {
        let quads = quads_of(
            "<#p>\n  accessRuleSet @hhs:HIPAA\n    .authorizedRecipient <#ids>\n",
        );
        let hhs = peer("hhs");
        let jonny = peer("jonny");
        let hits = find(&quads, &Address::new(hhs, vec!["HIPAA", "authorizedRecipient"]));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].subject, Address::new(jonny, vec!["p", "accessRuleSet"]));
        assert_eq!(hits[0].object, Object::Addr(Address::new(jonny, vec!["ids"])));
    }

    #[test]
    fn dotted_anchor_walks_out_through_parents() {
        let quads = quads_of(
            "<#proj>\n  workflow Analysis1 @analysis:my-analysis\n    globalParams\n      .Step1:params:bin_width 10\n",
        );
        let analysis = peer("analysis");
        let pred = Address::new(analysis, vec!["my-analysis", "Step1", "params", "bin_width"]);
        let hits = find(&quads, &pred);
        assert_eq!(hits.len(), 1);
        let jonny = peer("jonny");
        assert_eq!(
            hits[0].subject,
            Address::new(jonny, vec!["proj", "workflow", "globalParams"])
        );
        assert_eq!(hits[0].object, Object::Lit(Literal::Int(10)));
    }

    #[test]
    fn sibling_value_anchors_dotted() {
        let quads = quads_of(
            "<#b>\n  dependsOn\n    @pip:opencv-python\n    .extraSource \"https://pywheels.org/\"\n",
        );
        let pip = peer("pip");
        let jonny = peer("jonny");
        let hits = find(&quads, &Address::new(pip, vec!["opencv-python", "extraSource"]));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].subject, Address::new(jonny, vec!["b", "dependsOn"]));
        // consecutive dotted siblings share the anchor
        let quads = quads_of(
            "<#b>\n  providedBy\n    @git:repository\n    .url \"u\"\n    .hash \"h\"\n",
        );
        let git = peer("git");
        assert_eq!(find(&quads, &Address::new(git, vec!["repository", "url"])).len(), 1);
        assert_eq!(find(&quads, &Address::new(git, vec!["repository", "hash"])).len(), 1);
    }

    #[test]
    fn repeated_token_predicates_get_ordinals() {
        let quads = quads_of(
            "<#g>\n  federatedWith\n    name @nwb\n    @hdf:shareData\n  federatedWith\n    name @schema\n",
        );
        let jonny = peer("jonny");
        let s = Address::new(jonny, vec!["g"]);
        let slot0 = s.child("federatedWith").child("0");
        let slot1 = s.child("federatedWith").child("1");
        assert_eq!(find(&quads, &slot0.child("name")).len(), 1);
        assert_eq!(find(&quads, &slot1.child("name")).len(), 1);
        // the bare value attaches to the ordinal slot of its own block
        let hits = find(&quads, &slot0);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].subject, s);
        // a single occurrence elsewhere gets no ordinal
        let single = quads_of("<#g>\n  federatedWith\n    name @nwb\n");
        let plain = Address::new(jonny, vec!["g", "federatedWith", "name"]);
        assert_eq!(find(&single, &plain).len(), 1);
    }

    #[test]
    fn children_of_token_statements_shift_subject() {
        let quads = quads_of("<#s>\n  ManufactureDate\n    a @schema:Date\n");
        assert_eq!(quads.len(), 1);
        let q = quads.iter().next().unwrap();
        let jonny = peer("jonny");
        assert_eq!(q.subject, Address::new(jonny, vec!["s", "ManufactureDate"]));
        assert_eq!(q.predicate, reserved::type_pred());
    }

    #[test]
    fn type_statement_children_extend_the_type() {
        let quads = quads_of("<#b>\n  a @analysis:node\n    Version \"1.0.0\"\n");
        let analysis = peer("analysis");
        let jonny = peer("jonny");
        let hits = find(&quads, &Address::new(analysis, vec!["node", "Version"]));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].subject, Address::new(jonny, vec!["b"]));
    }

    #[test]
    fn dot_without_context_is_an_error() {
        let (t, jonny) = handles();
        let doc = parse("<#x>\n  .orphan 1\n").unwrap();
        let err = resolve(&doc, &Address::peer_only(jonny), &[], &t).unwrap_err();
        assert!(matches!(err, DslError::DotWithoutContext { line: 2 }));
    }

    #[test]
    fn unbound_alias_is_an_error() {
        let (t, jonny) = handles();
        let doc = parse("<#x>\n  a @nobody:T\n").unwrap();
        let err = resolve(&doc, &Address::peer_only(jonny), &[], &t).unwrap_err();
        assert!(matches!(err, DslError::UnboundAlias { alias } if alias == "nobody"));
    }

    #[test]
    fn prefixes_splice_segments_and_shift_pins() {
        let (t, jonny) = handles();
        let doc = parse(
            "#prefix deep @nwb:nwb-schema:\"2.*\"\n<#x>\n  a @deep:NWBFile\n",
        )
        .unwrap();
        let quads = resolve(&doc, &Address::peer_only(jonny), &[], &t).unwrap();
        let q = quads.iter().next().unwrap();
        match &q.object {
            Object::Addr(a) => {
                assert_eq!(a.segments, vec!["nwb-schema", "NWBFile"]);
                assert_eq!(a.pins.len(), 1);
                assert!(a.pins.contains_key(&1));
            }
            other => panic!("expected address, got {other:?}"),
        }
    }

    #[test]
    fn base_directives_set_author_and_root() {
        let (t, _) = handles();
        let doc = parse(
            "@base @nwb:schemas\n<#one>\n  a @hdf:HDF5\n@base @hdf\n<#two>\n  a @nwb:NWBFile\n",
        )
        .unwrap();
        let fallback = Address::peer_only(peer("jonny"));
        let resolved = resolve_document(&doc, &fallback, &[], &t).unwrap();
        let nwb = peer("nwb");
        let hdf = peer("hdf");
        assert_eq!(resolved.subjects[0], Address::new(nwb, vec!["schemas", "one"]));
        assert_eq!(resolved.subjects[1], Address::new(hdf, vec!["two"]));
        let authors: Vec<_> = resolved.quads.iter().map(|q| q.author).collect();
        assert!(authors.contains(&nwb));
        assert!(authors.contains(&hdf));
    }

    #[test]
    fn subjects_track_decl_order() {
        let (t, jonny) = handles();
        let doc = parse("<#b>\n<#a>\n").unwrap();
        let resolved = resolve_document(&doc, &Address::peer_only(jonny), &[], &t).unwrap();
        assert_eq!(
            resolved.subjects,
            vec![
                Address::new(jonny, vec!["b"]),
                Address::new(jonny, vec!["a"]),
            ]
        );
    }
}
