//! Types as links.
//!
//! A type definition is itself a subtree of quads: `extends` points at the
//! parent type, and each direct child that carries a type quad declares a
//! field. Validation is open-world: quads a type does not know about are
//! reported, never rejected. Translation links map one vocabulary onto
//! another, either by renaming predicates (exact match) or by aggregating a
//! value set through a registered transform (narrow match).

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::dsl::address::Address;
use crate::identity::PeerId;
use crate::linkstore::quad::{reserved, Literal, Num, Object, Quad, QuadSet};
use crate::linkstore::{LinkStore, ObjectRecord, StoreError};

/// Longest extends chain flatten will walk before giving up.
pub const MAX_EXTENDS_DEPTH: usize = 64;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0} has no type-defining quads")]
    NotAType(String),
    #[error("extends cycle: {0}")]
    ExtendsCycle(String),
    #[error("extends chain from {0} exceeds {MAX_EXTENDS_DEPTH} links")]
    ExtendsTooDeep(String),
    #[error("transform {0} is not registered")]
    UnregisteredTransform(String),
    #[error("transform {transform} got non-numeric input {object}")]
    NonNumericInput { transform: String, object: String },
    #[error("narrow match on {predicate} has a set-valued source and no transform")]
    MissingTransform { predicate: String },
    #[error("unresolved schema conflicts: {}", .0.join(", "))]
    UncoveredConflicts(Vec<String>),
}

/// One declared field of a type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDecl {
    pub name: String,
    pub semantic_type: Address,
    pub required: bool,
    pub default: Option<Object>,
    pub parameterizes: Option<Address>,
}

impl FieldDecl {
    pub fn new(name: &str, semantic_type: Address) -> Self {
        FieldDecl {
            name: name.to_string(),
            semantic_type,
            required: false,
            default: None,
            parameterizes: None,
        }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }
}

/// A type reconstructed from its quads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDef {
    pub address: Address,
    pub extends: Option<Address>,
    /// Sorted by field name; names are unique within one definition.
    pub fields: Vec<FieldDecl>,
    /// Everything under the address that is not part of the field machinery.
    pub annotations: QuadSet,
}

impl TypeDef {
    pub fn field(&self, name: &str) -> Option<&FieldDecl> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Writes the definition back out as quads, ready to commit.
    pub fn to_quads(&self, author: PeerId) -> QuadSet {
        let mut out = self.annotations.clone();
        if let Some(parent) = &self.extends {
            out.insert(Quad::new(
                author,
                self.address.clone(),
                reserved::extends(),
                Object::Addr(parent.clone()),
            ));
        }
        for field in &self.fields {
            let subject = self.address.descend(&name_segments(&field.name));
            out.insert(Quad::new(
                author,
                subject.clone(),
                reserved::type_pred(),
                Object::Addr(field.semantic_type.clone()),
            ));
            if field.required {
                out.insert(Quad::new(
                    author,
                    subject.clone(),
                    subject.child("required"),
                    Object::Lit(Literal::Token("true".into())),
                ));
            }
            if let Some(default) = &field.default {
                out.insert(Quad::new(
                    author,
                    subject.clone(),
                    subject.child("default"),
                    default.clone(),
                ));
            }
            if let Some(target) = &field.parameterizes {
                out.insert(Quad::new(
                    author,
                    subject.clone(),
                    subject.child("parameterizes"),
                    Object::Addr(target.clone()),
                ));
            }
        }
        out
    }
}

/// Field names may span segments (`general:experimenter`); colons separate
/// the path under the owning address.
fn name_segments(name: &str) -> Vec<String> {
    name.split(':').map(str::to_string).collect()
}

/// Reads a type definition out of the store.
///
/// A field is any descendant subject of the address holding a type or extends
/// quad, named by its path; `required`, `default` and `parameterizes` ride
/// along as child predicates of the field. An address with neither an extends
/// quad nor a typed descendant is not a type.
pub fn load_type(store: &LinkStore, address: &Address) -> Result<TypeDef, SchemaError> {
    let record = store.resolve(address)?;
    let root = record.address.clone();
    let type_pred = reserved::type_pred();
    let extends_pred = reserved::extends();

    let mut consumed = QuadSet::new();
    let mut extends = None;
    for quad in &record.quads {
        if quad.subject != root || quad.predicate != extends_pred {
            continue;
        }
        if let Object::Addr(parent) = &quad.object {
            if extends.is_none() {
                extends = Some(parent.clone());
                consumed.insert(quad.clone());
            }
        }
    }

    let mut fields: BTreeMap<String, FieldDecl> = BTreeMap::new();
    for quad in &record.quads {
        let Some(tail) = quad.subject.tail_under(&root) else { continue };
        if tail.is_empty() || (quad.predicate != type_pred && quad.predicate != extends_pred) {
            continue;
        }
        let Object::Addr(semantic) = &quad.object else { continue };
        let name = tail.join(":");
        fields
            .entry(name.clone())
            .or_insert_with(|| FieldDecl::new(&name, semantic.clone()));
        consumed.insert(quad.clone());
    }

    for (name, decl) in fields.iter_mut() {
        let subject = root.descend(&name_segments(name));
        for quad in &record.quads {
            if quad.subject != subject {
                continue;
            }
            if quad.predicate == subject.child("required") {
                if quad.object == Object::Lit(Literal::Token("true".into())) {
                    decl.required = true;
                }
                consumed.insert(quad.clone());
            } else if quad.predicate == subject.child("default") {
                if decl.default.is_none() {
                    decl.default = Some(quad.object.clone());
                }
                consumed.insert(quad.clone());
            } else if quad.predicate == subject.child("parameterizes") {
                if let Object::Addr(target) = &quad.object {
                    if decl.parameterizes.is_none() {
                        decl.parameterizes = Some(target.clone());
                    }
                    consumed.insert(quad.clone());
                }
            }
        }
    }

    if extends.is_none() && fields.is_empty() {
        return Err(SchemaError::NotAType(root.render()));
    }

    let annotations = record.quads.difference(&consumed).cloned().collect();
    Ok(TypeDef { address: root, extends, fields: fields.into_values().collect(), annotations })
}

/// Collapses an extends chain into one field set. The nearest definition of
/// a name wins; cycles and over-deep chains are errors.
pub fn flatten(
    store: &LinkStore,
    ty: &Address,
) -> Result<BTreeMap<String, FieldDecl>, SchemaError> {
    let mut out = BTreeMap::new();
    let mut path: Vec<String> = Vec::new();
    let mut seen: BTreeSet<Address> = BTreeSet::new();
    let mut cursor = ty.without_pins();
    loop {
        if !seen.insert(cursor.clone()) {
            path.push(cursor.render());
            return Err(SchemaError::ExtendsCycle(path.join(" -> ")));
        }
        path.push(cursor.render());
        if path.len() > MAX_EXTENDS_DEPTH {
            return Err(SchemaError::ExtendsTooDeep(path[0].clone()));
        }
        let def = load_type(store, &cursor)?;
        for field in def.fields {
            out.entry(field.name.clone()).or_insert(field);
        }
        match def.extends {
            Some(parent) => cursor = parent.without_pins(),
            None => break,
        }
    }
    Ok(out)
}

/// The extends-closure of a type: the address itself, then every ancestor
/// named by an extends quad. The walk follows raw quads rather than loaded
/// definitions, so a chain may end at a bare vocabulary address that nobody
/// has published quads for.
pub fn type_closure(store: &LinkStore, ty: &Address) -> Result<Vec<Address>, SchemaError> {
    let extends_pred = reserved::extends();
    let mut out: Vec<Address> = Vec::new();
    let mut seen: BTreeSet<Address> = BTreeSet::new();
    let mut cursor = ty.without_pins();
    loop {
        if !seen.insert(cursor.clone()) {
            let mut path: Vec<String> = out.iter().map(Address::render).collect();
            path.push(cursor.render());
            return Err(SchemaError::ExtendsCycle(path.join(" -> ")));
        }
        out.push(cursor.clone());
        if out.len() > MAX_EXTENDS_DEPTH {
            return Err(SchemaError::ExtendsTooDeep(out[0].render()));
        }
        let record = match store.resolve(&cursor) {
            Ok(record) => record,
            Err(StoreError::UnknownNamespace(_)) => break,
            Err(e) => return Err(e.into()),
        };
        let parent = record.quads.iter().find_map(|q| {
            if q.subject != cursor || q.predicate != extends_pred {
                return None;
            }
            match &q.object {
                Object::Addr(a) => Some(a.without_pins()),
                _ => None,
            }
        });
        match parent {
            Some(next) => cursor = next,
            None => break,
        }
    }
    Ok(out)
}

/// What validation found. Extras are informational: open-world data carries
/// links the type never heard of, and that is fine.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub missing: Vec<String>,
    /// (field, expected type, found type)
    pub mismatched: Vec<(String, Address, Address)>,
    pub unknown_extras: QuadSet,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty()
    }
}

/// Checks an object against the flattened fields of a type.
///
/// A field named `a:b` counts as present when any quad fills its slot under
/// the object (`O:a:b`), speaks its vocabulary under the type's namespace
/// (`@ty-peer:a:b`), or hangs a child subtree at `O:a:b`. A type mismatch can
/// only come from an explicit type quad on that child subtree.
pub fn validate(
    store: &LinkStore,
    object: &Address,
    ty: &Address,
) -> Result<ValidationReport, SchemaError> {
    let fields = flatten(store, ty)?;
    let record = store.resolve(object)?;
    let root = record.address.clone();
    let type_pred = reserved::type_pred();
    let vocab_root = Address::peer_only(ty.peer);

    let mut report = ValidationReport::default();
    let mut claimed = QuadSet::new();
    for (name, decl) in &fields {
        let segments = name_segments(name);
        let slot = root.descend(&segments);
        let vocab = vocab_root.descend(&segments);
        let mut present = false;
        let mut child_types: Vec<Address> = Vec::new();
        for quad in &record.quads {
            let slot_form = quad.predicate.is_under(&slot);
            let vocab_form = quad.predicate.is_under(&vocab);
            let child_form = quad.subject.is_under(&slot);
            if !(slot_form || vocab_form || child_form) {
                continue;
            }
            present = true;
            claimed.insert(quad.clone());
            if quad.subject == slot && quad.predicate == type_pred {
                if let Object::Addr(found) = &quad.object {
                    child_types.push(found.clone());
                }
            }
        }
        if !present {
            if decl.required {
                report.missing.push(name.clone());
            }
        } else if !child_types.is_empty() && !child_types.contains(&decl.semantic_type) {
            report.mismatched.push((
                name.clone(),
                decl.semantic_type.clone(),
                child_types[0].clone(),
            ));
        }
    }

    let plumbing =
        [reserved::type_pred(), reserved::extends(), reserved::about(), reserved::version()];
    for quad in &record.quads {
        if claimed.contains(quad) {
            continue;
        }
        if quad.subject == root && plumbing.contains(&quad.predicate) {
            continue;
        }
        report.unknown_extras.insert(quad.clone());
    }
    Ok(report)
}

/// How a translation link relates source to target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Relation {
    /// Same meaning: rename the predicate.
    Exact,
    /// Source is more specific: aggregate its value set into the target.
    Narrow,
    /// Source is broader. Stored but never executed.
    Broad,
}

/// A mapping between two vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationLink {
    pub source: Address,
    pub relation: Relation,
    pub target: Address,
    pub transform: Option<Address>,
    pub note: Option<String>,
}

impl TranslationLink {
    pub fn exact(source: Address, target: Address) -> Self {
        TranslationLink { source, relation: Relation::Exact, target, transform: None, note: None }
    }

    pub fn narrow(source: Address, target: Address, transform: Address) -> Self {
        TranslationLink {
            source,
            relation: Relation::Narrow,
            target,
            transform: Some(transform),
            note: None,
        }
    }
}

pub type TransformFn = fn(&str, &[Object]) -> Result<Object, SchemaError>;

/// Transforms are named by address so namespaces can declare their own; the
/// registry dispatches by lookup.
pub struct TransformRegistry {
    entries: BTreeMap<String, TransformFn>,
}

/// Address of a built-in transform: `mean`, `sum`, `first`, `count`.
pub fn builtin_transform(name: &str) -> Address {
    Address::new(PeerId::reserved("math"), vec![name])
}

impl TransformRegistry {
    pub fn empty() -> Self {
        TransformRegistry { entries: BTreeMap::new() }
    }

    /// The four stock aggregations.
    pub fn standard() -> Self {
        let mut reg = TransformRegistry::empty();
        reg.register(&builtin_transform("mean"), transform_mean);
        reg.register(&builtin_transform("sum"), transform_sum);
        reg.register(&builtin_transform("first"), transform_first);
        reg.register(&builtin_transform("count"), transform_count);
        reg
    }

    pub fn register(&mut self, address: &Address, f: TransformFn) {
        self.entries.insert(address.render(), f);
    }

    pub fn get(&self, address: &Address) -> Option<TransformFn> {
        self.entries.get(&address.render()).copied()
    }
}

impl Default for TransformRegistry {
    fn default() -> Self {
        TransformRegistry::standard()
    }
}

/// Flattens ints, decimals and numeric lists into one pool of numbers.
fn numeric_pool(transform: &str, values: &[Object]) -> Result<Vec<f64>, SchemaError> {
    let mut pool = Vec::new();
    for value in values {
        match value {
            Object::Lit(Literal::Int(i)) => pool.push(*i as f64),
            Object::Lit(Literal::Dec(d)) => pool.push(*d),
            Object::Lit(Literal::List(items)) => pool.extend(items.iter().map(Num::as_f64)),
            other => {
                return Err(SchemaError::NonNumericInput {
                    transform: transform.to_string(),
                    object: other.render(),
                })
            }
        }
    }
    if pool.is_empty() {
        return Err(SchemaError::NonNumericInput {
            transform: transform.to_string(),
            object: "empty value set".into(),
        });
    }
    Ok(pool)
}

fn transform_mean(name: &str, values: &[Object]) -> Result<Object, SchemaError> {
    let pool = numeric_pool(name, values)?;
    Ok(Object::Lit(Literal::Dec(pool.iter().sum::<f64>() / pool.len() as f64)))
}

fn transform_sum(name: &str, values: &[Object]) -> Result<Object, SchemaError> {
    let all_int = values
        .iter()
        .all(|v| matches!(v, Object::Lit(Literal::Int(_))));
    let pool = numeric_pool(name, values)?;
    let total: f64 = pool.iter().sum();
    if all_int {
        Ok(Object::Lit(Literal::Int(total as i64)))
    } else {
        Ok(Object::Lit(Literal::Dec(total)))
    }
}

fn transform_first(_name: &str, values: &[Object]) -> Result<Object, SchemaError> {
    Ok(values[0].clone())
}

fn transform_count(_name: &str, values: &[Object]) -> Result<Object, SchemaError> {
    let mut count: i64 = 0;
    for value in values {
        match value {
            Object::Lit(Literal::List(items)) => count += items.len() as i64,
            _ => count += 1,
        }
    }
    Ok(Object::Lit(Literal::Int(count)))
}

/// Predicate of the provenance quad written per applied link.
pub fn applied_pred() -> Address {
    Address::new(PeerId::reserved("translate"), vec!["applied"])
}

/// Applies translation links to an object's quads.
///
/// Exact matches rename predicates in place. Narrow matches gather the source
/// value set and write the transformed value under the target predicate,
/// keeping the originals. Broad matches are inert. Every applied link leaves
/// a provenance quad behind.
pub fn translate(
    store: &LinkStore,
    object: &Address,
    links: &[TranslationLink],
    transforms: &TransformRegistry,
) -> Result<ObjectRecord, SchemaError> {
    let record = store.resolve(object)?;
    let root = record.address.clone();
    let mut quads = record.quads;

    for link in links {
        let matching: Vec<Quad> =
            quads.iter().filter(|q| q.predicate == link.source).cloned().collect();
        if matching.is_empty() {
            continue;
        }
        match link.relation {
            Relation::Broad => continue,
            Relation::Exact => {
                for quad in &matching {
                    quads.remove(quad);
                    quads.insert(Quad::new(
                        quad.author,
                        quad.subject.clone(),
                        link.target.clone(),
                        quad.object.clone(),
                    ));
                }
            }
            Relation::Narrow => {
                let values: Vec<Object> = matching.iter().map(|q| q.object.clone()).collect();
                let translated = match &link.transform {
                    Some(address) => {
                        let f = transforms
                            .get(address)
                            .ok_or_else(|| SchemaError::UnregisteredTransform(address.render()))?;
                        f(&address.render(), &values)?
                    }
                    None if values.len() == 1 => values[0].clone(),
                    None => {
                        return Err(SchemaError::MissingTransform {
                            predicate: link.source.render(),
                        })
                    }
                };
                quads.insert(Quad::new(
                    matching[0].author,
                    matching[0].subject.clone(),
                    link.target.clone(),
                    translated,
                ));
            }
        }
        quads.insert(Quad::new(
            matching[0].author,
            root.clone(),
            applied_pred(),
            Object::Lit(Literal::Pair(link.source.render(), link.target.render())),
        ));
    }

    Ok(ObjectRecord { address: root, quads, at_commit: record.at_commit })
}

/// Field-level comparison of two flattened types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDiff {
    pub a: Address,
    pub b: Address,
    pub shared: BTreeSet<String>,
    pub only_a: BTreeSet<String>,
    pub only_b: BTreeSet<String>,
    /// Same name, different semantic type.
    pub conflicting: BTreeSet<String>,
    pub a_fields: BTreeMap<String, FieldDecl>,
    pub b_fields: BTreeMap<String, FieldDecl>,
}

pub fn schema_diff(store: &LinkStore, a: &Address, b: &Address) -> Result<SchemaDiff, SchemaError> {
    let a_fields = flatten(store, a)?;
    let b_fields = flatten(store, b)?;
    let mut diff = SchemaDiff {
        a: a.without_pins(),
        b: b.without_pins(),
        shared: BTreeSet::new(),
        only_a: BTreeSet::new(),
        only_b: BTreeSet::new(),
        conflicting: BTreeSet::new(),
        a_fields: a_fields.clone(),
        b_fields: b_fields.clone(),
    };
    for (name, decl) in &a_fields {
        match b_fields.get(name) {
            None => {
                diff.only_a.insert(name.clone());
            }
            Some(other) if other.semantic_type == decl.semantic_type => {
                diff.shared.insert(name.clone());
            }
            Some(_) => {
                diff.conflicting.insert(name.clone());
            }
        }
    }
    for name in b_fields.keys() {
        if !a_fields.contains_key(name) {
            diff.only_b.insert(name.clone());
        }
    }
    Ok(diff)
}

/// Merges two diffed types into one definition plus provenance quads naming
/// both sources. Every conflicting field must be covered by a choice.
pub fn propose_merge(
    diff: &SchemaDiff,
    choices: &BTreeMap<String, FieldDecl>,
) -> Result<(TypeDef, QuadSet), SchemaError> {
    let uncovered: Vec<String> =
        diff.conflicting.iter().filter(|name| !choices.contains_key(*name)).cloned().collect();
    if !uncovered.is_empty() {
        return Err(SchemaError::UncoveredConflicts(uncovered));
    }

    let mut fields: BTreeMap<String, FieldDecl> = BTreeMap::new();
    for name in &diff.shared {
        let a = &diff.a_fields[name];
        let b = &diff.b_fields[name];
        let mut merged = a.clone();
        merged.required = a.required || b.required;
        merged.default = if a.default == b.default { a.default.clone() } else { None };
        merged.parameterizes =
            if a.parameterizes == b.parameterizes { a.parameterizes.clone() } else { None };
        fields.insert(name.clone(), merged);
    }
    for name in &diff.only_a {
        fields.insert(name.clone(), diff.a_fields[name].clone());
    }
    for name in &diff.only_b {
        fields.insert(name.clone(), diff.b_fields[name].clone());
    }
    for name in &diff.conflicting {
        fields.insert(name.clone(), choices[name].clone());
    }

    // The merge target is chosen order-insensitively so proposals from either
    // side of the diff agree byte for byte.
    let address =
        if diff.a.render() <= diff.b.render() { diff.a.clone() } else { diff.b.clone() };
    let def = TypeDef {
        address: address.clone(),
        extends: None,
        fields: fields.into_values().collect(),
        annotations: QuadSet::new(),
    };
    let mut provenance = QuadSet::new();
    for source in [&diff.a, &diff.b] {
        provenance.insert(Quad::new(
            address.peer,
            address.clone(),
            reserved::merge_of(),
            Object::Addr(source.clone()),
        ));
    }
    Ok((def, provenance))
}
