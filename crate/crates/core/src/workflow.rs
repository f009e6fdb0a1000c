//! Analysis pipelines as linked metadata.
//!
//! A node declares what it computes (typed inputs and outputs, parameters,
//! dependencies) and how it is provided (a repository, or a builtin). A
//! workflow chains named steps; a project binds a workflow to datasets and
//! global parameters. Freezing a project resolves every loose end into a
//! lockfile whose bytes are deterministic, and execution replays a lockfile
//! through registered executors, leaving provenance quads behind.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::address::Address;
use crate::dsl::{match_version, Version, VersionReq};
use crate::identity::{HandleTable, PeerId, SecretHandle};
use crate::linkstore::quad::{canonical_quadset, parse_canonical_quads, reserved, Quad};
use crate::linkstore::{
    BlobRef, CommitId, LinkStore, Literal, Object, Pattern, QuadSet, StoreError,
};
use crate::schema::TranslationLink;

/// Longest extends chain node loading will walk.
const MAX_INHERIT_DEPTH: usize = 64;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0} has no analysis-node quads")]
    NotANode(String),
    #[error("{0} is not a workflow")]
    NotAWorkflow(String),
    #[error("{0} is not a project")]
    NotAProject(String),
    #[error("{0} names no provider, and none is inherited")]
    MissingProvider(String),
    #[error("bad parameter declaration on {node}: {message}")]
    BadParam { node: String, message: String },
    #[error("no variant of {base} takes {want_input} to {want_output}; examined {}", .examined.join(", "))]
    NoVariant {
        base: String,
        want_input: String,
        want_output: String,
        examined: Vec<String>,
    },
    #[error("workflow cycle through {0}")]
    Cycle(String),
    #[error("step {step} expects {expected} but {producer} provides {produced}, and no translation link bridges them")]
    EdgeTypeMismatch {
        step: String,
        producer: String,
        produced: String,
        expected: String,
    },
    #[error("step {0} wires from unknown step {1}")]
    UnknownStep(String, String),
    #[error("duplicate step name {0}")]
    DuplicateStep(String),
    #[error("package {package} under @{ecosystem} is not in the registry")]
    UnknownPackage { ecosystem: PeerId, package: String },
    #[error("no version of {package} satisfies {}", .constraints.join(" and "))]
    Conflict {
        package: String,
        constraints: Vec<String>,
    },
    #[error("parameter key {0} does not name a step parameter")]
    BadParamKey(String),
    #[error("parameter {0} has neither a value nor a default")]
    UnvaluedParam(String),
    #[error("no executor registered for {0}")]
    MissingExecutor(String),
    #[error("{0} is provided by an external repository; external execution not supported")]
    ExternalExecution(String),
    #[error("grid for {0} has no values")]
    EmptyGrid(String),
    #[error("malformed lockfile: {0}")]
    BadLockfile(String),
    #[error("freeze needs exactly one workflow reference, found {0}")]
    WorkflowCount(usize),
    #[error("{0}")]
    Malformed(String),
}

fn analysis(name: &str) -> Address {
    Address::new(PeerId::reserved("analysis"), vec![name])
}

pub fn node_type() -> Address {
    analysis("node")
}

pub fn workflow_type() -> Address {
    analysis("workflow")
}

pub fn project_type() -> Address {
    analysis("project")
}

fn builtin_peer() -> PeerId {
    PeerId::reserved("builtin")
}

/// One declared parameter of a node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub semantic_type: Option<Object>,
    pub default: Option<Literal>,
    pub parameterizes: Option<Address>,
}

/// One dependency declaration, extracted from a pinned address like
/// `@apt:opencv:"^4.*.*"`. The pinned prefix names the package; segments
/// past it qualify the build (architecture and the like). A pin on the
/// bare peer means the ecosystem itself is the dependency (an OS or an
/// interpreter), recorded with an empty package name.
#[derive(Debug, Clone, PartialEq)]
pub struct DepSpec {
    pub ecosystem: PeerId,
    pub package: String,
    pub req: VersionReq,
    pub qualifiers: Vec<String>,
    pub extra_sources: Vec<String>,
}

impl DepSpec {
    pub fn from_address(addr: &Address) -> DepSpec {
        match addr.first_pin() {
            Some((prefix, req, _)) => DepSpec {
                ecosystem: addr.peer,
                package: prefix.segments.join(":"),
                req,
                qualifiers: addr.segments[prefix.segments.len()..].to_vec(),
                extra_sources: Vec::new(),
            },
            None => DepSpec {
                ecosystem: addr.peer,
                package: addr.segments.join(":"),
                req: VersionReq::any(),
                qualifiers: Vec::new(),
                extra_sources: Vec::new(),
            },
        }
    }

    /// The address this spec came from (pin restored at the package root).
    pub fn to_address(&self) -> Address {
        let mut segments: Vec<String> = Vec::new();
        if !self.package.is_empty() {
            segments.extend(self.package.split(':').map(str::to_string));
        }
        let pin_at = segments.len();
        segments.extend(self.qualifiers.iter().cloned());
        let mut addr = Address {
            peer: self.ecosystem,
            segments,
            pins: BTreeMap::new(),
        };
        addr.pins.insert(pin_at, self.req.clone());
        addr
    }

    pub fn key(&self) -> (PeerId, String) {
        (self.ecosystem, self.package.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Repository,
    Builtin,
}

/// Where a node's code lives and how to invoke it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvidedBy {
    pub provider: Address,
    pub kind: ProviderKind,
    pub locator: String,
    pub revision: Option<String>,
    pub entrypoint: String,
    pub method: String,
}

impl ProvidedBy {
    pub fn builtin(name: &str) -> ProvidedBy {
        ProvidedBy {
            provider: Address::new(builtin_peer(), vec![name]),
            kind: ProviderKind::Builtin,
            locator: name.to_string(),
            revision: None,
            entrypoint: name.to_string(),
            method: "run".to_string(),
        }
    }
}

/// A declared analysis node, reconstructed from its quads with fields
/// inherited along the extends chain (nearest definition wins; type lists
/// and dependencies accumulate).
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisNode {
    pub address: Address,
    pub version: Option<Version>,
    pub description: Option<String>,
    pub input_types: Vec<Address>,
    pub output_types: Vec<Address>,
    pub params: Vec<ParamDecl>,
    pub depends_on: Vec<DepSpec>,
    pub provided_by: ProvidedBy,
}

/// Accumulator for one layer of a node's extends chain.
#[derive(Default)]
struct NodeLayer {
    is_node: bool,
    extends: Option<Address>,
    version: Option<Version>,
    description: Option<String>,
    input_types: Vec<Address>,
    output_types: Vec<Address>,
    params: Vec<ParamDecl>,
    depends_on: Vec<DepSpec>,
    provided_by: Option<ProvidedBy>,
}

fn lenient_version(text: &str) -> Option<Version> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let digits: String = text[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    Version::parse(digits.trim_end_matches('.')).ok()
}

fn literal_text(object: &Object) -> Option<String> {
    match object {
        Object::Lit(Literal::Str(s)) => Some(s.clone()),
        Object::Lit(Literal::Token(t)) => Some(t.clone()),
        _ => None,
    }
}

fn read_node_layer(store: &LinkStore, address: &Address) -> Result<NodeLayer, WorkflowError> {
    let record = store.resolve(address)?;
    let a = &record.address;
    let mut layer = NodeLayer::default();
    let type_pred = reserved::type_pred();
    let extends_pred = reserved::extends();
    let params_subject = a.child("params");
    let provided_subject = a.child("providedBy");

    // Parameters first: defaults and annotations hang off the declarations.
    let mut param_names: Vec<String> = Vec::new();
    for q in &record.quads {
        if q.subject != params_subject {
            continue;
        }
        if let Some([name]) = q.predicate.tail_under(&params_subject) {
            if name != "default" {
                param_names.push(name.clone());
                layer.params.push(ParamDecl {
                    name: name.clone(),
                    semantic_type: Some(q.object.clone()),
                    default: None,
                    parameterizes: None,
                });
            }
        }
    }
    for q in &record.quads {
        if q.subject != params_subject {
            continue;
        }
        match q.predicate.tail_under(&params_subject) {
            Some([name]) if name == "default" => {
                // A bare default names the sole parameter of this layer.
                if param_names.len() != 1 {
                    return Err(WorkflowError::BadParam {
                        node: a.render(),
                        message: "a bare default needs exactly one parameter".into(),
                    });
                }
                let decl = layer.params.iter_mut().find(|p| p.name == param_names[0]);
                if let (Some(decl), Object::Lit(lit)) = (decl, &q.object) {
                    decl.default = Some(lit.clone());
                }
            }
            Some([name, field]) if field == "default" => {
                let decl = layer.params.iter_mut().find(|p| p.name == *name);
                if let (Some(decl), Object::Lit(lit)) = (decl, &q.object) {
                    decl.default = Some(lit.clone());
                }
            }
            Some([name, field]) if field == "parameterizes" => {
                let decl = layer.params.iter_mut().find(|p| p.name == *name);
                if let (Some(decl), Object::Addr(target)) = (decl, &q.object) {
                    decl.parameterizes = Some(target.clone());
                }
            }
            _ => {}
        }
    }

    for q in &record.quads {
        if q.subject == *a {
            if q.predicate == type_pred {
                if let Object::Addr(t) = &q.object {
                    if t.without_pins() == node_type() {
                        layer.is_node = true;
                    }
                }
            } else if q.predicate == extends_pred {
                if let Object::Addr(parent) = &q.object {
                    layer.extends = Some(parent.without_pins());
                }
            } else if q.predicate.segments.last().map(String::as_str) == Some("Version") {
                if layer.version.is_none() {
                    layer.version = literal_text(&q.object).and_then(|t| lenient_version(&t));
                }
            } else if q.predicate == a.child("hasDescription") {
                layer.description = literal_text(&q.object);
            } else if q.predicate == a.child("inputType") {
                if let Object::Addr(t) = &q.object {
                    layer.input_types.push(t.without_pins());
                }
            } else if q.predicate == a.child("outputType") {
                if let Object::Addr(t) = &q.object {
                    layer.output_types.push(t.without_pins());
                }
            } else if q.predicate == a.child("dependsOn") {
                if let Object::Addr(dep) = &q.object {
                    layer.depends_on.push(DepSpec::from_address(dep));
                }
            } else if q.predicate == a.child("providedBy") {
                if let (Object::Addr(provider), None) = (&q.object, &layer.provided_by) {
                    let provider = provider.without_pins();
                    let kind = if provider.peer == builtin_peer() {
                        ProviderKind::Builtin
                    } else {
                        ProviderKind::Repository
                    };
                    let name = provider.segments.join(":");
                    layer.provided_by = Some(ProvidedBy {
                        kind,
                        locator: name.clone(),
                        revision: None,
                        entrypoint: name,
                        method: "run".to_string(),
                        provider,
                    });
                }
            }
        } else if q.subject == provided_subject {
            // Children of the providedBy statement describe the provider.
        } else if q.subject == a.child("dependsOn") {
            // Extra sources for a dependency, attached below.
        }
    }

    if let Some(provider) = &mut layer.provided_by {
        for q in &record.quads {
            if q.subject != provided_subject {
                continue;
            }
            let Some(text) = literal_text(&q.object) else {
                continue;
            };
            let last = q.predicate.segments.last().map(String::as_str);
            if q.predicate.is_under(&provider.provider) {
                match last {
                    Some("url") => provider.locator = text,
                    Some("hash") => provider.revision = Some(text),
                    _ => {}
                }
            } else if last == Some("method") {
                provider.method = text;
            } else if last == Some("entrypoint") || !q.predicate.is_under(a) {
                // A foreign predicate like `@python:class "…"` names the
                // entrypoint inside the fetched code.
                provider.entrypoint = text;
            }
        }
    }

    let depends_subject = a.child("dependsOn");
    for q in &record.quads {
        if q.subject != depends_subject
            || q.predicate.segments.last().map(String::as_str) != Some("extraSource")
        {
            continue;
        }
        let Some(url) = literal_text(&q.object) else {
            continue;
        };
        // The dotted predicate sits under the dependency's package prefix;
        // pick the longest matching prefix when several deps share a peer.
        let mut best: Option<(usize, &mut DepSpec)> = None;
        for dep in &mut layer.depends_on {
            if dep.ecosystem != q.predicate.peer {
                continue;
            }
            let prefix_len = if dep.package.is_empty() {
                0
            } else {
                dep.package.split(':').count()
            };
            let prefix = Address {
                peer: dep.ecosystem,
                segments: q.predicate.segments[..prefix_len.min(q.predicate.segments.len())]
                    .to_vec(),
                pins: BTreeMap::new(),
            };
            let dep_prefix: Vec<&str> = if dep.package.is_empty() {
                Vec::new()
            } else {
                dep.package.split(':').collect()
            };
            if prefix.segments.iter().map(String::as_str).collect::<Vec<_>>() == dep_prefix
                && best.as_ref().map_or(true, |(len, _)| prefix_len >= *len)
            {
                best = Some((prefix_len, dep));
            }
        }
        if let Some((_, dep)) = best {
            dep.extra_sources.push(url.clone());
        }
    }

    Ok(layer)
}

/// Loads a node, walking its extends chain for inherited fields.
pub fn load_node(store: &LinkStore, address: &Address) -> Result<AnalysisNode, WorkflowError> {
    let mut node = AnalysisNode {
        address: address.without_pins(),
        version: None,
        description: None,
        input_types: Vec::new(),
        output_types: Vec::new(),
        params: Vec::new(),
        depends_on: Vec::new(),
        provided_by: ProvidedBy::builtin("unset"),
    };
    let mut provided: Option<ProvidedBy> = None;
    let mut is_node = false;
    let mut seen: BTreeSet<Address> = BTreeSet::new();
    let mut cursor = Some(address.without_pins());
    let mut first = true;
    while let Some(current) = cursor {
        if !seen.insert(current.clone()) || seen.len() > MAX_INHERIT_DEPTH {
            break;
        }
        let layer = match read_node_layer(store, &current) {
            Ok(layer) => layer,
            // A chain may end at vocabulary nobody has published quads for.
            Err(WorkflowError::Store(StoreError::UnknownNamespace(_))) if !first => break,
            Err(e) => return Err(e),
        };
        first = false;
        is_node |= layer.is_node;
        if node.version.is_none() {
            node.version = layer.version;
        }
        if node.description.is_none() {
            node.description = layer.description;
        }
        for t in layer.input_types {
            if !node.input_types.contains(&t) {
                node.input_types.push(t);
            }
        }
        for t in layer.output_types {
            if !node.output_types.contains(&t) {
                node.output_types.push(t);
            }
        }
        for p in layer.params {
            if !node.params.iter().any(|q| q.name == p.name) {
                node.params.push(p);
            }
        }
        for d in layer.depends_on {
            if !node.depends_on.contains(&d) {
                node.depends_on.push(d);
            }
        }
        if provided.is_none() {
            provided = layer.provided_by;
        }
        cursor = layer.extends;
    }
    if !is_node {
        return Err(WorkflowError::NotANode(address.render()));
    }
    node.provided_by = provided.ok_or_else(|| WorkflowError::MissingProvider(address.render()))?;
    node.input_types.sort();
    node.output_types.sort();
    node.params.sort_by(|a, b| a.name.cmp(&b.name));
    node.depends_on
        .sort_by_key(|d| (d.ecosystem.render(), d.package.clone()));
    Ok(node)
}

impl AnalysisNode {
    /// The node as quads, in the shape load_node reads back.
    pub fn to_quads(&self, author: PeerId) -> QuadSet {
        let a = &self.address;
        let mut quads = QuadSet::new();
        let mut put = |subject: Address, predicate: Address, object: Object| {
            quads.insert(Quad {
                author,
                subject,
                predicate,
                object,
            });
        };
        put(a.clone(), reserved::type_pred(), Object::Addr(node_type()));
        if let Some(v) = &self.version {
            put(
                a.clone(),
                node_type().child("Version"),
                Object::Lit(Literal::Str(v.to_string())),
            );
        }
        if let Some(d) = &self.description {
            put(
                a.clone(),
                a.child("hasDescription"),
                Object::Lit(Literal::Str(d.clone())),
            );
        }
        for t in &self.input_types {
            put(a.clone(), a.child("inputType"), Object::Addr(t.clone()));
        }
        for t in &self.output_types {
            put(a.clone(), a.child("outputType"), Object::Addr(t.clone()));
        }
        let params = a.child("params");
        for p in &self.params {
            let semantic = p
                .semantic_type
                .clone()
                .unwrap_or(Object::Lit(Literal::Token("any".to_string())));
            put(params.clone(), params.child(&p.name), semantic);
            if let Some(d) = &p.default {
                put(
                    params.clone(),
                    params.child(&p.name).child("default"),
                    Object::Lit(d.clone()),
                );
            }
            if let Some(target) = &p.parameterizes {
                put(
                    params.clone(),
                    params.child(&p.name).child("parameterizes"),
                    Object::Addr(target.clone()),
                );
            }
        }
        for dep in &self.depends_on {
            put(
                a.clone(),
                a.child("dependsOn"),
                Object::Addr(dep.to_address()),
            );
            for url in &dep.extra_sources {
                let prefix = if dep.package.is_empty() {
                    Address::peer_only(dep.ecosystem)
                } else {
                    Address {
                        peer: dep.ecosystem,
                        segments: dep.package.split(':').map(str::to_string).collect(),
                        pins: BTreeMap::new(),
                    }
                };
                put(
                    a.child("dependsOn"),
                    prefix.child("extraSource"),
                    Object::Lit(Literal::Str(url.clone())),
                );
            }
        }
        let provided = a.child("providedBy");
        let p = &self.provided_by;
        put(a.clone(), provided.clone(), Object::Addr(p.provider.clone()));
        if p.kind == ProviderKind::Repository {
            put(
                provided.clone(),
                p.provider.child("url"),
                Object::Lit(Literal::Str(p.locator.clone())),
            );
            put(
                provided.clone(),
                provided.child("entrypoint"),
                Object::Lit(Literal::Str(p.entrypoint.clone())),
            );
        }
        if let Some(rev) = &p.revision {
            put(
                provided.clone(),
                p.provider.child("hash"),
                Object::Lit(Literal::Str(rev.clone())),
            );
        }
        put(
            provided.clone(),
            provided.child("method"),
            Object::Lit(Literal::Str(p.method.clone())),
        );
        quads
    }
}

/// Picks the node variant supporting the wanted input/output pair: the
/// base itself when it already does, otherwise the lexicographically
/// smallest extension that does.
pub fn select_variant(
    store: &LinkStore,
    base: &Address,
    want_input: &Address,
    want_output: &Address,
) -> Result<Address, WorkflowError> {
    let want_input = want_input.without_pins();
    let want_output = want_output.without_pins();
    let fits = |node: &AnalysisNode| {
        node.input_types.contains(&want_input) && node.output_types.contains(&want_output)
    };
    let mut examined = vec![base.render()];
    let base_node = load_node(store, base)?;
    if fits(&base_node) {
        return Ok(base.without_pins());
    }
    let mut variants: Vec<Address> = store
        .local_query(&Pattern {
            predicate: Some(reserved::extends()),
            object: Some(Object::Addr(base.without_pins())),
            ..Pattern::default()
        })
        .iter()
        .map(|q| q.subject.without_pins())
        .collect();
    variants.sort();
    variants.dedup();
    for variant in variants {
        examined.push(variant.render());
        let Ok(node) = load_node(store, &variant) else {
            continue;
        };
        if fits(&node) {
            return Ok(variant);
        }
    }
    Err(WorkflowError::NoVariant {
        base: base.render(),
        want_input: want_input.render(),
        want_output: want_output.render(),
        examined,
    })
}

/// One step's input wiring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepInput {
    /// The workflow's own input (a dataset at run time).
    WorkflowInput,
    /// A prior step's output port.
    StepOutput { step: String, port: String },
}

impl StepInput {
    pub fn parse(token: &str) -> StepInput {
        match token.split_once(':') {
            None => StepInput::WorkflowInput,
            Some((step, port)) => StepInput::StepOutput {
                step: step.to_string(),
                port: port.to_string(),
            },
        }
    }

    pub fn token(&self) -> String {
        match self {
            StepInput::WorkflowInput => "input".to_string(),
            StepInput::StepOutput { step, port } => format!("{step}:{port}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub name: String,
    pub node: Address,
    pub inputs: Vec<StepInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workflow {
    pub address: Address,
    pub input_type: Option<Address>,
    pub output_name: Option<String>,
    pub steps: Vec<Step>,
}

pub fn load_workflow(store: &LinkStore, address: &Address) -> Result<Workflow, WorkflowError> {
    let record = store.resolve(address)?;
    let a = &record.address;
    let mut wf = Workflow {
        address: a.clone(),
        input_type: None,
        output_name: None,
        steps: Vec::new(),
    };
    let mut typed = false;
    let step_prefix = a.child("step");
    let mut slots: BTreeMap<Vec<String>, (Option<String>, Option<Address>, Vec<StepInput>)> =
        BTreeMap::new();
    for q in &record.quads {
        if q.subject == *a {
            if q.predicate == reserved::type_pred() {
                if let Object::Addr(t) = &q.object {
                    typed |= t.without_pins() == workflow_type();
                }
            } else if q.predicate == a.child("inputType") {
                if let Object::Addr(t) = &q.object {
                    wf.input_type = Some(t.clone());
                }
            } else if q.predicate == a.child("outputName") {
                wf.output_name = literal_text(&q.object);
            } else if q.predicate.is_under(&step_prefix) {
                let ordinal = q.predicate.tail_under(&step_prefix).unwrap_or(&[]).to_vec();
                let slot = slots.entry(ordinal).or_default();
                match &q.object {
                    Object::Lit(Literal::Token(name)) => slot.0 = Some(name.clone()),
                    Object::Addr(node) => slot.1 = Some(node.clone()),
                    _ => {}
                }
            }
        } else if q.subject.is_under(&step_prefix) || q.subject == step_prefix {
            // Children of a step statement: wiring.
            if q.predicate.segments.last().map(String::as_str) != Some("input") {
                continue;
            }
            let Some(token) = literal_text(&q.object) else {
                continue;
            };
            let ordinal = q.subject.tail_under(&step_prefix).unwrap_or(&[]).to_vec();
            slots.entry(ordinal).or_default().2.push(StepInput::parse(&token));
        }
    }
    if !typed {
        return Err(WorkflowError::NotAWorkflow(address.render()));
    }
    let mut ordered: Vec<(Vec<String>, (Option<String>, Option<Address>, Vec<StepInput>))> =
        slots.into_iter().collect();
    ordered.sort_by_key(|(ordinal, _)| {
        let numeric = ordinal.first().and_then(|s| s.parse::<u64>().ok());
        (numeric, ordinal.clone())
    });
    for (ordinal, (name, node, inputs)) in ordered {
        let name = name.unwrap_or_else(|| format!("step{}", ordinal.join(":")));
        let Some(node) = node else {
            return Err(WorkflowError::Malformed(format!(
                "step {name} of {} names no node",
                a.render()
            )));
        };
        wf.steps.push(Step {
            name,
            node,
            inputs,
        });
    }
    Ok(wf)
}

impl Workflow {
    pub fn to_quads(&self, author: PeerId) -> QuadSet {
        let a = &self.address;
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
            a.clone(),
            reserved::type_pred(),
            Object::Addr(workflow_type()),
        );
        if let Some(t) = &self.input_type {
            put(a.clone(), a.child("inputType"), Object::Addr(t.clone()));
        }
        if let Some(name) = &self.output_name {
            put(
                a.clone(),
                a.child("outputName"),
                Object::Lit(Literal::Token(name.clone())),
            );
        }
        for (i, step) in self.steps.iter().enumerate() {
            let slot = a.child("step").child(&i.to_string());
            put(
                a.clone(),
                slot.clone(),
                Object::Lit(Literal::Token(step.name.clone())),
            );
            put(a.clone(), slot.clone(), Object::Addr(step.node.clone()));
            for input in &step.inputs {
                put(
                    slot.clone(),
                    slot.child("input"),
                    Object::Lit(Literal::Token(input.token())),
                );
            }
        }
        quads
    }
}

/// A workflow wired into an executable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    /// Step names in a deterministic topological order.
    pub order: Vec<String>,
    pub nodes: BTreeMap<String, AnalysisNode>,
    pub edges: Vec<DagEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagEdge {
    /// Producing step, or None for the workflow input.
    pub from: Option<String>,
    pub to: String,
    /// Translation bridging the types, when they are not equal:
    /// (producer type, consumer type).
    pub translation: Option<(Address, Address)>,
}

/// Type addresses a slot reference stands for. An address used as a type
/// may itself be a slot (like `@jonny:bin-spikes:inputType`) whose quads
/// name the actual types; otherwise it is the type.
fn deref_type_slot(store: &LinkStore, addr: &Address) -> Vec<Address> {
    let mut found: Vec<Address> = store
        .local_query(&Pattern {
            predicate: Some(addr.without_pins()),
            ..Pattern::default()
        })
        .iter()
        .filter_map(|q| match &q.object {
            Object::Addr(a) => Some(a.without_pins()),
            _ => None,
        })
        .collect();
    found.sort();
    found.dedup();
    if found.is_empty() {
        vec![addr.without_pins()]
    } else {
        found
    }
}

fn bridge(
    produced: &[Address],
    expected: &[Address],
    links: &[TranslationLink],
) -> Option<Option<(Address, Address)>> {
    for t in produced {
        if expected.contains(t) {
            return Some(None);
        }
    }
    for link in links {
        let source = link.source.without_pins();
        let target = link.target.without_pins();
        if produced.contains(&source) && expected.contains(&target) {
            return Some(Some((source, target)));
        }
    }
    None
}

/// Builds and checks the step graph: every edge's types must agree or be
/// bridged by a translation link, and the graph must be acyclic.
pub fn build_dag(
    store: &LinkStore,
    workflow: &Workflow,
    links: &[TranslationLink],
) -> Result<Dag, WorkflowError> {
    let mut names: BTreeSet<String> = BTreeSet::new();
    for step in &workflow.steps {
        if !names.insert(step.name.clone()) {
            return Err(WorkflowError::DuplicateStep(step.name.clone()));
        }
    }
    let mut nodes: BTreeMap<String, AnalysisNode> = BTreeMap::new();
    for step in &workflow.steps {
        nodes.insert(step.name.clone(), load_node(store, &step.node)?);
    }
    let workflow_input: Option<Vec<Address>> = workflow
        .input_type
        .as_ref()
        .map(|t| deref_type_slot(store, t));

    let mut edges: Vec<DagEdge> = Vec::new();
    let mut preds: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for step in &workflow.steps {
        preds.entry(step.name.clone()).or_default();
        let consumer = &nodes[&step.name];
        let inputs = if step.inputs.is_empty() {
            vec![StepInput::WorkflowInput]
        } else {
            step.inputs.clone()
        };
        for input in inputs {
            match input {
                StepInput::WorkflowInput => {
                    let translation = match &workflow_input {
                        None => None,
                        Some(produced) => bridge(produced, &consumer.input_types, links)
                            .ok_or_else(|| WorkflowError::EdgeTypeMismatch {
                                step: step.name.clone(),
                                producer: "the workflow input".to_string(),
                                produced: render_types(produced),
                                expected: render_types(&consumer.input_types),
                            })?,
                    };
                    edges.push(DagEdge {
                        from: None,
                        to: step.name.clone(),
                        translation,
                    });
                }
                StepInput::StepOutput { step: from, .. } => {
                    let producer = nodes.get(&from).ok_or_else(|| {
                        WorkflowError::UnknownStep(step.name.clone(), from.clone())
                    })?;
                    let translation = bridge(&producer.output_types, &consumer.input_types, links)
                        .ok_or_else(|| WorkflowError::EdgeTypeMismatch {
                            step: step.name.clone(),
                            producer: from.clone(),
                            produced: render_types(&producer.output_types),
                            expected: render_types(&consumer.input_types),
                        })?;
                    preds.get_mut(&step.name).unwrap().insert(from.clone());
                    edges.push(DagEdge {
                        from: Some(from.clone()),
                        to: step.name.clone(),
                        translation,
                    });
                }
            }
        }
    }

    // Kahn's algorithm; ready steps leave in declaration order.
    let declared: Vec<String> = workflow.steps.iter().map(|s| s.name.clone()).collect();
    let mut remaining: BTreeMap<String, BTreeSet<String>> = preds;
    let mut order: Vec<String> = Vec::new();
    while !remaining.is_empty() {
        let next = declared
            .iter()
            .find(|name| remaining.get(*name).is_some_and(BTreeSet::is_empty))
            .cloned();
        let Some(name) = next else {
            let mut stuck: Vec<String> = remaining.keys().cloned().collect();
            stuck.sort();
            return Err(WorkflowError::Cycle(stuck.join(" -> ")));
        };
        remaining.remove(&name);
        for waiting in remaining.values_mut() {
            waiting.remove(&name);
        }
        order.push(name);
    }

    Ok(Dag {
        order,
        nodes,
        edges,
    })
}

fn render_types(types: &[Address]) -> String {
    let parts: Vec<String> = types.iter().map(Address::render).collect();
    parts.join(" | ")
}

/// Available package versions, as a resolver input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    available: BTreeMap<(PeerId, String), BTreeSet<Version>>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn add(&mut self, ecosystem: PeerId, package: &str, version: Version) {
        self.available
            .entry((ecosystem, package.to_string()))
            .or_default()
            .insert(version);
    }

    pub fn versions(&self, ecosystem: &PeerId, package: &str) -> Option<&BTreeSet<Version>> {
        self.available.get(&(*ecosystem, package.to_string()))
    }

    /// Line format: `ecosystem package version`, one per line, `#` comments.
    /// The ecosystem is a handle; a `-` package means the ecosystem itself.
    pub fn parse(text: &str, handles: &HandleTable) -> Result<Registry, WorkflowError> {
        let mut registry = Registry::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [ecosystem, package, version] = fields[..] else {
                return Err(WorkflowError::Malformed(format!(
                    "registry line {}: want `ecosystem package version`",
                    i + 1
                )));
            };
            let peer = handles
                .resolve(ecosystem)
                .map_err(|e| WorkflowError::Malformed(format!("registry line {}: {e}", i + 1)))?;
            let version = Version::parse(version)
                .map_err(|e| WorkflowError::Malformed(format!("registry line {}: {e}", i + 1)))?;
            let package = if package == "-" { "" } else { package };
            registry.add(peer, package, version);
        }
        Ok(registry)
    }
}

/// One pinned dependency in a lockfile.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedDep {
    pub ecosystem: PeerId,
    pub package: String,
    pub version: Version,
    pub source: String,
}

/// For each package, the maximum registry version satisfying every
/// constraint that names it. No backtracking: an empty intersection is a
/// conflict, reported with every constraint and where it came from.
pub fn resolve_deps(
    registry: &Registry,
    nodes: &[AnalysisNode],
) -> Result<Vec<ResolvedDep>, WorkflowError> {
    let mut constraints: BTreeMap<(PeerId, String), Vec<(VersionReq, Address, Vec<String>)>> =
        BTreeMap::new();
    for node in nodes {
        for dep in &node.depends_on {
            constraints.entry(dep.key()).or_default().push((
                dep.req.clone(),
                node.address.clone(),
                dep.extra_sources.clone(),
            ));
        }
    }
    let mut resolved = Vec::new();
    for ((ecosystem, package), reqs) in constraints {
        let Some(versions) = registry.versions(&ecosystem, &package) else {
            return Err(WorkflowError::UnknownPackage { ecosystem, package });
        };
        let best = versions
            .iter()
            .rev()
            .find(|v| reqs.iter().all(|(req, _, _)| match_version(v, req)));
        let Some(best) = best else {
            let constraints = reqs
                .iter()
                .map(|(req, from, _)| format!("{req} (from {})", from.render()))
                .collect();
            return Err(WorkflowError::Conflict {
                package: if package.is_empty() {
                    format!("@{ecosystem}")
                } else {
                    package
                },
                constraints,
            });
        };
        let source = reqs
            .iter()
            .flat_map(|(_, _, sources)| sources.iter())
            .next()
            .cloned()
            .unwrap_or_else(|| "registry".to_string());
        resolved.push(ResolvedDep {
            ecosystem,
            package,
            version: best.clone(),
            source,
        });
    }
    Ok(resolved)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowRef {
    pub label: Option<String>,
    pub workflow: Address,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    pub address: Address,
    pub description: Option<String>,
    pub topics: Vec<Address>,
    pub workflows: Vec<WorkflowRef>,
    /// Keys like `Step1:params:bin_width`, relative to the workflow.
    pub global_params: BTreeMap<String, Literal>,
    /// Dataset addresses, pins and all.
    pub datasets: Vec<Address>,
}

pub fn load_project(store: &LinkStore, address: &Address) -> Result<Project, WorkflowError> {
    let record = store.resolve(address)?;
    let a = &record.address;
    let mut project = Project {
        address: a.clone(),
        description: None,
        topics: Vec::new(),
        workflows: Vec::new(),
        global_params: BTreeMap::new(),
        datasets: Vec::new(),
    };
    let mut typed = false;
    let wf_prefix = a.child("workflow");
    let mut slots: BTreeMap<Vec<String>, WorkflowRef> = BTreeMap::new();
    for q in &record.quads {
        if q.subject == *a {
            if q.predicate == reserved::type_pred() {
                if let Object::Addr(t) = &q.object {
                    typed |= t.without_pins() == project_type();
                }
            } else if q.predicate == a.child("hasDescription") {
                project.description = literal_text(&q.object);
            } else if q.predicate == a.child("researchTopic") {
                if let Object::Addr(t) = &q.object {
                    project.topics.push(t.clone());
                }
            } else if q.predicate.is_under(&wf_prefix) {
                let ordinal = q.predicate.tail_under(&wf_prefix).unwrap_or(&[]).to_vec();
                let slot = slots.entry(ordinal).or_insert_with(|| WorkflowRef {
                    label: None,
                    workflow: a.clone(),
                });
                match &q.object {
                    Object::Lit(Literal::Token(label)) => slot.label = Some(label.clone()),
                    Object::Addr(wf) => slot.workflow = wf.clone(),
                    _ => {}
                }
            }
        } else if q.subject.is_under(&wf_prefix) || q.subject == wf_prefix {
            let last = q.subject.segments.last().map(String::as_str);
            if last == Some("globalParams") {
                if let Object::Lit(lit) = &q.object {
                    // The dotted key is spelled under the workflow address.
                    let key = q
                        .predicate
                        .segments
                        .iter()
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(":");
                    let key = slots
                        .values()
                        .find_map(|r| {
                            q.predicate
                                .tail_under(&r.workflow.without_pins())
                                .map(|tail| tail.join(":"))
                        })
                        .unwrap_or(key);
                    project.global_params.insert(key, lit.clone());
                }
            } else if q.predicate.segments.last().map(String::as_str) == Some("datasets") {
                if let Object::Addr(d) = &q.object {
                    project.datasets.push(d.clone());
                }
            }
        }
    }
    if !typed {
        return Err(WorkflowError::NotAProject(address.render()));
    }
    let mut ordered: Vec<(Vec<String>, WorkflowRef)> = slots.into_iter().collect();
    ordered.sort_by_key(|(ordinal, _)| {
        let numeric = ordinal.first().and_then(|s| s.parse::<u64>().ok());
        (numeric, ordinal.clone())
    });
    project.workflows = ordered.into_iter().map(|(_, r)| r).collect();
    Ok(project)
}

impl Project {
    pub fn to_quads(&self, author: PeerId) -> QuadSet {
        let a = &self.address;
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
            a.clone(),
            reserved::type_pred(),
            Object::Addr(project_type()),
        );
        if let Some(d) = &self.description {
            put(
                a.clone(),
                a.child("hasDescription"),
                Object::Lit(Literal::Str(d.clone())),
            );
        }
        for t in &self.topics {
            put(a.clone(), a.child("researchTopic"), Object::Addr(t.clone()));
        }
        // A single workflow keeps the paper's unordinaled shape.
        for (i, r) in self.workflows.iter().enumerate() {
            let slot = if self.workflows.len() == 1 {
                a.child("workflow")
            } else {
                a.child("workflow").child(&i.to_string())
            };
            if let Some(label) = &r.label {
                put(
                    a.clone(),
                    slot.clone(),
                    Object::Lit(Literal::Token(label.clone())),
                );
            }
            put(a.clone(), slot.clone(), Object::Addr(r.workflow.clone()));
            for (key, value) in &self.global_params {
                let segments: Vec<&str> = key.split(':').collect();
                put(
                    slot.child("globalParams"),
                    r.workflow.without_pins().descend(
                        &segments.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                    ),
                    Object::Lit(value.clone()),
                );
            }
            for d in &self.datasets {
                put(slot.clone(), slot.child("datasets"), Object::Addr(d.clone()));
            }
        }
        quads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockStep {
    pub name: String,
    pub node: Address,
    pub version: Option<Version>,
    pub provider: ProvidedBy,
    /// Wiring tokens: `input`, or `Step:port`.
    pub inputs: Vec<String>,
}

/// A fully resolved, byte-deterministic record of one project freeze.
#[derive(Debug, Clone, PartialEq)]
pub struct Lockfile {
    pub project: Address,
    pub project_commit: CommitId,
    /// Steps in execution order.
    pub steps: Vec<LockStep>,
    pub deps: Vec<ResolvedDep>,
    /// `Step:param` to its final value: defaults overridden by globals.
    pub params: BTreeMap<String, Literal>,
    /// Each dataset with the exact commit its pins resolved to.
    pub datasets: Vec<(Address, CommitId)>,
    /// One planned output address per dataset, from the output template.
    pub planned_outputs: Vec<Address>,
}

/// The dataset subtree a pinned address snapshots: the pinned prefix when
/// there is a pin, the whole address otherwise.
fn dataset_root(dataset: &Address) -> Address {
    match dataset.first_pin() {
        Some((prefix, _, _)) => prefix,
        None => dataset.without_pins(),
    }
}

fn planned_output(dataset: &Address, template: &str) -> Result<Address, WorkflowError> {
    let mut parts = template.split(':');
    if parts.next() != Some("input") {
        return Err(WorkflowError::Malformed(format!(
            "output template {template} does not start with `input`"
        )));
    }
    let rest: Vec<String> = parts.map(str::to_string).collect();
    Ok(dataset_root(dataset).descend(&rest))
}

/// Resolves a project into a lockfile: variant-free nodes, exact dependency
/// versions, fully valued parameters, snapshot-pinned datasets, and the
/// planned output address for each dataset.
pub fn freeze(
    store: &LinkStore,
    project: &Project,
    registry: &Registry,
) -> Result<Lockfile, WorkflowError> {
    if project.workflows.len() != 1 {
        return Err(WorkflowError::WorkflowCount(project.workflows.len()));
    }
    let wf_ref = &project.workflows[0];
    let workflow = load_workflow(store, &wf_ref.workflow)?;
    let dag = build_dag(store, &workflow, &[])?;
    let project_commit = store.resolve(&project.address)?.at_commit;

    // Parameters: every global key must name a real step parameter.
    let mut params: BTreeMap<String, Literal> = BTreeMap::new();
    for key in project.global_params.keys() {
        let parts: Vec<&str> = key.split(':').collect();
        let ok = match parts[..] {
            [step, "params", param] => dag
                .nodes
                .get(step)
                .is_some_and(|n| n.params.iter().any(|p| p.name == param)),
            _ => false,
        };
        if !ok {
            return Err(WorkflowError::BadParamKey(key.clone()));
        }
    }
    for name in &dag.order {
        let node = &dag.nodes[name];
        for p in &node.params {
            let global = project
                .global_params
                .get(&format!("{name}:params:{}", p.name));
            let value = global.or(p.default.as_ref()).ok_or_else(|| {
                WorkflowError::UnvaluedParam(format!("{name}:{}", p.name))
            })?;
            params.insert(format!("{name}:{}", p.name), value.clone());
        }
    }

    let nodes: Vec<AnalysisNode> = dag.order.iter().map(|n| dag.nodes[n].clone()).collect();
    let deps = resolve_deps(registry, &nodes)?;

    let mut steps = Vec::new();
    for name in &dag.order {
        let node = &dag.nodes[name];
        let declared = workflow.steps.iter().find(|s| s.name == *name).unwrap();
        let inputs = if declared.inputs.is_empty() {
            vec![StepInput::WorkflowInput.token()]
        } else {
            declared.inputs.iter().map(StepInput::token).collect()
        };
        steps.push(LockStep {
            name: name.clone(),
            node: node.address.clone(),
            version: node.version.clone(),
            provider: node.provided_by.clone(),
            inputs,
        });
    }

    let mut datasets = Vec::new();
    let mut planned_outputs = Vec::new();
    for dataset in &project.datasets {
        let record = store.resolve(dataset)?;
        datasets.push((dataset.clone(), record.at_commit));
        if let Some(template) = &workflow.output_name {
            planned_outputs.push(planned_output(dataset, template)?);
        }
    }

    Ok(Lockfile {
        project: project.address.clone(),
        project_commit,
        steps,
        deps,
        params,
        datasets,
        planned_outputs,
    })
}

impl Lockfile {
    /// The lockfile as quads under `<project>:lock`, authored by the
    /// project's peer. Vec fields carry explicit indices, so the quad set
    /// reconstructs the exact structure.
    pub fn to_quads(&self) -> QuadSet {
        let author = self.project.peer;
        let l = self.project.without_pins().child("lock");
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
            l.clone(),
            l.child("project"),
            Object::AddrAt(self.project.clone(), self.project_commit),
        );
        for (i, step) in self.steps.iter().enumerate() {
            let s = l.child("steps").child(&i.to_string());
            put(
                s.clone(),
                s.child("name"),
                Object::Lit(Literal::Token(step.name.clone())),
            );
            put(s.clone(), s.child("node"), Object::Addr(step.node.clone()));
            if let Some(v) = &step.version {
                put(
                    s.clone(),
                    s.child("version"),
                    Object::Lit(Literal::Version(v.clone())),
                );
            }
            let p = &step.provider;
            put(
                s.clone(),
                s.child("provider"),
                Object::Addr(p.provider.clone()),
            );
            put(
                s.clone(),
                s.child("locator"),
                Object::Lit(Literal::Str(p.locator.clone())),
            );
            if let Some(rev) = &p.revision {
                put(
                    s.clone(),
                    s.child("revision"),
                    Object::Lit(Literal::Str(rev.clone())),
                );
            }
            put(
                s.clone(),
                s.child("entrypoint"),
                Object::Lit(Literal::Str(p.entrypoint.clone())),
            );
            put(
                s.clone(),
                s.child("method"),
                Object::Lit(Literal::Str(p.method.clone())),
            );
            for (j, input) in step.inputs.iter().enumerate() {
                put(
                    s.clone(),
                    s.child("input").child(&j.to_string()),
                    Object::Lit(Literal::Token(input.clone())),
                );
            }
        }
        for (i, dep) in self.deps.iter().enumerate() {
            let d = l.child("deps").child(&i.to_string());
            put(
                d.clone(),
                d.child("ecosystem"),
                Object::Addr(Address::peer_only(dep.ecosystem)),
            );
            put(
                d.clone(),
                d.child("package"),
                Object::Lit(Literal::Str(dep.package.clone())),
            );
            put(
                d.clone(),
                d.child("version"),
                Object::Lit(Literal::Version(dep.version.clone())),
            );
            put(
                d.clone(),
                d.child("source"),
                Object::Lit(Literal::Str(dep.source.clone())),
            );
        }
        for (key, value) in &self.params {
            let segments: Vec<String> = key.split(':').map(str::to_string).collect();
            put(
                l.child("params"),
                l.child("params").descend(&segments),
                Object::Lit(value.clone()),
            );
        }
        for (i, (dataset, commit)) in self.datasets.iter().enumerate() {
            put(
                l.child("datasets"),
                l.child("datasets").child(&i.to_string()),
                Object::AddrAt(dataset.clone(), *commit),
            );
        }
        for (i, output) in self.planned_outputs.iter().enumerate() {
            put(
                l.child("outputs"),
                l.child("outputs").child(&i.to_string()),
                Object::Addr(output.clone()),
            );
        }
        quads
    }

    pub fn from_quads(quads: &QuadSet) -> Result<Lockfile, WorkflowError> {
        let bad = |m: &str| WorkflowError::BadLockfile(m.to_string());
        let (l, project, project_commit) = quads
            .iter()
            .find_map(|q| match (&q.predicate.segments.last(), &q.object) {
                (Some(last), Object::AddrAt(addr, commit)) if *last == "project" => {
                    Some((q.subject.clone(), addr.clone(), *commit))
                }
                _ => None,
            })
            .ok_or_else(|| bad("no project quad"))?;
        let mut lock = Lockfile {
            project,
            project_commit,
            steps: Vec::new(),
            deps: Vec::new(),
            params: BTreeMap::new(),
            datasets: Vec::new(),
            planned_outputs: Vec::new(),
        };
        let steps_prefix = l.child("steps");
        let deps_prefix = l.child("deps");
        let params_subject = l.child("params");
        let datasets_subject = l.child("datasets");
        let outputs_subject = l.child("outputs");

        let mut steps: BTreeMap<u64, LockStep> = BTreeMap::new();
        let mut inputs: BTreeMap<u64, BTreeMap<u64, String>> = BTreeMap::new();
        let mut deps: BTreeMap<u64, ResolvedDep> = BTreeMap::new();
        let mut datasets: BTreeMap<u64, (Address, CommitId)> = BTreeMap::new();
        let mut outputs: BTreeMap<u64, Address> = BTreeMap::new();
        let index = |s: &String| s.parse::<u64>().ok();

        for q in quads {
            if let Some([i]) = q.subject.tail_under(&steps_prefix) {
                let Some(i) = index(i) else { continue };
                let slot = steps.entry(i).or_insert_with(|| LockStep {
                    name: String::new(),
                    node: l.clone(),
                    version: None,
                    provider: ProvidedBy::builtin("unset"),
                    inputs: Vec::new(),
                });
                match (q.predicate.tail_under(&q.subject), &q.object) {
                    (Some(t), Object::Lit(Literal::Token(v))) if t == ["name"] => {
                        slot.name = v.clone();
                    }
                    (Some(t), Object::Addr(v)) if t == ["node"] => slot.node = v.clone(),
                    (Some(t), Object::Lit(Literal::Version(v))) if t == ["version"] => {
                        slot.version = Some(v.clone());
                    }
                    (Some(t), Object::Addr(v)) if t == ["provider"] => {
                        slot.provider.provider = v.clone();
                        slot.provider.kind = if v.peer == builtin_peer() {
                            ProviderKind::Builtin
                        } else {
                            ProviderKind::Repository
                        };
                    }
                    (Some(t), Object::Lit(Literal::Str(v))) if t == ["locator"] => {
                        slot.provider.locator = v.clone();
                    }
                    (Some(t), Object::Lit(Literal::Str(v))) if t == ["revision"] => {
                        slot.provider.revision = Some(v.clone());
                    }
                    (Some(t), Object::Lit(Literal::Str(v))) if t == ["entrypoint"] => {
                        slot.provider.entrypoint = v.clone();
                    }
                    (Some(t), Object::Lit(Literal::Str(v))) if t == ["method"] => {
                        slot.provider.method = v.clone();
                    }
                    (Some(t), Object::Lit(Literal::Token(v)))
                        if t.len() == 2 && t[0] == "input" =>
                    {
                        if let Some(j) = index(&t[1]) {
                            inputs.entry(i).or_default().insert(j, v.clone());
                        }
                    }
                    _ => {}
                }
            } else if let Some([i]) = q.subject.tail_under(&deps_prefix) {
                let Some(i) = index(i) else { continue };
                let slot = deps.entry(i).or_insert_with(|| ResolvedDep {
                    ecosystem: l.peer,
                    package: String::new(),
                    version: Version::new(vec![0]),
                    source: String::new(),
                });
                match (q.predicate.tail_under(&q.subject), &q.object) {
                    (Some(t), Object::Addr(v)) if t == ["ecosystem"] => slot.ecosystem = v.peer,
                    (Some(t), Object::Lit(Literal::Str(v))) if t == ["package"] => {
                        slot.package = v.clone();
                    }
                    (Some(t), Object::Lit(Literal::Version(v))) if t == ["version"] => {
                        slot.version = v.clone();
                    }
                    (Some(t), Object::Lit(Literal::Str(v))) if t == ["source"] => {
                        slot.source = v.clone();
                    }
                    _ => {}
                }
            } else if q.subject == params_subject {
                if let (Some(tail), Object::Lit(lit)) =
                    (q.predicate.tail_under(&params_subject), &q.object)
                {
                    lock.params.insert(tail.join(":"), lit.clone());
                }
            } else if q.subject == datasets_subject {
                if let (Some([i]), Object::AddrAt(addr, commit)) =
                    (q.predicate.tail_under(&datasets_subject), &q.object)
                {
                    if let Some(i) = index(i) {
                        datasets.insert(i, (addr.clone(), *commit));
                    }
                }
            } else if q.subject == outputs_subject {
                if let (Some([i]), Object::Addr(addr)) =
                    (q.predicate.tail_under(&outputs_subject), &q.object)
                {
                    if let Some(i) = index(i) {
                        outputs.insert(i, addr.clone());
                    }
                }
            }
        }
        for (i, mut step) in steps {
            if step.name.is_empty() {
                return Err(bad("a step has no name"));
            }
            if let Some(wires) = inputs.remove(&i) {
                step.inputs = wires.into_values().collect();
            }
            lock.steps.push(step);
        }
        lock.deps = deps.into_values().collect();
        lock.datasets = datasets.into_values().collect();
        lock.planned_outputs = outputs.into_values().collect();
        Ok(lock)
    }

    /// Hex hash of the canonical quad bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(canonical_quadset(&self.to_quads())))
    }

    /// The `.flock` bytes: a hash header line, then canonical quads.
    pub fn to_bytes(&self) -> Vec<u8> {
        let canonical = canonical_quadset(&self.to_quads());
        let mut out = format!("#lock {}\n", hex::encode(Sha256::digest(&canonical))).into_bytes();
        out.extend_from_slice(&canonical);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Lockfile, WorkflowError> {
        let bad = |m: &str| WorkflowError::BadLockfile(m.to_string());
        let newline = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| bad("bad header"))?;
        let claimed = header
            .strip_prefix("#lock ")
            .ok_or_else(|| bad("missing #lock header"))?;
        let body = &bytes[newline + 1..];
        let actual = hex::encode(Sha256::digest(body));
        if claimed != actual {
            return Err(bad("content hash does not match"));
        }
        let quads: QuadSet = parse_canonical_quads(body)
            .map_err(|e| bad(&e.to_string()))?
            .into_iter()
            .collect();
        Lockfile::from_quads(&quads)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepStatus {
    Succeeded,
    Cached,
    Failed(String),
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRun {
    pub dataset: Address,
    pub step: String,
    pub status: StepStatus,
    pub output: Option<BlobRef>,
}

/// What one execution produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub lock_hash: String,
    pub runs: Vec<StepRun>,
    /// Final outputs, keyed by their planned addresses.
    pub outputs: BTreeMap<Address, BlobRef>,
    /// Provenance quads committed into the runner's namespace.
    pub provenance: QuadSet,
}

pub struct ExecContext<'a> {
    pub input: &'a [u8],
    pub params: &'a BTreeMap<String, Literal>,
}

pub type ExecutorFn = fn(&ExecContext) -> Result<Vec<u8>, String>;

#[derive(Default, Clone)]
pub struct ExecutorRegistry {
    entries: BTreeMap<String, ExecutorFn>,
}

impl ExecutorRegistry {
    pub fn empty() -> ExecutorRegistry {
        ExecutorRegistry::default()
    }

    /// The built-in executors: bin, mean, grayscale, identity.
    pub fn builtins() -> ExecutorRegistry {
        let mut registry = ExecutorRegistry::default();
        registry.register("bin", builtin_bin);
        registry.register("mean", builtin_mean);
        registry.register("grayscale", builtin_grayscale);
        registry.register("identity", builtin_identity);
        registry
    }

    pub fn register(&mut self, entrypoint: &str, f: ExecutorFn) {
        self.entries.insert(entrypoint.to_string(), f);
    }

    pub fn get(&self, entrypoint: &str) -> Option<ExecutorFn> {
        self.entries.get(entrypoint).copied()
    }
}

fn parse_series(input: &[u8]) -> Result<Vec<f64>, String> {
    let text = std::str::from_utf8(input).map_err(|_| "input is not text".to_string())?;
    text.split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|_| format!("bad number {tok}")))
        .collect()
}

fn format_number(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn format_series(xs: &[f64]) -> Vec<u8> {
    let parts: Vec<String> = xs.iter().map(|x| format_number(*x)).collect();
    parts.join(" ").into_bytes()
}

/// Sums consecutive windows of `bin_width` samples; a trailing partial
/// window is dropped.
fn builtin_bin(ctx: &ExecContext) -> Result<Vec<u8>, String> {
    let width = match ctx.params.get("bin_width") {
        Some(Literal::Int(w)) if *w > 0 => *w as usize,
        Some(other) => return Err(format!("bad bin_width {}", Object::Lit(other.clone()).render())),
        None => return Err("bin needs a bin_width parameter".to_string()),
    };
    let xs = parse_series(ctx.input)?;
    let sums: Vec<f64> = xs
        .chunks(width)
        .filter(|c| c.len() == width)
        .map(|c| c.iter().sum())
        .collect();
    Ok(format_series(&sums))
}

fn builtin_mean(ctx: &ExecContext) -> Result<Vec<u8>, String> {
    let xs = parse_series(ctx.input)?;
    if xs.is_empty() {
        return Err("mean of an empty series".to_string());
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(format_series(&[mean]))
}

/// Averages each RGB triple into one sample.
fn builtin_grayscale(ctx: &ExecContext) -> Result<Vec<u8>, String> {
    let xs = parse_series(ctx.input)?;
    if xs.len() % 3 != 0 {
        return Err(format!("{} samples do not form RGB triples", xs.len()));
    }
    let grays: Vec<f64> = xs.chunks(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
    Ok(format_series(&grays))
}

fn builtin_identity(ctx: &ExecContext) -> Result<Vec<u8>, String> {
    Ok(ctx.input.to_vec())
}

/// The input bytes a dataset feeds into a workflow: the first blob the
/// snapshot carries, in canonical order.
fn dataset_input(store: &LinkStore, dataset: &Address) -> Result<Vec<u8>, WorkflowError> {
    let record = store.resolve(dataset)?;
    let blob = record.quads.iter().find_map(|q| match &q.object {
        Object::Blob(b) => Some(b.clone()),
        _ => None,
    });
    let Some(blob) = blob else {
        return Err(WorkflowError::BadLockfile(format!(
            "dataset {} carries no blob",
            dataset.render()
        )));
    };
    Ok(store.get_blob(&blob)?)
}

fn step_params(lockfile: &Lockfile, step: &str) -> BTreeMap<String, Literal> {
    let prefix = format!("{step}:");
    lockfile
        .params
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(&prefix)
                .map(|name| (name.to_string(), v.clone()))
        })
        .collect()
}

/// Runs a lockfile: each dataset flows through the steps in order, outputs
/// land as blobs, and provenance quads tie every final output back to the
/// lockfile, its step, and its input snapshot. The runner must own the
/// planned output addresses.
pub fn execute(
    store: &mut LinkStore,
    lockfile: &Lockfile,
    executors: &ExecutorRegistry,
    runner: PeerId,
    secret: &SecretHandle,
) -> Result<RunRecord, WorkflowError> {
    let mut record = RunRecord {
        lock_hash: lockfile.content_hash(),
        ..RunRecord::default()
    };
    // Outputs keyed by (step, input hash, params) so identical work is
    // done once across datasets.
    let mut cache: BTreeMap<[u8; 32], (BlobRef, Vec<u8>)> = BTreeMap::new();

    for step in &lockfile.steps {
        if step.provider.kind == ProviderKind::Repository {
            return Err(WorkflowError::ExternalExecution(step.node.render()));
        }
        if executors.get(&step.provider.entrypoint).is_none() {
            return Err(WorkflowError::MissingExecutor(step.provider.entrypoint.clone()));
        }
    }

    for (di, (dataset, commit)) in lockfile.datasets.iter().enumerate() {
        let input_bytes = dataset_input(store, dataset)?;
        let mut by_step: BTreeMap<String, (BlobRef, Vec<u8>)> = BTreeMap::new();
        let mut failed = false;
        let mut last: Option<(String, BlobRef)> = None;
        for step in &lockfile.steps {
            if failed {
                record.runs.push(StepRun {
                    dataset: dataset.clone(),
                    step: step.name.clone(),
                    status: StepStatus::Skipped,
                    output: None,
                });
                continue;
            }
            let input: &[u8] = match step.inputs.first().map(String::as_str) {
                None | Some("input") => &input_bytes,
                Some(token) => {
                    let (from, _) = token.split_once(':').unwrap_or((token, ""));
                    match by_step.get(from) {
                        Some((_, bytes)) => bytes,
                        None => {
                            record.runs.push(StepRun {
                                dataset: dataset.clone(),
                                step: step.name.clone(),
                                status: StepStatus::Skipped,
                                output: None,
                            });
                            continue;
                        }
                    }
                }
            };
            let params = step_params(lockfile, &step.name);
            let mut hasher = Sha256::new();
            hasher.update(step.node.render().as_bytes());
            hasher.update([0x1f]);
            hasher.update(Sha256::digest(input));
            for (k, v) in &params {
                hasher.update([0x1f]);
                hasher.update(k.as_bytes());
                hasher.update([0x1e]);
                hasher.update(Object::Lit(v.clone()).render().as_bytes());
            }
            let cache_key: [u8; 32] = hasher.finalize().into();

            let (status, produced) = if let Some(hit) = cache.get(&cache_key) {
                (StepStatus::Cached, Some(hit.clone()))
            } else {
                let executor = executors.get(&step.provider.entrypoint).unwrap();
                let ctx = ExecContext { input, params: &params };
                match executor(&ctx) {
                    Ok(bytes) => {
                        let blob = store.put_blob(&bytes, "raw")?;
                        cache.insert(cache_key, (blob.clone(), bytes.clone()));
                        (StepStatus::Succeeded, Some((blob, bytes)))
                    }
                    Err(message) => (StepStatus::Failed(message), None),
                }
            };
            match produced {
                Some((blob, bytes)) => {
                    by_step.insert(step.name.clone(), (blob.clone(), bytes));
                    last = Some((step.name.clone(), blob.clone()));
                    record.runs.push(StepRun {
                        dataset: dataset.clone(),
                        step: step.name.clone(),
                        status,
                        output: Some(blob),
                    });
                }
                None => {
                    failed = true;
                    record.runs.push(StepRun {
                        dataset: dataset.clone(),
                        step: step.name.clone(),
                        status,
                        output: None,
                    });
                }
            }
        }
        let (Some((last_step, blob)), Some(out)) =
            (last, lockfile.planned_outputs.get(di))
        else {
            continue;
        };
        if failed {
            continue;
        }
        record.outputs.insert(out.clone(), blob.clone());
        let mut put = |subject: Address, predicate: Address, object: Object| {
            record.provenance.insert(Quad {
                author: runner,
                subject,
                predicate,
                object,
            });
        };
        put(out.clone(), out.child("data"), Object::Blob(blob.clone()));
        put(
            out.clone(),
            out.child("lock"),
            Object::Lit(Literal::Str(record.lock_hash.clone())),
        );
        put(
            out.clone(),
            out.child("step"),
            Object::Lit(Literal::Token(last_step)),
        );
        put(
            out.clone(),
            out.child("input"),
            Object::AddrAt(dataset.clone(), *commit),
        );
        // Reachability from the project: a run slot points at the output.
        let run_slot = lockfile
            .project
            .without_pins()
            .child("runs")
            .child(&record.lock_hash[..16]);
        put(
            run_slot.clone(),
            run_slot.child("output"),
            Object::Addr(out.clone()),
        );
    }

    if !record.provenance.is_empty() {
        store.commit(runner, secret, record.provenance.clone(), QuadSet::new())?;
    }
    Ok(record)
}

/// Freezes the project once per point in the parameter grid. Keys follow
/// the global-parameter form; the result is the Cartesian product in
/// sorted key order.
pub fn expand_grid(
    store: &LinkStore,
    project: &Project,
    registry: &Registry,
    grid: &BTreeMap<String, Vec<Literal>>,
) -> Result<Vec<Lockfile>, WorkflowError> {
    for (key, values) in grid {
        if values.is_empty() {
            return Err(WorkflowError::EmptyGrid(key.clone()));
        }
    }
    let keys: Vec<&String> = grid.keys().collect();
    let mut locks = Vec::new();
    let mut indices = vec![0usize; keys.len()];
    loop {
        let mut point = project.clone();
        for (k, key) in keys.iter().enumerate() {
            point
                .global_params
                .insert((*key).clone(), grid[*key][indices[k]].clone());
        }
        locks.push(freeze(store, &point, registry)?);
        // Odometer increment; done when it wraps.
        let mut k = keys.len();
        loop {
            if k == 0 {
                return Ok(locks);
            }
            k -= 1;
            indices[k] += 1;
            if indices[k] < grid[keys[k]].len() {
                break;
            }
            indices[k] = 0;
        }
    }
}
