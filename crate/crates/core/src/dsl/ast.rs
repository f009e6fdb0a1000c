//! Parse tree for `.fld` documents.

use crate::dsl::address::{DeclName, RawAddress};
use crate::dsl::version::Version;
use crate::linkstore::quad::{BlobRef, CommitId};

/// Numeric list element.
#[derive(Debug, Clone, PartialEq)]
pub enum NumLit {
    Int(i64),
    Dec(f64),
}

/// An object expression as written.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectExpr {
    Addr(RawAddress),
    /// `@addr@<commit-hex>`: an address fixed at a specific commit.
    AddrAt(RawAddress, CommitId),
    /// `blob:<hash>:<len>:<codec>` content reference.
    Blob(BlobRef),
    /// `<#path>` or `<@peer#path>` reference used in object position.
    Ref(DeclName),
    Str(String),
    Int(i64),
    Dec(f64),
    /// Bare word or colon path: `table1`, `Step1:output`.
    Token(String),
    /// `"key"="value"`.
    Pair(String, String),
    /// `[1, 2, 3]`.
    List(Vec<NumLit>),
    /// `v0.1.0` or`0.1.0` (two or more dots).
    Version(Version),
}

/// Predicate position of a statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredPath {
    /// Reserved `a`.
    Type,
    /// Reserved `extends`.
    Extends,
    /// Bare token path: `usesContainer`, `general:experimenter`.
    Tokens(Vec<String>),
    /// Leading-dot path: `.electrodes`, `.Step1:params:bin_width`.
    Dotted(Vec<String>),
    /// Address predicate: `@nwb:general:experimenter`.
    Addr(RawAddress),
}

/// One statement: predicate, inline objects, nested items.
#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub pred: PredPath,
    pub objects: Vec<ObjectExpr>,
    pub children: Vec<Item>,
    pub line: usize,
}

/// An element of a block, in source order. Order matters: bare values act as
/// context anchors for the dotted statements that follow them.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Stmt(Statement),
    /// A bare value line; attaches as an object of the enclosing statement
    /// (or as an `about` value at declaration level).
    Value { expr: ObjectExpr, line: usize },
    /// A bare address line with nested children: establishes a dot-expansion
    /// context without producing anything itself.
    Context { addr: RawAddress, body: Vec<Item>, line: usize },
}

/// One declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct Decl {
    pub name: DeclName,
    pub body: Vec<Item>,
    pub line: usize,
}

/// An `@base` directive. Positional: it applies to every declaration from
/// `before_decl` until the next directive, setting the author and the root
/// for relative declaration names.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDirective {
    pub addr: RawAddress,
    pub before_decl: usize,
    pub line: usize,
}

/// A parsed document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub bases: Vec<BaseDirective>,
    /// `#prefix alias target` directives, in order.
    pub prefixes: Vec<(String, RawAddress)>,
    pub decls: Vec<Decl>,
}

impl Document {
    /// Total number of statements, counted recursively.
    pub fn statement_count(&self) -> usize {
        fn count(items: &[Item]) -> usize {
            items
                .iter()
                .map(|item| match item {
                    Item::Stmt(s) => 1 + count(&s.children),
                    Item::Value { .. } => 0,
                    Item::Context { body, .. } => count(body),
                })
                .sum()
        }
        self.decls.iter().map(|d| count(&d.body)).sum()
    }
}
