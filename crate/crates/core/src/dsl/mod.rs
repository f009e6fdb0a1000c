//! The `.fld` dialect: a Turtle-ish text format for authored links.
//!
//! A document is a sequence of declarations. Each declaration opens with an
//! address header (`<#name>`, `<@peer>`, `<@peer#name>`, `<@peer:path>`) and
//! indents its statements by at least two spaces. Statements are predicate
//! paths followed by objects; deeper indentation nests. The vocabulary is
//! open: unknown predicates are preserved, not rejected.
//!
//! Parsing stops at the tree; [`resolve`] lowers a tree to quads against a
//! base address and a handle table, and [`serialize`] renders a quad set back
//! to canonical text such that parse-resolve round-trips byte-identically.

pub mod address;
pub mod ast;
pub mod parser;
pub mod resolve;
pub mod serialize;
pub mod version;
pub mod wikilink;

pub use address::{Address, DeclName, RawAddress, RawPeer};
pub use ast::{BaseDirective, Decl, Document, Item, NumLit, ObjectExpr, PredPath, Statement};
pub use parser::parse;
pub use resolve::resolve;
pub use serialize::serialize;
pub use version::{match_version, Version, VersionOp, VersionReq};
pub use wikilink::extract_wikilinks;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("line {line}, col {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("line {line}: duplicate prefix alias {alias:?}")]
    DuplicatePrefix { line: usize, alias: String },
    #[error("line {line}: dot-predicate without a context")]
    DotWithoutContext { line: usize },
    #[error("unbound alias {alias:?}")]
    UnboundAlias { alias: String },
    #[error("bad address {text:?}: {message}")]
    BadAddress { text: String, message: String },
    #[error("bad version: {0}")]
    BadVersion(#[from] version::VersionError),
}

impl DslError {
    pub(crate) fn syntax(line: usize, col: usize, message: impl Into<String>) -> Self {
        DslError::Syntax { line, col, message: message.into() }
    }
}
