//! Indentation parser for `.fld` documents.
//!
//! The grammar is line oriented. A document is a sequence of directives
//! (`#prefix`, `@base`), declaration headers (`<#name>`, `<@peer#name>`,
//! `<@peer:path>`), and indented statement blocks. Nesting is by
//! indentation: a child line is indented at least two spaces past its
//! parent, siblings share an indent exactly, and a dedent closes the block.
//! Blank lines and comment lines are insignificant everywhere.

use crate::dsl::address::{valid_token, DeclName, RawAddress};
use crate::dsl::ast::{
    BaseDirective, Decl, Document, Item, NumLit, ObjectExpr, PredPath, Statement,
};
use crate::dsl::version::Version;
use crate::dsl::DslError;
use crate::linkstore::quad::{BlobRef, CommitId};

/// Parses a complete document.
pub fn parse(source: &str) -> Result<Document, DslError> {
    let lines = Scanner::new(source).scan_all()?;
    assemble(&lines)
}

/// Alias for [`parse`].
pub fn parse_document(source: &str) -> Result<Document, DslError> {
    parse(source)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    /// Bare word, possibly a colon path: `usesContainer`, `Step1:output`.
    Word(String),
    /// Leading-dot path: `.data`, `.electrodes.x`.
    Dotted(Vec<String>),
    /// Raw address text including the `@`.
    Addr(String),
    /// The inside of a `<...>` reference.
    Ref(String),
    Str(String),
    Pair(String, String),
    Int(i64),
    Dec(f64),
    VersionLit(Version),
    List(Vec<NumLit>),
    /// `[ ... ]` — a list whose contents were elided in the source.
    ElidedList,
    /// A bare `...` line or token.
    Elision,
    /// The `#prefix` directive keyword.
    PrefixKeyword,
}

#[derive(Debug)]
struct LineToks {
    indent: usize,
    line: usize,
    toks: Vec<Tok>,
}

struct Scanner {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl Scanner {
    fn new(source: &str) -> Self {
        Scanner { chars: source.chars().collect(), pos: 0, line: 1 }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let ch = self.peek()?;
        self.pos += 1;
        if ch == '\n' {
            self.line += 1;
        }
        Some(ch)
    }

    fn err(&self, message: impl Into<String>) -> DslError {
        DslError::syntax(self.line, 0, message)
    }

    fn skip_to_eol(&mut self) {
        while let Some(ch) = self.peek() {
            self.bump();
            if ch == '\n' {
                break;
            }
        }
    }

    fn eat_eol(&mut self) {
        if self.peek() == Some('\r') {
            self.bump();
        }
        if self.peek() == Some('\n') {
            self.bump();
        }
    }

    fn scan_all(&mut self) -> Result<Vec<LineToks>, DslError> {
        let mut out = Vec::new();
        while self.peek().is_some() {
            let line_no = self.line;
            let mut indent = 0usize;
            while self.peek() == Some(' ') {
                self.bump();
                indent += 1;
            }
            match self.peek() {
                None => break,
                Some('\t') => {
                    return Err(self.err("tabs are not allowed in indentation; use spaces"))
                }
                Some('\n') | Some('\r') => {
                    self.eat_eol();
                    continue;
                }
                Some('#') => {
                    if indent == 0 && self.lookahead_word() == "#prefix" {
                        for _ in 0.."#prefix".len() {
                            self.bump();
                        }
                        let mut toks = vec![Tok::PrefixKeyword];
                        toks.extend(self.scan_line()?);
                        out.push(LineToks { indent, line: line_no, toks });
                    } else {
                        self.skip_to_eol();
                    }
                    continue;
                }
                Some(_) => {
                    let toks = self.scan_line()?;
                    if !toks.is_empty() {
                        out.push(LineToks { indent, line: line_no, toks });
                    }
                }
            }
        }
        Ok(out)
    }

    fn lookahead_word(&self) -> String {
        self.chars[self.pos..]
            .iter()
            .take_while(|c| !c.is_whitespace())
            .collect()
    }

    /// Tokenizes the rest of the current line (consuming the newline).
    /// Strings may continue onto following lines.
    fn scan_line(&mut self) -> Result<Vec<Tok>, DslError> {
        let mut toks = Vec::new();
        loop {
            while self.peek() == Some(' ') || self.peek() == Some('\t') {
                self.bump();
            }
            match self.peek() {
                None => break,
                Some('\n') | Some('\r') => {
                    self.eat_eol();
                    break;
                }
                Some('#') => {
                    self.skip_to_eol();
                    break;
                }
                Some('"') => {
                    let s = self.scan_string()?;
                    if self.peek() == Some('=') {
                        self.bump();
                        if self.peek() != Some('"') {
                            return Err(self.err("expected a quoted value after `=`"));
                        }
                        let v = self.scan_string()?;
                        toks.push(Tok::Pair(s, v));
                    } else {
                        toks.push(Tok::Str(s));
                    }
                }
                Some('[') => toks.push(self.scan_list()?),
                Some('<') => toks.push(Tok::Ref(self.scan_ref()?)),
                Some('@') => toks.push(Tok::Addr(self.scan_address())),
                Some(_) => {
                    let word = self.scan_word();
                    toks.push(classify_word(&word, self.line)?);
                }
            }
        }
        Ok(toks)
    }

    fn scan_string(&mut self) -> Result<String, DslError> {
        let open_line = self.line;
        self.bump(); // opening quote
        let mut out = String::new();
        loop {
            match self.bump() {
                None => {
                    return Err(DslError::syntax(open_line, 0, "unterminated string"));
                }
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('r') => out.push('\r'),
                    Some('t') => out.push('\t'),
                    other => {
                        return Err(self.err(format!("unknown escape {:?}", other)));
                    }
                },
                Some('\r') => {}
                Some(ch) => out.push(ch),
            }
        }
    }

    fn scan_list(&mut self) -> Result<Tok, DslError> {
        self.bump(); // '['
        let mut items = Vec::new();
        let mut elided = false;
        loop {
            while matches!(self.peek(), Some(' ') | Some(',')) {
                self.bump();
            }
            match self.peek() {
                None | Some('\n') | Some('\r') => {
                    return Err(self.err("unterminated list"));
                }
                Some(']') => {
                    self.bump();
                    break;
                }
                Some(_) => {
                    let mut chunk = String::new();
                    while let Some(ch) = self.peek() {
                        if ch == ',' || ch == ']' || ch == ' ' || ch == '\n' || ch == '\r' {
                            break;
                        }
                        chunk.push(ch);
                        self.bump();
                    }
                    if chunk == "..." {
                        elided = true;
                    } else if chunk.contains('.') {
                        let d: f64 = chunk
                            .parse()
                            .map_err(|_| self.err(format!("bad list element {:?}", chunk)))?;
                        items.push(NumLit::Dec(d));
                    } else {
                        let i: i64 = chunk
                            .parse()
                            .map_err(|_| self.err(format!("bad list element {:?}", chunk)))?;
                        items.push(NumLit::Int(i));
                    }
                }
            }
        }
        if elided {
            Ok(Tok::ElidedList)
        } else {
            Ok(Tok::List(items))
        }
    }

    fn scan_ref(&mut self) -> Result<String, DslError> {
        self.bump(); // '<'
        let mut out = String::new();
        loop {
            match self.peek() {
                None | Some('\n') | Some('\r') => {
                    return Err(self.err("unterminated `<...>` reference"));
                }
                Some('>') => {
                    self.bump();
                    return Ok(out);
                }
                Some(ch) => {
                    out.push(ch);
                    self.bump();
                }
            }
        }
    }

    /// Addresses run to the next whitespace outside quotes, so quoted pins
    /// like `@jonny:mydata:"^1.0"` stay in one token.
    fn scan_address(&mut self) -> String {
        let mut out = String::new();
        let mut in_quotes = false;
        while let Some(ch) = self.peek() {
            match ch {
                '"' => in_quotes = !in_quotes,
                ' ' | '\n' | '\r' if !in_quotes => break,
                _ => {}
            }
            out.push(ch);
            self.bump();
        }
        out
    }

    fn scan_word(&mut self) -> String {
        let mut out = String::new();
        while let Some(ch) = self.peek() {
            if ch.is_whitespace() {
                break;
            }
            out.push(ch);
            self.bump();
        }
        out
    }
}

fn classify_word(word: &str, line: usize) -> Result<Tok, DslError> {
    if word == "..." {
        return Ok(Tok::Elision);
    }
    if let Some(rest) = word.strip_prefix('.') {
        if !rest.is_empty() && !rest.chars().next().unwrap().is_ascii_digit() {
            let segments: Vec<String> = rest
                .split(|c| c == '.' || c == ':')
                .map(str::to_string)
                .collect();
            for seg in &segments {
                if !valid_token(seg) {
                    return Err(DslError::syntax(
                        line,
                        0,
                        format!("bad path segment {:?} in {:?}", seg, word),
                    ));
                }
            }
            return Ok(Tok::Dotted(segments));
        }
    }
    if let Ok(i) = word.parse::<i64>() {
        return Ok(Tok::Int(i));
    }
    if looks_decimal(word) {
        if let Ok(d) = word.parse::<f64>() {
            return Ok(Tok::Dec(d));
        }
    }
    if word.len() >= 2 && word.starts_with('v') && word.as_bytes()[1].is_ascii_digit() {
        if let Ok(v) = Version::parse(&word[1..]) {
            return Ok(Tok::VersionLit(v));
        }
    }
    Ok(Tok::Word(word.to_string()))
}

fn looks_decimal(word: &str) -> bool {
    let body = word.strip_prefix('-').unwrap_or(word);
    let mut dots = 0;
    let mut digits = 0;
    for ch in body.chars() {
        if ch == '.' {
            dots += 1;
        } else if ch.is_ascii_digit() {
            digits += 1;
        } else {
            return false;
        }
    }
    dots == 1 && digits >= 2 && !body.starts_with('.') && !body.ends_with('.')
}

fn parse_decl_name(inner: &str, line: usize) -> Result<DeclName, DslError> {
    if let Some(rest) = inner.strip_prefix('#') {
        if rest.is_empty() {
            return Err(DslError::syntax(line, 0, "empty declaration name"));
        }
        let segments: Vec<String> = rest
            .split(|c| c == ':' || c == '.')
            .map(str::to_string)
            .collect();
        for seg in &segments {
            if !valid_token(seg) {
                return Err(DslError::syntax(
                    line,
                    0,
                    format!("bad declaration name segment {:?}", seg),
                ));
            }
        }
        Ok(DeclName::Local(segments))
    } else if inner.starts_with('@') {
        let normalized = inner.replacen('#', ":", 1);
        let raw = RawAddress::parse(&normalized)
            .map_err(|e| DslError::syntax(line, 0, e.to_string()))?;
        Ok(DeclName::Absolute(raw))
    } else {
        Err(DslError::syntax(
            line,
            0,
            format!("declaration name must start with `#` or `@`, got {:?}", inner),
        ))
    }
}

/// An address object may carry a commit suffix: `@peer:path@<64 hex>`.
fn parse_addr_object(text: &str, line: usize) -> Result<ObjectExpr, DslError> {
    if let Some(at) = text[1..].rfind('@') {
        let (addr_part, commit_part) = (&text[..at + 1], &text[at + 2..]);
        if let Some(commit) = CommitId::parse(commit_part) {
            let raw = RawAddress::parse(addr_part)
                .map_err(|e| DslError::syntax(line, 0, e.to_string()))?;
            return Ok(ObjectExpr::AddrAt(raw, commit));
        }
    }
    let raw = RawAddress::parse(text).map_err(|e| DslError::syntax(line, 0, e.to_string()))?;
    Ok(ObjectExpr::Addr(raw))
}

/// Converts object-position tokens. `Ok(None)` means the statement carried an
/// elision and should be dropped.
fn parse_objects(toks: &[Tok], line: usize) -> Result<Option<Vec<ObjectExpr>>, DslError> {
    let mut out = Vec::new();
    for tok in toks {
        match tok {
            Tok::Elision | Tok::ElidedList => return Ok(None),
            Tok::Word(w) => {
                if let Some(blob) = w.strip_prefix("blob:").and_then(|_| BlobRef::parse(w)) {
                    out.push(ObjectExpr::Blob(blob));
                } else {
                    out.push(ObjectExpr::Token(w.clone()));
                }
            }
            Tok::Addr(s) => out.push(parse_addr_object(s, line)?),
            Tok::Ref(inner) => out.push(ObjectExpr::Ref(parse_decl_name(inner, line)?)),
            Tok::Str(s) => out.push(ObjectExpr::Str(s.clone())),
            Tok::Pair(k, v) => out.push(ObjectExpr::Pair(k.clone(), v.clone())),
            Tok::Int(i) => out.push(ObjectExpr::Int(*i)),
            Tok::Dec(d) => out.push(ObjectExpr::Dec(*d)),
            Tok::VersionLit(v) => out.push(ObjectExpr::Version(v.clone())),
            Tok::List(items) => out.push(ObjectExpr::List(items.clone())),
            Tok::Dotted(_) => {
                return Err(DslError::syntax(line, 0, "dotted path in object position"));
            }
            Tok::PrefixKeyword => {
                return Err(DslError::syntax(line, 0, "`#prefix` is only valid at top level"));
            }
        }
    }
    Ok(Some(out))
}

/// `had_child_lines` is about the source, not the built items: a statement
/// head whose children were all elided must stay a statement, not degrade to
/// a bare value.
fn classify_line(
    ln: &LineToks,
    children: Vec<Item>,
    had_child_lines: bool,
) -> Result<Option<Item>, DslError> {
    let line = ln.line;
    let first = &ln.toks[0];
    let rest = &ln.toks[1..];
    let leaf = !had_child_lines;

    let stmt = |pred: PredPath, objects, children| {
        Ok(Some(Item::Stmt(Statement { pred, objects, children, line })))
    };

    match first {
        Tok::PrefixKeyword => {
            Err(DslError::syntax(line, 0, "`#prefix` is only valid at top level"))
        }
        Tok::Elision => {
            if rest.is_empty() && leaf {
                Ok(None)
            } else {
                Err(DslError::syntax(line, 0, "`...` must stand alone"))
            }
        }
        Tok::Word(w) if w == "a" || w == "extends" => {
            if rest.is_empty() {
                return Err(DslError::syntax(line, 0, format!("`{w}` requires an object")));
            }
            let pred = if w == "a" { PredPath::Type } else { PredPath::Extends };
            match parse_objects(rest, line)? {
                Some(objects) => stmt(pred, objects, children),
                None => Ok(None),
            }
        }
        Tok::Word(w) => {
            if rest.is_empty() && leaf {
                let expr = if let Some(blob) = w.strip_prefix("blob:").and_then(|_| BlobRef::parse(w))
                {
                    ObjectExpr::Blob(blob)
                } else {
                    ObjectExpr::Token(w.clone())
                };
                return Ok(Some(Item::Value { expr, line }));
            }
            let segments: Vec<String> = w.split(':').map(str::to_string).collect();
            for seg in &segments {
                if !valid_token(seg) {
                    return Err(DslError::syntax(
                        line,
                        0,
                        format!("bad predicate segment {:?} in {:?}", seg, w),
                    ));
                }
            }
            match parse_objects(rest, line)? {
                Some(objects) => stmt(PredPath::Tokens(segments), objects, children),
                None => Ok(None),
            }
        }
        Tok::Dotted(segments) => match parse_objects(rest, line)? {
            Some(objects) => stmt(PredPath::Dotted(segments.clone()), objects, children),
            None => Ok(None),
        },
        Tok::Addr(s) => {
            if rest.is_empty() && leaf {
                return Ok(Some(Item::Value { expr: parse_addr_object(s, line)?, line }));
            }
            let raw =
                RawAddress::parse(s).map_err(|e| DslError::syntax(line, 0, e.to_string()))?;
            if rest.is_empty() {
                Ok(Some(Item::Context { addr: raw, body: children, line }))
            } else {
                match parse_objects(rest, line)? {
                    Some(objects) => stmt(PredPath::Addr(raw), objects, children),
                    None => Ok(None),
                }
            }
        }
        Tok::ElidedList => Ok(None),
        Tok::Str(_) | Tok::Pair(_, _) | Tok::Int(_) | Tok::Dec(_) | Tok::VersionLit(_)
        | Tok::List(_) | Tok::Ref(_) => {
            if !rest.is_empty() || !leaf {
                return Err(DslError::syntax(
                    line,
                    0,
                    "a literal value must stand alone on its line",
                ));
            }
            let exprs = parse_objects(std::slice::from_ref(first), line)?;
            match exprs {
                Some(mut v) => {
                    let expr = v.remove(0);
                    Ok(Some(Item::Value { expr, line }))
                }
                None => Ok(None),
            }
        }
    }
}

/// Builds the items of one block. `lines[*i]` must be the first line of the
/// block; its indent defines the block. Returns when a shallower line (or the
/// end of input) is reached.
fn build_block(lines: &[LineToks], i: &mut usize, block_indent: usize) -> Result<Vec<Item>, DslError> {
    let mut items = Vec::new();
    while *i < lines.len() {
        let ln = &lines[*i];
        if ln.indent < block_indent {
            break;
        }
        if ln.indent > block_indent {
            return Err(DslError::syntax(
                ln.line,
                ln.indent,
                "unexpected indent: no statement to nest under",
            ));
        }
        *i += 1;
        let mut children = Vec::new();
        let mut had_child_lines = false;
        if *i < lines.len() && lines[*i].indent > block_indent {
            let child = &lines[*i];
            if child.indent < block_indent + 2 {
                return Err(DslError::syntax(
                    child.line,
                    child.indent,
                    "nested lines must be indented by at least two more spaces",
                ));
            }
            had_child_lines = true;
            children = build_block(lines, i, child.indent)?;
        }
        if had_child_lines {
            if let Tok::Str(_) | Tok::Pair(_, _) | Tok::Int(_) | Tok::Dec(_)
            | Tok::VersionLit(_) | Tok::List(_) | Tok::Ref(_) = ln.toks[0]
            {
                if ln.toks.len() == 1 {
                    return Err(DslError::syntax(ln.line, 0, "a value line cannot have children"));
                }
            }
        }
        if let Some(item) = classify_line(ln, children, had_child_lines)? {
            items.push(item);
        }
    }
    Ok(items)
}

fn assemble(lines: &[LineToks]) -> Result<Document, DslError> {
    let mut doc = Document::default();
    let mut i = 0usize;
    while i < lines.len() {
        let ln = &lines[i];
        if ln.indent != 0 {
            return Err(DslError::syntax(
                ln.line,
                ln.indent,
                "expected a declaration or directive at top level",
            ));
        }
        match &ln.toks[0] {
            Tok::PrefixKeyword => {
                if !doc.decls.is_empty() {
                    return Err(DslError::syntax(
                        ln.line,
                        0,
                        "#prefix directives must precede declarations",
                    ));
                }
                let (alias, target) = match &ln.toks[1..] {
                    [Tok::Word(alias), Tok::Addr(addr)] => (alias.clone(), addr.clone()),
                    _ => {
                        return Err(DslError::syntax(
                            ln.line,
                            0,
                            "usage: #prefix <alias> <@address>",
                        ))
                    }
                };
                if !valid_token(&alias) {
                    return Err(DslError::syntax(ln.line, 0, format!("bad alias {:?}", alias)));
                }
                if doc.prefixes.iter().any(|(a, _)| *a == alias) {
                    return Err(DslError::DuplicatePrefix { line: ln.line, alias });
                }
                let raw = RawAddress::parse(&target)
                    .map_err(|e| DslError::syntax(ln.line, 0, e.to_string()))?;
                doc.prefixes.push((alias, raw));
                i += 1;
            }
            Tok::Addr(s) if s == "@base" => {
                let addr = match &ln.toks[1..] {
                    [Tok::Addr(target)] => RawAddress::parse(target)
                        .map_err(|e| DslError::syntax(ln.line, 0, e.to_string()))?,
                    _ => {
                        return Err(DslError::syntax(ln.line, 0, "usage: @base <@address>"));
                    }
                };
                doc.bases.push(BaseDirective {
                    addr,
                    before_decl: doc.decls.len(),
                    line: ln.line,
                });
                i += 1;
            }
            Tok::Ref(inner) if ln.toks.len() == 1 => {
                let name = parse_decl_name(inner, ln.line)?;
                let header_line = ln.line;
                i += 1;
                let mut body = Vec::new();
                if i < lines.len() && lines[i].indent > 0 {
                    let child = &lines[i];
                    if child.indent < 2 {
                        return Err(DslError::syntax(
                            child.line,
                            child.indent,
                            "declaration bodies must be indented by at least two spaces",
                        ));
                    }
                    body = build_block(lines, &mut i, child.indent)?;
                }
                doc.decls.push(Decl { name, body, line: header_line });
            }
            _ => {
                return Err(DslError::syntax(
                    ln.line,
                    0,
                    "expected a declaration header like `<#name>`",
                ));
            }
        }
    }
    Ok(doc)
}
