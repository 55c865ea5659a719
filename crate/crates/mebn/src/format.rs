//! Text formats: `.mtheory` theory files, `.mev` evidence files and query
//! target expressions.
//!
//! The grammar is line oriented. `#` starts a comment. Blocks (`types`,
//! `entities`, `mfrag`) are closed by `end`; inside an MFrag, section
//! headers (`context:`, `input:`, `resident:`, `graph:`, `recursion:`,
//! `local Term:`) switch what the following lines mean. See the README for
//! a complete example.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use mebn_core::ldl::{Atom, Clause, Cmp, Dist, Guard, LocalExpr, Pattern, ProbTerm, Rational};
use mebn_core::model::{
    Arg, EntityDecl, Evidence, Finding, Formula, Ident, LocalDef, MFrag, MTheory, Operand, RvInstance, RvTemplate,
    RvTerm, TypeDecl, TypeName, ValueRange,
};

/// Source text plus where it came from.
#[derive(Debug, Clone)]
pub struct SourceText {
    pub content: String,
    pub origin: String,
}

impl SourceText {
    pub fn new(origin: impl Into<String>, content: impl Into<String>) -> Self {
        SourceText { content: content.into().replace("\r\n", "\n"), origin: origin.into() }
    }
}

/// Byte range in the source plus the 1-based line and column of its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub severity: Severity,
    pub message: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostics {
    pub origin: String,
    pub items: Vec<ParseDiagnostic>,
}

impl fmt::Display for ParseDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.items.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}:{}:{}: error: {}", self.origin, d.span.line, d.span.column, d.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseDiagnostics {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Ident(String),
    Num(String),
    Sym(&'static str),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(s) | Tok::Ident(s) | Tok::Num(s) => f.write_str(s),
            Tok::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    start: usize,
    end: usize,
}

/// One logical line: its tokens and the byte range it covers.
struct Line {
    tokens: Vec<Token>,
    start: usize,
    end: usize,
}

struct Source<'a> {
    text: &'a str,
    line_starts: Vec<usize>,
}

impl<'a> Source<'a> {
    fn new(text: &'a str) -> Self {
        let mut line_starts = vec![0];
        line_starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Source { text, line_starts }
    }

    fn span(&self, start: usize, end: usize) -> Span {
        let start = start.min(self.text.len());
        let end = end.clamp(start, self.text.len());
        let line = self.line_starts.partition_point(|&s| s <= start);
        let col = self.text[self.line_starts[line - 1]..start].chars().count() + 1;
        Span { start, end, line, column: col }
    }
}

type PResult<T> = Result<T, (String, usize, usize)>;

const SYMS: [&str; 22] =
    ["->", "!=", "<=", ">=", "..", "(", ")", ",", ":", ";", "=", "&", "*", "+", "{", "}", "<", ">", "|", "-", "/", "."];

fn lex_line(text: &str, base: usize) -> PResult<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'#' {
            break;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let word_char = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
        if c == b'!' && i + 1 < bytes.len() && bytes[i + 1] != b'=' {
            i += 1;
            while i < bytes.len() && word_char(bytes[i]) {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(text[start..i].to_string()), start: base + start, end: base + i });
            continue;
        }
        let neg_num = c == b'-' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if c.is_ascii_digit() || neg_num {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i + 1 < bytes.len() && bytes[i] == b'/' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            out.push(Token { tok: Tok::Num(text[start..i].to_string()), start: base + start, end: base + i });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && word_char(bytes[i]) {
                i += 1;
            }
            out.push(Token { tok: Tok::Word(text[start..i].to_string()), start: base + start, end: base + i });
            continue;
        }
        match SYMS.iter().find(|s| text[i..].starts_with(**s)) {
            Some(s) => {
                i += s.len();
                out.push(Token { tok: Tok::Sym(s), start: base + start, end: base + i });
            }
            None => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err((format!("unexpected character `{ch}`"), base + i, base + i + ch.len_utf8()));
            }
        }
    }
    Ok(out)
}

fn is_upper(s: &str) -> bool {
    s.chars().next().is_some_and(|c| c.is_ascii_uppercase())
}

fn is_lower(s: &str) -> bool {
    s.chars().next().is_some_and(|c| c.is_ascii_lowercase())
}

const FORMULA_KEYWORDS: [&str; 8] = ["not", "and", "or", "implies", "iff", "eq", "forall", "exists"];

/// Cursor over one line's tokens.
struct Cursor<'t> {
    toks: &'t [Token],
    pos: usize,
    /// Byte offset just past the line, for end-of-line diagnostics.
    eol: usize,
    /// RV names referenced, with their spans, for later resolution.
    refs: Vec<(String, usize, usize)>,
}

impl<'t> Cursor<'t> {
    fn new(toks: &'t [Token], eol: usize) -> Self {
        Cursor { toks, pos: 0, eol, refs: Vec::new() }
    }

    fn peek(&self) -> Option<&'t Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn peek_at(&self, k: usize) -> Option<&'t Tok> {
        self.toks.get(self.pos + k).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or((self.eol, self.eol), |t| (t.start, t.end))
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let (s, e) = self.here();
        Err((msg.into(), s, e))
    }

    fn found(&self) -> String {
        self.peek().map_or_else(|| String::from("end of line"), |t| format!("`{t}`"))
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn at_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(x)) if x == w)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.at_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`, found {}", self.found()))
        }
    }

    fn expect_word(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                self.pos += 1;
                Ok(w.clone())
            }
            _ => self.err(format!("expected {what}, found {}", self.found())),
        }
    }

    fn expect_upper(&mut self, what: &str) -> PResult<String> {
        let w = self.expect_word(what)?;
        if !is_upper(&w) {
            self.pos -= 1;
            return self.err(format!("{what} must start with an uppercase letter, found `{w}`"));
        }
        Ok(w)
    }

    fn expect_var(&mut self) -> PResult<String> {
        let w = self.expect_word("a variable")?;
        if !is_lower(&w) || FORMULA_KEYWORDS.contains(&w.as_str()) {
            self.pos -= 1;
            return self.err(format!("expected a lowercase variable, found `{w}`"));
        }
        Ok(w)
    }

    fn expect_ident(&mut self) -> PResult<Ident> {
        match self.peek() {
            Some(Tok::Ident(s)) => match Ident::new(s) {
                Ok(id) => {
                    self.pos += 1;
                    Ok(id)
                }
                Err(_) => self.err(format!("invalid identifier `{s}` (expected `!` followed by A-Z or 0-9)")),
            },
            _ => self.err(format!("expected an identifier, found {}", self.found())),
        }
    }

    fn expect_u64(&mut self) -> PResult<u64> {
        match self.peek() {
            Some(Tok::Num(n)) => match n.parse() {
                Ok(v) => {
                    self.pos += 1;
                    Ok(v)
                }
                Err(_) => self.err(format!("expected a non-negative integer, found `{n}`")),
            },
            _ => self.err(format!("expected an integer, found {}", self.found())),
        }
    }

    fn expect_rational(&mut self) -> PResult<Rational> {
        match self.peek() {
            Some(Tok::Num(n)) => match Rational::parse(n) {
                Some(r) => {
                    self.pos += 1;
                    Ok(r)
                }
                None => self.err(format!("malformed number `{n}`")),
            },
            _ => self.err(format!("expected a number, found {}", self.found())),
        }
    }

    /// A state or value name: an uppercase word or an identifier.
    fn expect_value(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Word(w)) if is_upper(w) => {
                self.pos += 1;
                Ok(w.clone())
            }
            Some(Tok::Ident(_)) => Ok(self.expect_ident()?.as_str().to_string()),
            _ => self.err(format!("expected a state name, found {}", self.found())),
        }
    }

    fn expect_end(&self) -> PResult<()> {
        if self.pos < self.toks.len() {
            self.err(format!("unexpected {} at end of line", self.found()))
        } else {
            Ok(())
        }
    }

    fn term(&mut self) -> PResult<RvTerm> {
        let (s, e) = self.here();
        let name = self.expect_upper("an RV name")?;
        if name == "Isa" || name == "Prev" {
            self.pos -= 1;
            return self.err(format!("`{name}` is reserved"));
        }
        self.refs.push((name.clone(), s, e));
        self.expect_sym("(")?;
        let mut args = Vec::new();
        if !self.eat_sym(")") {
            loop {
                args.push(self.arg()?);
                if self.eat_sym(")") {
                    break;
                }
                self.expect_sym(",")?;
            }
        }
        Ok(RvTerm { name, args })
    }

    fn arg(&mut self) -> PResult<Arg> {
        match (self.peek(), self.peek_at(1)) {
            (Some(Tok::Ident(_)), _) => Ok(Arg::Ident(self.expect_ident()?)),
            (Some(Tok::Word(w)), Some(Tok::Sym("("))) if w == "Prev" => {
                self.pos += 2;
                let v = self.expect_var()?;
                self.expect_sym(")")?;
                Ok(Arg::Prev(v))
            }
            (Some(Tok::Word(w)), Some(Tok::Sym("("))) if is_upper(w) => Ok(Arg::Term(Box::new(self.term()?))),
            (Some(Tok::Word(_)), _) => Ok(Arg::Var(self.expect_var()?)),
            _ => self.err(format!("expected an argument, found {}", self.found())),
        }
    }

    fn operand(&mut self) -> PResult<Operand> {
        match (self.peek(), self.peek_at(1)) {
            (Some(Tok::Ident(_)), _) => Ok(Operand::Ident(self.expect_ident()?)),
            (Some(Tok::Word(w)), Some(Tok::Sym("("))) if is_upper(w) => Ok(Operand::Term(self.term()?)),
            (Some(Tok::Word(w)), _) if is_upper(w) => {
                self.pos += 1;
                Ok(Operand::Const(w.clone()))
            }
            (Some(Tok::Word(_)), _) => Ok(Operand::Var(self.expect_var()?)),
            _ => self.err(format!("expected a term, variable, identifier or state, found {}", self.found())),
        }
    }

    fn formula(&mut self) -> PResult<Formula> {
        if let (Some(Tok::Word(w)), Some(Tok::Sym("("))) = (self.peek(), self.peek_at(1)) {
            let w = w.clone();
            match w.as_str() {
                "not" => {
                    self.pos += 2;
                    let x = self.formula()?;
                    self.expect_sym(")")?;
                    return Ok(Formula::Not(Box::new(x)));
                }
                "and" | "or" | "implies" | "iff" => {
                    self.pos += 2;
                    let a = Box::new(self.formula()?);
                    self.expect_sym(",")?;
                    let b = Box::new(self.formula()?);
                    self.expect_sym(")")?;
                    return Ok(match w.as_str() {
                        "and" => Formula::And(a, b),
                        "or" => Formula::Or(a, b),
                        "implies" => Formula::Implies(a, b),
                        _ => Formula::Iff(a, b),
                    });
                }
                "eq" => {
                    self.pos += 2;
                    let a = self.operand()?;
                    self.expect_sym(",")?;
                    let b = self.operand()?;
                    self.expect_sym(")")?;
                    return Ok(Formula::Eq(a, b));
                }
                "forall" | "exists" => {
                    self.pos += 2;
                    let v = self.expect_var()?;
                    self.expect_sym(":")?;
                    let ty = TypeName::new(&self.expect_upper("a type name")?);
                    self.expect_sym(",")?;
                    let body = Box::new(self.formula()?);
                    self.expect_sym(")")?;
                    return Ok(if w == "forall" { Formula::ForAll(v, ty, body) } else { Formula::Exists(v, ty, body) });
                }
                "Isa" => {
                    self.pos += 2;
                    let ty = TypeName::new(&self.expect_upper("a type name")?);
                    self.expect_sym(",")?;
                    let a = self.arg()?;
                    self.expect_sym(")")?;
                    return Ok(Formula::Isa(ty, a));
                }
                _ => {}
            }
        }
        let lhs = self.operand()?;
        if self.eat_sym("=") {
            let rhs = self.operand()?;
            return Ok(Formula::Eq(lhs, rhs));
        }
        if self.eat_sym("!=") {
            let rhs = self.operand()?;
            return Ok(Formula::Not(Box::new(Formula::Eq(lhs, rhs))));
        }
        match lhs {
            Operand::Term(t) => Ok(Formula::Rv(t)),
            other => self.err(format!("`{other}` is not a formula; expected an RV term or a comparison")),
        }
    }

    fn pattern(&mut self) -> PResult<Pattern> {
        if self.eat_sym("*") {
            return Ok(Pattern::default());
        }
        let mut atoms = Vec::new();
        loop {
            let term = self.term()?;
            self.expect_sym("=")?;
            let value = self.expect_value()?;
            atoms.push(Atom { term, value });
            if !self.eat_sym("&") {
                break;
            }
        }
        Ok(Pattern { atoms })
    }

    fn guard(&mut self) -> PResult<Guard> {
        let mut g = self.guard_and()?;
        while self.at_word("or") {
            self.pos += 1;
            g = Guard::Or(Box::new(g), Box::new(self.guard_and()?));
        }
        Ok(g)
    }

    fn guard_and(&mut self) -> PResult<Guard> {
        let mut g = self.guard_unary()?;
        while self.at_word("and") {
            self.pos += 1;
            g = Guard::And(Box::new(g), Box::new(self.guard_unary()?));
        }
        Ok(g)
    }

    fn guard_unary(&mut self) -> PResult<Guard> {
        if self.at_word("not") {
            self.pos += 1;
            return Ok(Guard::Not(Box::new(self.guard_unary()?)));
        }
        if self.eat_sym("(") {
            let g = self.guard()?;
            self.expect_sym(")")?;
            return Ok(g);
        }
        if !self.at_word("count") {
            return self.err(format!("expected `count(...)`, `not` or `(`, found {}", self.found()));
        }
        self.pos += 1;
        self.expect_sym("(")?;
        let pattern = self.pattern()?;
        self.expect_sym(")")?;
        let cmp = match self.peek() {
            Some(Tok::Sym("=")) => Cmp::Eq,
            Some(Tok::Sym("!=")) => Cmp::Ne,
            Some(Tok::Sym("<")) => Cmp::Lt,
            Some(Tok::Sym("<=")) => Cmp::Le,
            Some(Tok::Sym(">")) => Cmp::Gt,
            Some(Tok::Sym(">=")) => Cmp::Ge,
            _ => return self.err(format!("expected a comparison, found {}", self.found())),
        };
        self.pos += 1;
        let k = self.expect_u64()?;
        Ok(Guard::Count { pattern, cmp, k })
    }

    fn prob(&mut self) -> PResult<ProbTerm> {
        if self.eat_sym("*") {
            return Ok(ProbTerm::Rest);
        }
        if self.at_word("min") {
            self.pos += 1;
            self.expect_sym("(")?;
            let cap = self.expect_rational()?;
            self.expect_sym(",")?;
            let base = self.expect_rational()?;
            self.expect_sym("+")?;
            let slope = self.expect_rational()?;
            self.expect_sym("*")?;
            if !self.at_word("sat") {
                return self.err(format!("expected `sat`, found {}", self.found()));
            }
            self.pos += 1;
            self.expect_sym("(")?;
            let pattern = self.pattern()?;
            self.expect_sym(",")?;
            let bound = self.expect_u64()?;
            self.expect_sym(")")?;
            self.expect_sym(")")?;
            return Ok(ProbTerm::Saturating { cap, base, slope, pattern, bound });
        }
        Ok(ProbTerm::Const(self.expect_rational()?))
    }

    fn dist(&mut self) -> PResult<Dist> {
        if self.at_word("uniform") {
            self.pos += 1;
            return Ok(Dist::Uniform);
        }
        let mut entries = Vec::new();
        loop {
            let s = self.expect_value()?;
            self.expect_sym("=")?;
            entries.push((s, self.prob()?));
            if !self.eat_sym(";") {
                break;
            }
        }
        Ok(Dist::Table(entries))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Context,
    Input,
    Resident,
    Graph,
}

/// In-progress `local` block.
struct LocalState {
    resident: RvTerm,
    clauses: Vec<Clause>,
    default: Option<Dist>,
    /// Guard (None for `else`) waiting for its distribution line.
    pending: Option<Option<Guard>>,
    span: (usize, usize),
}

struct MFragState {
    frag: MFrag,
    section: Section,
    local: Option<LocalState>,
    span: (usize, usize),
}

enum Block {
    Top,
    Types,
    Entities,
    MFrag(Box<MFragState>),
}

struct Parser<'a> {
    src: Source<'a>,
    diags: Vec<ParseDiagnostic>,
    refs: Vec<(String, usize, usize)>,
}

impl<'a> Parser<'a> {
    fn diag(&mut self, msg: impl Into<String>, start: usize, end: usize) {
        let span = self.src.span(start, end);
        self.diags.push(ParseDiagnostic { severity: Severity::Error, message: msg.into(), span });
    }

    fn lines(&mut self) -> Vec<Line> {
        let text = self.src.text;
        let mut out = Vec::new();
        let mut offset = 0;
        for raw in text.split('\n') {
            match lex_line(raw, offset) {
                Ok(tokens) if !tokens.is_empty() => out.push(Line { tokens, start: offset, end: offset + raw.len() }),
                Ok(_) => {}
                Err((m, s, e)) => self.diag(m, s, e),
            }
            offset += raw.len() + 1;
        }
        out
    }

    fn run<T>(&mut self, line: &Line, f: impl FnOnce(&mut Cursor) -> PResult<T>) -> Option<T> {
        let mut c = Cursor::new(&line.tokens, line.end);
        let r = f(&mut c).and_then(|v| c.expect_end().map(|_| v));
        match r {
            Ok(v) => {
                self.refs.extend(c.refs);
                Some(v)
            }
            Err((m, s, e)) => {
                self.diag(m, s, e);
                None
            }
        }
    }
}

fn header_word(line: &Line) -> Option<&str> {
    match line.tokens.first().map(|t| &t.tok) {
        Some(Tok::Word(w)) => Some(w.as_str()),
        _ => None,
    }
}

fn is_section_header(line: &Line, name: &str) -> bool {
    line.tokens.len() == 2 && header_word(line) == Some(name) && line.tokens[1].tok == Tok::Sym(":")
}

fn finish_local(p: &mut Parser, st: &mut MFragState) {
    let Some(l) = st.local.take() else { return };
    if l.pending.is_some() {
        p.diag("clause header without a distribution line", l.span.0, l.span.1);
        return;
    }
    match l.default {
        Some(default) => {
            st.frag.locals.push(LocalDef { resident: l.resident, expr: LocalExpr { clauses: l.clauses, default } })
        }
        None => p.diag("local distribution has no `else:` clause", l.span.0, l.span.1),
    }
}

/// Expands `!T0..!T3` style ranges: both ends share a prefix and differ
/// in a trailing decimal number.
fn expand_range(a: &Ident, b: &Ident) -> Option<Vec<Ident>> {
    let split = |s: &str| {
        let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (p, n) = s.split_at(s.len() - digits);
        Some((p.to_string(), n.parse::<u64>().ok()?, n.len()))
    };
    let (pa, na, wa) = split(a.as_str())?;
    let (pb, nb, _) = split(b.as_str())?;
    if pa != pb || nb < na || nb - na > 100_000 {
        return None;
    }
    (na..=nb).map(|n| Ident::new(&format!("{pa}{n:0wa$}")).ok()).collect()
}

fn entity_line(c: &mut Cursor) -> PResult<EntityDecl> {
    let ty = TypeName::new(&c.expect_upper("a type name")?);
    c.expect_sym(":")?;
    let mut ids = Vec::new();
    while c.peek().is_some() {
        let (s, _) = c.here();
        let a = c.expect_ident()?;
        if c.eat_sym("..") {
            let b = c.expect_ident()?;
            let e = c.toks[c.pos - 1].end;
            match expand_range(&a, &b) {
                Some(r) => ids.extend(r),
                None => return Err((format!("`{a}..{b}` is not a valid identifier range"), s, e)),
            }
        } else {
            ids.push(a);
        }
    }
    Ok(EntityDecl { ty, ids })
}

fn rv_line(c: &mut Cursor) -> PResult<RvTemplate> {
    c.pos += 1; // `rv`
    let name = c.expect_upper("an RV name")?;
    c.expect_sym("(")?;
    let mut params = Vec::new();
    if !c.eat_sym(")") {
        loop {
            let v = c.expect_var()?;
            c.expect_sym(":")?;
            params.push((v, TypeName::new(&c.expect_upper("a type name")?)));
            if c.eat_sym(")") {
                break;
            }
            c.expect_sym(",")?;
        }
    }
    c.expect_sym(":")?;
    let range = if c.eat_sym("{") {
        let mut states = Vec::new();
        loop {
            states.push(c.expect_upper("a state name")?);
            if c.eat_sym("}") {
                break;
            }
            c.expect_sym(",")?;
        }
        ValueRange::Enumerated(states)
    } else {
        let w = c.expect_upper("`Bool`, `{...}` or a type name")?;
        if w == "Bool" {
            ValueRange::Boolean
        } else {
            ValueRange::Entities(TypeName::new(&w))
        }
    };
    Ok(RvTemplate { name, params, range })
}

fn mfrag_line(p: &mut Parser, st: &mut MFragState, line: &Line) {
    // A pending clause header takes the next line as its distribution.
    if let Some(l) = st.local.as_mut() {
        if let Some(guard) = l.pending.take() {
            let Some(dist) = p.run(line, |c| c.dist()) else {
                return;
            };
            let l = st.local.as_mut().expect("local");
            match guard {
                Some(guard) => l.clauses.push(Clause { guard, dist }),
                None => l.default = Some(dist),
            }
            return;
        }
    }
    for (name, sec) in [
        ("context", Section::Context),
        ("input", Section::Input),
        ("resident", Section::Resident),
        ("graph", Section::Graph),
    ] {
        if is_section_header(line, name) {
            finish_local(p, st);
            st.section = sec;
            return;
        }
    }
    let first = &line.tokens[0];
    match header_word(line) {
        Some("recursion") if matches!(line.tokens.get(1).map(|t| &t.tok), Some(Tok::Sym(":"))) => {
            finish_local(p, st);
            st.section = Section::None;
            if st.frag.recursion.is_some() {
                p.diag("duplicate `recursion:` line", first.start, first.end);
            }
            if let Some(v) = p.run(line, |c| {
                c.pos = 2;
                c.expect_var()
            }) {
                st.frag.recursion = Some(v);
            }
            return;
        }
        Some("local") => {
            finish_local(p, st);
            st.section = Section::None;
            if let Some(resident) = p.run(line, |c| {
                c.pos = 1;
                let t = c.term()?;
                c.expect_sym(":")?;
                Ok(t)
            }) {
                st.local = Some(LocalState {
                    resident,
                    clauses: Vec::new(),
                    default: None,
                    pending: None,
                    span: (first.start, line.end),
                });
            }
            return;
        }
        _ => {}
    }
    if st.local.is_some() {
        let kw = header_word(line).unwrap_or("");
        let started = st.local.as_ref().is_some_and(|l| !l.clauses.is_empty());
        let has_default = st.local.as_ref().is_some_and(|l| l.default.is_some());
        let header: Option<Option<Guard>> = match kw {
            _ if has_default => {
                p.diag("clause after `else:`", first.start, first.end);
                return;
            }
            "if" if started => {
                p.diag("`if` must be the first clause; use `elif`", first.start, first.end);
                return;
            }
            "elif" if !started => {
                p.diag("`elif` without a preceding `if`", first.start, first.end);
                return;
            }
            "if" | "elif" => p
                .run(line, |c| {
                    c.pos = 1;
                    let g = c.guard()?;
                    c.expect_sym(":")?;
                    Ok(g)
                })
                .map(Some),
            "else" => p
                .run(line, |c| {
                    c.pos = 1;
                    c.expect_sym(":")
                })
                .map(|_| None),
            _ => {
                p.diag(
                    format!("expected `if`, `elif` or `else:` in local distribution, found `{}`", first.tok),
                    first.start,
                    first.end,
                );
                return;
            }
        };
        if let Some(h) = header {
            st.local.as_mut().expect("local").pending = Some(h);
        }
        return;
    }
    match st.section {
        Section::None => p.diag(
            format!("expected a section header (`context:`, `input:`, `resident:`, `graph:`, `recursion:`, `local`) or `end`, found `{}`", first.tok),
            first.start,
            first.end,
        ),
        Section::Context => {
            if let Some(f) = p.run(line, |c| c.formula()) {
                st.frag.context.push(f);
            }
        }
        Section::Input => {
            if let Some(t) = p.run(line, |c| c.term()) {
                st.frag.input.push(t);
            }
        }
        Section::Resident => {
            if let Some(t) = p.run(line, |c| c.term()) {
                st.frag.resident.push(t);
            }
        }
        Section::Graph => {
            if let Some(arc) = p.run(line, |c| {
                let a = c.term()?;
                c.expect_sym("->")?;
                Ok((a, c.term()?))
            }) {
                st.frag.arcs.push(arc);
            }
        }
    }
}

/// Parses a `.mtheory` file. Fails with every diagnostic found; never
/// returns a partial theory.
pub fn parse_mtheory(src: &SourceText) -> Result<MTheory, ParseDiagnostics> {
    let mut p = Parser { src: Source::new(&src.content), diags: Vec::new(), refs: Vec::new() };
    let lines = p.lines();
    let mut theory = MTheory {
        name: String::new(),
        types: Vec::new(),
        entities: Vec::new(),
        templates: Vec::new(),
        mfrags: Vec::new(),
    };
    let mut have_name = false;
    let mut block = Block::Top;
    let mut block_start = (0, 0);
    let mut rv_spans: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut mfrag_spans: BTreeMap<String, (usize, usize)> = BTreeMap::new();

    for line in &lines {
        let first = &line.tokens[0];
        let is_end = line.tokens.len() == 1 && header_word(line) == Some("end");
        block = match block {
            Block::Top => match header_word(line) {
                Some("theory") => {
                    if have_name {
                        p.diag("duplicate `theory` line", first.start, first.end);
                    }
                    if let Some(n) = p.run(line, |c| {
                        c.pos = 1;
                        c.expect_upper("a theory name")
                    }) {
                        theory.name = n;
                        have_name = true;
                    }
                    Block::Top
                }
                Some("types") if line.tokens.len() == 1 => {
                    block_start = (first.start, first.end);
                    Block::Types
                }
                Some("entities") if line.tokens.len() == 1 => {
                    block_start = (first.start, first.end);
                    Block::Entities
                }
                Some("rv") => {
                    if let Some(t) = p.run(line, rv_line) {
                        if rv_spans.contains_key(&t.name) {
                            p.diag(format!("duplicate RV declaration `{}`", t.name), first.start, line.end);
                        } else {
                            rv_spans.insert(t.name.clone(), (first.start, line.end));
                        }
                        theory.templates.push(t);
                    }
                    Block::Top
                }
                Some("mfrag") => {
                    block_start = (first.start, line.end);
                    let name = p.run(line, |c| {
                        c.pos = 1;
                        c.expect_upper("an MFrag name")
                    });
                    let name = name.unwrap_or_default();
                    if !name.is_empty() {
                        if mfrag_spans.contains_key(&name) {
                            p.diag(format!("duplicate MFrag name `{name}`"), first.start, line.end);
                        } else {
                            mfrag_spans.insert(name.clone(), (first.start, line.end));
                        }
                    }
                    Block::MFrag(Box::new(MFragState {
                        frag: MFrag {
                            name,
                            context: Vec::new(),
                            input: Vec::new(),
                            resident: Vec::new(),
                            arcs: Vec::new(),
                            recursion: None,
                            locals: Vec::new(),
                        },
                        section: Section::None,
                        local: None,
                        span: (first.start, line.end),
                    }))
                }
                _ => {
                    p.diag(
                        format!("expected `theory`, `types`, `entities`, `rv` or `mfrag`, found `{}`", first.tok),
                        first.start,
                        first.end,
                    );
                    Block::Top
                }
            },
            Block::Types if is_end => Block::Top,
            Block::Types => {
                if let Some(d) = p.run(line, |c| {
                    let name = TypeName::new(&c.expect_upper("a type name")?);
                    let ordered = c.at_word("ordered");
                    if ordered {
                        c.pos += 1;
                    }
                    Ok(TypeDecl { name, ordered })
                }) {
                    theory.types.push(d);
                }
                Block::Types
            }
            Block::Entities if is_end => Block::Top,
            Block::Entities => {
                if let Some(d) = p.run(line, entity_line) {
                    theory.entities.push(d);
                }
                Block::Entities
            }
            Block::MFrag(mut st) if is_end && st.local.as_ref().is_none_or(|l| l.pending.is_none()) => {
                finish_local(&mut p, &mut st);
                theory.mfrags.push(st.frag);
                Block::Top
            }
            Block::MFrag(mut st) => {
                mfrag_line(&mut p, &mut st, line);
                Block::MFrag(st)
            }
        };
    }
    match block {
        Block::Top => {}
        Block::MFrag(st) => p.diag(format!("MFrag `{}` is missing `end`", st.frag.name), st.span.0, st.span.1),
        _ => p.diag("block is missing `end`", block_start.0, block_start.1),
    }
    if !have_name && p.diags.is_empty() {
        p.diag("missing `theory Name` line", 0, 0);
    }
    let known: BTreeSet<&str> = theory.templates.iter().map(|t| t.name.as_str()).collect();
    let unresolved: Vec<(String, usize, usize)> =
        p.refs.iter().filter(|(n, _, _)| !known.contains(n.as_str())).cloned().collect();
    for (n, s, e) in unresolved {
        p.diag(format!("reference to undeclared RV `{n}`"), s, e);
    }
    if p.diags.is_empty() {
        Ok(theory)
    } else {
        p.diags.sort_by_key(|d| d.span.start);
        Err(ParseDiagnostics { origin: src.origin.clone(), items: p.diags })
    }
}

/// Parses an `entities ... end` block on its own (scenario overrides).
pub fn parse_entities(src: &SourceText) -> Result<Vec<EntityDecl>, ParseDiagnostics> {
    let mut p = Parser { src: Source::new(&src.content), diags: Vec::new(), refs: Vec::new() };
    let lines = p.lines();
    let mut out = Vec::new();
    let mut iter = lines.iter();
    let mut closed = false;
    match iter.next() {
        Some(l) if l.tokens.len() == 1 && header_word(l) == Some("entities") => {}
        Some(l) => p.diag("expected `entities`", l.start, l.end),
        None => p.diag("empty entities block", 0, 0),
    }
    for line in iter {
        if closed {
            p.diag("text after `end`", line.start, line.end);
            break;
        }
        if line.tokens.len() == 1 && header_word(line) == Some("end") {
            closed = true;
            continue;
        }
        if let Some(d) = p.run(line, entity_line) {
            out.push(d);
        }
    }
    if !closed && p.diags.is_empty() {
        let n = src.content.len();
        p.diag("entities block is missing `end`", n, n);
    }
    if p.diags.is_empty() {
        Ok(out)
    } else {
        Err(ParseDiagnostics { origin: src.origin.clone(), items: p.diags })
    }
}

/// Parses a closed query expression such as `DangerToSelf(!ST0, !T0)` or
/// `and(Exists(!ST4), not(CloakMode(!ST4)))`.
pub fn parse_formula(text: &str) -> Result<Formula, ParseDiagnostics> {
    let src = SourceText::new("<target>", text);
    let mut p = Parser { src: Source::new(&src.content), diags: Vec::new(), refs: Vec::new() };
    let lines = p.lines();
    match lines.as_slice() {
        [line] => {
            if let Some(f) = p.run(line, |c| c.formula()) {
                if p.diags.is_empty() {
                    return Ok(f);
                }
            }
        }
        [] if p.diags.is_empty() => p.diag("empty expression", 0, 0),
        [_, second, ..] => p.diag("expression must fit on one line", second.start, second.end),
        _ => {}
    }
    Err(ParseDiagnostics { origin: src.origin, items: p.diags })
}

fn theory_ctx(theory: &MTheory) -> Option<mebn_core::model::EntityRegistry> {
    theory.registry().ok()
}

/// Parses a `.mev` evidence file against `theory`: findings
/// `RV(!a, ...) = value` and gating lines `candidates RV(!a) = !x !y`.
pub fn parse_evidence(src: &SourceText, theory: &MTheory) -> Result<Evidence, ParseDiagnostics> {
    let mut p = Parser { src: Source::new(&src.content), diags: Vec::new(), refs: Vec::new() };
    let lines = p.lines();
    let registry = theory_ctx(theory);
    let mut ev = Evidence::default();
    for line in &lines {
        let candidates = header_word(line) == Some("candidates");
        let parsed = p.run(line, |c| {
            if candidates {
                c.pos = 1;
            }
            let (s, _) = c.here();
            let term = c.term()?;
            let e = c.toks[c.pos - 1].end;
            c.expect_sym("=")?;
            let mut values = vec![(c.here(), c.expect_value()?)];
            while candidates && c.peek().is_some() {
                values.push((c.here(), c.expect_value()?));
            }
            Ok(((s, e), term, values))
        });
        let Some(((s, e), term, values)) = parsed else { continue };
        let Some(tpl) = theory.template(&term.name) else {
            p.diag(format!("unknown RV `{}`", term.name), s, e);
            continue;
        };
        let mut args = Vec::new();
        let mut bad = false;
        for a in &term.args {
            match a {
                Arg::Ident(i) => args.push(i.clone()),
                other => {
                    p.diag(format!("finding arguments must be identifiers, found `{other}`"), s, e);
                    bad = true;
                }
            }
        }
        if bad {
            continue;
        }
        let inst = RvInstance { name: term.name.clone(), args };
        if tpl.params.len() != inst.args.len() {
            p.diag(format!("`{}` takes {} argument(s), found {}", tpl.name, tpl.params.len(), inst.args.len()), s, e);
            continue;
        }
        if let Some(r) = &registry {
            for (id, (_, ty)) in inst.args.iter().zip(&tpl.params) {
                match r.lookup(id) {
                    None => p.diag(format!("unknown identifier `{id}`"), s, e),
                    Some(t) if t != ty => p.diag(format!("`{id}` has type {t}, expected {ty}"), s, e),
                    _ => {}
                }
            }
            let states = tpl.states(r);
            for ((vs, ve), v) in &values {
                if !states.contains(v) {
                    p.diag(format!("`{v}` is not a state of {}", tpl.name), *vs, *ve);
                }
            }
        }
        let vals: Vec<String> = values.into_iter().map(|(_, v)| v).collect();
        if candidates {
            if ev.candidates.insert(inst.clone(), vals).is_some() {
                p.diag(format!("duplicate candidates line for {inst}"), s, e);
            }
        } else {
            ev.findings.push(Finding { subject: inst, value: vals.into_iter().next().unwrap_or_default() });
        }
    }
    if p.diags.is_empty() {
        Ok(ev)
    } else {
        Err(ParseDiagnostics { origin: src.origin.clone(), items: p.diags })
    }
}

fn write_range(out: &mut String, r: &ValueRange) {
    match r {
        ValueRange::Boolean => out.push_str("Bool"),
        ValueRange::Entities(t) => out.push_str(t.as_str()),
        ValueRange::Enumerated(s) => {
            let _ = write!(out, "{{{}}}", s.join(", "));
        }
    }
}

pub fn serialize_entities(entities: &[EntityDecl]) -> String {
    let mut out = String::from("entities\n");
    for e in entities {
        let _ = write!(out, "  {}:", e.ty);
        for id in &e.ids {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

/// Writes `t` in the `.mtheory` syntax; declaration order is preserved.
pub fn serialize_mtheory(t: &MTheory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "theory {}\n", t.name);
    out.push_str("types\n");
    for d in &t.types {
        let _ = writeln!(out, "  {}{}", d.name, if d.ordered { " ordered" } else { "" });
    }
    out.push_str("end\n\n");
    out.push_str(&serialize_entities(&t.entities));
    out.push('\n');
    for r in &t.templates {
        let params: Vec<String> = r.params.iter().map(|(v, ty)| format!("{v}: {ty}")).collect();
        let _ = write!(out, "rv {}({}): ", r.name, params.join(", "));
        write_range(&mut out, &r.range);
        out.push('\n');
    }
    for m in &t.mfrags {
        let _ = writeln!(out, "\nmfrag {}", m.name);
        let sections: [(&str, Vec<String>); 3] = [
            ("context", m.context.iter().map(ToString::to_string).collect()),
            ("input", m.input.iter().map(ToString::to_string).collect()),
            ("resident", m.resident.iter().map(ToString::to_string).collect()),
        ];
        for (name, items) in sections {
            if items.is_empty() {
                continue;
            }
            let _ = writeln!(out, "  {name}:");
            for i in items {
                let _ = writeln!(out, "    {i}");
            }
        }
        if !m.arcs.is_empty() {
            out.push_str("  graph:\n");
            for (a, b) in &m.arcs {
                let _ = writeln!(out, "    {a} -> {b}");
            }
        }
        if let Some(v) = &m.recursion {
            let _ = writeln!(out, "  recursion: {v}");
        }
        for l in &m.locals {
            let _ = writeln!(out, "  local {}:", l.resident);
            for (i, c) in l.expr.clauses.iter().enumerate() {
                let _ = writeln!(out, "    {} {}:", if i == 0 { "if" } else { "elif" }, c.guard);
                let _ = writeln!(out, "      {}", c.dist);
            }
            let _ = writeln!(out, "    else:\n      {}", l.expr.default);
        }
        out.push_str("end\n");
    }
    out
}

pub fn serialize_evidence(ev: &Evidence) -> String {
    let mut out = String::new();
    for f in &ev.findings {
        let _ = writeln!(out, "{} = {}", term_text(&f.subject), f.value);
    }
    for (inst, vals) in &ev.candidates {
        let _ = writeln!(out, "candidates {} = {}", term_text(inst), vals.join(" "));
    }
    out
}

fn term_text(i: &RvInstance) -> String {
    let args: Vec<&str> = i.args.iter().map(Ident::as_str).collect();
    format!("{}({})", i.name, args.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "theory Tiny\ntypes\n  Thing\nend\nentities\n  Thing: !A\nend\nrv Flag(x: Thing): Bool\nmfrag F\n  resident:\n    Flag(x)\n  local Flag(x):\n    else:\n      True = 0.5; False = *\nend\n";

    #[test]
    fn minimal_theory_parses() {
        let t = parse_mtheory(&SourceText::new("t", MINIMAL)).unwrap();
        assert_eq!(t.mfrags.len(), 1);
        assert_eq!(t.mfrags[0].locals.len(), 1);
    }

    #[test]
    fn minimal_round_trip() {
        let t = parse_mtheory(&SourceText::new("t", MINIMAL)).unwrap();
        let again = parse_mtheory(&SourceText::new("t", serialize_mtheory(&t))).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn range_sugar() {
        let e = parse_entities(&SourceText::new("e", "entities\n  T: !T0..!T3 !X\nend\n")).unwrap();
        let ids: Vec<&str> = e[0].ids.iter().map(Ident::as_str).collect();
        assert_eq!(ids, ["!T0", "!T1", "!T2", "!T3", "!X"]);
    }

    #[test]
    fn dangling_reference_has_span() {
        let text = MINIMAL.replace("    Flag(x)\n", "    Flag(x)\n  input:\n    Ghost(x)\n");
        let err = parse_mtheory(&SourceText::new("t", text.clone())).unwrap_err();
        let d = &err.items[0];
        assert!(d.message.contains("Ghost"));
        assert_eq!(&text[d.span.start..d.span.end], "Ghost");
    }

    #[test]
    fn infix_inequality_desugars() {
        let f = parse_formula("st != s").unwrap();
        assert_eq!(f, Formula::Not(Box::new(Formula::Eq(Operand::Var("st".into()), Operand::Var("s".into())))));
    }

    #[test]
    fn guard_precedence() {
        let toks = lex_line("count(*) >= 1 or count(*) = 0 and not count(*) < 2", 0).unwrap();
        let mut c = Cursor::new(&toks, 0);
        let g = c.guard().unwrap();
        assert!(matches!(g, Guard::Or(_, ref b) if matches!(**b, Guard::And(..))));
    }
}
