//! Parser for `.dvt` source files: schema/view/policy macros followed by a
//! program, plus view inlining.
//!
//! The concrete syntax is line-oriented for the macros:
//!
//! ```text
//! # comment
//! @Table@ emp(name: str, role: str, salary: int)
//! @View@ v1 = SELECT role, name FROM emp
//! @Policy@ u : {v1, emp} | {v2}
//! x <- SELECT role, salary FROM emp WHERE role = 'Intern';
//! out(x, u);
//! ```
//!
//! Everything outside macro lines is the program body.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::ast::*;

#[derive(Debug, thiserror::Error)]
pub enum FrontendError {
    #[error("syntax error at {line}:{col}: expected {expected}, found {found}")]
    Syntax { line: usize, col: usize, expected: String, found: String },
    #[error("name error at line {line}: {msg}")]
    Name { line: usize, msg: String },
    #[error("sort error at line {line}: {msg}")]
    Sort { line: usize, msg: String },
    #[error("self-join at line {line}: table {table} appears more than once")]
    SelfJoin { line: usize, table: String },
    #[error("cyclic view definitions involving {view}")]
    CyclicView { view: String },
}

type Result<T> = std::result::Result<T, FrontendError>;

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Semi,
    Colon,
    Dot,
    Pipe,
    ColonEq, // :=
    Arrow,   // <-
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    Eq,
    Plus,
    Minus,
    Star,
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Int(n) => write!(f, "integer {n}"),
            Tok::Str(s) => write!(f, "string '{s}'"),
            Tok::LParen => write!(f, "'('"),
            Tok::RParen => write!(f, "')'"),
            Tok::LBrace => write!(f, "'{{'"),
            Tok::RBrace => write!(f, "'}}'"),
            Tok::Comma => write!(f, "','"),
            Tok::Semi => write!(f, "';'"),
            Tok::Colon => write!(f, "':'"),
            Tok::Dot => write!(f, "'.'"),
            Tok::Pipe => write!(f, "'|'"),
            Tok::ColonEq => write!(f, "':='"),
            Tok::Arrow => write!(f, "'<-'"),
            Tok::Lt => write!(f, "'<'"),
            Tok::Le => write!(f, "'<='"),
            Tok::Gt => write!(f, "'>'"),
            Tok::Ge => write!(f, "'>='"),
            Tok::EqEq => write!(f, "'=='"),
            Tok::Ne => write!(f, "'!='"),
            Tok::Eq => write!(f, "'='"),
            Tok::Plus => write!(f, "'+'"),
            Tok::Minus => write!(f, "'-'"),
            Tok::Star => write!(f, "'*'"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str, start_line: usize) -> Result<Vec<Spanned>> {
    let mut toks = Vec::new();
    let mut line = start_line;
    let mut col = 1usize;
    let mut chars = text.chars().peekable();
    loop {
        let c = match chars.peek() {
            None => break,
            Some(c) => *c,
        };
        let here = (line, col);
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            '\'' => {
                chars.next();
                col += 1;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some('\'') => {
                            col += 1;
                            break;
                        }
                        Some('\n') | None => {
                            return Err(FrontendError::Syntax {
                                line: here.0,
                                col: here.1,
                                expected: "closing quote".into(),
                                found: "end of line".into(),
                            })
                        }
                        Some(c) => {
                            s.push(c);
                            col += 1;
                        }
                    }
                }
                toks.push(Spanned { tok: Tok::Str(s), line: here.0, col: here.1 });
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() {
                        s.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let n = s.parse::<i64>().map_err(|_| FrontendError::Syntax {
                    line: here.0,
                    col: here.1,
                    expected: "64-bit integer".into(),
                    found: s.clone(),
                })?;
                toks.push(Spanned { tok: Tok::Int(n), line: here.0, col: here.1 });
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        s.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                toks.push(Spanned { tok: Tok::Ident(s), line: here.0, col: here.1 });
            }
            _ => {
                chars.next();
                col += 1;
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    ',' => Tok::Comma,
                    ';' => Tok::Semi,
                    '.' => Tok::Dot,
                    '|' => Tok::Pipe,
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' => Tok::Star,
                    ':' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::ColonEq
                        } else {
                            Tok::Colon
                        }
                    }
                    '<' => match chars.peek() {
                        Some('-') => {
                            chars.next();
                            col += 1;
                            Tok::Arrow
                        }
                        Some('=') => {
                            chars.next();
                            col += 1;
                            Tok::Le
                        }
                        _ => Tok::Lt,
                    },
                    '>' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Ge
                        } else {
                            Tok::Gt
                        }
                    }
                    '=' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::EqEq
                        } else {
                            Tok::Eq
                        }
                    }
                    '!' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Ne
                        } else {
                            return Err(FrontendError::Syntax {
                                line: here.0,
                                col: here.1,
                                expected: "'!='".into(),
                                found: "'!'".into(),
                            });
                        }
                    }
                    other => {
                        return Err(FrontendError::Syntax {
                            line: here.0,
                            col: here.1,
                            expected: "token".into(),
                            found: format!("'{other}'"),
                        })
                    }
                };
                toks.push(Spanned { tok, line: here.0, col: here.1 });
            }
        }
    }
    toks.push(Spanned { tok: Tok::Eof, line, col });
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Raw (unresolved) forms

#[derive(Debug, Clone)]
struct RawCol {
    table: Option<String>,
    column: String,
    line: usize,
}

#[derive(Debug, Clone)]
enum RawTerm {
    Col(RawCol),
    Const(Constant),
}

#[derive(Debug, Clone)]
struct RawAtom {
    lhs: RawTerm,
    op: CmpOp,
    rhs: RawTerm,
    line: usize,
}

#[derive(Debug, Clone)]
struct RawQuery {
    heading: Vec<RawCol>,
    from: Vec<String>,
    atoms: Vec<RawAtom>,
    line: usize,
}

// ---------------------------------------------------------------------------
// Token-stream parser

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    // raw queries from `x <- SELECT ...`, in source order; the AST carries a
    // placeholder until resolution patches them in
    pending: Vec<RawQuery>,
}

impl Parser {
    fn new(toks: Vec<Spanned>) -> Self {
        Parser { toks, pos: 0, pending: Vec::new() }
    }

    fn peek(&self) -> &Spanned {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.pos.min(self.toks.len() - 1)].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, expected: &str) -> Result<T> {
        let t = self.peek();
        Err(FrontendError::Syntax {
            line: t.line,
            col: t.col,
            expected: expected.into(),
            found: t.tok.to_string(),
        })
    }

    fn expect(&mut self, tok: Tok) -> Result<Spanned> {
        if self.peek().tok == tok {
            Ok(self.next())
        } else {
            self.err(&tok.to_string())
        }
    }

    fn ident(&mut self) -> Result<(String, usize)> {
        match self.peek().tok.clone() {
            Tok::Ident(s) => {
                let line = self.peek().line;
                self.next();
                Ok((s, line))
            }
            _ => self.err("identifier"),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        if self.at_keyword(kw) {
            self.next();
            Ok(())
        } else {
            self.err(&format!("keyword '{kw}'"))
        }
    }

    // SELECT cols FROM tables [WHERE atoms]
    fn query(&mut self) -> Result<RawQuery> {
        let line = self.peek().line;
        self.keyword("select")?;
        let mut heading = vec![self.raw_col()?];
        while self.peek().tok == Tok::Comma {
            self.next();
            heading.push(self.raw_col()?);
        }
        self.keyword("from")?;
        let mut from = vec![self.ident()?.0];
        while self.peek().tok == Tok::Comma {
            self.next();
            from.push(self.ident()?.0);
        }
        let mut atoms = Vec::new();
        if self.at_keyword("where") {
            self.next();
            atoms.push(self.raw_atom()?);
            while self.at_keyword("and") {
                self.next();
                atoms.push(self.raw_atom()?);
            }
        }
        Ok(RawQuery { heading, from, atoms, line })
    }

    fn raw_col(&mut self) -> Result<RawCol> {
        let (first, line) = self.ident()?;
        if self.peek().tok == Tok::Dot {
            self.next();
            let (col, _) = self.ident()?;
            Ok(RawCol { table: Some(first), column: col, line })
        } else {
            Ok(RawCol { table: None, column: first, line })
        }
    }

    fn raw_term(&mut self) -> Result<RawTerm> {
        match self.peek().tok.clone() {
            Tok::Int(n) => {
                self.next();
                Ok(RawTerm::Const(Constant::Int(n)))
            }
            Tok::Minus => {
                self.next();
                match self.peek().tok.clone() {
                    Tok::Int(n) => {
                        self.next();
                        Ok(RawTerm::Const(Constant::Int(-n)))
                    }
                    _ => self.err("integer literal"),
                }
            }
            Tok::Str(s) => {
                self.next();
                Ok(RawTerm::Const(Constant::Str(s)))
            }
            Tok::Ident(_) => Ok(RawTerm::Col(self.raw_col()?)),
            _ => self.err("column or constant"),
        }
    }

    fn cmp_op(&mut self) -> Result<CmpOp> {
        let op = match self.peek().tok {
            Tok::Lt => CmpOp::Lt,
            Tok::Le => CmpOp::Le,
            Tok::Eq | Tok::EqEq => CmpOp::Eq,
            Tok::Ne => CmpOp::Ne,
            Tok::Gt => CmpOp::Gt,
            Tok::Ge => CmpOp::Ge,
            _ => return self.err("comparison operator"),
        };
        self.next();
        Ok(op)
    }

    fn raw_atom(&mut self) -> Result<RawAtom> {
        let line = self.peek().line;
        let lhs = self.raw_term()?;
        let op = self.cmp_op()?;
        let rhs = self.raw_term()?;
        Ok(RawAtom { lhs, op, rhs, line })
    }

    // -- program commands

    fn program(&mut self) -> Result<Command> {
        let mut cmds = Vec::new();
        while self.peek().tok != Tok::Eof {
            cmds.push(self.command()?);
        }
        Ok(Command::seq(cmds))
    }

    fn block(&mut self) -> Result<Command> {
        self.expect(Tok::LBrace)?;
        let mut cmds = Vec::new();
        while self.peek().tok != Tok::RBrace {
            if self.peek().tok == Tok::Eof {
                return self.err("'}'");
            }
            cmds.push(self.command()?);
        }
        self.next();
        Ok(Command::seq(cmds))
    }

    fn command(&mut self) -> Result<Command> {
        match self.peek().tok.clone() {
            Tok::Ident(s) if s == "skip" => {
                self.next();
                self.expect(Tok::Semi)?;
                Ok(Command::Skip)
            }
            Tok::Ident(s) if s == "out" => {
                self.next();
                self.expect(Tok::LParen)?;
                let e = self.expr()?;
                self.expect(Tok::Comma)?;
                let (u, _) = self.ident()?;
                self.expect(Tok::RParen)?;
                self.expect(Tok::Semi)?;
                Ok(Command::Out(e, u))
            }
            Tok::Ident(s) if s == "if" => {
                self.next();
                let e = self.expr()?;
                self.keyword("then")?;
                let c1 = self.block()?;
                self.keyword("else")?;
                let c2 = self.block()?;
                Ok(Command::If(e, Box::new(c1), Box::new(c2)))
            }
            Tok::Ident(s) if s == "while" => {
                self.next();
                let e = self.expr()?;
                self.keyword("do")?;
                let c = self.block()?;
                Ok(Command::While(e, Box::new(c)))
            }
            Tok::Ident(x) => {
                self.next();
                match self.peek().tok {
                    Tok::ColonEq => {
                        self.next();
                        let e = self.expr()?;
                        self.expect(Tok::Semi)?;
                        Ok(Command::Assign(x, e))
                    }
                    Tok::Arrow => {
                        self.next();
                        let q = self.query()?;
                        self.expect(Tok::Semi)?;
                        self.pending.push(q);
                        Ok(Command::QueryAssign(x, CqcQuery::default()))
                    }
                    _ => self.err("':=' or '<-'"),
                }
            }
            _ => self.err("command"),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let lhs = self.additive()?;
        let op = match self.peek().tok {
            Tok::EqEq => Some(BinOp::Eq),
            Tok::Ne => Some(BinOp::Ne),
            Tok::Lt => Some(BinOp::Lt),
            Tok::Le => Some(BinOp::Le),
            Tok::Gt => Some(BinOp::Gt),
            Tok::Ge => Some(BinOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.next();
            let rhs = self.additive()?;
            Ok(Expr::Binop(Box::new(lhs), op, Box::new(rhs)))
        } else {
            Ok(lhs)
        }
    }

    fn additive(&mut self) -> Result<Expr> {
        let mut e = self.multiplicative()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.multiplicative()?;
            e = Expr::Binop(Box::new(e), op, Box::new(rhs));
        }
        Ok(e)
    }

    fn multiplicative(&mut self) -> Result<Expr> {
        let mut e = self.primary()?;
        loop {
            let op = match &self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Ident(s) if s == "div" => BinOp::Div,
                Tok::Ident(s) if s == "mod" => BinOp::Mod,
                _ => break,
            };
            self.next();
            let rhs = self.primary()?;
            e = Expr::Binop(Box::new(e), op, Box::new(rhs));
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek().tok.clone() {
            Tok::Int(n) => {
                self.next();
                Ok(Expr::Int(n))
            }
            Tok::Minus => {
                self.next();
                match self.peek().tok.clone() {
                    Tok::Int(n) => {
                        self.next();
                        Ok(Expr::Int(-n))
                    }
                    _ => self.err("integer literal"),
                }
            }
            Tok::Ident(x) => {
                self.next();
                Ok(Expr::Var(x))
            }
            Tok::LParen => {
                self.next();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            _ => self.err("expression"),
        }
    }
}

fn patch_queries(cmd: &mut Command, resolved: &mut std::vec::IntoIter<CqcQuery>) {
    match cmd {
        Command::Skip | Command::Assign(..) | Command::Out(..) => {}
        Command::QueryAssign(_, q) => {
            *q = resolved.next().expect("query count mismatch");
        }
        Command::Seq(a, b) => {
            patch_queries(a, resolved);
            patch_queries(b, resolved);
        }
        Command::If(_, a, b) => {
            patch_queries(a, resolved);
            patch_queries(b, resolved);
        }
        Command::While(_, c) => patch_queries(c, resolved),
    }
}

// ---------------------------------------------------------------------------
// Resolution

/// Column environment for one query source (a table or a view): exported
/// column names with sorts, plus the qualified target each name maps to.
struct SourceCols {
    cols: Vec<(String, Sort)>,
}

struct Resolver<'a> {
    schema: &'a Schema,
    // resolved views, by name: query (possibly referencing other views) and
    // exported columns
    views: BTreeMap<String, (CqcQuery, Vec<(String, Sort)>)>,
}

impl<'a> Resolver<'a> {
    fn source_cols(&self, name: &str) -> Option<SourceCols> {
        if let Some(cols) = self.schema.tables.get(name) {
            return Some(SourceCols { cols: cols.clone() });
        }
        self.views.get(name).map(|(_, cols)| SourceCols { cols: cols.clone() })
    }

    fn resolve_query(&self, raw: &RawQuery) -> Result<CqcQuery> {
        let mut table_refs = BTreeSet::new();
        for t in &raw.from {
            if self.source_cols(t).is_none() {
                return Err(FrontendError::Name {
                    line: raw.line,
                    msg: format!("unknown table or view '{t}'"),
                });
            }
            if !table_refs.insert(t.clone()) {
                return Err(FrontendError::SelfJoin { line: raw.line, table: t.clone() });
            }
        }
        let resolve_col = |c: &RawCol| -> Result<(ColumnRef, Sort)> {
            match &c.table {
                Some(t) => {
                    if !table_refs.contains(t) {
                        return Err(FrontendError::Name {
                            line: c.line,
                            msg: format!("'{t}' is not in the FROM list"),
                        });
                    }
                    let sc = self.source_cols(t).unwrap();
                    match sc.cols.iter().find(|(n, _)| n == &c.column) {
                        Some((_, sort)) => Ok((ColumnRef::new(t.clone(), c.column.clone()), *sort)),
                        None => Err(FrontendError::Name {
                            line: c.line,
                            msg: format!("'{t}' has no column '{}'", c.column),
                        }),
                    }
                }
                None => {
                    let mut hits = Vec::new();
                    for t in &table_refs {
                        let sc = self.source_cols(t).unwrap();
                        if let Some((_, sort)) = sc.cols.iter().find(|(n, _)| n == &c.column) {
                            hits.push((ColumnRef::new(t.clone(), c.column.clone()), *sort));
                        }
                    }
                    match hits.len() {
                        1 => Ok(hits.pop().unwrap()),
                        0 => Err(FrontendError::Name {
                            line: c.line,
                            msg: format!("unknown column '{}'", c.column),
                        }),
                        _ => Err(FrontendError::Name {
                            line: c.line,
                            msg: format!("ambiguous column '{}'", c.column),
                        }),
                    }
                }
            }
        };
        let mut heading = Vec::new();
        for c in &raw.heading {
            heading.push(resolve_col(c)?.0);
        }
        let mut atoms = Vec::new();
        for a in &raw.atoms {
            let (lhs, ls) = match &a.lhs {
                RawTerm::Col(c) => {
                    let (cr, s) = resolve_col(c)?;
                    (Term::Column(cr), s)
                }
                RawTerm::Const(k) => (Term::Const(k.clone()), k.sort()),
            };
            let (rhs, rs) = match &a.rhs {
                RawTerm::Col(c) => {
                    let (cr, s) = resolve_col(c)?;
                    (Term::Column(cr), s)
                }
                RawTerm::Const(k) => (Term::Const(k.clone()), k.sort()),
            };
            if ls != rs {
                return Err(FrontendError::Sort {
                    line: a.line,
                    msg: format!("comparison between {ls} and {rs}"),
                });
            }
            if ls == Sort::Str && !matches!(a.op, CmpOp::Eq | CmpOp::Ne) {
                return Err(FrontendError::Sort {
                    line: a.line,
                    msg: "string columns only support = and !=".into(),
                });
            }
            atoms.push(ComparisonAtom { lhs, op: a.op, rhs, sort: ls });
        }
        Ok(CqcQuery { heading, table_refs, atoms })
    }
}

/// Replace every view reference in `q` by its definition, recursively.
pub fn inline_views(q: &CqcQuery, views: &[View]) -> Result<CqcQuery> {
    let by_name: BTreeMap<&str, &View> = views.iter().map(|v| (v.id.as_str(), v)).collect();
    let mut memo: BTreeMap<String, CqcQuery> = BTreeMap::new();
    inline_with(q, &by_name, &mut memo)
}

fn inline_with(
    q: &CqcQuery,
    views: &BTreeMap<&str, &View>,
    memo: &mut BTreeMap<String, CqcQuery>,
) -> Result<CqcQuery> {
    let mut heading = q.heading.clone();
    let mut table_refs: BTreeSet<String> = BTreeSet::new();
    let mut atoms = q.atoms.clone();
    // base tables first, then spliced view bodies in FROM order
    let mut extra_atoms = Vec::new();
    for t in &q.table_refs {
        match views.get(t.as_str()) {
            None => {
                if !table_refs.insert(t.clone()) {
                    return Err(FrontendError::SelfJoin { line: 0, table: t.clone() });
                }
            }
            Some(v) => {
                let body = match memo.get(&v.id) {
                    Some(b) => b.clone(),
                    None => {
                        let b = inline_with(&v.query, views, memo)?;
                        memo.insert(v.id.clone(), b.clone());
                        b
                    }
                };
                for bt in &body.table_refs {
                    if !table_refs.insert(bt.clone()) {
                        return Err(FrontendError::SelfJoin { line: 0, table: bt.clone() });
                    }
                }
                // exported name -> underlying base column
                let export: BTreeMap<&str, &ColumnRef> = v
                    .query
                    .heading
                    .iter()
                    .zip(body.heading.iter())
                    .map(|(orig, base)| (orig.column.as_str(), base))
                    .collect();
                let rewrite = |c: &mut ColumnRef| {
                    if c.table == v.id {
                        if let Some(base) = export.get(c.column.as_str()) {
                            *c = (*base).clone();
                        }
                    }
                };
                for h in heading.iter_mut() {
                    rewrite(h);
                }
                for a in atoms.iter_mut() {
                    if let Term::Column(c) = &mut a.lhs {
                        rewrite(c);
                    }
                    if let Term::Column(c) = &mut a.rhs {
                        rewrite(c);
                    }
                }
                extra_atoms.extend(body.atoms.iter().cloned());
            }
        }
    }
    atoms.extend(extra_atoms);
    Ok(CqcQuery { heading, table_refs, atoms })
}

// ---------------------------------------------------------------------------
// Top-level parse

/// Fully parsed and validated source file.
#[derive(Debug, Clone)]
pub struct Source {
    pub schema: Schema,
    pub views: Vec<View>,
    pub policy: Policy,
    pub program: Command,
}

impl Source {
    /// Inlined query for every normalization key appearing in the program.
    pub fn inlined_queries(&self) -> Result<BTreeMap<String, CqcQuery>> {
        let mut out = BTreeMap::new();
        collect_inlined(&self.program, &self.views, &mut out)?;
        Ok(out)
    }
}

fn collect_inlined(
    cmd: &Command,
    views: &[View],
    out: &mut BTreeMap<String, CqcQuery>,
) -> Result<()> {
    match cmd {
        Command::Skip | Command::Assign(..) | Command::Out(..) => Ok(()),
        Command::QueryAssign(_, q) => {
            out.entry(q.key()).or_insert(inline_views(q, views)?);
            Ok(())
        }
        Command::Seq(a, b) => {
            collect_inlined(a, views, out)?;
            collect_inlined(b, views, out)
        }
        Command::If(_, a, b) => {
            collect_inlined(a, views, out)?;
            collect_inlined(b, views, out)
        }
        Command::While(_, c) => collect_inlined(c, views, out),
    }
}

pub fn parse_source(text: &str) -> Result<Source> {
    let mut schema = Schema::default();
    let mut raw_views: Vec<(String, RawQuery, usize)> = Vec::new();
    let mut raw_policy: Vec<(String, Vec<Vec<String>>, usize)> = Vec::new();
    let mut program_text = String::new();
    let mut program_start_line = 1usize;
    let mut program_started = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = raw_line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("@Table@") {
            parse_table_macro(rest, lineno, &mut schema)?;
        } else if let Some(rest) = trimmed.strip_prefix("@View@") {
            let toks = lex(rest, lineno)?;
            let mut p = Parser::new(toks);
            let (name, _) = p.ident()?;
            p.expect(Tok::Eq)?;
            let q = p.query()?;
            p.expect(Tok::Eof)?;
            raw_views.push((name, q, lineno));
        } else if let Some(rest) = trimmed.strip_prefix("@Policy@") {
            let toks = lex(rest, lineno)?;
            let mut p = Parser::new(toks);
            let (user, _) = p.ident()?;
            p.expect(Tok::Colon)?;
            let mut disj = vec![parse_conjunction(&mut p)?];
            while p.peek().tok == Tok::Pipe {
                p.next();
                disj.push(parse_conjunction(&mut p)?);
            }
            p.expect(Tok::Eof)?;
            raw_policy.push((user, disj, lineno));
        } else {
            if !program_started && !trimmed.is_empty() && !trimmed.starts_with('#') {
                program_started = true;
                program_start_line = lineno;
            }
            if program_started {
                let _ = writeln!(program_text, "{raw_line}");
            }
        }
    }

    // resolve views in dependency order
    let view_names: BTreeSet<&str> = raw_views.iter().map(|(n, _, _)| n.as_str()).collect();
    for (name, _, line) in &raw_views {
        if schema.tables.contains_key(name) {
            return Err(FrontendError::Name {
                line: *line,
                msg: format!("view '{name}' shadows a table"),
            });
        }
        if raw_views.iter().filter(|(n, _, _)| n == name).count() > 1 {
            return Err(FrontendError::Name {
                line: *line,
                msg: format!("duplicate view '{name}'"),
            });
        }
    }
    let mut resolver = Resolver { schema: &schema, views: BTreeMap::new() };
    let mut visiting: BTreeSet<String> = BTreeSet::new();
    fn resolve_view(
        name: &str,
        raw_views: &[(String, RawQuery, usize)],
        resolver: &mut Resolver<'_>,
        visiting: &mut BTreeSet<String>,
    ) -> Result<()> {
        if resolver.views.contains_key(name) {
            return Ok(());
        }
        if !visiting.insert(name.to_string()) {
            return Err(FrontendError::CyclicView { view: name.to_string() });
        }
        let (_, raw, line) = raw_views.iter().find(|(n, _, _)| n == name).unwrap();
        // resolve referenced views first
        for t in &raw.from {
            if !resolver.schema.tables.contains_key(t)
                && raw_views.iter().any(|(n, _, _)| n == t)
            {
                resolve_view(t, raw_views, resolver, visiting)?;
            }
        }
        let q = resolver.resolve_query(raw)?;
        let mut export: Vec<(String, Sort)> = Vec::new();
        for c in &q.heading {
            let sort = match resolver.schema.column_sort(c) {
                Some(s) => s,
                None => {
                    let (_, cols) = resolver.views.get(&c.table).ok_or(FrontendError::Name {
                        line: *line,
                        msg: format!("unknown source '{}'", c.table),
                    })?;
                    cols.iter().find(|(n, _)| n == &c.column).map(|(_, s)| *s).ok_or(
                        FrontendError::Name {
                            line: *line,
                            msg: format!("unknown column '{}'", c.column),
                        },
                    )?
                }
            };
            if export.iter().any(|(n, _)| n == &c.column) {
                return Err(FrontendError::Name {
                    line: *line,
                    msg: format!("duplicate column '{}' in view heading", c.column),
                });
            }
            export.push((c.column.clone(), sort));
        }
        resolver.views.insert(name.to_string(), (q, export));
        visiting.remove(name);
        Ok(())
    }
    for (name, _, _) in &raw_views {
        resolve_view(name, &raw_views, &mut resolver, &mut visiting)?;
    }
    let views: Vec<View> = raw_views
        .iter()
        .map(|(n, _, _)| View { id: n.clone(), query: resolver.views[n].0.clone() })
        .collect();

    // check acyclicity end to end by inlining every view now
    for v in &views {
        inline_views(&v.query, &views)?;
    }

    // policy
    let mut policy = Policy::default();
    for (user, disj, line) in &raw_policy {
        let mut d: BTreeSet<BTreeSet<String>> = BTreeSet::new();
        for conj in disj {
            if conj.is_empty() {
                return Err(FrontendError::Name {
                    line: *line,
                    msg: "empty conjunction in policy".into(),
                });
            }
            let mut c = BTreeSet::new();
            for id in conj {
                if !schema.tables.contains_key(id) && !view_names.contains(id.as_str()) {
                    return Err(FrontendError::Name {
                        line: *line,
                        msg: format!("unknown table or view '{id}' in policy"),
                    });
                }
                c.insert(id.clone());
            }
            d.insert(c);
        }
        if d.is_empty() {
            return Err(FrontendError::Name { line: *line, msg: "empty policy disjunction".into() });
        }
        policy.per_user.entry(user.clone()).or_default().extend(d);
    }

    // program
    let toks = lex(&program_text, program_start_line)?;
    let mut p = Parser::new(toks);
    let mut program = p.program()?;
    let mut resolved = Vec::new();
    for rq in &p.pending {
        resolved.push(resolver.resolve_query(rq)?);
    }
    patch_queries(&mut program, &mut resolved.into_iter());

    Ok(Source { schema, views, policy, program })
}

fn parse_table_macro(rest: &str, line: usize, schema: &mut Schema) -> Result<()> {
    let toks = lex(rest, line)?;
    let mut p = Parser::new(toks);
    let (name, _) = p.ident()?;
    p.expect(Tok::LParen)?;
    let mut cols: Vec<(String, Sort)> = Vec::new();
    loop {
        let (col, cline) = p.ident()?;
        p.expect(Tok::Colon)?;
        let (sort_name, sline) = p.ident()?;
        let sort = match sort_name.as_str() {
            "int" => Sort::Int,
            "str" => Sort::Str,
            other => {
                return Err(FrontendError::Syntax {
                    line: sline,
                    col: 0,
                    expected: "'int' or 'str'".into(),
                    found: format!("'{other}'"),
                })
            }
        };
        if cols.iter().any(|(n, _)| n == &col) {
            return Err(FrontendError::Name {
                line: cline,
                msg: format!("duplicate column '{col}' in table '{name}'"),
            });
        }
        cols.push((col, sort));
        match p.peek().tok {
            Tok::Comma => {
                p.next();
            }
            Tok::RParen => {
                p.next();
                break;
            }
            _ => return p.err("',' or ')'"),
        }
    }
    p.expect(Tok::Eof)?;
    if cols.is_empty() {
        return Err(FrontendError::Name { line, msg: format!("table '{name}' has no columns") });
    }
    if schema.tables.insert(name.clone(), cols).is_some() {
        return Err(FrontendError::Name { line, msg: format!("duplicate table '{name}'") });
    }
    Ok(())
}

#[cfg(test)]
pub(crate) fn parse_expr_for_tests(text: &str) -> Expr {
    let toks = lex(text, 1).unwrap();
    let mut p = Parser::new(toks);
    let e = p.expr().unwrap();
    p.expect(Tok::Eof).unwrap();
    e
}

fn parse_conjunction(p: &mut Parser) -> Result<Vec<String>> {
    p.expect(Tok::LBrace)?;
    let mut ids = vec![p.ident()?.0];
    while p.peek().tok == Tok::Comma {
        p.next();
        ids.push(p.ident()?.0);
    }
    p.expect(Tok::RBrace)?;
    Ok(ids)
}

/// Render a parsed source back to `.dvt` text; `parse_source` of the result
/// yields the same ASTs.
pub fn pretty_source(src: &Source) -> String {
    let mut out = String::new();
    for (t, cols) in &src.schema.tables {
        let cols: Vec<String> = cols.iter().map(|(n, s)| format!("{n}: {s}")).collect();
        let _ = writeln!(out, "@Table@ {t}({})", cols.join(", "));
    }
    for v in &src.views {
        let _ = writeln!(out, "@View@ {} = {}", v.id, v.query);
    }
    for (u, disj) in &src.policy.per_user {
        let rendered: Vec<String> = disj
            .iter()
            .map(|conj| {
                let ids: Vec<&str> = conj.iter().map(String::as_str).collect();
                format!("{{{}}}", ids.join(", "))
            })
            .collect();
        let _ = writeln!(out, "@Policy@ {u} : {}", rendered.join(" | "));
    }
    let _ = write!(out, "{}", src.program);
    out
}
