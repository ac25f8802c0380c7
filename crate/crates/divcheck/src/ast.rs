//! Core syntax: schemas, conjunctive queries with comparisons, views,
//! policies, and the command language.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Column sorts. Queries may compare integers with any order operator;
/// strings only with equality and disequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sort {
    Int,
    Str,
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sort::Int => write!(f, "int"),
            Sort::Str => write!(f, "str"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constant {
    Int(i64),
    Str(String),
}

impl Constant {
    pub fn sort(&self) -> Sort {
        match self {
            Constant::Int(_) => Sort::Int,
            Constant::Str(_) => Sort::Str,
        }
    }
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constant::Int(n) => write!(f, "{n}"),
            Constant::Str(s) => write!(f, "'{s}'"),
        }
    }
}

/// A fully qualified column, `table.column`. After view inlining the table
/// part always names a base table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        ColumnRef { table: table.into(), column: column.into() }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Column(ColumnRef),
    Const(Constant),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Column(c) => write!(f, "{c}"),
            Term::Const(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ne,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn holds<T: Ord>(self, lhs: &T, rhs: &T) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        };
        write!(f, "{s}")
    }
}

/// A single comparison in a WHERE clause. `sort` is fixed during name
/// resolution; string-sorted atoms only use `=` and `!=`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComparisonAtom {
    pub lhs: Term,
    pub op: CmpOp,
    pub rhs: Term,
    pub sort: Sort,
}

impl ComparisonAtom {
    /// Free columns of this atom.
    pub fn columns(&self) -> impl Iterator<Item = &ColumnRef> {
        [&self.lhs, &self.rhs].into_iter().filter_map(|t| match t {
            Term::Column(c) => Some(c),
            Term::Const(_) => None,
        })
    }
}

impl fmt::Display for ComparisonAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op, self.rhs)
    }
}

/// A SELECT-FROM-WHERE query: projection heading, joined tables (no
/// self-joins), and AND-connected comparison atoms.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CqcQuery {
    pub heading: Vec<ColumnRef>,
    pub table_refs: BTreeSet<String>,
    pub atoms: Vec<ComparisonAtom>,
}

impl CqcQuery {
    /// Canonical serialization used as the identity of a query atom in the
    /// dependency analysis: sorted FROM list, source-ordered WHERE atoms,
    /// fully qualified columns, single spaces.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CqcQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SELECT ")?;
        for (i, c) in self.heading.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, " FROM ")?;
        for (i, t) in self.table_refs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{t}")?;
        }
        if !self.atoms.is_empty() {
            write!(f, " WHERE ")?;
            for (i, a) in self.atoms.iter().enumerate() {
                if i > 0 {
                    write!(f, " AND ")?;
                }
                write!(f, "{a}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub id: String,
    pub query: CqcQuery,
}

/// Database schema: table name to ordered columns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schema {
    pub tables: BTreeMap<String, Vec<(String, Sort)>>,
}

impl Schema {
    pub fn column_sort(&self, col: &ColumnRef) -> Option<Sort> {
        self.tables
            .get(&col.table)?
            .iter()
            .find(|(n, _)| n == &col.column)
            .map(|(_, s)| *s)
    }

    /// All columns of a table, qualified.
    pub fn columns_of(&self, table: &str) -> Vec<ColumnRef> {
        self.tables
            .get(table)
            .map(|cols| cols.iter().map(|(n, _)| ColumnRef::new(table, n.clone())).collect())
            .unwrap_or_default()
    }
}

/// A disjunction of conjunctions of view/table identifiers, per user.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Policy {
    pub per_user: BTreeMap<String, BTreeSet<BTreeSet<String>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "div",
            BinOp::Mod => "mod",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Var(String),
    Binop(Box<Expr>, BinOp, Box<Expr>),
}

impl Expr {
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Int(_) => {}
            Expr::Var(x) => {
                out.insert(x.clone());
            }
            Expr::Binop(a, _, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(n) => write!(f, "{n}"),
            Expr::Var(x) => write!(f, "{x}"),
            Expr::Binop(a, op, b) => write!(f, "({a} {op} {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Skip,
    Assign(String, Expr),
    QueryAssign(String, CqcQuery),
    Seq(Box<Command>, Box<Command>),
    If(Expr, Box<Command>, Box<Command>),
    While(Expr, Box<Command>),
    Out(Expr, String),
}

impl Command {
    pub fn seq(cmds: Vec<Command>) -> Command {
        let mut it = cmds.into_iter();
        match it.next() {
            None => Command::Skip,
            Some(first) => it.fold(first, |acc, c| Command::Seq(Box::new(acc), Box::new(c))),
        }
    }

    /// Program variables assigned or read anywhere in the command.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect(&mut out, &mut BTreeSet::new(), &mut BTreeSet::new());
        out
    }

    /// Users receiving output anywhere in the command.
    pub fn users(&self) -> BTreeSet<String> {
        let mut users = BTreeSet::new();
        self.collect(&mut BTreeSet::new(), &mut users, &mut BTreeSet::new());
        users
    }

    /// Normalization keys of all query atoms in the command.
    pub fn query_keys(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        self.collect(&mut BTreeSet::new(), &mut BTreeSet::new(), &mut keys);
        keys
    }

    fn collect(
        &self,
        vars: &mut BTreeSet<String>,
        users: &mut BTreeSet<String>,
        queries: &mut BTreeSet<String>,
    ) {
        match self {
            Command::Skip => {}
            Command::Assign(x, e) => {
                vars.insert(x.clone());
                vars.extend(e.free_vars());
            }
            Command::QueryAssign(x, q) => {
                vars.insert(x.clone());
                queries.insert(q.key());
            }
            Command::Seq(a, b) => {
                a.collect(vars, users, queries);
                b.collect(vars, users, queries);
            }
            Command::If(e, a, b) => {
                vars.extend(e.free_vars());
                a.collect(vars, users, queries);
                b.collect(vars, users, queries);
            }
            Command::While(e, c) => {
                vars.extend(e.free_vars());
                c.collect(vars, users, queries);
            }
            Command::Out(e, u) => {
                vars.extend(e.free_vars());
                users.insert(u.clone());
            }
        }
    }
}

fn indent(f: &mut fmt::Formatter<'_>, level: usize) -> fmt::Result {
    for _ in 0..level {
        write!(f, "    ")?;
    }
    Ok(())
}

fn fmt_command(c: &Command, f: &mut fmt::Formatter<'_>, level: usize) -> fmt::Result {
    match c {
        Command::Skip => {
            indent(f, level)?;
            writeln!(f, "skip;")
        }
        Command::Assign(x, e) => {
            indent(f, level)?;
            writeln!(f, "{x} := {e};")
        }
        Command::QueryAssign(x, q) => {
            indent(f, level)?;
            writeln!(f, "{x} <- {q};")
        }
        Command::Seq(a, b) => {
            fmt_command(a, f, level)?;
            fmt_command(b, f, level)
        }
        Command::If(e, a, b) => {
            indent(f, level)?;
            writeln!(f, "if {e} then {{")?;
            fmt_command(a, f, level + 1)?;
            indent(f, level)?;
            writeln!(f, "}} else {{")?;
            fmt_command(b, f, level + 1)?;
            indent(f, level)?;
            writeln!(f, "}}")
        }
        Command::While(e, c) => {
            indent(f, level)?;
            writeln!(f, "while {e} do {{")?;
            fmt_command(c, f, level + 1)?;
            indent(f, level)?;
            writeln!(f, "}}")
        }
        Command::Out(e, u) => {
            indent(f, level)?;
            writeln!(f, "out({e}, {u});")
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_command(self, f, 0)
    }
}
