//! Concrete execution over explicit database states: a plain interpreter and
//! a taint-tracking one that records which query atoms each output depends on.

use std::collections::{BTreeMap, BTreeSet};

use crate::ast::*;

/// A database snapshot: each table holds a set of rows.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct DatabaseState {
    pub per_table: BTreeMap<String, BTreeSet<Vec<Constant>>>,
}

impl DatabaseState {
    pub fn rows(&self, table: &str) -> &BTreeSet<Vec<Constant>> {
        static EMPTY: std::sync::OnceLock<BTreeSet<Vec<Constant>>> = std::sync::OnceLock::new();
        self.per_table.get(table).unwrap_or_else(|| EMPTY.get_or_init(BTreeSet::new))
    }

    /// Load from `{table: [[cell, …], …]}`, validating against the schema.
    pub fn from_json(value: &serde_json::Value, schema: &Schema) -> Result<Self, InterpError> {
        let obj = value
            .as_object()
            .ok_or_else(|| InterpError::Type("database document must be an object".into()))?;
        let mut per_table = BTreeMap::new();
        for (table, rows) in obj {
            let cols = schema
                .tables
                .get(table)
                .ok_or_else(|| InterpError::Type(format!("unknown table '{table}'")))?;
            let rows = rows
                .as_array()
                .ok_or_else(|| InterpError::Type(format!("rows of '{table}' must be an array")))?;
            let mut set = BTreeSet::new();
            for row in rows {
                let cells = row.as_array().ok_or_else(|| {
                    InterpError::Type(format!("row of '{table}' must be an array"))
                })?;
                if cells.len() != cols.len() {
                    return Err(InterpError::Type(format!(
                        "row of '{table}' has {} cells, expected {}",
                        cells.len(),
                        cols.len()
                    )));
                }
                let mut tuple = Vec::new();
                for (cell, (name, sort)) in cells.iter().zip(cols) {
                    let c = match (sort, cell) {
                        (Sort::Int, serde_json::Value::Number(n)) => Constant::Int(
                            n.as_i64().ok_or_else(|| {
                                InterpError::Type(format!("non-integer cell in '{table}'"))
                            })?,
                        ),
                        (Sort::Str, serde_json::Value::String(s)) => Constant::Str(s.clone()),
                        _ => {
                            return Err(InterpError::Type(format!(
                                "cell for {table}.{name} does not match sort {sort}"
                            )))
                        }
                    };
                    tuple.push(c);
                }
                set.insert(tuple);
            }
            per_table.insert(table.clone(), set);
        }
        // tables absent from the document are empty
        for t in schema.tables.keys() {
            per_table.entry(t.clone()).or_default();
        }
        Ok(DatabaseState { per_table })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Int(i64),
    Tuples(BTreeSet<Vec<Constant>>),
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Tuples(ts) => {
                write!(f, "{{")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "(")?;
                    for (j, c) in t.iter().enumerate() {
                        if j > 0 {
                            write!(f, ", ")?;
                        }
                        write!(f, "{c}")?;
                    }
                    write!(f, ")")?;
                }
                write!(f, "}}")
            }
        }
    }
}

/// Dependency atoms tracked by the taint semantics.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dep {
    Var(String),
    Pc,
    /// A query atom, identified by its normalization key.
    Query(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Observation {
    pub value: Value,
    pub user: String,
    /// Present in taint mode only.
    pub taints: Option<BTreeSet<Dep>>,
}

pub type Trace = Vec<Observation>;

/// Order-preserving filter of a trace by user.
pub fn project_trace(trace: &[Observation], user: &str) -> Trace {
    trace.iter().filter(|o| o.user == user).cloned().collect()
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum InterpError {
    #[error("division by zero")]
    DivideByZero,
    #[error("type error: {0}")]
    Type(String),
    #[error("step budget exhausted after {trace:?}")]
    BudgetExceeded { trace: Trace, queries: BTreeSet<String> },
}

/// Result of a taint run: the enriched trace and the query atoms the
/// user-projected outputs depend on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaintOutput {
    pub trace: Trace,
    pub queries: BTreeSet<String>,
}

// ---------------------------------------------------------------------------
// Expressions and queries

fn as_int(v: Value) -> Result<i64, InterpError> {
    match v {
        Value::Int(n) => Ok(n),
        // a one-row, one-int-column result acts as its integer
        Value::Tuples(ts) => {
            if ts.len() == 1 {
                let row = ts.iter().next().unwrap();
                if let [Constant::Int(n)] = row.as_slice() {
                    return Ok(*n);
                }
            }
            Err(InterpError::Type("expected an integer, found a tuple set".into()))
        }
    }
}

/// Floor division (rounds toward negative infinity).
fn floor_div(a: i64, b: i64) -> Result<i64, InterpError> {
    if b == 0 {
        return Err(InterpError::DivideByZero);
    }
    let q = a.wrapping_div(b);
    Ok(if a % b != 0 && (a < 0) != (b < 0) { q - 1 } else { q })
}

/// Remainder with the divisor's sign, matching floor division.
fn math_mod(a: i64, b: i64) -> Result<i64, InterpError> {
    if b == 0 {
        return Err(InterpError::DivideByZero);
    }
    let r = a % b;
    Ok(if r != 0 && (r < 0) != (b < 0) { r + b } else { r })
}

pub fn eval_expr(e: &Expr, m: &BTreeMap<String, Value>) -> Result<Value, InterpError> {
    match e {
        Expr::Int(n) => Ok(Value::Int(*n)),
        Expr::Var(x) => Ok(m.get(x).cloned().unwrap_or(Value::Int(0))),
        Expr::Binop(a, op, b) => {
            let va = eval_expr(a, m)?;
            let vb = eval_expr(b, m)?;
            // tuple sets support (dis)equality directly
            if let (Value::Tuples(ta), Value::Tuples(tb)) = (&va, &vb) {
                match op {
                    BinOp::Eq => return Ok(Value::Int((ta == tb) as i64)),
                    BinOp::Ne => return Ok(Value::Int((ta != tb) as i64)),
                    _ => {}
                }
            }
            let x = as_int(va)?;
            let y = as_int(vb)?;
            let n = match op {
                BinOp::Add => x.wrapping_add(y),
                BinOp::Sub => x.wrapping_sub(y),
                BinOp::Mul => x.wrapping_mul(y),
                BinOp::Div => floor_div(x, y)?,
                BinOp::Mod => math_mod(x, y)?,
                BinOp::Eq => (x == y) as i64,
                BinOp::Ne => (x != y) as i64,
                BinOp::Lt => (x < y) as i64,
                BinOp::Le => (x <= y) as i64,
                BinOp::Gt => (x > y) as i64,
                BinOp::Ge => (x >= y) as i64,
            };
            Ok(Value::Int(n))
        }
    }
}

/// Evaluate a view-free query: cross product of its tables, filter by the
/// atoms, project onto the heading.
pub fn eval_query(
    q: &CqcQuery,
    db: &DatabaseState,
    schema: &Schema,
) -> Result<BTreeSet<Vec<Constant>>, InterpError> {
    let tables: Vec<&String> = q.table_refs.iter().collect();
    // column -> position in the combined row
    let mut positions: BTreeMap<ColumnRef, usize> = BTreeMap::new();
    let mut offset = 0;
    for t in &tables {
        let cols = schema
            .tables
            .get(*t)
            .ok_or_else(|| InterpError::Type(format!("unknown table '{t}'")))?;
        for (i, (name, _)) in cols.iter().enumerate() {
            positions.insert(ColumnRef::new((*t).clone(), name.clone()), offset + i);
        }
        offset += cols.len();
    }
    let lookup = |t: &Term, row: &[&Constant]| -> Constant {
        match t {
            Term::Const(c) => c.clone(),
            Term::Column(c) => row[positions[c]].clone(),
        }
    };
    let mut result = BTreeSet::new();
    let mut stack: Vec<&Constant> = Vec::new();
    fn rec<'a>(
        idx: usize,
        tables: &[&String],
        db: &'a DatabaseState,
        stack: &mut Vec<&'a Constant>,
        q: &CqcQuery,
        lookup: &dyn Fn(&Term, &[&Constant]) -> Constant,
        positions: &BTreeMap<ColumnRef, usize>,
        result: &mut BTreeSet<Vec<Constant>>,
    ) {
        if idx == tables.len() {
            if q.atoms.iter().all(|a| {
                let l = lookup(&a.lhs, stack);
                let r = lookup(&a.rhs, stack);
                a.op.holds(&l, &r)
            }) {
                result.insert(q.heading.iter().map(|c| stack[positions[c]].clone()).collect());
            }
            return;
        }
        for row in db.rows(tables[idx]) {
            let before = stack.len();
            stack.extend(row.iter());
            rec(idx + 1, tables, db, stack, q, lookup, positions, result);
            stack.truncate(before);
        }
    }
    rec(0, &tables, db, &mut stack, q, &lookup, &positions, &mut result);
    Ok(result)
}

// ---------------------------------------------------------------------------
// Command execution

struct Machine<'a> {
    db: &'a DatabaseState,
    schema: &'a Schema,
    views: &'a [View],
    memory: BTreeMap<String, Value>,
    trace: Trace,
    steps_left: u64,
    // taint mode state
    taints: Option<BTreeMap<String, BTreeSet<Dep>>>,
    pc: BTreeSet<Dep>,
}

enum Halt {
    Error(InterpError),
    Budget,
}

impl<'a> Machine<'a> {
    fn tick(&mut self) -> Result<(), Halt> {
        if self.steps_left == 0 {
            return Err(Halt::Budget);
        }
        self.steps_left -= 1;
        Ok(())
    }

    fn dep_of(&self, x: &str) -> BTreeSet<Dep> {
        match &self.taints {
            Some(t) => t.get(x).cloned().unwrap_or_else(|| BTreeSet::from([Dep::Var(x.into())])),
            None => BTreeSet::new(),
        }
    }

    fn expr_taint(&self, e: &Expr) -> BTreeSet<Dep> {
        let mut out = self.pc.clone();
        for x in e.free_vars() {
            out.extend(self.dep_of(&x));
        }
        out
    }

    fn exec(&mut self, c: &Command) -> Result<(), Halt> {
        match c {
            Command::Skip => self.tick(),
            Command::Assign(x, e) => {
                self.tick()?;
                let v = eval_expr(e, &self.memory).map_err(Halt::Error)?;
                if self.taints.is_some() {
                    let t = self.expr_taint(e);
                    self.taints.as_mut().unwrap().insert(x.clone(), t);
                }
                self.memory.insert(x.clone(), v);
                Ok(())
            }
            Command::QueryAssign(x, q) => {
                self.tick()?;
                let inlined =
                    crate::frontend::inline_views(q, self.views).map_err(|e| {
                        Halt::Error(InterpError::Type(format!("view inlining failed: {e}")))
                    })?;
                let rows = eval_query(&inlined, self.db, self.schema).map_err(Halt::Error)?;
                if self.taints.is_some() {
                    let mut t = self.pc.clone();
                    t.insert(Dep::Query(q.key()));
                    self.taints.as_mut().unwrap().insert(x.clone(), t);
                }
                self.memory.insert(x.clone(), Value::Tuples(rows));
                Ok(())
            }
            Command::Seq(a, b) => {
                self.exec(a)?;
                self.exec(b)
            }
            Command::If(e, a, b) => {
                self.tick()?;
                let cond = eval_expr(e, &self.memory).and_then(as_int).map_err(Halt::Error)?;
                let saved_pc = self.pc.clone();
                if self.taints.is_some() {
                    self.pc = self.expr_taint(e);
                }
                let r = if cond != 0 { self.exec(a) } else { self.exec(b) };
                self.pc = saved_pc;
                r
            }
            Command::While(e, body) => {
                let saved_pc = self.pc.clone();
                loop {
                    self.tick().inspect_err(|_| self.pc = saved_pc.clone())?;
                    let cond =
                        eval_expr(e, &self.memory).and_then(as_int).map_err(|e| {
                            self.pc = saved_pc.clone();
                            Halt::Error(e)
                        })?;
                    if self.taints.is_some() {
                        // condition taint accumulates across iterations
                        let t = self.expr_taint(e);
                        self.pc.extend(t);
                    }
                    if cond == 0 {
                        break;
                    }
                    self.exec(body).inspect_err(|_| self.pc = saved_pc.clone())?;
                }
                self.pc = saved_pc;
                Ok(())
            }
            Command::Out(e, u) => {
                self.tick()?;
                let v = eval_expr(e, &self.memory).map_err(Halt::Error)?;
                let taints = self.taints.as_ref().map(|_| self.expr_taint(e));
                self.trace.push(Observation { value: v, user: u.clone(), taints });
                Ok(())
            }
        }
    }

    fn queries_for(&self, user: &str) -> BTreeSet<String> {
        self.trace
            .iter()
            .filter(|o| o.user == user)
            .flat_map(|o| o.taints.iter().flatten())
            .filter_map(|d| match d {
                Dep::Query(k) => Some(k.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Execute from all-zero memory. On budget exhaustion the error carries the
/// partial trace.
pub fn run(
    prg: &Command,
    db: &DatabaseState,
    schema: &Schema,
    views: &[View],
    step_budget: u64,
) -> Result<Trace, InterpError> {
    let mut m = Machine {
        db,
        schema,
        views,
        memory: BTreeMap::new(),
        trace: Vec::new(),
        steps_left: step_budget,
        taints: None,
        pc: BTreeSet::new(),
    };
    match m.exec(prg) {
        Ok(()) => Ok(m.trace),
        Err(Halt::Error(e)) => Err(e),
        Err(Halt::Budget) => {
            Err(InterpError::BudgetExceeded { trace: m.trace, queries: BTreeSet::new() })
        }
    }
}

/// Execute with taint tracking; returns the enriched trace and the set of
/// query atoms appearing in the taints of `user`'s outputs.
pub fn taint_run(
    prg: &Command,
    db: &DatabaseState,
    schema: &Schema,
    views: &[View],
    user: &str,
    step_budget: u64,
) -> Result<TaintOutput, InterpError> {
    let mut m = Machine {
        db,
        schema,
        views,
        memory: BTreeMap::new(),
        trace: Vec::new(),
        steps_left: step_budget,
        taints: Some(BTreeMap::new()),
        pc: BTreeSet::from([Dep::Pc]),
    };
    match m.exec(prg) {
        Ok(()) => {
            let queries = m.queries_for(user);
            Ok(TaintOutput { trace: m.trace, queries })
        }
        Err(Halt::Error(e)) => Err(e),
        Err(Halt::Budget) => {
            let queries = m.queries_for(user);
            Err(InterpError::BudgetExceeded { trace: m.trace, queries })
        }
    }
}
