//! Entailment between conjunctions of comparison atoms.
//!
//! The built-in decision procedure handles order atoms over integer columns
//! (difference bounds, unit coefficients) and (dis)equalities over string
//! columns. It is sound everywhere and complete except for integer
//! disequality clusters squeezed into a bounded range (a pigeonhole argument
//! it does not attempt); in that case it reports "satisfiable", which makes
//! `entails` err toward rejection.
//!
//! An optional external backend ships each refutation query as an SMT-LIB 2
//! problem to a solver executable for completeness on demand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Mutex;

use crate::ast::{CmpOp, ComparisonAtom, Constant, Sort, Term};

#[derive(Debug, thiserror::Error)]
pub enum ConstraintError {
    #[error("sort error: {0}")]
    Sort(String),
    #[error("solver backend failed: {0}")]
    Backend(String),
}

type Result<T> = std::result::Result<T, ConstraintError>;

#[derive(Debug, Clone, Default)]
pub enum Backend {
    #[default]
    Builtin,
    External(PathBuf),
}

/// Entailment engine with a per-instance cache of refutation results.
#[derive(Debug, Default)]
pub struct Solver {
    backend: Backend,
    cache: Mutex<BTreeMap<(String, String), bool>>,
}

impl Solver {
    pub fn new(backend: Backend) -> Self {
        Solver { backend, cache: Mutex::new(BTreeMap::new()) }
    }

    /// φ ⊨ ψ: every model of φ satisfies every atom of ψ.
    pub fn entails(&self, phi: &[ComparisonAtom], psi: &[ComparisonAtom]) -> Result<bool> {
        let phi_key = conjunction_key(phi);
        for atom in psi {
            let key = (phi_key.clone(), atom.to_string());
            if let Some(&hit) = self.cache.lock().unwrap().get(&key) {
                if hit {
                    continue;
                }
                return Ok(false);
            }
            let refuted = self.refutes(phi, atom)?;
            self.cache.lock().unwrap().insert(key, refuted);
            if !refuted {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn is_satisfiable(&self, phi: &[ComparisonAtom]) -> Result<bool> {
        match &self.backend {
            Backend::Builtin => builtin_satisfiable(phi),
            Backend::External(path) => external_satisfiable(path, phi, None),
        }
    }

    /// Is φ ∧ ¬atom unsatisfiable?
    fn refutes(&self, phi: &[ComparisonAtom], atom: &ComparisonAtom) -> Result<bool> {
        match &self.backend {
            Backend::External(path) => {
                Ok(!external_satisfiable(path, phi, Some(atom))?)
            }
            Backend::Builtin => {
                let negations: Vec<Vec<ComparisonAtom>> = match (atom.sort, atom.op) {
                    // ¬(a = b) over integers: refute both strict orders
                    (Sort::Int, CmpOp::Eq) => vec![
                        vec![with_op(atom, CmpOp::Lt)],
                        vec![with_op(atom, CmpOp::Gt)],
                    ],
                    (_, op) => vec![vec![with_op(atom, negate_op(op))]],
                };
                for neg in negations {
                    let mut sys: Vec<ComparisonAtom> = phi.to_vec();
                    sys.extend(neg);
                    if builtin_satisfiable(&sys)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
        }
    }
}

fn with_op(a: &ComparisonAtom, op: CmpOp) -> ComparisonAtom {
    ComparisonAtom { lhs: a.lhs.clone(), op, rhs: a.rhs.clone(), sort: a.sort }
}

fn negate_op(op: CmpOp) -> CmpOp {
    match op {
        CmpOp::Lt => CmpOp::Ge,
        CmpOp::Le => CmpOp::Gt,
        CmpOp::Gt => CmpOp::Le,
        CmpOp::Ge => CmpOp::Lt,
        CmpOp::Eq => CmpOp::Ne,
        CmpOp::Ne => CmpOp::Eq,
    }
}

fn conjunction_key(phi: &[ComparisonAtom]) -> String {
    let mut parts: Vec<String> = phi.iter().map(|a| a.to_string()).collect();
    parts.sort();
    parts.dedup();
    parts.join(" AND ")
}

// ---------------------------------------------------------------------------
// Built-in procedure

/// Graph node for the integer fragment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Zero,
    Col(String), // table.column
    Const(i64),
}

fn int_node(t: &Term) -> Result<Node> {
    match t {
        Term::Column(c) => Ok(Node::Col(c.to_string())),
        Term::Const(Constant::Int(n)) => Ok(Node::Const(*n)),
        Term::Const(Constant::Str(_)) => {
            Err(ConstraintError::Sort("string constant in integer atom".into()))
        }
    }
}

fn str_key(t: &Term) -> Result<String> {
    match t {
        Term::Column(c) => Ok(format!("c:{c}")),
        Term::Const(Constant::Str(s)) => Ok(format!("k:{s}")),
        Term::Const(Constant::Int(_)) => {
            Err(ConstraintError::Sort("integer constant in string atom".into()))
        }
    }
}

pub fn builtin_satisfiable(phi: &[ComparisonAtom]) -> Result<bool> {
    // --- string fragment: union-find over columns and constants
    let mut parent: BTreeMap<String, String> = BTreeMap::new();
    fn find(parent: &mut BTreeMap<String, String>, x: &str) -> String {
        let p = parent.entry(x.to_string()).or_insert_with(|| x.to_string()).clone();
        if p == x {
            return p;
        }
        let root = find(parent, &p);
        parent.insert(x.to_string(), root.clone());
        root
    }
    let mut str_diseqs: Vec<(String, String)> = Vec::new();
    // --- integer fragment: difference bounds
    let mut nodes: BTreeSet<Node> = BTreeSet::from([Node::Zero]);
    let mut edges: Vec<(Node, Node, i64)> = Vec::new(); // a - b <= w
    let mut int_diseqs: Vec<(Node, Node)> = Vec::new();

    for a in phi {
        match a.sort {
            Sort::Str => {
                let l = str_key(&a.lhs)?;
                let r = str_key(&a.rhs)?;
                match a.op {
                    CmpOp::Eq => {
                        let (rl, rr) = (find(&mut parent, &l), find(&mut parent, &r));
                        parent.insert(rl, rr);
                    }
                    CmpOp::Ne => str_diseqs.push((l, r)),
                    _ => {
                        return Err(ConstraintError::Sort(
                            "order comparison between strings".into(),
                        ))
                    }
                }
            }
            Sort::Int => {
                let l = int_node(&a.lhs)?;
                let r = int_node(&a.rhs)?;
                nodes.insert(l.clone());
                nodes.insert(r.clone());
                match a.op {
                    CmpOp::Lt => edges.push((l, r, -1)),
                    CmpOp::Le => edges.push((l, r, 0)),
                    CmpOp::Gt => edges.push((r, l, -1)),
                    CmpOp::Ge => edges.push((r, l, 0)),
                    CmpOp::Eq => {
                        edges.push((l.clone(), r.clone(), 0));
                        edges.push((r, l, 0));
                    }
                    CmpOp::Ne => int_diseqs.push((l, r)),
                }
            }
        }
    }

    // string checks: two distinct constants in a class, or an internal diseq
    let keys: Vec<String> = parent.keys().cloned().collect();
    let mut class_const: BTreeMap<String, String> = BTreeMap::new();
    for k in keys {
        let root = find(&mut parent, &k);
        if let Some(c) = k.strip_prefix("k:") {
            if let Some(prev) = class_const.get(&root) {
                if prev != c {
                    return Ok(false);
                }
            } else {
                class_const.insert(root, c.to_string());
            }
        }
    }
    for (l, r) in &str_diseqs {
        if find(&mut parent, l) == find(&mut parent, r) {
            return Ok(false);
        }
    }

    // anchor integer constants to the zero node
    for n in nodes.clone() {
        if let Node::Const(c) = n {
            edges.push((Node::Const(c), Node::Zero, c)); // n - 0 <= c
            edges.push((Node::Zero, Node::Const(c), -c)); // 0 - n <= -c
        }
    }

    // Floyd–Warshall over the difference bounds
    let order: Vec<&Node> = nodes.iter().collect();
    let idx: BTreeMap<&Node, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let n = order.len();
    const INF: i64 = i64::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (a, b, w) in &edges {
        let (i, j) = (idx[a], idx[b]);
        d[i][j] = d[i][j].min(*w);
    }
    for k in 0..n {
        for i in 0..n {
            if d[i][k] == INF {
                continue;
            }
            for j in 0..n {
                if d[k][j] == INF {
                    continue;
                }
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    for i in 0..n {
        if d[i][i] < 0 {
            return Ok(false);
        }
    }
    for (a, b) in &int_diseqs {
        if a == b {
            return Ok(false);
        }
        let (i, j) = (idx[a], idx[b]);
        // both differences bounded by zero forces equality
        if d[i][j] <= 0 && d[j][i] <= 0 {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// External backend

/// Emit φ (∧ ¬negated, when given) as an SMT-LIB 2 problem over linear
/// integer arithmetic; string values are modeled as integers with distinct
/// codes per constant.
pub fn smtlib_problem(phi: &[ComparisonAtom], negated: Option<&ComparisonAtom>) -> String {
    use std::fmt::Write;
    let mut vars: BTreeSet<String> = BTreeSet::new();
    let mut str_consts: BTreeSet<String> = BTreeSet::new();
    let mut visit = |a: &ComparisonAtom| {
        for t in [&a.lhs, &a.rhs] {
            match t {
                Term::Column(c) => {
                    vars.insert(c.to_string());
                }
                Term::Const(Constant::Str(s)) => {
                    str_consts.insert(s.clone());
                }
                Term::Const(Constant::Int(_)) => {}
            }
        }
    };
    phi.iter().for_each(&mut visit);
    if let Some(a) = negated {
        visit(a);
    }
    let codes: BTreeMap<&String, usize> =
        str_consts.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let sym = |c: &str| format!("|{c}|");
    let term = |t: &Term| -> String {
        match t {
            Term::Column(c) => sym(&c.to_string()),
            Term::Const(Constant::Int(n)) => {
                if *n < 0 {
                    format!("(- {})", -n)
                } else {
                    n.to_string()
                }
            }
            Term::Const(Constant::Str(s)) => codes[s].to_string(),
        }
    };
    let atom = |a: &ComparisonAtom| -> String {
        let (l, r) = (term(&a.lhs), term(&a.rhs));
        match a.op {
            CmpOp::Lt => format!("(< {l} {r})"),
            CmpOp::Le => format!("(<= {l} {r})"),
            CmpOp::Eq => format!("(= {l} {r})"),
            CmpOp::Ne => format!("(not (= {l} {r}))"),
            CmpOp::Gt => format!("(> {l} {r})"),
            CmpOp::Ge => format!("(>= {l} {r})"),
        }
    };
    let mut out = String::from("(set-logic QF_LIA)\n");
    for v in &vars {
        let _ = writeln!(out, "(declare-const {} Int)", sym(v));
    }
    for a in phi {
        let _ = writeln!(out, "(assert {})", atom(a));
    }
    if let Some(a) = negated {
        let _ = writeln!(out, "(assert (not {}))", atom(a));
    }
    out.push_str("(check-sat)\n");
    out
}

fn external_satisfiable(
    exe: &std::path::Path,
    phi: &[ComparisonAtom],
    negated: Option<&ComparisonAtom>,
) -> Result<bool> {
    use std::io::Write;
    use std::process::Command;
    let problem = smtlib_problem(phi, negated);
    let mut file = external_tempfile()?;
    file.0
        .write_all(problem.as_bytes())
        .map_err(|e| ConstraintError::Backend(e.to_string()))?;
    let output = Command::new(exe)
        .arg(&file.1)
        .output()
        .map_err(|e| ConstraintError::Backend(format!("cannot run {}: {e}", exe.display())))?;
    let stdout = String::from_utf8_lossy(&output.stdout);
    match stdout.lines().next().map(str::trim) {
        Some("sat") => Ok(true),
        Some("unsat") => Ok(false),
        other => Err(ConstraintError::Backend(format!(
            "expected sat/unsat from {}, got {:?}",
            exe.display(),
            other
        ))),
    }
}

/// (open file handle, path); the file lives in the system temp directory and
/// is cleaned up on drop.
struct TempFile(std::fs::File, PathBuf);

impl Drop for TempFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.1);
    }
}

fn tempfile_in_dir() -> std::io::Result<(std::fs::File, PathBuf)> {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_nanos();
    let path = std::env::temp_dir().join(format!("divcheck-{}-{nanos}.smt2", std::process::id()));
    let file = std::fs::File::create(&path)?;
    Ok((file, path))
}

fn external_tempfile() -> Result<TempFile> {
    let (f, p) = tempfile_in_dir().map_err(|e| ConstraintError::Backend(e.to_string()))?;
    Ok(TempFile(f, p))
}
