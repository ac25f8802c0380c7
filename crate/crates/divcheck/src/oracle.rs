//! Finite-model ground truth. Enumerates every database state of a small
//! model and decides the semantic notions the static pipeline approximates:
//! equivalence relations induced by query sets, determinacy, lattice joins,
//! tilings and tiling-closure membership, program and policy knowledge, and
//! the end-to-end security condition.

use std::collections::{BTreeMap, BTreeSet};

use crate::abstraction::SymbolicTuple;
use crate::ast::*;
use crate::frontend::{inline_views, Source};
use crate::interp::{
    eval_query, project_trace, run, taint_run, DatabaseState, InterpError, Observation,
};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("model config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, Copy)]
pub struct Budgets {
    pub states: usize,
    pub cover_nodes: usize,
    pub steps: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { states: 200_000, cover_nodes: 1_000_000, steps: 100_000 }
    }
}

/// All database states of a finite model, in a fixed enumeration order.
#[derive(Debug, Clone)]
pub struct FiniteModel {
    pub schema: Schema,
    pub states: Vec<DatabaseState>,
}

impl FiniteModel {
    pub fn from_states(schema: Schema, states: Vec<DatabaseState>) -> Self {
        FiniteModel { schema, states }
    }

    /// Enumerate every state: per table, every subset of the row space
    /// (cartesian product of the column domains) whose size is within the
    /// row bounds; across tables, the cartesian product of the choices.
    /// Deterministic: row space is lexicographic in domain order, subsets
    /// enumerated in increasing bitmask order, tables in name order.
    pub fn enumerate(
        schema: &Schema,
        domains: &BTreeMap<String, Vec<Constant>>,
        row_bounds: &BTreeMap<String, (usize, usize)>,
        state_budget: usize,
    ) -> Result<Self> {
        let mut per_table: Vec<(String, Vec<BTreeSet<Vec<Constant>>>)> = Vec::new();
        let mut total: usize = 1;
        for (table, cols) in &schema.tables {
            // row space
            let mut rows: Vec<Vec<Constant>> = vec![Vec::new()];
            for (cname, sort) in cols {
                let key = format!("{table}.{cname}");
                let dom = domains.get(&key).ok_or_else(|| {
                    OracleError::Config(format!("no domain given for column {key}"))
                })?;
                for v in dom {
                    if v.sort() != *sort {
                        return Err(OracleError::Config(format!(
                            "domain value {v} for {key} does not match sort {sort}"
                        )));
                    }
                }
                rows = rows
                    .iter()
                    .flat_map(|r| {
                        dom.iter().map(move |v| {
                            let mut r = r.clone();
                            r.push(v.clone());
                            r
                        })
                    })
                    .collect();
            }
            let n = rows.len();
            let (min, max) = row_bounds.get(table).copied().unwrap_or((0, n));
            let max = max.min(n);
            if n >= usize::BITS as usize - 1 {
                return Err(OracleError::BudgetExceeded(format!(
                    "row space of '{table}' has {n} rows"
                )));
            }
            let mut subsets = Vec::new();
            for mask in 0usize..(1 << n) {
                let k = mask.count_ones() as usize;
                if k < min || k > max {
                    continue;
                }
                let set: BTreeSet<Vec<Constant>> =
                    (0..n).filter(|i| mask & (1 << i) != 0).map(|i| rows[i].clone()).collect();
                subsets.push(set);
                if subsets.len().saturating_mul(total) > state_budget {
                    return Err(OracleError::BudgetExceeded(format!(
                        "model exceeds the state budget of {state_budget}"
                    )));
                }
            }
            total = total.saturating_mul(subsets.len());
            if total > state_budget {
                return Err(OracleError::BudgetExceeded(format!(
                    "model has more than {state_budget} states"
                )));
            }
            per_table.push((table.clone(), subsets));
        }
        // cartesian product across tables
        let mut states = vec![DatabaseState::default()];
        for (table, subsets) in &per_table {
            states = states
                .iter()
                .flat_map(|st| {
                    subsets.iter().map(move |rows| {
                        let mut st = st.clone();
                        st.per_table.insert(table.clone(), rows.clone());
                        st
                    })
                })
                .collect();
        }
        Ok(FiniteModel { schema: schema.clone(), states })
    }

    /// Parse `{domains: {"t.c": [..]}, rows: {"t": {"min":..,"max":..}},
    /// budgets: {..}}`.
    pub fn from_config(schema: &Schema, value: &serde_json::Value) -> Result<(Self, Budgets)> {
        let obj =
            value.as_object().ok_or_else(|| OracleError::Config("expected an object".into()))?;
        let mut domains: BTreeMap<String, Vec<Constant>> = BTreeMap::new();
        if let Some(doms) = obj.get("domains") {
            let doms = doms
                .as_object()
                .ok_or_else(|| OracleError::Config("domains must be an object".into()))?;
            for (col, vals) in doms {
                let vals = vals
                    .as_array()
                    .ok_or_else(|| OracleError::Config(format!("domain of {col} must be an array")))?;
                let mut dom = Vec::new();
                for v in vals {
                    match v {
                        serde_json::Value::Number(n) => dom.push(Constant::Int(
                            n.as_i64().ok_or_else(|| {
                                OracleError::Config(format!("non-integer in domain of {col}"))
                            })?,
                        )),
                        serde_json::Value::String(s) => dom.push(Constant::Str(s.clone())),
                        _ => {
                            return Err(OracleError::Config(format!(
                                "domain of {col} holds a non-scalar"
                            )))
                        }
                    }
                }
                domains.insert(col.clone(), dom);
            }
        }
        let mut rows: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        if let Some(r) = obj.get("rows") {
            let r = r
                .as_object()
                .ok_or_else(|| OracleError::Config("rows must be an object".into()))?;
            for (table, b) in r {
                let min = b["min"].as_u64().unwrap_or(0) as usize;
                let max = b["max"]
                    .as_u64()
                    .ok_or_else(|| OracleError::Config(format!("rows.{table}.max missing")))?
                    as usize;
                rows.insert(table.clone(), (min, max));
            }
        }
        let mut budgets = Budgets::default();
        if let Some(b) = obj.get("budgets") {
            if let Some(v) = b.get("states").and_then(|v| v.as_u64()) {
                budgets.states = v as usize;
            }
            if let Some(v) = b.get("coverNodes").and_then(|v| v.as_u64()) {
                budgets.cover_nodes = v as usize;
            }
            if let Some(v) = b.get("steps").and_then(|v| v.as_u64()) {
                budgets.steps = v;
            }
        }
        let model = Self::enumerate(schema, &domains, &rows, budgets.states)?;
        Ok((model, budgets))
    }
}

// ---------------------------------------------------------------------------
// Partitions

/// Disjoint, exhaustive blocks of state indices.
pub type Partition = BTreeSet<BTreeSet<usize>>;

pub fn partition_by_keys<K: Ord>(keys: Vec<K>) -> Partition {
    let mut groups: BTreeMap<K, BTreeSet<usize>> = BTreeMap::new();
    for (i, k) in keys.into_iter().enumerate() {
        groups.entry(k).or_default().insert(i);
    }
    groups.into_values().collect()
}

pub fn all_partition(n: usize) -> Partition {
    if n == 0 {
        return Partition::new();
    }
    BTreeSet::from([(0..n).collect()])
}

pub fn id_partition(n: usize) -> Partition {
    (0..n).map(|i| BTreeSet::from([i])).collect()
}

/// p refines q: every p-block lies inside some q-block.
pub fn refines(p: &Partition, q: &Partition) -> bool {
    p.iter().all(|b| {
        let repr = match b.iter().next() {
            Some(r) => r,
            None => return true,
        };
        q.iter().any(|c| c.contains(repr) && b.is_subset(c))
    })
}

/// Common refinement of the given partitions (the LoI join).
pub fn loi_join(ps: &[Partition]) -> Partition {
    let mut indexed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in ps {
        for (bi, block) in p.iter().enumerate() {
            for &s in block {
                indexed.entry(s).or_default().push(bi);
            }
        }
    }
    let mut groups: BTreeMap<Vec<usize>, BTreeSet<usize>> = BTreeMap::new();
    for (s, key) in indexed {
        groups.entry(key).or_default().insert(s);
    }
    groups.into_values().collect()
}

// ---------------------------------------------------------------------------
// Query-induced relations

/// Group states by the tuple of all query results.
pub fn eq_relation(queries: &[CqcQuery], model: &FiniteModel) -> Result<Partition> {
    let mut keys = Vec::new();
    for st in &model.states {
        let mut key = Vec::new();
        for q in queries {
            key.push(eval_query(q, st, &model.schema)?);
        }
        keys.push(key);
    }
    Ok(partition_by_keys(keys))
}

/// Q determines Q′: equal Q-results force equal Q′-results on every pair of
/// states.
pub fn determines(q: &[CqcQuery], qp: &[CqcQuery], model: &FiniteModel) -> Result<bool> {
    Ok(refines(&eq_relation(q, model)?, &eq_relation(qp, model)?))
}

/// q1 ⊆ q2 on every state of the model.
pub fn containment(q1: &CqcQuery, q2: &CqcQuery, model: &FiniteModel) -> Result<bool> {
    for st in &model.states {
        let r1 = eval_query(q1, st, &model.schema)?;
        let r2 = eval_query(q2, st, &model.schema)?;
        if !r1.is_subset(&r2) {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Tilings

/// Enumerate exact covers of `universe` using `blocks`; calls `found` with
/// each cover (as block indices); `found` returns false to stop the search.
fn exact_cover(
    universe: &BTreeSet<usize>,
    blocks: &[BTreeSet<usize>],
    node_budget: usize,
    found: &mut dyn FnMut(&[usize]) -> bool,
) -> Result<()> {
    fn rec(
        remaining: &BTreeSet<usize>,
        blocks: &[BTreeSet<usize>],
        chosen: &mut Vec<usize>,
        nodes: &mut usize,
        node_budget: usize,
        found: &mut dyn FnMut(&[usize]) -> bool,
    ) -> Result<bool> {
        *nodes += 1;
        if *nodes > node_budget {
            return Err(OracleError::BudgetExceeded(format!(
                "exact-cover search exceeded {node_budget} nodes"
            )));
        }
        if remaining.is_empty() {
            return Ok(found(chosen));
        }
        // first-fail: branch on the element with the fewest usable blocks
        let mut best: Option<(usize, Vec<usize>)> = None;
        for &e in remaining {
            let cands: Vec<usize> = blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains(&e) && b.is_subset(remaining))
                .map(|(i, _)| i)
                .collect();
            if best.as_ref().map(|(_, c)| cands.len() < c.len()).unwrap_or(true) {
                let empty = cands.is_empty();
                best = Some((e, cands));
                if empty {
                    break;
                }
            }
        }
        let (_, cands) = best.expect("remaining is nonempty");
        for bi in cands {
            let rest: BTreeSet<usize> = remaining.difference(&blocks[bi]).copied().collect();
            chosen.push(bi);
            let keep_going = rec(&rest, blocks, chosen, nodes, node_budget, found)?;
            chosen.pop();
            if !keep_going {
                return Ok(false);
            }
        }
        Ok(true)
    }
    let mut nodes = 0;
    rec(universe, blocks, &mut Vec::new(), &mut nodes, node_budget, found).map(|_| ())
}

/// All tilings of the state space with blocks drawn from the inputs.
pub fn enumerate_mix(ps: &[Partition], n_states: usize, node_budget: usize) -> Result<Vec<Partition>> {
    let mut blocks: Vec<BTreeSet<usize>> = Vec::new();
    let mut seen: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
    for p in ps {
        for b in p {
            if seen.insert(b.clone()) {
                blocks.push(b.clone());
            }
        }
    }
    let universe: BTreeSet<usize> = (0..n_states).collect();
    let mut out: BTreeSet<Partition> = BTreeSet::new();
    exact_cover(&universe, &blocks, node_budget, &mut |chosen| {
        out.insert(chosen.iter().map(|&i| blocks[i].clone()).collect());
        true
    })?;
    Ok(out.into_iter().collect())
}

/// Is E no more informative than the disjunction of `ps`? True iff every
/// E-block can be exactly covered by input blocks lying inside it.
pub fn in_tiling_closure(e: &Partition, ps: &[Partition], node_budget: usize) -> Result<bool> {
    let mut blocks: Vec<BTreeSet<usize>> = Vec::new();
    let mut seen: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
    for p in ps {
        for b in p {
            if seen.insert(b.clone()) {
                blocks.push(b.clone());
            }
        }
    }
    for eb in e {
        let cands: Vec<BTreeSet<usize>> =
            blocks.iter().filter(|b| b.is_subset(eb)).cloned().collect();
        let mut covered = false;
        exact_cover(eb, &cands, node_budget, &mut |_| {
            covered = true;
            false // first cover suffices
        })?;
        if !covered {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Program and policy knowledge

/// Outcome of one bounded run, u-projected.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    trace: Vec<(String, String)>, // (value, user) rendered for ordering
    terminated: bool,
}

fn run_key(trace: &[Observation], user: &str, terminated: bool) -> RunKey {
    RunKey {
        trace: project_trace(trace, user)
            .iter()
            .map(|o| (o.value.to_string(), o.user.clone()))
            .collect(),
        terminated,
    }
}

fn prefix_equivalent(a: &RunKey, b: &RunKey) -> bool {
    match (a.terminated, b.terminated) {
        (true, true) => a.trace == b.trace,
        // a partial trace is compatible with anything it is a prefix of, and
        // with any partial trace comparable to it
        _ => a.trace.starts_with(&b.trace) || b.trace.starts_with(&a.trace),
    }
}

/// Group states by what `user` observes. Budget-exceeded runs compare by
/// trace prefixes; if that comparison is not transitive on this model, the
/// grouping is ambiguous and reported as a budget error.
pub fn program_knowledge(
    prg: &Command,
    user: &str,
    src: &Source,
    model: &FiniteModel,
    steps: u64,
) -> Result<Partition> {
    let mut keys: Vec<RunKey> = Vec::new();
    for st in &model.states {
        match run(prg, st, &model.schema, &src.views, steps) {
            Ok(trace) => keys.push(run_key(&trace, user, true)),
            Err(InterpError::BudgetExceeded { trace, .. }) => {
                keys.push(run_key(&trace, user, false))
            }
            Err(e) => return Err(e.into()),
        }
    }
    let n = keys.len();
    // union-find over states
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if prefix_equivalent(&keys[i], &keys[j]) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut blocks: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        blocks.entry(r).or_default().insert(i);
    }
    // consistency: every pair inside a block must be equivalent
    for block in blocks.values() {
        for &i in block {
            for &j in block {
                if i < j && !prefix_equivalent(&keys[i], &keys[j]) {
                    return Err(OracleError::BudgetExceeded(
                        "trace-prefix grouping is ambiguous under the step budget".into(),
                    ));
                }
            }
        }
    }
    Ok(blocks.into_values().collect())
}

/// One partition per policy conjunction: states grouped by the
/// materializations of every table/view in the conjunction.
pub fn policy_knowledge(src: &Source, user: &str, model: &FiniteModel) -> Result<Vec<Partition>> {
    let mut out = Vec::new();
    let Some(disj) = src.policy.per_user.get(user) else {
        return Ok(out);
    };
    for conj in disj {
        let mut queries = Vec::new();
        for id in conj {
            let q = if src.schema.tables.contains_key(id) {
                crate::abstraction::full_table_query(&src.schema, id)
            } else {
                let v = src.views.iter().find(|v| &v.id == id).expect("validated");
                inline_views(&v.query, &src.views)
                    .map_err(|e| OracleError::Config(e.to_string()))?
            };
            queries.push(q);
        }
        out.push(eq_relation(&queries, model)?);
    }
    Ok(out)
}

/// Def.-7-style security at finite scale: the program's knowledge partition
/// must be tileable from the policy's knowledge partitions.
pub fn end_to_end_secure(
    src: &Source,
    user: &str,
    model: &FiniteModel,
    budgets: &Budgets,
) -> Result<bool> {
    let prg_know = program_knowledge(&src.program, user, src, model, budgets.steps)?;
    let pol_know = policy_knowledge(src, user, model)?;
    in_tiling_closure(&prg_know, &pol_know, budgets.cover_nodes)
}

/// Group states by the taint dependency set Q(db), then by the results of
/// the queries in it.
pub fn k_relation(
    prg: &Command,
    user: &str,
    src: &Source,
    model: &FiniteModel,
    steps: u64,
) -> Result<Partition> {
    let inlined = src
        .inlined_queries()
        .map_err(|e| OracleError::Config(e.to_string()))?;
    let mut keys = Vec::new();
    for st in &model.states {
        let out = taint_run(prg, st, &model.schema, &src.views, user, steps)?;
        let mut results = Vec::new();
        for k in &out.queries {
            let q = inlined
                .get(k)
                .ok_or_else(|| OracleError::Config(format!("unknown query atom {k}")))?;
            results.push(eval_query(q, st, &model.schema)?);
        }
        keys.push((out.queries, results));
    }
    Ok(partition_by_keys(keys))
}

/// Evaluate a symbolic tuple on a state: the φ-filtered product of T
/// projected on π (π in column order).
pub fn symbolic_tuple_eval(
    st: &SymbolicTuple,
    db: &DatabaseState,
    schema: &Schema,
) -> Result<BTreeSet<Vec<Constant>>> {
    let q = CqcQuery {
        heading: st.pi.iter().cloned().collect(),
        table_refs: st.tables.clone(),
        atoms: st.phi.clone(),
    };
    Ok(eval_query(&q, db, schema)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_source;

    fn consts(vals: &[i64]) -> Vec<Constant> {
        vals.iter().map(|&v| Constant::Int(v)).collect()
    }

    fn part(bs: &[&[usize]]) -> Partition {
        bs.iter().map(|b| b.iter().copied().collect()).collect()
    }

    // one table t(v:int), exactly one row, domain -2..3; state i holds value
    // domain[i]
    fn six_value_model() -> (Source, FiniteModel) {
        let src = parse_source("@Table@ t(v: int)\nskip;\n").unwrap();
        let domains =
            BTreeMap::from([("t.v".to_string(), consts(&[-2, -1, 0, 1, 2, 3]))]);
        let rows = BTreeMap::from([("t".to_string(), (1, 1))]);
        let model = FiniteModel::enumerate(&src.schema, &domains, &rows, 1000).unwrap();
        (src, model)
    }

    #[test]
    fn state_counting() {
        let src = parse_source("@Table@ t(v: int)\nskip;\n").unwrap();
        let domains = BTreeMap::from([("t.v".to_string(), consts(&[0, 1]))]);
        let rows = BTreeMap::from([("t".to_string(), (0, 1))]);
        let m = FiniteModel::enumerate(&src.schema, &domains, &rows, 1000).unwrap();
        assert_eq!(m.states.len(), 3); // {}, {0}, {1}
        let rows = BTreeMap::from([("t".to_string(), (0, 2))]);
        let m = FiniteModel::enumerate(&src.schema, &domains, &rows, 1000).unwrap();
        assert_eq!(m.states.len(), 4);
    }

    #[test]
    fn state_counting_one_row_products() {
        let src = parse_source(
            "@Table@ emp(name: str, role: str, salary: int)\nskip;\n",
        )
        .unwrap();
        let domains = BTreeMap::from([
            ("emp.name".to_string(), vec![Constant::Str("a".into()), Constant::Str("b".into())]),
            (
                "emp.role".to_string(),
                vec![Constant::Str("CEO".into()), Constant::Str("Intern".into())],
            ),
            ("emp.salary".to_string(), consts(&[0, 1])),
        ]);
        let rows = BTreeMap::from([("emp".to_string(), (1, 1))]);
        let m = FiniteModel::enumerate(&src.schema, &domains, &rows, 1000).unwrap();
        assert_eq!(m.states.len(), 8); // |name| * |role| * |salary|
    }

    #[test]
    fn state_budget_is_enforced() {
        let src = parse_source("@Table@ t(v: int)\nskip;\n").unwrap();
        let domains = BTreeMap::from([("t.v".to_string(), consts(&[0, 1, 2, 3]))]);
        let rows = BTreeMap::from([("t".to_string(), (0, 4))]);
        assert!(matches!(
            FiniteModel::enumerate(&src.schema, &domains, &rows, 10),
            Err(OracleError::BudgetExceeded(_))
        ));
    }

    #[test]
    fn eq_relation_of_empty_query_set_is_all() {
        let (_, model) = six_value_model();
        assert_eq!(eq_relation(&[], &model).unwrap(), all_partition(6));
    }

    const PRG_MAIN: &str = "x <- SELECT v FROM t;\n\
        if x <= 0 then {\n  out(-1, u);\n  out(x mod 2 == 0, u);\n}\n\
        else {\n  out(1, u);\n  out(x div 2 == 0, u);\n}\n";
    const PRG_Q: &str = "x <- SELECT v FROM t;\n\
        if x <= 0 then {\n  out(-1, u);\n} else {\n  out(1, u);\n}\n\
        out(x mod 2 == 0, u);\n";
    const PRG_P: &str = "x <- SELECT v FROM t;\n\
        if x <= 0 then {\n  out(-1, u);\n} else {\n  out(1, u);\n}\n\
        out(x div 2 == 0, u);\n";

    fn knowledge_of(body: &str) -> Partition {
        let src = parse_source(&format!("@Table@ t(v: int)\n{body}")).unwrap();
        let (_, model) = six_value_model();
        program_knowledge(&src.program, "u", &src, &model, 10_000).unwrap()
    }

    // state indices: 0:-2 1:-1 2:0 3:1 4:2 5:3
    #[test]
    fn six_value_knowledge_partitions() {
        assert_eq!(knowledge_of(PRG_MAIN), part(&[&[0, 2], &[1], &[3], &[4, 5]]));
        assert_eq!(knowledge_of(PRG_Q), part(&[&[0, 2], &[1], &[4], &[3, 5]]));
        assert_eq!(knowledge_of(PRG_P), part(&[&[0, 1], &[2], &[3], &[4, 5]]));
    }

    #[test]
    fn loi_join_examples() {
        let q = part(&[&[0, 2], &[1], &[4], &[3, 5]]);
        let p = part(&[&[0, 1], &[2], &[3], &[4, 5]]);
        assert_eq!(loi_join(&[q.clone(), all_partition(6)]), q);
        assert_eq!(loi_join(&[q.clone(), p]), id_partition(6));
        assert_eq!(loi_join(&[q.clone(), q.clone()]), q);
    }

    #[test]
    fn mix_of_branch_relations() {
        let q = part(&[&[0, 2], &[1], &[4], &[3, 5]]);
        let p = part(&[&[0, 1], &[2], &[3], &[4, 5]]);
        let prg = part(&[&[0, 2], &[1], &[3], &[4, 5]]);
        let r = part(&[&[0, 1], &[2], &[3, 5], &[4]]);
        let mix = enumerate_mix(&[q.clone(), p.clone()], 6, 100_000).unwrap();
        let expect: BTreeSet<Partition> = [q.clone(), p.clone(), r, prg.clone()].into();
        assert_eq!(mix.iter().cloned().collect::<BTreeSet<_>>(), expect);
        // single input: only itself
        assert_eq!(enumerate_mix(std::slice::from_ref(&q), 6, 100_000).unwrap(), vec![q.clone()]);
        // membership without materializing the mix
        assert!(in_tiling_closure(&prg, &[q.clone(), p.clone()], 100_000).unwrap());
        assert!(in_tiling_closure(&all_partition(6), &[q, p], 100_000).unwrap());
        assert!(!in_tiling_closure(&id_partition(2), &[all_partition(2)], 100_000).unwrap());
    }

    #[test]
    fn mix_closure_sanity() {
        let q = part(&[&[0, 2], &[1], &[4], &[3, 5]]);
        let p = part(&[&[0, 1], &[2], &[3], &[4, 5]]);
        let mix: Vec<Partition> = enumerate_mix(&[q.clone(), p.clone()], 6, 100_000).unwrap();
        assert!(mix.contains(&q) && mix.contains(&p));
        let again = enumerate_mix(&mix, 6, 100_000).unwrap();
        assert_eq!(
            again.iter().collect::<BTreeSet<_>>(),
            mix.iter().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn knowledge_trivial_cases() {
        assert_eq!(knowledge_of("skip;\n"), all_partition(6));
        assert_eq!(knowledge_of("out(7, u);\n"), all_partition(6));
        // nonterminating program: all traces empty prefixes, single block
        assert_eq!(knowledge_of("while 1 do {\n  skip;\n}\n"), all_partition(6));
    }

    // the containment-vs-determinacy counterexample: two logical copies of a
    // table plus a lookup table encoding v -> v - 100
    fn copies_model() -> (Source, FiniteModel) {
        let text = "@Table@ lookup(small: int, big: int)\n\
                    @Table@ t1(v1: int)\n\
                    @Table@ t2(v2: int)\n\
                    skip;\n";
        let src = parse_source(text).unwrap();
        let lookup: BTreeSet<Vec<Constant>> =
            [consts(&[0, 100]), consts(&[1, 101])].into();
        let mk = |s: i64| {
            let rows: BTreeSet<Vec<Constant>> =
                [consts(&[0]), consts(&[1]), consts(&[100 + s])].into();
            DatabaseState {
                per_table: BTreeMap::from([
                    ("lookup".to_string(), lookup.clone()),
                    ("t1".to_string(), rows.clone()),
                    ("t2".to_string(), rows),
                ]),
            }
        };
        let model = FiniteModel::from_states(src.schema.clone(), vec![mk(0), mk(1)]);
        (src, model)
    }

    fn parse_query(src_text: &str) -> CqcQuery {
        let src = parse_source(src_text).unwrap();
        match &src.program {
            Command::QueryAssign(_, q) => q.clone(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn containment_without_determinacy() {
        let (_, model) = copies_model();
        let prefix = "@Table@ lookup(small: int, big: int)\n\
                      @Table@ t1(v1: int)\n\
                      @Table@ t2(v2: int)\n";
        let q1 = parse_query(&format!(
            "{prefix}x <- SELECT v1 FROM t1, t2 WHERE v1 < 100;\n"
        ));
        let q2 = parse_query(&format!(
            "{prefix}x <- SELECT small FROM lookup, t1 WHERE big = v1 AND v1 > 1;\n"
        ));
        // q1 is constant {0,1}; q2 reveals the secret offset
        let s0 = &model.states[0];
        let s1 = &model.states[1];
        assert_eq!(eval_query(&q1, s0, &model.schema).unwrap(), [consts(&[0]), consts(&[1])].into());
        assert_eq!(eval_query(&q1, s1, &model.schema).unwrap(), [consts(&[0]), consts(&[1])].into());
        assert_eq!(eval_query(&q2, s0, &model.schema).unwrap(), [consts(&[0])].into());
        assert_eq!(eval_query(&q2, s1, &model.schema).unwrap(), [consts(&[1])].into());
        // containment holds on every state ...
        assert!(containment(&q2, &q1, &model).unwrap());
        // ... but seeing q1 does not determine q2
        assert!(!determines(
            std::slice::from_ref(&q1),
            std::slice::from_ref(&q2),
            &model
        )
        .unwrap());
        assert!(determines(std::slice::from_ref(&q2), std::slice::from_ref(&q2), &model).unwrap());
        // eq({q2}) separates the two states; eq({q1}) does not
        assert_eq!(eq_relation(std::slice::from_ref(&q2), &model).unwrap(), id_partition(2));
        assert_eq!(eq_relation(std::slice::from_ref(&q1), &model).unwrap(), all_partition(2));
    }

    #[test]
    fn projection_is_determined_by_wider_projection() {
        let text = "@Table@ emp(name: str, role: str, salary: int)\nskip;\n";
        let src = parse_source(text).unwrap();
        let domains = BTreeMap::from([
            ("emp.name".to_string(), vec![Constant::Str("a".into()), Constant::Str("b".into())]),
            (
                "emp.role".to_string(),
                vec![Constant::Str("CEO".into()), Constant::Str("Intern".into())],
            ),
            ("emp.salary".to_string(), consts(&[0])),
        ]);
        let rows = BTreeMap::from([("emp".to_string(), (0, 1))]);
        let model = FiniteModel::enumerate(&src.schema, &domains, &rows, 1000).unwrap();
        let prefix = "@Table@ emp(name: str, role: str, salary: int)\n";
        let wide = parse_query(&format!("{prefix}x <- SELECT name, role FROM emp;\n"));
        let narrow = parse_query(&format!("{prefix}x <- SELECT role FROM emp;\n"));
        assert!(determines(
            std::slice::from_ref(&wide),
            std::slice::from_ref(&narrow),
            &model
        )
        .unwrap());
        assert!(!determines(
            std::slice::from_ref(&narrow),
            std::slice::from_ref(&wide),
            &model
        )
        .unwrap());
    }

    #[test]
    fn stronger_filter_is_contained_in_weaker() {
        let (_, model) = six_value_model();
        let strong = parse_query("@Table@ t(v: int)\nx <- SELECT v FROM t WHERE v > 1;\n");
        let weak = parse_query("@Table@ t(v: int)\nx <- SELECT v FROM t WHERE v > 0;\n");
        assert!(containment(&strong, &weak, &model).unwrap());
        assert!(containment(&strong, &strong, &model).unwrap());
        assert!(!containment(&weak, &strong, &model).unwrap());
    }

    const CLINIC: &str = "@Table@ emp(name: str, role: str, salary: int)\n\
        @View@ v1 = SELECT role, name FROM emp\n\
        @View@ v2 = SELECT role, salary FROM emp\n\
        @Policy@ u : {v1} | {v2}\n";

    fn clinic_model(src: &Source) -> FiniteModel {
        let domains = BTreeMap::from([
            ("emp.name".to_string(), vec![Constant::Str("a".into()), Constant::Str("b".into())]),
            (
                "emp.role".to_string(),
                vec![Constant::Str("CEO".into()), Constant::Str("Intern".into())],
            ),
            ("emp.salary".to_string(), consts(&[0, 1])),
        ]);
        let rows = BTreeMap::from([("emp".to_string(), (1, 1))]);
        FiniteModel::enumerate(&src.schema, &domains, &rows, 1000).unwrap()
    }

    #[test]
    fn guarded_query_program_is_end_to_end_secure() {
        let text = format!(
            "{CLINIC}if y > 0 then {{\n  x <- SELECT role, salary FROM emp WHERE role = 'Intern';\n}}\n\
             else {{\n  x <- SELECT role, name FROM emp WHERE role = 'CEO';\n}}\nout(x, u);\n"
        );
        let src = parse_source(&text).unwrap();
        let model = clinic_model(&src);
        assert!(end_to_end_secure(&src, "u", &model, &Budgets::default()).unwrap());
    }

    #[test]
    fn leaking_both_views_is_not_secure() {
        // outputs both the name side and the salary side: more than either
        // disjunct allows
        let text = format!(
            "{CLINIC}x <- SELECT role, name FROM emp;\nout(x, u);\n\
             y <- SELECT role, salary FROM emp;\nout(y, u);\n"
        );
        let src = parse_source(&text).unwrap();
        let model = clinic_model(&src);
        assert!(!end_to_end_secure(&src, "u", &model, &Budgets::default()).unwrap());
    }

    #[test]
    fn policy_of_all_tables_is_id() {
        let text = format!("{CLINIC}@Policy@ w : {{emp}}\nskip;\n");
        let src = parse_source(&text).unwrap();
        let model = clinic_model(&src);
        let ps = policy_knowledge(&src, "w", &model).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0], id_partition(model.states.len()));
    }

    #[test]
    fn k_relation_of_straight_line_query() {
        let text = "@Table@ t(v: int)\nx <- SELECT v FROM t;\nout(x, u);\n";
        let src = parse_source(text).unwrap();
        let (_, model) = six_value_model();
        let q = parse_query("@Table@ t(v: int)\nx <- SELECT v FROM t;\n");
        let k = k_relation(&src.program, "u", &src, &model, 10_000).unwrap();
        assert_eq!(k, eq_relation(std::slice::from_ref(&q), &model).unwrap());
        // no outputs: single block
        let src2 = parse_source("@Table@ t(v: int)\nx <- SELECT v FROM t;\n").unwrap();
        let k2 = k_relation(&src2.program, "u", &src2, &model, 10_000).unwrap();
        assert_eq!(k2, all_partition(6));
    }

    #[test]
    fn knowledge_k_eq_sandwich_on_branching_program() {
        // program knowledge refines k; k refines eq of the taken query set
        let text = "@Table@ t(v: int)\n\
                    x <- SELECT v FROM t;\n\
                    if x > 0 then {\n  out(1, u);\n} else {\n  out(0, u);\n}\n";
        let src = parse_source(text).unwrap();
        let (_, model) = six_value_model();
        let know = program_knowledge(&src.program, "u", &src, &model, 10_000).unwrap();
        let k = k_relation(&src.program, "u", &src, &model, 10_000).unwrap();
        let q = parse_query("@Table@ t(v: int)\nx <- SELECT v FROM t;\n");
        let eq = eq_relation(std::slice::from_ref(&q), &model).unwrap();
        assert!(refines(&eq, &k));
        assert!(refines(&k, &know));
    }

    #[test]
    fn symbolic_tuple_eval_matches_query_eval() {
        let (_, model) = six_value_model();
        let q = parse_query("@Table@ t(v: int)\nx <- SELECT v FROM t WHERE v > 0;\n");
        let st = crate::abstraction::sts_query(&q);
        for db in &model.states {
            assert_eq!(
                symbolic_tuple_eval(&st, db, &model.schema).unwrap(),
                eval_query(&q, db, &model.schema).unwrap()
            );
        }
    }

    #[test]
    fn symbolic_tuple_eval_join_example() {
        let text = "@Table@ emp(name: str, role: str, salary: int)\n\
                    @Table@ mng(division: str, manager: str)\n\
                    x <- SELECT division FROM emp, mng WHERE name = manager AND salary > 50;\n";
        let src = parse_source(text).unwrap();
        let q = match &src.program {
            Command::QueryAssign(_, q) => q.clone(),
            other => panic!("{other:?}"),
        };
        let db = DatabaseState::from_json(
            &serde_json::json!({"emp": [["a", "ceo", 60]], "mng": [["d1", "a"]]}),
            &src.schema,
        )
        .unwrap();
        let st = crate::abstraction::sts_query(&q);
        assert_eq!(
            symbolic_tuple_eval(&st, &db, &src.schema).unwrap(),
            [vec![Constant::Str("d1".into())]].into()
        );
        // full-table tuple evaluates to the table itself
        let full =
            crate::abstraction::sts_query(&crate::abstraction::full_table_query(&src.schema, "mng"));
        assert_eq!(
            symbolic_tuple_eval(&full, &db, &src.schema).unwrap(),
            [vec![Constant::Str("d1".into()), Constant::Str("a".into())]].into()
        );
    }

    #[test]
    fn model_config_parsing() {
        let src = parse_source("@Table@ t(v: int)\nskip;\n").unwrap();
        let cfg = serde_json::json!({
            "domains": {"t.v": [0, 1]},
            "rows": {"t": {"min": 0, "max": 1}},
            "budgets": {"states": 50, "coverNodes": 1000, "steps": 99}
        });
        let (model, budgets) = FiniteModel::from_config(&src.schema, &cfg).unwrap();
        assert_eq!(model.states.len(), 3);
        assert_eq!(budgets.states, 50);
        assert_eq!(budgets.cover_nodes, 1000);
        assert_eq!(budgets.steps, 99);
    }
}
