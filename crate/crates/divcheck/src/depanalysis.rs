//! Path-sensitive dependency analysis. Environments map each program
//! variable, user, and the program counter to a *set of sets* of
//! dependencies: the outer level is disjunctive (one set per execution
//! shape), the inner level conjunctive.

use std::collections::{BTreeMap, BTreeSet};

use crate::ast::{Command, Expr};
use crate::interp::Dep;

pub type SetOfSets = BTreeSet<BTreeSet<Dep>>;

/// Total map over the program's finite universe of analysis variables
/// (program variables, users, and `pc`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyEnv {
    pub entries: BTreeMap<Dep, SetOfSets>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("dependency fixpoint did not stabilize within {cap} iterations")]
    IterationCapExceeded { cap: usize },
}

pub const DEFAULT_ITERATION_CAP: usize = 10_000;

impl DependencyEnv {
    /// Identity environment: every x depends exactly on itself.
    pub fn identity(universe: &BTreeSet<Dep>) -> Self {
        let entries = universe
            .iter()
            .map(|x| (x.clone(), BTreeSet::from([BTreeSet::from([x.clone()])])))
            .collect();
        DependencyEnv { entries }
    }

    pub fn get(&self, x: &Dep) -> SetOfSets {
        match self.entries.get(x) {
            Some(s) => s.clone(),
            // query atoms (and anything outside the universe) are constants
            None => BTreeSet::from([BTreeSet::from([x.clone()])]),
        }
    }

    pub fn with(mut self, x: Dep, v: SetOfSets) -> Self {
        self.entries.insert(x, v);
        self
    }
}

/// Disjunctive join ⊗: every way of picking one inner set from each part,
/// unioned.
pub fn env_join(parts: &[SetOfSets]) -> SetOfSets {
    let mut acc: SetOfSets = BTreeSet::from([BTreeSet::new()]);
    for part in parts {
        let mut next = BTreeSet::new();
        for base in &acc {
            for s in part {
                let mut u = base.clone();
                u.extend(s.iter().cloned());
                next.insert(u);
            }
        }
        acc = next;
    }
    acc
}

/// Sequential composition Γ₂;Γ₁: resolve each dependency recorded by Γ₂
/// through Γ₁.
pub fn env_compose(g2: &DependencyEnv, g1: &DependencyEnv) -> DependencyEnv {
    let entries = g2
        .entries
        .iter()
        .map(|(x, outer)| {
            let mut result: SetOfSets = BTreeSet::new();
            for s in outer {
                let parts: Vec<SetOfSets> = s.iter().map(|y| g1.get(y)).collect();
                result.extend(env_join(&parts));
            }
            (x.clone(), result)
        })
        .collect();
    DependencyEnv { entries }
}

/// Pointwise union ⋓ of the outer sets.
pub fn env_union(g1: &DependencyEnv, g2: &DependencyEnv) -> DependencyEnv {
    let mut entries = g1.entries.clone();
    for (x, v) in &g2.entries {
        entries.entry(x.clone()).or_default().extend(v.iter().cloned());
    }
    DependencyEnv { entries }
}

/// Γ* = ⋃_{n>0} Γⁿ, accumulated until stable.
pub fn env_fixpoint(g: &DependencyEnv, cap: usize) -> Result<DependencyEnv, AnalysisError> {
    let mut power = g.clone();
    let mut acc = g.clone();
    for _ in 0..cap {
        power = env_compose(&power, g);
        let next = env_union(&acc, &power);
        if next == acc {
            return Ok(acc);
        }
        acc = next;
    }
    Err(AnalysisError::IterationCapExceeded { cap })
}

fn expr_deps(e: &Expr) -> BTreeSet<Dep> {
    let mut s: BTreeSet<Dep> = e.free_vars().into_iter().map(Dep::Var).collect();
    s.insert(Dep::Pc);
    s
}

fn analyze_cmd(
    c: &Command,
    universe: &BTreeSet<Dep>,
    cap: usize,
) -> Result<DependencyEnv, AnalysisError> {
    let id = || DependencyEnv::identity(universe);
    Ok(match c {
        Command::Skip => id(),
        Command::Assign(x, e) => {
            id().with(Dep::Var(x.clone()), BTreeSet::from([expr_deps(e)]))
        }
        Command::QueryAssign(x, q) => id().with(
            Dep::Var(x.clone()),
            BTreeSet::from([BTreeSet::from([Dep::Query(q.key()), Dep::Pc])]),
        ),
        Command::Out(e, u) => {
            let mut s = expr_deps(e);
            s.insert(Dep::Var(u.clone()));
            id().with(Dep::Var(u.clone()), BTreeSet::from([s]))
        }
        Command::Seq(c1, c2) => {
            let g1 = analyze_cmd(c1, universe, cap)?;
            let g2 = analyze_cmd(c2, universe, cap)?;
            env_compose(&g2, &g1)
        }
        Command::If(e, c1, c2) => {
            let pc_env = id().with(Dep::Pc, BTreeSet::from([expr_deps(e)]));
            let g1 = env_compose(&analyze_cmd(c1, universe, cap)?, &pc_env);
            let g2 = env_compose(&analyze_cmd(c2, universe, cap)?, &pc_env);
            env_union(&g1, &g2)
                .with(Dep::Pc, BTreeSet::from([BTreeSet::from([Dep::Pc])]))
        }
        Command::While(e, body) => {
            let pc_env = id().with(Dep::Pc, BTreeSet::from([expr_deps(e)]));
            let gc = env_compose(&analyze_cmd(body, universe, cap)?, &pc_env);
            env_fixpoint(&gc, cap)?
                .with(Dep::Pc, BTreeSet::from([BTreeSet::from([Dep::Pc])]))
        }
    })
}

/// Universe of analysis variables for a program: its variables and users,
/// plus `pc`.
pub fn universe_of(prg: &Command) -> BTreeSet<Dep> {
    let mut u: BTreeSet<Dep> = prg.variables().into_iter().map(Dep::Var).collect();
    u.extend(prg.users().into_iter().map(Dep::Var));
    u.insert(Dep::Pc);
    u
}

/// Run the analysis over the whole program.
pub fn analyze(prg: &Command, cap: usize) -> Result<DependencyEnv, AnalysisError> {
    analyze_cmd(prg, &universe_of(prg), cap)
}

/// QLᵤ: the user's disjunctive dependency sets restricted to query atoms.
pub fn extract_ql(g: &DependencyEnv, user: &str) -> BTreeSet<BTreeSet<String>> {
    match g.entries.get(&Dep::Var(user.to_string())) {
        None => BTreeSet::new(),
        Some(outer) => outer
            .iter()
            .map(|s| {
                s.iter()
                    .filter_map(|d| match d {
                        Dep::Query(k) => Some(k.clone()),
                        _ => None,
                    })
                    .collect()
            })
            .collect(),
    }
}

/// JSON view of an environment: variable → sorted list of sorted dependency
/// lists.
pub fn env_to_json(g: &DependencyEnv) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (x, outer) in &g.entries {
        let sets: Vec<serde_json::Value> = outer
            .iter()
            .map(|s| {
                serde_json::Value::Array(
                    s.iter().map(|d| serde_json::Value::String(dep_name(d))).collect(),
                )
            })
            .collect();
        map.insert(dep_name(x), serde_json::Value::Array(sets));
    }
    serde_json::Value::Object(map)
}

pub fn dep_name(d: &Dep) -> String {
    match d {
        Dep::Var(x) => x.clone(),
        Dep::Pc => "pc".to_string(),
        Dep::Query(k) => k.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_source;

    fn v(x: &str) -> Dep {
        Dep::Var(x.to_string())
    }

    fn q(k: &str) -> Dep {
        Dep::Query(k.to_string())
    }

    fn sos(sets: &[&[Dep]]) -> SetOfSets {
        sets.iter().map(|s| s.iter().cloned().collect()).collect()
    }

    #[test]
    fn join_worked_example() {
        let a = sos(&[&[v("x"), v("y")], &[v("z"), v("y")]]);
        let b = sos(&[&[v("w")], &[v("x"), v("z")]]);
        let expect = sos(&[
            &[v("x"), v("y"), v("w")],
            &[v("x"), v("y"), v("z")],
            &[v("z"), v("y"), v("w")],
        ]);
        assert_eq!(env_join(&[a, b]), expect);
    }

    #[test]
    fn join_unit_and_idempotence() {
        let p = sos(&[&[v("a"), v("b")], &[v("c")]]);
        let unit: SetOfSets = BTreeSet::from([BTreeSet::new()]);
        assert_eq!(env_join(&[p.clone(), unit]), p);
        let a = sos(&[&[v("a")]]);
        assert_eq!(env_join(&[a.clone(), a.clone()]), a);
    }

    #[test]
    fn compose_worked_pair() {
        let universe: BTreeSet<Dep> = [v("x"), v("y"), Dep::Pc].into();
        let g1 = DependencyEnv::identity(&universe)
            .with(v("x"), sos(&[&[v("x")], &[v("y")]]))
            .with(v("y"), sos(&[&[v("y")]]))
            .with(Dep::Pc, sos(&[&[v("y"), Dep::Pc]]));
        let g2 = DependencyEnv::identity(&universe)
            .with(v("x"), sos(&[&[Dep::Pc, v("x")]]))
            .with(v("y"), sos(&[&[Dep::Pc, v("y")]]))
            .with(Dep::Pc, sos(&[&[Dep::Pc]]));
        let g = env_compose(&g2, &g1);
        assert_eq!(g.get(&v("x")), sos(&[&[v("x"), v("y"), Dep::Pc], &[v("y"), Dep::Pc]]));
        assert_eq!(g.get(&v("y")), sos(&[&[Dep::Pc, v("y")]]));
        assert_eq!(g.get(&Dep::Pc), sos(&[&[v("y"), Dep::Pc]]));
    }

    #[test]
    fn compose_identity_is_unit() {
        let universe: BTreeSet<Dep> = [v("x"), v("y"), Dep::Pc].into();
        let g = DependencyEnv::identity(&universe)
            .with(v("x"), sos(&[&[v("y"), Dep::Pc], &[v("x")]]));
        let id = DependencyEnv::identity(&universe);
        assert_eq!(env_compose(&g, &id), g);
        assert_eq!(env_compose(&id, &g), g);
    }

    #[test]
    fn union_idempotent() {
        let universe: BTreeSet<Dep> = [v("x"), Dep::Pc].into();
        let g = DependencyEnv::identity(&universe).with(v("x"), sos(&[&[v("x"), Dep::Pc]]));
        assert_eq!(env_union(&g, &g), g);
    }

    #[test]
    fn fixpoint_of_identity() {
        let universe: BTreeSet<Dep> = [v("x"), Dep::Pc].into();
        let id = DependencyEnv::identity(&universe);
        assert_eq!(env_fixpoint(&id, 100).unwrap(), id);
    }

    #[test]
    fn loop_body_dependency_closure() {
        // while c > 0 do { x := x + y; }
        let text = "@Table@ t(vv: int)\nwhile c > 0 do {\n  x := x + y;\n}\n";
        let src = parse_source(text).unwrap();
        let g = analyze(&src.program, 100).unwrap();
        // x keeps accumulating x, y and the condition through pc
        assert_eq!(g.get(&v("x")), sos(&[&[v("x"), v("y"), v("c"), Dep::Pc]]));
        // a variable the body never assigns keeps its identity entry
        assert_eq!(g.get(&v("y")), sos(&[&[v("y")]]));
        // pc is reset after the loop
        assert_eq!(g.get(&Dep::Pc), sos(&[&[Dep::Pc]]));
    }

    #[test]
    fn skip_is_identity_and_output_records_history() {
        let src = parse_source("@Table@ t(vv: int)\nskip;\n").unwrap();
        let g = analyze(&src.program, 100).unwrap();
        assert_eq!(g, DependencyEnv::identity(&universe_of(&src.program)));

        let src = parse_source("@Table@ t(vv: int)\nout(x, u);\n").unwrap();
        let g = analyze(&src.program, 100).unwrap();
        assert_eq!(g.get(&v("u")), sos(&[&[v("x"), Dep::Pc, v("u")]]));
    }

    #[test]
    fn branch_assignments_stay_disjunctive() {
        let text = "@Table@ t(vv: int)\n\
                    if y > 0 then {\n  x := w + z;\n} else {\n  x := x + 1;\n}\nout(x, u);\n";
        let src = parse_source(text).unwrap();
        let g = analyze(&src.program, 100).unwrap();
        assert_eq!(
            g.get(&v("x")),
            sos(&[&[v("y"), v("w"), v("z"), Dep::Pc], &[v("y"), v("x"), Dep::Pc]])
        );
    }

    const TWO_QUERIES: &str = "@Table@ t(vv: int)\n@Table@ s(ww: int)\n";

    fn q1q2(src: &crate::frontend::Source) -> (String, String) {
        let keys: Vec<String> = src.program.query_keys().into_iter().collect();
        assert_eq!(keys.len(), 2);
        // t-query first
        if keys[0].contains("FROM t") {
            (keys[0].clone(), keys[1].clone())
        } else {
            (keys[1].clone(), keys[0].clone())
        }
    }

    #[test]
    fn guarded_queries_yield_disjoint_query_lists() {
        let text = format!(
            "{TWO_QUERIES}if y > 0 then {{\n  x <- SELECT vv FROM t;\n}} else {{\n  x <- SELECT ww FROM s;\n}}\nout(x, u);\n"
        );
        let src = parse_source(&text).unwrap();
        let (k1, k2) = q1q2(&src);
        let g = analyze(&src.program, 100).unwrap();
        assert_eq!(
            g.get(&v("u")),
            sos(&[
                &[q(&k1), v("y"), Dep::Pc, v("u")],
                &[q(&k2), v("y"), Dep::Pc, v("u")],
            ])
        );
        let ql = extract_ql(&g, "u");
        let expect: BTreeSet<BTreeSet<String>> =
            [[k1].into_iter().collect(), [k2].into_iter().collect()].into();
        assert_eq!(ql, expect);
    }

    #[test]
    fn output_history_produces_mixed_set() {
        // both branches taken across two guarded outputs: the history in u
        // forces the {q1, q2} alternative
        let text = format!(
            "{TWO_QUERIES}\
             if z == 0 then {{\n  x <- SELECT vv FROM t;\n}} else {{\n  x <- SELECT ww FROM s;\n}}\nout(x, u);\n\
             if z != 0 then {{\n  x <- SELECT vv FROM t;\n}} else {{\n  x <- SELECT ww FROM s;\n}}\nout(x, u);\n"
        );
        let src = parse_source(&text).unwrap();
        let (k1, k2) = q1q2(&src);
        let g = analyze(&src.program, 100).unwrap();
        let ql = extract_ql(&g, "u");
        let expect: BTreeSet<BTreeSet<String>> = [
            [k1.clone()].into_iter().collect(),
            [k2.clone()].into_iter().collect(),
            [k1, k2].into_iter().collect(),
        ]
        .into();
        assert_eq!(ql, expect);
    }

    #[test]
    fn program_without_output_has_empty_ql() {
        let src = parse_source("@Table@ t(vv: int)\nx <- SELECT vv FROM t;\n").unwrap();
        let g = analyze(&src.program, 100).unwrap();
        assert!(extract_ql(&g, "u").is_empty());
    }

    #[test]
    fn constant_output_gives_queryless_set() {
        let src = parse_source("@Table@ t(vv: int)\nout(5, u);\n").unwrap();
        let g = analyze(&src.program, 100).unwrap();
        let ql = extract_ql(&g, "u");
        assert_eq!(ql, BTreeSet::from([BTreeSet::new()]));
    }
}
