//! The security check: order program labels against policy labels and
//! produce an accept/reject verdict with witnesses.
//!
//! A program tuple ⟨T, φ, π⟩ is covered by a policy label if some subset of
//! well-formed policy tuples {⟨Tᵢ, φᵢ, πᵢ⟩} has pairwise-disjoint Tᵢ with
//! T ⊆ ∪Tᵢ, φ ⊨ ∧φᵢ, and dep(φ) ∪ π ⊆ ∪πᵢ.

use std::collections::BTreeSet;

use crate::abstraction::{label_to_json, Label, SymbolicTuple};
use crate::constraints::{ConstraintError, Solver};

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("policy label is not well-formed: tuple over {0:?} constrains unprojected columns")]
    PolicyNotWellFormed(BTreeSet<String>),
    #[error("witness search exceeded {0} subset probes")]
    CapExceeded(usize),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Hard cap on subset probes per program tuple.
pub const SUBSET_PROBE_CAP: usize = 1 << 16;

/// Search for a covering subset of `policy_label`, smallest subsets first,
/// lexicographic within a size. Returns the first witness.
pub fn tuple_covered(
    st: &SymbolicTuple,
    policy_label: &Label,
    solver: &Solver,
) -> Result<Option<BTreeSet<SymbolicTuple>>, CheckError> {
    for t in policy_label {
        if !t.is_well_formed() {
            return Err(CheckError::PolicyNotWellFormed(t.tables.clone()));
        }
    }
    let tuples: Vec<&SymbolicTuple> = policy_label.iter().collect();
    let n = tuples.len();
    let mut probes = 0usize;

    // the empty cover works only for a tuple with nothing to cover
    if st.tables.is_empty() && st.pi.is_empty() && st.dep().is_empty() {
        return Ok(Some(BTreeSet::new()));
    }

    let mut masks: Vec<u64> = (1..(1u64 << n)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    for mask in masks {
        probes += 1;
        if probes > SUBSET_PROBE_CAP {
            return Err(CheckError::CapExceeded(SUBSET_PROBE_CAP));
        }
        let chosen: Vec<&SymbolicTuple> =
            (0..n).filter(|i| mask & (1 << i) != 0).map(|i| tuples[i]).collect();
        // pairwise-disjoint table sets
        let mut all_tables: BTreeSet<&String> = BTreeSet::new();
        let mut disjoint = true;
        for t in &chosen {
            for name in &t.tables {
                if !all_tables.insert(name) {
                    disjoint = false;
                    break;
                }
            }
            if !disjoint {
                break;
            }
        }
        if !disjoint {
            continue;
        }
        if !st.tables.iter().all(|t| all_tables.contains(t)) {
            continue;
        }
        let mut pi_union: BTreeSet<&crate::ast::ColumnRef> = BTreeSet::new();
        for t in &chosen {
            pi_union.extend(t.pi.iter());
        }
        let dep = st.dep();
        if !st.pi.iter().chain(dep.iter()).all(|c| pi_union.contains(c)) {
            continue;
        }
        let psi: Vec<crate::ast::ComparisonAtom> =
            chosen.iter().flat_map(|t| t.phi.iter().cloned()).collect();
        if !solver.entails(&st.phi, &psi)? {
            continue;
        }
        return Ok(Some(chosen.into_iter().cloned().collect()));
    }
    Ok(None)
}

/// ℓk ⊑st ℓak: every program tuple is covered.
pub fn label_leq(lk: &Label, lak: &Label, solver: &Solver) -> Result<bool, CheckError> {
    for st in lk {
        if tuple_covered(st, lak, solver)?.is_none() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// How one program label fared against the policy.
#[derive(Debug, Clone)]
pub struct LabelResult {
    pub program_label: Label,
    /// The first policy label that covers it, with the witness subset chosen
    /// for each program tuple.
    pub matched: Option<(Label, Vec<(SymbolicTuple, BTreeSet<SymbolicTuple>)>)>,
    /// Human-readable reason when no policy label covers it.
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub accepted: bool,
    pub per_label: Vec<LabelResult>,
}

/// Why `st` is not covered by `lak` — best-effort diagnostics for reports.
fn explain_failure(st: &SymbolicTuple, policy_labels: &BTreeSet<Label>) -> String {
    let mut reasons = Vec::new();
    for lak in policy_labels {
        let tables: BTreeSet<&String> = lak.iter().flat_map(|t| &t.tables).collect();
        let missing_tables: Vec<&String> =
            st.tables.iter().filter(|t| !tables.contains(t)).collect();
        if !missing_tables.is_empty() {
            reasons.push(format!(
                "label {} lacks tables {}",
                render_label(lak),
                missing_tables.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(", ")
            ));
            continue;
        }
        let pi: BTreeSet<&crate::ast::ColumnRef> = lak.iter().flat_map(|t| &t.pi).collect();
        let dep = st.dep();
        let missing_cols: Vec<String> = st
            .pi
            .iter()
            .chain(dep.iter())
            .filter(|c| !pi.contains(c))
            .map(|c| c.to_string())
            .collect();
        if !missing_cols.is_empty() {
            reasons.push(format!(
                "label {} does not project {}",
                render_label(lak),
                missing_cols.join(", ")
            ));
            continue;
        }
        reasons.push(format!(
            "label {} fails the disjointness or entailment conditions",
            render_label(lak)
        ));
    }
    if reasons.is_empty() {
        "policy grants this user nothing".to_string()
    } else {
        reasons.join("; ")
    }
}

pub fn render_tuple(st: &SymbolicTuple) -> String {
    let phi = if st.phi.is_empty() {
        "true".to_string()
    } else {
        st.phi.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" AND ")
    };
    format!(
        "<{{{}}}, {}, {{{}}}>",
        st.tables.iter().map(String::as_str).collect::<Vec<_>>().join(", "),
        phi,
        st.pi.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
    )
}

pub fn render_label(l: &Label) -> String {
    format!("{{{}}}", l.iter().map(render_tuple).collect::<Vec<_>>().join(", "))
}

/// Def.-14-style check: every program label must sit below some policy
/// label. Labels and results are ordered deterministically.
pub fn security_check(
    program_labels: &BTreeSet<Label>,
    policy_labels: &BTreeSet<Label>,
    solver: &Solver,
    prune: bool,
) -> Result<Verdict, CheckError> {
    let mut kept: Vec<&Label> = program_labels.iter().collect();
    if prune {
        // a subset label passes whenever its superset does
        kept = program_labels
            .iter()
            .filter(|l| {
                !program_labels.iter().any(|other| *l != other && l.is_subset(other))
            })
            .collect();
    }
    let mut per_label = Vec::new();
    let mut accepted = true;
    for lk in kept {
        let mut matched = None;
        for lak in policy_labels {
            let mut witnesses = Vec::new();
            let mut ok = true;
            for st in lk.iter() {
                match tuple_covered(st, lak, solver)? {
                    Some(w) => witnesses.push((st.clone(), w)),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                matched = Some((lak.clone(), witnesses));
                break;
            }
        }
        let failure = if matched.is_none() {
            accepted = false;
            // name the first uncoverable tuple for the report
            let mut reason = String::from("no policy label covers this label");
            for st in lk.iter() {
                if policy_labels
                    .iter()
                    .all(|lak| matches!(tuple_covered(st, lak, solver), Ok(None)))
                {
                    reason = format!(
                        "tuple {} is not covered: {}",
                        render_tuple(st),
                        explain_failure(st, policy_labels)
                    );
                    break;
                }
            }
            Some(reason)
        } else {
            None
        };
        per_label.push(LabelResult { program_label: lk.clone(), matched, failure });
    }
    Ok(Verdict { accepted, per_label })
}

impl Verdict {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "accepted": self.accepted,
            "labels": self.per_label.iter().map(|r| {
                serde_json::json!({
                    "programLabel": label_to_json(&r.program_label),
                    "matched": r.matched.as_ref().map(|(lak, ws)| serde_json::json!({
                        "policyLabel": label_to_json(lak),
                        "witnesses": ws.iter().map(|(st, w)| serde_json::json!({
                            "tuple": st.to_json(),
                            "cover": w.iter().map(|t| t.to_json()).collect::<Vec<_>>(),
                        })).collect::<Vec<_>>(),
                    })),
                    "failure": r.failure,
                })
            }).collect::<Vec<_>>(),
        })
    }

    pub fn to_report(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "{}", if self.accepted { "ACCEPT" } else { "REJECT" });
        for r in &self.per_label {
            match (&r.matched, &r.failure) {
                (Some((lak, _)), _) => {
                    let _ = writeln!(
                        out,
                        "  ok: {} <= {}",
                        render_label(&r.program_label),
                        render_label(lak)
                    );
                }
                (None, Some(reason)) => {
                    let _ = writeln!(
                        out,
                        "  fail: {} -- {}",
                        render_label(&r.program_label),
                        reason
                    );
                }
                (None, None) => unreachable!("failed label without reason"),
            }
        }
        out
    }
}
