//! Symbolic tuples: the abstraction of queries and policies used by the
//! security check. A tuple ⟨T, φ, π⟩ stands for "rows of the join of T
//! satisfying φ, projected on π".

use std::collections::{BTreeMap, BTreeSet};

use crate::ast::*;
use crate::frontend::{inline_views, FrontendError, Source};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SymbolicTuple {
    pub tables: BTreeSet<String>,
    pub phi: Vec<ComparisonAtom>,
    pub pi: BTreeSet<ColumnRef>,
}

impl SymbolicTuple {
    /// Columns constrained by φ.
    pub fn dep(&self) -> BTreeSet<ColumnRef> {
        self.phi.iter().flat_map(|a| a.columns().cloned()).collect()
    }

    /// dep(φ) ⊆ π
    pub fn is_well_formed(&self) -> bool {
        self.dep().is_subset(&self.pi)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tables": self.tables.iter().collect::<Vec<_>>(),
            "phi": self.phi.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" AND "),
            "pi": self.pi.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        })
    }
}

pub type Label = BTreeSet<SymbolicTuple>;

pub fn label_to_json(l: &Label) -> serde_json::Value {
    serde_json::Value::Array(l.iter().map(|st| st.to_json()).collect())
}

#[derive(Debug, thiserror::Error)]
pub enum AbstractionError {
    #[error("policy label is not well-formed: {0}")]
    PolicyNotWellFormed(String),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

/// Abstract a single (view-free) query.
pub fn sts_query(q: &CqcQuery) -> SymbolicTuple {
    SymbolicTuple {
        tables: q.table_refs.clone(),
        phi: q.atoms.clone(),
        pi: q.heading.iter().cloned().collect(),
    }
}

/// Abstract a set of queries into one label.
pub fn sts_set<'a>(qs: impl IntoIterator<Item = &'a CqcQuery>) -> Label {
    qs.into_iter().map(sts_query).collect()
}

/// One label per inner query set, preserving the disjunctive structure.
pub fn sigma_st(qq: &BTreeSet<BTreeSet<CqcQuery>>) -> BTreeSet<Label> {
    qq.iter().map(|qs| sts_set(qs.iter())).collect()
}

/// SELECT every column of `table` (the reading of a bare table id in a
/// policy).
pub fn full_table_query(schema: &Schema, table: &str) -> CqcQuery {
    CqcQuery {
        heading: schema.columns_of(table),
        table_refs: BTreeSet::from([table.to_string()]),
        atoms: Vec::new(),
    }
}

/// Program-side labels: one per inner set of QLᵤ, each query inlined before
/// abstraction.
pub fn program_labels(
    ql: &BTreeSet<BTreeSet<String>>,
    inlined: &BTreeMap<String, CqcQuery>,
) -> BTreeSet<Label> {
    ql.iter()
        .map(|keys| keys.iter().filter_map(|k| inlined.get(k)).map(sts_query).collect())
        .collect()
}

/// Policy-side labels for `user`: one per conjunction; every id desugared to
/// its inlined query. Every tuple must be well-formed.
pub fn policy_labels(src: &Source, user: &str) -> Result<BTreeSet<Label>, AbstractionError> {
    let mut out = BTreeSet::new();
    let Some(disj) = src.policy.per_user.get(user) else {
        return Ok(out);
    };
    for conj in disj {
        let mut label = Label::new();
        for id in conj {
            let q = if src.schema.tables.contains_key(id) {
                full_table_query(&src.schema, id)
            } else {
                let view = src
                    .views
                    .iter()
                    .find(|v| &v.id == id)
                    .expect("policy ids validated by the frontend");
                inline_views(&view.query, &src.views)?
            };
            let st = sts_query(&q);
            if !st.is_well_formed() {
                return Err(AbstractionError::PolicyNotWellFormed(format!(
                    "'{id}' constrains columns it does not project: {}",
                    st.dep()
                        .difference(&st.pi)
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
            label.insert(st);
        }
        out.insert(label);
    }
    Ok(out)
}
