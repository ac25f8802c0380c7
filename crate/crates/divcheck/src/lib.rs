//! Static information-flow checker for database-backed programs with
//! disjunctive policies.

pub mod abstraction;
pub mod ast;
pub mod frontend;
pub mod check;
pub mod constraints;
pub mod depanalysis;
pub mod interp;
pub mod oracle;

/// Any failure of the parse → analyze → abstract → check pipeline.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frontend(#[from] frontend::FrontendError),
    #[error(transparent)]
    Analysis(#[from] depanalysis::AnalysisError),
    #[error(transparent)]
    Abstraction(#[from] abstraction::AbstractionError),
    #[error(transparent)]
    Check(#[from] check::CheckError),
}

/// Full static check of a parsed source for one user: dependency analysis,
/// label abstraction on both sides, then the per-label security check.
pub fn check_source(
    src: &frontend::Source,
    user: &str,
    solver: &constraints::Solver,
    prune: bool,
) -> Result<check::Verdict, PipelineError> {
    let genv = depanalysis::analyze(&src.program, depanalysis::DEFAULT_ITERATION_CAP)?;
    let ql = depanalysis::extract_ql(&genv, user);
    let inlined = src.inlined_queries()?;
    let prg_labels = abstraction::program_labels(&ql, &inlined);
    let pol_labels = abstraction::policy_labels(src, user)?;
    Ok(check::security_check(&prg_labels, &pol_labels, solver, prune)?)
}
