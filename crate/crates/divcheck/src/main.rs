use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use divcheck::check::{label_leq, render_label};
use divcheck::constraints::{Backend, Solver};
use divcheck::depanalysis::{analyze, env_to_json, extract_ql, DEFAULT_ITERATION_CAP};
use divcheck::frontend::{inline_views, parse_source, Source};
use divcheck::interp::{project_trace, run, taint_run, DatabaseState, InterpError};
use divcheck::oracle::{
    end_to_end_secure, eq_relation, in_tiling_closure, program_knowledge, refines, FiniteModel,
    OracleError,
};

#[derive(Parser)]
#[command(name = "divcheck", version, about = "Static information-flow checker for database-backed programs with disjunctive policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Emit JSON instead of text
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Statically check a program against its policy
    Check(CheckArgs),
    /// Print the dependency analysis result
    Analyze(AnalyzeArgs),
    /// Run a program on a concrete database
    Interpret(InterpretArgs),
    /// Cross-validate the static pipeline against a finite model
    OracleVerify(OracleArgs),
}

#[derive(Args)]
struct CheckArgs {
    file: PathBuf,
    #[arg(long)]
    user: String,
    /// Entailment backend: "builtin" or "ext:PATH" (an SMT-LIB 2 solver)
    #[arg(long, default_value = "builtin")]
    backend: String,
    /// Drop program labels subsumed by a superset label
    #[arg(long)]
    prune: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    file: PathBuf,
    #[arg(long)]
    user: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ITERATION_CAP)]
    iteration_cap: usize,
}

#[derive(Args)]
struct InterpretArgs {
    file: PathBuf,
    /// Database contents as JSON: {"table": [[row], ...]}
    #[arg(long)]
    db: PathBuf,
    /// Track dependencies and report the queries the outputs depend on
    #[arg(long)]
    taint: bool,
    /// Observer for --taint
    #[arg(long)]
    user: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    step_budget: u64,
}

#[derive(Args)]
struct OracleArgs {
    file: PathBuf,
    #[arg(long)]
    user: String,
    /// Finite-model config: {"domains": .., "rows": .., "budgets": ..}
    #[arg(long)]
    model: PathBuf,
}

fn fail(json: bool, msg: &str) -> ExitCode {
    if json {
        println!("{}", serde_json::json!({ "error": msg }));
    } else {
        eprintln!("error: {msg}");
    }
    ExitCode::from(2)
}

fn load_source(path: &PathBuf) -> Result<Source, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_source(&text).map_err(|e| e.to_string())
}

fn solver_from(backend: &str) -> Result<Solver, String> {
    // the environment variable wins over the flag
    if let Ok(path) = std::env::var("DIVCHECK_SOLVER") {
        if !path.is_empty() {
            return Ok(Solver::new(Backend::External(PathBuf::from(path))));
        }
    }
    match backend {
        "builtin" => Ok(Solver::new(Backend::Builtin)),
        ext if ext.starts_with("ext:") => {
            Ok(Solver::new(Backend::External(PathBuf::from(&ext[4..]))))
        }
        other => Err(format!("unknown backend '{other}' (expected builtin or ext:PATH)")),
    }
}

fn cmd_check(a: &CheckArgs, json: bool) -> ExitCode {
    let src = match load_source(&a.file) {
        Ok(s) => s,
        Err(e) => return fail(json, &e),
    };
    let solver = match solver_from(&a.backend) {
        Ok(s) => s,
        Err(e) => return fail(json, &e),
    };
    match divcheck::check_source(&src, &a.user, &solver, a.prune) {
        Ok(verdict) => {
            if json {
                println!("{}", verdict.to_json());
            } else {
                print!("{}", verdict.to_report());
            }
            ExitCode::from(if verdict.accepted { 0 } else { 1 })
        }
        Err(e) => fail(json, &e.to_string()),
    }
}

fn cmd_analyze(a: &AnalyzeArgs, json: bool) -> ExitCode {
    let src = match load_source(&a.file) {
        Ok(s) => s,
        Err(e) => return fail(json, &e),
    };
    let genv = match analyze(&src.program, a.iteration_cap) {
        Ok(g) => g,
        Err(e) => return fail(json, &e.to_string()),
    };
    let ql = a.user.as_deref().map(|u| extract_ql(&genv, u));
    if json {
        let mut out = serde_json::json!({ "env": env_to_json(&genv) });
        if let (Some(ql), Some(u)) = (&ql, &a.user) {
            out["user"] = serde_json::json!(u);
            out["ql"] = serde_json::json!(ql
                .iter()
                .map(|s| s.iter().collect::<Vec<_>>())
                .collect::<Vec<_>>());
        }
        println!("{out}");
    } else {
        println!("{}", serde_json::to_string_pretty(&env_to_json(&genv)).unwrap());
        if let (Some(ql), Some(u)) = (&ql, &a.user) {
            println!("QL[{u}]:");
            for s in ql {
                println!("  {{{}}}", s.iter().cloned().collect::<Vec<_>>().join(", "));
            }
        }
    }
    ExitCode::SUCCESS
}

fn cmd_interpret(a: &InterpretArgs, json: bool) -> ExitCode {
    let src = match load_source(&a.file) {
        Ok(s) => s,
        Err(e) => return fail(json, &e),
    };
    let db_text = match std::fs::read_to_string(&a.db) {
        Ok(t) => t,
        Err(e) => return fail(json, &format!("{}: {e}", a.db.display())),
    };
    let db_json: serde_json::Value = match serde_json::from_str(&db_text) {
        Ok(v) => v,
        Err(e) => return fail(json, &format!("{}: {e}", a.db.display())),
    };
    let db = match DatabaseState::from_json(&db_json, &src.schema) {
        Ok(d) => d,
        Err(e) => return fail(json, &e.to_string()),
    };
    if a.taint {
        let user = match &a.user {
            Some(u) => u,
            None => return fail(json, "--taint requires --user"),
        };
        match taint_run(&src.program, &db, &src.schema, &src.views, user, a.step_budget) {
            Ok(out) => {
                if json {
                    println!(
                        "{}",
                        serde_json::json!({
                            "trace": out.trace.iter().map(|o| serde_json::json!({
                                "value": o.value.to_string(), "user": o.user,
                            })).collect::<Vec<_>>(),
                            "queries": out.queries.iter().collect::<Vec<_>>(),
                        })
                    );
                } else {
                    for o in &out.trace {
                        println!("out({}, {})", o.value, o.user);
                    }
                    println!(
                        "queries[{user}]: {{{}}}",
                        out.queries.iter().cloned().collect::<Vec<_>>().join(", ")
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(json, &e.to_string()),
        }
    } else {
        match run(&src.program, &db, &src.schema, &src.views, a.step_budget) {
            Ok(trace) => {
                if json {
                    println!(
                        "{}",
                        serde_json::json!({
                            "trace": trace.iter().map(|o| serde_json::json!({
                                "value": o.value.to_string(), "user": o.user,
                            })).collect::<Vec<_>>(),
                        })
                    );
                } else {
                    for o in &trace {
                        println!("out({}, {})", o.value, o.user);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(json, &e.to_string()),
        }
    }
}

/// One finite-model cross-check; the pipeline claim it validates is named in
/// the report line.
struct OracleCheck {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn oracle_checks(src: &Source, user: &str, model: &FiniteModel, budgets: &divcheck::oracle::Budgets)
    -> Result<Vec<OracleCheck>, String>
{
    let err = |e: OracleError| e.to_string();
    let genv = analyze(&src.program, DEFAULT_ITERATION_CAP).map_err(|e| e.to_string())?;
    let ql = extract_ql(&genv, user);
    let inlined = src.inlined_queries().map_err(|e| e.to_string())?;
    let mut checks = Vec::new();

    // taint soundness: on every state the queries a run's outputs depend on
    // form one of the analysis' query sets
    let mut taint_ok = true;
    let mut taint_detail = String::from("Q(db) ∈ QL on every state");
    for (i, st) in model.states.iter().enumerate() {
        let qs = match taint_run(&src.program, st, &src.schema, &src.views, user, budgets.steps) {
            Ok(out) => out.queries,
            Err(InterpError::BudgetExceeded { queries, .. }) => queries,
            Err(e) => return Err(e.to_string()),
        };
        if !ql.contains(&qs) {
            taint_ok = false;
            taint_detail = format!(
                "state {i}: {{{}}} not among the analysis' query sets",
                qs.iter().cloned().collect::<Vec<_>>().join(", ")
            );
            break;
        }
    }
    checks.push(OracleCheck { name: "taint-membership", passed: taint_ok, detail: taint_detail });

    // label-order soundness: whenever a program label sits below a policy
    // label, the policy's queries determine the program's queries on the model
    let solver = Solver::new(Backend::Builtin);
    let mut order_ok = true;
    let mut order_detail = String::from("label order implies determinacy");
    let conjunctions: Vec<BTreeSet<String>> =
        src.policy.per_user.get(user).map(|d| d.iter().cloned().collect()).unwrap_or_default();
    'outer: for qset in &ql {
        let prg_queries: Vec<_> = qset.iter().filter_map(|k| inlined.get(k)).cloned().collect();
        let lk = divcheck::abstraction::sts_set(prg_queries.iter());
        for conj in &conjunctions {
            let mut pol_queries = Vec::new();
            for id in conj {
                let q = if src.schema.tables.contains_key(id) {
                    divcheck::abstraction::full_table_query(&src.schema, id)
                } else {
                    let v = src.views.iter().find(|v| &v.id == id).expect("validated");
                    inline_views(&v.query, &src.views).map_err(|e| e.to_string())?
                };
                pol_queries.push(q);
            }
            let lak = divcheck::abstraction::sts_set(pol_queries.iter());
            let below = label_leq(&lk, &lak, &solver).map_err(|e| e.to_string())?;
            if !below {
                continue;
            }
            let p = eq_relation(&pol_queries, model).map_err(err)?;
            let q = eq_relation(&prg_queries, model).map_err(err)?;
            if !refines(&p, &q) {
                order_ok = false;
                order_detail = format!(
                    "label {} is below a policy label whose queries do not determine it",
                    render_label(&lk)
                );
                break 'outer;
            }
        }
    }
    checks.push(OracleCheck { name: "label-order", passed: order_ok, detail: order_detail });

    // end-to-end: a static accept must be semantically secure on the model
    let verdict = divcheck::check_source(src, user, &solver, false).map_err(|e| e.to_string())?;
    let secure = end_to_end_secure(src, user, model, budgets).map_err(err)?;
    let e2e_ok = !verdict.accepted || secure;
    checks.push(OracleCheck {
        name: "end-to-end",
        passed: e2e_ok,
        detail: format!("static {} / model {}",
            if verdict.accepted { "accept" } else { "reject" },
            if secure { "secure" } else { "insecure" }),
    });

    // the knowledge partition must be tiled by the policy partitions when
    // the static check accepts (same data, reported separately for triage)
    let know = program_knowledge(&src.program, user, src, model, budgets.steps).map_err(err)?;
    let pol_parts = divcheck::oracle::policy_knowledge(src, user, model).map_err(err)?;
    let tiled = in_tiling_closure(&know, &pol_parts, budgets.cover_nodes).map_err(err)?;
    checks.push(OracleCheck {
        name: "knowledge-tiling",
        passed: !verdict.accepted || tiled,
        detail: format!("{} blocks in the knowledge partition", know.len()),
    });

    // plain and taint runs must observe the same values
    let mut agree = true;
    let mut agree_detail = String::from("plain and taint traces agree on every state");
    for (i, st) in model.states.iter().enumerate() {
        let plain = run(&src.program, st, &src.schema, &src.views, budgets.steps);
        let tainted = taint_run(&src.program, st, &src.schema, &src.views, user, budgets.steps);
        let pv = match plain {
            Ok(t) => Some(project_trace(&t, user).iter().map(|o| o.value.clone()).collect::<Vec<_>>()),
            Err(InterpError::BudgetExceeded { trace, .. }) => {
                Some(project_trace(&trace, user).iter().map(|o| o.value.clone()).collect())
            }
            Err(_) => None,
        };
        let tv = match tainted {
            Ok(o) => Some(project_trace(&o.trace, user).iter().map(|o| o.value.clone()).collect::<Vec<_>>()),
            Err(InterpError::BudgetExceeded { trace, .. }) => {
                Some(project_trace(&trace, user).iter().map(|o| o.value.clone()).collect())
            }
            Err(_) => None,
        };
        if pv != tv {
            agree = false;
            agree_detail = format!("state {i}: traces differ");
            break;
        }
    }
    checks.push(OracleCheck { name: "taint-agreement", passed: agree, detail: agree_detail });
    Ok(checks)
}

fn cmd_oracle_verify(a: &OracleArgs, json: bool) -> ExitCode {
    let src = match load_source(&a.file) {
        Ok(s) => s,
        Err(e) => return fail(json, &e),
    };
    let cfg_text = match std::fs::read_to_string(&a.model) {
        Ok(t) => t,
        Err(e) => return fail(json, &format!("{}: {e}", a.model.display())),
    };
    let cfg: serde_json::Value = match serde_json::from_str(&cfg_text) {
        Ok(v) => v,
        Err(e) => return fail(json, &format!("{}: {e}", a.model.display())),
    };
    let (model, budgets) = match FiniteModel::from_config(&src.schema, &cfg) {
        Ok(x) => x,
        Err(e) => return fail(json, &e.to_string()),
    };
    let checks = match oracle_checks(&src, &a.user, &model, &budgets) {
        Ok(c) => c,
        Err(e) => return fail(json, &e),
    };
    let all = checks.iter().all(|c| c.passed);
    if json {
        println!(
            "{}",
            serde_json::json!({
                "states": model.states.len(),
                "passed": all,
                "checks": checks.iter().map(|c| serde_json::json!({
                    "name": c.name, "passed": c.passed, "detail": c.detail,
                })).collect::<Vec<_>>(),
            })
        );
    } else {
        println!("model: {} states", model.states.len());
        for c in &checks {
            println!("{:<18} {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
    }
    ExitCode::from(if all { 0 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Check(a) => cmd_check(a, cli.json),
        Cmd::Analyze(a) => cmd_analyze(a, cli.json),
        Cmd::Interpret(a) => cmd_interpret(a, cli.json),
        Cmd::OracleVerify(a) => cmd_oracle_verify(a, cli.json),
    }
}
