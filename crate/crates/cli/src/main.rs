use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use uot::io::{fmt_f64, read_measure, write_measure};
use uot::synthetic::{random_measure, rng, uniform_cloud};
use uot::{
    cost_matrix, gradients, hausdorff_divergence, ot_eps, run_flow, sinkhorn_divergence, sinkhorn_entropy, solve,
    CostKind, CostSpec, DiscreteMeasure, DivergenceConfig, DivergenceValue, Entropy, ExtendedReal, FlowParams,
    FlowState, GradRequest, MassRate, SolveOptions, SolveStatus, Target, UotError,
};

#[derive(Parser)]
#[command(name = "uot", version, about = "Unbalanced entropic optimal transport")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "UOT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Sinkhorn and print the dual potentials.
    Solve(Problem),
    /// Evaluate OT_eps, S_eps, F_eps or H_eps.
    Div {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, value_enum, default_value_t = Kind::S)]
        kind: Kind,
    },
    /// Gradients of OT_eps or S_eps with respect to the first measure.
    Grad {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, value_enum, default_value_t = GradKind::S)]
        kind: GradKind,
        /// Allow subgradients for TV and Range.
        #[arg(long)]
        subgradient: bool,
    },
    /// Particle flow of the first measure towards the second.
    Flow(FlowArgs),
    /// Run the built-in oracle checks and print a JSON report.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random measure.
    Gen(GenArgs),
}

#[derive(Args)]
struct Solver {
    /// Entropy, e.g. `kl:rho=1`, `tv:rho=0.5`, `range:a=0.7,b=1.3`, `balanced`.
    #[arg(long, default_value = "kl:rho=1")]
    entropy: Entropy,
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// `sqeuclidean` or `euclidean:p=<p>`.
    #[arg(long, default_value = "sqeuclidean", value_parser = parse_cost_kind)]
    cost: CostKind,
    #[arg(long, default_value_t = 1.0)]
    cost_scale: f64,
}

impl Solver {
    fn cost_spec(&self) -> anyhow::Result<CostSpec> {
        Ok(CostSpec::new(self.cost, self.cost_scale)?)
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions::default().with_tol(self.tol).with_max_iter(self.max_iter)
    }

    fn config(&self) -> anyhow::Result<DivergenceConfig> {
        Ok(DivergenceConfig::new(self.entropy, self.eps).with_cost(self.cost_spec()?).with_solve(self.solve_options()))
    }
}

#[derive(Args)]
struct Problem {
    /// First measure (`.json` or `.csv`).
    a: PathBuf,
    /// Second measure.
    b: Option<PathBuf>,
    #[command(flatten)]
    solver: Solver,
    /// Write here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

impl Problem {
    fn measures(&self) -> anyhow::Result<(DiscreteMeasure, DiscreteMeasure)> {
        let b = self.b.as_ref().context("a second measure is required")?;
        Ok((load(&self.a)?, load(b)?))
    }
}

#[derive(Args)]
struct FlowArgs {
    /// Initial particles.
    init: PathBuf,
    /// Target measure.
    target: PathBuf,
    /// Directory for the snapshot CSVs and `summary.csv`.
    #[arg(short, long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "kl:rho=0.1")]
    entropy: Entropy,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 60.0)]
    eta_x: f64,
    #[arg(long, default_value_t = 0.3)]
    eta_r: f64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Which rate multiplies the mass update.
    #[arg(long, value_enum, default_value_t = Rate::EtaX)]
    mass_rate: Rate,
    /// Keep masses fixed.
    #[arg(long)]
    no_mass_updates: bool,
    #[arg(long, default_value_t = 1)]
    snapshot_every: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value = "sqeuclidean", value_parser = parse_cost_kind)]
    cost: CostKind,
    #[arg(long, default_value_t = 1.0)]
    cost_scale: f64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(short, long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
    /// Equal weights instead of random ones.
    #[arg(long)]
    uniform: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ot,
    S,
    F,
    H,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradKind {
    Ot,
    S,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rate {
    EtaX,
    EtaR,
}

fn parse_cost_kind(s: &str) -> Result<CostKind, String> {
    match s.trim() {
        "sqeuclidean" => Ok(CostKind::SqEuclidean),
        other => {
            let p = other
                .strip_prefix("euclidean:p=")
                .ok_or_else(|| format!("unknown cost `{other}`"))?
                .parse::<f64>()
                .map_err(|e| e.to_string())?;
            Ok(CostKind::EuclideanPow(p))
        }
    }
}

fn load(path: &Path) -> anyhow::Result<DiscreteMeasure> {
    read_measure(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn ext(v: ExtendedReal) -> Value {
    match v {
        ExtendedReal::Finite(x) => num(x),
        ExtendedReal::PosInf => json!("inf"),
    }
}

fn csv_text(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn infeasible() -> anyhow::Error {
    UotError::Infeasible("the marginal constraints cannot be met at finite cost".into()).into()
}

fn cmd_solve(p: &Problem) -> anyhow::Result<()> {
    let (a, b) = p.measures()?;
    let s = &p.solver;
    let c = cost_matrix(&a, &b, &s.cost_spec()?)?;
    let out = solve(&a, &b, &c, &s.entropy, s.eps, &s.solve_options())?;
    if out.report.status == SolveStatus::Infeasible {
        return Err(infeasible());
    }
    let pots = out.feasible_potentials()?;
    let text = match p.format {
        Format::Json => {
            let v = json!({
                "status": out.report.status,
                "iterations": out.report.iterations,
                "final_update": num(out.report.final_update),
                "eps": pots.eps,
                "entropy": pots.entropy,
                "f": pots.f,
                "g": pots.g,
            });
            format!("{v}\n")
        }
        Format::Csv => {
            let rows = pots
                .f
                .iter()
                .enumerate()
                .map(|(i, v)| vec!["f".into(), i.to_string(), fmt_f64(*v)])
                .chain(pots.g.iter().enumerate().map(|(j, v)| vec!["g".into(), j.to_string(), fmt_f64(*v)]));
            csv_text(&["side".into(), "i".into(), "potential".into()], rows)
        }
    };
    emit(p.output.as_deref(), &text)
}

fn cmd_div(p: &Problem, kind: Kind) -> anyhow::Result<()> {
    let cfg = p.solver.config()?;
    let (name, v): (&str, DivergenceValue) = match kind {
        Kind::F => ("F", sinkhorn_entropy(&load(&p.a)?, &cfg)?),
        _ => {
            let (a, b) = p.measures()?;
            match kind {
                Kind::Ot => ("OT", ot_eps(&a, &b, &cfg)?),
                Kind::S => ("S", sinkhorn_divergence(&a, &b, &cfg)?),
                _ => ("H", hausdorff_divergence(&a, &b, &cfg)?),
            }
        }
    };
    if v.is_infeasible() {
        return Err(infeasible());
    }
    let status = v.status().map(|s| format!("{s:?}")).unwrap_or_else(|| "ClosedForm".into());
    let text = match p.format {
        Format::Json => format!(
            "{}\n",
            json!({ "kind": name, "value": ext(v.value), "status": status, "converged": v.converged() })
        ),
        Format::Csv => csv_text(
            &["kind".into(), "value".into(), "status".into()],
            [vec![name.into(), v.value.to_string(), status]],
        ),
    };
    emit(p.output.as_deref(), &text)
}

fn cmd_grad(p: &Problem, kind: GradKind, subgradient: bool) -> anyhow::Result<()> {
    let (a, b) = p.measures()?;
    let cfg = p.solver.config()?;
    let target = match kind {
        GradKind::Ot => Target::Ot,
        GradKind::S => Target::S,
    };
    let req = GradRequest { weights: true, positions: true, subgradient };
    let (g, v) = gradients(&a, &b, &cfg, target, req)?;
    if v.is_infeasible() {
        return Err(infeasible());
    }
    let dw = g.d_weights_a.unwrap_or_default();
    let dx = g.d_points_a.unwrap_or_default();
    let text = match p.format {
        Format::Json => format!("{}\n", json!({ "value": ext(v.value), "d_weights": dw, "d_points": dx })),
        Format::Csv => {
            let mut header = vec!["i".to_string(), "d_weight".to_string()];
            header.extend((1..=a.dim()).map(|k| format!("d_x{k}")));
            let rows = dw.iter().zip(&dx).enumerate().map(|(i, (w, x))| {
                let mut r = vec![i.to_string(), fmt_f64(*w)];
                r.extend(x.iter().map(|v| fmt_f64(*v)));
                r
            });
            csv_text(&header, rows)
        }
    };
    emit(p.output.as_deref(), &text)
}

fn cmd_flow(f: &FlowArgs) -> anyhow::Result<()> {
    let init = load(&f.init)?;
    let target = load(&f.target)?;
    let mut params = FlowParams {
        eta_x: f.eta_x,
        eta_r: f.eta_r,
        eps: f.eps,
        entropy: f.entropy,
        steps: f.steps,
        mass_updates: !f.no_mass_updates,
        mass_rate: match f.mass_rate {
            Rate::EtaX => MassRate::Printed,
            Rate::EtaR => MassRate::EtaR,
        },
        ..FlowParams::default()
    };
    params.solve = params.solve.with_tol(f.tol).with_max_iter(f.max_iter);
    let cost = CostSpec::new(f.cost, f.cost_scale)?;
    let snaps = run_flow(&FlowState::from_measure(&init), &target, &cost, &params, f.snapshot_every)?;

    fs::create_dir_all(&f.out_dir).with_context(|| format!("creating {}", f.out_dir.display()))?;
    let mut header = vec!["step".to_string(), "i".to_string()];
    header.extend((1..=init.dim()).map(|k| format!("x{k}")));
    header.push("mass".into());
    for s in &snaps {
        let st = &s.state;
        let rows = st.positions.iter().zip(st.masses()).enumerate().map(|(i, (x, m))| {
            let mut r = vec![st.step.to_string(), i.to_string()];
            r.extend(x.iter().map(|v| fmt_f64(*v)));
            r.push(fmt_f64(m));
            r
        });
        fs::write(f.out_dir.join(format!("step_{:06}.csv", st.step)), csv_text(&header, rows))?;
    }
    let summary = snaps.iter().map(|s| vec![s.state.step.to_string(), fmt_f64(s.s_eps)]);
    fs::write(f.out_dir.join("summary.csv"), csv_text(&["step".into(), "S_eps".into()], summary))?;
    Ok(())
}

fn cmd_check(seed: u64) -> anyhow::Result<bool> {
    let rep = uot::check::run_checks(seed)?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    Ok(rep.passed)
}

fn cmd_gen(g: &GenArgs) -> anyhow::Result<()> {
    let mut r = rng(g.seed);
    let m = if g.uniform {
        uniform_cloud(&mut r, g.n, g.dim, g.mass, g.lo, g.hi)?
    } else {
        random_measure(&mut r, g.n, g.dim, g.mass, g.lo, g.hi)?
    };
    write_measure(&g.output, &m)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    match &cli.command {
        Command::Solve(p) => cmd_solve(p)?,
        Command::Div { problem, kind } => cmd_div(problem, *kind)?,
        Command::Grad { problem, kind, subgradient } => cmd_grad(problem, *kind, *subgradient)?,
        Command::Flow(f) => cmd_flow(f)?,
        Command::Check { seed } => return cmd_check(*seed),
        Command::Gen(g) => {
            if g.n == 0 {
                bail!("--n must be positive");
            }
            cmd_gen(g)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            if matches!(e.downcast_ref::<UotError>(), Some(UotError::Infeasible(_))) {
                eprintln!("{}", e.root_cause());
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}
