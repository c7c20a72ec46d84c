//! `til`: command-line front end for the til-core experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments or input file,
//! 3 dimension above the dense cap (`TIL_MAX_N` raises it).

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use til_core::dobrushin::{self, tensor_gap_certificate};
use til_core::glauber::{self, DirichletConvention};
use til_core::spin_space::{self, DiscreteMeasure};
use til_core::tensor_core::{self, FlattenedOperator, InjectiveOptions, SymTensor4, TensorFile};
use til_core::tsl::{self, TslParams};
use til_core::{curie_weiss, rng, Error};

#[derive(Parser, Debug)]
#[command(name = "til", version, about = "Tensor Ising models on the Boolean hypercube")]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = rayon default). Changes wall time only.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; each command has its own default.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Convention {
    Harmonic,
    Kernel,
}

impl From<Convention> for DirichletConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Harmonic => DirichletConvention::Harmonic,
            Convention::Kernel => DirichletConvention::Kernel,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact spectral gap of heat-bath Glauber dynamics.
    Gap(GapArgs),
    /// Spectral-gap certificate from the injective norm of a tensor.
    Certify(CertifyArgs),
    /// Sampled four-stage decomposition, one JSON line per component.
    Decompose(DecomposeArgs),
    /// Curie-Weiss magnetization chain experiments.
    Cw(CwArgs),
    /// Injective-norm bounds of random Gaussian tensors.
    GaussianSweep(GaussianArgs),
    /// Exact Dobrushin influence matrix and the resulting bound.
    Dobrushin(DobrushinArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Tensor JSON file (1-based indices).
    #[arg(long)]
    tensor: Option<PathBuf>,
    /// Potential spec JSON file.
    #[arg(long)]
    potential: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GapArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_enum, default_value = "harmonic")]
    convention: Convention,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    tensor: PathBuf,
    /// Random starts of the injective-norm ascent.
    #[arg(long, default_value_t = 64)]
    starts: usize,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = tsl::DEFAULT_DELTA)]
    delta: f64,
    /// Nominal step (default: a fixed fraction of the trace).
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, default_value_t = tsl::DEFAULT_RANK_TOL)]
    rank_tol: f64,
    /// Test function as comma-separated monomials `coef@i.j...` (1-based),
    /// e.g. `1@1.2,0.5@3` for x1 x2 + x3/2.
    #[arg(long, default_value = "1@1")]
    phi: String,
}

#[derive(Args, Debug)]
struct CwArgs {
    #[arg(long, value_delimiter = ',', default_value = "20,40,60")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 4.0)]
    p: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.7")]
    beta_list: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = curie_weiss::DEFAULT_BUDGET)]
    budget: u64,
    /// Print the critical inverse temperature for `p` and exit.
    #[arg(long)]
    beta_star: bool,
    /// Emit per-(n, beta) medians instead of individual runs.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug)]
struct GaussianArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 64)]
    starts: usize,
}

#[derive(Args, Debug)]
struct DobrushinArgs {
    #[command(flatten)]
    source: Source,
}

/// Potential description for commands that accept an arbitrary Hamiltonian.
#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum PotentialSpec {
    Zero { n: usize },
    Table { n: usize, values: Vec<f64> },
    CurieWeiss { n: usize, beta: f64, p: f64 },
    /// `<u,x>^2 + <v,x>`.
    Rank1Ising { u: Vec<f64>, v: Vec<f64> },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse(_) => 2,
            Error::DimensionTooLarge { .. } => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_file(path: &PathBuf) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_tensor(path: &PathBuf) -> CliResult<SymTensor4> {
    TensorFile::parse(&read_file(path)?).map_err(|e| match e {
        Error::Parse(m) => usage(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

fn potential_from_spec(text: &str) -> CliResult<(usize, Vec<f64>)> {
    let spec: PotentialSpec = serde_json::from_str(text).map_err(|e| usage(format!("potential spec: {e}")))?;
    let cap = |n: usize| -> CliResult<()> {
        let max = glauber::max_dense_n();
        if n > max {
            return Err(Error::DimensionTooLarge { n, max }.into());
        }
        spin_space::check_dim(n).map_err(|_| usage("potential spec: field `n` must be positive"))
    };
    match spec {
        PotentialSpec::Zero { n } => {
            cap(n)?;
            Ok((n, vec![0.0; 1 << n]))
        }
        PotentialSpec::Table { n, values } => {
            cap(n)?;
            if values.len() != 1 << n {
                return Err(usage(format!("potential spec: field `values` has length {}, expected 2^n = {}", values.len(), 1usize << n)));
            }
            Ok((n, values))
        }
        PotentialSpec::CurieWeiss { n, beta, p } => {
            cap(n)?;
            Ok((n, tensor_core::curie_weiss_potential(n, beta, p).map_err(|e| usage(format!("potential spec: {e}")))?))
        }
        PotentialSpec::Rank1Ising { u, v } => {
            let n = u.len();
            cap(n)?;
            if v.len() != n {
                return Err(usage(format!("potential spec: field `v` has length {}, expected {n}", v.len())));
            }
            let table = spin_space::tabulate(n, |x| {
                let a: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
                let b: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
                a * a + b
            })?;
            Ok((n, table))
        }
    }
}

fn load_potential(source: &Source) -> CliResult<(usize, Vec<f64>)> {
    if let Some(path) = &source.tensor {
        let t = load_tensor(path)?;
        let max = glauber::max_dense_n();
        if t.n() > max {
            return Err(Error::DimensionTooLarge { n: t.n(), max }.into());
        }
        return Ok((t.n(), t.potential_table()?));
    }
    let path = source.potential.as_ref().expect("clap enforces one source");
    potential_from_spec(&read_file(path)?)
}

/// Parses `coef@i.j,...` into a table over the cube.
fn parse_phi(spec: &str, n: usize) -> CliResult<Vec<f64>> {
    let mut terms: Vec<(f64, Vec<usize>)> = Vec::new();
    for term in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (coef, idx) = term.split_once('@').ok_or_else(|| usage(format!("--phi term `{term}` lacks `@`")))?;
        let coef: f64 = coef.trim().parse().map_err(|_| usage(format!("--phi coefficient `{coef}` is not a number")))?;
        let mut vars = Vec::new();
        for i in idx.split('.').filter(|s| !s.is_empty()) {
            let i: usize = i.trim().parse().map_err(|_| usage(format!("--phi index `{i}` is not an integer")))?;
            if i == 0 || i > n {
                return Err(usage(format!("--phi index {i} out of range 1..={n}")));
            }
            vars.push(i - 1);
        }
        terms.push((coef, vars));
    }
    if terms.is_empty() {
        return Err(usage("--phi is empty"));
    }
    Ok(spin_space::tabulate(n, |x| terms.iter().map(|(c, vars)| c * vars.iter().map(|&i| x[i]).product::<f64>()).sum())?)
}

/// Writes to the `--out` file or stdout, one flushed `write_all` per line.
struct Sink {
    inner: Box<dyn Write>,
}

impl Sink {
    fn open(path: &Option<PathBuf>) -> CliResult<Self> {
        let inner: Box<dyn Write> = match path {
            Some(p) => Box::new(fs::File::create(p).map_err(|e| Failure { code: 1, message: format!("{}: {e}", p.display()) })?),
            None => Box::new(io::stdout()),
        };
        Ok(Self { inner })
    }

    fn line(&mut self, text: &str) -> CliResult<()> {
        let mut buf = String::with_capacity(text.len() + 1);
        buf.push_str(text);
        buf.push('\n');
        self.inner.write_all(buf.as_bytes())?;
        self.inner.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, value: &T) -> CliResult<()> {
        self.line(&serde_json::to_string(value).map_err(|e| Failure { code: 1, message: e.to_string() })?)
    }

    fn csv<T: Serialize>(&mut self, rows: &[T]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Failure { code: 1, message: e.to_string() })?;
        }
        let bytes = w.into_inner().map_err(|e| Failure { code: 1, message: e.to_string() })?;
        self.inner.write_all(&bytes)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn json_only(format: Option<Format>, command: &str) -> CliResult<()> {
    match format {
        Some(Format::Csv) => Err(usage(format!("`{command}` only supports --format json"))),
        _ => Ok(()),
    }
}

fn cmd_gap(args: &GapArgs, format: Option<Format>, sink: &mut Sink) -> CliResult<()> {
    json_only(format, "gap")?;
    let (n, table) = load_potential(&args.source)?;
    let kernel = glauber::build_kernel(&table, n)?;
    let report = glauber::exact_spectral_gap(&kernel, args.convention.into())?;
    sink.json(&json!({
        "n": n,
        "gap": report.gap,
        "poincare": report.poincare_constant,
        "convention": report.convention.as_str(),
        "eigenvalues": report.eigenvalues,
    }))
}

fn cmd_certify(args: &CertifyArgs, seed: u64, format: Option<Format>, sink: &mut Sink) -> CliResult<()> {
    json_only(format, "certify")?;
    let t = load_tensor(&args.tensor)?;
    let opts = InjectiveOptions { starts: args.starts.max(1), seed, ..Default::default() };
    let c = tensor_gap_certificate(&t, &opts);
    sink.json(&json!({
        "n": c.n,
        "inj_upper": c.inj_upper,
        "inj_lower": c.inj_lower,
        "threshold_336n": c.threshold_336n,
        "bound": c.bound,
        "reason": c.reason,
        "optimistic_bound": c.optimistic_bound,
        "labels": {
            "bound": "sound: uses the injective-norm upper bound",
            "optimistic_bound": "not rigorous: uses the injective-norm lower estimate",
        },
        "psd_shift_applied": c.psd_shift_applied,
        "breakdown": c.breakdown,
    }))
}

fn cmd_decompose(args: &DecomposeArgs, seed: u64, format: Option<Format>, sink: &mut Sink) -> CliResult<()> {
    json_only(format, "decompose")?;
    let t = load_tensor(&args.tensor)?;
    let n = t.n();
    if n > tsl::MAX_TSL_N {
        return Err(Error::DimensionTooLarge { n, max: tsl::MAX_TSL_N }.into());
    }
    if args.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    if !(args.delta > 0.0) || args.dt.is_some_and(|d| !(d > 0.0)) || !(args.rank_tol > 0.0) {
        return Err(usage("--delta, --dt and --rank-tol must be positive"));
    }
    let phi = parse_phi(&args.phi, n)?;
    let flat = t.flatten();
    let scale = flat.operator_norm().max(1.0);
    let (op, shift): (FlattenedOperator, f64) = if flat.min_eigenvalue() < -1e-10 * scale { tensor_core::psd_shift(&t) } else { (flat, 0.0) };
    let params = TslParams { delta: args.delta, dt: args.dt, rank_tol: args.rank_tol, ..Default::default() };

    // Chunks of one component per worker keep memory flat and let a partial
    // run leave complete lines behind.
    let chunk = rayon::current_num_threads().max(1);
    let weight = 1.0 / args.seeds as f64;
    let mut components = Vec::with_capacity(args.seeds);
    let mut failures = 0usize;
    for start in (0..args.seeds).step_by(chunk) {
        let end = (start + chunk).min(args.seeds);
        let batch: Vec<_> = (start as u64..end as u64)
            .into_par_iter()
            .map(|k| {
                let mut r = rng::stream(seed, k);
                (k, tsl::full_decomposition_sample(&op, &phi, &params, &mut r))
            })
            .collect();
        for (k, res) in batch {
            match res {
                Ok(mut c) => {
                    c.seed = k;
                    c.weight = weight;
                    sink.json(&json!({ "component": &c }))?;
                    components.push(c);
                }
                Err(e) => {
                    failures += 1;
                    sink.json(&json!({ "seed": k, "error": e.to_string() }))?;
                }
            }
        }
    }

    let target = DiscreteMeasure::gibbs(n, &op.potential_table()?)?;
    let tv = if components.is_empty() {
        None
    } else {
        let mut mix = vec![0.0; 1 << n];
        for c in &components {
            for (m, w) in mix.iter_mut().zip(c.measure()?.weights()) {
                *m += w;
            }
        }
        let total: f64 = mix.iter().sum();
        mix.iter_mut().for_each(|m| *m /= total);
        Some(spin_space::tv(&mix, target.weights()))
    };
    let ok = components.len().max(1) as f64;
    let rate = |f: &dyn Fn(&tsl::Component) -> bool| components.iter().filter(|c| f(c)).count() as f64 / ok;
    let at_start = components.iter().filter(|c| c.first_stage_at_start).count();
    let mut notes = Vec::new();
    if at_start > 0 {
        notes.push(format!("stopped at start in {at_start} of {} samples", components.len()));
    }
    if shift > 0.0 {
        notes.push(format!("flattening not PSD; shifted by {shift:e} times the identity square"));
    }
    sink.json(&json!({
        "summary": {
            "n": n,
            "seeds": args.seeds,
            "completed": components.len(),
            "failed": failures,
            "tv_to_target": tv,
            "ledger_pass_rate": {
                "u_norms": rate(&|c| c.ledger.u_norms),
                "v_norms": rate(&|c| c.ledger.v_norms),
                "w_norms": rate(&|c| c.ledger.w_norms),
                "orthogonality": rate(&|c| c.ledger.orthogonality),
                "all": rate(&|c| c.ledger.all()),
            },
            "notes": notes,
        }
    }))
}

fn cmd_cw(args: &CwArgs, seed: u64, format: Option<Format>, sink: &mut Sink) -> CliResult<()> {
    if args.beta_star {
        let b = curie_weiss::beta_star(args.p, 1e-12)?;
        return match format {
            Some(Format::Json) => sink.json(&json!({ "p": args.p, "beta_star": b })),
            _ => sink.line(&format!("{b:.5}")),
        };
    }
    if args.seeds == 0 || args.n_list.is_empty() || args.beta_list.is_empty() {
        return Err(usage("--seeds, --n-list and --beta-list must be non-empty"));
    }
    // Each beta gets its own block of streams.
    let mut rows = Vec::new();
    for (b, &beta) in args.beta_list.iter().enumerate() {
        let base_seed: u64 = rng::stream(seed, b as u64).random();
        rows.extend(curie_weiss::hitting_time_experiment(&args.n_list, args.p, beta, args.seeds, base_seed, args.budget)?);
    }
    if args.sweep {
        let summary = curie_weiss::summarize(&rows);
        match format {
            Some(Format::Json) => summary.iter().try_for_each(|s| sink.json(s)),
            _ => sink.csv(&summary),
        }
    } else {
        match format {
            Some(Format::Json) => rows.iter().try_for_each(|r| sink.json(r)),
            _ => sink.csv(&rows),
        }
    }
}

#[derive(Debug, Serialize)]
struct GaussianRow {
    n: usize,
    seed: u64,
    inj_lower: f64,
    inj_upper: f64,
    n_lower: f64,
    n_upper: f64,
}

fn cmd_gaussian(args: &GaussianArgs, seed: u64, format: Option<Format>, sink: &mut Sink) -> CliResult<()> {
    if args.seeds == 0 || args.n_list.is_empty() {
        return Err(usage("--seeds and --n-list must be non-empty"));
    }
    if let Some(&n) = args.n_list.iter().find(|&&n| n == 0 || n > 64) {
        return Err(Error::DimensionTooLarge { n, max: 64 }.into());
    }
    let jobs: Vec<(usize, usize, u64)> =
        args.n_list.iter().enumerate().flat_map(|(i, &n)| (0..args.seeds as u64).map(move |k| (i, n, k))).collect();
    let rows: Vec<GaussianRow> = jobs
        .par_iter()
        .map(|&(i, n, k)| {
            let mut r = rng::stream(seed, (i * args.seeds) as u64 + k);
            let t = tensor_core::sample_gaussian_tensor(n, &mut r)?;
            let opts = InjectiveOptions { starts: args.starts.max(1), seed: k, ..Default::default() };
            let (lo, hi) = t.injective_norm(&opts);
            Ok(GaussianRow { n, seed: k, inj_lower: lo, inj_upper: hi, n_lower: n as f64 * lo, n_upper: n as f64 * hi })
        })
        .collect::<Result<_, Error>>()?;
    match format {
        Some(Format::Json) => rows.iter().try_for_each(|r| sink.json(r)),
        _ => sink.csv(&rows),
    }
}

fn cmd_dobrushin(args: &DobrushinArgs, format: Option<Format>, sink: &mut Sink) -> CliResult<()> {
    json_only(format, "dobrushin")?;
    let (n, table) = load_potential(&args.source)?;
    let a = dobrushin::influence_matrix_exact(&table, n)?;
    let norm = a.operator_norm();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).collect()).collect();
    sink.json(&json!({
        "n": n,
        "influence": rows,
        "influence_norm": norm,
        "bound": (norm < 1.0).then(|| 1.0 / (1.0 - norm)),
        "reason": (norm >= 1.0).then_some("influence norm >= 1"),
    }))
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure { code: 1, message: e.to_string() })?;
    }
    let mut sink = Sink::open(&cli.out)?;
    match &cli.command {
        Command::Gap(a) => cmd_gap(a, cli.format, &mut sink),
        Command::Certify(a) => cmd_certify(a, cli.seed, cli.format, &mut sink),
        Command::Decompose(a) => cmd_decompose(a, cli.seed, cli.format, &mut sink),
        Command::Cw(a) => cmd_cw(a, cli.seed, cli.format, &mut sink),
        Command::GaussianSweep(a) => cmd_gaussian(a, cli.seed, cli.format, &mut sink),
        Command::Dobrushin(a) => cmd_dobrushin(a, cli.format, &mut sink),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
