use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faer::Mat;
use serde::Serialize;
use serde_json::{json, Value};

use metric_krr::clusters::{self, density_interaction_bound, dimensional_reduction_error, noninteraction_report};
use metric_krr::landscape::{self, certify_boundary_detector, certify_detector, descend, sweep_1d};
use metric_krr::numeric::{from_rows, to_rows};
use metric_krr::sample::{empirical_from_generator, RNG_ALGORITHM};
use metric_krr::solver;
use metric_krr::variation::{boundary_decomposition, fd_grad_oracle, grad_sigma, minimizer_sensitivity};
use metric_krr::{Error, GeneratorConfig, GeneratorKind, Metric, RadialKernel, Result, SampleSet};

#[derive(Parser, Serialize)]
#[command(name = "metric-krr", version, about = "Kernel ridge regression with a learnable metric")]
struct Cli {
    /// Worker threads (default: METRIC_KRR_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Solve the regression problem at one metric.
    Solve(SolveArgs),
    /// Evaluate 𝒥(t·Σ) on a log grid of t.
    Sweep(SweepArgs),
    /// Projected gradient descent from a starting metric.
    Descend(DescendArgs),
    /// Certify the scale-detector gap property at a metric.
    Detect(DetectArgs),
    /// Values of 𝒥 at infinity.
    Limit(LimitArgs),
    /// Cluster interaction report.
    Clusters(ClustersArgs),
    /// Draw an empirical sample set from a generator.
    Gen(GenArgs),
    /// First variation of 𝒥 in the metric.
    Grad(GradArgs),
}

#[derive(Args, Serialize, Clone)]
struct Problem {
    #[arg(long)]
    samples: PathBuf,
    /// e.g. `gaussian:beta=1`, `sobolev:gamma=1.5`, `invpow:alpha=1`.
    #[arg(long)]
    kernel: String,
    #[arg(long, allow_negative_numbers = true)]
    lambda: f64,
    #[command(flatten)]
    sigma: SigmaArgs,
}

#[derive(Args, Serialize, Clone)]
struct SigmaArgs {
    /// Metric t·I.
    #[arg(long, conflicts_with = "sigma", allow_negative_numbers = true)]
    sigma_scalar: Option<f64>,
    /// JSON file holding the metric as a list of rows.
    #[arg(long)]
    sigma: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct OutArgs {
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SolveArgs {
    #[command(flatten)]
    problem: Problem,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    problem: Problem,
    /// `log:<t_min>:<t_max>:<n>`.
    #[arg(long)]
    grid: String,
    /// CSV output with columns `t,j`.
    #[arg(long)]
    out: PathBuf,
    /// Minima JSON (default: `<out>.minima.json`).
    #[arg(long)]
    minima: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DescendArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    grad_tol: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize)]
struct DetectArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: f64,
    /// Neighbourhood ratio Λ > 1.
    #[arg(long, allow_negative_numbers = true)]
    ratio: f64,
    #[arg(long, default_value_t = 256)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on the null-subspace block; selects the boundary certificate.
    #[arg(long)]
    cap: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize)]
struct LimitArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    lambda: f64,
    /// Needed for the pairwise potential and the partial limit.
    #[arg(long)]
    kernel: Option<String>,
    #[command(flatten)]
    sigma: SigmaArgs,
    /// JSON rows of a d×k orthonormal basis of the bounded subspace W.
    #[arg(long)]
    w_basis: Option<PathBuf>,
    /// Metric on W as JSON rows.
    #[arg(long, conflicts_with = "sigma_w_scalar")]
    sigma_w: Option<PathBuf>,
    #[arg(long)]
    sigma_w_scalar: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize)]
struct ClustersArgs {
    #[command(flatten)]
    problem: Problem,
    /// Also report decoupled values with masses renormalized per cluster.
    #[arg(long)]
    renormalized: bool,
    /// JSON object mapping labels to d×k basis rows of Wᵢ.
    #[arg(long)]
    subspaces: Option<PathBuf>,
    /// Density bound p₀ of the quotient marginal.
    #[arg(long, requires_all = ["quotient_det", "quotient_dim"])]
    density_p0: Option<f64>,
    #[arg(long)]
    quotient_det: Option<f64>,
    #[arg(long)]
    quotient_dim: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum GenKind {
    #[value(alias = "two_scale")]
    Twoscale,
    #[value(alias = "multi_scale")]
    Multiscale,
    #[value(alias = "variable_selection")]
    Varsel,
}

#[derive(Args, Serialize)]
struct GenArgs {
    kind: GenKind,
    /// Component scales σᵢ.
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    centers: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    probs: Vec<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    noise_dims: usize,
    /// `.json` or `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GradArgs {
    #[command(flatten)]
    problem: Problem,
    /// Also report a finite-difference gradient with this step.
    #[arg(long)]
    fd_step: Option<f64>,
    /// Also report per-atom derivatives of the fitted function.
    #[arg(long)]
    sensitivity: bool,
    #[command(flatten)]
    out: OutArgs,
}

/// Writes every float with 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        if v.is_finite() {
            write!(w, "{v:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn to_json_text<T: Serialize>(v: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    v.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

struct Run {
    start: Instant,
    config: Value,
    seed: Option<u64>,
    threads: usize,
}

impl Run {
    fn meta(&self) -> Value {
        json!({
            "tool": "metric-krr",
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "seed": self.seed,
            "rng": RNG_ALGORITHM,
            "threads": self.threads,
            "wall_time_s": self.start.elapsed().as_secs_f64(),
        })
    }

    fn with_meta<T: Serialize>(&self, body: &T) -> Result<Value> {
        let mut v = serde_json::to_value(body)?;
        match &mut v {
            Value::Object(map) => {
                map.insert("meta".into(), self.meta());
            }
            other => {
                v = json!({ "result": other.take(), "meta": self.meta() });
            }
        }
        Ok(v)
    }
}

fn read_rows(path: &Path) -> Result<Mat<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(path)?)?;
    from_rows(&rows)
}

fn metric_from(args: &SigmaArgs, dim: usize) -> Result<Metric> {
    match (&args.sigma, args.sigma_scalar) {
        (Some(p), _) => {
            let m = read_rows(p)?;
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Invalid(format!("metric must be {dim}x{dim}")));
            }
            Metric::new(m)
        }
        (None, Some(t)) => Metric::scalar(dim, t),
        (None, None) => Ok(Metric::identity(dim)),
    }
}

struct Loaded {
    samples: SampleSet,
    kernel: RadialKernel,
    lambda: f64,
    sigma: Metric,
}

fn load_problem(p: &Problem) -> Result<Loaded> {
    if !(p.lambda > 0.0 && p.lambda.is_finite()) {
        return Err(Error::Invalid(format!("lambda must be positive, got {}", p.lambda)));
    }
    let kernel: RadialKernel = p.kernel.parse()?;
    let samples = SampleSet::load(&p.samples)?;
    let sigma = metric_from(&p.sigma, samples.dim)?;
    Ok(Loaded { samples, kernel, lambda: p.lambda, sigma })
}

fn parse_grid(spec: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Invalid(format!("grid `{spec}` must look like log:<t_min>:<t_max>:<n>"));
    if parts.len() != 4 || parts[0] != "log" {
        return Err(bad());
    }
    let lo: f64 = parts[1].parse().map_err(|_| bad())?;
    let hi: f64 = parts[2].parse().map_err(|_| bad())?;
    let n: usize = parts[3].parse().map_err(|_| bad())?;
    Ok((lo, hi, n))
}

fn cmd_solve(a: &SolveArgs, run: &Run) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let r = solver::solve(&p.samples, &p.sigma, &p.kernel, p.lambda)?;
    emit(a.out.out.as_deref(), &to_json_text(&run.with_meta(&r)?)?)
}

fn cmd_sweep(a: &SweepArgs, run: &Run) -> Result<()> {
    let (lo, hi, n) = parse_grid(&a.grid)?;
    let p = load_problem(&a.problem)?;
    let table = sweep_1d(&p.samples, &p.kernel, p.lambda, &p.sigma, lo, hi, n)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["t", "j"])?;
    for (t, j) in table.ts.iter().zip(&table.values) {
        w.write_record([fmt_f64(*t), fmt_f64(*j)])?;
    }
    w.flush()?;
    let minima_path = a.minima.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".minima.json");
        PathBuf::from(s)
    });
    let body = json!({ "minima": table.minima(), "j_at_zero": table.j_at_zero });
    fs::write(minima_path, to_json_text(&run.with_meta(&body)?)?)?;
    Ok(())
}

fn cmd_descend(a: &DescendArgs, run: &Run) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let t = descend(&p.samples, &p.kernel, p.lambda, &p.sigma, a.max_iters, a.grad_tol)?;
    emit(a.out.out.as_deref(), &to_json_text(&run.with_meta(&t)?)?)
}

fn cmd_detect(a: &DetectArgs, run: &Run) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let v = match a.cap {
        Some(cap) => certify_boundary_detector(&p.samples, &p.kernel, p.lambda, &p.sigma, cap, a.epsilon, a.ratio, a.n_samples, a.seed)?,
        None => certify_detector(&p.samples, &p.kernel, p.lambda, &p.sigma, a.epsilon, a.ratio, a.n_samples, a.seed)?,
    };
    emit(a.out.out.as_deref(), &to_json_text(&run.with_meta(&v)?)?)
}

fn cmd_limit(a: &LimitArgs, run: &Run) -> Result<()> {
    if !(a.lambda > 0.0 && a.lambda.is_finite()) {
        return Err(Error::Invalid(format!("lambda must be positive, got {}", a.lambda)));
    }
    let kernel: Option<RadialKernel> = a.kernel.as_deref().map(str::parse).transpose()?;
    let s = SampleSet::load(&a.samples)?;
    let mut body = serde_json::Map::new();
    body.insert("j_limit_full".into(), json!(landscape::limit_at_infinity_full(&s, a.lambda)?));
    if let Some(k) = &kernel {
        if a.sigma.sigma.is_some() || a.sigma.sigma_scalar.is_some() {
            let sigma = metric_from(&a.sigma, s.dim)?;
            let approx = landscape::pairwise_potential_approx(&s, &sigma, k, a.lambda)?;
            body.insert("pairwise".into(), serde_json::to_value(approx)?);
        }
    }
    if let Some(wp) = &a.w_basis {
        let k = kernel
            .as_ref()
            .ok_or_else(|| Error::Invalid("the partial limit needs --kernel".into()))?;
        let w = read_rows(wp)?;
        let sigma_w = match (&a.sigma_w, a.sigma_w_scalar) {
            (Some(p), _) => Metric::new(read_rows(p)?)?,
            (None, Some(t)) => Metric::scalar(w.ncols(), t)?,
            (None, None) => Metric::identity(w.ncols()),
        };
        let lim = landscape::limit_at_partial_infinity(&s, &w, &sigma_w, a.lambda, k)?;
        body.insert("partial".into(), serde_json::to_value(lim)?);
    }
    emit(a.out.out.as_deref(), &to_json_text(&run.with_meta(&Value::Object(body))?)?)
}

fn cmd_clusters(a: &ClustersArgs, run: &Run) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let report = noninteraction_report(&p.samples, &p.sigma, &p.kernel, p.lambda)?;
    let mut body = serde_json::to_value(&report)?;
    let map = body.as_object_mut().expect("report serializes to an object");
    map.insert("hs_norm_sq".into(), json!(clusters::hs_norm_sq(&p.samples, &p.sigma, &p.kernel)?));
    map.insert("y_norm_sq".into(), json!(clusters::y_norm_sq(&p.samples, &p.sigma, &p.kernel)?));
    if a.renormalized {
        let dec = clusters::decoupled_solve(&p.samples, &p.sigma, &p.kernel, p.lambda, true)?;
        map.insert("j_decoupled_renormalized".into(), json!(dec.j_list));
    }
    if let Some(path) = &a.subspaces {
        let raw: BTreeMap<usize, Vec<Vec<f64>>> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let subspaces = raw
            .into_iter()
            .map(|(l, rows)| {
                let m = if rows.is_empty() { Mat::zeros(p.samples.dim, 0) } else { from_rows(&rows)? };
                Ok((l, m))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let red = dimensional_reduction_error(&p.samples, &subspaces, &p.sigma, &p.kernel, p.lambda)?;
        map.insert(
            "dimensional_reduction".into(),
            json!({ "four_term": red.four_term, "f1_bound": red.f1_bound, "e_y1_sq": red.e_y1_sq, "f1_measured": red.f1_measured }),
        );
    }
    if let (Some(p0), Some(det), Some(dim)) = (a.density_p0, a.quotient_det, a.quotient_dim) {
        map.insert(
            "density_bound".into(),
            json!({
                "first_power": density_interaction_bound(p0, det, &p.kernel, dim)?,
                "squared": density_interaction_bound(p0, det, &p.kernel.squared()?, dim)?,
            }),
        );
    }
    emit(a.out.out.as_deref(), &to_json_text(&run.with_meta(&body)?)?)
}

fn cmd_gen(a: &GenArgs, run: &Run) -> Result<()> {
    let cfg = GeneratorConfig {
        kind: match a.kind {
            GenKind::Twoscale => GeneratorKind::TwoScale,
            GenKind::Multiscale => GeneratorKind::MultiScale,
            GenKind::Varsel => GeneratorKind::VariableSelection,
        },
        centers: a.centers.clone(),
        scales: a.sigmas.clone(),
        probs: a.probs.clone(),
        n_samples: a.n,
        seed: a.seed,
        noise_dims: a.noise_dims,
    };
    let s = empirical_from_generator(&cfg)?;
    let is_csv = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        s.save(&a.out)?;
        let mut meta = a.out.clone().into_os_string();
        meta.push(".meta.json");
        fs::write(meta, to_json_text(&json!({ "generator": cfg, "meta": run.meta() }))?)?;
    } else {
        let body = json!({ "dim": s.dim, "atoms": s.atoms, "generator": cfg });
        fs::write(&a.out, to_json_text(&run.with_meta(&body)?)?)?;
    }
    Ok(())
}

fn cmd_grad(a: &GradArgs, run: &Run) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let r = solver::solve(&p.samples, &p.sigma, &p.kernel, p.lambda)?;
    let g = grad_sigma(&p.samples, &p.sigma, &p.kernel, p.lambda, &r)?;
    let w = p.sigma.null_space(1e-10)?;
    let blocks = if w.ncols() > 0 {
        let bd = boundary_decomposition(&p.samples, &p.sigma, &w, &p.kernel, p.lambda)?;
        let mut b = serde_json::to_value(bd.blocks_json())?;
        b["null_basis"] = json!(to_rows(&bd.w_basis));
        b["reassembly_error"] = json!(bd.reassembly_error());
        Some(b)
    } else {
        None
    };
    let mut body = json!({ "j": r.j_value, "tensor": to_rows(&g.tensor), "blocks": blocks });
    if let Some(h) = a.fd_step {
        let fd = fd_grad_oracle(&p.samples, &p.sigma, &p.kernel, p.lambda, h)?;
        body["finite_difference"] = json!(to_rows(&fd.tensor));
    }
    if a.sensitivity {
        let sens = minimizer_sensitivity(&p.samples, &p.sigma, &p.kernel, p.lambda, &r)?;
        body["sensitivity"] = json!(sens.iter().map(to_rows).collect::<Vec<_>>());
    }
    emit(a.out.out.as_deref(), &to_json_text(&run.with_meta(&body)?)?)
}

fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::Detect(a) => Some(a.seed),
        Command::Gen(a) => Some(a.seed),
        _ => None,
    }
}

fn configure_threads(flag: Option<usize>) -> Result<usize> {
    let requested = match flag {
        Some(n) => Some(n),
        None => match std::env::var("METRIC_KRR_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::Invalid(format!("METRIC_KRR_THREADS must be a positive integer, got `{v}`"))
            })?),
            Err(_) => None,
        },
    };
    if requested == Some(0) {
        return Err(Error::Invalid("thread count must be positive".into()));
    }
    if let Some(n) = requested {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("cannot size the thread pool: {e}")))?;
    }
    let n = rayon::current_num_threads();
    faer::set_global_parallelism(faer::Par::rayon(n));
    metric_krr::numeric::flush_subnormals_to_zero();
    Ok(n)
}

fn run(cli: Cli) -> Result<()> {
    let threads = configure_threads(cli.threads)?;
    let run = Run {
        start: Instant::now(),
        config: serde_json::to_value(&cli)?,
        seed: seed_of(&cli.command),
        threads,
    };
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, &run),
        Command::Sweep(a) => cmd_sweep(a, &run),
        Command::Descend(a) => cmd_descend(a, &run),
        Command::Detect(a) => cmd_detect(a, &run),
        Command::Limit(a) => cmd_limit(a, &run),
        Command::Clusters(a) => cmd_clusters(a, &run),
        Command::Gen(a) => cmd_gen(a, &run),
        Command::Grad(a) => cmd_grad(a, &run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
