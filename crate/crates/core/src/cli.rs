//! Command line runner. Every subcommand reads an optional JSON config,
//! applies flag overrides, echoes the resolved config into its outputs and
//! maps errors to exit codes (1 validation, 2 non-convergence).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    branch, density_checks, mazya_poborchi_range, parse_dyadic, phi_chain, scaling_sweep, cantor_energy_decay,
    wiener_diagnostic, Resolution, TrendTest, WindowDomain,
};
use crate::capsolve::{oracle_concentric_balls, solve_capacity, SolverOptions, WindowConvention};
use crate::error::{invalid, Error, Result};
use crate::extension::{lambda_o, norm_ratios, ExtensionParams, LipschitzFn};
use crate::geometry::{svc_build, whitney_decompose, CantorCylinderSpec, Condenser, CuspFunction, HFunction};
use crate::grid::Lattice;

/// Version of the JSON summary layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "capres", version, about = "Variational p-capacity experiments")]
struct Cli {
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory for `<command>.csv` and `<command>.json`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config; flags given on the command line override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form capacity of concentric balls.
    Oracle(OracleArgs),
    /// Grid solve of one condenser.
    Capacity(CapacityArgs),
    /// Window capacities across radii with log-log fits.
    Scaling(ScalingArgs),
    /// Wiener-type fatness quotients and density ratios.
    Fatness(FatnessArgs),
    /// Measure-density quantities per radius.
    Density(DensityArgs),
    /// Norm ratios of the truncated extension operator.
    Extension(ExtensionArgs),
    /// Energy decay of the Cantor-cylinder test function, optional capacity chain.
    Decay(DecayArgs),
    /// SVC set, Whitney cubes and cylinder radii.
    Construct(ConstructArgs),
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long = "R")]
    big_r: Option<f64>,
}

#[derive(Args, Debug)]
struct CapacityArgs {
    #[command(flatten)]
    balls: OracleArgs,
    /// Lattice nodes along the longest axis.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainKind {
    Cusp,
    Ball,
    HalfSpace,
    Whole,
}

#[derive(Args, Debug)]
struct DomainArgs {
    #[arg(long, value_enum)]
    domain: Option<DomainKind>,
    /// Cusp profile: `t^2`, `t^s`, `t^s*log^a`, `t/log^b`.
    #[arg(long)]
    w: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Radius of the ball domain.
    #[arg(long)]
    radius: Option<f64>,
    /// Meridian cells per window radius.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[command(flatten)]
    dom: DomainArgs,
    #[arg(long)]
    p: Option<f64>,
    /// Dyadic range such as `2^-3..2^-8`.
    #[arg(long)]
    radii: Option<String>,
    #[arg(long, value_enum)]
    convention: Option<ConventionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConventionArg {
    Density,
    Wiener,
}

#[derive(Args, Debug)]
struct FatnessArgs {
    #[command(flatten)]
    dom: DomainArgs,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    scales: Option<String>,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[command(flatten)]
    dom: DomainArgs,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    radii: Option<String>,
}

#[derive(Args, Debug)]
struct ExtensionArgs {
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    svc_level: Option<usize>,
}

#[derive(Args, Debug)]
struct DecayArgs {
    #[arg(long)]
    radii: Option<String>,
    /// Also run the capacity chain with this `p` (and the domain's `q`).
    #[arg(long)]
    chain_p: Option<f64>,
}

#[derive(Args, Debug)]
struct ConstructArgs {
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    svc_level: Option<usize>,
}

// ---- configs ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n: usize,
    pub p: f64,
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { n: 3, p: 2.0, r: 0.25, big_r: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    pub condenser: Condenser,
    pub grid: usize,
    pub solver: SolverOptions,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig { condenser: Condenser::concentric_balls(&[0.0; 3], 0.25, 0.5, 2.0), grid: 48, solver: SolverOptions::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub domain: WindowDomain,
    pub p: f64,
    pub radii: String,
    pub convention: WindowConvention,
    pub resolution: Resolution,
    pub solver: SolverOptions,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            domain: WindowDomain::Cusp { w: CuspFunction::Quadratic, n: 3 },
            p: 2.5,
            radii: "2^-3..2^-8".into(),
            convention: WindowConvention::Density,
            resolution: Resolution::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FatnessConfig {
    pub domain: WindowDomain,
    pub p: f64,
    pub scales: String,
    pub trend: TrendTest,
    pub resolution: Resolution,
    pub solver: SolverOptions,
}

impl Default for FatnessConfig {
    fn default() -> Self {
        FatnessConfig {
            domain: WindowDomain::Cusp { w: CuspFunction::LogLinear { beta: 1.0 }, n: 3 },
            p: 1.5,
            scales: "2^-3..2^-8".into(),
            trend: TrendTest::default(),
            resolution: Resolution::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub domain: WindowDomain,
    pub p: f64,
    pub q: f64,
    pub radii: String,
    pub resolution: Resolution,
    pub solver: SolverOptions,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            domain: WindowDomain::Ball { n: 3, radius: 1.0 },
            p: 4.0,
            q: 2.5,
            radii: "2^-2..2^-7".into(),
            resolution: Resolution::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionConfig {
    pub n: usize,
    pub p: f64,
    pub q: f64,
    /// `None` picks `2 lambda_o`.
    pub lambda: Option<f64>,
    pub m: usize,
    pub svc_level: usize,
    pub suite: Vec<(String, LipschitzFn)>,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        ExtensionConfig { n: 3, p: 4.0, q: 1.0, lambda: None, m: 5, svc_level: 10, suite: LipschitzFn::suite() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub p: f64,
    pub max_tubes: usize,
    pub resolution: Resolution,
    pub solver: SolverOptions,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            p: 4.0,
            max_tubes: 16,
            resolution: Resolution { cells: 16, ..Default::default() },
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    pub spec: CantorCylinderSpec,
    pub x: Vec<f64>,
    pub radii: String,
    pub chain: Option<ChainConfig>,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            spec: CantorCylinderSpec {
                n: 3,
                q: 1.0,
                lambda: 3.0,
                h: HFunction::Lambda { lambda: 3.0 },
                m: 20,
                svc_level: 12,
                radii_rule: Default::default(),
            },
            x: vec![0.375, 0.375, 1.75],
            radii: "2^-3..2^-9".into(),
            chain: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructConfig {
    pub spec: CantorCylinderSpec,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        ConstructConfig {
            spec: CantorCylinderSpec {
                n: 3,
                q: 1.0,
                lambda: 2.0,
                h: HFunction::Identity,
                m: 6,
                svc_level: 8,
                radii_rule: Default::default(),
            },
        }
    }
}

// ---- outputs ----

/// What a subcommand produced.
struct Output {
    command: &'static str,
    config: Value,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    summary: Value,
    /// Some numerical step did not converge.
    partial: bool,
    /// Printed instead of the JSON summary.
    stdout: Option<String>,
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_outputs(dir: &Path, out: &Output, summary: &Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    {
        let tool = format!("# capres {}\n", env!("CARGO_PKG_VERSION"));
        buf.extend_from_slice(tool.as_bytes());
        buf.extend_from_slice(format!("# config: {}\n", serde_json::to_string(&out.config)?).as_bytes());
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(&out.header).map_err(csv_err)?;
        for r in &out.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(dir.join(format!("{}.csv", out.command)), buf)?;
    fs::write(dir.join(format!("{}.json", out.command)), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn load<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
    }
}

fn apply_domain(d: &mut WindowDomain, a: &DomainArgs, res: &mut Resolution) -> Result<()> {
    if let Some(g) = a.grid {
        res.cells = g;
    }
    if a.domain.is_none() && a.w.is_none() && a.n.is_none() && a.radius.is_none() {
        return Ok(());
    }
    let n = a.n.unwrap_or(d.n());
    let kind = a.domain.unwrap_or(match d {
        WindowDomain::Cusp { .. } => DomainKind::Cusp,
        WindowDomain::Ball { .. } => DomainKind::Ball,
        WindowDomain::HalfSpace { .. } => DomainKind::HalfSpace,
        WindowDomain::Whole { .. } => DomainKind::Whole,
    });
    *d = match kind {
        DomainKind::Cusp => {
            let w = match (&a.w, &*d) {
                (Some(s), _) => CuspFunction::parse(s)?,
                (None, WindowDomain::Cusp { w, .. }) => w.clone(),
                (None, _) => CuspFunction::Quadratic,
            };
            WindowDomain::Cusp { w, n }
        }
        DomainKind::Ball => {
            let old = if let WindowDomain::Ball { radius, .. } = d { *radius } else { 1.0 };
            WindowDomain::Ball { n, radius: a.radius.unwrap_or(old) }
        }
        DomainKind::HalfSpace => WindowDomain::HalfSpace { n },
        DomainKind::Whole => WindowDomain::Whole { n },
    };
    Ok(())
}

fn exponents(s: &str) -> Result<Vec<i32>> {
    Ok(parse_dyadic(s)?.iter().map(|t| -t.log2().round() as i32).collect())
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

// ---- subcommands ----

fn oracle(cfg: OracleConfig) -> Result<Output> {
    let v = oracle_concentric_balls(cfg.n, cfg.p, cfg.r, cfg.big_r)?;
    Ok(Output {
        command: "oracle",
        config: to_value(&cfg)?,
        header: vec!["n", "p", "r", "R", "capacity"],
        rows: vec![vec![cfg.n.to_string(), num(cfg.p), num(cfg.r), num(cfg.big_r), num(v)]],
        summary: json!({ "capacity": v }),
        partial: false,
        stdout: Some(format!("{v}")),
    })
}

fn capacity(cfg: CapacityConfig, oracle_cfg: Option<OracleConfig>) -> Result<Output> {
    let lattice = Lattice::covering(&cfg.condenser.ambient.bounding_box(), cfg.grid)?;
    let est = solve_capacity(&cfg.condenser, &lattice, &cfg.solver)?;
    let predicted = match &oracle_cfg {
        Some(o) => oracle_concentric_balls(o.n, o.p, o.r, o.big_r).ok(),
        None => None,
    };
    let ratio = predicted.map(|p| est.value / p);
    Ok(Output {
        command: "capacity",
        config: to_value(&cfg)?,
        header: vec!["p", "grid", "cap_lower", "cap_upper", "predicted", "ratio", "residual"],
        rows: vec![vec![
            num(cfg.condenser.p),
            cfg.grid.to_string(),
            num(est.value),
            String::new(),
            opt(predicted),
            opt(ratio),
            num(est.residual),
        ]],
        summary: json!({ "estimate": est, "closed_form": predicted, "ratio": ratio }),
        partial: !est.converged,
        stdout: None,
    })
}

fn scaling(cfg: ScalingConfig) -> Result<Output> {
    let radii = parse_dyadic(&cfg.radii)?;
    let s = scaling_sweep(&cfg.domain, cfg.p, &radii, cfg.convention, &cfg.resolution, &cfg.solver)?;
    let rows = s
        .rows
        .iter()
        .map(|r| {
            vec![
                s.n.to_string(),
                num(s.p),
                num(r.r),
                opt(r.cap_lower),
                opt(r.cap_upper),
                num(r.predicted),
                opt(r.cap_lower.map(|c| c / r.predicted)),
                opt(r.cap_lower.zip(r.cap_upper).map(|(l, u)| u - l)),
            ]
        })
        .collect();
    let slope = |f: Result<crate::analysis::Fit>| f.ok().map(|f| f.slope);
    let summary = json!({
        "branch": format!("{:?}", branch(s.n, s.p)),
        "slope_lower": slope(s.lower_fit()),
        "slope_upper": slope(s.upper_fit()),
        "slope_predicted": slope(s.predicted_fit()),
        "partial": s.partial,
        "rows": s.rows,
    });
    Ok(Output {
        command: "scaling",
        config: to_value(&cfg)?,
        header: vec!["n", "p", "r", "cap_lower", "cap_upper", "predicted", "ratio", "residual"],
        rows,
        summary,
        partial: s.partial,
        stdout: None,
    })
}

fn fatness(cfg: FatnessConfig) -> Result<Output> {
    let ex = exponents(&cfg.scales)?;
    let rep = wiener_diagnostic(&cfg.domain, cfg.p, &ex, &cfg.resolution, &cfg.solver, &cfg.trend)?;
    let rows = (0..rep.scales.len())
        .map(|i| {
            vec![
                num(rep.p),
                num(rep.scales[i]),
                num(rep.ratios[i]),
                num(rep.terms[i]),
                num(rep.partial_sums[i]),
                num(rep.density_ratios[i]),
            ]
        })
        .collect();
    Ok(Output {
        command: "fatness",
        config: to_value(&cfg)?,
        header: vec!["p", "t", "ratio", "term", "partial_sum", "density_ratio"],
        rows,
        summary: to_value(&rep)?,
        partial: false,
        stdout: None,
    })
}

fn density(cfg: DensityConfig) -> Result<Output> {
    let radii = parse_dyadic(&cfg.radii)?;
    let rows = density_checks(&cfg.domain, cfg.p, cfg.q, &radii, &cfg.resolution, &cfg.solver)?;
    let partial = rows.iter().any(|r| !r.converged);
    let csv_rows = rows
        .iter()
        .map(|r| {
            vec![
                num(cfg.p),
                num(cfg.q),
                num(r.r),
                num(r.volume),
                num(r.volume_fraction),
                num(r.cap_q),
                num(r.phi_needed_capacity),
                num(r.phi_needed_volume),
                opt(r.cap_power_ratio),
            ]
        })
        .collect();
    let powers: Vec<f64> = rows.iter().filter_map(|r| r.cap_power_ratio).collect();
    let min_max = (!powers.is_empty()).then(|| {
        powers.iter().cloned().fold(f64::INFINITY, f64::min) / powers.iter().cloned().fold(0.0, f64::max)
    });
    Ok(Output {
        command: "density",
        config: to_value(&cfg)?,
        header: vec!["p", "q", "r", "volume", "volume_fraction", "cap_q", "phi_needed_capacity", "phi_needed_volume", "cap_power_ratio"],
        rows: csv_rows,
        summary: json!({ "cap_power_min_over_max": min_max, "rows": rows }),
        partial,
        stdout: None,
    })
}

fn extension(cfg: ExtensionConfig) -> Result<Output> {
    let lo = lambda_o(cfg.n, cfg.p, cfg.q)?;
    let lambda = cfg.lambda.unwrap_or(2.0 * lo);
    let params = ExtensionParams::new(cfg.n, cfg.p, cfg.q, lambda, cfg.m)?;
    let spec = CantorCylinderSpec {
        n: cfg.n,
        q: cfg.q,
        lambda,
        h: HFunction::Lambda { lambda },
        m: cfg.m + 1,
        svc_level: cfg.svc_level,
        radii_rule: Default::default(),
    };
    let rows = norm_ratios(&spec, &params, &cfg.suite, cfg.m)?;
    let csv_rows = rows
        .iter()
        .map(|r| vec![r.function.clone(), r.m.to_string(), num(r.extended_norm), num(r.source_norm), num(r.ratio), num(r.cauchy)])
        .collect();
    Ok(Output {
        command: "extension",
        config: to_value(&cfg)?,
        header: vec!["function", "m", "extended_norm", "source_norm", "ratio", "cauchy"],
        rows: csv_rows,
        summary: json!({ "lambda": lambda, "lambda_o": lo, "kappa": params.kappa, "rows": rows }),
        partial: false,
        stdout: None,
    })
}

fn decay(cfg: DecayConfig) -> Result<Output> {
    let radii = parse_dyadic(&cfg.radii)?;
    let rep = cantor_energy_decay(&cfg.spec, &cfg.x, &radii)?;
    let mut summary = json!({ "spread": rep.spread, "decay": rep.decay, "rows": rep.rows });
    if let Some(ch) = &cfg.chain {
        let params = ExtensionParams::new(cfg.spec.n, ch.p, cfg.spec.q, cfg.spec.lambda, cfg.spec.m)?;
        let chain = phi_chain(&cfg.spec, &params, &cfg.x, &radii, ch.max_tubes, &ch.resolution, &ch.solver)?;
        summary["chain_holds"] = json!(chain.iter().all(|r| r.holds));
        summary["chain"] = to_value(&chain)?;
    }
    let rows = rep
        .rows
        .iter()
        .map(|r| {
            vec![num(r.r), r.max_generation.to_string(), r.cylinders.to_string(), num(r.energy), num(r.h), num(r.ratio_rh), num(r.ratio_h)]
        })
        .collect();
    Ok(Output {
        command: "decay",
        config: to_value(&cfg)?,
        header: vec!["r", "max_generation", "cylinders", "energy", "h", "ratio_rh", "ratio_h"],
        rows,
        summary,
        partial: false,
        stdout: None,
    })
}

fn construct(cfg: ConstructConfig) -> Result<Output> {
    let spec = &cfg.spec;
    spec.validate()?;
    let svc = svc_build(spec.svc_level);
    let exact: f64 = 1.0 - (1..=spec.svc_level).map(|j| 2f64.powi(j as i32 - 1) * 4f64.powi(-(j as i32))).sum::<f64>();
    let mut rows = Vec::new();
    let mut gens = Vec::new();
    let mut last = 0;
    // generations until m nonempty ones are found
    for g in 0..=spec.svc_level + 3 {
        let cubes = whitney_decompose(Some(&svc), spec.n - 1, g, None)?;
        let here: Vec<_> = cubes.iter().filter(|c| c.generation == g).collect();
        if here.is_empty() {
            continue;
        }
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for c in &here {
            let (dl, du) = c.dist_bounds(&svc);
            lo = lo.min(dl / c.diam());
            hi = hi.max(du / c.diam());
        }
        let r = spec.radius(g)?;
        rows.push(vec![g.to_string(), here.len().to_string(), num(here[0].edge), num(r), num(lo), num(hi)]);
        gens.push(json!({ "generation": g, "cubes": here.len(), "r_k": r, "dist_over_diam": [lo, hi] }));
        last = g;
        if gens.len() >= spec.m {
            break;
        }
    }
    if gens.len() < spec.m {
        return invalid(format!("only {} nonempty generations at SVC level {}", gens.len(), spec.svc_level));
    }
    Ok(Output {
        command: "construct",
        config: to_value(&cfg)?,
        header: vec!["generation", "cubes", "edge", "r_k", "dist_over_diam_min", "dist_over_diam_max"],
        rows,
        summary: json!({
            "svc_measure": svc.measure(),
            "svc_measure_exact": exact,
            "last_generation": last,
            "generations": gens,
            "mp_range_n3_s2": mazya_poborchi_range(3, 2.0, None).ok().map(|r| json!({"p_min": r.p_min(), "p_star": r.p_star()})),
        }),
        partial: false,
        stdout: None,
    })
}

fn dispatch(cli: &Cli) -> Result<Output> {
    let cfg_path = &cli.config;
    match &cli.cmd {
        Command::Oracle(a) => {
            let mut c: OracleConfig = load(cfg_path)?;
            apply_balls(&mut c, a);
            oracle(c)
        }
        Command::Capacity(a) => {
            let mut c: CapacityConfig = load(cfg_path)?;
            let balls = &a.balls;
            let mut oc = None;
            if balls.n.is_some() || balls.p.is_some() || balls.r.is_some() || balls.big_r.is_some() || cfg_path.is_none() {
                let mut o = OracleConfig::default();
                apply_balls(&mut o, balls);
                c.condenser = Condenser::concentric_balls(&vec![0.0; o.n], o.r, o.big_r, o.p);
                oc = Some(o);
            }
            if let Some(g) = a.grid {
                c.grid = g;
            }
            capacity(c, oc)
        }
        Command::Scaling(a) => {
            let mut c: ScalingConfig = load(cfg_path)?;
            apply_domain(&mut c.domain, &a.dom, &mut c.resolution)?;
            if let Some(p) = a.p {
                c.p = p;
            }
            if let Some(r) = &a.radii {
                c.radii = r.clone();
            }
            if let Some(cv) = a.convention {
                c.convention = match cv {
                    ConventionArg::Density => WindowConvention::Density,
                    ConventionArg::Wiener => WindowConvention::Wiener,
                };
            }
            scaling(c)
        }
        Command::Fatness(a) => {
            let mut c: FatnessConfig = load(cfg_path)?;
            apply_domain(&mut c.domain, &a.dom, &mut c.resolution)?;
            if let Some(p) = a.p {
                c.p = p;
            }
            if let Some(s) = &a.scales {
                c.scales = s.clone();
            }
            fatness(c)
        }
        Command::Density(a) => {
            let mut c: DensityConfig = load(cfg_path)?;
            apply_domain(&mut c.domain, &a.dom, &mut c.resolution)?;
            if let Some(p) = a.p {
                c.p = p;
            }
            if let Some(q) = a.q {
                c.q = q;
            }
            if let Some(r) = &a.radii {
                c.radii = r.clone();
            }
            density(c)
        }
        Command::Extension(a) => {
            let mut c: ExtensionConfig = load(cfg_path)?;
            c.p = a.p.unwrap_or(c.p);
            c.q = a.q.unwrap_or(c.q);
            c.lambda = a.lambda.or(c.lambda);
            c.m = a.m.unwrap_or(c.m);
            c.svc_level = a.svc_level.unwrap_or(c.svc_level);
            extension(c)
        }
        Command::Decay(a) => {
            let mut c: DecayConfig = load(cfg_path)?;
            if let Some(r) = &a.radii {
                c.radii = r.clone();
            }
            if let Some(p) = a.chain_p {
                c.chain = Some(ChainConfig { p, ..c.chain.unwrap_or_default() });
            }
            decay(c)
        }
        Command::Construct(a) => {
            let mut c: ConstructConfig = load(cfg_path)?;
            c.spec.q = a.q.unwrap_or(c.spec.q);
            c.spec.lambda = a.lambda.unwrap_or(c.spec.lambda);
            c.spec.m = a.m.unwrap_or(c.spec.m);
            c.spec.svc_level = a.svc_level.unwrap_or(c.spec.svc_level);
            construct(c)
        }
    }
}

fn apply_balls(c: &mut OracleConfig, a: &OracleArgs) {
    c.n = a.n.unwrap_or(c.n);
    c.p = a.p.unwrap_or(c.p);
    c.r = a.r.unwrap_or(c.r);
    c.big_r = a.big_r.unwrap_or(c.big_r);
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.jobs {
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::InvalidInput(format!("cannot start {j} workers: {e}"))),
        },
        None => dispatch(&cli),
    };
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let summary = json!({
        "schema": SCHEMA_VERSION,
        "tool": format!("capres {}", env!("CARGO_PKG_VERSION")),
        "command": out.command,
        "config": out.config,
        "partial": out.partial,
        "summary": out.summary,
    });
    if let Some(dir) = &cli.out {
        if let Err(e) = write_outputs(dir, &out, &summary) {
            eprintln!("error: {e}");
            return 1;
        }
    }
    let text = match &out.stdout {
        Some(s) => s.clone(),
        None => serde_json::to_string_pretty(&summary).unwrap_or_default(),
    };
    // a closed pipe downstream is not an error of the run
    let _ = writeln!(std::io::stdout(), "{text}");
    if out.partial {
        eprintln!("warning: some solves did not converge; outputs are flagged partial");
        return 2;
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyadic_exponents() {
        assert_eq!(exponents("2^-3..2^-6").unwrap(), vec![3, 4, 5, 6]);
        assert!(exponents("3..6").is_err());
    }

    #[test]
    fn configs_round_trip() {
        let c = ScalingConfig::default();
        let back: ScalingConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.radii, c.radii);
        assert!(serde_json::from_str::<OracleConfig>(r#"{"bogus": 1}"#).is_err());
        let o: OracleConfig = serde_json::from_str(r#"{"p": 3}"#).unwrap();
        assert_eq!((o.n, o.p), (3, 3.0));
    }

    #[test]
    fn domain_flags_override() {
        let mut d = WindowDomain::Cusp { w: CuspFunction::Quadratic, n: 3 };
        let mut res = Resolution::default();
        let a = DomainArgs { domain: Some(DomainKind::Ball), w: None, n: None, radius: Some(2.0), grid: Some(64) };
        apply_domain(&mut d, &a, &mut res).unwrap();
        assert_eq!(d, WindowDomain::Ball { n: 3, radius: 2.0 });
        assert_eq!(res.cells, 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["capres", "oracle", "--n", "3", "--p", "2"]), 0);
        assert_eq!(run(["capres", "oracle", "--p", "1"]), 1);
        assert_eq!(run(["capres", "nope"]), 1);
        assert_eq!(run(["capres", "--version"]), 0);
    }
}
