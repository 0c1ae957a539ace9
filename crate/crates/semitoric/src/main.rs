//! Command-line front end: classify critical points, tabulate period
//! lattices, sample sigma, integrate the action, fit the Taylor invariant,
//! and compute monodromy matrices.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numeric failure (with a
//! machine-readable error record when an output path was given).

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use semitoric::critical::{find_critical_point, ff_normalization, williamson_classify};
use semitoric::error::Error;
use semitoric::flow::FlowOptions;
use semitoric::geometry::{HamiltonianSystem, PhaseVector};
use semitoric::models::SystemSpec;
use semitoric::monodromy::{monodromy_of_loop, LoopSpec};
use semitoric::periods::{build_period_basis, project_to_leaf};
use semitoric::regular::{
    action_integral, calibrate_ff_value_map, closedness_defect, integrate_s, sample_ray,
    sigma_from_basis, sigma_grid, taylor_fit, CalibrationOptions, FFValueMap, LogBranch,
};

#[derive(Parser)]
#[command(name = "semitoric", version, about = "Period lattices, regularized 1-forms, and monodromy of semi-toric systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// Builtin name (champagne_bottle) or path to a system-spec JSON file.
    #[arg(long, default_value = "champagne_bottle")]
    system: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Single seed for all randomness (classification trials, start jitter).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative integration tolerance override.
    #[arg(long)]
    rel_tol: Option<f64>,
    /// Absolute integration tolerance override.
    #[arg(long)]
    abs_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Refine a critical point from a seed point and classify it.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated phase-space coordinates of the starting guess.
        #[arg(long)]
        seed_point: String,
    },
    /// Period-lattice rows tau over a grid of regular values.
    Periods {
        #[command(flatten)]
        common: Common,
        /// Per-component "min:max:count" (axis) or a single number (fixed).
        #[arg(long)]
        grid: String,
    },
    /// The regularized 1-form sigma over a grid in the normalized plane.
    Sigma {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        /// Branch-cut direction of the logarithm, radians.
        #[arg(long, default_value_t = std::f64::consts::PI)]
        log_cut: f64,
    },
    /// Action integrals A(v) over a grid of regular values.
    Action {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
    },
    /// Taylor fit of the symplectic invariant S from an integrated grid.
    Taylor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = std::f64::consts::PI)]
        log_cut: f64,
        #[arg(long, default_value_t = 3)]
        taylor_degree: usize,
    },
    /// Integer monodromy matrix of a circular loop of regular values.
    Monodromy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.05)]
        radius: f64,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        /// Comma-separated loop center; defaults to the origin.
        #[arg(long)]
        center: Option<String>,
        /// +1 counterclockwise, -1 clockwise.
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        orientation: i32,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, anything else is a config error
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numeric { msg, out }) => {
            eprintln!("numeric failure: {msg}");
            if let Some(path) = out {
                let record = json!({ "error": msg });
                let _ = std::fs::write(path, serde_json::to_string_pretty(&record).unwrap());
            }
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Config(String),
    Numeric { msg: String, out: Option<PathBuf> },
}

/// Split library errors into the two CLI failure classes.
fn classify_error(e: Error, out: &Option<PathBuf>) -> CliError {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) => CliError::Config(e.to_string()),
        other => CliError::Numeric {
            msg: other.to_string(),
            out: out.clone(),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Classify { common, seed_point } => cmd_classify(&common, &seed_point),
        Command::Periods { common, grid } => cmd_periods(&common, &grid),
        Command::Sigma { common, grid, log_cut } => cmd_sigma(&common, &grid, log_cut, None),
        Command::Action { common, grid } => cmd_action(&common, &grid),
        Command::Taylor {
            common,
            grid,
            log_cut,
            taylor_degree,
        } => cmd_sigma(&common, &grid, log_cut, Some(taylor_degree)),
        Command::Monodromy {
            common,
            radius,
            steps,
            center,
            orientation,
        } => cmd_monodromy(&common, radius, steps, center.as_deref(), orientation),
    }
}

fn load_system(common: &Common) -> Result<HamiltonianSystem, CliError> {
    let spec = SystemSpec::resolve(&common.system)
        .map_err(|e| CliError::Config(e.to_string()))?;
    spec.build().map_err(|e| CliError::Config(e.to_string()))
}

fn flow_options(common: &Common) -> Result<FlowOptions, CliError> {
    let mut opts = FlowOptions::default();
    if let Some(r) = common.rel_tol {
        if !(r > 0.0) {
            return Err(CliError::Config(format!("rel-tol must be positive, got {r}")));
        }
        opts.rel_tol = r;
    }
    if let Some(a) = common.abs_tol {
        if !(a > 0.0) {
            return Err(CliError::Config(format!("abs-tol must be positive, got {a}")));
        }
        opts.abs_tol = a;
    }
    Ok(opts)
}

fn parse_floats(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad number {s:?}")))
        })
        .collect()
}

/// One grid component: either a sampled axis or a fixed value.
enum GridPart {
    Axis { min: f64, max: f64, count: usize },
    Fixed(f64),
}

fn parse_grid(text: &str, n: usize) -> Result<Vec<GridPart>, CliError> {
    let parts: Vec<GridPart> = text
        .split(',')
        .map(|item| {
            let item = item.trim();
            let fields: Vec<&str> = item.split(':').collect();
            match fields.len() {
                1 => item
                    .parse::<f64>()
                    .map(GridPart::Fixed)
                    .map_err(|_| CliError::Config(format!("bad grid component {item:?}"))),
                3 => {
                    let min = fields[0].parse::<f64>();
                    let max = fields[1].parse::<f64>();
                    let count = fields[2].parse::<usize>();
                    match (min, max, count) {
                        (Ok(min), Ok(max), Ok(count)) if count >= 2 && max > min => {
                            Ok(GridPart::Axis { min, max, count })
                        }
                        _ => Err(CliError::Config(format!("bad grid axis {item:?}"))),
                    }
                }
                _ => Err(CliError::Config(format!("bad grid component {item:?}"))),
            }
        })
        .collect::<Result<_, _>>()?;
    if parts.len() != n {
        return Err(CliError::Config(format!(
            "grid has {} components, system has {n}",
            parts.len()
        )));
    }
    Ok(parts)
}

fn axis_points(part: &GridPart) -> Vec<f64> {
    match *part {
        GridPart::Fixed(x) => vec![x],
        GridPart::Axis { min, max, count } => (0..count)
            .map(|i| min + (max - min) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// All grid nodes in row-major order over the sampled axes.
fn grid_nodes(parts: &[GridPart]) -> Vec<DVector<f64>> {
    let axes: Vec<Vec<f64>> = parts.iter().map(axis_points).collect();
    let mut nodes = vec![Vec::<f64>::new()];
    for axis in &axes {
        let mut next = Vec::with_capacity(nodes.len() * axis.len());
        for stem in &nodes {
            for &x in axis {
                let mut v = stem.clone();
                v.push(x);
                next.push(v);
            }
        }
        nodes = next;
    }
    nodes.into_iter().map(DVector::from_vec).collect()
}

/// Find a point on the leaf F^{-1}(v) from deterministic seeded starts.
fn find_anchor(
    sys: &HamiltonianSystem,
    v: &DVector<f64>,
    seed: u64,
) -> Result<PhaseVector, Error> {
    let dim = 2 * sys.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c);
    let mut last = Error::NoConvergence {
        iters: 0,
        residual: f64::INFINITY,
    };
    for trial in 0..60 {
        let start: Vec<f64> = if trial == 0 {
            // generic deterministic start away from coordinate axes
            (0..dim).map(|i| 0.9 / (1.0 + i as f64)).collect()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()
        };
        let guess = PhaseVector::from_slice(&start)?;
        match project_to_leaf(sys, &guess, v) {
            Ok(p) => return Ok(p),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_output(common: &Common, text: &str) -> Result<(), CliError> {
    match &common.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| CliError::Config(format!("cannot write stdout: {e}")))
        }
    }
}

fn csv_table(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|&x| fmt17(x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn cmd_classify(common: &Common, seed_point: &str) -> Result<(), CliError> {
    let sys = load_system(common)?;
    let coords = parse_floats(seed_point)?;
    if coords.len() != 2 * sys.dof() {
        return Err(CliError::Config(format!(
            "seed-point has {} coordinates, need {}",
            coords.len(),
            2 * sys.dof()
        )));
    }
    let guess = PhaseVector::from_slice(&coords)
        .map_err(|e| CliError::Config(e.to_string()))?;
    // walk the target ranks from most to least degenerate
    let mut found: Option<PhaseVector> = None;
    let mut last: Option<Error> = None;
    for rank in 0..sys.dof() {
        match find_critical_point(&sys, &guess, rank) {
            Ok(p) => {
                found = Some(p);
                break;
            }
            Err(e) => last = Some(e),
        }
    }
    let point = match found {
        Some(p) => p,
        None => return Err(classify_error(last.unwrap(), &common.out)),
    };
    let class = williamson_classify(&sys, &point, common.seed)
        .map_err(|e| classify_error(e, &common.out))?;
    let doc = json!({
        "point": point.coords().as_slice(),
        "rank": class.rank,
        "wtype": {
            "k_e": class.index.k_e,
            "k_f": class.index.k_f,
            "k_h": class.index.k_h,
            "k_x": class.index.k_x,
        },
        "degenerate_flag": class.degenerate_flag,
    });
    write_output(common, &serde_json::to_string_pretty(&doc).unwrap())
}

fn cmd_periods(common: &Common, grid: &str) -> Result<(), CliError> {
    let sys = load_system(common)?;
    let opts = flow_options(common)?;
    let n = sys.dof();
    let parts = parse_grid(grid, n)?;
    let nodes = grid_nodes(&parts);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
    let mut seed_anchor: Option<PhaseVector> = None;
    for v in &nodes {
        let anchor_guess = match &seed_anchor {
            Some(p) => p.clone(),
            None => find_anchor(&sys, v, common.seed)
                .map_err(|e| classify_error(e, &common.out))?,
        };
        let basis = match build_period_basis(&sys, v, &anchor_guess, &opts) {
            Ok(b) => b,
            Err(_) => {
                // a fresh anchor search recovers from stale warm starts
                let fresh = find_anchor(&sys, v, common.seed)
                    .map_err(|e| classify_error(e, &common.out))?;
                build_period_basis(&sys, v, &fresh, &opts)
                    .map_err(|e| classify_error(e, &common.out))?
            }
        };
        seed_anchor = Some(basis.anchor.clone());
        let mut row: Vec<f64> = v.iter().copied().collect();
        row.extend(basis.tau().iter().copied());
        row.push(basis.closure_residual);
        row.extend(basis.anchor.coords().iter().copied());
        rows.push(row);
    }
    let mut header: Vec<String> = (1..=n).map(|i| format!("v{i}")).collect();
    header.extend((1..=n).map(|i| format!("tau{i}")));
    header.push("residual".into());
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=n).map(|i| format!("xi{i}")));
    emit_table(common, &header, &rows)
}

fn emit_table(common: &Common, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    match common.format {
        Format::Csv => write_output(common, &csv_table(header, rows)),
        Format::Json => {
            let objs: Vec<serde_json::Value> = rows
                .iter()
                .map(|row| {
                    let mut obj = serde_json::Map::new();
                    for (h, &x) in header.iter().zip(row) {
                        obj.insert(h.clone(), json!(x));
                    }
                    serde_json::Value::Object(obj)
                })
                .collect();
            write_output(common, &serde_json::to_string_pretty(&objs).unwrap())
        }
    }
}

/// Shared focus-focus setup: critical point near the origin, linear
/// normalization from the Hessian pencil, calibrated quadratic value map.
fn ff_setup(
    sys: &HamiltonianSystem,
    opts: &FlowOptions,
    seed: u64,
) -> Result<FFValueMap, Error> {
    let origin = PhaseVector::from_slice(&vec![0.0; 2 * sys.dof()])?;
    let critical = find_critical_point(sys, &origin, 0)?;
    let class = williamson_classify(sys, &critical, seed)?;
    if class.index.k_f == 0 {
        return Err(Error::NoFocusFocusPair);
    }
    let dg0 = ff_normalization(sys, &critical)?;
    let cal = CalibrationOptions::default();
    // anchor for the calibration rays: a leaf at the outermost ray radius
    let linear = FFValueMap::new(sys.dof(), &dg0, [0.0; 3])?;
    let mut target = DVector::zeros(sys.dof());
    target[0] = cal.r0;
    let v0 = linear.invert(&target)?;
    let guess = find_anchor(sys, &v0, seed)?;
    calibrate_ff_value_map(sys, &dg0, &guess, opts, &cal)
}

fn cmd_sigma(
    common: &Common,
    grid: &str,
    log_cut: f64,
    taylor_degree: Option<usize>,
) -> Result<(), CliError> {
    let sys = load_system(common)?;
    let opts = flow_options(common)?;
    let n = sys.dof();
    let parts = parse_grid(grid, n)?;
    let (v1, v2) = match (&parts[0], &parts[1]) {
        (a @ GridPart::Axis { .. }, b @ GridPart::Axis { .. }) => (axis_points(a), axis_points(b)),
        _ => {
            return Err(CliError::Config(
                "sigma/taylor grids need sampled axes in the first two components".into(),
            ))
        }
    };
    let fixed: Vec<f64> = parts[2..]
        .iter()
        .map(|p| match *p {
            GridPart::Fixed(x) => Ok(x),
            GridPart::Axis { .. } => Err(CliError::Config(
                "trailing grid components must be fixed values".into(),
            )),
        })
        .collect::<Result<_, _>>()?;

    let numeric = |e: Error| classify_error(e, &common.out);
    let map = ff_setup(&sys, &opts, common.seed).map_err(numeric)?;
    let branch = LogBranch { cut_angle: log_cut };

    // leaf anchor at the first grid corner
    let mut corner = DVector::zeros(n);
    corner[0] = v1[0];
    corner[1] = v2[0];
    for (k, &f) in fixed.iter().enumerate() {
        corner[2 + k] = f;
    }
    let corner_raw = map.invert(&corner).map_err(numeric)?;
    let guess = find_anchor(&sys, &corner_raw, common.seed).map_err(numeric)?;

    let grid_data = sigma_grid(&sys, &map, &branch, &v1, &v2, &fixed, &guess, &opts)
        .map_err(numeric)?;
    let defect = closedness_defect(&grid_data).map_err(numeric)?;

    let degree = match taylor_degree {
        None => {
            // sigma table output
            let mut rows = Vec::new();
            for row in &grid_data.samples {
                for s in row {
                    let mut r: Vec<f64> = s.normalized.iter().copied().collect();
                    r.extend(s.sigma.iter().copied());
                    rows.push(r);
                }
            }
            let mut header: Vec<String> = (1..=n).map(|i| format!("v{i}")).collect();
            header.extend((1..=n).map(|i| format!("sigma{i}")));
            return match common.format {
                Format::Csv => write_output(common, &csv_table(&header, &rows)),
                Format::Json => {
                    let doc = json!({
                        "quad": map.quad,
                        "closedness_defect": defect,
                        "header": header,
                        "nodes": rows,
                    });
                    write_output(common, &serde_json::to_string_pretty(&doc).unwrap())
                }
            };
        }
        Some(d) => d,
    };

    // Taylor pipeline: base ray from 0 to the anchor grid corner, S field, fit.
    let anchor_j = (0..v2.len())
        .min_by(|&a, &b| v2[a].abs().partial_cmp(&v2[b].abs()).unwrap())
        .unwrap();
    let anchor = (v1[0], v2[anchor_j]);
    let seg = (anchor.0 * anchor.0 + anchor.1 * anchor.1).sqrt();
    let dir = (anchor.0 / seg, anchor.1 / seg);
    let radii: Vec<f64> = (0..6).map(|k| seg / 2f64.powi(k)).collect();
    let ray = sample_ray(&sys, &map, dir, &radii, &fixed, &guess, &opts).map_err(numeric)?;
    let base: Vec<_> = ray
        .iter()
        .map(|b| sigma_from_basis(b, &map, &branch))
        .collect::<Result<_, _>>()
        .map_err(numeric)?;
    let field = integrate_s(&grid_data, &base, anchor_j).map_err(numeric)?;
    let fit = taylor_fit(&field.nodes, degree).map_err(numeric)?;
    let doc = json!({
        "quad": map.quad,
        "closedness_defect": defect,
        "sigma0": [field.sigma0.0, field.sigma0.1],
        "path_residual": field.path_residual,
        "degree": fit.degree,
        "coefficients": fit.coeffs,
        "fit_residual": fit.residual,
        "s_nodes": field.nodes,
    });
    write_output(common, &serde_json::to_string_pretty(&doc).unwrap())
}

fn cmd_action(common: &Common, grid: &str) -> Result<(), CliError> {
    let sys = load_system(common)?;
    let opts = flow_options(common)?;
    let n = sys.dof();
    let parts = parse_grid(grid, n)?;
    let nodes = grid_nodes(&parts);
    let mut rows = Vec::with_capacity(nodes.len());
    let mut seed_anchor: Option<PhaseVector> = None;
    for v in &nodes {
        let guess = match &seed_anchor {
            Some(p) => p.clone(),
            None => find_anchor(&sys, v, common.seed)
                .map_err(|e| classify_error(e, &common.out))?,
        };
        let basis = build_period_basis(&sys, v, &guess, &opts)
            .map_err(|e| classify_error(e, &common.out))?;
        seed_anchor = Some(basis.anchor.clone());
        let a = action_integral(&sys, &basis, &opts)
            .map_err(|e| classify_error(e, &common.out))?;
        let mut row: Vec<f64> = v.iter().copied().collect();
        row.push(a);
        row.extend(basis.tau().iter().copied());
        rows.push(row);
    }
    let mut header: Vec<String> = (1..=n).map(|i| format!("v{i}")).collect();
    header.push("action".into());
    header.extend((1..=n).map(|i| format!("tau{i}")));
    emit_table(common, &header, &rows)
}

fn cmd_monodromy(
    common: &Common,
    radius: f64,
    steps: usize,
    center: Option<&str>,
    orientation: i32,
) -> Result<(), CliError> {
    let sys = load_system(common)?;
    let opts = flow_options(common)?;
    let n = sys.dof();
    let center = match center {
        Some(text) => {
            let c = parse_floats(text)?;
            if c.len() != n {
                return Err(CliError::Config(format!(
                    "center has {} components, system has {n}",
                    c.len()
                )));
            }
            DVector::from_vec(c)
        }
        None => DVector::zeros(n),
    };
    let spec = LoopSpec {
        center,
        radius,
        steps,
        orientation,
    };
    spec.validate().map_err(|e| classify_error(e, &common.out))?;
    let start = spec.values().remove(0);
    let guess = find_anchor(&sys, &start, common.seed)
        .map_err(|e| classify_error(e, &common.out))?;
    let (matrix, residuals) = monodromy_of_loop(&sys, &spec, &guess, &opts)
        .map_err(|e| classify_error(e, &common.out))?;
    let doc = json!({
        "loop": {
            "center": spec.center.as_slice(),
            "radius": spec.radius,
            "steps": spec.steps,
            "orientation": spec.orientation,
        },
        "matrix": matrix.entries,
        "rounding_error": matrix.max_rounding_error,
        "per_point_residuals": residuals,
    });
    write_output(common, &serde_json::to_string_pretty(&doc).unwrap())
}
