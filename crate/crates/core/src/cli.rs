//! Command-line front end: `run`, `list` and `plot`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::experiments::{catalog, find, ExperimentReport};
use crate::samples::SampleSet;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERDICT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PROJCOMP_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "projcomp", version, about = "Projective composition of diffusion models: experiments and plots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a named experiment (`run list` prints the catalog).
    ///
    /// Options: --config PATH, --out DIR, and any parameter of the experiment
    /// as --name VALUE (for example --seed 7 --n-samples 5000 --sampler ddpm).
    Run {
        experiment: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// List experiments and their parameters.
    List,
    /// Render SVG scatter plots and histograms from sample CSVs in a report directory.
    Plot {
        dir: PathBuf,
        /// Coordinate pair for the scatter plot.
        #[arg(long, default_value = "0,1", value_delimiter = ',')]
        coords: Vec<usize>,
        /// Number of histogram bins.
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Sample file inside the directory (default: every samples*.csv).
        #[arg(long)]
        file: Option<String>,
    },
}

/// Error type that remembers whether it came from bad usage.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownExperiment(_) | Error::Input(_) | Error::Parse(_) => CliError::Usage(e.to_string()),
            other => CliError::Run(other),
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::List => {
            say(&catalog_text());
            Ok(EXIT_PASS)
        }
        Command::Run { experiment, args } if experiment == "list" && args.is_empty() => {
            say(&catalog_text());
            Ok(EXIT_PASS)
        }
        Command::Run { experiment, args } => run_command(&experiment, &args),
        Command::Plot { dir, coords, bins, file } => plot(&dir, &coords, bins, file.as_deref())
            .map(|paths| {
                for p in paths {
                    say(&format!("{}\n", p.display()));
                }
                EXIT_PASS
            })
            .map_err(CliError::from),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("see `projcomp --help` and `projcomp list`");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn say(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn catalog_text() -> String {
    let mut s = String::new();
    for e in catalog() {
        let _ = writeln!(s, "{}  {}", e.name, e.summary);
        for p in &e.params {
            let _ = writeln!(s, "    --{:<16} {:<10} default {:<40} {}", p.name.replace('_', "-"), format!("{:?}", p.kind).to_lowercase(), p.default, p.help);
        }
    }
    s
}

/// Parses a value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()))
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        out.insert(k.trim().replace('-', "_"), parse_value(v));
    }
    Ok(out)
}

/// Options pulled out of the free-form `run` arguments.
#[derive(Debug, Default, PartialEq)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: BTreeMap<String, Value>,
}

/// Splits `--key value`, `--key=value` and bare `--flag` (meaning true).
pub fn parse_run_args(args: &[String]) -> Result<RunArgs> {
    let mut out = RunArgs::default();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let key = a
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Input(format!("unexpected argument `{a}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => {
                let next = args.get(i + 1).filter(|n| !n.starts_with("--"));
                if next.is_some() {
                    i += 1;
                }
                (key.to_string(), next.cloned())
            }
        };
        i += 1;
        match key.as_str() {
            "config" | "out" => {
                let v = value.ok_or_else(|| Error::Input(format!("--{key} needs a value")))?;
                if key == "config" {
                    out.config = Some(v.into());
                } else {
                    out.out = Some(v.into());
                }
            }
            _ => {
                let v = value.map(|v| parse_value(&v)).unwrap_or(Value::Bool(true));
                out.overrides.insert(key.replace('-', "_"), v);
            }
        }
    }
    Ok(out)
}

/// Output root: `--out`, then `$PROJCOMP_OUT`, then `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn run_command(name: &str, args: &[String]) -> std::result::Result<i32, CliError> {
    let exp = find(name)?;
    let parsed = parse_run_args(args)?;
    let mut merged = match &parsed.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    merged.extend(parsed.overrides);
    let params = exp.params(&merged)?;
    let root = output_root(parsed.out.as_deref());
    let report = exp.run(&params, Some(&root))?;
    let dir = exp.output_dir(&params, &root);
    say(&format!("{}\nreport: {}\n", summary_line(&report), dir.join("report.json").display()));
    Ok(if report.verdict { EXIT_PASS } else { EXIT_VERDICT_FAIL })
}

/// `name PASS|FAIL k/n checks; metric=value ...` over the checked metrics.
pub fn summary_line(r: &ExperimentReport) -> String {
    let passed = r.checks.iter().filter(|c| c.passed).count();
    let mut s = format!(
        "{} {} {}/{} checks",
        r.name,
        if r.verdict { "PASS" } else { "FAIL" },
        passed,
        r.checks.len()
    );
    let mut shown = r.headline.clone();
    for c in &r.checks {
        if !shown.contains(&c.metric) {
            shown.push(c.metric.clone());
        }
    }
    for m in shown.iter().take(6) {
        if let Some(v) = r.metrics.get(m) {
            let _ = write!(s, " {m}={}", fmt_num(*v));
        }
    }
    s
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        let t = format!("{v:.6}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.3e}")
    }
}

fn sample_files(dir: &Path, file: Option<&str>) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("report directory {} does not exist", dir.display())));
    }
    if let Some(f) = file {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(Error::Input(format!("missing CSV file {}", p.display())));
        }
        return Ok(vec![p]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("samples") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("missing CSV file {}", dir.join("samples*.csv").display())));
    }
    Ok(files)
}

/// Writes one scatter SVG for `coords` and one histogram SVG per listed
/// coordinate for each sample file; returns the written paths.
pub fn plot(dir: &Path, coords: &[usize], bins: usize, file: Option<&str>) -> Result<Vec<PathBuf>> {
    if coords.is_empty() || coords.len() > 2 {
        return Err(Error::Input("--coords takes one or two coordinate indices".into()));
    }
    if bins == 0 {
        return Err(Error::Input("--bins must be positive".into()));
    }
    let mut written = Vec::new();
    for path in sample_files(dir, file)? {
        let s = SampleSet::read_csv(&path)?;
        if s.is_empty() {
            return Err(Error::Input(format!("{} holds no samples", path.display())));
        }
        if let Some(&c) = coords.iter().find(|&&c| c >= s.dim()) {
            return Err(Error::Input(format!("coordinate {c} out of range for {}-d samples in {}", s.dim(), path.display())));
        }
        let stem = path.file_stem().and_then(|x| x.to_str()).unwrap_or("samples").to_string();
        if let [i, j] = coords {
            let out = dir.join(format!("{stem}_scatter_{i}_{j}.svg"));
            std::fs::write(&out, scatter_svg(&s.column(*i), &s.column(*j), &format!("x{i}"), &format!("x{j}")))
                ?;
            written.push(out);
        }
        for &c in coords {
            let out = dir.join(format!("{stem}_hist_{c}.svg"));
            std::fs::write(&out, histogram_svg(&s.column(c), bins, &format!("x{c}")))?;
            written.push(out);
        }
    }
    Ok(written)
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;

fn range(xs: &[f64]) -> (f64, f64) {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
}

fn svg_frame(body: &str, xlabel: &str, ylabel: &str, xr: (f64, f64), yr: (f64, f64)) -> String {
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="100%" height="100%" fill="white"/>
<rect x="{PAD}" y="{PAD}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>
{body}<text x="{cx}" y="{ty}" font-size="12" text-anchor="middle">{xlabel} [{:.3}, {:.3}]</text>
<text x="12" y="{cy}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {cy})">{ylabel} [{:.3}, {:.3}]</text>
</svg>
"##,
        xr.0,
        xr.1,
        yr.0,
        yr.1,
        pw = W - 2.0 * PAD,
        ph = H - 2.0 * PAD,
        cx = W / 2.0,
        ty = H - 10.0,
        cy = H / 2.0,
    )
}

/// Standalone SVG with one `<circle>` per point.
pub fn scatter_svg(xs: &[f64], ys: &[f64], xlabel: &str, ylabel: &str) -> String {
    let (xr, yr) = (range(xs), range(ys));
    let mut body = String::with_capacity(xs.len() * 48);
    for (x, y) in xs.iter().zip(ys) {
        let px = PAD + (x - xr.0) / (xr.1 - xr.0) * (W - 2.0 * PAD);
        let py = H - PAD - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * PAD);
        let _ = writeln!(body, r##"<circle cx="{px:.2}" cy="{py:.2}" r="1" fill="#1f77b4" fill-opacity="0.4"/>"##);
    }
    svg_frame(&body, xlabel, ylabel, xr, yr)
}

/// Bin counts of `xs` over its range.
pub fn histogram(xs: &[f64], bins: usize) -> (Vec<usize>, (f64, f64)) {
    let r = range(xs);
    let mut counts = vec![0; bins];
    for x in xs {
        let k = (((x - r.0) / (r.1 - r.0)) * bins as f64) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    (counts, r)
}

/// Standalone SVG with one `<rect class="bar">` per bin.
pub fn histogram_svg(xs: &[f64], bins: usize, label: &str) -> String {
    let (counts, xr) = histogram(xs, bins);
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bw = (W - 2.0 * PAD) / bins as f64;
    let mut body = String::new();
    for (k, &c) in counts.iter().enumerate() {
        let h = c as f64 / top * (H - 2.0 * PAD);
        let _ = writeln!(
            body,
            r##"<rect class="bar" x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#ff7f0e"/>"##,
            PAD + k as f64 * bw,
            H - PAD - h,
            bw
        );
    }
    svg_frame(&body, label, "count", xr, (0.0, top))
}
