//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 internal invariant
//! breach.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::baselines::{random_select, BaselineConfig};
use crate::diagnostics::{
    attention_error_and_bounds, attention_report, coverage_cdf, gaussian_queries, logdet_audit, max_cdf_gap,
    quantization_error, quantized_cdf, AuditSpec, CoverageMetric, DiagnosticsReport,
};
use crate::error::{Error, Result};
use crate::io::{
    decode_header, decode_kvd, generate_synthetic, write_kvd, write_results, AuditSummary, Dtype, LayerResult,
    ResultRecord, ResultsMeta, SweepRow, SyntheticSpec,
};
use crate::kvcore::{BudgetConfig, CacheSnapshot, Granularity, LayerCache, Matrix, OrthMode, SelectorConfig};
use crate::policy::{select_layer, SelectorKind};
use crate::streaming::{cascade_apply, LayerSchedule, StreamState};

/// Environment variable naming a JSON selector config used as defaults.
pub const CONFIG_ENV: &str = "KVCORESET_CONFIG";

const CDF_BINS: usize = 512;

#[derive(Debug, Parser)]
#[command(name = "kvcoreset", version, about = "Coreset selection for bounded KV caches")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Suppress the summary printed on success.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// JSON selector config; flags override its fields.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clustered cache.
    Gen(GenArgs),
    /// Select a fixed budget of tokens from every layer of a cache.
    Compress(CompressArgs),
    /// Replay a cache as a stream through the bounded manager.
    Stream(StreamArgs),
    /// Attention error against its bounds, and coverage CDFs.
    Diagnose(DiagnoseArgs),
    /// Randomized check of the log-det gain identity and submodularity.
    Audit(AuditArgs),
    /// Grid over alpha, eta, lambda and budget.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrthArg {
    Exact,
    Maxcos,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Token,
    Frame,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

/// Selector hyperparameters shared by several commands.
#[derive(Debug, Clone, Args)]
pub struct SelectorArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long, value_enum)]
    pub orth_mode: Option<OrthArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    /// cords, d2, uniform, random, vnorm, kmeans or shortlist.
    #[arg(long, default_value = "cords")]
    pub selector: SelectorKind,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SelectorArgs {
    fn resolve(&self, base: SelectorConfig) -> Result<SelectorConfig> {
        let mut c = base;
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(e) = self.eta {
            c.eta = e;
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(e) = self.eps0 {
            c.eps0 = e;
        }
        if let Some(m) = self.orth_mode {
            c.orth_mode = match m {
                OrthArg::Exact => OrthMode::ExactSpan,
                OrthArg::Maxcos => OrthMode::MaxCosine,
            };
        }
        if let Some(g) = self.granularity {
            c.granularity = match g {
                GranularityArg::Token => Granularity::Token,
                GranularityArg::Frame => Granularity::Frame,
            };
        }
        if let Some(s) = self.seed {
            c.rng_seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON synthetic spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub tokens_per_frame: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub duplicate_rate: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub budget: usize,
    #[command(flatten)]
    pub selector: SelectorArgs,
    /// Layer whose selection every layer reuses.
    #[arg(long, default_value_t = 0)]
    pub anchor_layer: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Persistent budget |M| per layer.
    #[arg(long)]
    pub budget: usize,
    /// Tokens per replayed block and trigger slack; defaults to |M|/4.
    #[arg(long)]
    pub block_tokens: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    pub recent_frac: f64,
    /// bottom25, all, or a comma-separated layer list.
    #[arg(long, default_value = "bottom25")]
    pub layers: String,
    /// Comma-separated anchor layers; defaults to the lowest active layer.
    #[arg(long)]
    pub anchors: Option<String>,
    /// Leave layers outside the active set uncompressed instead of having
    /// them follow an anchor.
    #[arg(long)]
    pub leave_inactive: bool,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub budget: usize,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub query_seed: u64,
    /// Text file with one query per line, entries separated by commas or
    /// whitespace; replaces the Gaussian probes.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.25")]
    pub etas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.25")]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<usize>,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub query_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
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
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::WARN)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => serde_json::from_str::<SelectorConfig>(&fs::read_to_string(p)?)?,
        None => SelectorConfig::default(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Validation("--threads must be positive".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let summary = pool.install(|| match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Compress(a) => cmd_compress(&a, base),
        Command::Stream(a) => cmd_stream(&a, base),
        Command::Diagnose(a) => cmd_diagnose(&a, base),
        Command::Audit(a) => cmd_audit(&a),
        Command::Sweep(a) => cmd_sweep(&a, base),
    })?;
    if !cli.quiet {
        println!("{summary}");
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Reads a cache and the dtype it was stored with.
fn load(path: &Path) -> Result<(CacheSnapshot, Dtype)> {
    let bytes = fs::read(path)?;
    let dtype = decode_header(&bytes)?.dtype;
    Ok((decode_kvd(&bytes)?, dtype))
}

fn params(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn layer_of(snapshot: &CacheSnapshot, layer: usize) -> Result<&LayerCache> {
    snapshot.layers().get(layer).ok_or(Error::OutOfBounds {
        index: layer,
        len: snapshot.num_layers(),
    })
}

fn cmd_gen(a: &GenArgs) -> Result<String> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<SyntheticSpec>(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    set!(clusters, tokens_per_frame, frames, duplicate_rate, noise_scale, d_k, d_v, layers);
    if let Some(s) = a.seed {
        spec.rng_seed = s;
    }
    spec.validate()?;
    let snap = generate_synthetic(&spec)?;
    prepare_out(&a.out)?;
    write_kvd(&snap, &a.out.join("cache.kvd"), a.dtype.into())?;
    fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    Ok(format!("wrote {} tokens x {} layers", snap.num_tokens(), snap.num_layers()))
}

fn cmd_compress(a: &CompressArgs, base: SelectorConfig) -> Result<String> {
    let config = a.selector.resolve(base)?;
    let (snap, dtype) = load(&a.input)?;
    let anchor = layer_of(&snap, a.anchor_layer)?;
    let baseline = BaselineConfig::default();
    let sel = select_layer(anchor, a.budget, a.selector.selector, &config, &baseline)?;

    let layers = snap
        .layers()
        .iter()
        .map(|l| cascade_apply(&sel.tokens, l))
        .collect::<Result<Vec<_>>>()?;
    let positions: Vec<u64> = sel.tokens.iter().map(|&i| snap.positions()[i]).collect();
    let compressed = CacheSnapshot::new(layers)?;
    if compressed.positions() != positions.as_slice() {
        return Err(Error::Invariant("compressed layers lost alignment".into()));
    }

    prepare_out(&a.out)?;
    write_kvd(&compressed, &a.out.join("compressed.kvd"), dtype)?;
    let mut csv = String::from("layer,index,position\n");
    let mut records = Vec::with_capacity(snap.num_layers());
    for l in 0..snap.num_layers() {
        for (&i, &p) in sel.tokens.iter().zip(&positions) {
            writeln!(csv, "{l},{i},{p}").expect("string write");
        }
        records.push(ResultRecord::Layer(LayerResult {
            layer: l,
            selector: a.selector.selector.to_string(),
            budget: a.budget,
            retained: sel.tokens.clone(),
            positions: positions.clone(),
            trace: (l == a.anchor_layer).then(|| sel.trace.clone()).flatten(),
            frames: (l == a.anchor_layer).then(|| sel.frames.clone()).flatten(),
        }));
    }
    fs::write(a.out.join("indices.csv"), csv)?;
    let meta = ResultsMeta::new(
        "compress",
        params(json!({
            "input": a.input.display().to_string(),
            "budget": a.budget,
            "selector": a.selector.selector.name(),
            "anchor_layer": a.anchor_layer,
            "config": config,
        })),
    );
    write_results(&a.out.join("results.jsonl"), &meta, &records)?;
    Ok(format!("retained {} of {} tokens per layer", sel.tokens.len(), snap.num_tokens()))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer index '{t}'")))
        })
        .collect()
}

fn cmd_stream(a: &StreamArgs, base: SelectorConfig) -> Result<String> {
    let config = a.selector.resolve(base)?;
    let (snap, dtype) = load(&a.input)?;
    let mut budget = BudgetConfig::new(a.budget);
    budget.recent_fraction = a.recent_frac;
    if let Some(b) = a.block_tokens {
        budget.block_tokens = b;
    }
    budget.validate()?;
    let l = snap.num_layers();
    let active = match a.layers.as_str() {
        "bottom25" => (0..(l / 4).max(1)).collect(),
        "all" => (0..l).collect(),
        list => parse_list(list)?,
    };
    let anchors = a.anchors.as_deref().map(parse_list).transpose()?;
    let schedule = LayerSchedule::new(l, active, anchors, !a.leave_inactive)?;

    let mut state = StreamState::new(snap.d_k(), snap.d_v(), budget, schedule, config)?
        .with_selector(a.selector.selector, BaselineConfig::default());
    let n = snap.num_tokens();
    let mut start = 0;
    while start < n {
        let end = (start + budget.block_tokens).min(n);
        state.ingest_block(&snap.slice(start..end)?)?;
        state.maybe_compress()?;
        start = end;
    }

    prepare_out(&a.out)?;
    match state.snapshot() {
        Ok(s) => write_kvd(&s, &a.out.join("final.kvd"), dtype)?,
        Err(_) => {
            for (i, layer) in state.current()?.into_iter().enumerate() {
                write_kvd(
                    &CacheSnapshot::new(vec![layer])?,
                    &a.out.join(format!("final_layer{i}.kvd")),
                    dtype,
                )?;
            }
        }
    }
    let records: Vec<ResultRecord> = state
        .compression_log()
        .iter()
        .cloned()
        .map(ResultRecord::Compression)
        .collect();
    let meta = ResultsMeta::new(
        "stream",
        params(json!({
            "input": a.input.display().to_string(),
            "budget": budget,
            "schedule": state.schedule(),
            "selector": a.selector.selector.name(),
            "config": config,
        })),
    );
    write_results(&a.out.join("results.jsonl"), &meta, &records)?;
    Ok(format!("{} compressions over {} tokens", records.len(), n))
}

fn cdf_rows(csv: &mut String, layer: &str, metric: CoverageMetric, selector: &str, sorted: &[f64]) {
    for (x, c) in quantized_cdf(sorted, CDF_BINS) {
        writeln!(csv, "{layer},{},{selector},{x:.9e},{c:.9e}", metric.name()).expect("string write");
    }
}

fn read_queries(path: &Path, d_k: usize) -> Result<Matrix> {
    let mut m = Matrix::empty(d_k);
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation(format!("query line {}: {e}", n + 1)))?;
        if row.len() != d_k || row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "query line {} needs {d_k} finite entries, found {}",
                n + 1,
                row.len()
            )));
        }
        m.push_row(&row)?;
    }
    if m.rows() == 0 {
        return Err(Error::EmptyInput("query file holds no queries"));
    }
    Ok(m)
}

fn cmd_diagnose(a: &DiagnoseArgs, base: SelectorConfig) -> Result<String> {
    let config = a.selector.resolve(base)?;
    let (snap, _) = load(&a.input)?;
    let cache = layer_of(&snap, a.layer)?;
    let sel = select_layer(cache, a.budget, a.selector.selector, &config, &BaselineConfig::default())?;
    let random = random_select(cache.len(), sel.tokens.len(), config.rng_seed)?;
    let queries = match &a.query_file {
        Some(p) => read_queries(p, cache.d_k())?,
        None => gaussian_queries(cache, a.queries, a.query_seed),
    };
    // alpha only enters the d_alpha bound, which needs alpha < 1
    let bound_alpha = if config.alpha < 1.0 { config.alpha } else { 0.0 };
    let (records, violations) = attention_report(cache, &sel.tokens, &queries, bound_alpha, 1e-5)?;

    let mut err_csv = String::from("query,error,bound_v,bound_dalpha\n");
    for r in &records {
        writeln!(err_csv, "{},{:.9e},{:.9e},{:.9e}", r.query, r.error, r.bound_v, r.bound_dalpha).expect("string write");
    }
    // coverage curves for every layer, each selected on its own, plus the
    // samples of all layers pooled
    let name = a.selector.selector.name();
    let mut cdf_csv = String::from("layer,metric,selector,distance,cdf\n");
    let mut gaps = Vec::new();
    let mut pooled_gaps = Vec::new();
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); CoverageMetric::ALL.len()];
    for (l, layer) in snap.layers().iter().enumerate() {
        let (ours_idx, theirs_idx) = if l == a.layer {
            (sel.tokens.clone(), random.clone())
        } else {
            let s = select_layer(layer, a.budget, a.selector.selector, &config, &BaselineConfig::default())?.tokens;
            let r = random_select(layer.len(), s.len(), config.rng_seed)?;
            (s, r)
        };
        for (slot, m) in CoverageMetric::ALL.into_iter().enumerate() {
            let ours = coverage_cdf(layer, &ours_idx, m)?;
            let theirs = coverage_cdf(layer, &theirs_idx, m)?;
            let tag = l.to_string();
            cdf_rows(&mut cdf_csv, &tag, m, name, &ours);
            cdf_rows(&mut cdf_csv, &tag, m, "random", &theirs);
            if l == a.layer {
                gaps.push((m, max_cdf_gap(&ours, &theirs)));
            }
            pooled[slot].0.extend(ours);
            pooled[slot].1.extend(theirs);
        }
    }
    for (m, (mut ours, mut theirs)) in CoverageMetric::ALL.into_iter().zip(pooled) {
        ours.sort_by(f64::total_cmp);
        theirs.sort_by(f64::total_cmp);
        cdf_rows(&mut cdf_csv, "pooled", m, name, &ours);
        cdf_rows(&mut cdf_csv, "pooled", m, "random", &theirs);
        pooled_gaps.push((m, max_cdf_gap(&ours, &theirs)));
    }
    let report = DiagnosticsReport {
        layer: a.layer,
        selector: a.selector.selector.to_string(),
        config,
        query_seed: a.query_seed,
        tokens: cache.len(),
        retained: sel.tokens.len(),
        queries: records,
        quantization_error: quantization_error(cache, &sel.tokens, config.alpha)?,
        bound_violations: violations,
        coverage_gaps: gaps,
        pooled_coverage_gaps: pooled_gaps,
    };
    if violations > 0 {
        tracing::warn!(violations, "attention error exceeded a bound");
    }

    prepare_out(&a.out)?;
    fs::write(a.out.join("errors.csv"), err_csv)?;
    fs::write(a.out.join("coverage_cdf.csv"), cdf_csv)?;
    let meta = ResultsMeta::new(
        "diagnose",
        params(json!({
            "input": a.input.display().to_string(),
            "budget": a.budget,
            "queries": queries.rows(),
            "query_file": a.query_file.as_ref().map(|p| p.display().to_string()),
        })),
    );
    write_results(&a.out.join("results.jsonl"), &meta, &[ResultRecord::Diagnostics(report.clone())])?;
    Ok(report
        .coverage_gaps
        .iter()
        .map(|(m, g)| (format!("layer {}", a.layer), m, g))
        .chain(report.pooled_coverage_gaps.iter().map(|(m, g)| ("pooled".to_string(), m, g)))
        .map(|(tag, m, g)| format!("{tag} {}: max cdf gap {:.4} at d = {:.4}", m.name(), g.delta, g.at))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn cmd_audit(a: &AuditArgs) -> Result<String> {
    let spec = AuditSpec {
        dim: a.dim,
        seed: a.seed,
        ..Default::default()
    };
    let report = logdet_audit(&spec, a.trials)?;
    let summary = AuditSummary {
        trials: a.trials,
        max_abs_diff: report.max_abs_diff,
        submodularity_checks: report.submodularity_checks,
        submodularity_violations: report.submodularity_violations,
        monotonicity_checks: report.monotonicity_checks,
        monotonicity_violations: report.monotonicity_violations,
        exhaustive_instances: report.exhaustive_instances,
        exhaustive_failures: report.exhaustive_failures,
        min_greedy_ratio: report.min_greedy_ratio,
        passed: report.passed(&spec),
    };
    prepare_out(&a.out)?;
    let mut csv = String::from("trial,eps,selected,gain_direct,gain_closed_form,abs_diff\n");
    for r in &report.records {
        writeln!(
            csv,
            "{},{:e},{},{:.17e},{:.17e},{:.3e}",
            r.trial, r.eps, r.selected, r.gain_direct, r.gain_closed_form, r.abs_diff
        )
        .expect("string write");
    }
    fs::write(a.out.join("audit.csv"), csv)?;
    let meta = ResultsMeta::new("audit", params(json!({ "trials": a.trials, "spec": spec })));
    write_results(&a.out.join("results.jsonl"), &meta, &[ResultRecord::Audit(summary.clone())])?;
    let msg = format!(
        "max identity deviation {:.3e}\nsubmodularity violations {}/{}, greedy ratio failures {}/{}",
        summary.max_abs_diff,
        summary.submodularity_violations,
        summary.submodularity_checks,
        summary.exhaustive_failures,
        summary.exhaustive_instances
    );
    if !summary.passed {
        return Err(Error::Invariant(format!("log-det audit exceeded its tolerances: {msg}")));
    }
    Ok(msg)
}

fn cmd_sweep(a: &SweepArgs, base: SelectorConfig) -> Result<String> {
    let base = a.selector.resolve(base)?;
    let (snap, _) = load(&a.input)?;
    let cache = layer_of(&snap, a.layer)?;
    let budgets = if a.budgets.is_empty() {
        vec![(cache.len() / 10).max(1)]
    } else {
        a.budgets.clone()
    };
    let mut cells = Vec::new();
    for &alpha in &a.alphas {
        for &eta in &a.etas {
            for &lambda in &a.lambdas {
                for &budget in &budgets {
                    cells.push((alpha, eta, lambda, budget));
                }
            }
        }
    }
    let queries = gaussian_queries(cache, a.queries, a.query_seed);
    let rows = cells
        .par_iter()
        .map(|&(alpha, eta, lambda, budget)| -> Result<SweepRow> {
            let config = SelectorConfig {
                alpha,
                eta,
                lambda,
                ..base
            };
            config.validate()?;
            let sel = select_layer(cache, budget, a.selector.selector, &config, &BaselineConfig::default())?;
            let (mut err, mut bv) = (0.0, 0.0);
            for q in queries.iter_rows() {
                // error and bound_v do not depend on alpha
                let (e, b, _) = attention_error_and_bounds(q, cache, &sel.tokens, 0.0)?;
                err += e;
                bv += b;
            }
            let nq = queries.rows().max(1) as f64;
            let random = random_select(cache.len(), sel.tokens.len(), config.rng_seed)?;
            let gap = max_cdf_gap(
                &coverage_cdf(cache, &sel.tokens, CoverageMetric::JointKv)?,
                &coverage_cdf(cache, &random, CoverageMetric::JointKv)?,
            );
            Ok(SweepRow {
                alpha,
                eta,
                lambda,
                budget,
                layer: a.layer,
                quantization_error: quantization_error(cache, &sel.tokens, alpha)?,
                mean_attention_error: err / nq,
                mean_bound_v: bv / nq,
                coverage_gap_joint_kv: gap.delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = String::from("alpha,eta,lambda,budget,quantization_error,mean_attention_error,mean_bound_v,coverage_gap_joint_kv\n");
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.6}",
            r.alpha, r.eta, r.lambda, r.budget, r.quantization_error, r.mean_attention_error, r.mean_bound_v, r.coverage_gap_joint_kv
        )
        .expect("string write");
    }
    prepare_out(&a.out)?;
    fs::write(a.out.join("sweep.csv"), &table)?;
    let meta = ResultsMeta::new(
        "sweep",
        params(json!({
            "input": a.input.display().to_string(),
            "selector": a.selector.selector.name(),
            "layer": a.layer,
            "queries": a.queries,
        })),
    );
    let records: Vec<ResultRecord> = rows.into_iter().map(ResultRecord::Sweep).collect();
    write_results(&a.out.join("results.jsonl"), &meta, &records)?;
    Ok(table.trim_end().to_string())
}
