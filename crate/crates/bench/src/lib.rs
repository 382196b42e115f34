//! Benchmark and verification harness for H-matrix multiplication.
//!
//! A run assembles the two kernel factors on a sphere mesh for every mesh
//! level of the configured range, times one multiplication (assembly is not
//! timed), estimates the product error by subspace iteration and emits one
//! CSV row per level.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use hmat_core::geometry::MAX_MESH_LEVEL;
use hmat_core::lowrank::truncate_dense;
use hmat_core::multiply::estimate_product_error_default;
use hmat_core::{
    assemble_hmatrix, build_block_cluster_tree, build_cluster_tree, build_sphere_mesh, multiply, BlockData,
    CompressorKind, Converter, HMatrix, KernelKind, MultiplyConfig, MultiplyMode, TruncationPolicy, DEFAULT_ETA,
    DEFAULT_N_MIN,
};
use nalgebra::{DMatrix, DVector};

/// Largest problem `verify` will check against dense oracles.
pub const MAX_VERIFY_N: usize = 1536;

/// Relative floor of the product-error check: an exact product still
/// carries rounding.
pub const ROUNDOFF: f64 = 1e-12;

/// Absolute slack of the per-block optimality check.
pub const BLOCK_SLACK: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("line {line}: {field}: {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] hmat_core::HmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// Which pair of kernels forms the factors `H` and `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPair {
    /// `exp(-|x-y|)` times `x_1 exp(-|x-y|)`.
    Exponential,
    /// Single-layer potential times itself.
    SingleLayer,
}

impl KernelPair {
    pub fn kinds(self) -> (KernelKind, KernelKind) {
        match self {
            KernelPair::Exponential => (KernelKind::Exponential, KernelKind::ScaledExponential),
            KernelPair::SingleLayer => (KernelKind::SingleLayer, KernelKind::SingleLayer),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelPair::Exponential => "exp",
            KernelPair::SingleLayer => "slp",
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "exp" => Ok(KernelPair::Exponential),
            "slp" => Ok(KernelPair::SingleLayer),
            _ => Err(format!("unknown kernel pair {s:?} (expected exp or slp)")),
        }
    }
}

/// Compressor of the new mode, or converter of the traditional mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Aca,
    BiLanczos,
    Randomized,
    Svd,
    /// Hierarchical approximation; traditional mode only.
    Hier,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Aca => "aca",
            Method::BiLanczos => "bilanczos",
            Method::Randomized => "randomized",
            Method::Svd => "svd",
            Method::Hier => "hier",
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "aca" => Ok(Method::Aca),
            "bilanczos" => Ok(Method::BiLanczos),
            "randomized" => Ok(Method::Randomized),
            "svd" => Ok(Method::Svd),
            "hier" => Ok(Method::Hier),
            _ => Err(format!(
                "unknown compressor {s:?} (expected aca, bilanczos, randomized, svd or hier)"
            )),
        }
    }

    fn compressor(self, seed: u64) -> Option<CompressorKind> {
        match self {
            Method::Aca => Some(CompressorKind::Aca),
            Method::BiLanczos => Some(CompressorKind::BiLanczos),
            Method::Randomized => Some(CompressorKind::randomized(seed)),
            Method::Svd => Some(CompressorKind::DenseSvd),
            Method::Hier => None,
        }
    }
}

fn mode_name(mode: MultiplyMode) -> &'static str {
    match mode {
        MultiplyMode::New => "new",
        MultiplyMode::Traditional => "traditional",
    }
}

pub fn policy_name(policy: TruncationPolicy) -> String {
    match policy {
        TruncationPolicy::FixedRank(k) => format!("rank={k}"),
        TruncationPolicy::EpsRank(e) => format!("eps={e:e}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub kernel: KernelPair,
    pub level_min: u32,
    pub level_max: u32,
    pub n_min: usize,
    pub eta: f64,
    pub policy: TruncationPolicy,
    pub mode: MultiplyMode,
    pub method: Method,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Worker threads; the rayon default when unset.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kernel: KernelPair::Exponential,
            level_min: 1,
            level_max: 3,
            n_min: DEFAULT_N_MIN,
            eta: DEFAULT_ETA,
            policy: TruncationPolicy::FixedRank(16),
            mode: MultiplyMode::New,
            method: Method::Aca,
            seed: 1,
            out: None,
            threads: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("invalid value {value:?}: {e}"))
}

impl BenchConfig {
    /// Sets one field from its textual form. Keys are the config-file keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "kernel" => self.kernel = KernelPair::parse(value)?,
            "level_min" => self.level_min = parse_num(value)?,
            "level_max" => self.level_max = parse_num(value)?,
            "nmin" => self.n_min = parse_num(value)?,
            "eta" => self.eta = parse_num(value)?,
            "rank" => self.policy = TruncationPolicy::FixedRank(parse_num(value)?),
            "eps" => self.policy = TruncationPolicy::EpsRank(parse_num(value)?),
            "mode" => {
                self.mode = match value {
                    "new" => MultiplyMode::New,
                    "traditional" => MultiplyMode::Traditional,
                    _ => return Err(format!("unknown mode {value:?} (expected new or traditional)")),
                }
            }
            "compressor" => self.method = Method::parse(value)?,
            "seed" => self.seed = parse_num(value)?,
            "out" => self.out = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "threads" => self.threads = Some(parse_num(value)?),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; `#` starts a comment. Keys not given
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = BenchConfig::default();
        let mut policy_line: Option<(usize, &str)> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(BenchError::Config {
                    line,
                    field: content.to_string(),
                    message: "expected key = value".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "rank" || key == "eps" {
                if let Some((first, other)) = policy_line {
                    if other != key {
                        return Err(BenchError::Config {
                            line,
                            field: key.into(),
                            message: format!("conflicts with {other} on line {first}; give either rank or eps"),
                        });
                    }
                }
                policy_line = Some((line, if key == "rank" { "rank" } else { "eps" }));
            }
            cfg.set(key, value).map_err(|message| BenchError::Config {
                line,
                field: key.into(),
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration in the file format accepted by [`BenchConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kernel = {}", self.kernel.name());
        let _ = writeln!(s, "level_min = {}", self.level_min);
        let _ = writeln!(s, "level_max = {}", self.level_max);
        let _ = writeln!(s, "nmin = {}", self.n_min);
        let _ = writeln!(s, "eta = {:?}", self.eta);
        match self.policy {
            TruncationPolicy::FixedRank(k) => writeln!(s, "rank = {k}"),
            TruncationPolicy::EpsRank(e) => writeln!(s, "eps = {e:e}"),
        }
        .expect("writing to a String");
        let _ = writeln!(s, "mode = {}", mode_name(self.mode));
        let _ = writeln!(s, "compressor = {}", self.method.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", out.display());
        }
        if let Some(t) = self.threads {
            let _ = writeln!(s, "threads = {t}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Invalid(m));
        if self.level_min > self.level_max {
            return bad(format!("level_min {} exceeds level_max {}", self.level_min, self.level_max));
        }
        if self.level_max > MAX_MESH_LEVEL {
            return bad(format!("level_max {} exceeds the mesh limit {MAX_MESH_LEVEL}", self.level_max));
        }
        if self.n_min == 0 {
            return bad("nmin must be at least 1".into());
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.method == Method::Hier && self.mode == MultiplyMode::New {
            return bad("compressor hier is a converter of the traditional mode".into());
        }
        self.policy.validate().map_err(|e| BenchError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn multiply_config(&self) -> MultiplyConfig {
        match self.mode {
            MultiplyMode::New => MultiplyConfig::new(
                self.method.compressor(self.seed).expect("validated: new mode has a compressor"),
                self.policy,
            ),
            MultiplyMode::Traditional => {
                let converter = match self.method.compressor(self.seed) {
                    Some(kind) => Converter::Compress(kind),
                    None => Converter::HierApprox,
                };
                MultiplyConfig::traditional(converter, self.policy)
            }
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = self.threads {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| BenchError::Invalid(format!("thread pool: {e}")))
    }
}

/// The two factors of one level on a shared structure.
pub struct Problem {
    pub level: u32,
    pub h: HMatrix<f64>,
    pub k: HMatrix<f64>,
}

pub fn build_problem(cfg: &BenchConfig, level: u32) -> Result<Problem> {
    let panels = build_sphere_mesh(level)?;
    let clusters = Arc::new(build_cluster_tree(&panels, cfg.n_min)?);
    let tree = Arc::new(build_block_cluster_tree(clusters, cfg.eta)?);
    let (k1, k2) = cfg.kernel.kinds();
    let h = assemble_hmatrix(k1, &panels, tree.clone(), cfg.policy)?;
    let k = assemble_hmatrix(k2, &panels, tree, cfg.policy)?;
    Ok(Problem { level, h, k })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub mode: &'static str,
    pub compressor: &'static str,
    pub policy: String,
    pub wall_s: f64,
    pub wall_s_per_dof: f64,
    /// Estimated `||L - HK||_F / ||L||_F`.
    pub est_error: f64,
    pub max_far_rank: usize,
    pub matvec_count: u64,
    pub degraded_blocks: usize,
    pub threads: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "N",
    "mode",
    "compressor",
    "policy",
    "wall_s",
    "wall_s_per_dof",
    "est_error",
    "max_far_rank",
    "matvec_count",
    "degraded_blocks",
    "threads",
];

pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let mcfg = cfg.multiply_config();
    let mut rows = Vec::new();
    for level in cfg.level_min..=cfg.level_max {
        let row = pool.install(|| -> Result<BenchRow> {
            let p = build_problem(cfg, level)?;
            let start = Instant::now();
            let product = multiply(&p.h, &p.k, &mcfg)?;
            let wall = start.elapsed().as_secs_f64();
            let l = &product.matrix;
            let est = estimate_product_error_default(&p.h, &p.k, l, cfg.seed)?;
            let norm = l.frobenius_norm();
            let n = l.size();
            log::info!("level {level}: N={n} multiplied in {wall:.3}s");
            Ok(BenchRow {
                n,
                mode: mode_name(cfg.mode),
                compressor: cfg.method.name(),
                policy: policy_name(cfg.policy),
                wall_s: wall,
                wall_s_per_dof: wall / n as f64,
                est_error: if norm > 0.0 { est / norm } else { est },
                max_far_rank: product.report.max_far_rank,
                matvec_count: product.report.matvecs,
                degraded_blocks: product.report.degraded_blocks.len(),
                threads: rayon::current_num_threads(),
            })
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.n.to_string(),
            r.mode.to_string(),
            r.compressor.to_string(),
            r.policy.clone(),
            format!("{:.6e}", r.wall_s),
            format!("{:.6e}", r.wall_s_per_dof),
            format!("{:.6e}", r.est_error),
            r.max_far_rank.to_string(),
            r.matvec_count.to_string(),
            r.degraded_blocks.to_string(),
            r.threads.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub n: usize,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Tab-separated table with a header line.
    pub fn table(&self) -> String {
        let mut s = String::from("check\tN\tvalue\tthreshold\tstatus\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.3e}\t{:.3e}\t{}",
                c.name,
                c.n,
                c.value,
                c.threshold,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Perturbs one far-field factor of the product before checking; a
    /// negative control for the checks themselves.
    pub corrupt: bool,
}

fn check(name: &'static str, n: usize, value: f64, threshold: f64) -> Check {
    Check {
        name,
        n,
        value,
        threshold,
        passed: value <= threshold,
    }
}

/// Runs the configured multiplication against dense oracles.
///
/// Checks per level:
/// * `product_error`: relative Frobenius error of `L` against the dense
///   product of the factors; at most `100 eps`, or at most twice the best
///   error attainable on the block structure at fixed rank (2.5 times for
///   the traditional mode).
/// * `block_optimality` (fixed rank): worst far-leaf error minus its
///   Eckart-Young optimum (twice the optimum for the iterative
///   compressors); at most `1e-10`.
/// * `matvec`: `L x` against the dense matrix times `x`.
/// * `estimator`: the error estimate never exceeds the true error.
pub fn verify(cfg: &BenchConfig, opts: VerifyOptions) -> Result<VerifyReport> {
    cfg.validate()?;
    let max_n = 6 * 4usize.pow(cfg.level_max);
    if max_n > MAX_VERIFY_N {
        return Err(BenchError::Invalid(format!(
            "verify compares against dense matrices; N={max_n} exceeds {MAX_VERIFY_N}"
        )));
    }
    let pool = cfg.pool()?;
    let mcfg = cfg.multiply_config();
    let mut report = VerifyReport::default();
    for level in cfg.level_min..=cfg.level_max {
        let checks = pool.install(|| -> Result<Vec<Check>> {
            let p = build_problem(cfg, level)?;
            let mut l = multiply(&p.h, &p.k, &mcfg)?.matrix;
            if opts.corrupt {
                corrupt(&mut l);
            }
            let n = l.size();
            let exact = p.h.to_dense()? * p.k.to_dense()?;
            let ld = l.to_dense()?;
            let pnorm = exact.norm();
            let truth = (&ld - &exact).norm();
            let rel = truth / pnorm;
            let mut out = Vec::new();

            // Per far leaf: error minus its allowed bound (1x the optimum for
            // the dense SVD compressor, 2x for the iterative ones).
            let factor = if cfg.method == Method::Svd { 1.0 } else { 2.0 };
            let mut worst_excess = f64::NEG_INFINITY;
            let mut best_sq = 0.0;
            let mut far = 0usize;
            for b in l.tree.far_leaves() {
                far += 1;
                let (rr, cr) = (l.tree.row_range(b), l.tree.col_range(b));
                let block = exact.view((rr.start, cr.start), (rr.len(), cr.len())).into_owned();
                let best = match cfg.policy {
                    TruncationPolicy::FixedRank(_) => (&block - truncate_dense(&block, cfg.policy).to_dense()).norm(),
                    TruncationPolicy::EpsRank(_) => 0.0,
                };
                let got = (&block - l.block_to_dense(b)).norm();
                best_sq += best * best;
                worst_excess = worst_excess.max(got - factor * best);
            }
            let slack = BLOCK_SLACK * (far as f64).sqrt();
            let product_limit = match (cfg.policy, cfg.mode) {
                (TruncationPolicy::EpsRank(e), _) => 100.0 * e,
                (TruncationPolicy::FixedRank(_), MultiplyMode::New) => (2.0 * best_sq.sqrt() + slack) / pnorm,
                (TruncationPolicy::FixedRank(_), MultiplyMode::Traditional) => {
                    (2.5 * best_sq.sqrt() + slack) / pnorm
                }
            };
            out.push(check("product_error", n, rel, product_limit + ROUNDOFF));
            if matches!(cfg.policy, TruncationPolicy::FixedRank(_)) && cfg.mode == MultiplyMode::New && far > 0 {
                out.push(check("block_optimality", n, worst_excess, BLOCK_SLACK));
            }

            let x = DVector::from_fn(n, |i, _| ((i * 7919) % 113) as f64 / 113.0 - 0.5);
            let y = l.matvec(&x)?;
            let yd = &ld * &x;
            out.push(check("matvec", n, (&y - &yd).norm() / yd.norm().max(1e-300), 1e-12));

            let est = estimate_product_error_default(&p.h, &p.k, &l, cfg.seed)?;
            let slack = 1e-12 * ld.norm();
            out.push(check("estimator", n, est, truth * 1.01 + slack));
            Ok(out)
        })?;
        report.checks.extend(checks);
    }
    Ok(report)
}

fn corrupt(l: &mut HMatrix<f64>) {
    let target = l
        .tree
        .far_leaves()
        .find(|&b| matches!(&l.blocks[b], BlockData::Far(lr) if lr.rank() > 0));
    match target {
        Some(b) => {
            if let BlockData::Far(lr) = &mut l.blocks[b] {
                lr.left *= 1.5;
            }
        }
        None => {
            let b = l.tree.near_leaves().next().expect("some leaf");
            if let BlockData::Near(d) = &mut l.blocks[b] {
                let (m, n) = d.shape();
                *d += DMatrix::from_element(m, n, 1.0);
            }
        }
    }
}

/// Textual block-cluster tree for one mesh level.
pub fn dump_tree(level: u32, n_min: usize, eta: f64) -> Result<String> {
    let panels = build_sphere_mesh(level)?;
    let clusters = Arc::new(build_cluster_tree(&panels, n_min)?);
    let tree = build_block_cluster_tree(clusters, eta)?;
    Ok(tree.dump())
}

