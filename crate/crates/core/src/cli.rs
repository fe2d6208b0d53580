//! Command-line front end: `tsne`, `pca` and `heatmap` subcommands.
//!
//! Usage errors come from clap (exit 2); runtime failures are reported as
//! [`Error`] and map to exit 1. Every output is written to a temporary file
//! in the destination directory and renamed into place.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::affinities::{AffinityConfig, KnnMethod};
use crate::error::{Error, Result};
use crate::heatmap::{self, DEFAULT_BINS};
use crate::matrix::DenseMatrix;
use crate::nbody::NbodyParams;
use crate::oocpca::{csv_to_binary, oocpca, read_csv, write_binary, write_csv, PcaConfig, PcaResult, PreprocessSpec};
use crate::optimizer::{run_tsne, ExaggerationSchedule, MomentumSchedule, RepulsionMethod, TsneConfig, TsneInput};

/// Inputs wider than this are projected onto this many components first.
pub const DEFAULT_PCA_DIMS: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "fastsne", version, about = "FFT-accelerated t-SNE, t-SNE heatmaps and out-of-core PCA")]
pub struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "FASTSNE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed the rows of a CSV matrix in one or two dimensions.
    Tsne(TsneArgs),
    /// Randomized PCA streamed from disk.
    Pca(PcaArgs),
    /// Gene x bin heatmap from a 1D embedding and an expression matrix.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KnnArg {
    Exact,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RepulsionArg {
    Auto,
    Exact,
    Fft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatrixFormat {
    Csv,
    Bin,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    /// Numeric CSV, one point per row.
    #[arg(long)]
    pub input: PathBuf,
    /// The first line of the input is a header.
    #[arg(long)]
    pub header: bool,
    /// Embedding CSV (N rows, `dims` columns).
    #[arg(long)]
    pub output: PathBuf,
    /// Per-iteration KL log; defaults to `<output>.kl.csv`.
    #[arg(long)]
    pub kl_log: Option<PathBuf>,
    /// Also draw a static scatter plot.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub dims: u8,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 200.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 12.0)]
    pub early_exag_coeff: f64,
    #[arg(long, default_value_t = 250)]
    pub stop_early_exag_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub late_exag_coeff: f64,
    #[arg(long)]
    pub start_late_exag_iter: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.8)]
    pub final_momentum: f64,
    #[arg(long, default_value_t = 250)]
    pub mom_switch_iter: usize,
    #[arg(long, value_enum, default_value_t = KnnArg::Forest)]
    pub knn: KnnArg,
    #[arg(long, default_value_t = 50)]
    pub n_trees: usize,
    /// Neighbors per point; defaults to 3 * perplexity.
    #[arg(long)]
    pub k: Option<usize>,
    /// Keep this many random neighbors per point after calibration.
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub min_intervals: usize,
    #[arg(long, default_value_t = 3)]
    pub points_per_interval: usize,
    #[arg(long, value_enum, default_value_t = RepulsionArg::Auto)]
    pub repulsion: RepulsionArg,
    /// PCA components computed before t-SNE; 0 disables. Defaults to 50
    /// when the input has more than 50 columns.
    #[arg(long)]
    pub pca_dims: Option<usize>,
    /// Record the KL divergence every this many iterations (0 disables).
    #[arg(long, default_value_t = 1)]
    pub kl_every: usize,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// Binary matrix or numeric CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; inferred from the extension (`.csv` or anything else
    /// for binary) when omitted.
    #[arg(long, value_enum)]
    pub input_format: Option<MatrixFormat>,
    #[arg(long)]
    pub header: bool,
    /// Output prefix: writes `<prefix>.U.<ext>`, `<prefix>.S.<ext>` and
    /// `<prefix>.V.<ext>`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = MatrixFormat::Csv)]
    pub output_format: MatrixFormat,
    #[arg(long)]
    pub k: usize,
    /// Oversampled width (defaults to k + 2).
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub its: usize,
    /// Memory budget for the row block, e.g. `1GB` or `512MiB`.
    #[arg(long, value_parser = parse_bytes, default_value = "256MiB")]
    pub mem: u64,
    /// Rows per block; overrides the memory budget.
    #[arg(long)]
    pub block_rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub log_transform: bool,
    #[arg(long)]
    pub center_rows: bool,
    #[arg(long)]
    pub center_cols: bool,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// 1D embedding CSV, one cell per row.
    #[arg(long)]
    pub embedding: PathBuf,
    /// The embedding CSV starts with a header line.
    #[arg(long)]
    pub header: bool,
    /// Genes x cells CSV: a header line, then `gene,x_1,...,x_N` rows.
    #[arg(long)]
    pub expression: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Comma-separated genes of interest.
    #[arg(long, value_delimiter = ',', required = true)]
    pub goi: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub n_extra: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub n_bins: usize,
    /// Divide each bin by its cell count.
    #[arg(long)]
    pub normalize: bool,
}

/// Parses sizes such as `1GB`, `512MiB`, `64k` or a plain byte count.
/// Suffixes are binary (`1GB` = 2^30 bytes).
pub fn parse_bytes(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("invalid size `{s}`"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        "t" | "tb" | "tib" => 40,
        other => return Err(format!("unknown size unit `{other}`")),
    };
    let bytes = value * (1u64 << shift) as f64;
    if !(bytes.is_finite() && bytes >= 1.0) {
        return Err(format!("size `{s}` must be at least one byte"));
    }
    Ok(bytes as u64)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::invalid("threads", "must be at least 1"));
        }
        // Fails only if a pool already exists, which then stays in use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Tsne(a) => cmd_tsne(&a),
        Command::Pca(a) => cmd_pca(&a),
        Command::Heatmap(a) => cmd_heatmap(&a),
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut File) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    f(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl TsneArgs {
    /// Builds and validates the optimizer configuration for an input with
    /// `n_cols` columns.
    pub fn config(&self, n_cols: usize) -> Result<TsneConfig> {
        if !(self.perplexity > 0.0) {
            return Err(Error::invalid("perplexity", "must be positive"));
        }
        if self.knn == KnnArg::Forest && self.n_trees == 0 {
            return Err(Error::invalid("n-trees", "must be at least 1"));
        }
        if self.k == Some(0) {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if self.subsample == Some(0) {
            return Err(Error::invalid("subsample", "must be at least 1"));
        }
        let pca_dims = match self.pca_dims {
            Some(0) => None,
            Some(k) => Some(k),
            None if n_cols > DEFAULT_PCA_DIMS => Some(DEFAULT_PCA_DIMS),
            None => None,
        };
        let config = TsneConfig {
            dims: self.dims as usize,
            max_iter: self.max_iter,
            learning_rate: self.learning_rate,
            momentum: MomentumSchedule {
                initial: self.momentum,
                r#final: self.final_momentum,
                switch_iter: self.mom_switch_iter,
            },
            exaggeration: ExaggerationSchedule {
                early_coeff: self.early_exag_coeff,
                early_until_iter: self.stop_early_exag_iter,
                late_coeff: self.late_exag_coeff,
                late_from_iter: self.start_late_exag_iter,
            },
            affinity: AffinityConfig {
                perplexity: self.perplexity,
                n_neighbors: self.k,
                knn: match self.knn {
                    KnnArg::Exact => KnnMethod::Exact,
                    KnnArg::Forest => KnnMethod::Forest { n_trees: self.n_trees },
                },
                subsample: self.subsample,
                seed: self.seed,
            },
            pca_dims,
            nbody: NbodyParams {
                min_intervals: self.min_intervals,
                points_per_interval: self.points_per_interval,
            },
            repulsion: match self.repulsion {
                RepulsionArg::Auto => RepulsionMethod::Auto,
                RepulsionArg::Exact => RepulsionMethod::Exact,
                RepulsionArg::Fft => RepulsionMethod::Fft,
            },
            seed: self.seed,
            init_sd: 1e-4,
            kl_every: self.kl_every,
        };
        config.validate().map_err(flag_error)?;
        Ok(config)
    }
}

/// Renames library parameter names to the flags that set them.
fn flag_error(e: Error) -> Error {
    let Error::InvalidParameter { name, reason } = e else { return e };
    let flag = match name {
        "dims" => "--dims",
        "learning_rate" => "--learning-rate",
        "nbody" => "--min-intervals/--points-per-interval",
        "early_coeff" => "--early-exag-coeff",
        "late_coeff" => "--late-exag-coeff",
        "early_until_iter" => "--stop-early-exag-iter",
        "late_from_iter" => "--start-late-exag-iter",
        other => other,
    };
    Error::InvalidParameter { name: flag, reason }
}

pub fn cmd_tsne(args: &TsneArgs) -> Result<()> {
    let data = read_csv(&args.input, args.header)?;
    let config = args.config(data.ncols())?;
    log::info!("t-SNE on {} x {} from {}", data.nrows(), data.ncols(), args.input.display());
    let result = run_tsne(TsneInput::Data(&data), &config)?;
    let y = result.embedding.into_matrix();
    if !y.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    write_atomic(&args.output, |f| write_csv(f, &y, None))?;
    let kl_path = args.kl_log.clone().unwrap_or_else(|| with_suffix(&args.output, ".kl.csv"));
    write_atomic(&kl_path, |f| {
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "iteration,kl")?;
        for (it, kl) in &result.kl_log {
            writeln!(w, "{it},{kl:?}")?;
        }
        w.flush()
    })?;
    if let Some(svg) = &args.svg {
        write_atomic(svg, |f| write_scatter_svg(f, &y))?;
    }
    Ok(())
}

/// Static scatter of a 1D or 2D embedding; 1D points are spread vertically
/// by row index.
pub fn write_scatter_svg<W: Write>(w: W, y: &DenseMatrix<f64>) -> std::io::Result<()> {
    const SIZE: f64 = 800.0;
    const MARGIN: f64 = 20.0;
    let n = y.nrows();
    let xy: Vec<(f64, f64)> = (0..n)
        .map(|i| match y.ncols() {
            1 => (y.get(i, 0), i as f64),
            _ => (y.get(i, 0), y.get(i, 1)),
        })
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = xy.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = xy.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo, span)
    };
    let (x0, xs) = bounds(|p| p.0);
    let (y0, ys) = bounds(|p| p.1);
    let scale = SIZE - 2.0 * MARGIN;
    let mut w = std::io::BufWriter::new(w);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(w, r#"<g fill="steelblue" fill-opacity="0.6">"#)?;
    for (px, py) in xy {
        let cx = MARGIN + (px - x0) / xs * scale;
        let cy = SIZE - MARGIN - (py - y0) / ys * scale;
        writeln!(w, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5"/>"#)?;
    }
    writeln!(w, "</g>\n</svg>")?;
    w.flush()
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn cmd_pca(args: &PcaArgs) -> Result<()> {
    let fmt = args
        .input_format
        .unwrap_or(if is_csv(&args.input) { MatrixFormat::Csv } else { MatrixFormat::Bin });
    let mut config = PcaConfig::new(args.k);
    config.l = args.l;
    config.its = args.its;
    config.mem_budget_bytes = args.mem;
    config.block_rows = args.block_rows;
    config.seed = args.seed;
    let pre = PreprocessSpec {
        log_transform: args.log_transform,
        center_rows: args.center_rows,
        center_cols: args.center_cols,
    };
    let result = match fmt {
        MatrixFormat::Bin => oocpca(&args.input, &config, pre)?,
        MatrixFormat::Csv => {
            let staged = tempfile::NamedTempFile::new().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            csv_to_binary(&args.input, staged.path(), args.header)?;
            oocpca(staged.path(), &config, pre)?
        }
    };
    log::info!(
        "pca: {} passes, {} blocks of {} rows, peak block {} bytes",
        result.stats.passes,
        result.stats.blocks,
        result.block_rows,
        result.stats.peak_block_bytes
    );
    write_pca(&args.output, args.output_format, &result)
}

fn write_pca(prefix: &Path, fmt: MatrixFormat, r: &PcaResult) -> Result<()> {
    let s = DenseMatrix::new(r.s.len(), 1, r.s.clone())?;
    let ext = match fmt {
        MatrixFormat::Csv => "csv",
        MatrixFormat::Bin => "bin",
    };
    for (name, m) in [("U", &r.u), ("S", &s), ("V", &r.v)] {
        let path = with_suffix(prefix, &format!(".{name}.{ext}"));
        write_atomic(&path, |f| match fmt {
            MatrixFormat::Csv => write_csv(f, m, None),
            MatrixFormat::Bin => write_binary(f, m),
        })?;
    }
    Ok(())
}

/// Reads a labeled genes x cells CSV (header line, then `gene,values...`).
pub fn read_expression(path: &Path) -> Result<(Vec<String>, DenseMatrix<f64>)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(f));
    let mut genes = Vec::new();
    let mut values = Vec::new();
    let mut n = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut fields = rec.iter();
        let gene = fields.next().filter(|g| !g.is_empty()).ok_or_else(|| bad(format!("row {} has no gene name", i + 1)))?;
        let row: Vec<f64> = fields
            .map(|x| x.parse::<f64>().map_err(|_| bad(format!("row {} ({gene}): `{x}` is not a number", i + 1))))
            .collect::<Result<_>>()?;
        if *n.get_or_insert(row.len()) != row.len() {
            return Err(bad(format!("row {} ({gene}) has {} values", i + 1, row.len())));
        }
        genes.push(gene.to_string());
        values.extend(row);
    }
    let n = n.ok_or_else(|| bad("no gene rows".into()))?;
    Ok((genes.clone(), DenseMatrix::new(genes.len(), n, values)?))
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<()> {
    let emb = read_csv(&args.embedding, args.header)?;
    if emb.ncols() != 1 {
        return Err(Error::Format {
            path: args.embedding.clone(),
            reason: format!("expected a 1D embedding, found {} columns", emb.ncols()),
        });
    }
    let (genes, expr) = read_expression(&args.expression)?;
    let bins = heatmap::bin_embedding(emb.as_slice(), args.n_bins)?;
    let mut g = heatmap::gene_vectors(&expr, &genes, &bins)?;
    if args.normalize {
        g = g.normalized_by_counts(&bins);
    }
    let order = heatmap::enrich_goi(&g, &args.goi, args.n_extra)?;
    let rows = heatmap::heatmap_rows(&g, &order)?;
    write_atomic(&args.output, |f| heatmap::write_heatmap_csv(f, &order, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes() {
        assert_eq!(parse_bytes("1GB").unwrap(), 1 << 30);
        assert_eq!(parse_bytes("512MiB").unwrap(), 512 << 20);
        assert_eq!(parse_bytes("64k").unwrap(), 64 << 10);
        assert_eq!(parse_bytes("1000").unwrap(), 1000);
        assert_eq!(parse_bytes("1.5 KB").unwrap(), 1536);
        assert!(parse_bytes("GB").is_err());
        assert!(parse_bytes("3 parsecs").is_err());
        assert!(parse_bytes("0").is_err());
    }

    #[test]
    fn dims_outside_range_is_a_usage_error() {
        let err = Cli::try_parse_from(["fastsne", "tsne", "--input", "x.csv", "--output", "y.csv", "--dims", "3"])
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn late_exaggeration_flags_reach_the_schedule() {
        let cli = Cli::try_parse_from([
            "fastsne",
            "tsne",
            "--input",
            "x.csv",
            "--output",
            "y.csv",
            "--late-exag-coeff",
            "12",
            "--start-late-exag-iter",
            "750",
        ])
        .unwrap();
        let Command::Tsne(a) = cli.command else { panic!() };
        let c = a.config(10).unwrap();
        assert_eq!(c.exaggeration.alpha(749), 1.0);
        assert_eq!(c.exaggeration.alpha(750), 12.0);
        assert_eq!(c.exaggeration.alpha(999), 12.0);
        assert_eq!(c.pca_dims, None);
    }

    #[test]
    fn wide_inputs_default_to_fifty_components() {
        let cli = Cli::try_parse_from(["fastsne", "tsne", "--input", "x.csv", "--output", "y.csv"]).unwrap();
        let Command::Tsne(a) = cli.command else { panic!() };
        assert_eq!(a.config(51).unwrap().pca_dims, Some(50));
        assert_eq!(a.config(50).unwrap().pca_dims, None);
    }

    #[test]
    fn invalid_combination_names_the_flag() {
        let cli = Cli::try_parse_from([
            "fastsne",
            "tsne",
            "--input",
            "x.csv",
            "--output",
            "y.csv",
            "--max-iter",
            "100",
            "--stop-early-exag-iter",
            "250",
        ])
        .unwrap();
        let Command::Tsne(a) = cli.command else { panic!() };
        let msg = a.config(5).unwrap_err().to_string();
        assert!(msg.contains("--stop-early-exag-iter"), "{msg}");
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.txt");
        write_atomic(&out, |f| f.write_all(b"hello")).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), b"hello");
        let failed = write_atomic(&dir.path().join("bad.txt"), |_| Err(std::io::Error::other("boom")));
        assert!(failed.is_err());
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.txt")]);
    }
}
