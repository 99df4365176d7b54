//! `embedfuse`: command-line driver for the fusion/clustering pipeline.
//!
//! Exit codes: 0 success, 1 user error, 2 internal error.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use embedfuse::embedding::FusionMode;
use embedfuse::pipeline::{self, PipelineConfig, QuerySource, DEFAULT_QUERY_K};
use embedfuse::synth::SynthSpec;
use embedfuse::validation::Space;
use embedfuse::Error;

#[derive(Debug, Parser)]
#[command(name = "embedfuse", version, about = "Fuse, store, cluster and query multimodal listing embeddings")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// key=value configuration file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Store file (artifacts are written beside it)
    #[arg(long, global = true)]
    store: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing outputs that differ
    #[arg(long, global = true)]
    force: bool,

    /// Space silhouette is computed in during k-selection
    #[arg(long, global = true, value_parser = ["reduced", "original"])]
    silhouette_space: Option<String>,

    /// Never subsample points for silhouette
    #[arg(long, global = true)]
    exact_silhouette: bool,

    /// Embedding dimension
    #[arg(long, global = true)]
    dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic blob listings in interchange format
    Synth {
        #[arg(long)]
        blobs: usize,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 3)]
        max_images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse listings from an interchange file into the store
    Fuse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = ["strict", "permissive"])]
        mode: Option<String>,
        #[arg(long)]
        renormalize: bool,
    },
    /// Evaluate PCA dimensions and choose one
    Sweep {
        /// Comma-separated target dimensions
        #[arg(long)]
        dims: Option<String>,
        /// k used for every dimension
        #[arg(long)]
        k: Option<usize>,
    },
    /// Choose k by average silhouette and persist the winning clustering
    Cluster {
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        /// Cluster at this PCA dimension instead of the sweep's choice
        #[arg(long)]
        reduce_to: Option<usize>,
    },
    /// Write per-cluster neighbor lists, shares and the 2D export
    Report {
        #[arg(long)]
        neighbors: Option<usize>,
    },
    /// Nearest stored listings for query vectors or a stored id
    Query {
        #[arg(long, conflicts_with = "id", required_unless_present = "id")]
        file: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = DEFAULT_QUERY_K)]
        k: usize,
        /// Search in the persisted PCA space instead of the fused space
        #[arg(long)]
        reduced: bool,
    },
    /// Write stored rows as interchange lines
    Dump {
        /// Comma-separated ids (default: all)
        #[arg(long)]
        ids: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(store) = &global.store {
        cfg.store_path = store.clone();
    }
    if let Some(seed) = global.seed {
        cfg.base_seed = seed;
    }
    if let Some(dim) = global.dim {
        cfg.dim = dim;
    }
    if let Some(space) = &global.silhouette_space {
        cfg.silhouette_space = space.parse::<Space>()?;
    }
    cfg.force |= global.force;
    cfg.exact_silhouette |= global.exact_silhouette;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32, Error> {
    let mut cfg = load_config(&cli.global)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let io_err = |e| Error::Io {
        context: "writing output".into(),
        source: e,
    };

    match cli.command {
        Command::Synth {
            blobs,
            points,
            radius,
            separation,
            max_images,
            out: path,
        } => {
            let spec = SynthSpec {
                blobs,
                points_per_blob: points,
                dim: cfg.dim,
                radius,
                separation,
                seed: cfg.base_seed,
                max_images,
            };
            let outcome = pipeline::cmd_synth(&spec, &path, cfg.force)?;
            writeln!(
                out,
                "wrote {} listings ({} records) to {}; ground truth in {}",
                outcome.listings,
                outcome.records,
                path.display(),
                outcome.truth_path.display()
            )
            .map_err(io_err)?;
        }
        Command::Fuse { input, mode, renormalize } => {
            if let Some(mode) = mode {
                cfg.fusion.mode = mode.parse::<FusionMode>()?;
            }
            cfg.fusion.renormalize |= renormalize;
            let summary = pipeline::cmd_fuse(&input, &cfg)?;
            writeln!(
                out,
                "listings={} images={} added={} unchanged={} skipped={} ignored_records={}",
                summary.listings,
                summary.images,
                summary.added,
                summary.unchanged,
                summary.skipped.len(),
                summary.ignored_records
            )
            .map_err(io_err)?;
            if !summary.skipped.is_empty() {
                out.flush().map_err(io_err)?;
                for (id, reason) in &summary.skipped {
                    eprintln!("skipped {id}: {reason}");
                }
                return Ok(1);
            }
        }
        Command::Sweep { dims, k } => {
            if let Some(dims) = dims {
                cfg.set("pca_dims", &dims)?;
            }
            if let Some(k) = k {
                cfg.sweep_k = k;
            }
            let report = pipeline::cmd_sweep(&cfg)?;
            write!(out, "{}", report.to_csv()).map_err(io_err)?;
            writeln!(out, "chosen_dim={}", report.chosen_dim).map_err(io_err)?;
        }
        Command::Cluster {
            k_min,
            k_max,
            runs,
            reduce_to,
        } => {
            if let Some(v) = k_min {
                cfg.k_range.0 = v;
            }
            if let Some(v) = k_max {
                cfg.k_range.1 = v;
            }
            if let Some(v) = runs {
                cfg.runs_per_k = v;
            }
            if reduce_to.is_some() {
                cfg.cluster_dim = reduce_to;
            }
            let outcome = pipeline::cmd_cluster(&cfg)?;
            writeln!(out, "k,mean_silhouette,best_seed").map_err(io_err)?;
            for s in &outcome.selection.per_k {
                writeln!(out, "{},{},{}", s.k, s.mean_silhouette, s.best_seed).map_err(io_err)?;
            }
            writeln!(
                out,
                "dim={} chosen_k={} inertia={}",
                outcome.dim, outcome.selection.chosen_k, outcome.result.inertia
            )
            .map_err(io_err)?;
        }
        Command::Report { neighbors } => {
            if let Some(n) = neighbors {
                cfg.report_neighbors = n;
            }
            let report = pipeline::cmd_report(&cfg)?;
            write!(out, "{}", report.shares_csv()).map_err(io_err)?;
        }
        Command::Query { file, id, k, reduced } => {
            let source = match (file, id) {
                (Some(f), _) => QuerySource::File(f),
                (None, Some(id)) => QuerySource::StoredId(id),
                (None, None) => unreachable!("clap requires one of --file/--id"),
            };
            for result in pipeline::cmd_query(&cfg, &source, k, reduced)? {
                serde_json::to_writer(&mut out, &result)?;
                writeln!(out).map_err(io_err)?;
            }
        }
        Command::Dump { ids, out: path } => {
            let ids: Option<Vec<String>> = ids.map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
            match path {
                Some(path) => {
                    let file = fs::File::create(&path).map_err(|e| Error::Io {
                        context: format!("creating {}", path.display()),
                        source: e,
                    })?;
                    pipeline::cmd_dump(&cfg, ids.as_deref(), BufWriter::new(file))?;
                }
                None => {
                    pipeline::cmd_dump(&cfg, ids.as_deref(), &mut out)?;
                }
            }
        }
    }
    out.flush().map_err(io_err)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
