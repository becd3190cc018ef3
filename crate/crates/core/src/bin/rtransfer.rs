use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use serde::Serialize;

use rtransfer::attack::{
    AlphabetPolicy, AttackConfig, AttackLevel, OpWeights, DEFAULT_PROPORTION, DEFAULT_TOP_K,
};
use rtransfer::corpus::{attack_lines, read_lines, Direction};
use rtransfer::embedding::{EmbeddingSet, EmbeddingStore, LoadOptions, DEFAULT_ROW_LIMIT};
use rtransfer::io::{join_lines, write_atomic};
use rtransfer::metrics::{corpus_bleu_with, Smoothing};
use rtransfer::pca::{dispersion, fit_pca, read_vectors, write_projection, VectorRecord};
use rtransfer::protocol::{ExperimentConfig, Protocol};

#[derive(Parser, Debug)]
#[command(
    name = "rtransfer",
    about = "Noise attacks, BLEU and robustness-transfer experiments for multilingual MT"
)]
struct Cli {
    /// Worker threads (default: all cores; protocol: config value)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors on stderr
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Inject noise into a tokenized file, one sentence per line
    Attack(AttackArgs),
    /// Print the k nearest neighbours of a token
    Neighbors {
        embeddings: PathBuf,
        token: String,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_ROW_LIMIT)]
        limit: usize,
        #[arg(long)]
        lowercase_fallback: bool,
    },
    /// Corpus BLEU of a hypothesis file against a reference file
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = SmoothArg::None)]
        smooth: SmoothArg,
    },
    /// Project a vector dump to 2-D
    Pca {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean distance of noisy representations to their seed
    Dispersion {
        #[arg(long)]
        vectors: PathBuf,
        /// Seed vectors (default: the seed rows of --vectors)
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Second dump (e.g. another model) to compare against
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Seeds for --compare (default: its own seed rows)
        #[arg(long)]
        compare_seeds: Option<PathBuf>,
        /// Also report distances in a 2-D PCA projection of each dump
        #[arg(long)]
        pca: bool,
    },
    /// Robustness-transfer experiments
    Protocol {
        #[command(subcommand)]
        action: ProtocolCmd,
    },
}

#[derive(Subcommand, Debug)]
enum ProtocolCmd {
    /// Build data, train, translate, score and write the report (resumable)
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Side-by-side dump of test lines from a finished run
    Examples {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        direction: Direction,
        /// 0-based line indices
        #[arg(long, value_delimiter = ',', required = true)]
        lines: Vec<usize>,
    },
}

#[derive(clap::Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    level: AttackLevel,
    #[arg(long, default_value_t = DEFAULT_PROPORTION)]
    proportion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Required for word and multi levels
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_ROW_LIMIT)]
    limit: usize,
    #[arg(long)]
    lowercase_fallback: bool,
    /// Characters for insert/substitute (default: those seen in the input)
    #[arg(long)]
    alphabet: Option<String>,
    /// Direction label; part of the per-line seed
    #[arg(long, default_value = "xx-yy")]
    direction: Direction,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SmoothArg {
    None,
    AddOne,
}

#[derive(Serialize)]
struct AttackRecord<'a> {
    input: &'a Path,
    output: &'a Path,
    direction: String,
    embeddings: Option<&'a Path>,
    embedding_limit: usize,
    lowercase_fallback: bool,
    config: &'a AttackConfig,
}

fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let config = AttackConfig {
        level: a.level,
        proportion: a.proportion,
        op_weights: OpWeights::uniform(a.level),
        top_k: a.top_k,
        alphabet: a
            .alphabet
            .clone()
            .map_or(AlphabetPolicy::CorpusLocal, AlphabetPolicy::Explicit),
        global_seed: a.seed,
    };
    config.validate()?;
    let record = AttackRecord {
        input: &a.input,
        output: &a.output,
        direction: a.direction.to_string(),
        embeddings: a.embeddings.as_deref(),
        embedding_limit: a.limit,
        lowercase_fallback: a.lowercase_fallback,
        config: &config,
    };
    let record_json = serde_json::to_string_pretty(&record)?;
    info!("effective config: {}", serde_json::to_string(&record)?);

    let mut embeddings = EmbeddingSet::default();
    if let Some(path) = &a.embeddings {
        let opts = LoadOptions {
            limit: a.limit,
            lowercase_fallback: a.lowercase_fallback,
        };
        let store = EmbeddingStore::load(path, &opts)?;
        info!("embeddings: {} rows, dim {}", store.len(), store.dim());
        embeddings = EmbeddingSet::single(store);
    }
    let lines = read_lines(&a.input)?;
    let (out, stats) = attack_lines(&lines, &a.direction, &config, &embeddings)?;
    write_atomic(&a.output, join_lines(&out).as_bytes())
        .with_context(|| format!("writing {}", a.output.display()))?;
    let mut config_path = a.output.clone().into_os_string();
    config_path.push(".config.json");
    write_atomic(Path::new(&config_path), record_json.as_bytes())?;
    println!(
        "sentences={} events={} applied={} drawn={}",
        stats.sentences, stats.events, stats.applied, stats.drawn
    );
    Ok(())
}

fn cmd_neighbors(
    path: &Path,
    token: &str,
    k: usize,
    limit: usize,
    lowercase_fallback: bool,
) -> Result<()> {
    let store = EmbeddingStore::load(
        path,
        &LoadOptions {
            limit,
            lowercase_fallback,
        },
    )?;
    println!("rank\tword\tcosine");
    for (i, (w, c)) in store.topk_similar(token, k)?.into_iter().enumerate() {
        println!("{}\t{w}\t{c:.6}", i + 1);
    }
    Ok(())
}

fn cmd_bleu(hyp: &Path, reference: &Path, smooth: SmoothArg) -> Result<()> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    let smoothing = match smooth {
        SmoothArg::None => Smoothing::None,
        SmoothArg::AddOne => Smoothing::AddOne,
    };
    println!("{}", corpus_bleu_with(&h, &r, smoothing)?.summary_line());
    Ok(())
}

fn cmd_pca(vectors: &Path, out: &Path) -> Result<()> {
    let records = read_vectors(vectors)?;
    let res = fit_pca(&records)?;
    write_projection(&res, out)?;
    let [r1, r2] = res.explained_variance_ratio();
    println!(
        "records={} dim={} lambda1={:.6} lambda2={:.6} explained={:.4}/{:.4}",
        records.len(),
        res.dim(),
        res.eigenvalues[0],
        res.eigenvalues[1],
        r1,
        r2
    );
    Ok(())
}

fn dispersion_of(
    vectors: &Path,
    seeds: Option<&Path>,
    with_pca: bool,
) -> Result<rtransfer::pca::DispersionStats> {
    let noisy = read_vectors(vectors)?;
    let seed_records: Vec<VectorRecord> = match seeds {
        Some(p) => read_vectors(p)?,
        None => noisy.clone(),
    };
    let projection = if with_pca {
        let mut all = noisy.clone();
        if seeds.is_some() {
            all.extend(seed_records.iter().filter(|r| r.is_seed()).cloned());
        }
        Some(fit_pca(&all)?)
    } else {
        None
    };
    Ok(dispersion(&noisy, &seed_records, projection.as_ref())?)
}

fn cmd_dispersion(
    vectors: &Path,
    seeds: Option<&Path>,
    compare: Option<&Path>,
    compare_seeds: Option<&Path>,
    with_pca: bool,
) -> Result<()> {
    let a = dispersion_of(vectors, seeds, with_pca)?;
    print!("{}", a.render("primary"));
    if let Some(c) = compare {
        let b = dispersion_of(c, compare_seeds, with_pca)?;
        print!("{}", b.render("compare"));
        match a.ratio_to(&b) {
            Some(r) => println!("ratio\tprimary/compare\t{r:.6}"),
            None => println!("ratio\tprimary/compare\tNA"),
        }
    }
    Ok(())
}

fn load_protocol(config: &Path, jobs: Option<usize>) -> Result<Protocol> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    info!("effective config:\n{}", toml::to_string(&cfg)?);
    let work_dir = config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .canonicalize()?;
    Ok(Protocol::new(cfg, work_dir)?)
}

fn cmd_protocol(action: &ProtocolCmd, jobs: Option<usize>) -> Result<()> {
    match action {
        ProtocolCmd::Run { config } => {
            let p = load_protocol(config, jobs)?;
            let s = p.run()?;
            println!(
                "trained={} scored={} reused={} cells={} report={}",
                s.trained.len(),
                s.scored.len(),
                s.reused,
                s.report.cells.len(),
                p.config().output_dir.join("report.md").display()
            );
        }
        ProtocolCmd::Examples {
            config,
            direction,
            lines,
        } => {
            let p = load_protocol(config, jobs)?;
            print!("{}", p.extract_examples(direction, lines)?);
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Neighbors {
            embeddings,
            token,
            k,
            limit,
            lowercase_fallback,
        } => cmd_neighbors(embeddings, token, *k, *limit, *lowercase_fallback),
        Cmd::Bleu {
            hyp,
            reference,
            smooth,
        } => cmd_bleu(hyp, reference, *smooth),
        Cmd::Pca { vectors, out } => cmd_pca(vectors, out),
        Cmd::Dispersion {
            vectors,
            seeds,
            compare,
            compare_seeds,
            pca,
        } => cmd_dispersion(
            vectors,
            seeds.as_deref(),
            compare.as_deref(),
            compare_seeds.as_deref(),
            *pca,
        ),
        Cmd::Protocol { action } => cmd_protocol(action, cli.jobs),
    }
}

/// Error chain joined by ": ", skipping causes the outer message already shows.
fn chain_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let version = format!(
        "{} (config schema {})",
        env!("CARGO_PKG_VERSION"),
        rtransfer::CONFIG_SCHEMA_VERSION
    );
    let matches = Cli::command()
        .version(&*Box::leak(version.into_boxed_str()))
        .get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    if let Cmd::Attack(a) = &cli.command {
        if a.level.needs_embeddings() && a.embeddings.is_none() {
            Cli::command()
                .error(
                    clap::error::ErrorKind::MissingRequiredArgument,
                    format!("--embeddings is required for --level {}", a.level),
                )
                .exit();
        }
    }
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            Cli::command()
                .error(
                    clap::error::ErrorKind::ValueValidation,
                    "--jobs must be at least 1",
                )
                .exit();
        }
        if !matches!(cli.command, Cmd::Protocol { .. }) {
            rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build_global()
                .expect("global pool set once");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", chain_message(&e));
            ExitCode::from(1)
        }
    }
}
