use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use qurag_cli::config::{AnalyzerConfig, RunConfig};
use qurag_cli::stages::{self, ExportTable, Failure, StageResult};
use qurag_core::evaluation::{ExternalScorer, Metric, ReportLayout};
use qurag_core::SourcePaths;

#[derive(Debug, Parser)]
#[command(
    name = "qurag",
    version,
    about = "Retrieval-augmented Quechua to Spanish translation experiments"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding the stage files.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
}

impl RunArgs {
    fn load_config(&self) -> StageResult<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).map_err(Failure::Usage),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse raw resource files into a bundle directory.
    Ingest {
        /// Directory with dictionary.tsv, grammar.txt, corpus.tsv, dataset.tsv and optionally lexicon.tsv.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment, retrieve and assemble prompts.
    BuildPrompts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Condition code (base, c, g, m, cg, cm, gm, cgm); repeatable.
        #[arg(long = "condition")]
        conditions: Vec<String>,
        /// Restrict to these dataset items; repeatable.
        #[arg(long = "item")]
        items: Vec<String>,
        /// auto or manual; repeatable.
        #[arg(long = "mode")]
        modes: Vec<String>,
        /// Hand-curated contexts for manual mode.
        #[arg(long)]
        overrides: Option<PathBuf>,
        /// External morphological analyzer program.
        #[arg(long)]
        analyzer: Option<String>,
        #[arg(long = "analyzer-arg", allow_hyphen_values = true)]
        analyzer_args: Vec<String>,
        /// Corpus examples per prompt.
        #[arg(long)]
        k: Option<usize>,
        /// Also print each prompt to stdout.
        #[arg(long)]
        print: bool,
    },
    /// Send prompts to the model backends.
    Translate {
        #[command(flatten)]
        run: RunArgs,
        /// mock-identity, replay:FILE or an http(s) chat-completions URL.
        #[arg(long)]
        backend: Option<String>,
        /// Model id for --backend.
        #[arg(long)]
        model: Option<String>,
        /// Environment variable with the bearer token for --backend.
        #[arg(long)]
        auth_env: Option<String>,
        /// Response cache file for remote backends.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Print the request matrix and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score translations against the references.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// External per-item scorer program.
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long = "scorer-arg", allow_hyphen_values = true)]
        scorer_args: Vec<String>,
        #[arg(long, default_value_t = 600)]
        scorer_timeout: u64,
    },
    /// Print a results table.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// table1 or table3.
        #[arg(long, default_value = "table1")]
        layout: String,
        /// bleu or external.
        #[arg(long, default_value = "bleu")]
        metric: String,
        /// Read this summary file instead of the run's.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run the annotation service over one or more run directories.
    Serve {
        /// A run directory or a directory of run directories.
        #[arg(long, default_value = ".")]
        runs: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Inter-annotator agreement for one run.
    Agreement {
        #[arg(long, default_value = ".")]
        runs: PathBuf,
        #[arg(long)]
        run: String,
    },
    /// Write an annotation table as CSV.
    Export {
        #[arg(long, default_value = ".")]
        runs: PathBuf,
        #[arg(long)]
        run: String,
        #[arg(long, value_enum)]
        table: ExportTable,
        #[arg(long)]
        model: Option<String>,
        /// Quality ratings of a single annotator.
        #[arg(long)]
        annotator: Option<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_arg<T: std::str::FromStr<Err = String>>(s: &str) -> StageResult<T> {
    s.parse().map_err(|e: String| Failure::Usage(anyhow!(e)))
}

fn write_out(out: Option<&Path>, text: &str) -> StageResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Data(anyhow!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> StageResult<()> {
    match command {
        Command::Ingest {
            from,
            dictionary,
            grammar,
            corpus,
            dataset,
            lexicon,
            out,
        } => {
            let mut sources = match &from {
                Some(dir) => SourcePaths::in_dir(dir),
                None => SourcePaths {
                    dictionary: dictionary
                        .clone()
                        .ok_or_else(|| Failure::Usage(anyhow!("--dictionary or --from is required")))?,
                    grammar: grammar
                        .clone()
                        .ok_or_else(|| Failure::Usage(anyhow!("--grammar or --from is required")))?,
                    corpus: corpus
                        .clone()
                        .ok_or_else(|| Failure::Usage(anyhow!("--corpus or --from is required")))?,
                    dataset: dataset
                        .clone()
                        .ok_or_else(|| Failure::Usage(anyhow!("--dataset or --from is required")))?,
                    lexicon: None,
                },
            };
            for (slot, v) in [
                (&mut sources.dictionary, dictionary),
                (&mut sources.grammar, grammar),
                (&mut sources.corpus, corpus),
                (&mut sources.dataset, dataset),
            ] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            if lexicon.is_some() {
                sources.lexicon = lexicon;
            }
            let manifest = stages::ingest(&sources, &out)?;
            println!("{}", manifest.bundle_hash);
        }
        Command::BuildPrompts {
            run,
            bundle,
            conditions,
            items,
            modes,
            overrides,
            analyzer,
            analyzer_args,
            k,
            print,
        } => {
            let mut cfg = run.load_config()?;
            if bundle.is_some() {
                cfg.bundle = bundle;
            }
            if !conditions.is_empty() {
                cfg.conditions = conditions;
            }
            if !modes.is_empty() {
                cfg.modes = modes;
            }
            if overrides.is_some() {
                cfg.overrides = overrides;
            }
            if let Some(program) = analyzer {
                cfg.analyzer = Some(AnalyzerConfig {
                    program,
                    args: analyzer_args,
                    timeout_secs: 10,
                });
            }
            if let Some(k) = k {
                cfg.retrieval.k = k;
            }
            let prompts = stages::build_prompts(&cfg, &items, &run.run_dir)?;
            for p in &prompts {
                if print {
                    println!("{}\n", p.full_prompt);
                } else {
                    println!("{}", run.run_dir.join(stages::prompt_file_name(p)).display());
                }
            }
        }
        Command::Translate {
            run,
            backend,
            model,
            auth_env,
            cache,
            dry_run,
        } => {
            let mut cfg = run.load_config()?;
            if cache.is_some() {
                cfg.cache = cache;
            }
            let mut specs = stages::resolve_models(&cfg, backend.as_deref(), model.as_deref())?;
            if backend.is_some() {
                specs[0].auth_env = auth_env;
            }
            if dry_run {
                let prompts_path = run.run_dir.join(qurag_core::records::PROMPTS_FILE);
                let prompts = qurag_core::records::read_jsonl(&prompts_path).map_err(|e| {
                    Failure::Data(anyhow!(
                        "{}: {e}; run `qurag build-prompts` first",
                        prompts_path.display()
                    ))
                })?;
                print!("{}", stages::plan_text(&prompts, &specs));
                return Ok(());
            }
            let outcome = stages::translate(&cfg, &specs, &run.run_dir)?;
            let failed = outcome.records.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} records ({failed} failed), {} network requests",
                outcome.records.len(),
                outcome.network_requests
            );
        }
        Command::Evaluate {
            run,
            scorer,
            scorer_args,
            scorer_timeout,
        } => {
            let scorer = scorer.map(|p| ExternalScorer::new(p, scorer_args, Duration::from_secs(scorer_timeout)));
            let summaries = stages::evaluate(&run.run_dir, scorer.as_ref())?;
            print!("{}", qurag_core::evaluation::summaries_to_csv(&summaries));
        }
        Command::Report {
            run,
            layout,
            metric,
            summary,
        } => {
            let layout: ReportLayout = parse_arg(&layout)?;
            let metric: Metric = parse_arg(&metric)?;
            let report = match summary {
                Some(p) => stages::report_from_file(&p, layout, metric)?,
                None => stages::report(&run.run_dir, layout, metric)?,
            };
            print!("{}", report.text);
        }
        Command::Serve { runs, addr } => {
            let store = stages::open_store(&runs)?;
            let handle = qurag_annotate::serve(Arc::new(store), addr)
                .map_err(|e| Failure::Usage(anyhow!("binding {addr}: {e}")))?;
            eprintln!("serving annotations on http://{}", handle.local_addr());
            handle
                .wait()
                .map_err(|e| Failure::Data(anyhow!("server stopped: {e}")))?;
        }
        Command::Agreement { runs, run } => {
            let store = stages::open_store(&runs)?;
            let report = stages::agreement(&store, &run)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Export {
            runs,
            run,
            table,
            model,
            annotator,
            out,
        } => {
            let store = stages::open_store(&runs)?;
            let csv = stages::export_table(&store, &run, table, model.as_deref(), annotator.as_deref())?;
            write_out(out.as_deref(), &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .parse_env("QURAG_LOG")
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
