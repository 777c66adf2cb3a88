use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use derec::corpus::{self, Dataset, LabelScheme, Split};
use derec::embed::{embed_corpus, EmbeddingStore};
use derec::eval::{bench_scaling, BenchConfig};
use derec::index::{ClusterParams, VectorIndex};
use derec::pipeline::{
    self, build_embedder, evaluate_predictions, read_gold, read_predictions, run_pipeline, Artifacts,
    IndexKindName, PipelineConfig, Runner, Step, StepStatus,
};
use derec::retrieve::{read_evidence, sentence_index, write_evidence, Retriever, Scope};
use derec::verify::{RemoteClassifier, SoftmaxHead};
use derec::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "derec", version, about = "Evidence retrieval and claim veracity pipeline")]
struct Cli {
    /// Pipeline config file (TOML); `DEREC_*` variables override its keys.
    #[arg(long, global = true, env = "DEREC_CONFIG")]
    config: Option<PathBuf>,
    /// Replaces the pipeline seed and every per-component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Re-run steps even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, default_value = "warn", env = "DEREC_LOG")]
    log_level: log::LevelFilter,
    /// Artifact directory (default: the config's `out`, else ./derec-out).
    #[arg(long = "out")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a raw corpus and write the canonical dataset.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-split counts and the label distribution.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Embed every claim and evidence sentence into a resumable cache.
    Embed {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Build or query a sentence index.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Retrieve the top-k evidence sentences for every claim.
    Retrieve {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Prebuilt sentence index for global scope.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the softmax head on the train split.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict veracity with a trained head or a remote classifier.
    Predict {
        #[arg(long, conflicts_with = "classifier")]
        model: Option<PathBuf>,
        /// Remote classifier endpoint.
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Split to predict, or `all`.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against gold labels.
    Eval {
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure index search latency and recall against corpus size.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, value_enum, default_value_t = BenchKind::Both)]
        kind: BenchKind,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 32)]
        n_clusters: usize,
        /// Fixed probe count; by default it is calibrated to `--target-recall`.
        #[arg(long)]
        probe: Option<usize>,
        #[arg(long, default_value_t = 0.9)]
        target_recall: f64,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every step from the config, writing artifacts and reports.
    Run {
        /// Artifact directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum IndexAction {
    Build {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        n_clusters: Option<usize>,
        #[arg(long)]
        n_probe: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Search {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        query_text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        provider: ProviderArgs,
    },
}

#[derive(Args, Debug, Default)]
struct ProviderArgs {
    /// `hash` or an embedding service URL.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_batch: Option<usize>,
    /// Request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Flat,
    Clustered,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum BenchKind {
    Flat,
    Clustered,
    Both,
}

/// Resolved settings: the config (or defaults) with flag overrides.
struct Ctx {
    cfg: PipelineConfig,
    from_file: bool,
    force: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let env = std::env::vars();
        let mut cfg = match &cli.config {
            Some(path) => PipelineConfig::load(path, env)?,
            None => {
                let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
                PipelineConfig::from_toml_str("dataset = \"\"\nscheme = \"3\"\n", &cwd, env)?
            }
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
            cfg.embedder.seed = None;
            cfg.classifier.seed = None;
        }
        let run_out = match &cli.command {
            Command::Run { out } => out.as_ref(),
            _ => None,
        };
        if let Some(out) = run_out.or(cli.out_dir.as_ref()) {
            cfg.out = out.clone();
        }
        Ok(Ctx {
            cfg,
            from_file: cli.config.is_some(),
            force: cli.force,
        })
    }

    fn artifact(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.cfg.out.join(name))
    }

    fn scheme(&self, explicit: &Option<String>) -> Result<Option<LabelScheme>> {
        match explicit {
            Some(s) => LabelScheme::parse(s).map(Some),
            None if self.from_file => Ok(Some(self.cfg.scheme)),
            None => Ok(None),
        }
    }

    fn load_dataset(&self, path: &Path, scheme: &Option<String>) -> Result<Dataset> {
        match self.scheme(scheme)? {
            Some(s) => corpus::ingest(path, s),
            None => pipeline::ingest_any(path),
        }
    }

    /// Runs one step through the manifest-tracked runner.
    fn run_step(&self, step: Step) -> Result<()> {
        let cfg = self.cfg.clone().validated()?;
        let mut runner = Runner::open(cfg, self.force)?;
        let status = runner.run_step(step)?;
        let note = match status {
            StepStatus::Ran => "done",
            StepStatus::Fresh => "up to date",
            StepStatus::Skipped => "not applicable",
        };
        println!("{}: {note} ({})", step.name(), runner.artifacts().dir.display());
        Ok(())
    }

    /// True when a stage command should go through the runner: a config
    /// file was given and no explicit path flags override its layout.
    fn managed(&self, paths: &[&Option<PathBuf>]) -> bool {
        self.from_file && paths.iter().all(|p| p.is_none())
    }
}

fn apply_provider(cfg: &mut PipelineConfig, p: &ProviderArgs) {
    let e = &mut cfg.embedder;
    if let Some(v) = &p.provider {
        e.provider = v.clone();
    }
    if let Some(v) = p.dim {
        e.dim = v;
    }
    if let Some(v) = &p.model {
        e.model = v.clone();
    }
    if let Some(v) = p.max_batch {
        e.max_batch = v;
    }
    if let Some(v) = p.timeout {
        e.timeout_secs = v;
    }
    if let Some(v) = p.retries {
        e.retries = v;
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        Ok(None)
    } else {
        Split::parse(s).map(Some)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let bytes = serde_json::to_vec_pretty(value).expect("serializes");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn execute(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Ingest { input, scheme, out } => {
            if ctx.managed(&[&input, &out]) && scheme.is_none() {
                return ctx.run_step(Step::Ingest);
            }
            let input = input
                .or_else(|| ctx.from_file.then(|| ctx.cfg.dataset.clone()))
                .ok_or_else(|| Error::InvalidArgument("--input is required".to_string()))?;
            let ds = ctx.load_dataset(&input, &scheme)?;
            let out = ctx.artifact(&out, Artifacts::DATASET);
            ensure_parent(&out)?;
            corpus::write_canonical(&ds, &out)?;
            let empty = ds.evidence_free_claims();
            if !empty.is_empty() {
                log::warn!("{} claims have no evidence sentences", empty.len());
            }
            println!(
                "ingested {} claims ({} scheme) -> {}",
                ds.len(),
                ds.scheme().name(),
                out.display()
            );
        }
        Command::Stats { dataset, split, scheme } => {
            let path = ctx.artifact(&dataset, Artifacts::DATASET);
            let ds = ctx.load_dataset(&path, &scheme)?;
            match split {
                Some(s) => {
                    let st = corpus::stats(&ds, Split::parse(&s)?)?;
                    println!(
                        "{}: claims {}, reports {}, sentences {}, avg sentences/claim {:.2}",
                        st.split, st.n_claims, st.n_reports, st.n_sentences, st.avg_sentences_per_claim
                    );
                }
                None => print!("{}", corpus::stats_table(&ds)?),
            }
            let dist = corpus::label_distribution(&ds);
            let parts: Vec<String> = dist.iter().map(|(l, n)| format!("{l}: {n}")).collect();
            println!("labels: {} (total {})", parts.join(", "), dist.total());
        }
        Command::Embed { dataset, provider, cache } => {
            apply_provider(&mut ctx.cfg, &provider);
            if ctx.managed(&[&dataset, &cache]) {
                return ctx.run_step(Step::Embed);
            }
            let cfg = ctx.cfg.clone().validated()?;
            let ds = ctx.load_dataset(&ctx.artifact(&dataset, Artifacts::DATASET), &None)?;
            let cache = ctx.artifact(&cache, Artifacts::EMBEDDINGS);
            ensure_parent(&cache)?;
            if ctx.force && cache.exists() {
                std::fs::remove_file(&cache).map_err(|e| Error::io(&cache, e))?;
            }
            let embedder = build_embedder(&cfg.embedder, cfg.seed)?;
            let (store, report) = embed_corpus(&embedder, &ds, &cache, &cfg.embed_options())?;
            println!(
                "embedded {} items (d={}): {} computed, {} reused, {} corrupt recomputed -> {}",
                store.len(),
                store.dim(),
                report.computed,
                report.reused,
                report.corrupt_recomputed,
                cache.display()
            );
        }
        Command::Index { action } => match action {
            IndexAction::Build {
                dataset,
                store,
                kind,
                n_clusters,
                n_probe,
                out,
            } => {
                if let Some(k) = kind {
                    ctx.cfg.index.kind = match k {
                        KindArg::Flat => IndexKindName::Flat,
                        KindArg::Clustered => IndexKindName::Clustered,
                    };
                }
                if let Some(n) = n_clusters {
                    ctx.cfg.index.n_clusters = n;
                }
                if let Some(n) = n_probe {
                    ctx.cfg.index.n_probe = n;
                }
                if ctx.managed(&[&dataset, &store, &out]) {
                    return ctx.run_step(Step::Index);
                }
                let cfg = ctx.cfg.clone().validated()?;
                let ds = ctx.load_dataset(&ctx.artifact(&dataset, Artifacts::DATASET), &None)?;
                let store = EmbeddingStore::load(&ctx.artifact(&store, Artifacts::EMBEDDINGS))?;
                let index = sentence_index(&ds, &store, cfg.index_kind())?;
                let out = ctx.artifact(&out, Artifacts::INDEX);
                ensure_parent(&out)?;
                index.persist(&out)?;
                println!(
                    "built {} index over {} sentences -> {}",
                    index.kind_name(),
                    index.len(),
                    out.display()
                );
            }
            IndexAction::Search {
                index,
                query_text,
                k,
                provider,
            } => {
                apply_provider(&mut ctx.cfg, &provider);
                let cfg = ctx.cfg.clone().validated()?;
                let index = VectorIndex::<f32>::load(&ctx.artifact(&index, Artifacts::INDEX))?;
                if index.dim() != cfg.embedder.dim {
                    return Err(Error::DimensionMismatch {
                        context: "query embedding vs index".to_string(),
                        expected: index.dim(),
                        found: cfg.embedder.dim,
                    });
                }
                let embedder = build_embedder(&cfg.embedder, cfg.seed)?;
                let text = format!("{}{}", cfg.embedder.claim_prefix, query_text);
                let query = derec::embed::embed_batch(&embedder, &[text.as_str()])?
                    .pop()
                    .expect("one vector")
                    .normalized("query")?;
                for hit in index.search_vector(&query, k)? {
                    println!("{:>3}  {:.6}  {}", hit.rank, hit.score, display_key(&hit.key));
                }
            }
        },
        Command::Retrieve {
            dataset,
            store,
            index,
            k,
            scope,
            out,
        } => {
            if let Some(k) = k {
                ctx.cfg.k = k;
            }
            if let Some(s) = &scope {
                ctx.cfg.scope = Scope::parse(s)?;
            }
            if ctx.managed(&[&dataset, &store, &index, &out]) {
                return ctx.run_step(Step::Retrieve);
            }
            let cfg = ctx.cfg.clone().validated()?;
            let ds = ctx.load_dataset(&ctx.artifact(&dataset, Artifacts::DATASET), &None)?;
            let store = EmbeddingStore::load(&ctx.artifact(&store, Artifacts::EMBEDDINGS))?;
            let retriever = match (cfg.scope, &index) {
                (Scope::Global, Some(p)) => Retriever::with_index(&ds, &store, VectorIndex::load(p)?)?,
                (Scope::PerClaim, Some(_)) => {
                    return Err(Error::InvalidArgument(
                        "--index applies to global scope only".to_string(),
                    ))
                }
                (scope, None) => Retriever::new(&ds, &store, scope)?,
            };
            let sets = retriever.retrieve_all(cfg.k)?;
            let out = ctx.artifact(&out, Artifacts::EVIDENCE);
            ensure_parent(&out)?;
            write_evidence(&out, &sets)?;
            let short = sets.iter().filter(|s| s.shortfall()).count();
            println!(
                "retrieved top-{} ({}) for {} claims, {} short -> {}",
                cfg.k,
                cfg.scope,
                sets.len(),
                short,
                out.display()
            );
        }
        Command::Train {
            dataset,
            evidence,
            store,
            scheme,
            epochs,
            lr,
            batch_size,
            l2,
            max_len,
            out,
        } => {
            let c = &mut ctx.cfg.classifier;
            if let Some(v) = epochs {
                c.epochs = v;
            }
            if let Some(v) = lr {
                c.learning_rate = v;
            }
            if let Some(v) = batch_size {
                c.batch_size = v;
            }
            if let Some(v) = l2 {
                c.l2 = v;
            }
            if let Some(v) = max_len {
                ctx.cfg.max_len = v;
            }
            if ctx.managed(&[&dataset, &evidence, &store, &out]) && scheme.is_none() {
                return ctx.run_step(Step::Train);
            }
            let cfg = ctx.cfg.clone().validated()?;
            let ds = ctx.load_dataset(&ctx.artifact(&dataset, Artifacts::DATASET), &scheme)?;
            let store = EmbeddingStore::load(&ctx.artifact(&store, Artifacts::EMBEDDINGS))?;
            let sets = read_evidence(&ctx.artifact(&evidence, Artifacts::EVIDENCE))?;
            let (head, report) = pipeline::train_head(&ds, &store, &sets, cfg.max_len, &cfg.train_config())?;
            let out = ctx.artifact(&out, Artifacts::MODEL);
            ensure_parent(&out)?;
            head.save(&out)?;
            println!(
                "trained {}-class head (d={}): loss {:.4} -> {:.4}, best epoch {} -> {}",
                head.classes(),
                head.dim(),
                report.initial_loss,
                report.final_loss,
                report.best_epoch,
                out.display()
            );
        }
        Command::Predict {
            model,
            classifier,
            dataset,
            evidence,
            store,
            split,
            max_len,
            out,
        } => {
            if let Some(url) = &classifier {
                ctx.cfg.classifier.provider = url.clone();
            }
            if let Some(v) = max_len {
                ctx.cfg.max_len = v;
            }
            if let Some(s) = &split {
                if let Some(s) = parse_split(s)? {
                    ctx.cfg.eval_split = s;
                }
            }
            let all = split.as_deref() == Some("all");
            if ctx.managed(&[&model, &dataset, &evidence, &store, &out]) && !all {
                return ctx.run_step(Step::Predict);
            }
            let cfg = ctx.cfg.clone().validated()?;
            let split = if all { None } else { Some(cfg.eval_split) };
            let ds = ctx.load_dataset(&ctx.artifact(&dataset, Artifacts::DATASET), &None)?;
            let sets = read_evidence(&ctx.artifact(&evidence, Artifacts::EVIDENCE))?;
            let preds = if cfg.uses_head() {
                let head = SoftmaxHead::<f64>::load(&ctx.artifact(&model, Artifacts::MODEL))?;
                let store = EmbeddingStore::load(&ctx.artifact(&store, Artifacts::EMBEDDINGS))?;
                pipeline::predict_with_head(&ds, &store, &sets, &head, cfg.max_len, split)?
            } else {
                let client = RemoteClassifier::new(
                    &cfg.classifier.provider,
                    ds.scheme(),
                    Duration::from_secs_f64(cfg.classifier.timeout_secs),
                    cfg.classifier.retries,
                )?;
                pipeline::predict_with_remote(&ds, &sets, &client, cfg.max_len, split)?
            };
            let out = ctx.artifact(&out, Artifacts::PREDICTIONS);
            ensure_parent(&out)?;
            pipeline::write_predictions(&out, &preds)?;
            println!("predicted {} claims -> {}", preds.len(), out.display());
        }
        Command::Eval { gold, pred, scheme, out } => {
            if ctx.managed(&[&gold, &pred, &out]) && scheme.is_none() {
                ctx.run_step(Step::Eval)?;
                let path = ctx.cfg.out.join(Artifacts::EVAL_TXT);
                let table = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                print!("{table}");
                return Ok(());
            }
            let gold = ctx.artifact(&gold, Artifacts::DATASET);
            let scheme = match ctx.scheme(&scheme)? {
                Some(s) => s,
                None => pipeline::ingest_any(&gold)?.scheme(),
            };
            let preds = read_predictions(&ctx.artifact(&pred, Artifacts::PREDICTIONS), scheme)?;
            let report = evaluate_predictions(&read_gold(&gold, scheme)?, &preds, scheme)?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Bench {
            sizes,
            dim,
            kind,
            k,
            queries,
            n_clusters,
            probe,
            target_recall,
            out,
        } => {
            let clustered = (kind != BenchKind::Flat).then(|| ClusterParams {
                n_clusters,
                n_probe: probe.unwrap_or(ClusterParams::default().n_probe).min(n_clusters),
                ..ClusterParams::default()
            });
            let cfg = BenchConfig {
                dim,
                k,
                queries,
                seed: ctx.cfg.seed,
                flat: kind != BenchKind::Clustered,
                clustered,
                target_recall: probe.is_none().then_some(target_recall),
            };
            let table = bench_scaling(&sizes, &cfg)?;
            print!("{}", table.table());
            if let Some(out) = out {
                write_json(&out, &table)?;
            }
        }
        Command::Run { .. } => {
            if !ctx.from_file {
                return Err(Error::Config("`run` needs --config".to_string()));
            }
            let cfg = ctx.cfg.clone().validated()?;
            cfg.check_dataset()?;
            let outcome = run_pipeline(&cfg, ctx.force)?;
            for (step, status) in &outcome.steps {
                log::info!("{}: {status:?}", step.name());
            }
            print!("{}", outcome.evaluation.table());
            println!();
            print!("{}", outcome.runtime.table());
            println!("artifacts in {}", cfg.out.display());
        }
    }
    Ok(())
}

/// Human-readable form of an index key.
fn display_key(key: &str) -> String {
    match corpus::SentenceAddr::from_key(key) {
        Some(addr) => addr.to_string(),
        None => key.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
