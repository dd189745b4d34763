use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser as ClapParser, Subcommand, ValueEnum};

use turnparse::corpus::{
    generate_synthetic, load_corpus, write_corpus, Corpus, LoadConfig, Split, SynthConfig, FEATURE_FILE, MANIFEST_FILE,
    TRANSCRIPT_FILE, TREE_FILE,
};
use turnparse::eval::{bootstrap_significance, evaluate, Metric, DEFAULT_RESAMPLES};
use turnparse::model::{ModelConfig, Parser};
use turnparse::numerics::{OptimizerConfig, OptimizerKind};
use turnparse::pipeline::{
    multi_seed, pipeline_parse, summarize, train_e2e, train_pipeline_parser, train_segmenter, Segmenter, TrainConfig,
    TrainRun,
};
use turnparse::treebank::{parse_tree_file, render_tree_file, TreeRecord};

#[derive(ClapParser)]
#[command(name = "turnparse", version, about = "Joint SU segmentation and parsing of speech turns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (trees, transcript, features, split manifest).
    Synth(SynthArgs),
    /// Train the end-to-end turn parser.
    TrainE2e(TrainArgs),
    /// Train the pipeline's SU segmenter.
    TrainSegmenter(TrainArgs),
    /// Train the pipeline's parser on SUs predicted by a segmenter.
    TrainPipelineParser {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        segmenter: PathBuf,
    },
    /// Parse a corpus split and write a tree file.
    Parse {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Mode::E2e)]
        mode: Mode,
        #[arg(long)]
        model: PathBuf,
        /// Required in pipeline mode.
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print predicted turn-medial SU boundaries for a corpus split.
    Segment {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
    },
    /// Score predicted trees against gold trees.
    Eval {
        pred: PathBuf,
        gold: PathBuf,
        /// A second system's predictions to compare against with a paired bootstrap.
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, value_enum, default_value_t = MetricArg::Parse)]
        metric: MetricArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Mode {
    E2e,
    Pipeline,
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum MetricArg {
    Parse,
    Seg,
}

#[derive(Copy, Clone, ValueEnum)]
enum Size {
    Desk,
    Full,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    turns: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 0.9)]
    correlation: f64,
    #[arg(long, default_value_t = 1.82)]
    mean_sus: f64,
    #[arg(long, default_value_t = 20)]
    max_turn_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding trees.txt, transcript.tsv, features.bin and split.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    trees: Option<PathBuf>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// `turn_id<TAB>train|dev|test` lines; a seeded 90/5/5 split otherwise.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 270)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Frames per token window; must match the model.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Size::Desk)]
    size: Size,
    #[arg(long)]
    use_prosody: bool,
    #[arg(long, default_value_t = 0.5)]
    dummy_penalty: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    sgd: bool,
    /// Comma-separated; one model is trained and saved per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

impl TrainArgs {
    fn model(&self) -> ModelConfig {
        let mut m = match self.size {
            Size::Desk => ModelConfig::desk(self.use_prosody),
            Size::Full => ModelConfig::full(self.use_prosody),
        };
        m.dummy_penalty = self.dummy_penalty;
        m.encoder.max_len = self.data.max_len;
        m
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                kind: if self.sgd { OptimizerKind::Sgd } else { OptimizerKind::Adam },
                learning_rate: self.lr,
                ..OptimizerConfig::default()
            },
            seed: self.seeds.first().copied().unwrap_or(0),
            eval_every: self.eval_every,
        }
    }

    fn checkpoint(&self, seed: u64) -> PathBuf {
        if self.seeds.len() == 1 {
            self.out.clone()
        } else {
            let mut name = self.out.clone().into_os_string();
            name.push(format!(".seed{seed}"));
            PathBuf::from(name)
        }
    }
}

fn load(data: &DataArgs, window: usize, context: usize) -> anyhow::Result<Corpus> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> anyhow::Result<PathBuf> {
        match (explicit, &data.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => bail!("pass --data or --{}", name.split('.').next().unwrap_or(name)),
        }
    };
    let manifest = match (&data.manifest, &data.data) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) if dir.join(MANIFEST_FILE).exists() => Some(dir.join(MANIFEST_FILE)),
        _ => None,
    };
    let config = LoadConfig {
        max_len: data.max_len,
        window: data.window.unwrap_or(window),
        context: data.context.unwrap_or(context),
        manifest,
        seed: data.split_seed,
    };
    let (corpus, report) = load_corpus(
        &pick(&data.trees, TREE_FILE)?,
        &pick(&data.transcript, TRANSCRIPT_FILE)?,
        &pick(&data.features, FEATURE_FILE)?,
        &config,
    )?;
    eprintln!(
        "loaded {} turns ({} too long, {} missing features)",
        report.loaded,
        report.dropped_long.len(),
        report.dropped_missing_features.len()
    );
    Ok(corpus)
}

fn print_runs(runs: &[TrainRun]) {
    for r in runs {
        println!("{}", serde_json::to_string(r).unwrap_or_default());
    }
    if runs.len() > 1 {
        println!("{}", summarize(runs));
    }
}

fn read_trees(path: &Path) -> anyhow::Result<Vec<TreeRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_tree_file(&text)?)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => {
            let config = SynthConfig {
                turns: a.turns,
                vocab_size: a.vocab,
                correlation: a.correlation,
                mean_sus: a.mean_sus,
                max_turn_len: a.max_turn_len,
                seed: a.seed,
                ..SynthConfig::default()
            };
            let corpus = generate_synthetic(&config)?;
            let paths = write_corpus(&corpus, &a.out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::TrainE2e(a) => {
            let model = a.model();
            let corpus = load(&a.data, model.window, model.context)?;
            let runs = multi_seed(&a.seeds, &a.train_config(), |c| {
                let (parser, run) = train_e2e(&corpus.train(), &corpus.dev(), &model, c)?;
                parser.save(&a.checkpoint(c.seed))?;
                Ok(run)
            })?;
            print_runs(&runs);
        }
        Command::TrainSegmenter(a) => {
            let model = a.model();
            let corpus = load(&a.data, model.window, model.context)?;
            let runs = multi_seed(&a.seeds, &a.train_config(), |c| {
                let (seg, run) = train_segmenter(&corpus.train(), &corpus.dev(), &model, c)?;
                seg.save(&a.checkpoint(c.seed))?;
                Ok(run)
            })?;
            print_runs(&runs);
        }
        Command::TrainPipelineParser { train: a, segmenter } => {
            let model = a.model();
            let seg = Segmenter::load(&segmenter)?;
            let corpus = load(&a.data, seg.net.config.window, seg.net.config.context)?;
            let runs = multi_seed(&a.seeds, &a.train_config(), |c| {
                let (parser, run) = train_pipeline_parser(&corpus.train(), &corpus.dev(), &seg, &model, c)?;
                parser.save(&a.checkpoint(c.seed))?;
                Ok(run)
            })?;
            print_runs(&runs);
        }
        Command::Parse {
            data,
            mode,
            model,
            segmenter,
            split,
            out,
        } => {
            let parser = Parser::load(&model)?;
            let seg = match (mode, segmenter) {
                (Mode::E2e, _) => None,
                (Mode::Pipeline, Some(p)) => Some(Segmenter::load(&p)?),
                (Mode::Pipeline, None) => bail!("pipeline mode needs --segmenter"),
            };
            let config = &parser.net.config;
            let corpus = load(&data, config.window, config.context)?;
            let mut records = Vec::new();
            for t in corpus.part(split.into()) {
                let tree = match &seg {
                    Some(s) => pipeline_parse(t, s, &parser)?,
                    None => parser.parse_turn(t)?,
                };
                records.push(TreeRecord {
                    turn_id: t.id.clone(),
                    speaker: t.speaker.clone(),
                    tree,
                });
            }
            std::fs::write(&out, render_tree_file(&records))?;
            eprintln!("wrote {} trees to {}", records.len(), out.display());
        }
        Command::Segment { data, segmenter, split } => {
            let seg = Segmenter::load(&segmenter)?;
            let corpus = load(&data, seg.net.config.window, seg.net.config.context)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for t in corpus.part(split.into()) {
                let b: Vec<String> = seg.segment_turn(t)?.boundaries().iter().map(usize::to_string).collect();
                writeln!(out, "{}\t{}", t.id, b.join(" "))?;
            }
        }
        Command::Eval {
            pred,
            gold,
            bootstrap,
            resamples,
            metric,
            seed,
        } => {
            // Gold may cover more turns than were parsed, e.g. every split.
            let gold: BTreeMap<String, TreeRecord> =
                read_trees(&gold)?.into_iter().map(|r| (r.turn_id.clone(), r)).collect();
            let score = |path: &Path| -> anyhow::Result<turnparse::eval::EvalReport> {
                let mut pred = read_trees(path)?;
                pred.sort_by(|a, b| a.turn_id.cmp(&b.turn_id));
                let mut ids = Vec::new();
                let mut p = Vec::new();
                let mut g = Vec::new();
                for r in pred {
                    let Some(found) = gold.get(&r.turn_id) else {
                        bail!("turn {} of {} is not in the gold file", r.turn_id, path.display());
                    };
                    ids.push(r.turn_id);
                    p.push(r.tree);
                    g.push(found.tree.clone());
                }
                Ok(evaluate(&ids, &p, &g)?)
            };
            let report = score(&pred)?;
            print!("{}", report.to_kv());
            if let Some(other) = bootstrap {
                let other = score(&other)?;
                let metric = match metric {
                    MetricArg::Parse => Metric::ParseF1,
                    MetricArg::Seg => Metric::SegF1,
                };
                let sig = bootstrap_significance(&report.turns, &other.turns, metric, resamples, seed)?;
                println!("bootstrap_metric={metric:?}");
                println!("bootstrap_delta={:.4}", sig.delta);
                println!("bootstrap_p={:.5}", sig.p_value);
                println!("bootstrap_resamples={}", sig.resamples);
                println!("bootstrap_test=paired-one-sided");
            }
            println!();
            println!("{report}");
        }
    }
    Ok(())
}
