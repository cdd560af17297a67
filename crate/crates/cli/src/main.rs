mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use skimzoom::budget::FrameSource;
use skimzoom::dataset::{
    build_dataset, dataset_stats, read_records, review_line, split_by_video, write_records, DeicticFilter, FactoryProviders,
    OverlapGuesser, QaRecord, ReviewCheckers, TemplateAuthor, TimeReferenceLocality,
};
use skimzoom::eval::{eval_grounding, eval_qa, read_lines, AnswerPrediction, EvalReport, SpanPrediction, TaskLabel};
use skimzoom::graph::{build_graph, chunks_with_descriptions, read_graphs, write_graphs, EventGraph, GraphProviders};
use skimzoom::grpo::{compute_advantages, grpo_objective, Rollout};
use skimzoom::interleave::parse_response;
use skimzoom::pipeline::{
    run_ablation, run_batch, summarize, Backend, GoldEcho, HttpBackend, MalformedBackend, PipelineConfig, Preset,
    RandomBackend, RetryingBackend, StreamBackend, Suite,
};
use skimzoom::provider::{ConcatSummarizer, KeywordEntities, TokenF1};
use skimzoom::reward::{gamma_schedule, score_parts, GoldTarget};
use skimzoom::synth::{synth_corpus, synth_graphs};

use config::{BackendKind, RunConfig};

/// Span-grounded long-video QA toolkit: dataset factory, two-stage
/// inference loop, rewards, GRPO signals and evaluation.
#[derive(Debug, Parser)]
#[command(name = "skimzoom", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// INI configuration file (sections: budget, reward, grpo, dataset, backend, eval)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set budget.n_g=32` (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed for generating commands (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker count for commands with bounded parallelism
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Write results here instead of standard output
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, review, split and summarize MCQA datasets
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Run the inference loop against a backend
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Score model responses against gold records
    #[command(subcommand)]
    Reward(RewardCmd),
    /// Group-relative advantages and objective values
    #[command(subcommand)]
    Grpo(GrpoCmd),
    /// Benchmark-style evaluation of prediction files
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Inspect the effective configuration
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Generate records from event graphs, chunk descriptions or a synthetic corpus
    Build(BuildArgs),
    /// Run the review gates over a record file
    Review {
        /// Record file (one JSON record per line)
        #[arg(long)]
        input: PathBuf,
        /// Also write accepted records here
        #[arg(long)]
        accepted: Option<PathBuf>,
    },
    /// Assign videos to train/val/test
    Split {
        #[arg(long)]
        input: PathBuf,
    },
    /// Span-length and label statistics
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
struct BuildSource {
    /// Event graph file as written by --graphs-out
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// Chunk description file: lines of {video_id, duration_s, descriptions}
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// Generate this many synthetic videos
    #[arg(long)]
    synthetic: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    source: BuildSource,
    /// Write frame manifests (<video_id>.tsv) of synthetic videos here
    #[arg(long)]
    manifest_dir: Option<PathBuf>,
    /// Write the intermediate event graphs here
    #[arg(long)]
    graphs_out: Option<PathBuf>,
    /// Write one review report per built record here
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum PipelineCmd {
    /// Run one preset over a record file
    Run {
        /// Prompt assembly and sampling preset
        #[arg(long, value_enum, ignore_case = true, default_value_t = PresetArg::D)]
        preset: PresetArg,
        /// Gold record file
        #[arg(long)]
        records: PathBuf,
        /// Directory holding <video_id>.tsv frame manifests
        #[arg(long)]
        manifests: PathBuf,
        /// Training mode: feed gold spans to Stage 2 at grpo.teacher_force_ratio
        #[arg(long, default_value_t = false)]
        train: bool,
        /// Also write grounding predictions ({item_id, spans}) here
        #[arg(long)]
        spans_out: Option<PathBuf>,
        /// Also write QA predictions ({item_id, answer}) here
        #[arg(long)]
        answers_out: Option<PathBuf>,
    },
    /// Run presets A-D over named suites and print the accuracy table
    Ablation {
        /// Suite as NAME=RECORD_FILE (repeatable)
        #[arg(long = "suite", value_name = "NAME=FILE", required = true)]
        suites: Vec<String>,
        /// Directory holding <video_id>.tsv frame manifests
        #[arg(long)]
        manifests: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "UPPER")]
enum PresetArg {
    A,
    B,
    C,
    D,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::A => Preset::A,
            PresetArg::B => Preset::B,
            PresetArg::C => Preset::C,
            PresetArg::D => Preset::D,
        }
    }
}

#[derive(Debug, Subcommand)]
enum RewardCmd {
    /// Score response lines; emits rollout lines with the reward breakdown
    Score {
        /// Lines of {item_id, response_text, duration_s, [stage1_text], [step], [policy_logprob_sum], [ref_logprob_sum], [token_count]}
        #[arg(long)]
        responses: PathBuf,
        /// Gold record file
        #[arg(long)]
        gold: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum GrpoCmd {
    /// Fill in group-relative advantages (grouped by prompt_id)
    Advantages {
        #[arg(long)]
        rollouts: PathBuf,
    },
    /// Objective value over all groups
    Objective {
        #[arg(long)]
        rollouts: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Ndjson,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Recall@IoU and mIoU
    Grounding {
        /// Lines of {item_id, spans: [[s, e], ...]}
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Score the best single predicted span instead of the union
        #[arg(long, default_value_t = false)]
        single_best: bool,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
    /// Accuracy with optional per-task macro average
    Qa {
        /// Lines of {item_id, answer}
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Lines of {item_id, task}
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigCmd {
    /// Print every configuration key with its effective value
    Show,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_lines<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<QaRecord>> {
    read_records(open(path)?).with_context(|| format!("reading records from {}", path.display()))
}

fn load_sources(dir: &Path, records: &[QaRecord]) -> Result<BTreeMap<String, FrameSource>> {
    let mut sources = BTreeMap::new();
    for r in records {
        if !sources.contains_key(&r.video_id) {
            let path = dir.join(format!("{}.tsv", r.video_id));
            let src = FrameSource::load_manifest(&path).with_context(|| format!("loading manifest {}", path.display()))?;
            sources.insert(r.video_id.clone(), src);
        }
    }
    Ok(sources)
}

fn make_backend(cfg: &RunConfig, gold: &[QaRecord]) -> Result<Box<dyn Backend>> {
    let b = &cfg.backend;
    let retry = |inner: Box<dyn Backend>| -> Box<dyn Backend> {
        Box::new(RetryingBackend { inner, retries: b.retries, base_delay: Duration::from_millis(b.backoff_ms) })
    };
    Ok(match b.kind {
        BackendKind::GoldEcho => Box::new(GoldEcho::new(gold)),
        BackendKind::Random => Box::new(RandomBackend { seed: cfg.seed.unwrap_or(0) }),
        BackendKind::Malformed => Box::new(MalformedBackend),
        BackendKind::Http => retry(Box::new(HttpBackend::new(&b.url, Duration::from_secs_f64(b.timeout_s))?)),
        BackendKind::Process => {
            let mut parts = b.command.split_whitespace();
            let Some(program) = parts.next() else { bail!("backend.kind = process needs backend.command") };
            let args: Vec<String> = parts.map(str::to_string).collect();
            retry(Box::new(StreamBackend::spawn(program, &args)?))
        }
    })
}

#[derive(Debug, Deserialize)]
struct ChunkLine {
    video_id: String,
    duration_s: f64,
    descriptions: Vec<String>,
}

fn dataset_build(args: &BuildArgs, cfg: &RunConfig, jobs: usize, out: &Option<PathBuf>) -> Result<()> {
    let seed = cfg.require_seed()?;
    let graph_cfg = &cfg.dataset.graph;
    let graphs: Vec<EventGraph> = if let Some(path) = &args.source.graphs {
        read_graphs(open(path)?)?
    } else if let Some(path) = &args.source.chunks {
        let lines: Vec<ChunkLine> = read_lines(open(path)?)?;
        let providers = GraphProviders {
            similarity: &TokenF1,
            summarizer: &ConcatSummarizer,
            entities: &KeywordEntities,
            entity_similarity: &TokenF1,
        };
        lines
            .iter()
            .map(|l| {
                let chunks = chunks_with_descriptions(l.duration_s, graph_cfg.chunk_len_s, &l.descriptions)?;
                build_graph(&l.video_id, l.duration_s, &chunks, providers, graph_cfg)
            })
            .collect::<skimzoom::Result<_>>()?
    } else {
        let n = args.source.synthetic.expect("clap enforces one source");
        let videos = synth_corpus(seed, n, cfg.dataset.synthetic_fps)?;
        if let Some(dir) = &args.manifest_dir {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for v in &videos {
                std::fs::write(dir.join(format!("{}.tsv", v.video_id)), v.source.to_manifest())?;
            }
        }
        synth_graphs(&videos, graph_cfg, jobs)?
    };
    if args.manifest_dir.is_some() && args.source.synthetic.is_none() {
        eprintln!("warning: --manifest-dir only applies to --synthetic");
    }
    if let Some(path) = &args.graphs_out {
        let mut w = create(path)?;
        write_graphs(&graphs, &mut w)?;
        w.flush()?;
    }
    let providers = FactoryProviders {
        author: &TemplateAuthor,
        similarity: &TokenF1,
        locality: &TimeReferenceLocality::default(),
        blind: &OverlapGuesser,
    };
    let factory = skimzoom::dataset::FactoryConfig { jobs, ..cfg.dataset.factory.clone() };
    let built = build_dataset(&graphs, providers, &factory, seed)?;
    for (id, reason) in &built.build_failures {
        eprintln!("skipped {id}: {reason}");
    }
    let rejected = built.reports.iter().filter(|r| !r.accepted()).count();
    eprintln!("{} records from {} videos ({} rejected in review)", built.records.len(), graphs.len(), rejected);
    if let Some(path) = &args.reports {
        write_lines(&built.reports, create(path)?)?;
    }
    let mut w = output(out)?;
    write_records(&built.records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn dataset_review(input: &Path, accepted: &Option<PathBuf>, cfg: &RunConfig, out: &Option<PathBuf>) -> Result<()> {
    let deictic = DeicticFilter::new(&cfg.dataset.factory.deictic_words);
    let checkers = ReviewCheckers { locality: &TimeReferenceLocality::default(), blind: &OverlapGuesser, deictic: &deictic };
    let mut reports = Vec::new();
    let mut kept = Vec::new();
    for line in open(input)?.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (record, report) = review_line(&line, &checkers);
        if let (Some(r), true) = (record, report.accepted()) {
            kept.push(r);
        }
        reports.push(report);
    }
    eprintln!("{} of {} records accepted", kept.len(), reports.len());
    if let Some(path) = accepted {
        let mut w = create(path)?;
        write_records(&kept, &mut w)?;
        w.flush()?;
    }
    write_lines(&reports, output(out)?)
}

#[derive(Debug, Deserialize)]
struct ResponseLine {
    item_id: String,
    response_text: String,
    duration_s: f64,
    #[serde(default)]
    stage1_text: Option<String>,
    #[serde(default)]
    step: Option<u64>,
    #[serde(default)]
    policy_logprob_sum: Option<f64>,
    #[serde(default)]
    ref_logprob_sum: Option<f64>,
    #[serde(default = "one")]
    token_count: usize,
}

fn one() -> usize {
    1
}

fn reward_score(responses: &Path, gold: &Path, cfg: &RunConfig, out: &Option<PathBuf>) -> Result<()> {
    let gold: BTreeMap<String, QaRecord> = load_records(gold)?.into_iter().map(|r| (r.item_id(), r)).collect();
    let lines: Vec<ResponseLine> = read_lines(open(responses)?)?;
    let mut rollouts = Vec::with_capacity(lines.len());
    for l in lines {
        let g = gold.get(&l.item_id).ok_or_else(|| skimzoom::Error::UnmatchedId(l.item_id.clone()))?;
        let target = GoldTarget { spans: &g.time_spans, answer: g.correct_answer, duration_s: l.duration_s };
        let gamma = l.step.map_or(cfg.reward.gamma1, |s| gamma_schedule(s, &cfg.reward));
        let answer = parse_response(&l.response_text);
        let spans = l.stage1_text.as_deref().map(parse_response);
        let breakdown = score_parts(spans.as_ref().unwrap_or(&answer), &answer, target, cfg.budget.m_max, gamma, &cfg.reward)?;
        rollouts.push(Rollout {
            prompt_id: l.item_id,
            response_text: l.response_text,
            reward: breakdown,
            policy_logprob_sum: l.policy_logprob_sum,
            ref_logprob_sum: l.ref_logprob_sum,
            token_count: l.token_count,
            advantage: None,
        });
    }
    write_lines(&rollouts, output(out)?)
}

fn print_report(report: &EvalReport, format: ReportFormat, out: &Option<PathBuf>) -> Result<()> {
    let mut w = output(out)?;
    match format {
        ReportFormat::Table => w.write_all(report.render_table().as_bytes())?,
        ReportFormat::Ndjson => w.write_all(report.render_ndjson().as_bytes())?,
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.sets)?;
    if cli.global.seed.is_some() {
        cfg.seed = cli.global.seed;
    }
    let jobs = cli.global.jobs.max(1);
    let out = &cli.global.out;
    match cli.command {
        Command::Dataset(DatasetCmd::Build(args)) => dataset_build(&args, &cfg, jobs, out),
        Command::Dataset(DatasetCmd::Review { input, accepted }) => dataset_review(&input, &accepted, &cfg, out),
        Command::Dataset(DatasetCmd::Split { input }) => {
            let seed = cfg.require_seed()?;
            let manifest = split_by_video(&load_records(&input)?, cfg.dataset.split, seed)?;
            let mut w = output(out)?;
            serde_json::to_writer_pretty(&mut w, &manifest)?;
            writeln!(w)?;
            Ok(w.flush()?)
        }
        Command::Dataset(DatasetCmd::Stats { input }) => {
            let stats = dataset_stats(&load_records(&input)?)?;
            let mut w = output(out)?;
            serde_json::to_writer_pretty(&mut w, &stats)?;
            writeln!(w)?;
            Ok(w.flush()?)
        }
        Command::Pipeline(PipelineCmd::Run { preset, records, manifests, train, spans_out, answers_out }) => {
            let records = load_records(&records)?;
            let sources = load_sources(&manifests, &records)?;
            let backend = make_backend(&cfg, &records)?;
            let pcfg = PipelineConfig {
                preset: preset.into(),
                budget: cfg.budget.clone(),
                gamma: cfg.reward.gamma1,
                reward: cfg.reward.clone(),
                teacher_force_ratio: train.then_some(cfg.grpo.teacher_force_ratio),
                seed: cfg.seed.unwrap_or(0),
                jobs,
            };
            let results = run_batch(&sources, &records, backend.as_ref(), &pcfg)?;
            if let Ok(s) = summarize(&results) {
                eprintln!(
                    "preset {:?}: {} items, accuracy {:.2}, mean tIoU {:.4}, mean reward {:.4}, fallbacks {}, errors {}",
                    pcfg.preset, s.items, s.accuracy, s.mean_tiou, s.mean_reward, s.fallbacks, s.errors
                );
            }
            if let Some(path) = spans_out {
                let preds: Vec<SpanPrediction> = results
                    .iter()
                    .map(|r| SpanPrediction { item_id: r.item_id.clone(), spans: r.predicted_spans.to_pairs() })
                    .collect();
                write_lines(&preds, create(&path)?)?;
            }
            if let Some(path) = answers_out {
                let preds: Vec<AnswerPrediction> = results
                    .iter()
                    .map(|r| AnswerPrediction { item_id: r.item_id.clone(), answer: r.predicted_answer.map(|a| a.to_string()) })
                    .collect();
                write_lines(&preds, create(&path)?)?;
            }
            write_lines(&results, output(out)?)
        }
        Command::Pipeline(PipelineCmd::Ablation { suites, manifests }) => {
            let mut loaded = Vec::new();
            for s in &suites {
                let Some((name, path)) = s.split_once('=') else { bail!("--suite expects NAME=FILE, got `{s}`") };
                let records = load_records(Path::new(path))?;
                let sources = load_sources(&manifests, &records)?;
                loaded.push((name.to_string(), records, sources));
            }
            let all: Vec<QaRecord> = loaded.iter().flat_map(|(_, r, _)| r.iter().cloned()).collect();
            let backend = make_backend(&cfg, &all)?;
            let suites: Vec<Suite<'_>> =
                loaded.iter().map(|(name, records, sources)| Suite { name: name.clone(), sources, records }).collect();
            let base = PipelineConfig {
                budget: cfg.budget.clone(),
                gamma: cfg.reward.gamma1,
                reward: cfg.reward.clone(),
                seed: cfg.seed.unwrap_or(0),
                jobs,
                ..PipelineConfig::default()
            };
            let table = run_ablation(&suites, backend.as_ref(), &base)?;
            let mut w = output(out)?;
            w.write_all(table.render().as_bytes())?;
            Ok(w.flush()?)
        }
        Command::Reward(RewardCmd::Score { responses, gold }) => reward_score(&responses, &gold, &cfg, out),
        Command::Grpo(cmd) => {
            let path = match &cmd {
                GrpoCmd::Advantages { rollouts } | GrpoCmd::Objective { rollouts } => rollouts,
            };
            let rollouts: Vec<Rollout> = read_lines(open(path)?)?;
            let groups = compute_advantages(rollouts, cfg.grpo.normalize.then_some(cfg.grpo.eps))?;
            match cmd {
                GrpoCmd::Advantages { .. } => {
                    let all: Vec<Rollout> = groups.into_iter().flat_map(|g| g.rollouts).collect();
                    write_lines(&all, output(out)?)
                }
                GrpoCmd::Objective { .. } => {
                    let value = grpo_objective(&groups, cfg.grpo.kl_coef)?;
                    let mut w = output(out)?;
                    writeln!(w, "{}", serde_json::json!({ "objective": value, "groups": groups.len(), "kl_coef": cfg.grpo.kl_coef }))?;
                    Ok(w.flush()?)
                }
            }
        }
        Command::Eval(EvalCmd::Grounding { pred, gold, single_best, format }) => {
            let preds: Vec<SpanPrediction> = read_lines(open(&pred)?)?;
            let report = eval_grounding(&preds, &load_records(&gold)?, &cfg.eval.thresholds, single_best || cfg.eval.single_best)?;
            print_report(&report, format, out)
        }
        Command::Eval(EvalCmd::Qa { pred, gold, tasks, format }) => {
            let preds: Vec<AnswerPrediction> = read_lines(open(&pred)?)?;
            let labels = match tasks {
                Some(p) => Some(read_lines::<TaskLabel, _>(open(&p)?)?),
                None => None,
            };
            let report = eval_qa(&preds, &load_records(&gold)?, labels.as_deref())?;
            print_report(&report, format, out)
        }
        Command::Config(ConfigCmd::Show) => {
            let mut w = output(out)?;
            for (k, v) in cfg.describe() {
                writeln!(w, "{k} = {v}")?;
            }
            Ok(w.flush()?)
        }
    }
}

fn is_broken_pipe(err: &(dyn std::error::Error + 'static)) -> bool {
    let kind = if let Some(e) = err.downcast_ref::<io::Error>() {
        Some(e.kind())
    } else if let Some(e) = err.downcast_ref::<serde_json::Error>() {
        e.io_error_kind()
    } else {
        match err.downcast_ref::<skimzoom::Error>() {
            Some(skimzoom::Error::Io(e)) => Some(e.kind()),
            Some(skimzoom::Error::Json(e)) => e.io_error_kind(),
            _ => None,
        }
    };
    kind == Some(io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // downstream reader closed early (e.g. `| head`)
        Err(e) if e.chain().any(is_broken_pipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
