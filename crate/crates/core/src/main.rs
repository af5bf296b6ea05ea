use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ilrkit::config::{read_config_json, PipelineConfig, CONFIG_ENV};
use ilrkit::dataengine::{
    build_detection_tasks, build_detection_tasks_per_category, build_gallery_tasks, build_gallery_tasks_per_category,
    default_label_word, emit_conversations, make_split, template_captions, DetectionParams, DetectionTask,
    DistractorRule, GalleryParams, GalleryTask, SplitManifest, SplitSide, Stage,
};
use ilrkit::embedstore::{load_embedding_set, load_token_maps, save_embedding_set, save_token_maps, EmbeddingSet, Format};
use ilrkit::evalkit::{
    predictions, render_detection_table, render_matching_table, render_sweep_table, score_captions,
    score_detection, score_matching, sweep_difficulty, sweep_plot_data, CaptionPair, DetectionWeighting,
    EmbeddingMatcher, EvalReport, FusedMatcher, Matcher, PredictionLog,
};
use ilrkit::expert::{embed_set, train_expert, ExpertHead};
use ilrkit::fusion::{fuse, train_adapter, FusionAdapter, FusionViews};
use ilrkit::io::{read_jsonl, write_json, write_jsonl};
use ilrkit::pipeline::{run_pipeline, EXPERT, FUSED, GENERAL};
use ilrkit::simcore::{match_by_similarity, SimilarityKind};
use ilrkit::synthgen::generate;
use ilrkit::Error;

/// Instance-level recognition toolkit.
#[derive(Debug, Parser)]
#[command(name = "ilrkit", version, about)]
struct Cli {
    /// Pipeline config (JSON). Defaults to $ILRKIT_CONFIG, then built-in defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dual-view bundle.
    Synth(SynthArgs),
    /// Split instances into disjoint train/test sets.
    Split(SplitArgs),
    /// Build K-way gallery matching tasks.
    BuildGalleries(GalleryArgs),
    /// Build single-image yes/no detection tasks.
    BuildDetection(DetectionArgs),
    /// Emit stage-1 or stage-2 conversations from gallery tasks.
    Emit(EmitArgs),
    /// Train an expert head on raw embeddings of the train split.
    TrainExpert(TrainExpertArgs),
    /// Embed raw vectors with a trained expert head.
    Embed(EmbedArgs),
    /// Train a fusion adapter on gallery tasks.
    TrainAdapter(TrainAdapterArgs),
    /// Dump the fusion output of one image.
    Fuse(FuseArgs),
    /// Answer gallery tasks by similarity matching.
    Match(MatchArgs),
    /// Score a prediction log.
    Evaluate(EvaluateArgs),
    /// Accuracy of general/expert(/fused) matching across tau tiers.
    Sweep(SweepArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Bin,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Jsonl => Format::Jsonl,
            FormatArg::Bin => Format::Bin,
        }
    }
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SideArg {
    Train,
    Test,
}

impl From<SideArg> for SplitSide {
    fn from(s: SideArg) -> SplitSide {
        match s {
            SideArg::Train => SplitSide::Train,
            SideArg::Test => SplitSide::Test,
        }
    }
}

#[derive(Debug, Args)]
struct TierArgs {
    /// General-view embeddings.
    #[arg(long)]
    general: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum)]
    side: SideArg,
    #[arg(long)]
    tau: Option<f64>,
    /// Tasks per category (or in total with --pooled).
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw distractors from all categories instead of the query's own.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GalleryArgs {
    #[command(flatten)]
    tier: TierArgs,
    #[arg(long)]
    k: Option<usize>,
    /// uniform | top_similar
    #[arg(long)]
    rule: Option<DistractorRule>,
}

#[derive(Debug, Args)]
struct DetectionArgs {
    #[command(flatten)]
    tier: TierArgs,
    #[arg(long)]
    positive_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct EmitArgs {
    #[arg(long)]
    tasks: PathBuf,
    /// mcq | caption
    #[arg(long)]
    stage: Stage,
    /// JSON object query image_id → caption with a [SUBJECT] placeholder.
    /// Template captions are used when omitted.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// JSON object category → subject word.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainExpertArgs {
    #[arg(long)]
    raw: PathBuf,
    /// Train only on this split's train instances.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the training log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Debug, Args)]
struct TrainAdapterArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    expert: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    expert: PathBuf,
    #[arg(long)]
    image_id: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Embeddings for plain similarity matching (general or expert view).
    #[arg(long)]
    embeddings: PathBuf,
    /// Gallery tasks to answer; omit to match a single --query.
    #[arg(long, conflicts_with_all = ["query", "gallery"])]
    tasks: Option<PathBuf>,
    #[arg(long, requires = "gallery")]
    query: Option<String>,
    #[arg(long, value_delimiter = ',')]
    gallery: Vec<String>,
    /// Fuse token maps with these embeddings as the expert view.
    #[arg(long, requires = "tokens")]
    adapter: Option<PathBuf>,
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Cosine)]
    similarity: KindArg,
    /// Prediction log output (task mode) or match result (single mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Cosine,
    Dot,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "captions")]
    tasks: Option<PathBuf>,
    #[arg(long, requires = "tasks")]
    predictions: Option<PathBuf>,
    /// Tasks are detection tasks with yes/no responses.
    #[arg(long)]
    detection: bool,
    /// Detection aggregate: sample_count | equal_mean
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    /// JSONL of caption/image/reference embedding triples.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    model_name: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum WeightingArg {
    SampleCount,
    EqualMean,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    general: PathBuf,
    #[arg(long)]
    expert: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value_t = SideArg::Test)]
    side: SideArg,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Include fused matching with this adapter (needs --tokens).
    #[arg(long, requires = "tokens")]
    adapter: Option<PathBuf>,
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write x/y series (tau vs accuracy, gap) for plotting.
    #[arg(long)]
    emit_plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    adapter_epochs: Option<usize>,
    #[arg(long)]
    expert_epochs: Option<usize>,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(vec![msg.into()]).into()
}

fn load_set(path: &Path) -> Result<EmbeddingSet> {
    Ok(load_embedding_set(path, Format::from_path(path))?)
}

fn emit_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn side_set(split: &SplitManifest, side: SideArg) -> &std::collections::BTreeSet<String> {
    split.side(side.into())
}

fn cmd_synth(cfg: &PipelineConfig, a: SynthArgs) -> Result<()> {
    let mut sc = cfg.synth.clone();
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    let bundle = generate(&sc)?;
    let ext = match a.format {
        FormatArg::Jsonl => "jsonl",
        FormatArg::Bin => "bin",
    };
    save_embedding_set(&bundle.raw_set, &a.out.join(format!("raw.{ext}")), a.format.into())?;
    save_embedding_set(&bundle.general_set, &a.out.join(format!("general.{ext}")), a.format.into())?;
    save_token_maps(&bundle.token_maps, &a.out.join("tokens.jsonl"))?;
    write_jsonl(&a.out.join("ground_truth.jsonl"), &bundle.ground_truth_records())?;
    write_json(&a.out.join("synth_config.json"), &sc)?;
    Ok(())
}

fn cmd_split(cfg: &PipelineConfig, a: SplitArgs) -> Result<()> {
    let set = load_set(&a.embeddings)?;
    let split = make_split(
        &set,
        a.test_fraction.unwrap_or(cfg.test_fraction),
        a.seed.unwrap_or(cfg.seed),
    )?;
    write_json(&a.out, &split)?;
    Ok(())
}

fn cmd_build_galleries(cfg: &PipelineConfig, a: GalleryArgs) -> Result<()> {
    let params = GalleryParams {
        k: a.k.unwrap_or(cfg.k),
        tau: a.tier.tau.unwrap_or(cfg.tau),
        n_tasks: a.tier.n_tasks.unwrap_or(cfg.n_tasks),
        seed: a.tier.seed.unwrap_or(cfg.seed),
        rule: a.rule.unwrap_or(cfg.distractor_rule),
    };
    if params.k < 2 {
        return Err(config_error(format!(
            "k must be >= 2, got {} (use build-detection for single-image tasks)",
            params.k
        )));
    }
    let general = load_set(&a.tier.general)?;
    let split: SplitManifest = read_config_json(&a.tier.split)?;
    let side = side_set(&split, a.tier.side);
    let tasks = if a.tier.pooled {
        build_gallery_tasks(&general, side, &params)?
    } else {
        build_gallery_tasks_per_category(&general, side, &params)?
    };
    write_jsonl(&a.tier.out, &tasks)?;
    let relaxed = tasks.iter().filter(|t| t.relaxed).count();
    if relaxed > 0 {
        log::warn!("{relaxed} of {} tasks used relaxed distractors", tasks.len());
    }
    Ok(())
}

fn cmd_build_detection(cfg: &PipelineConfig, a: DetectionArgs) -> Result<()> {
    let params = DetectionParams {
        tau: a.tier.tau.unwrap_or(cfg.tau),
        n_tasks: a.tier.n_tasks.unwrap_or(cfg.detection.n_tasks),
        positive_rate: a.positive_rate.unwrap_or(cfg.detection.positive_rate),
        seed: a.tier.seed.unwrap_or(cfg.seed),
    };
    let general = load_set(&a.tier.general)?;
    let split: SplitManifest = read_config_json(&a.tier.split)?;
    let side = side_set(&split, a.tier.side);
    let tasks = if a.tier.pooled {
        build_detection_tasks(&general, side, &params)?
    } else {
        build_detection_tasks_per_category(&general, side, &params)?
    };
    write_jsonl(&a.tier.out, &tasks)?;
    Ok(())
}

fn cmd_emit(cfg: &PipelineConfig, a: EmitArgs) -> Result<()> {
    let tasks: Vec<GalleryTask> = read_jsonl(&a.tasks)?;
    let mut labels: HashMap<String, String> = tasks
        .iter()
        .map(|t| (t.category.clone(), default_label_word(&t.category)))
        .collect();
    if let Some(p) = &a.labels {
        labels.extend(read_config_json::<HashMap<String, String>>(p)?);
    }
    let captions = match (a.stage, &a.captions) {
        (Stage::MatchMcq, _) => None,
        (Stage::Caption, Some(p)) => Some(read_config_json::<HashMap<String, String>>(p)?),
        (Stage::Caption, None) => Some(template_captions(&tasks, a.seed.unwrap_or(cfg.seed))),
    };
    let records = emit_conversations(&tasks, a.stage, captions.as_ref(), &labels)?;
    write_jsonl(&a.out, &records)?;
    Ok(())
}

fn cmd_train_expert(cfg: &PipelineConfig, a: TrainExpertArgs) -> Result<()> {
    let mut h = cfg.expert;
    h.epochs = a.epochs.unwrap_or(h.epochs);
    h.lr = a.lr.unwrap_or(h.lr);
    h.d_out = a.d_out.unwrap_or(h.d_out);
    h.margin = a.margin.unwrap_or(h.margin);
    h.seed = a.seed.unwrap_or(h.seed);
    let v = h.violations();
    if !v.is_empty() {
        return Err(Error::Config(v).into());
    }
    let mut raw = load_set(&a.raw)?;
    if let Some(p) = &a.split {
        let split: SplitManifest = read_config_json(p)?;
        raw = raw.filter_instances(|i| split.train_instances.contains(i))?;
    }
    let init = ExpertHead::random(raw.dimension(), h.d_out, h.margin, h.loss_weights, h.seed)?;
    let (head, log) = train_expert(&raw, &init, &h)?;
    head.save(&a.out)?;
    if let Some(p) = &a.log {
        write_json(p, &log)?;
    }
    eprintln!(
        "expert: loss {:.4} -> {:.4}",
        log.epoch_loss.first().copied().unwrap_or(f64::NAN),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let head = ExpertHead::load(&a.head)?;
    let raw = load_set(&a.raw)?;
    let out = embed_set(&head, &raw)?;
    let format = a.format.map(Format::from).unwrap_or_else(|| Format::from_path(&a.out));
    save_embedding_set(&out, &a.out, format)?;
    Ok(())
}

fn cmd_train_adapter(cfg: &PipelineConfig, a: TrainAdapterArgs) -> Result<()> {
    let mut h = cfg.adapter;
    h.epochs = a.epochs.unwrap_or(h.epochs);
    h.lr = a.lr.unwrap_or(h.lr);
    h.batch = a.batch.unwrap_or(h.batch);
    h.seed = a.seed.unwrap_or(h.seed);
    let tasks: Vec<GalleryTask> = read_jsonl(&a.tasks)?;
    let tokens = load_token_maps(&a.tokens)?;
    let expert = load_set(&a.expert)?;
    let d = tokens.first().map(|m| m.dim()).context("empty token map file")?;
    let views = FusionViews::new(&tokens, &expert);
    let init = FusionAdapter::init(expert.dimension(), d, h.attention_temperature, h.seed)?;
    let (adapter, log) = train_adapter(&init, &tasks, &views, &h)?;
    adapter.save(&a.out, Some(h.seed))?;
    if let Some(p) = &a.log {
        write_json(p, &log)?;
    }
    eprintln!(
        "adapter: loss {:.4} -> {:.4} (kept epoch {})",
        log.initial_loss, log.final_loss, log.best_epoch
    );
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let adapter = FusionAdapter::load(&a.adapter)?;
    let tokens = load_token_maps(&a.tokens)?;
    let expert = load_set(&a.expert)?;
    let map = tokens
        .iter()
        .find(|m| m.image_id == a.image_id)
        .ok_or_else(|| Error::invalid(format!("image {:?} has no token map", a.image_id)))?;
    let e: Vec<f64> = expert.require(&a.image_id)?.vector.iter().map(|&v| v as f64).collect();
    let out = fuse(&adapter, map, &e)?;
    emit_json(a.out.as_deref(), &out)
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let set = load_set(&a.embeddings)?;
    let kind = match a.similarity {
        KindArg::Cosine => SimilarityKind::Cosine,
        KindArg::Dot => SimilarityKind::Dot,
    };
    if let Some(q) = &a.query {
        let query = &set.require(q)?.vector;
        let gallery = a
            .gallery
            .iter()
            .map(|id| Ok(set.require(id)?.vector.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let r = match_by_similarity(query, &gallery, kind)?;
        return emit_json(a.out.as_deref(), &r);
    }
    let tasks_path = a.tasks.context("either --tasks or --query/--gallery is required")?;
    let tasks: Vec<GalleryTask> = read_jsonl(&tasks_path)?;
    let log = match (&a.adapter, &a.tokens) {
        (Some(ap), Some(tp)) => {
            let adapter = FusionAdapter::load(ap)?;
            let views = FusionViews::new(&load_token_maps(tp)?, &set);
            let m = FusedMatcher {
                name: FUSED.into(),
                adapter: &adapter,
                views: &views,
            };
            predictions(&m, &tasks)?
        }
        _ => {
            if !matches!(kind, SimilarityKind::Cosine) {
                return Err(config_error("task matching uses cosine similarity"));
            }
            let m = EmbeddingMatcher {
                name: set.encoder_name().to_string(),
                set: &set,
            };
            predictions(&m, &tasks)?
        }
    };
    match &a.out {
        Some(p) => log.save(p)?,
        None => {
            for r in log.records() {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: &PipelineConfig, a: EvaluateArgs) -> Result<()> {
    let mut report = EvalReport {
        model_name: a.model_name.clone(),
        per_category: BTreeMap::new(),
        average: 0.0,
        detection: None,
        caption: None,
        sweep: BTreeMap::new(),
    };
    let mut text = String::new();
    if let Some(tp) = &a.tasks {
        let pp = a
            .predictions
            .as_ref()
            .ok_or_else(|| config_error("--predictions is required with --tasks"))?;
        let log = PredictionLog::load(pp, a.model_name.clone())?;
        if a.detection {
            let tasks: Vec<DetectionTask> = read_jsonl(tp)?;
            let weighting = match a.weighting {
                Some(WeightingArg::SampleCount) => DetectionWeighting::SampleCount,
                Some(WeightingArg::EqualMean) => DetectionWeighting::EqualMean,
                None => cfg.detection.weighting,
            };
            let d = score_detection(&tasks, &log, weighting)?;
            text.push_str(&render_detection_table(&[(&a.model_name, &d)]));
            report.detection = Some(d);
        } else {
            let tasks: Vec<GalleryTask> = read_jsonl(tp)?;
            let s = score_matching(&tasks, &log)?;
            report.per_category = s.per_category;
            report.average = s.average;
            text.push_str(&render_matching_table(&[&report]));
        }
    }
    if let Some(cp) = &a.captions {
        let c = score_captions(&read_jsonl::<CaptionPair>(cp)?)?;
        text.push_str(&format!(
            "caption image alignment {:.2}  text alignment {:.2}\n",
            c.image_alignment, c.text_alignment
        ));
        report.caption = Some(c);
    }
    eprint!("{text}");
    emit_json(a.out.as_deref(), &report)
}

fn cmd_sweep(cfg: &PipelineConfig, a: SweepArgs) -> Result<()> {
    let general = load_set(&a.general)?;
    let expert = load_set(&a.expert)?;
    let split: SplitManifest = read_config_json(&a.split)?;
    let params = GalleryParams {
        k: a.k.unwrap_or(cfg.k),
        tau: cfg.tau,
        n_tasks: a.n_tasks.unwrap_or(cfg.n_tasks),
        seed: a.seed.unwrap_or(cfg.seed),
        rule: cfg.distractor_rule,
    };
    let taus = a.taus.clone().unwrap_or_else(|| cfg.taus.clone());
    let gm = EmbeddingMatcher {
        name: GENERAL.into(),
        set: &general,
    };
    let em = EmbeddingMatcher {
        name: EXPERT.into(),
        set: &expert,
    };
    let fused_parts = match (&a.adapter, &a.tokens) {
        (Some(ap), Some(tp)) => Some((FusionAdapter::load(ap)?, FusionViews::new(&load_token_maps(tp)?, &expert))),
        _ => None,
    };
    let fm = fused_parts.as_ref().map(|(adapter, views)| FusedMatcher {
        name: FUSED.into(),
        adapter,
        views,
    });
    let mut matchers: Vec<&dyn Matcher> = vec![&gm, &em];
    if let Some(f) = &fm {
        matchers.push(f);
    }
    let table = sweep_difficulty(&general, side_set(&split, a.side), &params, &taus, &matchers, GENERAL, EXPERT)?;
    eprint!("{}", render_sweep_table(&table));
    if let Some(p) = &a.emit_plot_data {
        write_json(p, &sweep_plot_data(&table))?;
    }
    emit_json(a.out.as_deref(), &table)
}

fn cmd_pipeline(mut cfg: PipelineConfig, a: PipelineArgs) -> Result<()> {
    if let Some(v) = a.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_tasks {
        cfg.n_tasks = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.adapter_epochs {
        cfg.adapter.epochs = v;
    }
    if let Some(v) = a.expert_epochs {
        cfg.expert.epochs = v;
    }
    let (report, manifest) = run_pipeline(&cfg)?;
    eprint!("{}", ilrkit::pipeline::render_report(&report));
    println!(
        "{}",
        json!({
            "output_dir": cfg.output_dir,
            "config_hash": manifest.config_hash,
            "artifacts": manifest.artifacts.len(),
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_error("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = PipelineConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Split(a) => cmd_split(&cfg, a),
        Command::BuildGalleries(a) => cmd_build_galleries(&cfg, a),
        Command::BuildDetection(a) => cmd_build_detection(&cfg, a),
        Command::Emit(a) => cmd_emit(&cfg, a),
        Command::TrainExpert(a) => cmd_train_expert(&cfg, a),
        Command::Embed(a) => cmd_embed(a),
        Command::TrainAdapter(a) => cmd_train_adapter(&cfg, a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Match(a) => cmd_match(a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
        Command::Pipeline(a) => cmd_pipeline(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<Error>() {
                Some(err) => (err.kind(), err.exit_code()),
                None => ("io", 1),
            };
            let details = match e.downcast_ref::<Error>() {
                Some(Error::Config(v)) => json!(v),
                _ => json!([]),
            };
            eprintln!(
                "{}",
                json!({ "error": kind, "message": format!("{e:#}"), "violations": details, "exit_code": code })
            );
            ExitCode::from(code as u8)
        }
    }
}
