//! End-to-end run: synth → split → train-expert → build tiers →
//! train-adapter → evaluate → sweep.
//!
//! Everything is written to a staging directory next to `output_dir` and
//! renamed into place only after the manifest is complete.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, TOOL_VERSION};
use crate::dataengine::{
    build_detection_tasks_per_category, build_gallery_tasks_per_category, default_label_word, emit_conversations,
    make_split, template_captions, DetectionParams, DetectionTask, GalleryParams, GalleryTask, SplitManifest, Stage,
};
use crate::embedstore::{load_embedding_set, load_token_maps, save_embedding_set, save_token_maps, EmbeddingSet, Format, TokenFeatureMap};
use crate::error::{Error, Result};
use crate::evalkit::{
    calibrate_threshold, detection_predictions, predictions, render_detection_table, render_matching_table,
    render_sweep_table, score_captions, score_detection, score_matching, sweep_difficulty, sweep_plot_data,
    CaptionPair, EmbeddingMatcher, EvalReport, FusedMatcher, Matcher, SweepTable,
};
use crate::expert::{embed_set, train_expert, ExpertHead, ExpertTrainLog};
use crate::fusion::{train_adapter, AdapterTrainLog, FusionAdapter, FusionViews};
use crate::io::{read_jsonl, write_atomic, write_json, write_jsonl};
use crate::seeding::derive_seed;
use crate::synthgen::generate;

pub const GENERAL: &str = "general";
pub const EXPERT: &str = "expert";
pub const FUSED: &str = "fused";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub n_train_instances: usize,
    pub n_test_instances: usize,
    pub disjoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub split: SplitSummary,
    pub tau: f64,
    pub n_test_tasks: usize,
    pub relaxed_test_tasks: usize,
    /// Matcher name → report on the held-out tier.
    pub matchers: BTreeMap<String, EvalReport>,
    pub detection_thresholds: BTreeMap<String, f64>,
    pub sweep: SweepTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_training: Option<ExpertTrainLog>,
    pub adapter_training: AdapterTrainLog,
}

/// Writes files under a root and records them for the manifest.
struct Stager {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Stager {
    fn record(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    fn write_with(&mut self, rel: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        f(&path)?;
        self.record(rel)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.write_with(rel, |p| write_json(p, value))
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<()> {
        self.write_with(rel, |p| write_jsonl(p, items))
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        self.write_with(rel, |p| write_atomic(p, text.as_bytes()))
    }
}

struct Views {
    raw: Option<EmbeddingSet>,
    general: EmbeddingSet,
    tokens: Vec<TokenFeatureMap>,
    expert: Option<EmbeddingSet>,
}

fn load_views(cfg: &PipelineConfig, st: &mut Stager) -> Result<Views> {
    let i = &cfg.inputs;
    if let (Some(g), Some(t)) = (&i.general, &i.tokens) {
        let load = |p: &PathBuf| load_embedding_set(p, Format::from_path(p));
        return Ok(Views {
            raw: i.raw.as_ref().map(load).transpose()?,
            general: load(g)?,
            tokens: load_token_maps(t)?,
            expert: i.expert.as_ref().map(load).transpose()?,
        });
    }
    let bundle = generate(&cfg.synth)?;
    st.write_with("synth/raw.jsonl", |p| save_embedding_set(&bundle.raw_set, p, Format::Jsonl))?;
    st.write_with("synth/general.jsonl", |p| save_embedding_set(&bundle.general_set, p, Format::Jsonl))?;
    st.write_with("synth/tokens.jsonl", |p| save_token_maps(&bundle.token_maps, p))?;
    st.jsonl("synth/ground_truth.jsonl", &bundle.ground_truth_records())?;
    Ok(Views {
        raw: Some(bundle.raw_set),
        general: bundle.general_set,
        tokens: bundle.token_maps,
        expert: None,
    })
}

fn label_words(tasks: &[GalleryTask]) -> HashMap<String, String> {
    tasks
        .iter()
        .map(|t| (t.category.clone(), default_label_word(&t.category)))
        .collect()
}

fn gallery_tier(cfg: &PipelineConfig, general: &EmbeddingSet, split: &SplitManifest, side: &str) -> Result<Vec<GalleryTask>> {
    let instances = if side == "train" {
        &split.train_instances
    } else {
        &split.test_instances
    };
    let params = GalleryParams {
        k: cfg.k,
        tau: cfg.tau,
        n_tasks: cfg.n_tasks,
        seed: derive_seed(cfg.seed, &[&"tier", &side]),
        rule: cfg.distractor_rule,
    };
    build_gallery_tasks_per_category(general, instances, &params)
}

fn detection_tier(cfg: &PipelineConfig, general: &EmbeddingSet, split: &SplitManifest, side: &str) -> Result<Vec<DetectionTask>> {
    let instances = if side == "train" {
        &split.train_instances
    } else {
        &split.test_instances
    };
    let params = DetectionParams {
        tau: cfg.tau,
        n_tasks: cfg.detection.n_tasks,
        positive_rate: cfg.detection.positive_rate,
        seed: derive_seed(cfg.seed, &[&"detection", &side]),
    };
    build_detection_tasks_per_category(general, instances, &params)
}

fn tau_tag(tau: f64) -> String {
    format!("tau{:03}", (tau * 100.0).round() as i64)
}

/// Run every stage into a staging directory, then promote it to
/// `cfg.output_dir`. Returns the report and manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(PipelineReport, Manifest)> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    if out.exists() && !out.join("manifest.json").is_file() {
        return Err(Error::Config(vec![format!(
            "output_dir {} exists and is not a previous pipeline output",
            out.display()
        )]));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".ilrkit-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let mut st = Stager {
        root: staging.path().to_path_buf(),
        artifacts: Vec::new(),
    };
    let result = run_stages(cfg, &mut st)?;

    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, &out).map_err(|e| Error::io(&out, e))?;
    Ok(result)
}

fn run_stages(cfg: &PipelineConfig, st: &mut Stager) -> Result<(PipelineReport, Manifest)> {
    let hash = cfg.hash();
    st.json("config.json", &cfg.normalized())?;

    let views = load_views(cfg, st)?;
    let split_source = views.raw.as_ref().unwrap_or(&views.general);
    let split = make_split(split_source, cfg.test_fraction, cfg.seed)?;
    if !split.is_disjoint() {
        return Err(Error::invalid("split produced overlapping instance sets"));
    }
    st.json("split.json", &split)?;

    let (expert, expert_log) = match (&views.expert, &views.raw) {
        (Some(e), _) => (e.clone(), None),
        (None, Some(raw)) => {
            let train = raw.filter_instances(|i| split.train_instances.contains(i))?;
            let h = &cfg.expert;
            let init = ExpertHead::random(train.dimension(), h.d_out, h.margin, h.loss_weights, h.seed)?;
            let (head, log) = train_expert(&train, &init, h)?;
            st.write_with("expert/head.ilrc", |p| head.save(p))?;
            let emb = embed_set(&head, raw)?;
            st.write_with("expert/embeddings.bin", |p| save_embedding_set(&emb, p, Format::Bin))?;
            st.json("expert/train_log.json", &log)?;
            (emb, Some(log))
        }
        (None, None) => return Err(Error::Config(vec!["no expert source: need inputs.raw or inputs.expert".into()])),
    };

    let tag = tau_tag(cfg.tau);
    let train_tasks = gallery_tier(cfg, &views.general, &split, "train")?;
    let test_tasks = gallery_tier(cfg, &views.general, &split, "test")?;
    st.jsonl(&format!("tasks/train_{tag}.jsonl"), &train_tasks)?;
    st.jsonl(&format!("tasks/test_{tag}.jsonl"), &test_tasks)?;
    let det_train = detection_tier(cfg, &views.general, &split, "train")?;
    let det_test = detection_tier(cfg, &views.general, &split, "test")?;
    st.jsonl(&format!("tasks/detection_train_{tag}.jsonl"), &det_train)?;
    st.jsonl(&format!("tasks/detection_test_{tag}.jsonl"), &det_test)?;

    let words = label_words(&train_tasks);
    let captions = template_captions(&train_tasks, derive_seed(cfg.seed, &[&"captions"]));
    let mcq = emit_conversations(&train_tasks, Stage::MatchMcq, None, &words)?;
    let cap = emit_conversations(&train_tasks, Stage::Caption, Some(&captions), &words)?;
    st.jsonl("conversations/train_stage1_mcq.jsonl", &mcq)?;
    st.jsonl("conversations/train_stage2_caption.jsonl", &cap)?;

    let fusion_views = FusionViews::new(&views.tokens, &expert);
    let ah = &cfg.adapter;
    let init = FusionAdapter::init(expert.dimension(), views.general_token_dim()?, ah.attention_temperature, ah.seed)?;
    let (adapter, adapter_log) = train_adapter(&init, &train_tasks, &fusion_views, ah)?;
    st.write_with("adapter/adapter.ilrc", |p| adapter.save(p, Some(ah.seed)))?;
    st.json("adapter/train_log.json", &adapter_log)?;

    let general_m = EmbeddingMatcher {
        name: GENERAL.into(),
        set: &views.general,
    };
    let expert_m = EmbeddingMatcher {
        name: EXPERT.into(),
        set: &expert,
    };
    let fused_m = FusedMatcher {
        name: FUSED.into(),
        adapter: &adapter,
        views: &fusion_views,
    };
    let matchers: [&dyn Matcher; 3] = [&general_m, &expert_m, &fused_m];

    let caption_score = match &cfg.inputs.captions {
        Some(p) => Some(score_captions(&read_jsonl::<CaptionPair>(p)?)?),
        None => None,
    };

    let sweep_params = GalleryParams {
        k: cfg.k,
        tau: cfg.tau,
        n_tasks: cfg.n_tasks,
        seed: derive_seed(cfg.seed, &[&"sweep"]),
        rule: cfg.distractor_rule,
    };
    let sweep = sweep_difficulty(
        &views.general,
        &split.test_instances,
        &sweep_params,
        &cfg.taus,
        &matchers,
        GENERAL,
        EXPERT,
    )?;

    let mut reports = BTreeMap::new();
    let mut thresholds = BTreeMap::new();
    for m in matchers {
        let log = predictions(m, &test_tasks)?;
        st.write_with(&format!("predictions/{}_{tag}.jsonl", m.name()), |p| log.save(p))?;
        let mut report = EvalReport::from_matching(m.name(), score_matching(&test_tasks, &log)?);
        let threshold = calibrate_threshold(m, &det_train)?;
        let det_log = detection_predictions(m, &det_test, threshold)?;
        st.write_with(&format!("predictions/{}_detection_{tag}.jsonl", m.name()), |p| det_log.save(p))?;
        report.detection = Some(score_detection(&det_test, &det_log, cfg.detection.weighting)?);
        report.caption = caption_score;
        report.sweep = sweep.report_entry(m.name());
        thresholds.insert(m.name().to_string(), threshold);
        reports.insert(m.name().to_string(), report);
    }

    let report = PipelineReport {
        tool_version: TOOL_VERSION.into(),
        config_hash: hash.clone(),
        seed: cfg.seed,
        split: SplitSummary {
            n_train_instances: split.train_instances.len(),
            n_test_instances: split.test_instances.len(),
            disjoint: split.is_disjoint(),
        },
        tau: cfg.tau,
        n_test_tasks: test_tasks.len(),
        relaxed_test_tasks: test_tasks.iter().filter(|t| t.relaxed).count(),
        matchers: reports,
        detection_thresholds: thresholds,
        sweep,
        expert_training: expert_log,
        adapter_training: adapter_log,
    };
    st.json("report.json", &report)?;
    st.text("report.txt", &render_report(&report))?;
    st.json("sweep.json", &report.sweep)?;
    st.json("plot_data.json", &sweep_plot_data(&report.sweep))?;

    let manifest = Manifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: hash,
        seed: cfg.seed,
        artifacts: st.artifacts.clone(),
    };
    write_json(&st.root.join("manifest.json"), &manifest)?;
    Ok((report, manifest))
}

impl Views {
    fn general_token_dim(&self) -> Result<usize> {
        self.tokens
            .first()
            .map(|m| m.dim())
            .ok_or_else(|| Error::EmptySet("token maps".into()))
    }
}

pub fn render_report(report: &PipelineReport) -> String {
    let mut s = format!(
        "ilrkit {} | config {} | seed {}\n\nMatching accuracy (%) on the held-out tau={:.2} tier ({} tasks, {} relaxed)\n\n",
        report.tool_version,
        &report.config_hash[..12],
        report.seed,
        report.tau,
        report.n_test_tasks,
        report.relaxed_test_tasks
    );
    let reports: Vec<&EvalReport> = report.matchers.values().collect();
    s.push_str(&render_matching_table(&reports));
    s.push_str("\nDetection accuracy (%)\n\n");
    let det: Vec<(&str, &crate::evalkit::DetectionScore)> = report
        .matchers
        .iter()
        .filter_map(|(n, r)| r.detection.as_ref().map(|d| (n.as_str(), d)))
        .collect();
    s.push_str(&render_detection_table(&det));
    s.push_str(&format!(
        "\nDifficulty sweep, gap = {} - {} (points)\n\n",
        report.sweep.contender, report.sweep.baseline
    ));
    s.push_str(&render_sweep_table(&report.sweep));
    s
}
