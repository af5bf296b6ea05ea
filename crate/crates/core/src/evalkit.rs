//! Scoring and reporting: per-category matching accuracy, detection
//! accuracy, caption alignment and difficulty sweeps.
//!
//! Accuracies are stored as fractions in `[0, 1]` and rendered as
//! percentages in the text tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataengine::{build_gallery_tasks_per_category, parse_answer, DetectionTask, GalleryParams, GalleryTask};
use crate::embedstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fusion::{pooled_fused, FusionAdapter, FusionViews};
use crate::io::{read_jsonl, write_jsonl};
use crate::simcore::{match_by_similarity, similarity, SimilarityKind};

/// One line of a prediction log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task_id: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionLog {
    pub model_name: String,
    pub entries: BTreeMap<String, String>,
}

impl PredictionLog {
    pub fn from_records(model_name: impl Into<String>, records: Vec<PredictionRecord>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for r in records {
            if entries.contains_key(&r.task_id) {
                return Err(Error::invalid(format!("duplicate task_id {:?} in prediction log", r.task_id)));
            }
            entries.insert(r.task_id, r.response);
        }
        Ok(PredictionLog {
            model_name: model_name.into(),
            entries,
        })
    }

    pub fn load(path: &Path, model_name: impl Into<String>) -> Result<Self> {
        Self::from_records(model_name, read_jsonl(path)?)
    }

    pub fn records(&self) -> Vec<PredictionRecord> {
        self.entries
            .iter()
            .map(|(task_id, response)| PredictionRecord {
                task_id: task_id.clone(),
                response: response.clone(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records())
    }

    fn response(&self, task_id: &str) -> Result<&str> {
        self.entries
            .get(task_id)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("no logged response for task {task_id:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub n: usize,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingScore {
    pub per_category: BTreeMap<String, CategoryScore>,
    /// Unweighted mean of the per-category accuracies.
    pub average: f64,
}

pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-category accuracy of `log` on `tasks`; unparseable responses count as
/// wrong and are tallied separately.
pub fn score_matching(tasks: &[GalleryTask], log: &PredictionLog) -> Result<MatchingScore> {
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks to score"));
    }
    // (correct, n, parse_failures)
    let mut tally: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for t in tasks {
        let response = log.response(&t.task_id)?;
        let entry = tally.entry(&t.category).or_default();
        entry.1 += 1;
        match parse_answer(response, t.gallery_ids.len()) {
            Ok(i) if i == t.answer_index => entry.0 += 1,
            Ok(_) => {}
            Err(_) => entry.2 += 1,
        }
    }
    let per_category: BTreeMap<String, CategoryScore> = tally
        .into_iter()
        .map(|(c, (correct, n, parse_failures))| {
            (
                c.to_string(),
                CategoryScore {
                    accuracy: correct as f64 / n as f64,
                    n,
                    parse_failures,
                },
            )
        })
        .collect();
    let accs: Vec<f64> = per_category.values().map(|s| s.accuracy).collect();
    Ok(MatchingScore {
        average: macro_average(&accs),
        per_category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionWeighting {
    /// (n⁺·pos + n⁻·neg) / (n⁺ + n⁻)
    #[default]
    SampleCount,
    /// (pos + neg) / 2
    EqualMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub positive: f64,
    pub negative: f64,
    pub weighted: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub parse_failures: usize,
}

/// `Some(true)` for a "yes…" response, `Some(false)` for "no…".
pub fn parse_yes_no(response: &str) -> Option<bool> {
    let r = response.trim_start().to_ascii_lowercase();
    if r.starts_with("yes") {
        Some(true)
    } else if r.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

pub fn combine_detection(
    positive: f64,
    negative: f64,
    n_positive: usize,
    n_negative: usize,
    weighting: DetectionWeighting,
) -> f64 {
    match weighting {
        DetectionWeighting::EqualMean => (positive + negative) / 2.0,
        DetectionWeighting::SampleCount => {
            let n = (n_positive + n_negative) as f64;
            if n == 0.0 {
                0.0
            } else {
                (n_positive as f64 * positive + n_negative as f64 * negative) / n
            }
        }
    }
}

pub fn score_detection(
    tasks: &[DetectionTask],
    log: &PredictionLog,
    weighting: DetectionWeighting,
) -> Result<DetectionScore> {
    if tasks.is_empty() {
        return Err(Error::invalid("no detection tasks to score"));
    }
    let (mut pos_ok, mut n_pos, mut neg_ok, mut n_neg, mut failures) = (0, 0, 0, 0, 0);
    for t in tasks {
        let said = parse_yes_no(log.response(&t.task_id)?);
        if said.is_none() {
            failures += 1;
        }
        let correct = said == Some(t.is_match);
        if t.is_match {
            n_pos += 1;
            pos_ok += correct as usize;
        } else {
            n_neg += 1;
            neg_ok += correct as usize;
        }
    }
    let rate = |ok: usize, n: usize| if n == 0 { 0.0 } else { ok as f64 / n as f64 };
    let positive = rate(pos_ok, n_pos);
    let negative = rate(neg_ok, n_neg);
    Ok(DetectionScore {
        positive,
        negative,
        weighted: combine_detection(positive, negative, n_pos, n_neg, weighting),
        n_positive: n_pos,
        n_negative: n_neg,
        parse_failures: failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub caption_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
    pub reference_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub image_alignment: f64,
    pub text_alignment: f64,
}

/// Mean of `100·max(cos, 0)` against images and against reference captions.
pub fn score_captions(pairs: &[CaptionPair]) -> Result<CaptionScore> {
    let first = pairs.first().ok_or_else(|| Error::invalid("no caption pairs"))?;
    let (dc, di, dr) = (
        first.caption_embedding.len(),
        first.image_embedding.len(),
        first.reference_embedding.len(),
    );
    let (mut img, mut txt) = (0.0, 0.0);
    for (i, p) in pairs.iter().enumerate() {
        for (name, v, d) in [
            ("caption_embedding", &p.caption_embedding, dc),
            ("image_embedding", &p.image_embedding, di),
            ("reference_embedding", &p.reference_embedding, dr),
        ] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    location: format!("caption pair {i}: {name}"),
                    expected: d,
                    found: v.len(),
                });
            }
        }
        img += 100.0 * similarity(&p.caption_embedding, &p.image_embedding, SimilarityKind::Cosine)?.max(0.0);
        txt += 100.0 * similarity(&p.caption_embedding, &p.reference_embedding, SimilarityKind::Cosine)?.max(0.0);
    }
    let n = pairs.len() as f64;
    Ok(CaptionScore {
        image_alignment: img / n,
        text_alignment: txt / n,
    })
}

/// A matching strategy: gallery task → predicted 0-based index.
pub trait Matcher: Sync {
    fn name(&self) -> &str;
    fn predict(&self, task: &GalleryTask) -> Result<usize>;
    /// Similarity of two images under this strategy (used for detection).
    fn pair_score(&self, a: &str, b: &str) -> Result<f64>;
}

/// Cosine nearest-gallery matching on one embedding view.
pub struct EmbeddingMatcher<'a> {
    pub name: String,
    pub set: &'a EmbeddingSet,
}

impl Matcher for EmbeddingMatcher<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, task: &GalleryTask) -> Result<usize> {
        let q = &self.set.require(&task.query_id)?.vector;
        let g = task
            .gallery_ids
            .iter()
            .map(|id| Ok(self.set.require(id)?.vector.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(match_by_similarity(q, &g, SimilarityKind::Cosine)?.best_index)
    }

    fn pair_score(&self, a: &str, b: &str) -> Result<f64> {
        similarity(
            &self.set.require(a)?.vector,
            &self.set.require(b)?.vector,
            SimilarityKind::Cosine,
        )
    }
}

/// Matching on pooled fused token maps.
pub struct FusedMatcher<'a> {
    pub name: String,
    pub adapter: &'a FusionAdapter,
    pub views: &'a FusionViews,
}

impl Matcher for FusedMatcher<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, task: &GalleryTask) -> Result<usize> {
        self.views.predict(self.adapter, task)
    }

    fn pair_score(&self, a: &str, b: &str) -> Result<f64> {
        let pa = pooled_fused(self.adapter, &self.views.item(a)?)?;
        let pb = pooled_fused(self.adapter, &self.views.item(b)?)?;
        similarity(&pa, &pb, SimilarityKind::Cosine)
    }
}

/// Run `matcher` over `tasks` and log its answers as "Image n" responses.
pub fn predictions(matcher: &dyn Matcher, tasks: &[GalleryTask]) -> Result<PredictionLog> {
    let records = tasks
        .par_iter()
        .map(|t| {
            Ok(PredictionRecord {
                task_id: t.task_id.clone(),
                response: format!("Image {}", matcher.predict(t)? + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionLog::from_records(matcher.name(), records)
}

pub fn evaluate_matcher(matcher: &dyn Matcher, tasks: &[GalleryTask]) -> Result<MatchingScore> {
    score_matching(tasks, &predictions(matcher, tasks)?)
}

/// Fraction of tasks answered correctly, pooled over categories.
pub fn pooled_accuracy(matcher: &dyn Matcher, tasks: &[GalleryTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks to score"));
    }
    let hits = tasks
        .par_iter()
        .map(|t| Ok((matcher.predict(t)? == t.answer_index) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / tasks.len() as f64)
}

fn detection_scores(matcher: &dyn Matcher, tasks: &[DetectionTask]) -> Result<Vec<f64>> {
    tasks
        .par_iter()
        .map(|t| matcher.pair_score(&t.query_id, &t.gallery_id))
        .collect()
}

/// Similarity threshold maximizing sample-count accuracy of "yes iff
/// score > threshold" on `tasks`; the lowest such cut wins ties.
pub fn calibrate_threshold(matcher: &dyn Matcher, tasks: &[DetectionTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("no detection tasks to calibrate on"));
    }
    let scores = detection_scores(matcher, tasks)?;
    let mut pairs: Vec<(f64, bool)> = scores.into_iter().zip(tasks.iter().map(|t| t.is_match)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // threshold below everything: all "yes"
    let mut correct = pairs.iter().filter(|p| p.1).count();
    let (mut best, mut best_cut) = (correct, pairs[0].0 - 1.0);
    for i in 0..pairs.len() {
        correct = if pairs[i].1 { correct - 1 } else { correct + 1 };
        if i + 1 < pairs.len() && pairs[i + 1].0 == pairs[i].0 {
            continue;
        }
        if correct > best {
            best = correct;
            best_cut = match pairs.get(i + 1) {
                Some(next) => (pairs[i].0 + next.0) / 2.0,
                None => pairs[i].0 + 1.0,
            };
        }
    }
    Ok(best_cut)
}

/// Log "Yes"/"No" answers from thresholding the matcher's pair score.
pub fn detection_predictions(matcher: &dyn Matcher, tasks: &[DetectionTask], threshold: f64) -> Result<PredictionLog> {
    let scores = detection_scores(matcher, tasks)?;
    let records = tasks
        .iter()
        .zip(scores)
        .map(|(t, s)| PredictionRecord {
            task_id: t.task_id.clone(),
            response: if s > threshold { "Yes" } else { "No" }.into(),
        })
        .collect();
    PredictionLog::from_records(matcher.name(), records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub per_category: BTreeMap<String, CategoryScore>,
    pub average: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detection: Option<DetectionScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caption: Option<CaptionScore>,
    /// τ (formatted) → macro-average accuracy.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub sweep: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_matching(model_name: impl Into<String>, score: MatchingScore) -> Self {
        EvalReport {
            model_name: model_name.into(),
            per_category: score.per_category,
            average: score.average,
            detection: None,
            caption: None,
            sweep: BTreeMap::new(),
        }
    }
}

pub fn tau_key(tau: f64) -> String {
    format!("{tau:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub accuracy: BTreeMap<String, f64>,
    pub relaxed_tasks: usize,
    /// contender − baseline
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub baseline: String,
    pub contender: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn column(&self, matcher: &str) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy[matcher]).collect()
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gap).collect()
    }

    /// Sweep column of one matcher in report form.
    pub fn report_entry(&self, matcher: &str) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter_map(|r| r.accuracy.get(matcher).map(|a| (tau_key(r.tau), *a)))
            .collect()
    }
}

/// Build one tier per τ with `params` (τ replaced) over `instances` and score
/// every matcher on it by macro-average accuracy.
pub fn sweep_difficulty(
    general: &EmbeddingSet,
    instances: &BTreeSet<String>,
    params: &GalleryParams,
    taus: &[f64],
    matchers: &[&dyn Matcher],
    baseline: &str,
    contender: &str,
) -> Result<SweepTable> {
    if taus.len() < 2 {
        return Err(Error::Config(vec!["sweep needs at least two tau values".into()]));
    }
    for name in [baseline, contender] {
        if !matchers.iter().any(|m| m.name() == name) {
            return Err(Error::Config(vec![format!("sweep matcher {name:?} not supplied")]));
        }
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let tasks = build_gallery_tasks_per_category(general, instances, &GalleryParams { tau, ..*params })?;
        let mut accuracy = BTreeMap::new();
        for m in matchers {
            accuracy.insert(m.name().to_string(), evaluate_matcher(*m, &tasks)?.average);
        }
        let gap = accuracy[contender] - accuracy[baseline];
        rows.push(SweepRow {
            tau,
            accuracy,
            relaxed_tasks: tasks.iter().filter(|t| t.relaxed).count(),
            gap,
        });
    }
    Ok(SweepTable {
        baseline: baseline.to_string(),
        contender: contender.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// x = τ, y = accuracy per matcher, plus the gap series.
pub fn sweep_plot_data(table: &SweepTable) -> Vec<PlotSeries> {
    let x: Vec<f64> = table.rows.iter().map(|r| r.tau).collect();
    let names: BTreeSet<&String> = table.rows.iter().flat_map(|r| r.accuracy.keys()).collect();
    let mut out: Vec<PlotSeries> = names
        .into_iter()
        .map(|n| PlotSeries {
            name: n.clone(),
            x: x.clone(),
            y: table.column(n),
        })
        .collect();
    out.push(PlotSeries {
        name: format!("gap({} - {})", table.contender, table.baseline),
        x,
        y: table.gaps(),
    });
    out
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn render_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        line(&mut out, r);
    }
    out
}

/// Model × category accuracy table with an average column.
pub fn render_matching_table(reports: &[&EvalReport]) -> String {
    let cats: BTreeSet<&String> = reports.iter().flat_map(|r| r.per_category.keys()).collect();
    let mut header = vec![String::new()];
    header.extend(cats.iter().map(|c| c.to_string()));
    header.push("Avg".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model_name.clone()];
            row.extend(
                cats.iter()
                    .map(|c| r.per_category.get(*c).map_or("-".into(), |s| pct(s.accuracy))),
            );
            row.push(pct(r.average));
            row
        })
        .collect();
    render_grid(&header, &rows)
}

pub fn render_detection_table(rows: &[(&str, &DetectionScore)]) -> String {
    let header = ["", "Positive", "Negative", "Weighted"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, s)| vec![name.to_string(), pct(s.positive), pct(s.negative), pct(s.weighted)])
        .collect();
    render_grid(&header, &body)
}

pub fn render_sweep_table(table: &SweepTable) -> String {
    let names: BTreeSet<&String> = table.rows.iter().flat_map(|r| r.accuracy.keys()).collect();
    let mut header = vec!["tau".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    header.push("gap".into());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![format!("{:.2}", r.tau)];
            row.extend(names.iter().map(|n| pct(r.accuracy[*n])));
            row.push(format!("{:+.1}", 100.0 * r.gap));
            row
        })
        .collect();
    render_grid(&header, &rows)
}
