//! Difficulty-controlled benchmark construction.
//!
//! Galleries contain the query's positive plus `k − 1` distractors from
//! other instances whose general-view cosine to the query exceeds `tau`.
//! Every task derives its own RNG from `(seed, category, ordinal)`, so task
//! lists do not depend on how construction is scheduled.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_for};
use crate::simcore::{similarity, SimilarityKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryTask {
    pub task_id: String,
    pub category: String,
    pub query_id: String,
    pub gallery_ids: Vec<String>,
    pub answer_index: usize,
    pub tau: f64,
    pub relaxed: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTask {
    pub task_id: String,
    pub category: String,
    pub query_id: String,
    pub gallery_id: String,
    pub is_match: bool,
    pub tau: f64,
    pub relaxed: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_instances: BTreeSet<String>,
    pub test_instances: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

impl FromStr for SplitSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSide::Train),
            "test" => Ok(SplitSide::Test),
            other => Err(Error::invalid(format!("unknown split side {other:?}"))),
        }
    }
}

impl SplitManifest {
    pub fn side(&self, side: SplitSide) -> &BTreeSet<String> {
        match side {
            SplitSide::Train => &self.train_instances,
            SplitSide::Test => &self.test_instances,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.train_instances.is_disjoint(&self.test_instances)
    }
}

/// How distractors are drawn from the above-threshold pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorRule {
    /// Uniform sample from the candidates above `tau`.
    #[default]
    Uniform,
    /// The `k − 1` most similar candidates above `tau`.
    TopSimilar,
}

impl FromStr for DistractorRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DistractorRule::Uniform),
            "top" | "top_similar" => Ok(DistractorRule::TopSimilar),
            other => Err(Error::invalid(format!("unknown distractor rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalleryParams {
    pub k: usize,
    pub tau: f64,
    pub n_tasks: usize,
    pub seed: u64,
    pub rule: DistractorRule,
}

pub fn make_split(set: &EmbeddingSet, test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(vec![format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )]));
    }
    let mut instances: Vec<String> = set.instance_index().keys().cloned().collect();
    if instances.len() < 2 {
        return Err(Error::invalid("a split needs at least two instances"));
    }
    instances.shuffle(&mut rng_for(seed, &[&"split"]));
    let n = instances.len();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test_instances = instances[..n_test].iter().cloned().collect();
    let train_instances = instances[n_test..].iter().cloned().collect();
    Ok(SplitManifest {
        train_instances,
        test_instances,
    })
}

/// Images of `split_side` instances, in set order, with their instance ids.
struct SideView<'a> {
    set: &'a EmbeddingSet,
    images: Vec<usize>,
    eligible_queries: Vec<usize>,
}

impl<'a> SideView<'a> {
    fn new(set: &'a EmbeddingSet, side: &BTreeSet<String>) -> Result<Self> {
        let images: Vec<usize> = set
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| side.contains(&r.instance_id))
            .map(|(i, _)| i)
            .collect();
        let eligible_queries: Vec<usize> = images
            .iter()
            .copied()
            .filter(|&i| set.instance_index()[&set.records()[i].instance_id].len() >= 2)
            .collect();
        if eligible_queries.is_empty() {
            return Err(Error::invalid(
                "no instance on this split side has at least two images",
            ));
        }
        Ok(SideView {
            set,
            images,
            eligible_queries,
        })
    }

    fn positives(&self, query: usize) -> Vec<usize> {
        let rec = &self.set.records()[query];
        self.set.instance_index()[&rec.instance_id]
            .iter()
            .map(|id| self.set.position(id).expect("indexed image"))
            .filter(|&i| i != query)
            .collect()
    }

    /// Other-instance images with their general cosine to the query.
    fn scored_others(&self, query: usize) -> Result<Vec<(usize, f64)>> {
        let recs = self.set.records();
        let q = &recs[query];
        self.images
            .iter()
            .filter(|&&i| recs[i].instance_id != q.instance_id)
            .map(|&i| {
                similarity(&q.vector, &recs[i].vector, SimilarityKind::Cosine).map(|s| (i, s))
            })
            .collect()
    }
}

/// Candidates with similarity strictly above `tau`.
pub fn candidate_pool(scored: &[(usize, f64)], tau: f64) -> Vec<usize> {
    scored.iter().filter(|(_, s)| *s > tau).map(|(i, _)| *i).collect()
}

/// Draw `need` distractors; returns (chosen, relaxed).
fn pick_distractors(
    set: &EmbeddingSet,
    scored: &[(usize, f64)],
    tau: f64,
    need: usize,
    rule: DistractorRule,
    rng: &mut impl Rng,
) -> (Vec<usize>, bool) {
    let by_similarity = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.total_cmp(&a.1).then_with(|| {
            set.records()[a.0]
                .image_id
                .cmp(&set.records()[b.0].image_id)
        })
    };
    let mut above: Vec<(usize, f64)> = scored.iter().copied().filter(|(_, s)| *s > tau).collect();
    if above.len() >= need {
        let chosen = match rule {
            DistractorRule::Uniform => above
                .choose_multiple(rng, need)
                .map(|(i, _)| *i)
                .collect(),
            DistractorRule::TopSimilar => {
                above.sort_by(by_similarity);
                above[..need].iter().map(|(i, _)| *i).collect()
            }
        };
        return (chosen, false);
    }
    let mut below: Vec<(usize, f64)> = scored.iter().copied().filter(|(_, s)| *s <= tau).collect();
    below.sort_by(by_similarity);
    let mut chosen: Vec<usize> = above.iter().map(|(i, _)| *i).collect();
    chosen.extend(below[..need - chosen.len()].iter().map(|(i, _)| *i));
    (chosen, true)
}

/// Build `n_tasks` gallery tasks over the images of `split_side` instances.
///
/// Task ids are `{category_label}-g{ordinal:05}` where `category_label` is
/// the query's category; the per-task seed is derived from
/// `(params.seed, scope, ordinal)`.
pub fn build_gallery_tasks(
    general: &EmbeddingSet,
    split_side: &BTreeSet<String>,
    params: &GalleryParams,
) -> Result<Vec<GalleryTask>> {
    build_gallery_tasks_scoped(general, split_side, params, "all")
}

fn build_gallery_tasks_scoped(
    general: &EmbeddingSet,
    split_side: &BTreeSet<String>,
    params: &GalleryParams,
    scope: &str,
) -> Result<Vec<GalleryTask>> {
    if params.k < 2 {
        return Err(Error::Config(vec![format!(
            "k must be >= 2 for gallery tasks (got {}); use detection tasks for k = 1",
            params.k
        )]));
    }
    let view = SideView::new(general, split_side)?;
    (0..params.n_tasks)
        .into_par_iter()
        .map(|ordinal| {
            let seed = derive_seed(params.seed, &[&"gallery", &scope, &ordinal]);
            let mut rng = rng_for(seed, &[]);
            let query = *view.eligible_queries.choose(&mut rng).expect("non-empty");
            let positive = *view.positives(query).choose(&mut rng).expect(">= 2 images");
            let scored = view.scored_others(query)?;
            let need = params.k - 1;
            if scored.len() < need {
                return Err(Error::invalid(format!(
                    "gallery of size {} needs {need} distractors but only {} other-instance images exist",
                    params.k,
                    scored.len()
                )));
            }
            let (distractors, relaxed) =
                pick_distractors(general, &scored, params.tau, need, params.rule, &mut rng);
            let mut gallery: Vec<usize> = Vec::with_capacity(params.k);
            gallery.push(positive);
            gallery.extend(distractors);
            gallery.shuffle(&mut rng);
            let answer_index = gallery.iter().position(|&i| i == positive).expect("positive");
            let recs = general.records();
            Ok(GalleryTask {
                task_id: format!("{scope}-g{ordinal:05}"),
                category: recs[query].category.clone(),
                query_id: recs[query].image_id.clone(),
                gallery_ids: gallery.iter().map(|&i| recs[i].image_id.clone()).collect(),
                answer_index,
                tau: params.tau,
                relaxed,
                seed,
            })
        })
        .collect()
}

/// `n_tasks` gallery tasks for each category present on the split side,
/// with distractors restricted to the query's category.
pub fn build_gallery_tasks_per_category(
    general: &EmbeddingSet,
    split_side: &BTreeSet<String>,
    params: &GalleryParams,
) -> Result<Vec<GalleryTask>> {
    let mut out = Vec::new();
    for (category, side) in side_by_category(general, split_side) {
        out.extend(build_gallery_tasks_scoped(general, &side, params, &category)?);
    }
    Ok(out)
}

fn side_by_category(
    set: &EmbeddingSet,
    split_side: &BTreeSet<String>,
) -> BTreeMap<String, BTreeSet<String>> {
    let mut by_cat: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (inst, cat) in set.instance_categories() {
        if split_side.contains(&inst) {
            by_cat.entry(cat).or_default().insert(inst);
        }
    }
    by_cat
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub tau: f64,
    pub n_tasks: usize,
    pub positive_rate: f64,
    pub seed: u64,
}

pub fn build_detection_tasks(
    general: &EmbeddingSet,
    split_side: &BTreeSet<String>,
    params: &DetectionParams,
) -> Result<Vec<DetectionTask>> {
    build_detection_tasks_scoped(general, split_side, params, "all")
}

pub fn build_detection_tasks_per_category(
    general: &EmbeddingSet,
    split_side: &BTreeSet<String>,
    params: &DetectionParams,
) -> Result<Vec<DetectionTask>> {
    let mut out = Vec::new();
    for (category, side) in side_by_category(general, split_side) {
        out.extend(build_detection_tasks_scoped(general, &side, params, &category)?);
    }
    Ok(out)
}

fn build_detection_tasks_scoped(
    general: &EmbeddingSet,
    split_side: &BTreeSet<String>,
    params: &DetectionParams,
    scope: &str,
) -> Result<Vec<DetectionTask>> {
    if !(0.0..=1.0).contains(&params.positive_rate) {
        return Err(Error::Config(vec![format!(
            "positive_rate must be in [0, 1], got {}",
            params.positive_rate
        )]));
    }
    let view = SideView::new(general, split_side)?;
    (0..params.n_tasks)
        .into_par_iter()
        .map(|ordinal| {
            let seed = derive_seed(params.seed, &[&"detection", &scope, &ordinal]);
            let mut rng = rng_for(seed, &[]);
            let query = *view.eligible_queries.choose(&mut rng).expect("non-empty");
            let is_match = rng.random_bool(params.positive_rate);
            let (gallery, relaxed) = if is_match {
                (*view.positives(query).choose(&mut rng).expect(">= 2"), false)
            } else {
                let scored = view.scored_others(query)?;
                if scored.is_empty() {
                    return Err(Error::invalid(
                        "negative detection task needs at least one other-instance image",
                    ));
                }
                let (chosen, relaxed) = pick_distractors(
                    general,
                    &scored,
                    params.tau,
                    1,
                    DistractorRule::Uniform,
                    &mut rng,
                );
                (chosen[0], relaxed)
            };
            let recs = general.records();
            Ok(DetectionTask {
                task_id: format!("{scope}-d{ordinal:05}"),
                category: recs[query].category.clone(),
                query_id: recs[query].image_id.clone(),
                gallery_id: recs[gallery].image_id.clone(),
                is_match,
                tau: params.tau,
                relaxed,
                seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MatchMcq,
    Caption,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcq" | "match_mcq" | "stage1" => Ok(Stage::MatchMcq),
            "caption" | "stage2" => Ok(Stage::Caption),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub task_id: String,
    pub stage: Stage,
    /// Gallery images first (Image 1..K), query last.
    pub images: Vec<String>,
    pub prompt: String,
    pub target: String,
    pub answer_index: usize,
    pub category: String,
}

pub const SUBJECT_PLACEHOLDER: &str = "[SUBJECT]";

/// Default subject word for a category: "person" → "Person".
pub fn default_label_word(category: &str) -> String {
    let mut chars = category.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => "Instance".into(),
    }
}

fn gallery_listing(task: &GalleryTask) -> String {
    let mut s = String::new();
    for i in 1..=task.gallery_ids.len() {
        s.push_str(&format!("Image {i}: <image>\n"));
    }
    s.push_str("Query: <image>\n");
    s
}

pub fn emit_conversations(
    tasks: &[GalleryTask],
    stage: Stage,
    captions: Option<&HashMap<String, String>>,
    label_words: &HashMap<String, String>,
) -> Result<Vec<ConversationRecord>> {
    tasks
        .iter()
        .map(|task| {
            let word = label_words
                .get(&task.category)
                .cloned()
                .unwrap_or_else(|| default_label_word(&task.category));
            let mut images = task.gallery_ids.clone();
            images.push(task.query_id.clone());
            let k = task.gallery_ids.len();
            let (prompt, target) = match stage {
                Stage::MatchMcq => (
                    format!(
                        "{}Which gallery image (Image 1 to Image {k}) shows the same {} as the query image? Answer with \"Image n\".",
                        gallery_listing(task),
                        word.to_lowercase()
                    ),
                    format!("Image {}", task.answer_index + 1),
                ),
                Stage::Caption => {
                    let caption = captions
                        .and_then(|c| c.get(&task.query_id))
                        .ok_or_else(|| {
                            Error::invalid(format!(
                                "missing caption for query {:?} (task {})",
                                task.query_id, task.task_id
                            ))
                        })?;
                    let count = caption.matches(SUBJECT_PLACEHOLDER).count();
                    if count != 1 {
                        return Err(Error::invalid(format!(
                            "caption for {:?} must contain exactly one {SUBJECT_PLACEHOLDER} placeholder, found {count}",
                            task.query_id
                        )));
                    }
                    let label = format!("[{word} {}]", task.answer_index + 1);
                    (
                        format!(
                            "{}Describe the query image. Refer to the matching gallery {} by its bracketed label, e.g. [{word} n].",
                            gallery_listing(task),
                            word.to_lowercase()
                        ),
                        caption.replacen(SUBJECT_PLACEHOLDER, &label, 1),
                    )
                }
            };
            Ok(ConversationRecord {
                task_id: task.task_id.clone(),
                stage,
                images,
                prompt,
                target,
                answer_index: task.answer_index,
                category: task.category.clone(),
            })
        })
        .collect()
}

const CAPTION_TEMPLATES: [&str; 6] = [
    "[SUBJECT] walks into the room wearing a blue shirt.",
    "[SUBJECT] is seen from the side near a window.",
    "[SUBJECT] appears in the center of a cluttered scene.",
    "A close-up view shows [SUBJECT] under bright light.",
    "[SUBJECT] sits on a wooden table next to a cup.",
    "In the background, [SUBJECT] is partially occluded.",
];

/// Placeholder captions for synthetic data, one per distinct query image.
pub fn template_captions(tasks: &[GalleryTask], seed: u64) -> HashMap<String, String> {
    tasks
        .iter()
        .map(|t| {
            let mut rng = rng_for(seed, &[&"caption", &t.query_id]);
            let tpl = CAPTION_TEMPLATES.choose(&mut rng).expect("templates");
            (t.query_id.clone(), (*tpl).to_string())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ParseFailure {
    #[error("no answer found")]
    NoMatch,
    #[error("answer {0} out of range")]
    OutOfRange(usize),
}

fn image_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bimage\s*#?\s*(\d+)").expect("valid regex"))
}

/// First "Image n" (case-insensitive) or a bare integer response, as a
/// 0-based gallery index.
pub fn parse_answer(response: &str, k: usize) -> std::result::Result<usize, ParseFailure> {
    let check = |n: usize| {
        if (1..=k).contains(&n) {
            Ok(n - 1)
        } else {
            Err(ParseFailure::OutOfRange(n))
        }
    };
    if let Some(cap) = image_pattern().captures(response) {
        let n: usize = cap[1].parse().map_err(|_| ParseFailure::NoMatch)?;
        return check(n);
    }
    let bare = response.trim().trim_end_matches('.').trim();
    if !bare.is_empty() && bare.chars().all(|c| c.is_ascii_digit()) {
        let n: usize = bare.parse().map_err(|_| ParseFailure::NoMatch)?;
        return check(n);
    }
    Err(ParseFailure::NoMatch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::EmbeddingRecord;

    fn set_from(vectors: &[(&str, &str, Vec<f32>)]) -> EmbeddingSet {
        EmbeddingSet::new(
            "general",
            vectors
                .iter()
                .map(|(img, inst, v)| EmbeddingRecord {
                    image_id: img.to_string(),
                    instance_id: inst.to_string(),
                    category: "person".into(),
                    vector: v.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn instances(n: usize) -> EmbeddingSet {
        let mut v = Vec::new();
        for i in 0..n {
            v.push(EmbeddingRecord {
                image_id: format!("im{i}"),
                instance_id: format!("in{i:03}"),
                category: "pet".into(),
                vector: vec![1.0, i as f32],
            });
        }
        EmbeddingSet::new("g", v).unwrap()
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let set = instances(10);
        let a = make_split(&set, 0.3, 5).unwrap();
        assert_eq!(a.test_instances.len(), 3);
        assert_eq!(a.train_instances.len(), 7);
        assert!(a.is_disjoint());
        assert_eq!(a, make_split(&set, 0.3, 5).unwrap());

        let big = instances(100);
        assert_ne!(
            make_split(&big, 0.3, 1).unwrap(),
            make_split(&big, 0.3, 2).unwrap()
        );
        assert!(make_split(&instances(1), 0.3, 1).is_err());
        assert!(make_split(&set, 1.0, 1).is_err());
    }

    fn all_side(set: &EmbeddingSet) -> BTreeSet<String> {
        set.instance_index().keys().cloned().collect()
    }

    #[test]
    fn vacuous_threshold_k2() {
        let set = set_from(&[
            ("a1", "A", vec![1.0, 0.0]),
            ("a2", "A", vec![0.9, 0.1]),
            ("b1", "B", vec![-1.0, 0.0]),
            ("c1", "C", vec![0.0, 1.0]),
        ]);
        let params = GalleryParams {
            k: 2,
            tau: -1.0,
            n_tasks: 50,
            seed: 3,
            rule: DistractorRule::Uniform,
        };
        let tasks = build_gallery_tasks(&set, &all_side(&set), &params).unwrap();
        for t in &tasks {
            assert_eq!(t.gallery_ids.len(), 2);
            assert!(!t.relaxed);
            assert!(t.query_id.starts_with('a'));
            assert!(t.gallery_ids[t.answer_index].starts_with('a'));
            let other = &t.gallery_ids[1 - t.answer_index];
            assert!(other == "b1" || other == "c1");
        }
    }

    #[test]
    fn exact_pool_composition() {
        // Query instance A; pool above 0.5 is exactly {b1, c1} for k = 3.
        let set = set_from(&[
            ("a1", "A", vec![1.0, 0.0]),
            ("a2", "A", vec![1.0, 0.05]),
            ("b1", "B", vec![1.0, 0.3]),
            ("c1", "C", vec![1.0, -0.4]),
            ("d1", "D", vec![0.0, 1.0]),
        ]);
        let side: BTreeSet<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let params = GalleryParams {
            k: 3,
            tau: 0.5,
            n_tasks: 40,
            seed: 9,
            rule: DistractorRule::Uniform,
        };
        let tasks = build_gallery_tasks(&set, &side, &params).unwrap();
        for t in tasks.iter().filter(|t| t.query_id.starts_with('a')) {
            let mut ids = t.gallery_ids.clone();
            ids.sort();
            let positive = if t.query_id == "a1" { "a2" } else { "a1" };
            let mut expected = vec![positive.to_string(), "b1".into(), "c1".into()];
            expected.sort();
            assert_eq!(ids, expected);
            assert!(!t.relaxed);
        }
    }

    #[test]
    fn underfilled_pool_falls_back_and_flags() {
        let set = set_from(&[
            ("a1", "A", vec![1.0, 0.0]),
            ("a2", "A", vec![1.0, 0.0]),
            ("b1", "B", vec![1.0, 0.1]),
            ("c1", "C", vec![0.0, 1.0]),
            ("d1", "D", vec![-1.0, 0.2]),
        ]);
        let side: BTreeSet<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let params = GalleryParams {
            k: 3,
            tau: 0.5,
            n_tasks: 20,
            seed: 1,
            rule: DistractorRule::Uniform,
        };
        for t in build_gallery_tasks(&set, &side, &params).unwrap() {
            if t.query_id.starts_with('a') {
                assert!(t.relaxed);
                // b1 above threshold, c1 is the most similar below-threshold image
                assert!(t.gallery_ids.contains(&"b1".to_string()));
                assert!(t.gallery_ids.contains(&"c1".to_string()));
            }
        }
    }

    #[test]
    fn k_too_small_or_too_large() {
        let set = set_from(&[
            ("a1", "A", vec![1.0, 0.0]),
            ("a2", "A", vec![1.0, 0.0]),
            ("b1", "B", vec![1.0, 0.1]),
        ]);
        let side = all_side(&set);
        let mut p = GalleryParams {
            k: 1,
            tau: 0.5,
            n_tasks: 2,
            seed: 1,
            rule: DistractorRule::Uniform,
        };
        assert!(matches!(
            build_gallery_tasks(&set, &side, &p),
            Err(Error::Config(_))
        ));
        p.k = 4;
        assert!(build_gallery_tasks(&set, &side, &p).is_err());

        let singles = instances(3);
        p.k = 2;
        assert!(build_gallery_tasks(&singles, &all_side(&singles), &p).is_err());
    }

    #[test]
    fn top_similar_rule_takes_most_similar() {
        let set = set_from(&[
            ("a1", "A", vec![1.0, 0.0]),
            ("a2", "A", vec![1.0, 0.01]),
            ("b1", "B", vec![1.0, 0.1]),
            ("c1", "C", vec![1.0, 0.2]),
            ("d1", "D", vec![1.0, 0.3]),
        ]);
        let side: BTreeSet<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let params = GalleryParams {
            k: 3,
            tau: 0.5,
            n_tasks: 10,
            seed: 2,
            rule: DistractorRule::TopSimilar,
        };
        for t in build_gallery_tasks(&set, &side, &params).unwrap() {
            if t.query_id == "a1" {
                assert!(t.gallery_ids.contains(&"b1".to_string()));
                assert!(t.gallery_ids.contains(&"c1".to_string()));
            }
        }
    }

    #[test]
    fn detection_degenerate_rates() {
        let set = set_from(&[
            ("a1", "A", vec![1.0, 0.0]),
            ("a2", "A", vec![1.0, 0.1]),
            ("b1", "B", vec![1.0, 0.2]),
            ("b2", "B", vec![1.0, 0.3]),
        ]);
        let side = all_side(&set);
        let mut p = DetectionParams {
            tau: 0.5,
            n_tasks: 30,
            positive_rate: 1.0,
            seed: 4,
        };
        let inst = |id: &str| set.get(id).unwrap().instance_id.clone();
        for t in build_detection_tasks(&set, &side, &p).unwrap() {
            assert!(t.is_match);
            assert_eq!(inst(&t.query_id), inst(&t.gallery_id));
            assert_ne!(t.query_id, t.gallery_id);
        }
        p.positive_rate = 0.0;
        for t in build_detection_tasks(&set, &side, &p).unwrap() {
            assert!(!t.is_match);
            assert_ne!(inst(&t.query_id), inst(&t.gallery_id));
        }
        p.positive_rate = 1.5;
        assert!(build_detection_tasks(&set, &side, &p).is_err());
    }

    fn toy6() -> EmbeddingSet {
        set_from(&[
            ("a1", "A", vec![1.0, 0.0, 0.0]),
            ("a2", "A", vec![0.9, 0.3, 0.0]),
            ("b1", "B", vec![0.8, 0.5, 0.1]),
            ("b2", "B", vec![0.1, 1.0, 0.0]),
            ("c1", "C", vec![0.7, -0.6, 0.2]),
            ("c2", "C", vec![0.0, 0.2, 1.0]),
        ])
    }

    fn cos_oracle(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn toy_pool_matches_pairwise_scan_over_many_seeds() {
        let set = toy6();
        let side = all_side(&set);
        let recs = set.records();
        for seed in 0..1000u64 {
            let params = GalleryParams {
                k: 2,
                tau: 0.5,
                n_tasks: 1,
                seed,
                rule: DistractorRule::Uniform,
            };
            let t = &build_gallery_tasks(&set, &side, &params).unwrap()[0];
            let q = set.get(&t.query_id).unwrap();
            let mut oracle_pool: Vec<&str> = recs
                .iter()
                .filter(|r| r.instance_id != q.instance_id)
                .filter(|r| cos_oracle(&q.vector, &r.vector) > 0.5)
                .map(|r| r.image_id.as_str())
                .collect();
            oracle_pool.sort();

            let qi = set.position(&t.query_id).unwrap();
            let view = SideView::new(&set, &side).unwrap();
            let mut pool: Vec<&str> = candidate_pool(&view.scored_others(qi).unwrap(), 0.5)
                .into_iter()
                .map(|i| recs[i].image_id.as_str())
                .collect();
            pool.sort();
            assert_eq!(pool, oracle_pool);

            assert!(!t.gallery_ids.contains(&t.query_id));
            let same: Vec<usize> = t
                .gallery_ids
                .iter()
                .enumerate()
                .filter(|(_, g)| set.get(g).unwrap().instance_id == q.instance_id)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(same, vec![t.answer_index]);
            assert_eq!(t.relaxed, oracle_pool.is_empty());
            if !t.relaxed {
                let d = &t.gallery_ids[1 - t.answer_index];
                assert!(oracle_pool.contains(&d.as_str()));
            }
        }
    }

    #[test]
    fn detection_positive_fraction_binomial() {
        let set = toy6();
        let p = DetectionParams {
            tau: 0.5,
            n_tasks: 10_000,
            positive_rate: 0.5,
            seed: 11,
        };
        let tasks = build_detection_tasks(&set, &all_side(&set), &p).unwrap();
        let frac = tasks.iter().filter(|t| t.is_match).count() as f64 / tasks.len() as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
        for t in &tasks {
            let same = set.get(&t.query_id).unwrap().instance_id
                == set.get(&t.gallery_id).unwrap().instance_id;
            assert_eq!(same, t.is_match);
        }
    }

    fn task(answer_index: usize) -> GalleryTask {
        GalleryTask {
            task_id: "t1".into(),
            category: "person".into(),
            query_id: "q".into(),
            gallery_ids: (0..5).map(|i| format!("g{i}")).collect(),
            answer_index,
            tau: 0.5,
            relaxed: false,
            seed: 0,
        }
    }

    #[test]
    fn mcq_target_and_image_order() {
        let recs = emit_conversations(&[task(2)], Stage::MatchMcq, None, &HashMap::new()).unwrap();
        assert_eq!(recs[0].target, "Image 3");
        assert_eq!(recs[0].images.last().unwrap(), "q");
        assert_eq!(recs[0].images[0], "g0");
        assert!(recs[0].prompt.contains("Image 5: <image>"));
        assert_eq!(parse_answer(&recs[0].target, 5), Ok(2));
    }

    #[test]
    fn caption_target_bracketed_subject() {
        let caps: HashMap<String, String> = [(
            "q".to_string(),
            "[SUBJECT] walks into the room wearing a blue shirt.".to_string(),
        )]
        .into();
        let recs =
            emit_conversations(&[task(2)], Stage::Caption, Some(&caps), &HashMap::new()).unwrap();
        assert_eq!(recs[0].target, "[Person 3] walks into the room wearing a blue shirt.");

        let words: HashMap<String, String> = [("person".to_string(), "Guest".to_string())].into();
        let recs = emit_conversations(&[task(0)], Stage::Caption, Some(&caps), &words).unwrap();
        assert!(recs[0].target.starts_with("[Guest 1]"));
    }

    #[test]
    fn caption_errors() {
        let none: HashMap<String, String> = [("q".to_string(), "no subject".to_string())].into();
        assert!(emit_conversations(&[task(0)], Stage::Caption, Some(&none), &HashMap::new()).is_err());
        let two: HashMap<String, String> =
            [("q".to_string(), "[SUBJECT] and [SUBJECT]".to_string())].into();
        assert!(emit_conversations(&[task(0)], Stage::Caption, Some(&two), &HashMap::new()).is_err());
        assert!(emit_conversations(&[task(0)], Stage::Caption, None, &HashMap::new()).is_err());
    }

    #[test]
    fn parse_answer_formats() {
        assert_eq!(parse_answer("Image 3", 5), Ok(2));
        assert_eq!(parse_answer("The matching image is Image 5.", 5), Ok(4));
        assert_eq!(parse_answer("image 1", 5), Ok(0));
        assert_eq!(parse_answer(" 4 ", 5), Ok(3));
        assert_eq!(parse_answer("none of them", 5), Err(ParseFailure::NoMatch));
        assert_eq!(parse_answer("Image 6", 5), Err(ParseFailure::OutOfRange(6)));
        assert_eq!(parse_answer("0", 5), Err(ParseFailure::OutOfRange(0)));
        assert_eq!(parse_answer("I pick 3 of them", 5), Err(ParseFailure::NoMatch));
    }

    #[test]
    fn template_captions_have_one_placeholder() {
        let caps = template_captions(&[task(1)], 3);
        assert_eq!(caps["q"].matches(SUBJECT_PLACEHOLDER).count(), 1);
    }
}
