//! Expert fusion adapter.
//!
//! The expert vector is projected by a two-layer ReLU MLP into the token
//! space, `p = w2ᵀ·relu(w1ᵀe + b1) + b2`. Each token gets an attention score
//! `s_i = f_i·p / (T·√d)`, `A = softmax(s)`, and the fused tokens are
//! `F_i = f_i + A_i·p`.
//!
//! Training uses a similarity readout instead of a language model: the
//! query and each gallery image are mean-pooled after fusion, scored by
//! cosine over a readout temperature, and the answer is trained with
//! cross-entropy. All training math is 64-bit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataengine::GalleryTask;
use crate::embedstore::{EmbeddingSet, TokenFeatureMap};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::seeding::rng_for;
use crate::simcore::argmax;

pub const CHECKPOINT_KIND: &str = "fusion_adapter";
const POOL_GUARD: f64 = 1e-12;

/// `w1` is `d_e × h` and `w2` is `h × d`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionAdapter {
    pub d_e: usize,
    pub h: usize,
    pub d: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterHeader {
    d_e: usize,
    h: usize,
    d: usize,
    temperature: f64,
    seed: Option<u64>,
}

impl FusionAdapter {
    /// All-zero parameters with hidden width `max(d, d_e)`.
    pub fn zeros(d_e: usize, d: usize, temperature: f64) -> Result<Self> {
        check_dims(d_e, d, temperature)?;
        let h = d.max(d_e);
        Ok(FusionAdapter {
            d_e,
            h,
            d,
            w1: vec![0.0; d_e * h],
            b1: vec![0.0; h],
            w2: vec![0.0; h * d],
            b2: vec![0.0; d],
            temperature,
        })
    }

    /// Uniform in ±1/√fan_in, with the output layer scaled by 0.1.
    pub fn init(d_e: usize, d: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut a = Self::zeros(d_e, d, temperature)?;
        let mut rng = rng_for(seed, &[&"adapter-init"]);
        let b_in = 1.0 / (d_e as f64).sqrt();
        let b_out = 0.1 / (a.h as f64).sqrt();
        let mut fill = |v: &mut Vec<f64>, bound: f64| {
            v.iter_mut()
                .for_each(|x| *x = rng.random_range(-bound..bound));
        };
        fill(&mut a.w1, b_in);
        fill(&mut a.b1, b_in);
        fill(&mut a.w2, b_out);
        fill(&mut a.b2, b_out);
        Ok(a)
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// `w1, b1, w2, b2` concatenated. Temperature is not trained.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let n = v.len();
            v.copy_from_slice(&p[at..at + n]);
            at += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.temperature.is_finite() && self.params().iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let header = AdapterHeader {
            d_e: self.d_e,
            h: self.h,
            d: self.d,
            temperature: self.temperature,
            seed,
        };
        checkpoint::save(path, CHECKPOINT_KIND, &header, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (AdapterHeader, _) = checkpoint::load(path, CHECKPOINT_KIND)?;
        check_dims(h.d_e, h.d, h.temperature)?;
        let mut a = FusionAdapter {
            d_e: h.d_e,
            h: h.h,
            d: h.d,
            w1: vec![0.0; h.d_e * h.h],
            b1: vec![0.0; h.h],
            w2: vec![0.0; h.h * h.d],
            b2: vec![0.0; h.d],
            temperature: h.temperature,
        };
        if params.len() != a.n_params() {
            return Err(Error::Malformed {
                location: path.display().to_string(),
                message: format!(
                    "expected {} adapter parameters, found {}",
                    a.n_params(),
                    params.len()
                ),
            });
        }
        a.set_params(&params);
        Ok(a)
    }
}

fn check_dims(d_e: usize, d: usize, temperature: f64) -> Result<()> {
    let mut v = Vec::new();
    if d_e == 0 || d == 0 {
        v.push(format!("adapter dimensions must be >= 1 (d_e={d_e}, d={d})"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        v.push(format!("attention temperature must be > 0, got {temperature}"));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutput {
    pub fused: Vec<Vec<f64>>,
    pub attention: Vec<f64>,
    pub projected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiFusionOutput {
    pub fused: Vec<Vec<f64>>,
    pub attention: BTreeMap<String, Vec<f64>>,
    pub projected: BTreeMap<String, Vec<f64>>,
}

struct Projection {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn project_full(a: &FusionAdapter, e: &[f64]) -> Result<Projection> {
    if e.len() != a.d_e {
        return Err(Error::DimensionMismatch {
            location: "expert vector".into(),
            expected: a.d_e,
            found: e.len(),
        });
    }
    let mut pre = a.b1.clone();
    for (i, &ei) in e.iter().enumerate() {
        let row = &a.w1[i * a.h..(i + 1) * a.h];
        for (p, w) in pre.iter_mut().zip(row) {
            *p += ei * w;
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
    let mut out = a.b2.clone();
    for (j, &hj) in hidden.iter().enumerate() {
        if hj == 0.0 {
            continue;
        }
        let row = &a.w2[j * a.d..(j + 1) * a.d];
        for (o, w) in out.iter_mut().zip(row) {
            *o += hj * w;
        }
    }
    Ok(Projection { pre, hidden, out })
}

pub fn project_expert(adapter: &FusionAdapter, expert_vec: &[f64]) -> Result<Vec<f64>> {
    Ok(project_full(adapter, expert_vec)?.out)
}

pub fn tokens_f64(map: &TokenFeatureMap) -> Vec<Vec<f64>> {
    map.tokens
        .iter()
        .map(|row| row.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Attention weights and raw scores of `tokens` against `projected`.
fn attend(tokens: &[Vec<f64>], projected: &[f64], temperature: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = projected.len();
    let scale = 1.0 / (temperature * (d as f64).sqrt());
    let scores: Vec<f64> = tokens
        .iter()
        .map(|f| {
            if f.len() != d {
                return Err(Error::DimensionMismatch {
                    location: "token row".into(),
                    expected: d,
                    found: f.len(),
                });
            }
            Ok(f.iter().zip(projected).map(|(x, y)| x * y).sum::<f64>() * scale)
        })
        .collect::<Result<_>>()?;
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let attention: Vec<f64> = exps.iter().map(|e| e / z).collect();
    if attention.iter().any(|a| !a.is_finite()) {
        return Err(Error::Divergence("non-finite attention weights".into()));
    }
    Ok((attention, scores))
}

pub fn fuse_rows(adapter: &FusionAdapter, tokens: &[Vec<f64>], expert_vec: &[f64]) -> Result<FusionOutput> {
    if tokens.is_empty() {
        return Err(Error::invalid("token map has no rows"));
    }
    let projected = project_expert(adapter, expert_vec)?;
    let (attention, _) = attend(tokens, &projected, adapter.temperature)?;
    let fused = tokens
        .iter()
        .zip(&attention)
        .map(|(f, a)| f.iter().zip(&projected).map(|(x, p)| x + a * p).collect())
        .collect();
    Ok(FusionOutput {
        fused,
        attention,
        projected,
    })
}

pub fn fuse(adapter: &FusionAdapter, tokens: &TokenFeatureMap, expert_vec: &[f64]) -> Result<FusionOutput> {
    fuse_rows(adapter, &tokens_f64(tokens), expert_vec)
}

/// Sum of independent per-expert fusion terms over `active` categories.
pub fn fuse_multi(
    adapter_by_category: &BTreeMap<String, FusionAdapter>,
    tokens: &TokenFeatureMap,
    expert_vecs: &BTreeMap<String, Vec<f64>>,
    active: &BTreeSet<String>,
) -> Result<MultiFusionOutput> {
    let rows = tokens_f64(tokens);
    let mut fused = rows.clone();
    let mut attention = BTreeMap::new();
    let mut projected = BTreeMap::new();
    for cat in active {
        let adapter = adapter_by_category
            .get(cat)
            .ok_or_else(|| Error::invalid(format!("no adapter for active expert {cat:?}")))?;
        let vec = expert_vecs
            .get(cat)
            .ok_or_else(|| Error::invalid(format!("no expert vector for active expert {cat:?}")))?;
        let out = fuse_rows(adapter, &rows, vec)?;
        for (row, a) in fused.iter_mut().zip(&out.attention) {
            for (x, p) in row.iter_mut().zip(&out.projected) {
                *x += a * p;
            }
        }
        attention.insert(cat.clone(), out.attention);
        projected.insert(cat.clone(), out.projected);
    }
    Ok(MultiFusionOutput {
        fused,
        attention,
        projected,
    })
}

/// One image as seen by the matching loss.
#[derive(Debug, Clone, Copy)]
pub struct ItemView<'a> {
    pub tokens: &'a [Vec<f64>],
    pub expert: &'a [f64],
}

struct ItemForward {
    proj: Projection,
    attention: Vec<f64>,
    scores: Vec<f64>,
    pooled: Vec<f64>,
}

fn item_forward(a: &FusionAdapter, item: &ItemView) -> Result<ItemForward> {
    if item.tokens.is_empty() {
        return Err(Error::invalid("token map has no rows"));
    }
    let proj = project_full(a, item.expert)?;
    let (attention, scores) = attend(item.tokens, &proj.out, a.temperature)?;
    let n = item.tokens.len() as f64;
    let mut pooled = vec![0.0; a.d];
    for (f, w) in item.tokens.iter().zip(&attention) {
        for k in 0..a.d {
            pooled[k] += (f[k] + w * proj.out[k]) / n;
        }
    }
    Ok(ItemForward {
        proj,
        attention,
        scores,
        pooled,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pooled fused vector of one image.
pub fn pooled_fused(adapter: &FusionAdapter, item: &ItemView) -> Result<Vec<f64>> {
    Ok(item_forward(adapter, item)?.pooled)
}

fn readout_logits(q: &[f64], gallery: &[Vec<f64>], readout_temperature: f64) -> Result<Vec<f64>> {
    let nq = norm(q);
    if !(nq > POOL_GUARD) {
        return Err(Error::invalid("zero pooled query vector under cosine"));
    }
    gallery
        .iter()
        .map(|g| {
            let ng = norm(g);
            if !(ng > POOL_GUARD) {
                return Err(Error::invalid("zero pooled gallery vector under cosine"));
            }
            Ok(dot(q, g) / (nq * ng) / readout_temperature)
        })
        .collect()
}

/// Cross-entropy of the cosine readout and its gradient with respect to
/// every adapter parameter (returned in an adapter-shaped container; the
/// `temperature` field holds d loss / d temperature).
pub fn matching_loss_and_grads(
    adapter: &FusionAdapter,
    query: ItemView,
    gallery: &[ItemView],
    answer_index: usize,
    readout_temperature: f64,
) -> Result<(f64, FusionAdapter)> {
    if gallery.len() < 2 {
        return Err(Error::invalid("matching loss needs a gallery of at least 2"));
    }
    if answer_index >= gallery.len() {
        return Err(Error::invalid(format!(
            "answer_index {answer_index} outside gallery of {}",
            gallery.len()
        )));
    }
    if !(readout_temperature > 0.0) {
        return Err(Error::Config(vec![format!(
            "readout temperature must be > 0, got {readout_temperature}"
        )]));
    }
    let mut items = Vec::with_capacity(gallery.len() + 1);
    items.push(item_forward(adapter, &query)?);
    for g in gallery {
        items.push(item_forward(adapter, g)?);
    }
    let pooled_g: Vec<Vec<f64>> = items[1..].iter().map(|f| f.pooled.clone()).collect();
    let logits = readout_logits(&items[0].pooled, &pooled_g, readout_temperature)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - logits[answer_index];

    // d loss / d pooled for every item.
    let d = adapter.d;
    let uq = &items[0].pooled;
    let nq = norm(uq);
    let mut g_pool = vec![vec![0.0; d]; items.len()];
    for (gi, g) in pooled_g.iter().enumerate() {
        let dl = exps[gi] / z - if gi == answer_index { 1.0 } else { 0.0 };
        let dc = dl / readout_temperature;
        let ng = norm(g);
        let c = dot(uq, g) / (nq * ng);
        for k in 0..d {
            g_pool[0][k] += dc * (g[k] / (nq * ng) - c * uq[k] / (nq * nq));
            g_pool[gi + 1][k] += dc * (uq[k] / (nq * ng) - c * g[k] / (ng * ng));
        }
    }

    let mut grads = FusionAdapter {
        d_e: adapter.d_e,
        h: adapter.h,
        d,
        w1: vec![0.0; adapter.w1.len()],
        b1: vec![0.0; adapter.h],
        w2: vec![0.0; adapter.w2.len()],
        b2: vec![0.0; d],
        temperature: 0.0,
    };
    let all_views: Vec<&ItemView> = std::iter::once(&query).chain(gallery.iter()).collect();
    let scale = 1.0 / (adapter.temperature * (d as f64).sqrt());
    for ((fw, view), gu) in items.iter().zip(&all_views).zip(&g_pool) {
        let n = view.tokens.len() as f64;
        let p = &fw.proj.out;
        // F_i = f_i + A_i p and pooled = mean_i F_i, so dF_i = gu / n.
        let g_f: Vec<f64> = gu.iter().map(|x| x / n).collect();
        let d_a = dot(&g_f, p);
        let mut g_p: Vec<f64> = g_f.iter().map(|x| x * fw.attention.iter().sum::<f64>()).collect();
        let mean_da: f64 = fw.attention.iter().map(|a| a * d_a).sum();
        for (i, f) in view.tokens.iter().enumerate() {
            let ds = fw.attention[i] * (d_a - mean_da);
            if ds == 0.0 {
                continue;
            }
            for k in 0..d {
                g_p[k] += ds * f[k] * scale;
            }
            grads.temperature -= ds * fw.scores[i] / adapter.temperature;
        }
        // Back through the MLP.
        for k in 0..d {
            grads.b2[k] += g_p[k];
        }
        let mut g_pre = vec![0.0; adapter.h];
        for j in 0..adapter.h {
            let row = &adapter.w2[j * d..(j + 1) * d];
            let hj = fw.proj.hidden[j];
            if hj != 0.0 {
                for k in 0..d {
                    grads.w2[j * d + k] += hj * g_p[k];
                }
            }
            if fw.proj.pre[j] > 0.0 {
                g_pre[j] = dot(row, &g_p);
            }
        }
        for j in 0..adapter.h {
            grads.b1[j] += g_pre[j];
        }
        for (i, &ei) in view.expert.iter().enumerate() {
            if ei == 0.0 {
                continue;
            }
            let row = &mut grads.w1[i * adapter.h..(i + 1) * adapter.h];
            for (g, gp) in row.iter_mut().zip(&g_pre) {
                *g += ei * gp;
            }
        }
    }
    Ok((loss, grads))
}

/// Token maps and expert vectors keyed by image id, in 64-bit.
#[derive(Debug, Clone, Default)]
pub struct FusionViews {
    pub tokens: HashMap<String, Vec<Vec<f64>>>,
    pub expert: HashMap<String, Vec<f64>>,
}

impl FusionViews {
    pub fn new(token_maps: &[TokenFeatureMap], expert: &EmbeddingSet) -> Self {
        FusionViews {
            tokens: token_maps
                .iter()
                .map(|m| (m.image_id.clone(), tokens_f64(m)))
                .collect(),
            expert: expert
                .records()
                .iter()
                .map(|r| (r.image_id.clone(), r.vector.iter().map(|&v| v as f64).collect()))
                .collect(),
        }
    }

    pub fn item(&self, image_id: &str) -> Result<ItemView<'_>> {
        let tokens = self
            .tokens
            .get(image_id)
            .ok_or_else(|| Error::invalid(format!("image {image_id:?} has no token map")))?;
        let expert = self
            .expert
            .get(image_id)
            .ok_or_else(|| Error::invalid(format!("image {image_id:?} has no expert vector")))?;
        Ok(ItemView { tokens, expert })
    }

    pub fn check_tasks(&self, tasks: &[GalleryTask]) -> Result<()> {
        for t in tasks {
            self.item(&t.query_id)?;
            for g in &t.gallery_ids {
                self.item(g)?;
            }
        }
        Ok(())
    }

    fn task_loss_and_grads(
        &self,
        adapter: &FusionAdapter,
        task: &GalleryTask,
        readout_temperature: f64,
    ) -> Result<(f64, FusionAdapter)> {
        let q = self.item(&task.query_id)?;
        let g: Vec<ItemView> = task
            .gallery_ids
            .iter()
            .map(|id| self.item(id))
            .collect::<Result<_>>()?;
        matching_loss_and_grads(adapter, q, &g, task.answer_index, readout_temperature)
    }

    fn task_loss(&self, adapter: &FusionAdapter, task: &GalleryTask, readout_temperature: f64) -> Result<f64> {
        let q = pooled_fused(adapter, &self.item(&task.query_id)?)?;
        let g: Vec<Vec<f64>> = task
            .gallery_ids
            .iter()
            .map(|id| pooled_fused(adapter, &self.item(id)?))
            .collect::<Result<_>>()?;
        let logits = readout_logits(&q, &g, readout_temperature)?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        Ok(z.ln() + m - logits[task.answer_index])
    }

    /// Mean readout loss over `tasks`.
    pub fn mean_loss(&self, adapter: &FusionAdapter, tasks: &[GalleryTask], readout_temperature: f64) -> Result<f64> {
        let losses: Vec<f64> = tasks
            .par_iter()
            .map(|t| self.task_loss(adapter, t, readout_temperature))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Predicted gallery index by cosine of pooled fused vectors.
    pub fn predict(&self, adapter: &FusionAdapter, task: &GalleryTask) -> Result<usize> {
        let q = pooled_fused(adapter, &self.item(&task.query_id)?)?;
        let g: Vec<Vec<f64>> = task
            .gallery_ids
            .iter()
            .map(|id| pooled_fused(adapter, &self.item(id)?))
            .collect::<Result<_>>()?;
        let scores = readout_logits(&q, &g, 1.0)?;
        argmax(&scores).ok_or_else(|| Error::invalid("empty gallery"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub attention_temperature: f64,
    pub readout_temperature: f64,
}

impl Default for AdapterHyper {
    fn default() -> Self {
        AdapterHyper {
            lr: 0.005,
            epochs: 30,
            batch: 32,
            seed: 11,
            attention_temperature: 1.0,
            readout_temperature: 0.05,
        }
    }
}

impl AdapterHyper {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("adapter.lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            v.push("adapter.batch must be >= 1".into());
        }
        if !(self.attention_temperature > 0.0 && self.attention_temperature.is_finite()) {
            v.push("adapter.attention_temperature must be > 0".into());
        }
        if !(self.readout_temperature > 0.0 && self.readout_temperature.is_finite()) {
            v.push("adapter.readout_temperature must be > 0".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainLog {
    pub initial_loss: f64,
    /// Full-pass loss after each epoch.
    pub epoch_loss: Vec<f64>,
    pub final_loss: f64,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
}

/// Adam over shuffled mini-batches. Keeps the parameters with the lowest
/// full-pass training loss, so the returned adapter never has a higher
/// training loss than `adapter_init`.
pub fn train_adapter(
    adapter_init: &FusionAdapter,
    tasks: &[GalleryTask],
    views: &FusionViews,
    hyper: &AdapterHyper,
) -> Result<(FusionAdapter, AdapterTrainLog)> {
    let v = hyper.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("train_adapter needs at least one task"));
    }
    views.check_tasks(tasks)?;
    let rho = hyper.readout_temperature;
    let initial_loss = views.mean_loss(adapter_init, tasks, rho)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence(format!("initial adapter loss is {initial_loss}")));
    }
    let mut adapter = adapter_init.clone();
    let mut best = (initial_loss, 0usize, adapter_init.clone());
    let mut params = adapter.params();
    let mut opt = Adam::new(params.len(), hyper.lr);
    let mut rng = rng_for(hyper.seed, &[&"adapter-shuffle"]);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            let parts: Vec<(f64, FusionAdapter)> = chunk
                .par_iter()
                .map(|&i| views.task_loss_and_grads(&adapter, &tasks[i], rho))
                .collect::<Result<_>>()?;
            let mut flat = vec![0.0; params.len()];
            for (loss, g) in &parts {
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "adapter loss became {loss} in epoch {epoch}"
                    )));
                }
                for (f, x) in flat.iter_mut().zip(g.params()) {
                    *f += x / chunk.len() as f64;
                }
            }
            opt.step(&mut params, &flat);
            adapter.set_params(&params);
        }
        let loss = views.mean_loss(&adapter, tasks, rho)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "adapter full-pass loss became {loss} after epoch {epoch}"
            )));
        }
        log::info!("adapter epoch {epoch}: loss {loss:.5}");
        epoch_loss.push(loss);
        if loss < best.0 {
            best = (loss, epoch, adapter.clone());
        }
    }
    let (final_loss, best_epoch, adapter) = best;
    Ok((
        adapter,
        AdapterTrainLog {
            initial_loss,
            epoch_loss,
            final_loss,
            best_epoch,
        },
    ))
}
