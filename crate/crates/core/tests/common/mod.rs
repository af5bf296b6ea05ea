//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ilrkit::expert::{combined_loss_and_grads, ClassifierHead, ExpertHead, LossWeights};
use ilrkit::fusion::{matching_loss_and_grads, FusionAdapter, ItemView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor: below this magnitude the central-difference truncation
/// error (~step²·f''') dominates, so components are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;
/// Instances whose piecewise structure is this close to switching are skipped.
pub const KINK_GAP: f64 = 1e-3;
/// Mined pairs closer than this sit near the non-differentiable point of the
/// Euclidean norm.
pub const MIN_MINED_DIST: f64 = 0.1;
/// Vectors that get normalized must be at least this long: the curvature of
/// `v / |v|` grows like `1/|v|²`, which a fixed finite-difference step cannot
/// resolve near the origin.
pub const MIN_NORM: f64 = 0.25;
/// The expert head normalizes a linear map of the input, so its curvature is
/// governed by the pre-norm relative to the input norm.
pub const MIN_EXPERT_RATIO: f64 = 0.4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_grad_step(x, FD_STEP, f)
}

pub fn numeric_grad_step(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Linear-scan argmax of cosine similarity, first index on ties.
pub fn argmax_cosine_oracle(query: &[f64], gallery: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for (i, g) in gallery.iter().enumerate() {
        let s = cos(query, g);
        if s > best_s {
            best_s = s;
            best = i;
        }
    }
    best
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub n_params: usize,
    pub detail: String,
}

/// Check `matching_loss_and_grads` on one random micro instance, or `None`
/// when a ReLU pre-activation sits within [`KINK_GAP`] of zero.
pub fn fusion_gradcheck(seed: u64) -> Option<GradCheck> {
    fusion_gradcheck_step(seed, FD_STEP)
}

pub fn fusion_gradcheck_step(seed: u64, step: f64) -> Option<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_e = rng.random_range(2..5);
    let d = rng.random_range(2..5);
    let n_tok = rng.random_range(1..4);
    let k = rng.random_range(2..5);
    let mut adapter = FusionAdapter::zeros(d_e, d, rng.random_range(0.5..2.0)).unwrap();
    let p: Vec<f64> = (0..adapter.n_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
    adapter.set_params(&p);
    let mk = |rng: &mut ChaCha8Rng| -> (Vec<Vec<f64>>, Vec<f64>) {
        let toks = (0..n_tok)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (toks, unit(rng, d_e))
    };
    let q = mk(&mut rng);
    let g: Vec<_> = (0..k).map(|_| mk(&mut rng)).collect();
    let answer = rng.random_range(0..k);
    let rho = rng.random_range(0.1..1.0);

    // kink screen: every hidden pre-activation of every item
    for (_, e) in std::iter::once(&q).chain(&g) {
        for j in 0..adapter.h {
            let z: f64 = adapter.b1[j] + (0..d_e).map(|i| e[i] * adapter.w1[i * adapter.h + j]).sum::<f64>();
            if z.abs() < KINK_GAP {
                return None;
            }
        }
    }
    let items: Vec<ItemView> = g.iter().map(|(t, e)| ItemView { tokens: t, expert: e }).collect();
    let query = ItemView { tokens: &q.0, expert: &q.1 };
    let loss_at = |a: &FusionAdapter| matching_loss_and_grads(a, query, &items, answer, rho).unwrap().0;
    let (_, grads) = matching_loss_and_grads(&adapter, query, &items, answer, rho).unwrap();
    let mut probe = adapter.clone();
    let numeric = numeric_grad_step(&p, step, |x| {
        probe.set_params(x);
        loss_at(&probe)
    });
    let mut err = max_rel_err(&grads.params(), &numeric);

    // attention temperature
    let t0 = adapter.temperature;
    let mut tp = adapter.clone();
    tp.temperature = t0 + step;
    let up = loss_at(&tp);
    tp.temperature = t0 - step;
    let down = loss_at(&tp);
    err = err.max(rel_err(grads.temperature, (up - down) / (2.0 * step)));
    let mut min_z = f64::INFINITY;
    for (_, e) in std::iter::once(&q).chain(&g) {
        for j in 0..adapter.h {
            let z: f64 = adapter.b1[j] + (0..d_e).map(|i| e[i] * adapter.w1[i * adapter.h + j]).sum::<f64>();
            min_z = min_z.min(z.abs());
        }
    }
    let norms: Vec<f64> = std::iter::once(query).chain(items.iter().copied()).map(|it| {
        let p = ilrkit::fusion::pooled_fused(&adapter, &it).unwrap();
        p.iter().map(|x| x * x).sum::<f64>().sqrt()
    }).collect();
    if norms.iter().any(|&n| n < MIN_NORM) {
        return None;
    }
    Some(GradCheck {
        max_rel_err: err,
        n_params: adapter.n_params() + 1,
        detail: format!("rho {rho:.3} min|z| {min_z:.4} pooled norms {norms:.3?}"),
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Check `combined_loss_and_grads` on one random P×Q micro batch, or `None`
/// when batch-hard mining or a hinge is within [`KINK_GAP`] of switching or a
/// mined distance is near zero.
pub fn expert_gradcheck(seed: u64) -> Option<GradCheck> {
    expert_gradcheck_step(seed, FD_STEP)
}

pub fn expert_gradcheck_step(seed: u64, step: f64) -> Option<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_raw = rng.random_range(2..6);
    let d_out = rng.random_range(2..5);
    let p_ids = rng.random_range(2..4);
    let q_imgs = rng.random_range(2..4);
    let weights = LossWeights {
        classification: rng.random_range(0.2..1.5),
        triplet: rng.random_range(0.2..1.5),
    };
    let margin = rng.random_range(0.1..0.6);
    let head = ExpertHead {
        d_raw,
        d_out,
        w: (0..d_raw * d_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
        b: (0..d_out).map(|_| rng.random_range(-0.3..0.3)).collect(),
        margin,
        loss_weights: weights,
    };
    let mut clf = ClassifierHead::random(d_out, (0..p_ids).map(|i| format!("i{i}")).collect(), seed);
    clf.prototypes.iter_mut().for_each(|v| *v *= 3.0);
    let mut raws = Vec::new();
    let mut labels = Vec::new();
    for l in 0..p_ids {
        let c: Vec<f64> = (0..d_raw).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..q_imgs {
            raws.push(c.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect::<Vec<f64>>());
            labels.push(l);
        }
    }

    // kink screen on the normalized embeddings
    let embs: Vec<Vec<f64>> = raws.iter().map(|x| head.embed(x).unwrap()).collect();
    let n = embs.len();
    for a in 0..n {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for j in (0..n).filter(|&j| j != a) {
            let dj = dist(&embs[a], &embs[j]);
            if labels[j] == labels[a] {
                pos.push(dj);
            } else {
                neg.push(dj);
            }
        }
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(|x, y| x.total_cmp(y));
        if pos.len() > 1 && pos[0] - pos[1] < KINK_GAP {
            return None;
        }
        if neg.len() > 1 && neg[1] - neg[0] < KINK_GAP {
            return None;
        }
        if pos[0] < MIN_MINED_DIST || neg[0] < MIN_MINED_DIST {
            return None;
        }
        if (pos[0] - neg[0] + head.margin).abs() < KINK_GAP {
            return None;
        }
    }

    let (_, grads) = combined_loss_and_grads(&head, &clf, &raws, &labels).unwrap();
    let n_w = head.w.len();
    let n_b = head.b.len();
    let mut x = head.w.clone();
    x.extend(&head.b);
    x.extend(&clf.prototypes);
    let numeric = numeric_grad_step(&x, step, |v| {
        let mut h = head.clone();
        h.w = v[..n_w].to_vec();
        h.b = v[n_w..n_w + n_b].to_vec();
        let mut c = clf.clone();
        c.prototypes = v[n_w + n_b..].to_vec();
        combined_loss_and_grads(&h, &c, &raws, &labels).unwrap().0
    });
    let mut analytic = grads.w.clone();
    analytic.extend(&grads.b);
    analytic.extend(&grads.prototypes);
    let pre: Vec<f64> = raws.iter().map(|x| {
        (0..d_out).map(|o| { let z = head.b[o] + (0..d_raw).map(|i| x[i] * head.w[i * d_out + o]).sum::<f64>(); z * z }).sum::<f64>().sqrt()
    }).collect();
    let min_pre = pre.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_ratio = pre
        .iter()
        .zip(&raws)
        .map(|(p, x)| p / (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt())
        .fold(f64::INFINITY, f64::min);
    if min_pre < MIN_NORM || min_ratio < MIN_EXPERT_RATIO {
        return None;
    }
    Some(GradCheck {
        max_rel_err: max_rel_err(&analytic, &numeric),
        n_params: analytic.len(),
        detail: format!("min pre-norm {min_pre:.3} ratio {min_ratio:.3}"),
    })
}

/// Run checks over increasing seeds until `n` instances are accepted.
/// Returns (worst error, accepted, rejected).
pub fn run_gradchecks(n: usize, base: u64, check: fn(u64) -> Option<GradCheck>) -> (f64, usize, usize) {
    let (mut worst, mut ok, mut skipped) = (0.0f64, 0, 0);
    let mut seed = base;
    while ok < n {
        match check(seed) {
            Some(g) => {
                worst = worst.max(g.max_rel_err);
                ok += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    (worst, ok, skipped)
}
