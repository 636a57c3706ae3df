//! The eight replay-selection strategies: prediction-based scores
//! (confidence, entropy, margin, Bayesian disagreement), interference
//! scoring against a virtually updated model, embedding-based selection
//! (k-means representatives, max-min-distance coreset), and random
//! selection, plus top-k extraction with simple/difficult tails.
//!
//! All tie-breaks go to the lower index and all selections are returned
//! sorted by index, so every selector is a pure deterministic function of
//! its inputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::dist2;
use crate::memory::Subsample;
use crate::nn::{per_sample_cross_entropy, Batch, EmbeddingMatrix, ForwardMode, ModelParams, PredictionMatrix};
use crate::seeds;

/// Per-subsample scalar scores.
pub type ScoreVector = Vec<f64>;

/// Replay-strategy identifiers. `Display`/`FromStr` use the exact strings
/// that appear in config files and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Random,
    Entropy,
    Confidence,
    Margin,
    Bald,
    Kmeans,
    Coreset,
    Mir,
}

pub const ALL_STRATEGIES: [Strategy; 8] = [
    Strategy::Random,
    Strategy::Entropy,
    Strategy::Confidence,
    Strategy::Margin,
    Strategy::Bald,
    Strategy::Kmeans,
    Strategy::Coreset,
    Strategy::Mir,
];

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Confidence => "confidence",
            Strategy::Margin => "margin",
            Strategy::Bald => "bald",
            Strategy::Kmeans => "kmeans",
            Strategy::Coreset => "coreset",
            Strategy::Mir => "mir",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "confidence" => Ok(Strategy::Confidence),
            "margin" => Ok(Strategy::Margin),
            "bald" => Ok(Strategy::Bald),
            "kmeans" => Ok(Strategy::Kmeans),
            "coreset" => Ok(Strategy::Coreset),
            "mir" => Ok(Strategy::Mir),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy `{other}`; valid: random, entropy, confidence, margin, bald, kmeans, coreset, mir"
            ))),
        }
    }
}

/// Whether a score-based strategy keeps its easy tail or its hard tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DifficultyMode {
    Simple,
    Difficult,
}

impl fmt::Display for DifficultyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyMode::Simple => "simple",
            DifficultyMode::Difficult => "difficult",
        })
    }
}

impl FromStr for DifficultyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(DifficultyMode::Simple),
            "difficult" => Ok(DifficultyMode::Difficult),
            other => Err(Error::InvalidArgument(format!(
                "unknown difficulty mode `{other}`; valid: simple, difficult"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Largest,
    Smallest,
}

/// The one table mapping (strategy, mode) to the score tail that is kept.
///
/// Simple keeps the confident/certain/stable tail; difficult keeps the
/// opposite tail. Interference scoring always keeps the largest scores, and
/// the non-score strategies return `None`.
pub fn topk_direction(strategy: Strategy, mode: DifficultyMode) -> Option<Direction> {
    use DifficultyMode::*;
    use Direction::*;
    match (strategy, mode) {
        (Strategy::Confidence, Simple) => Some(Largest),
        (Strategy::Confidence, Difficult) => Some(Smallest),
        (Strategy::Entropy, Simple) => Some(Smallest),
        (Strategy::Entropy, Difficult) => Some(Largest),
        (Strategy::Margin, Simple) => Some(Largest),
        (Strategy::Margin, Difficult) => Some(Smallest),
        (Strategy::Bald, Simple) => Some(Smallest),
        (Strategy::Bald, Difficult) => Some(Largest),
        (Strategy::Mir, _) => Some(Largest),
        (Strategy::Random | Strategy::Kmeans | Strategy::Coreset, _) => None,
    }
}

/// The `N_r` chosen subsample positions, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
}

impl Selection {
    fn sorted(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Selection { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Materializes the replay batch from the batch the selection indexes.
    pub fn resolve(&self, source: &Batch) -> Batch {
        source.select(&self.indices)
    }
}

// ─── Prediction-based scores ───────────────────────────

/// Largest class probability per row.
pub fn score_confidence(preds: &PredictionMatrix) -> ScoreVector {
    preds
        .matrix()
        .iter_rows()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn entropy_nats(row: &[f64]) -> f64 {
    -row.iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Shannon entropy (natural log) per row, with `0·ln 0 := 0`.
pub fn score_entropy(preds: &PredictionMatrix) -> ScoreVector {
    preds.matrix().iter_rows().map(entropy_nats).collect()
}

/// Largest minus smallest class probability per row.
pub fn score_margin(preds: &PredictionMatrix) -> ScoreVector {
    preds
        .matrix()
        .iter_rows()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        })
        .collect()
}

/// Bayesian disagreement over `k` MC-dropout passes: entropy of the mean
/// prediction minus mean of the per-pass entropies.
pub fn score_bald(mc_preds: &[PredictionMatrix]) -> Result<ScoreVector> {
    let Some(first) = mc_preds.first() else {
        return Err(Error::InvalidArgument("score_bald requires k >= 1 passes".into()));
    };
    let (n, c) = (first.rows(), first.classes());
    for p in mc_preds {
        if p.rows() != n || p.classes() != c {
            return Err(Error::shape(
                "score_bald",
                format!("{n}x{c}"),
                format!("{}x{}", p.rows(), p.classes()),
            ));
        }
    }
    let k = mc_preds.len() as f64;
    let mut scores = Vec::with_capacity(n);
    let mut mean_row = vec![0.0; c];
    for i in 0..n {
        mean_row.iter_mut().for_each(|v| *v = 0.0);
        let mut mean_entropy = 0.0;
        for p in mc_preds {
            let row = p.row(i);
            for (m, &v) in mean_row.iter_mut().zip(row) {
                *m += v / k;
            }
            mean_entropy += entropy_nats(row) / k;
        }
        scores.push(entropy_nats(&mean_row) - mean_entropy);
    }
    Ok(scores)
}

// ─── Interference score ────────────────────────────────

/// Per-sample loss under the virtually updated model minus loss under the
/// current model, both in eval mode. The caller guarantees `virtual_model`
/// came from `current.virtual_update(..)`.
pub fn score_mir(
    current: &ModelParams,
    virtual_model: &ModelParams,
    sub: &Subsample,
) -> Result<ScoreVector> {
    if current.layer_shapes() != virtual_model.layer_shapes() {
        return Err(Error::shape(
            "score_mir",
            format!("{:?}", current.layer_shapes()),
            format!("{:?}", virtual_model.layer_shapes()),
        ));
    }
    let (preds_now, _) = current.forward(&sub.batch, ForwardMode::Eval)?;
    let (preds_virtual, _) = virtual_model.forward(&sub.batch, ForwardMode::Eval)?;
    let loss_now = per_sample_cross_entropy(&preds_now, sub.batch.labels())?;
    let loss_virtual = per_sample_cross_entropy(&preds_virtual, sub.batch.labels())?;
    Ok(loss_virtual
        .iter()
        .zip(&loss_now)
        .map(|(v, c)| v - c)
        .collect())
}

// ─── Selectors ─────────────────────────────────────────

/// Indices of the `N_r` extreme scores in the given direction; ties break
/// toward the lower index.
pub fn select_topk(scores: &[f64], n_r: usize, direction: Direction) -> Selection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = match direction {
            Direction::Largest => scores[b].total_cmp(&scores[a]),
            Direction::Smallest => scores[a].total_cmp(&scores[b]),
        };
        cmp.then(a.cmp(&b))
    });
    order.truncate(n_r.min(scores.len()));
    Selection::sorted(order)
}

/// Uniform draw of `min(N_r, N_s)` indices without replacement.
pub fn select_random(n_s: usize, n_r: usize, seed: u64) -> Selection {
    let mut rng = seeds::rng(seed, &[seeds::tag::SELECT]);
    Selection::sorted(crate::sampling::sample_without_replacement(n_s, n_r, &mut rng))
}

fn kmeans_pp_init(points: &EmbeddingMatrix, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut rng = seeds::rng(seed, &[seeds::tag::KMEANS]);
    let mut chosen: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist2(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; fall back to the
            // lowest unchosen index.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let t = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc >= t {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        for i in 0..n {
            let d = dist2(points.row(i), points.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen.iter().map(|&i| points.row(i).to_vec()).collect()
}

fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(point, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Lloyd's iterations from a k-means++ seeding; from each final cluster the
/// member nearest its centroid is selected. Empty clusters are re-seeded to
/// the point farthest from all centers.
pub fn select_kmeans(
    emb: &EmbeddingMatrix,
    n_r: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Selection> {
    let n = emb.rows();
    if n_r > n {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {n_r} cluster representatives from {n} embeddings"
        )));
    }
    if n_r == 0 {
        return Ok(Selection { indices: Vec::new() });
    }
    if n_r == n {
        return Ok(Selection {
            indices: (0..n).collect(),
        });
    }

    let mut centers = kmeans_pp_init(emb, n_r, seed);
    let mut assignment = vec![0usize; n];

    for _ in 0..max_iters.max(1) {
        // Assign, re-seeding empty clusters to the farthest point.
        let mut counts;
        let mut fixes = 0;
        loop {
            counts = vec![0usize; n_r];
            for i in 0..n {
                let (c, _) = nearest_center(emb.row(i), &centers);
                assignment[i] = c;
                counts[c] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            fixes += 1;
            if fixes > n_r {
                break;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = nearest_center(emb.row(a), &centers).1;
                    let db = nearest_center(emb.row(b), &centers).1;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("n > 0");
            centers[empty] = emb.row(far).to_vec();
        }

        // Recompute means.
        let dim = emb.dim();
        let mut next: Vec<Vec<f64>> = vec![vec![0.0; dim]; n_r];
        for i in 0..n {
            for (acc, v) in next[assignment[i]].iter_mut().zip(emb.row(i)) {
                *acc += v;
            }
        }
        for (c, center) in next.iter_mut().enumerate() {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                center.iter_mut().for_each(|v| *v *= inv);
            } else {
                *center = centers[c].clone();
            }
        }
        if next == centers {
            break;
        }
        centers = next;
    }

    // Representative per cluster: the member nearest the centroid, ties to
    // the lower index.
    let mut picked = Vec::with_capacity(n_r);
    for c in 0..n_r {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if assignment[i] != c {
                continue;
            }
            let d = dist2(emb.row(i), &centers[c]);
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((i, d)),
            }
        }
        if let Some((i, _)) = best {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked.dedup();
    // Degenerate duplicate-point inputs can leave clusters unrepresented;
    // fill with the lowest unselected indices to honour the N_r contract.
    let mut i = 0;
    while picked.len() < n_r {
        if !picked.contains(&i) {
            picked.push(i);
        }
        i += 1;
    }
    Ok(Selection::sorted(picked))
}

/// Greedy max-min-distance selection starting from a seed-drawn initial
/// point.
pub fn select_coreset(emb: &EmbeddingMatrix, n_r: usize, seed: u64) -> Result<Selection> {
    let n = emb.rows();
    if n_r > n {
        return Err(Error::InvalidArgument(format!(
            "cannot pick a coreset of {n_r} from {n} embeddings"
        )));
    }
    if n_r == 0 || n == 0 {
        return Ok(Selection { indices: Vec::new() });
    }
    let first = seeds::rng(seed, &[seeds::tag::CORESET]).random_range(0..n);
    select_coreset_from(emb, n_r, first)
}

/// Max-min-distance selection with an explicit initial point. Repeatedly
/// marks the unselected embedding whose distance to its nearest selected
/// embedding is maximal (ties toward the lower index).
pub fn select_coreset_from(emb: &EmbeddingMatrix, n_r: usize, first: usize) -> Result<Selection> {
    let n = emb.rows();
    if n_r > n {
        return Err(Error::InvalidArgument(format!(
            "cannot pick a coreset of {n_r} from {n} embeddings"
        )));
    }
    if first >= n {
        return Err(Error::InvalidArgument(format!(
            "initial coreset point {first} out of range for {n} embeddings"
        )));
    }
    if n_r == 0 {
        return Ok(Selection { indices: Vec::new() });
    }

    let mut selected = vec![false; n];
    let mut picked = vec![first];
    selected[first] = true;
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(emb.row(i), emb.row(first))).collect();

    while picked.len() < n_r {
        let mut next = None;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if !selected[i] && min_d2[i] > best {
                best = min_d2[i];
                next = Some(i);
            }
        }
        let next = next.expect("n_r <= n guarantees an unselected point");
        selected[next] = true;
        picked.push(next);
        for i in 0..n {
            let d = dist2(emb.row(i), emb.row(next));
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(Selection::sorted(picked))
}
