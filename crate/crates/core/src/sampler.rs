//! Evaluation of a bag by full processing, uniform random sampling, or
//! attention-guided active sampling.
//!
//! Active sampling starts from a uniform random draw. After every draw the
//! model is run on everything sampled so far; each newly drawn patch passes
//! its attention score on to its `k` nearest unsampled grid neighbours
//! (max-combined with what they already hold). The next draw takes a
//! decaying fraction uniformly at random and the rest proportional to those
//! weights. The prediction is one forward pass over the whole sample.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{PredictionRow, PredictionTable};
use crate::matrix::Matrix;
use crate::model::{Forward, ModelParams};
use crate::seed;
use crate::slide::{Bag, Coord};

/// Anything that turns a feature matrix into attention scores and logits.
pub trait BagScorer: Sync {
    fn score(&self, features: &Matrix) -> Result<Forward>;
}

impl BagScorer for ModelParams {
    fn score(&self, features: &Matrix) -> Result<Forward> {
        self.forward(features)
    }
}

/// Source of patch features, addressed by patch index. Implementations may
/// read a cache or encode pixels on demand.
pub trait PatchFeatures {
    fn coords(&self) -> &[Coord];

    fn dim(&self) -> usize;

    /// Append the feature rows of `indices`, in order, to `out`.
    fn encode_into(&mut self, indices: &[usize], out: &mut Matrix) -> Result<()>;

    fn len(&self) -> usize {
        self.coords().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-extracted features of a [`Bag`].
pub struct CachedFeatures<'a>(pub &'a Bag);

impl PatchFeatures for CachedFeatures<'_> {
    fn coords(&self) -> &[Coord] {
        &self.0.coords
    }

    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn encode_into(&mut self, indices: &[usize], out: &mut Matrix) -> Result<()> {
        for &i in indices {
            out.push_row(self.0.features.row(i))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub total_budget: usize,
    pub iterations: usize,
    pub final_extra: usize,
    pub neighbours: usize,
    pub random_rate: f64,
    pub random_delta: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            total_budget: 800,
            iterations: 10,
            final_extra: 160,
            neighbours: 64,
            random_rate: 0.29,
            random_delta: 0.36,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("at least one sampling iteration is required"));
        }
        if self.final_extra > self.total_budget {
            return Err(Error::config("final draw exceeds the total budget"));
        }
        if self.total_budget - self.final_extra < self.iterations {
            return Err(Error::config(
                "budget before the final draw must cover one patch per iteration",
            ));
        }
        if self.neighbours == 0 {
            return Err(Error::config("neighbour count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.random_rate) {
            return Err(Error::config("random rate must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.random_delta) {
            return Err(Error::config("random rate delta must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Draw sizes before the final step. Every iteration gets
    /// `round(pre / iterations)`; the last absorbs the rounding error.
    pub fn iteration_counts(&self) -> Vec<usize> {
        let pre = self.total_budget - self.final_extra;
        let it = self.iterations;
        let mut base = (pre as f64 / it as f64).round() as usize;
        if base * (it - 1) >= pre {
            base = pre / it;
        }
        let mut counts = vec![base; it];
        counts[it - 1] = pre - base * (it - 1);
        counts
    }

    /// Nominal samples per iteration (the rounded count).
    pub fn samples_per_iteration(&self) -> usize {
        self.iteration_counts()[0]
    }
}

/// Fraction of a draw taken uniformly at random: 1 at iteration 0, then
/// `r₀·(1−δ)^i`.
pub fn random_rate_schedule(initial: f64, delta: f64, iteration: usize) -> f64 {
    if iteration == 0 {
        1.0
    } else {
        initial * (1.0 - delta).powi(iteration as i32)
    }
}

/// Dense lookup from grid position to patch index.
pub struct GridIndex {
    width: i64,
    height: i64,
    cells: Vec<u32>,
}

const EMPTY: u32 = u32::MAX;

impl GridIndex {
    pub fn new(coords: &[Coord]) -> Self {
        let width = coords.iter().map(|c| i64::from(c.0) + 1).max().unwrap_or(0);
        let height = coords.iter().map(|c| i64::from(c.1) + 1).max().unwrap_or(0);
        let mut cells = vec![EMPTY; (width * height) as usize];
        for (i, &(x, y)) in coords.iter().enumerate() {
            cells[(i64::from(y) * width + i64::from(x)) as usize] = i as u32;
        }
        GridIndex {
            width,
            height,
            cells,
        }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> Option<usize> {
        if x < 0 || y < 0 || x >= self.width || y >= self.height {
            return None;
        }
        match self.cells[(y * self.width + x) as usize] {
            EMPTY => None,
            i => Some(i as usize),
        }
    }

    /// The `k` patches nearest to `centre` (Euclidean, ties by ascending
    /// index) among those accepted by `eligible`.
    ///
    /// Scans square rings of growing radius `r`. Once at least `k` eligible
    /// patches lie within Euclidean distance `r`, every patch at or below
    /// the k-th distance has been seen.
    pub fn nearest(&self, centre: Coord, k: usize, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
        let (cx, cy) = (i64::from(centre.0), i64::from(centre.1));
        let max_r = self.width.max(self.height);
        let mut found: Vec<(i64, usize)> = Vec::new();
        let visit = |x: i64, y: i64, found: &mut Vec<(i64, usize)>| {
            if let Some(i) = self.at(x, y) {
                if eligible(i) {
                    found.push(((x - cx).pow(2) + (y - cy).pow(2), i));
                }
            }
        };
        visit(cx, cy, &mut found);
        let mut r = 0i64;
        loop {
            let within = found.iter().filter(|(d, _)| *d <= r * r).count();
            if within >= k || r > max_r {
                break;
            }
            r += 1;
            for x in cx - r..=cx + r {
                visit(x, cy - r, &mut found);
                visit(x, cy + r, &mut found);
            }
            for y in cy - r + 1..cy + r {
                visit(cx - r, y, &mut found);
                visit(cx + r, y, &mut found);
            }
        }
        found.sort_unstable();
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }
}

/// Mutable state of one active-sampling run.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub sampled: Vec<usize>,
    pub is_sampled: Vec<bool>,
    pub weights: Vec<f64>,
    pub current_random_rate: f64,
    pub iteration: usize,
}

impl SamplerState {
    pub fn new(len: usize) -> Self {
        SamplerState {
            sampled: Vec::new(),
            is_sampled: vec![false; len],
            weights: vec![0.0; len],
            current_random_rate: 1.0,
            iteration: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.is_sampled.len() - self.sampled.len()
    }

    pub fn unsampled(&self) -> Vec<usize> {
        (0..self.is_sampled.len())
            .filter(|&i| !self.is_sampled[i])
            .collect()
    }

    /// Mark patches as sampled and zero their weights.
    pub fn mark_sampled(&mut self, indices: &[usize]) {
        for &i in indices {
            debug_assert!(!self.is_sampled[i], "patch {i} sampled twice");
            self.is_sampled[i] = true;
            self.weights[i] = 0.0;
            self.sampled.push(i);
        }
    }
}

/// Spread each newly sampled patch's attention to its `k` nearest unsampled
/// neighbours, keeping the larger of old and new weight.
pub fn propagate_weights(
    state: &mut SamplerState,
    grid: &GridIndex,
    coords: &[Coord],
    newly_sampled: &[usize],
    attention: &[f64],
    k: usize,
) -> Result<()> {
    if k == 0 {
        return Err(Error::config("neighbour count must be at least 1"));
    }
    if newly_sampled.len() != attention.len() {
        return Err(Error::shape("attention scores do not align with sampled patches"));
    }
    for (&p, &a) in newly_sampled.iter().zip(attention) {
        let is_sampled = &state.is_sampled;
        for n in grid.nearest(coords[p], k, |i| !is_sampled[i]) {
            if a > state.weights[n] {
                state.weights[n] = a;
            }
        }
    }
    for &i in &state.sampled {
        state.weights[i] = 0.0;
    }
    Ok(())
}

/// One drawn patch, with how it was chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub random: bool,
    pub weight: f64,
}

/// Draw up to `n` unsampled patches: `⌊rate·n⌋` uniformly, the rest by
/// sequential weighted sampling without replacement over positive-weight
/// patches, topping up uniformly if the weighted pool runs dry. Does not
/// modify `state`.
pub fn draw_iteration(state: &SamplerState, n: usize, rate: f64, rng: &mut impl Rng) -> Vec<Draw> {
    let mut unsampled = state.unsampled();
    if unsampled.len() <= n {
        return unsampled
            .into_iter()
            .map(|i| Draw {
                index: i,
                random: true,
                weight: state.weights[i],
            })
            .collect();
    }
    let n_random = ((rate * n as f64).floor() as usize).min(n);
    let mut draws = Vec::with_capacity(n);
    let mut taken = vec![false; state.is_sampled.len()];
    for pos in index::sample(rng, unsampled.len(), n_random) {
        let i = unsampled[pos];
        taken[i] = true;
        draws.push(Draw {
            index: i,
            random: true,
            weight: state.weights[i],
        });
    }

    let mut pool: Vec<usize> = unsampled
        .iter()
        .copied()
        .filter(|&i| !taken[i] && state.weights[i] > 0.0)
        .collect();
    while draws.len() < n && !pool.is_empty() {
        let total: f64 = pool.iter().map(|&i| state.weights[i]).sum();
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = pool.len() - 1;
        for (pos, &i) in pool.iter().enumerate() {
            acc += state.weights[i];
            if target < acc {
                pick = pos;
                break;
            }
        }
        let i = pool.remove(pick);
        taken[i] = true;
        draws.push(Draw {
            index: i,
            random: false,
            weight: state.weights[i],
        });
    }

    if draws.len() < n {
        unsampled.retain(|&i| !taken[i]);
        let short = n - draws.len();
        for pos in index::sample(rng, unsampled.len(), short) {
            let i = unsampled[pos];
            draws.push(Draw {
                index: i,
                random: true,
                weight: state.weights[i],
            });
        }
    }
    draws
}

/// One row of the sampling trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub patch: usize,
    pub x: u32,
    pub y: u32,
    pub drawn_randomly: bool,
    pub weight_at_draw: f64,
    pub attention_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingResult {
    pub logits: [f64; 2],
    /// Attention over `sampled`, same order.
    pub attention: Vec<f64>,
    pub sampled: Vec<usize>,
    /// Final sampling weight per patch (all zero for full and random runs).
    pub weights: Vec<f64>,
    pub patches_encoded: usize,
    pub forward_passes: usize,
    pub trace: Vec<TraceRow>,
}

impl SamplingResult {
    pub fn positive_probability(&self) -> f64 {
        crate::model::positive_probability(self.logits)
    }

    /// Attention per patch of the bag (0 where unsampled).
    pub fn attention_map(&self, len: usize) -> Vec<f64> {
        let mut map = vec![0.0; len];
        for (&i, &a) in self.sampled.iter().zip(&self.attention) {
            map[i] = a;
        }
        map
    }
}

fn single_pass(
    scorer: &dyn BagScorer,
    source: &mut dyn PatchFeatures,
    indices: Vec<usize>,
) -> Result<SamplingResult> {
    let mut features = Matrix::zeros(0, source.dim());
    source.encode_into(&indices, &mut features)?;
    let fwd = scorer.score(&features)?;
    let coords = source.coords();
    let trace = indices
        .iter()
        .zip(&fwd.attention.scores)
        .map(|(&i, &a)| TraceRow {
            iteration: 0,
            patch: i,
            x: coords[i].0,
            y: coords[i].1,
            drawn_randomly: true,
            weight_at_draw: 0.0,
            attention_after: a,
        })
        .collect();
    Ok(SamplingResult {
        logits: fwd.logits,
        attention: fwd.attention.scores,
        patches_encoded: indices.len(),
        sampled: indices,
        weights: vec![0.0; source.len()],
        forward_passes: 1,
        trace,
    })
}

/// Whole-bag evaluation.
pub fn run_full(scorer: &dyn BagScorer, source: &mut dyn PatchFeatures) -> Result<SamplingResult> {
    if source.is_empty() {
        return Err(Error::EmptyBag);
    }
    let all = (0..source.len()).collect();
    single_pass(scorer, source, all)
}

/// Uniform sample of `min(budget, K)` patches without replacement.
pub fn run_random(
    scorer: &dyn BagScorer,
    source: &mut dyn PatchFeatures,
    budget: usize,
    seed: u64,
) -> Result<SamplingResult> {
    if source.is_empty() {
        return Err(Error::EmptyBag);
    }
    let mut rng = seed::rng(seed);
    let picked = index::sample(&mut rng, source.len(), budget.min(source.len())).into_vec();
    single_pass(scorer, source, picked)
}

/// Attention-guided active sampling. Bags smaller than the budget are
/// evaluated in full.
pub fn run_dras(
    scorer: &dyn BagScorer,
    source: &mut dyn PatchFeatures,
    config: &SamplingConfig,
) -> Result<SamplingResult> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyBag);
    }
    if source.len() < config.total_budget {
        return run_full(scorer, source);
    }
    let grid = GridIndex::new(source.coords());
    let mut rng = seed::rng(config.seed);
    let mut state = SamplerState::new(source.len());
    let mut features = Matrix::zeros(0, source.dim());
    let mut trace: Vec<TraceRow> = Vec::with_capacity(config.total_budget);
    let counts = config.iteration_counts();
    let mut forward_passes = 0;
    let mut last: Option<Forward> = None;

    for step in 0..=config.iterations {
        let n = counts.get(step).copied().unwrap_or(config.final_extra);
        let rate = random_rate_schedule(config.random_rate, config.random_delta, step);
        state.iteration = step;
        state.current_random_rate = rate;
        let draws = draw_iteration(&state, n, rate, &mut rng);
        let new: Vec<usize> = draws.iter().map(|d| d.index).collect();
        let first_row = state.sampled.len();
        source.encode_into(&new, &mut features)?;
        state.mark_sampled(&new);

        let fwd = scorer.score(&features)?;
        forward_passes += 1;
        let new_attention = &fwd.attention.scores[first_row..];
        let coords = source.coords();
        trace.extend(draws.iter().zip(new_attention).map(|(d, &a)| TraceRow {
            iteration: step,
            patch: d.index,
            x: coords[d.index].0,
            y: coords[d.index].1,
            drawn_randomly: d.random,
            weight_at_draw: d.weight,
            attention_after: a,
        }));
        if step < config.iterations {
            propagate_weights(
                &mut state,
                &grid,
                coords,
                &new,
                new_attention,
                config.neighbours,
            )?;
        }
        last = Some(fwd);
    }

    let fwd = last.expect("at least one step runs");
    Ok(SamplingResult {
        logits: fwd.logits,
        attention: fwd.attention.scores,
        patches_encoded: state.sampled.len(),
        sampled: state.sampled,
        weights: state.weights,
        forward_passes,
        trace,
    })
}

/// How a bag is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Full,
    Random { budget: usize },
    Dras(SamplingConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Random { .. } => "random",
            Method::Dras(_) => "dras",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Method::Full)
    }
}

/// Evaluate with `method`; `seed` overrides any seed inside the method.
pub fn evaluate(
    scorer: &dyn BagScorer,
    source: &mut dyn PatchFeatures,
    method: &Method,
    seed: u64,
) -> Result<SamplingResult> {
    match method {
        Method::Full => run_full(scorer, source),
        Method::Random { budget } => run_random(scorer, source, *budget, seed),
        Method::Dras(config) => run_dras(
            scorer,
            source,
            &SamplingConfig {
                seed,
                ..config.clone()
            },
        ),
    }
}

/// Seed of one (bag, repeat) evaluation.
pub fn repeat_seed(base: u64, slide_id: &str, repeat: usize) -> u64 {
    seed::derive(base, &["evaluate".into(), slide_id.into(), repeat.into()])
}

/// Evaluate every bag `repeats` times. Each cell's seed depends only on
/// `(base_seed, slide id, repeat)`, so the table does not depend on how the
/// work is scheduled across threads.
pub fn repeat_evaluate(
    scorer: &dyn BagScorer,
    bags: &[Bag],
    method: &Method,
    repeats: usize,
    base_seed: u64,
) -> Result<PredictionTable> {
    if repeats == 0 {
        return Err(Error::config("at least one repeat is required"));
    }
    let cells: Vec<(usize, usize)> = (0..bags.len())
        .flat_map(|b| (0..repeats).map(move |r| (b, r)))
        .collect();
    let probs = cells
        .par_iter()
        .map(|&(b, r)| {
            let bag = &bags[b];
            let seed = repeat_seed(base_seed, &bag.slide_id, r);
            evaluate(scorer, &mut CachedFeatures(bag), method, seed)
                .map(|res| res.positive_probability())
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = bags
        .iter()
        .zip(probs.chunks(repeats))
        .map(|(bag, p)| PredictionRow {
            slide_id: bag.slide_id.clone(),
            patient_id: bag.patient_id.clone(),
            label: bag.label,
            probabilities: p.to_vec(),
        })
        .collect();
    PredictionTable::new(rows)
}
