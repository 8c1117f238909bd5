use std::collections::BTreeSet;

use drasmil::model::{AttentionResult, Forward};
use drasmil::sampler::{
    draw_iteration, evaluate, run_dras, run_full, run_random, BagScorer, CachedFeatures,
    SamplerState,
};
use drasmil::slide::Coord;
use drasmil::{Bag, Matrix, Method, ModelDims, ModelParams, SamplingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn grid_bag(w: u32, h: u32, dim: usize, seed: u64) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Coord> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
    let data = (0..coords.len() * dim).map(|_| rng.sample(StandardNormal)).collect();
    let features = Matrix::from_vec(coords.len(), dim, data).unwrap();
    Bag::new("g", "p", 1, coords, features).unwrap()
}

fn model(l: usize, m: usize) -> ModelParams {
    ModelParams::init(&ModelDims::standard(l, m), 11).unwrap()
}

fn chi2_critical(dof: usize) -> f64 {
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.999)
}

fn dist2(a: Coord, b: Coord) -> i64 {
    let dx = a.0 as i64 - b.0 as i64;
    let dy = a.1 as i64 - b.1 as i64;
    dx * dx + dy * dy
}

/// Brute-force k nearest eligible patches, ties by ascending index.
fn brute_knn(coords: &[Coord], centre: Coord, k: usize, eligible: &[bool]) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..coords.len()).filter(|&i| eligible[i]).collect();
    cand.sort_by_key(|&i| (dist2(coords[i], centre), i));
    cand.truncate(k);
    cand
}

#[test]
fn random_baseline_covers_patches_uniformly() {
    let bag = grid_bag(100, 160, 2, 1);
    let params = model(2, 2);
    let k = bag.len();
    let mut hits = vec![0u32; k];
    let runs = 10_000;
    for s in 0..runs {
        let r = run_random(&params, &mut CachedFeatures(&bag), 800, s).unwrap();
        assert_eq!(r.sampled.len(), 800);
        assert_eq!(r.sampled.iter().collect::<BTreeSet<_>>().len(), 800);
        for &i in &r.sampled {
            hits[i] += 1;
        }
    }
    let expected = runs as f64 * 800.0 / k as f64;
    let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < chi2_critical(k - 1), "chi2 {chi2}");
}

#[test]
fn random_budget_above_bag_matches_full_up_to_order() {
    let bag = grid_bag(6, 5, 3, 2);
    let params = model(4, 3);
    let full = run_full(&params, &mut CachedFeatures(&bag)).unwrap();
    let r = run_random(&params, &mut CachedFeatures(&bag), 800, 3).unwrap();
    let mut sorted = r.sampled.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, full.sampled);
    for c in 0..2 {
        assert!((r.logits[c] - full.logits[c]).abs() < 1e-12);
    }
}

#[test]
fn full_rate_dras_includes_every_patch_equally_often() {
    let bag = grid_bag(40, 25, 3, 3);
    let params = model(4, 3);
    let cfg = SamplingConfig {
        random_rate: 1.0,
        random_delta: 0.0,
        ..SamplingConfig::default()
    };
    let mut hits = vec![0u32; bag.len()];
    let runs = 4000;
    for s in 0..runs {
        let r = evaluate(&params, &mut CachedFeatures(&bag), &Method::Dras(cfg.clone()), s).unwrap();
        assert!(r.trace.iter().all(|t| t.drawn_randomly));
        for &i in &r.sampled {
            hits[i] += 1;
        }
    }
    // each patch is included with probability 0.8; use a binomial z-bound per cell
    let p = 0.8;
    let n = runs as f64;
    let sd = (n * p * (1.0 - p)).sqrt();
    let chi2: f64 = hits.iter().map(|&h| ((h as f64 - n * p) / sd).powi(2)).sum();
    assert!(chi2 < chi2_critical(bag.len() - 1) * 1.1, "chi2 {chi2}");
}

#[test]
fn three_to_one_weights_pick_heavier_patch() {
    let mut state = SamplerState::new(2);
    state.weights = vec![3.0, 1.0];
    let mut a = 0;
    let trials = 100_000;
    for s in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        if draw_iteration(&state, 1, 0.0, &mut rng)[0].index == 0 {
            a += 1;
        }
    }
    let f = a as f64 / trials as f64;
    assert!((f - 0.75).abs() <= 0.01, "frequency {f}");
}

#[test]
fn second_weighted_draw_renormalises() {
    // P(second = B | first = A) = wB / (wB + wC)
    let mut state = SamplerState::new(3);
    state.weights = vec![2.0, 1.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut first_a, mut then_b) = (0, 0);
    for _ in 0..100_000 {
        let d = draw_iteration(&state, 2, 0.0, &mut rng);
        if d[0].index == 0 {
            first_a += 1;
            if d[1].index == 1 {
                then_b += 1;
            }
        }
    }
    let p_first = first_a as f64 / 100_000.0;
    let p_then = then_b as f64 / first_a as f64;
    assert!((p_first - 0.5).abs() < 0.01, "{p_first}");
    assert!((p_then - 0.5).abs() < 0.01, "{p_then}");
}

#[test]
fn dras_is_deterministic_per_seed() {
    let bag = grid_bag(40, 30, 4, 7);
    let params = model(6, 4);
    let cfg = SamplingConfig {
        seed: 99,
        ..SamplingConfig::default()
    };
    let a = run_dras(&params, &mut CachedFeatures(&bag), &cfg).unwrap();
    let b = run_dras(&params, &mut CachedFeatures(&bag), &cfg).unwrap();
    assert_eq!(a, b);
    let c = run_dras(
        &params,
        &mut CachedFeatures(&bag),
        &SamplingConfig { seed: 100, ..cfg },
    )
    .unwrap();
    assert_ne!(a.sampled, c.sampled);
}

#[test]
fn dras_samples_without_replacement_and_counts_match_trace() {
    let params = model(6, 4);
    for (w, h, seed) in [(30, 30, 1), (29, 28, 2), (40, 40, 3)] {
        let bag = grid_bag(w, h, 4, seed);
        let cfg = SamplingConfig {
            seed,
            ..SamplingConfig::default()
        };
        let r = run_dras(&params, &mut CachedFeatures(&bag), &cfg).unwrap();
        assert_eq!(r.sampled.len(), 800.min(bag.len()));
        assert_eq!(r.sampled.iter().collect::<BTreeSet<_>>().len(), r.sampled.len());
        assert_eq!(r.trace.len(), r.patches_encoded);
        assert_eq!(r.attention.len(), r.sampled.len());
        for &i in &r.sampled {
            assert_eq!(r.weights[i], 0.0);
        }
    }
}

/// Replays propagation with brute-force neighbour search from the trace.
fn replay_weights(bag: &Bag, trace: &[drasmil::sampler::TraceRow], k: usize, iterations: usize) -> Vec<f64> {
    let n = bag.len();
    let mut weights = vec![0.0; n];
    let mut sampled = vec![false; n];
    for it in 0..=iterations {
        let rows: Vec<_> = trace.iter().filter(|t| t.iteration == it).collect();
        for r in &rows {
            sampled[r.patch] = true;
            weights[r.patch] = 0.0;
        }
        if it == iterations {
            break;
        }
        let eligible: Vec<bool> = sampled.iter().map(|s| !s).collect();
        for r in &rows {
            for j in brute_knn(&bag.coords, bag.coords[r.patch], k, &eligible) {
                weights[j] = f64::max(weights[j], r.attention_after);
            }
        }
    }
    weights
}

#[test]
fn weight_map_matches_brute_force_replay() {
    let params = model(6, 4);
    for (w, h, k, it) in [(30, 30, 64, 10), (30, 27, 8, 4), (29, 30, 48, 16), (28, 30, 4, 2)] {
        let bag = grid_bag(w, h, 4, (w * h) as u64 + k as u64);
        let cfg = SamplingConfig {
            neighbours: k,
            iterations: it,
            seed: 17,
            ..SamplingConfig::default()
        };
        let r = run_dras(&params, &mut CachedFeatures(&bag), &cfg).unwrap();
        let expected = replay_weights(&bag, &r.trace, k, it);
        assert_eq!(r.weights, expected, "grid {w}x{h} k={k}");
    }
}

/// Attention concentrated entirely on the patch whose first feature is
/// largest; features encode closeness to a planted point.
struct OneHot;

impl BagScorer for OneHot {
    fn score(&self, features: &Matrix) -> drasmil::Result<Forward> {
        let top = (0..features.rows())
            .max_by(|&a, &b| features.get(a, 0).total_cmp(&features.get(b, 0)).then(b.cmp(&a)))
            .unwrap();
        let logits = (0..features.rows())
            .map(|i| if i == top { 0.0 } else { -1e6 })
            .collect();
        Ok(Forward {
            logits: [0.0, 0.0],
            attention: AttentionResult::from_logits(logits, features),
        })
    }
}

#[test]
fn exploitation_stays_in_neighbourhood_of_top_patch() {
    let (w, h) = (30u32, 30u32);
    for (plant, seed) in [((5u32, 7u32), 1u64), ((22, 20), 2), ((15, 15), 3), ((0, 29), 4)] {
        let coords: Vec<Coord> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        let data: Vec<f64> = coords.iter().map(|&c| -(dist2(c, plant) as f64).sqrt()).collect();
        let bag = Bag::new("p", "p", 1, coords.clone(), Matrix::from_vec(coords.len(), 1, data).unwrap()).unwrap();
        let cfg = SamplingConfig {
            total_budget: 60,
            final_extra: 10,
            iterations: 5,
            neighbours: 64,
            random_rate: 0.0,
            random_delta: 0.5,
            seed,
        };
        let r = run_dras(&OneHot, &mut CachedFeatures(&bag), &cfg).unwrap();

        let mut sampled = vec![false; bag.len()];
        let mut closure = vec![false; bag.len()];
        for it in 0..=cfg.iterations {
            let rows: Vec<_> = r.trace.iter().filter(|t| t.iteration == it).collect();
            if it > 0 {
                for t in &rows {
                    assert!(!t.drawn_randomly, "iteration {it} drew randomly");
                    assert!(closure[t.patch], "patch {} outside the closure", t.patch);
                }
            }
            for t in &rows {
                sampled[t.patch] = true;
            }
            let eligible: Vec<bool> = sampled.iter().map(|s| !s).collect();
            for t in rows.iter().filter(|t| t.attention_after == 1.0) {
                for j in brute_knn(&coords, coords[t.patch], cfg.neighbours, &eligible) {
                    closure[j] = true;
                }
            }
        }
        // the sampler homes in on the plant
        let best = r.sampled.iter().map(|&i| dist2(coords[i], plant)).min().unwrap();
        assert!(best <= 2, "closest sample at squared distance {best}");
    }
}

#[test]
fn rate_schedule_never_increases_in_trace() {
    let bag = grid_bag(40, 40, 4, 8);
    let params = model(6, 4);
    let cfg = SamplingConfig {
        seed: 3,
        ..SamplingConfig::default()
    };
    let r = run_dras(&params, &mut CachedFeatures(&bag), &cfg).unwrap();
    let counts = cfg.iteration_counts();
    let mut prev = f64::INFINITY;
    for it in 0..cfg.iterations {
        let random = r.trace.iter().filter(|t| t.iteration == it && t.drawn_randomly).count();
        let frac = random as f64 / counts[it] as f64;
        if it == 0 {
            assert_eq!(frac, 1.0);
        }
        // top-ups can only raise the uniform share, never lower it
        let rate = drasmil::sampler::random_rate_schedule(cfg.random_rate, cfg.random_delta, it);
        assert!(frac + 1e-12 >= (rate * counts[it] as f64).floor() / counts[it] as f64);
        assert!(rate <= prev);
        prev = rate;
    }
}
