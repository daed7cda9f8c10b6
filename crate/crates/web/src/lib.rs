//! Browser demo. Every export takes plain numbers and returns a JSON string.
//! The logic lives in plain functions so native tests can call them.

use colt::metrics::mask_similarity;
use colt::models::{Param, ParamKind, ParameterSet};
use colt::pruning::{global_prune, prune_rate, rewind, Denominator, Eligibility, Mask};
use colt::tensor::Tensor;
use colt::tickets::colt_mask_step;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ToyStep {
    pub m1: Vec<u8>,
    pub m2: Vec<u8>,
    pub merged: Vec<u8>,
    pub rewound: Vec<f32>,
    pub prune_rate: String,
}

#[derive(Debug, Serialize)]
pub struct ScheduleRow {
    pub round: usize,
    pub lth_pct: f64,
    pub colt_pct: f64,
}

#[derive(Debug, Serialize)]
pub struct SimilarityRow {
    pub sparsity_pct: f64,
    pub measured_pct: f64,
    pub expected_pct: f64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn single(name: &str, values: &[f32]) -> Result<ParameterSet, String> {
    let value = Tensor::new(&[values.len()], values.to_vec()).map_err(err)?;
    Ok(ParameterSet::new(vec![Param {
        name: name.into(),
        kind: ParamKind::Conv,
        head: false,
        value,
    }]))
}

fn bits(m: &Mask) -> Vec<u8> {
    m.entries()[0].bits().iter().map(u8::from).collect()
}

/// One overlapping-mask step on a single weight vector.
pub fn toy_step(theta0: &[f32], trained1: &[f32], trained2: &[f32], p: f64) -> Result<ToyStep, String> {
    if trained1.len() != theta0.len() || trained2.len() != theta0.len() {
        return Err("all three weight vectors need the same length".into());
    }
    let reference = single("w", theta0)?.with_snapshot();
    let ones = Mask::ones_for(&reference, Eligibility::ConvOnly);
    let step = colt_mask_step([&single("w", trained1)?, &single("w", trained2)?], &ones, &reference, p).map_err(err)?;
    let mut rewound = reference.clone();
    rewind(&mut rewound, &step.merged).map_err(err)?;
    Ok(ToyStep {
        m1: bits(&step.partition[0].mask),
        m2: bits(&step.partition[1].mask),
        merged: bits(&step.merged),
        rewound: rewound.params()[0].value.data().to_vec(),
        prune_rate: prune_rate(&step.merged, Denominator::AllParams).to_string(),
    })
}

/// Sparsity per round for single-model pruning and for two-model intersection.
///
/// Weights are redrawn every round. `overlap` in [0, 1] is the correlation
/// between the two models' magnitudes: 1 gives identical masks, 0 independent ones.
pub fn schedules(n: usize, p_lth: f64, p_colt: f64, overlap: f64, rounds: usize, seed: u64) -> Result<Vec<ScheduleRow>, String> {
    if n == 0 || rounds == 0 || !(0.0..=1.0).contains(&overlap) {
        return Err("need n > 0, rounds > 0 and overlap in [0, 1]".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let mut lth = Mask::single("w", &vec![true; n]);
    let mut colt = lth.clone();
    let pct = |m: &Mask| prune_rate(m, Denominator::Eligible).percent();
    let mut rows = vec![ScheduleRow { round: 0, lth_pct: 0.0, colt_pct: 0.0 }];
    let (a, b) = (overlap.sqrt() as f32, (1.0 - overlap).sqrt() as f32);
    for round in 1..=rounds {
        lth = global_prune(&[&draw(&mut rng)], &lth, p_lth).map_err(err)?.mask;
        let shared = draw(&mut rng);
        let mix = |own: Vec<f32>| -> Vec<f32> { shared.iter().zip(own).map(|(s, o)| a * s + b * o).collect() };
        let w1 = mix(draw(&mut rng));
        let w2 = mix(draw(&mut rng));
        let m1 = global_prune(&[&w1], &colt, p_colt).map_err(err)?.mask;
        let m2 = global_prune(&[&w2], &colt, p_colt).map_err(err)?.mask;
        colt = m1.intersect(&m2).map_err(err)?;
        rows.push(ScheduleRow { round, lth_pct: pct(&lth), colt_pct: pct(&colt) });
    }
    Ok(rows)
}

/// Similarity of two independent random masks at each sparsity, next to `s²`.
pub fn random_similarity(n: usize, sparsities: &[f64], seed: u64) -> Result<Vec<SimilarityRow>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_mask = |zeros: usize| {
        let mut keep = vec![true; n];
        for i in sample(&mut rng, n, zeros) {
            keep[i] = false;
        }
        Mask::single("w", &keep)
    };
    sparsities
        .iter()
        .map(|&s| {
            if !(0.0..=100.0).contains(&s) {
                return Err(format!("sparsity {s} is outside [0, 100]"));
            }
            let zeros = (s / 100.0 * n as f64).round() as usize;
            let (a, b) = (random_mask(zeros), random_mask(zeros));
            let actual = zeros as f64 / n as f64;
            Ok(SimilarityRow {
                sparsity_pct: 100.0 * actual,
                measured_pct: mask_similarity(&a, &b).map_err(err)?,
                expected_pct: 100.0 * actual * actual,
            })
        })
        .collect()
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(err)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = toyStep)]
pub fn toy_step_json(theta0: &[f32], trained1: &[f32], trained2: &[f32], p: f64) -> Result<String, JsValue> {
    json(toy_step(theta0, trained1, trained2, p))
}

#[wasm_bindgen(js_name = schedules)]
pub fn schedules_json(n: usize, p_lth: f64, p_colt: f64, overlap: f64, rounds: usize, seed: u32) -> Result<String, JsValue> {
    json(schedules(n, p_lth, p_colt, overlap, rounds, seed.into()))
}

#[wasm_bindgen(js_name = randomSimilarity)]
pub fn random_similarity_json(n: usize, sparsities: &[f64], seed: u32) -> Result<String, JsValue> {
    json(random_similarity(n, sparsities, seed.into()))
}
