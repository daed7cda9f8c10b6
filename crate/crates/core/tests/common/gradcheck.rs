//! Analytic gradients of whole models against central finite differences of
//! an independent `f64` forward pass.

use colt::models::{Arch, Model, ModelSpec, Norm, ParameterSet};
use colt::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, Pattern};

/// Steps tried in order; a smaller one is used only when the larger step
/// crosses a ReLU or max-pool decision.
const STEPS: [f64; 3] = [1e-3, 1e-5, 1e-6];

pub struct Case {
    pub spec: ModelSpec,
    pub input: Vec<f32>,
    pub batch: usize,
    pub labels: Vec<usize>,
}

pub fn random_case(seed: u64, norm: Norm) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..5);
    let spec = if seed % 2 == 0 {
        let side = rng.random_range(8..11);
        ModelSpec {
            arch: Arch::Conv3s,
            widths: (0..3).map(|_| rng.random_range(2..5)).collect(),
            num_classes: classes,
            input: [rng.random_range(1..3), side, side],
            norm,
        }
    } else {
        ModelSpec {
            arch: Arch::Mlp,
            widths: (0..2).map(|_| rng.random_range(3..9)).collect(),
            num_classes: classes,
            input: [1, rng.random_range(2..5), rng.random_range(2..5)],
            norm,
        }
    };
    let batch = rng.random_range(4..7);
    let numel = batch * spec.input.iter().product::<usize>();
    let input = (0..numel).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Case {
        spec,
        input,
        batch,
        labels,
    }
}

/// Loss of `spec` at parameters `theta` (ParameterSet order), in f64.
fn oracle_loss(case: &Case, theta: &[Vec<f64>], pat: &mut Pattern) -> f64 {
    let spec = &case.spec;
    let b = case.batch;
    let [c0, h0, w0] = spec.input;
    let x: Vec<f64> = case.input.iter().map(|&v| f64::from(v)).collect();
    let mut it = theta.iter();
    let mut next = || it.next().expect("parameter count").as_slice();
    let feats = match spec.arch {
        Arch::Conv3s => {
            let (mut x, mut c, mut h, mut w) = (x, c0, h0, w0);
            for &f in &spec.widths {
                let (k, bias) = (next(), next());
                let (mut y, oh, ow) = oracle::conv(&x, b, c, h, w, k, f, 3, bias, 1);
                if spec.norm == Norm::Batch {
                    let (g, be) = (next(), next());
                    y = oracle::batch_norm(&y, b, f, oh * ow, g, be);
                }
                oracle::relu(&mut y, pat);
                x = oracle::maxpool(&y, b * f, oh, ow, pat);
                (c, h, w) = (f, oh / 2, ow / 2);
            }
            oracle::gap(&x, b * c, h * w)
        }
        Arch::Mlp => {
            let (mut x, mut d) = (x, c0 * h0 * w0);
            for &f in &spec.widths {
                let (wt, bias) = (next(), next());
                let mut y = oracle::linear(&x, b, d, wt, bias, f);
                if spec.norm == Norm::Batch {
                    let (g, be) = (next(), next());
                    y = oracle::batch_norm(&y, b, f, 1, g, be);
                }
                oracle::relu(&mut y, pat);
                (x, d) = (y, f);
            }
            x
        }
    };
    let d = *spec.widths.last().unwrap();
    let (hw, hb) = (next(), next());
    let logits = oracle::linear(&feats, b, d, hw, hb, spec.num_classes);
    oracle::cross_entropy(&logits, spec.num_classes, &case.labels)
}

fn analytic(model: &Model, case: &Case) -> (f32, Vec<Vec<f32>>) {
    let [c, h, w] = case.spec.input;
    let x = Tensor::new(&[case.batch, c, h, w], case.input.clone()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let pass = model.forward(&mut tape, xv).unwrap();
    let loss = tape.softmax_cross_entropy(pass.logits, &case.labels).unwrap();
    tape.backward(loss).unwrap();
    let grads = pass
        .params
        .iter()
        .map(|&v| tape.grad(v).expect("every parameter is reached").to_vec())
        .collect();
    (tape.value(loss)[0], grads)
}

pub struct CheckSummary {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
}

/// Relative error with a floor on the denominator: for gradients smaller
/// than the floor the comparison is effectively absolute.
const REL_FLOOR: f64 = 1e-3;

pub fn check_case(seed: u64, norm: Norm) -> CheckSummary {
    let case = random_case(seed, norm);
    let mut model = Model::build(&case.spec, seed).unwrap();
    perturb_biases(model.params_mut(), seed);
    let (loss32, grads) = analytic(&model, &case);
    let theta: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    assert!(theta.iter().map(Vec::len).sum::<usize>() <= 1000, "small graphs only");
    let mut base_pat = Pattern::default();
    let base = oracle_loss(&case, &theta, &mut base_pat);
    assert!((base - f64::from(loss32)).abs() < 1e-5 * base.abs().max(1.0), "forward mismatch");

    let mut summary = CheckSummary {
        checked: 0,
        skipped: 0,
        worst_rel: 0.0,
    };
    for (t, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let Some(numeric) = central_difference(&case, &theta, t, j, &base_pat) else {
                summary.skipped += 1;
                continue;
            };
            let a = f64::from(g[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            summary.checked += 1;
            summary.worst_rel = summary.worst_rel.max(rel);
        }
    }
    summary
}

fn central_difference(case: &Case, theta: &[Vec<f64>], t: usize, j: usize, base: &Pattern) -> Option<f64> {
    STEPS.iter().find_map(|&h| {
        let mut plus = theta.to_vec();
        plus[t][j] += h;
        let mut minus = theta.to_vec();
        minus[t][j] -= h;
        let (mut pp, mut pm) = (Pattern::default(), Pattern::default());
        let fp = oracle_loss(case, &plus, &mut pp);
        let fm = oracle_loss(case, &minus, &mut pm);
        (pp == *base && pm == *base).then(|| (fp - fm) / (2.0 * h))
    })
}

/// Fresh models have zero biases, which puts ReLU inputs on exact ties;
/// nudge them so the check exercises generic points.
fn perturb_biases(params: &mut ParameterSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (_, t) in params.named_tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.2f32..0.2));
        }
    }
}
