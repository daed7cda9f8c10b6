//! Ticket generation: the iterative magnitude pruning baseline, the cyclic
//! overlapping variant, ticket evaluation with head replacement and transfer.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::{partition_by_class, DataError, Dataset, TrainTest};
use crate::metrics::{layer_collapse_report, CollapseReport};
use crate::models::{Model, ModelError, ModelSpec, ParameterSet};
use crate::pruning::{
    prune_params, prune_rate, rewind, BitField, Denominator, Eligibility, Mask, PruneError, PruneOutcome,
    PruneRate, PruneSchedule,
};
use crate::train::{evaluate, train_masked, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum TicketError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("layer collapse after round {round}: {}\n{report}", report.collapsed().join(", "))]
    LayerCollapse { round: usize, report: CollapseReport },
    #[error("round {round} pruned nothing: {remaining} eligible weights remain and floor(p * remaining) = 0")]
    NoOpRound { round: usize, remaining: usize },
    #[error("ticket does not fit the target model: {}", mismatches.join("; "))]
    Transfer { mismatches: Vec<String> },
    #[error("invalid ticket: {0}")]
    Invalid(String),
}

pub type Result<T, E = TicketError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dense,
    Lth,
    Colt,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Lth => "lth",
            Method::Colt => "colt",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dense" => Ok(Method::Dense),
            "lth" => Ok(Method::Lth),
            "colt" => Ok(Method::Colt),
            "random" => Ok(Method::Random),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Seeds for initialization, data handling (partitioning, validation splits,
/// batch order) and output-layer re-initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub head: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            head: seed,
        }
    }
}

/// Where a ticket came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub method: Method,
    pub source: String,
    pub target: Option<String>,
    pub rounds: usize,
    pub fraction: f64,
    pub eligibility: Eligibility,
    pub target_sparsity: f64,
    pub seeds: Seeds,
    pub init: String,
}

impl Provenance {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("method", self.method.to_string()),
            ("source", self.source.clone()),
            ("rounds", self.rounds.to_string()),
            ("fraction", self.fraction.to_string()),
            ("eligibility", self.eligibility.as_str().to_string()),
            ("target_sparsity", self.target_sparsity.to_string()),
            ("seed.init", self.seeds.init.to_string()),
            ("seed.data", self.seeds.data.to_string()),
            ("seed.head", self.seeds.head.to_string()),
            ("init", self.init.clone()),
        ];
        if let Some(t) = &self.target {
            out.push(("target", t.clone()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| TicketError::Invalid(format!("provenance lacks `{key}`")))
        };
        let parse = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| TicketError::Invalid(format!("provenance `{key}` is not a number")))
        };
        let seed = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| TicketError::Invalid(format!("provenance `{key}` is not an integer")))
        };
        Ok(Self {
            method: get("method")?.parse().map_err(TicketError::Invalid)?,
            source: get("source")?.to_string(),
            target: get("target").ok().map(str::to_string),
            rounds: seed("rounds")? as usize,
            fraction: parse("fraction")?,
            eligibility: get("eligibility")?.parse().map_err(TicketError::Invalid)?,
            target_sparsity: parse("target_sparsity")?,
            seeds: Seeds {
                init: seed("seed.init")?,
                data: seed("seed.data")?,
                head: seed("seed.head")?,
            },
            init: get("init")?.to_string(),
        })
    }
}

/// A mask together with the initial weights it was found for.
#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub spec: ModelSpec,
    pub mask: Mask,
    /// θ₀ for every tensor of `spec`; the head is replaced on evaluation.
    pub init: ParameterSet,
    pub provenance: Provenance,
}

impl Ticket {
    /// The all-ones ticket for a freshly initialized model.
    pub fn dense(spec: &ModelSpec, eligibility: Eligibility, seeds: Seeds, source: &str) -> Result<Self> {
        let init = Model::build(spec, seeds.init)?.into_params();
        Ok(Self {
            spec: spec.clone(),
            mask: Mask::ones_for(&init, eligibility),
            init,
            provenance: Provenance {
                method: Method::Dense,
                source: source.to_string(),
                target: None,
                rounds: 0,
                fraction: 0.0,
                eligibility,
                target_sparsity: 0.0,
                seeds,
                init: INIT_SCHEME.to_string(),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        Model::from_parts(self.spec.clone(), self.init.clone())?;
        self.mask.check_aligned(&self.init)?;
        Ok(())
    }

    pub fn sparsity(&self, denominator: Denominator) -> PruneRate {
        prune_rate(&self.mask, denominator)
    }
}

pub const INIT_SCHEME: &str = "xavier-uniform";

/// One pruning round of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub sparsity_all: PruneRate,
    pub sparsity_eligible: PruneRate,
    /// Eligible sparsity of each trained model's own mask before merging.
    pub model_sparsity: Vec<PruneRate>,
    /// Best validation accuracy of each model trained this round.
    pub val_acc: Vec<f64>,
    /// Test accuracy of the ticket retrained on the full dataset, when evaluated.
    pub full_acc: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TicketTrace {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

impl TicketTrace {
    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    /// First round whose sparsity under `denominator` is at least `percent`.
    pub fn rounds_to(&self, percent: f64, denominator: Denominator) -> Option<usize> {
        self.records
            .iter()
            .find(|r| sparsity_of(r, denominator).percent() >= percent)
            .map(|r| r.round)
    }
}

fn sparsity_of(r: &RoundRecord, d: Denominator) -> PruneRate {
    match d {
        Denominator::AllParams => r.sparsity_all,
        Denominator::Eligible => r.sparsity_eligible,
    }
}

/// Everything a run needs besides the data and model spec.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub schedule: PruneSchedule,
    pub seeds: Seeds,
    /// Sparsities (under the schedule's denominator) at which the current
    /// ticket is retrained on the full dataset and its test accuracy logged.
    pub milestones: Vec<f64>,
    /// Stop as soon as the retrained ticket reaches this test accuracy.
    /// Costs one full retraining per round.
    pub accuracy_target: Option<f64>,
    /// 1 trains the two partition models one after the other, 2 side by side.
    pub threads: usize,
    /// Dataset identifier recorded in provenance.
    pub source: String,
}

impl RunConfig {
    pub fn new(train: TrainConfig, schedule: PruneSchedule, seeds: Seeds) -> Self {
        Self {
            train,
            schedule,
            seeds,
            milestones: Vec::new(),
            accuracy_target: None,
            threads: 1,
            source: "unnamed".into(),
        }
    }

    /// Reads `COLT_THREADS` (1 or 2); anything else leaves the setting alone.
    pub fn threads_from_env(mut self) -> Self {
        if let Ok(v) = std::env::var("COLT_THREADS") {
            match v.trim() {
                "1" => self.threads = 1,
                "2" => self.threads = 2,
                _ => {}
            }
        }
        self
    }
}

/// Final ticket, per-round trace and the mask carried out of every round.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub ticket: Ticket,
    pub trace: TicketTrace,
    pub masks: Vec<Mask>,
}

fn round_seed(seed: u64, round: usize, model: usize) -> u64 {
    seed ^ ((round as u64) << 32 | model as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_collapse(mask: &Mask, round: usize) -> Result<()> {
    let report = layer_collapse_report(mask);
    if report.any_collapsed() {
        return Err(TicketError::LayerCollapse { round, report });
    }
    Ok(())
}

fn check_noop(out: &PruneOutcome, round: usize) -> Result<()> {
    if out.noop {
        return Err(TicketError::NoOpRound {
            round,
            remaining: out.remaining_before,
        });
    }
    Ok(())
}

fn split(d: &Dataset, cfg: &TrainConfig, seed: u64) -> (Dataset, Option<Dataset>) {
    if cfg.val_fraction > 0.0 {
        let (train, val) = d.split_validation(cfg.val_fraction, seed);
        (train, Some(val))
    } else {
        (d.clone(), None)
    }
}

fn val_accuracy(report: &TrainReport) -> f64 {
    report.best_val.as_ref().map_or(f64::NAN, |e| e.accuracy)
}

struct Driver<'a> {
    data: &'a TrainTest,
    spec: &'a ModelSpec,
    rc: &'a RunConfig,
    method: Method,
    mask: Mask,
    masks: Vec<Mask>,
    records: Vec<RoundRecord>,
    milestones: Vec<f64>,
    milestones_done: usize,
}

impl<'a> Driver<'a> {
    fn new(data: &'a TrainTest, spec: &'a ModelSpec, rc: &'a RunConfig, method: Method) -> Result<Self> {
        rc.schedule.validate()?;
        let reference = Model::build(spec, rc.seeds.init)?;
        let mut milestones = rc.milestones.clone();
        milestones.sort_by(f64::total_cmp);
        Ok(Self {
            data,
            spec,
            rc,
            method,
            mask: Mask::ones_for(reference.params(), rc.schedule.eligibility),
            masks: Vec::new(),
            records: Vec::new(),
            milestones,
            milestones_done: 0,
        })
    }

    fn ticket(&self, mask: Mask) -> Result<Ticket> {
        let mut t = Ticket::dense(self.spec, self.rc.schedule.eligibility, self.rc.seeds, &self.rc.source)?;
        t.mask = mask;
        t.provenance.method = self.method;
        t.provenance.rounds = self.records.len();
        t.provenance.fraction = self.rc.schedule.fraction;
        t.provenance.target_sparsity = self.rc.schedule.target_sparsity;
        Ok(t)
    }

    /// Logs a finished round; returns `true` when the run should stop.
    fn finish_round(&mut self, round: usize, merged: Mask, models: Vec<PruneRate>, val_acc: Vec<f64>, start: Instant) -> Result<bool> {
        check_collapse(&merged, round)?;
        self.mask = merged;
        let denominator = self.rc.schedule.target_denominator;
        let sparsity = prune_rate(&self.mask, denominator).percent();
        let crossed = self.milestones[self.milestones_done..].iter().take_while(|&&m| sparsity >= m).count();
        self.milestones_done += crossed;
        let mut full_acc = None;
        if crossed > 0 || self.rc.accuracy_target.is_some() {
            let ticket = self.ticket(self.mask.clone())?;
            full_acc = Some(evaluate_ticket(&ticket, self.data, &self.rc.train, self.rc.seeds)?.accuracy);
        }
        self.records.push(RoundRecord {
            round,
            sparsity_all: prune_rate(&self.mask, Denominator::AllParams),
            sparsity_eligible: prune_rate(&self.mask, Denominator::Eligible),
            model_sparsity: models,
            val_acc,
            full_acc,
            wall_s: start.elapsed().as_secs_f64(),
        });
        self.masks.push(self.mask.clone());
        let accurate = matches!((self.rc.accuracy_target, full_acc), (Some(t), Some(a)) if a >= t);
        Ok(accurate || self.rc.schedule.reached(&self.mask))
    }

    fn finish(self) -> Result<RunOutput> {
        let ticket = self.ticket(self.mask.clone())?;
        Ok(RunOutput {
            ticket,
            trace: TicketTrace {
                method: self.method,
                seed: self.rc.seeds.init,
                records: self.records,
            },
            masks: self.masks,
        })
    }
}

/// Iterative magnitude pruning: train the full model, prune `p` of the
/// remaining eligible weights globally, rewind to θ₀, repeat until the
/// target sparsity or the round limit.
pub fn run_lth(data: &TrainTest, spec: &ModelSpec, rc: &RunConfig) -> Result<RunOutput> {
    let mut driver = Driver::new(data, spec, rc, Method::Lth)?;
    let (train, val) = split(&data.train, &rc.train, rc.seeds.data);
    let mut model = Model::build(spec, rc.seeds.init)?;
    if rc.schedule.reached(&driver.mask) {
        return driver.finish();
    }
    for round in 1..=rc.schedule.max_rounds {
        let start = Instant::now();
        rewind(model.params_mut(), &driver.mask)?;
        let report = train_masked(
            &mut model,
            &driver.mask,
            &train,
            val.as_ref(),
            &rc.train,
            round_seed(rc.seeds.data, round, 0),
        )?;
        let out = prune_params(model.params(), &driver.mask, rc.schedule.fraction)?;
        check_noop(&out, round)?;
        let own = vec![prune_rate(&out.mask, Denominator::Eligible)];
        if driver.finish_round(round, out.mask, own, vec![val_accuracy(&report)], start)? {
            break;
        }
    }
    driver.finish()
}

/// Masks produced by one mask-generation step of the overlapping method.
#[derive(Debug, Clone, PartialEq)]
pub struct ColtStep {
    /// Each model's own mask after pruning `p` of its kept eligible weights.
    pub partition: [PruneOutcome; 2],
    /// `m⁽¹⁾ ∧ m⁽²⁾`, shaped like `reference`.
    pub merged: Mask,
}

/// Prunes both trained models from the shared `mask` and intersects the
/// results. `mask` and the merged mask follow `reference`'s layout; the two
/// models may differ from it only in output-layer size.
pub fn colt_mask_step(trained: [&ParameterSet; 2], mask: &Mask, reference: &ParameterSet, p: f64) -> Result<ColtStep> {
    let prune = |params: &ParameterSet| -> Result<PruneOutcome> {
        Ok(prune_params(params, &mask.conform_to(params)?, p)?)
    };
    let partition = [prune(trained[0])?, prune(trained[1])?];
    let merged = partition[0]
        .mask
        .conform_to(reference)?
        .intersect(&partition[1].mask.conform_to(reference)?)?;
    Ok(ColtStep { partition, merged })
}

/// Rewinds `model` to `mask ⊙ θ₀`, adapting the mask to its output layer.
pub fn rewind_to(model: &mut Model, mask: &Mask) -> Result<Mask> {
    let own = mask.conform_to(model.params())?;
    rewind(model.params_mut(), &own)?;
    Ok(own)
}

/// Cyclic overlapping pruning: the training classes are split once into two
/// halves; every round both half-models start from the same `m ⊙ θ₀`, are
/// trained, pruned by `p`, and their masks intersected into the next `m`.
pub fn run_colt(data: &TrainTest, spec: &ModelSpec, rc: &RunConfig) -> Result<RunOutput> {
    let mut driver = Driver::new(data, spec, rc, Method::Colt)?;
    let pair = partition_by_class(&data.train, rc.seeds.data)?;
    let halves = [&pair.first, &pair.second].map(|d| split(d, &rc.train, rc.seeds.data));
    let reference = Model::build(spec, rc.seeds.init)?;
    let mut models = Vec::with_capacity(2);
    for h in &halves {
        let half_spec = ModelSpec {
            num_classes: h.0.num_classes(),
            ..spec.clone()
        };
        models.push(Model::build(&half_spec, rc.seeds.init)?);
    }
    if rc.schedule.reached(&driver.mask) {
        return driver.finish();
    }
    for round in 1..=rc.schedule.max_rounds {
        let start = Instant::now();
        let mask = &driver.mask;
        let train_one = |k: usize, model: &mut Model| -> Result<TrainReport> {
            let own = rewind_to(model, mask)?;
            let (train, val) = &halves[k];
            Ok(train_masked(model, &own, train, val.as_ref(), &rc.train, round_seed(rc.seeds.data, round, k + 1))?)
        };
        let (a, b) = models.split_at_mut(1);
        let (m1, m2) = (&mut a[0], &mut b[0]);
        let (r1, r2) = if rc.threads >= 2 {
            std::thread::scope(|s| {
                let h = s.spawn(|| train_one(1, m2));
                let r1 = train_one(0, m1);
                (r1, h.join().expect("partition trainer panicked"))
            })
        } else {
            (train_one(0, m1), train_one(1, m2))
        };
        let reports = [r1?, r2?];
        let step = colt_mask_step([models[0].params(), models[1].params()], mask, reference.params(), rc.schedule.fraction)?;
        for out in &step.partition {
            check_noop(out, round)?;
        }
        let own = step.partition.iter().map(|o| prune_rate(&o.mask, Denominator::Eligible)).collect();
        let val_acc = reports.iter().map(val_accuracy).collect();
        if driver.finish_round(round, step.merged, own, val_acc, start)? {
            break;
        }
    }
    driver.finish()
}

/// Outcome of retraining a ticket.
#[derive(Debug, Clone, PartialEq)]
pub struct TicketEval {
    /// Test accuracy in percent.
    pub accuracy: f64,
    pub loss: f64,
    pub report: TrainReport,
    pub model: Model,
}

/// Loads the ticket's θ₀ into a model sized for `target_spec` and gives it a
/// freshly initialized output layer. Non-output tensors must match exactly.
pub fn instantiate(ticket: &Ticket, target_spec: &ModelSpec, head_seed: u64) -> Result<(Model, Mask)> {
    target_spec.validate()?;
    let reference = Model::build(target_spec, head_seed)?;
    let mut mismatches = Vec::new();
    if reference.params().len() != ticket.init.len() {
        mismatches.push(format!(
            "{} tensors in the ticket, {} in the target model",
            ticket.init.len(),
            reference.params().len()
        ));
    }
    for (t, r) in ticket.init.iter().zip(reference.params().iter()) {
        if t.name != r.name {
            mismatches.push(format!("`{}` vs `{}`", t.name, r.name));
        } else if !t.head && t.value.shape() != r.value.shape() {
            mismatches.push(format!("`{}`: {:?} vs {:?}", t.name, t.value.shape(), r.value.shape()));
        }
    }
    if !mismatches.is_empty() {
        return Err(TicketError::Transfer { mismatches });
    }
    let source_shaped = ModelSpec {
        num_classes: ticket.spec.num_classes,
        ..target_spec.clone()
    };
    let mut model = Model::from_parts(source_shaped, ticket.init.clone())?;
    model.replace_head(target_spec.num_classes, head_seed)?;
    let mask = ticket.mask.conform_to(model.params())?;
    Ok((model, mask))
}

fn target_spec(ticket: &Ticket, data: &TrainTest) -> ModelSpec {
    ModelSpec {
        num_classes: data.train.num_classes(),
        input: data.train.shape(),
        ..ticket.spec.clone()
    }
}

/// Retrains the ticket (with a new output layer) on `data.train` with the
/// mask enforced and reports test accuracy.
pub fn evaluate_ticket(ticket: &Ticket, data: &TrainTest, cfg: &TrainConfig, seeds: Seeds) -> Result<TicketEval> {
    let (mut model, mask) = instantiate(ticket, &target_spec(ticket, data), seeds.head)?;
    let (train, val) = split(&data.train, cfg, seeds.data);
    let report = train_masked(&mut model, &mask, &train, val.as_ref(), cfg, seeds.data)?;
    let eval = evaluate(&model, &data.test)?;
    Ok(TicketEval {
        accuracy: eval.accuracy,
        loss: eval.loss,
        report,
        model,
    })
}

/// Like [`evaluate_ticket`] on another dataset; also returns the ticket's
/// provenance with the target recorded.
pub fn transfer_ticket(
    ticket: &Ticket,
    target: &TrainTest,
    target_name: &str,
    cfg: &TrainConfig,
    seeds: Seeds,
) -> Result<(TicketEval, Provenance)> {
    let eval = evaluate_ticket(ticket, target, cfg, seeds)?;
    let mut provenance = ticket.provenance.clone();
    provenance.target = Some(format!("{}->{}", ticket.provenance.source, target_name));
    Ok((eval, provenance))
}

/// Trains a freshly initialized unpruned model on `data`.
pub fn train_dense(data: &TrainTest, spec: &ModelSpec, cfg: &TrainConfig, seeds: Seeds) -> Result<TicketEval> {
    let spec = ModelSpec {
        num_classes: data.train.num_classes(),
        input: data.train.shape(),
        ..spec.clone()
    };
    let mut model = Model::build(&spec, seeds.init)?;
    let mask = Mask::ones_for(model.params(), Eligibility::ConvOnly);
    let (train, val) = split(&data.train, cfg, seeds.data);
    let report = train_masked(&mut model, &mask, &train, val.as_ref(), cfg, seeds.data)?;
    let eval = evaluate(&model, &data.test)?;
    Ok(TicketEval {
        accuracy: eval.accuracy,
        loss: eval.loss,
        report,
        model,
    })
}

/// Control ticket: within each eligible tensor the kept positions are
/// re-drawn uniformly at random, keeping every tensor's kept count.
pub fn random_ticket(ticket: &Ticket, seed: u64) -> Result<Ticket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = ticket.mask.clone();
    for i in 0..mask.entries().len() {
        let e = &mask.entries()[i];
        if !e.eligible() {
            continue;
        }
        let mut bits: Vec<bool> = e.bits().iter().collect();
        bits.shuffle(&mut rng);
        mask.set_bits(i, BitField::from_bools(&bits))?;
    }
    let mut out = ticket.clone();
    out.mask = mask;
    out.provenance.method = Method::Random;
    Ok(out)
}
