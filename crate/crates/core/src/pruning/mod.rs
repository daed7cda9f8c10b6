//! Binary masks and global magnitude pruning.
//!
//! A [`Mask`] holds one packed bit field per parameter tensor (1 = keep). Only
//! eligible tensors are ever pruned; ineligible ones stay all-ones. Pruning is
//! global: a single magnitude ranking is pooled across every eligible tensor,
//! so per-layer prune fractions differ.

mod bits;

pub use bits::BitField;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::models::{ParamKind, ParameterSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("mask alignment error: {0}")]
    Alignment(String),
    #[error("prune fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("parameter set has no initial snapshot to rewind to")]
    MissingSnapshot,
    #[error("ineligible tensor `{0}` must be all-ones")]
    FrozenPruned(String),
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

/// Which tensors may be pruned. The output layer, biases and norm parameters
/// are never eligible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Eligibility {
    /// Convolution weights; for a network without convolutions, its hidden
    /// linear weights.
    ConvOnly,
    /// Every non-head weight matrix or kernel.
    AllWeights,
}

impl Eligibility {
    pub fn as_str(self) -> &'static str {
        match self {
            Eligibility::ConvOnly => "conv-only",
            Eligibility::AllWeights => "all-weights",
        }
    }

    pub fn eligible_flags(self, params: &ParameterSet) -> Vec<bool> {
        let has_conv = params.iter().any(|p| p.kind == ParamKind::Conv);
        params
            .iter()
            .map(|p| {
                !p.head
                    && match (self, p.kind) {
                        (_, ParamKind::Conv) => true,
                        (Eligibility::AllWeights, ParamKind::Linear) => true,
                        (Eligibility::ConvOnly, ParamKind::Linear) => !has_conv,
                        _ => false,
                    }
            })
            .collect()
    }
}

impl FromStr for Eligibility {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "conv-only" => Ok(Eligibility::ConvOnly),
            "all-weights" => Ok(Eligibility::AllWeights),
            other => Err(format!("unknown eligibility rule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskEntry {
    name: String,
    bits: BitField,
    eligible: bool,
}

impl MaskEntry {
    pub fn new(name: impl Into<String>, bits: BitField, eligible: bool) -> Result<Self> {
        let name = name.into();
        if !eligible && !bits.all() {
            return Err(PruneError::FrozenPruned(name));
        }
        Ok(Self { name, bits, eligible })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bits(&self) -> &BitField {
        &self.bits
    }

    pub fn eligible(&self) -> bool {
        self.eligible
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.count_ones()
    }
}

/// Per-tensor keep bits aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Mask {
    entries: Vec<MaskEntry>,
}

impl Mask {
    pub fn new(entries: Vec<MaskEntry>) -> Self {
        Self { entries }
    }

    /// All-ones mask over `params` with eligibility from `rule`.
    pub fn ones_for(params: &ParameterSet, rule: Eligibility) -> Self {
        let flags = rule.eligible_flags(params);
        let entries = params
            .iter()
            .zip(flags)
            .map(|(p, eligible)| MaskEntry {
                name: p.name.clone(),
                bits: BitField::ones(p.value.numel()),
                eligible,
            })
            .collect();
        Self { entries }
    }

    /// A single eligible tensor, handy for small worked examples.
    pub fn single(name: &str, bits: &[bool]) -> Self {
        Self {
            entries: vec![MaskEntry {
                name: name.to_string(),
                bits: BitField::from_bools(bits),
                eligible: true,
            }],
        }
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(MaskEntry::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.entries.iter().map(MaskEntry::kept).sum()
    }

    pub fn eligible_total(&self) -> usize {
        self.entries.iter().filter(|e| e.eligible).map(MaskEntry::len).sum()
    }

    pub fn eligible_kept(&self) -> usize {
        self.entries.iter().filter(|e| e.eligible).map(MaskEntry::kept).sum()
    }

    pub fn zeros(&self) -> usize {
        self.total() - self.kept()
    }

    fn check_structure(&self, other: &Mask) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(PruneError::Alignment(format!(
                "{} tensors vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.len() != b.len() || a.eligible != b.eligible {
                return Err(PruneError::Alignment(format!(
                    "`{}` ({} elements) vs `{}` ({} elements)",
                    a.name,
                    a.len(),
                    b.name,
                    b.len()
                )));
            }
        }
        Ok(())
    }

    /// Checks that the mask has one entry per tensor with matching names and
    /// element counts.
    pub fn check_aligned(&self, params: &ParameterSet) -> Result<()> {
        if self.entries.len() != params.len() {
            return Err(PruneError::Alignment(format!(
                "mask has {} tensors, parameters have {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (e, p) in self.entries.iter().zip(params.iter()) {
            if e.name != p.name || e.len() != p.value.numel() {
                return Err(PruneError::Alignment(format!(
                    "mask `{}` ({} bits) vs parameter `{}` ({} elements)",
                    e.name,
                    e.len(),
                    p.name,
                    p.value.numel()
                )));
            }
        }
        Ok(())
    }

    /// Re-targets the mask at `params`, whose tensors must carry the same
    /// names. Ineligible tensors whose size changed (a replaced output layer)
    /// become all-ones; a size change in an eligible tensor is an error.
    pub fn conform_to(&self, params: &ParameterSet) -> Result<Mask> {
        if self.entries.len() != params.len() {
            return Err(PruneError::Alignment(format!(
                "mask has {} tensors, parameters have {}",
                self.entries.len(),
                params.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(params.iter())
            .map(|(e, p)| {
                let n = p.value.numel();
                if e.name != p.name {
                    return Err(PruneError::Alignment(format!(
                        "mask `{}` vs parameter `{}`",
                        e.name, p.name
                    )));
                }
                if e.len() == n {
                    return Ok(e.clone());
                }
                if e.eligible {
                    return Err(PruneError::Alignment(format!(
                        "mask `{}` ({} bits) vs parameter `{}` ({n} elements)",
                        e.name,
                        e.len(),
                        p.name
                    )));
                }
                Ok(MaskEntry {
                    name: e.name.clone(),
                    bits: BitField::ones(n),
                    eligible: false,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mask { entries })
    }

    /// Keeps only positions kept by both masks.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.check_structure(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| MaskEntry {
                name: a.name.clone(),
                bits: a.bits.and(&b.bits),
                eligible: a.eligible,
            })
            .collect();
        Ok(Mask { entries })
    }

    /// `true` if every kept position of `self` is kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.check_structure(other).is_ok()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.bits.is_subset_of(&b.bits))
    }

    /// Replaces one entry's bits, keeping its name and eligibility.
    pub fn set_bits(&mut self, index: usize, bits: BitField) -> Result<()> {
        let e = &mut self.entries[index];
        if bits.len() != e.len() {
            return Err(PruneError::Alignment(format!(
                "`{}` has {} bits, got {}",
                e.name,
                e.len(),
                bits.len()
            )));
        }
        if !e.eligible && !bits.all() {
            return Err(PruneError::FrozenPruned(e.name.clone()));
        }
        e.bits = bits;
        Ok(())
    }
}

/// Result of one global pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub mask: Mask,
    /// Bits cleared in this step.
    pub pruned: usize,
    /// Kept eligible weights before the step.
    pub remaining_before: usize,
    /// No bit could be cleared because `floor(p · remaining)` was zero.
    pub noop: bool,
}

/// Number of weights a step removes from `remaining`: `floor(p · remaining)`.
pub fn prune_count(remaining: usize, p: f64) -> usize {
    // The epsilon absorbs representation error in p (e.g. 0.29 · 100).
    (p * remaining as f64 + 1e-9).floor() as usize
}

/// Clears the `floor(p · R)` lowest-magnitude bits among the `R` kept,
/// eligible positions, ranking all eligible tensors together.
///
/// `weights[t]` are the values of the tensor behind `mask.entries()[t]`. Equal
/// magnitudes are ordered by tensor index, then flat index.
pub fn global_prune(weights: &[&[f32]], mask: &Mask, p: f64) -> Result<PruneOutcome> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PruneError::Fraction(p));
    }
    if weights.len() != mask.entries.len() {
        return Err(PruneError::Alignment(format!(
            "{} weight tensors for {} mask entries",
            weights.len(),
            mask.entries.len()
        )));
    }
    let mut candidates: Vec<(f32, u32, u32)> = Vec::new();
    for (t, (w, e)) in weights.iter().zip(&mask.entries).enumerate() {
        if w.len() != e.len() {
            return Err(PruneError::Alignment(format!(
                "`{}` has {} bits but {} weights",
                e.name,
                e.len(),
                w.len()
            )));
        }
        if !e.eligible {
            continue;
        }
        for (i, &v) in w.iter().enumerate() {
            if e.bits.get(i) {
                candidates.push((v.abs(), t as u32, i as u32));
            }
        }
    }
    let remaining = candidates.len();
    let k = prune_count(remaining, p);
    let mut out = mask.clone();
    if k == 0 {
        return Ok(PruneOutcome {
            mask: out,
            pruned: 0,
            remaining_before: remaining,
            noop: remaining > 0,
        });
    }
    let order = |a: &(f32, u32, u32), b: &(f32, u32, u32)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if k < remaining {
        candidates.select_nth_unstable_by(k, order);
    }
    for &(_, t, i) in &candidates[..k] {
        out.entries[t as usize].bits.set(i as usize, false);
    }
    Ok(PruneOutcome {
        mask: out,
        pruned: k,
        remaining_before: remaining,
        noop: false,
    })
}

/// [`global_prune`] over the current values of a parameter set.
pub fn prune_params(params: &ParameterSet, mask: &Mask, p: f64) -> Result<PruneOutcome> {
    mask.check_aligned(params)?;
    let weights: Vec<&[f32]> = params.iter().map(|p| p.value.data()).collect();
    global_prune(&weights, mask, p)
}

/// Sets every pruned position to exactly `0.0`.
pub fn apply_mask(params: &mut ParameterSet, mask: &Mask) -> Result<()> {
    mask.check_aligned(params)?;
    for (i, e) in mask.entries.iter().enumerate() {
        if e.bits.all() {
            continue;
        }
        let data = params.value_mut(i).data_mut();
        for (j, v) in data.iter_mut().enumerate() {
            if !e.bits.get(j) {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Zeroes gradient entries at pruned positions.
pub fn mask_gradients(params: &mut ParameterSet, mask: &Mask) -> Result<()> {
    mask.check_aligned(params)?;
    for (i, e) in mask.entries.iter().enumerate() {
        if e.bits.all() {
            continue;
        }
        if let Some(g) = params.value_mut(i).grad_mut() {
            for (j, v) in g.iter_mut().enumerate() {
                if !e.bits.get(j) {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// θ ← m ⊙ θ₀: kept weights return bit-exactly to their initial values.
pub fn rewind(params: &mut ParameterSet, mask: &Mask) -> Result<()> {
    mask.check_aligned(params)?;
    params.reset_to_initial().map_err(|_| PruneError::MissingSnapshot)?;
    apply_mask(params, mask)
}

/// Which parameters the prune rate is reported over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Denominator {
    AllParams,
    Eligible,
}

impl Denominator {
    pub fn as_str(self) -> &'static str {
        match self {
            Denominator::AllParams => "all",
            Denominator::Eligible => "eligible",
        }
    }
}

impl FromStr for Denominator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Denominator::AllParams),
            "eligible" => Ok(Denominator::Eligible),
            other => Err(format!("unknown denominator `{other}`")),
        }
    }
}

/// Exact prune rate `zeros / total`, displayed as a percentage to 0.1%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PruneRate {
    pub zeros: u64,
    pub total: u64,
}

impl PruneRate {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.zeros as f64 / self.total as f64
        }
    }

    /// Percentage in tenths, rounded half up with integer arithmetic.
    pub fn tenths(&self) -> u64 {
        if self.total == 0 {
            0
        } else {
            (self.zeros * 2000 + self.total) / (2 * self.total)
        }
    }
}

impl fmt::Display for PruneRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tenths();
        write!(f, "{}.{}%", t / 10, t % 10)
    }
}

pub fn prune_rate(mask: &Mask, denominator: Denominator) -> PruneRate {
    let (kept, total) = match denominator {
        Denominator::AllParams => (mask.kept(), mask.total()),
        Denominator::Eligible => (mask.eligible_kept(), mask.eligible_total()),
    };
    PruneRate {
        zeros: (total - kept) as u64,
        total: total as u64,
    }
}

/// Per-round prune fraction, eligibility and stopping target.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSchedule {
    pub fraction: f64,
    pub eligibility: Eligibility,
    /// Target sparsity in percent; 0 means "do not prune".
    pub target_sparsity: f64,
    pub target_denominator: Denominator,
    pub max_rounds: usize,
}

impl PruneSchedule {
    pub fn new(fraction: f64, target_sparsity: f64, max_rounds: usize) -> Result<Self> {
        let s = Self {
            fraction,
            eligibility: Eligibility::ConvOnly,
            target_sparsity,
            target_denominator: Denominator::Eligible,
            max_rounds,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(PruneError::Fraction(self.fraction));
        }
        if !(0.0..100.0).contains(&self.target_sparsity) {
            return Err(PruneError::Schedule(format!(
                "target sparsity must lie in [0, 100), got {}",
                self.target_sparsity
            )));
        }
        if self.max_rounds == 0 {
            return Err(PruneError::Schedule("max_rounds must be positive".into()));
        }
        Ok(())
    }

    pub fn reached(&self, mask: &Mask) -> bool {
        prune_rate(mask, self.target_denominator).percent() >= self.target_sparsity
    }
}
