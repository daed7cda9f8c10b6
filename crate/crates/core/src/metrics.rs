//! Accuracy, mask similarity and layer-collapse accounting.

use thiserror::Error;

use crate::pruning::{prune_rate, Denominator, Mask, PruneError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("accuracy is undefined for empty input")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error(transparent)]
    Mask(#[from] PruneError),
}

/// `100 · correct / total`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Length {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Percentage of all parameters pruned in both masks.
pub fn mask_similarity(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    a.intersect(b)?;
    let common: usize = a
        .entries()
        .iter()
        .zip(b.entries())
        .map(|(x, y)| x.bits().count_common_zeros(y.bits()))
        .sum();
    let total = a.total();
    Ok(if total == 0 { 0.0 } else { 100.0 * common as f64 / total as f64 })
}

/// One similarity sample between two pruning runs at comparable sparsity.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSimilarity {
    pub round_a: usize,
    pub round_b: usize,
    pub sparsity_a: f64,
    pub sparsity_b: f64,
    pub similarity: f64,
}

/// For every mask of run `a` (rounds `1..`), pairs it with the mask of run
/// `b` whose all-params sparsity is nearest and reports their similarity.
pub fn matched_similarity(a: &[Mask], b: &[Mask]) -> Result<Vec<MatchedSimilarity>, MetricsError> {
    let sparsity = |m: &Mask| prune_rate(m, Denominator::AllParams).percent();
    let sb: Vec<f64> = b.iter().map(sparsity).collect();
    let mut out = Vec::with_capacity(a.len());
    for (i, ma) in a.iter().enumerate() {
        let sa = sparsity(ma);
        let Some((j, _)) = sb
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1 - sa).abs().total_cmp(&(y.1 - sa).abs()))
        else {
            break;
        };
        out.push(MatchedSimilarity {
            round_a: i + 1,
            round_b: j + 1,
            sparsity_a: sa,
            sparsity_b: sb[j],
            similarity: mask_similarity(ma, &b[j])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatus {
    pub name: String,
    pub eligible: bool,
    pub kept: usize,
    pub total: usize,
}

impl LayerStatus {
    pub fn kept_fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }

    pub fn collapsed(&self) -> bool {
        self.eligible && self.total > 0 && self.kept == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub layers: Vec<LayerStatus>,
}

impl CollapseReport {
    pub fn collapsed(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.collapsed())
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn any_collapsed(&self) -> bool {
        self.layers.iter().any(LayerStatus::collapsed)
    }
}

impl std::fmt::Display for CollapseReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.layers {
            writeln!(
                f,
                "{:<16} {:>8}/{:<8} {:6.2}%{}",
                l.name,
                l.kept,
                l.total,
                100.0 * l.kept_fraction(),
                if l.collapsed() { "  COLLAPSED" } else { "" }
            )?;
        }
        Ok(())
    }
}

pub fn layer_collapse_report(m: &Mask) -> CollapseReport {
    CollapseReport {
        layers: m
            .entries()
            .iter()
            .map(|e| LayerStatus {
                name: e.name().to_string(),
                eligible: e.eligible(),
                kept: e.kept(),
                total: e.len(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{BitField, MaskEntry};

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]).unwrap(), 50.0);
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(accuracy(&[3; 100], &labels).unwrap(), 10.0);
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(MetricsError::Length { .. })));
    }

    #[test]
    fn similarity_cases() {
        let mut bits = vec![true; 10];
        bits[..3].fill(false);
        let m = Mask::single("w", &bits);
        assert!((mask_similarity(&m, &m).unwrap() - 30.0).abs() < 1e-12);

        let mut a = vec![true; 10];
        a[0] = false;
        let mut b = vec![true; 10];
        b[9] = false;
        let (a, b) = (Mask::single("w", &a), Mask::single("w", &b));
        assert_eq!(mask_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(mask_similarity(&a, &b).unwrap(), mask_similarity(&b, &a).unwrap());
    }

    #[test]
    fn collapse_flags_empty_eligible_tensor() {
        let m = Mask::new(vec![
            MaskEntry::new("a", BitField::zeros(4), true).unwrap(),
            MaskEntry::new("b", BitField::ones(4), true).unwrap(),
            MaskEntry::new("c", BitField::ones(2), false).unwrap(),
        ]);
        let r = layer_collapse_report(&m);
        assert_eq!(r.collapsed(), ["a"]);
        assert!(r.to_string().contains("COLLAPSED"));

        let ones = Mask::single("w", &[true; 5]);
        let r = layer_collapse_report(&ones);
        assert!(!r.any_collapsed());
        assert!(r.layers.iter().all(|l| l.kept_fraction() == 1.0));
    }

    #[test]
    fn matched_pairs_pick_nearest_sparsity() {
        let mk = |zeros: usize| {
            let mut b = vec![true; 10];
            b[..zeros].fill(false);
            Mask::single("w", &b)
        };
        let a = [mk(3), mk(6)];
        let b = [mk(2), mk(4), mk(6), mk(8)];
        let got = matched_similarity(&a, &b).unwrap();
        assert_eq!(got[0].round_b, 1); // 20% vs 40%: tie resolved to the first
        assert_eq!(got[1].round_b, 3);
        assert_eq!(got[1].similarity, 60.0);
    }
}
