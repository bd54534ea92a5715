//! Unsupervised checkpoint selection from predicted-area ratios and held-out source dice losses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Mean foreground pixels per slice of each class in the source ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaStats {
    /// Index `c − 1` holds class `c`.
    pub savg: Vec<f64>,
    pub slices: usize,
}

fn class_counts(masks: &[&[u8]], classes: u8) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes as usize];
    for m in masks {
        for &v in *m {
            if v >= classes {
                bail!(Validation, "label {v} outside {classes} classes");
            }
            counts[v as usize] += 1;
        }
    }
    Ok(counts)
}

/// Slices without a class still count in its denominator.
pub fn source_area_stats(masks: &[&[u8]], classes: u8) -> Result<AreaStats> {
    if masks.is_empty() {
        bail!(Validation, "area statistics need at least one mask slice");
    }
    if classes < 2 {
        bail!(Config, "need at least one foreground class");
    }
    let counts = class_counts(masks, classes)?;
    let n = masks.len() as f64;
    Ok(AreaStats {
        savg: counts[1..].iter().map(|&c| c as f64 / n).collect(),
        slices: masks.len(),
    })
}

/// `r_c` per foreground class; classes listed in `excluded` yield `None`.
pub fn area_ratio(
    predicted: &[&[u8]],
    stats: &AreaStats,
    excluded: &[u8],
) -> Result<Vec<Option<f64>>> {
    if predicted.is_empty() {
        bail!(Validation, "no predicted target slices");
    }
    let classes = stats.savg.len() as u8 + 1;
    let counts = class_counts(predicted, classes)?;
    let n = predicted.len() as f64;
    let mut out = Vec::with_capacity(stats.savg.len());
    for (i, &s) in stats.savg.iter().enumerate() {
        let c = i as u8 + 1;
        if excluded.contains(&c) {
            out.push(None);
            continue;
        }
        if s == 0.0 {
            bail!(DegenerateStats, "class {c} never occurs in the source masks; exclude it explicitly to score the rest");
        }
        out.push(Some(counts[c as usize] as f64 / n / s));
    }
    Ok(out)
}

/// `Σ_c |r_c − 1| + Σ_c diceLoss_c`.
pub fn validation_loss(ratios: &[f64], dice_losses: &[f64]) -> f64 {
    ratios.iter().map(|r| (r - 1.0).abs()).sum::<f64>() + dice_losses.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub id: String,
    pub step: u64,
    pub ratios: Vec<Option<f64>>,
    pub dice_losses: Vec<f64>,
    pub loss: f64,
}

impl CandidateScore {
    pub fn new(
        id: &str,
        step: u64,
        ratios: Vec<Option<f64>>,
        dice_losses: Vec<f64>,
    ) -> Result<Self> {
        let scored: Vec<f64> = ratios.iter().flatten().copied().collect();
        if scored.iter().chain(&dice_losses).any(|v| !v.is_finite()) {
            bail!(Validation, "candidate {id} has non-finite inputs");
        }
        let loss = validation_loss(&scored, &dice_losses);
        Ok(CandidateScore {
            id: id.into(),
            step,
            ratios,
            dice_losses,
            loss,
        })
    }
}

/// Lowest validation loss; ties go to the later step.
pub fn select_checkpoint(candidates: &[CandidateScore]) -> Result<&CandidateScore> {
    let Some(mut best) = candidates.first() else {
        bail!(Validation, "no candidates to select from");
    };
    for c in &candidates[1..] {
        if c.loss < best.loss || (c.loss == best.loss && c.step > best.step) {
            best = c;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_class_needs_exclusion() {
        let gt: Vec<u8> = vec![0, 1, 1, 0];
        let stats = source_area_stats(&[&gt], 3).unwrap();
        assert_eq!(stats.savg, vec![2.0, 0.0]);
        assert!(area_ratio(&[&gt], &stats, &[]).is_err());
        assert_eq!(
            area_ratio(&[&gt], &stats, &[2]).unwrap(),
            vec![Some(1.0), None]
        );
    }

    #[test]
    fn non_finite_candidate_rejected() {
        assert!(CandidateScore::new("a", 1, vec![Some(f64::NAN)], vec![]).is_err());
    }
}
