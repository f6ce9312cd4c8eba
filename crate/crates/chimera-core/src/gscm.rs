//! Generalist-specialist collaboration masking.
//!
//! During instruction tuning a uniform random subset of general visual
//! token positions is hidden from attention (the tokens stay in place;
//! only their attention bits flip to False). Ratio 1.0 carries special
//! semantics: with probability 0.8 everything is masked, otherwise
//! nothing, so the model still sees unmasked general features in a fifth
//! of the steps.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::EmbeddingSequence;
use crate::error::{ChimeraError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub total: usize,
    pub masked_positions: BTreeSet<usize>,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn empty(total: usize) -> Self {
        MaskSpec { total, masked_positions: BTreeSet::new(), ratio: 0.0 }
    }

    pub fn from_positions(total: usize, positions: impl IntoIterator<Item = usize>) -> Self {
        let masked_positions: BTreeSet<usize> = positions.into_iter().collect();
        assert!(masked_positions.iter().all(|&p| p < total), "position out of range");
        let ratio = masked_positions.len() as f64 / total.max(1) as f64;
        MaskSpec { total, masked_positions, ratio }
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.total).map(|i| !self.masked_positions.contains(&i)).collect()
    }
}

/// Draws a mask over `n` positions. For ratio < 1 exactly
/// `floor(ratio * n)` positions are chosen uniformly without replacement;
/// floor keeps the draw deterministic in size and never exceeds the ratio.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    if n == 0 {
        return Err(ChimeraError::config("mask over an empty sequence"));
    }
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(ChimeraError::config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let masked: BTreeSet<usize> = if ratio == 1.0 {
        // mask-everything would cut the general encoder off entirely, so
        // it applies only with probability 0.8
        if rng.random::<f64>() < 0.8 {
            (0..n).collect()
        } else {
            BTreeSet::new()
        }
    } else {
        let k = (ratio * n as f64).floor() as usize;
        // partial Fisher-Yates: first k entries are a uniform k-subset
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx.into_iter().collect()
    };
    Ok(MaskSpec { total: n, masked_positions: masked, ratio })
}

/// A general-visual span with its attention bits.
#[derive(Clone, Debug)]
pub struct MaskedSequence {
    pub sequence: EmbeddingSequence,
    pub bits: Vec<bool>,
}

/// Applies a mask: token vectors and positions are untouched, only the
/// attention bits carry the masking.
pub fn apply_mask(general: &EmbeddingSequence, mask: &MaskSpec) -> Result<MaskedSequence> {
    if mask.total != general.vectors.rows {
        return Err(ChimeraError::contract(format!(
            "mask over {} positions applied to a {}-token span",
            mask.total, general.vectors.rows
        )));
    }
    Ok(MaskedSequence { sequence: general.clone(), bits: mask.bits() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::SpanLabel;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    #[test]
    fn count_is_floor_of_ratio() {
        let mut r = stream(1, "mask", 0);
        let m = sample_mask(256, 0.3, &mut r).unwrap();
        assert_eq!(m.masked_positions.len(), 76);
        for _ in 0..50 {
            let m = sample_mask(33, 0.25, &mut r).unwrap();
            assert_eq!(m.masked_positions.len(), 8); // floor(8.25)
            assert!(m.masked_positions.iter().all(|&p| p < 33));
        }
    }

    #[test]
    fn ratio_zero_is_empty() {
        let mut r = stream(2, "mask", 0);
        let m = sample_mask(64, 0.0, &mut r).unwrap();
        assert!(m.masked_positions.is_empty());
    }

    #[test]
    fn ratio_one_masks_all_or_none() {
        let mut r = stream(3, "mask", 0);
        let mut all = 0;
        let mut none = 0;
        for _ in 0..500 {
            let m = sample_mask(256, 1.0, &mut r).unwrap();
            match m.masked_positions.len() {
                256 => all += 1,
                0 => none += 1,
                k => panic!("partial mask {k} under ratio 1.0"),
            }
        }
        assert!(all > 350 && none > 50, "all={all} none={none}");
    }

    #[test]
    fn out_of_range_ratio_rejected() {
        let mut r = stream(4, "mask", 0);
        assert!(sample_mask(8, -0.1, &mut r).is_err());
        assert!(sample_mask(8, 1.5, &mut r).is_err());
        assert!(sample_mask(0, 0.5, &mut r).is_err());
    }

    fn general(rows: usize) -> EmbeddingSequence {
        EmbeddingSequence {
            vectors: Tensor::from_vec(rows, 2, (0..rows * 2).map(|i| i as f64).collect()),
            span_label: SpanLabel::GeneralVisual,
        }
    }

    #[test]
    fn bits_placed_at_masked_positions() {
        let g = general(4);
        let m = MaskSpec::from_positions(4, [1usize, 3]);
        let out = apply_mask(&g, &m).unwrap();
        assert_eq!(out.bits, vec![true, false, true, false]);
        assert_eq!(out.sequence.vectors, g.vectors);
    }

    #[test]
    fn empty_and_full_masks() {
        let g = general(4);
        let out = apply_mask(&g, &MaskSpec::empty(4)).unwrap();
        assert_eq!(out.bits, vec![true; 4]);
        let full = MaskSpec::from_positions(4, 0..4);
        let out = apply_mask(&g, &full).unwrap();
        assert_eq!(out.bits, vec![false; 4]);
        assert_eq!(out.sequence.vectors.rows, 4);
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = general(4);
        let m = MaskSpec::empty(5);
        assert!(matches!(apply_mask(&g, &m), Err(ChimeraError::Contract(_))));
    }

    #[test]
    fn draws_are_uniform_over_positions() {
        let mut counts = vec![0u64; 32];
        for i in 0..10_000u64 {
            let mut r = stream(9, "gscm", i);
            let m = sample_mask(32, 0.25, &mut r).unwrap();
            assert_eq!(m.masked_positions.len(), 8);
            for &p in &m.masked_positions {
                counts[p] += 1;
            }
        }
        let (_, p) = crate::stats::chi_square_uniform(&counts);
        assert!(p > 0.01, "mask positions biased: p={p}");
    }
}
