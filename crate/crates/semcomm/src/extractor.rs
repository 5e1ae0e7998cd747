//! Channel-adaptive patch selection: scores + budget -> the kept-patch
//! set. Also the random-masking baseline.

use crate::error::{Error, Result};
use crate::numcore::RngStream;
use crate::scorer::ScoreVector;

/// Which patches to transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    /// Strictly ascending patch indices.
    pub kept: Vec<usize>,
    /// The mask ratio this plan realizes.
    pub mask_ratio: f64,
    /// Total patch count.
    pub patch_count: usize,
}

impl SelectionPlan {
    fn validate(kept: &[usize], n: usize) -> Result<()> {
        if kept.is_empty() {
            return Err(Error::shape("selection keeps no patches".into()));
        }
        if !kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::shape("kept indices not strictly ascending".into()));
        }
        if *kept.last().unwrap() >= n {
            return Err(Error::shape("kept index out of range".into()));
        }
        Ok(())
    }
}

/// Selection mechanism names as they appear in result rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mechanism {
    Random,
    Scored,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::Random => "random",
            Mechanism::Scored => "scored",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Mechanism::Random),
            "scored" => Ok(Mechanism::Scored),
            other => Err(Error::config(format!(
                "unknown mechanism '{other}' (expected random or scored)"
            ))),
        }
    }
}

/// Keep the k highest-scoring patches; ties break toward the lower index.
pub fn select_topk(scores: &ScoreVector, k: usize) -> Result<SelectionPlan> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::shape(format!("top-k with k={k} of {n} patches")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    SelectionPlan::validate(&kept, n)?;
    Ok(SelectionPlan {
        kept,
        mask_ratio: 1.0 - k as f64 / n as f64,
        patch_count: n,
    })
}

/// Uniform sample of k patches without replacement (Fisher-Yates prefix),
/// sorted ascending.
pub fn select_random(n: usize, k: usize, rng: &mut RngStream) -> Result<SelectionPlan> {
    if k == 0 || k > n {
        return Err(Error::shape(format!("random selection with k={k} of {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    SelectionPlan::validate(&kept, n)?;
    Ok(SelectionPlan {
        kept,
        mask_ratio: 1.0 - k as f64 / n as f64,
        patch_count: n,
    })
}

/// Kept count for a mask ratio: round-half-up of (1-ρ)·N.
pub fn kept_count(n: usize, mask_ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::shape(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    let k = ((1.0 - mask_ratio) * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::shape(format!(
            "mask ratio {mask_ratio} leaves no patches of {n}"
        )));
    }
    Ok(k.min(n))
}

/// Ratio-driven selection dispatching to the chosen mechanism. The rng is
/// consumed only by the random mechanism.
pub fn plan_from_ratio(
    scores: &ScoreVector,
    mask_ratio: f64,
    mechanism: Mechanism,
    rng: &mut RngStream,
) -> Result<SelectionPlan> {
    let n = scores.len();
    let k = kept_count(n, mask_ratio)?;
    let mut plan = match mechanism {
        Mechanism::Scored => select_topk(scores, k)?,
        Mechanism::Random => select_random(n, k, rng)?,
    };
    plan.mask_ratio = mask_ratio;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(scores: Vec<f32>) -> ScoreVector {
        ScoreVector::new_unchecked(scores)
    }

    #[test]
    fn topk_picks_largest() {
        let plan = select_topk(&sv(vec![0.1, 0.4, 0.2, 0.3]), 2).unwrap();
        assert_eq!(plan.kept, vec![1, 3]);
    }

    #[test]
    fn topk_ties_break_low_index() {
        let plan = select_topk(&sv(vec![0.25; 4]), 2).unwrap();
        assert_eq!(plan.kept, vec![0, 1]);
    }

    #[test]
    fn topk_full_keeps_everything() {
        let plan = select_topk(&sv(vec![0.3, 0.3, 0.4]), 3).unwrap();
        assert_eq!(plan.kept, vec![0, 1, 2]);
        assert_eq!(plan.mask_ratio, 0.0);
    }

    #[test]
    fn topk_out_of_range_rejected() {
        assert!(select_topk(&sv(vec![0.5, 0.5]), 0).is_err());
        assert!(select_topk(&sv(vec![0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn topk_matches_brute_force_oracle() {
        // Oracle: sort (−score, index), take k, sort ascending.
        let mut rng = RngStream::new(63);
        for _ in 0..1000 {
            let n = 2 + rng.below(30);
            let k = 1 + rng.below(n);
            let scores: Vec<f32> = (0..n)
                .map(|_| (rng.below(8) as f32) / 8.0) // coarse grid forces ties
                .collect();
            let mut pairs: Vec<(usize, f32)> =
                scores.iter().cloned().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut expected: Vec<usize> = pairs[..k].iter().map(|p| p.0).collect();
            expected.sort_unstable();
            let plan = select_topk(&sv(scores), k).unwrap();
            assert_eq!(plan.kept, expected);
        }
    }

    #[test]
    fn topk_monotone_nesting() {
        let mut rng = RngStream::new(64);
        for _ in 0..100 {
            let n = 3 + rng.below(20);
            let scores: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
            let scores = sv(scores);
            for k in 1..n {
                let a = select_topk(&scores, k).unwrap();
                let b = select_topk(&scores, k + 1).unwrap();
                assert!(a.kept.iter().all(|i| b.kept.contains(i)));
            }
        }
    }

    #[test]
    fn topk_scale_invariant() {
        let mut rng = RngStream::new(65);
        for _ in 0..200 {
            let n = 2 + rng.below(20);
            let k = 1 + rng.below(n);
            let scores: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
            let c = rng.uniform_in(0.1, 10.0) as f32;
            let scaled: Vec<f32> = scores.iter().map(|&s| s * c).collect();
            assert_eq!(
                select_topk(&sv(scores), k).unwrap().kept,
                select_topk(&sv(scaled), k).unwrap().kept
            );
        }
    }

    #[test]
    fn random_full_keeps_everything() {
        let plan = select_random(5, 5, &mut RngStream::new(1)).unwrap();
        assert_eq!(plan.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_is_deterministic_per_seed() {
        let a = select_random(16, 5, &mut RngStream::new(12)).unwrap();
        let b = select_random(16, 5, &mut RngStream::new(12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_frequencies_match_hypergeometric() {
        // N=8, k=2 over 1e5 draws: each index kept with frequency 2/8 ± 0.01.
        let mut rng = RngStream::new(2024);
        let mut counts = [0usize; 8];
        let draws = 100_000;
        for _ in 0..draws {
            let plan = select_random(8, 2, &mut rng).unwrap();
            for &i in &plan.kept {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - 0.25).abs() < 0.01,
                "index {i} kept with frequency {freq}"
            );
        }
    }

    #[test]
    fn ratio_rounding_rule() {
        assert_eq!(kept_count(64, 0.0).unwrap(), 64);
        assert_eq!(kept_count(64, 0.8).unwrap(), 13); // round(12.8)
        assert_eq!(kept_count(196, 0.5).unwrap(), 98);
        assert!(kept_count(64, 1.0).is_err());
        assert!(kept_count(64, -0.1).is_err());
    }

    #[test]
    fn plan_from_ratio_dispatches() {
        let scores = sv(vec![0.1, 0.2, 0.3, 0.4]);
        let mut rng = RngStream::new(3);
        let scored = plan_from_ratio(&scores, 0.5, Mechanism::Scored, &mut rng).unwrap();
        assert_eq!(scored.kept, vec![2, 3]);
        assert_eq!(scored.mask_ratio, 0.5);
        let random = plan_from_ratio(&scores, 0.5, Mechanism::Random, &mut rng).unwrap();
        assert_eq!(random.kept.len(), 2);
    }
}
