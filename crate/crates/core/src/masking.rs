//! Mask sampling, exhaustive enumeration and counting over token indices.
//!
//! Indices are 0-based. A [`MaskPair`] stores both blocks in ascending order.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// A masked index set `M` and its complement `R` within `0..dim`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskPair {
    masked: Vec<usize>,
    rest: Vec<usize>,
    dim: usize,
}

impl MaskPair {
    /// Builds a mask from distinct indices in `0..dim` (any order).
    pub fn new(dim: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() || masked.len() > dim || masked.last().is_some_and(|&i| i >= dim) {
            return Err(Error::InvalidMaskSize { dim, size: masked.len() });
        }
        let mut is_masked = vec![false; dim];
        for &i in &masked {
            is_masked[i] = true;
        }
        let rest = (0..dim).filter(|&i| !is_masked[i]).collect();
        Ok(MaskPair { masked, rest, dim })
    }

    pub fn full(dim: usize) -> Self {
        MaskPair { masked: (0..dim).collect(), rest: Vec::new(), dim }
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn rest(&self) -> &[usize] {
        &self.rest
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.masked.len()
    }
}

fn check_size(dim: usize, size: usize) -> Result<()> {
    if size == 0 || size > dim {
        return Err(Error::InvalidMaskSize { dim, size });
    }
    Ok(())
}

/// Uniformly random `size`-subset of `0..dim` by partial Fisher–Yates.
pub fn sample_mask<R: Rng + ?Sized>(dim: usize, size: usize, rng: &mut R) -> Result<MaskPair> {
    check_size(dim, size)?;
    let mut perm: Vec<usize> = (0..dim).collect();
    for i in 0..size {
        let j = rng.random_range(i..dim);
        perm.swap(i, j);
    }
    perm.truncate(size);
    MaskPair::new(dim, perm)
}

/// Uniform draw from `1..=dim`.
pub fn sample_mask_size<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> usize {
    rng.random_range(1..=dim.max(1))
}

/// All `size`-subsets of `0..dim` in lexicographic order.
pub fn enumerate_masks(dim: usize, size: usize) -> Result<Vec<MaskPair>> {
    enumerate_masks_capped(dim, size, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_masks_capped(dim: usize, size: usize, cap: u64) -> Result<Vec<MaskPair>> {
    check_size(dim, size)?;
    let count = count_masks(dim, size);
    match count.value.to_u64() {
        Some(c) if c <= cap => {}
        _ => return Err(Error::EnumerationTooLarge { count: count.value.to_string(), cap }),
    }
    let mut out = Vec::with_capacity(count.value.to_usize().unwrap_or(0));
    let mut comb: Vec<usize> = (0..size).collect();
    loop {
        out.push(MaskPair::new(dim, comb.clone())?);
        // advance to the next combination
        let mut i = size;
        while i > 0 && comb[i - 1] == dim - size + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        comb[i - 1] += 1;
        for k in i..size {
            comb[k] = comb[k - 1] + 1;
        }
    }
    Ok(out)
}

/// Exact binomial coefficient with a log10 approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct BigCount {
    pub value: BigUint,
    pub log10: f64,
}

pub fn count_masks(dim: usize, size: usize) -> BigCount {
    if size > dim {
        return BigCount { value: BigUint::ZERO, log10: f64::NEG_INFINITY };
    }
    let k = size.min(dim - size);
    let mut value = BigUint::one();
    for i in 0..k {
        value *= BigUint::from(dim - i);
        value /= BigUint::from(i + 1);
    }
    let (n, s) = (dim as f64, size as f64);
    let ln = ln_gamma(n + 1.0) - ln_gamma(s + 1.0) - ln_gamma(n - s + 1.0);
    BigCount { value, log10: ln / std::f64::consts::LN_10 }
}

/// Mask size for a fixed masking rate (`floor(rate * dim)`, 76 tokens for
/// 15% of 512), kept inside `1..dim`.
pub fn fixed_rate_size(dim: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate < 1.0) || dim < 2 {
        return Err(Error::InvalidConfig(format!("masking rate {rate} invalid for dimension {dim}")));
    }
    Ok(((rate * dim as f64 + 1e-9).floor() as usize).clamp(1, dim - 1))
}

/// Mask sizes for the rates 1%, 2%, ..., 99%, rounded and deduplicated.
pub fn percent_grid(dim: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = (1..=99)
        .map(|p| ((p as f64 / 100.0 * dim as f64).round() as usize).clamp(1, dim))
        .collect();
    sizes.dedup();
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn forced_and_full_masks() {
        let mut rng = RngKey::new(1).rng();
        let m = sample_mask(1, 1, &mut rng).unwrap();
        assert_eq!(m.masked(), &[0]);
        assert!(m.rest().is_empty());
        for _ in 0..20 {
            assert!(sample_mask(5, 5, &mut rng).unwrap().rest().is_empty());
        }
        assert!(matches!(sample_mask(3, 4, &mut rng), Err(Error::InvalidMaskSize { .. })));
        assert!(matches!(sample_mask(3, 0, &mut rng), Err(Error::InvalidMaskSize { .. })));
    }

    #[test]
    fn inclusion_probability() {
        let mut rng = RngKey::new(11).rng();
        let mut hits = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            for &i in sample_mask(5, 2, &mut rng).unwrap().masked() {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.4).abs() < 0.01);
        }
    }

    #[test]
    fn mask_size_uniform_and_deterministic() {
        let mut rng = RngKey::new(3).rng();
        assert!((0..100).all(|_| sample_mask_size(1, &mut rng) == 1));
        let mut counts = [0usize; 11];
        for _ in 0..100_000 {
            counts[sample_mask_size(10, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / 1e5 - 0.1).abs() < 0.01);
        }
        let a: Vec<_> = { let mut r = RngKey::new(9).rng(); (0..50).map(|_| sample_mask_size(10, &mut r)).collect() };
        let b: Vec<_> = { let mut r = RngKey::new(9).rng(); (0..50).map(|_| sample_mask_size(10, &mut r)).collect() };
        assert_eq!(a, b);
    }

    #[test]
    fn hand_enumeration() {
        let e = enumerate_masks(3, 2).unwrap();
        let sets: Vec<_> = e.iter().map(|m| m.masked().to_vec()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(enumerate_masks(5, 2).unwrap().len(), 10);
        let total: usize = (1..=7).map(|m| enumerate_masks(7, m).unwrap().len()).sum();
        assert_eq!(total, 127);
    }

    #[test]
    fn enumeration_cap() {
        assert!(matches!(enumerate_masks(40, 20), Err(Error::EnumerationTooLarge { .. })));
        assert!(matches!(enumerate_masks_capped(5, 2, 9), Err(Error::EnumerationTooLarge { .. })));
    }

    #[test]
    fn counts() {
        assert_eq!(count_masks(5, 2).value, BigUint::from(10u32));
        assert_eq!(count_masks(9, 0).value, BigUint::one());
        let c = count_masks(512, 76);
        assert!((c.log10 - 92.083).abs() / 92.083 < 0.005);
        let digits = c.value.to_string();
        assert_eq!(digits.len(), 93);
        assert!(digits.starts_with("121"));
    }

    #[test]
    fn percent_grid_dedups() {
        assert_eq!(percent_grid(10), (1..=10).collect::<Vec<_>>());
        let g = percent_grid(512);
        assert_eq!(g.first(), Some(&5));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.len(), 99);
        assert_eq!(fixed_rate_size(50, 0.15).unwrap(), 7);
        assert_eq!(fixed_rate_size(512, 0.15).unwrap(), 76);
        assert_eq!(fixed_rate_size(10, 0.2).unwrap(), 2);
        assert_eq!(fixed_rate_size(2, 0.01).unwrap(), 1);
        assert!(fixed_rate_size(10, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn enumeration_matches_count(dim in 1usize..=12, frac in 0.0f64..1.0) {
            let size = 1 + ((dim as f64 - 1.0) * frac) as usize;
            let masks = enumerate_masks(dim, size).unwrap();
            prop_assert_eq!(BigUint::from(masks.len()), count_masks(dim, size).value);
            let uniq: HashSet<_> = masks.iter().map(|m| m.masked().to_vec()).collect();
            prop_assert_eq!(uniq.len(), masks.len());
            for m in &masks {
                prop_assert_eq!(m.size(), size);
                prop_assert_eq!(m.masked().len() + m.rest().len(), dim);
                let mut all: Vec<_> = m.masked().iter().chain(m.rest()).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..dim).collect::<Vec<_>>());
            }
        }

        #[test]
        fn sampled_masks_are_enumerated(dim in 1usize..=8, seed in any::<u64>()) {
            let mut rng = RngKey::new(seed).rng();
            let size = sample_mask_size(dim, &mut rng);
            let all: HashSet<_> = enumerate_masks(dim, size).unwrap().into_iter().collect();
            for _ in 0..10 {
                prop_assert!(all.contains(&sample_mask(dim, size, &mut rng).unwrap()));
            }
        }
    }
}
