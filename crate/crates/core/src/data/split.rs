//! Stratified train/val/test splitting with largest-remainder rounding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions().iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("split fractions must all be positive".to_string()));
        }
        let sum: f64 = self.fractions().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Splits sample indices per class: shuffle each class's indices with the
/// spec seed, then allocate to (train, val, test) by largest-remainder
/// rounding, so each part's per-class count is within one sample of the
/// exact proportion. Every class needs at least 3 samples. Each returned
/// part is sorted ascending.
pub fn stratified_split(labels: &[usize], classes: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    if classes == 0 {
        return Err(Error::contract("split", "need at least one class"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract("split", format!("label {} out of range for {} classes", bad, classes)));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    if let Some((k, members)) = per_class.iter().enumerate().find(|(_, m)| m.len() < 3) {
        return Err(Error::Data(format!(
            "class {} has {} samples; stratified splitting needs at least 3 per class",
            k,
            members.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fractions = spec.fractions();
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for members in &mut per_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut alloc: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
        let assigned: usize = alloc.iter().sum();
        // Hand leftovers to the largest fractional remainders, ties to
        // the earlier part.
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - alloc[a] as f64;
            let rb = exact[b] - alloc[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for i in 0..n - assigned {
            alloc[order[i]] += 1;
        }
        let mut cursor = 0;
        for (part, &count) in parts.iter_mut().zip(&alloc) {
            part.extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok(parts)
}
