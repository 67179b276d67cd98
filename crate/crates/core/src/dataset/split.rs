use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.70,
            val_frac: 0.15,
            test_frac: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| f.is_nan() || *f <= 0.0) {
            return Err(Error::InvalidSplit("fractions must be positive".into()));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Sample indices per partition, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified three-way split over per-sample class indices.
///
/// Each class of size `n` sends `floor(train_frac * n)` samples to training
/// (capped so validation and test each keep one). The remainders are shared
/// between validation and test so the global counts follow the requested
/// ratio; which classes take the odd sample is decided by the seed.
pub fn stratified_split(classes: &[usize], class_names: &[String], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut plans = Vec::with_capacity(groups.len());
    for (&class, members) in &groups {
        let n = members.len();
        if n < 3 {
            let label = class_names.get(class).cloned().unwrap_or_else(|| format!("#{class}"));
            return Err(Error::TooFewSamples { label, count: n });
        }
        let train = ((spec.train_frac * n as f64 + 1e-9).floor() as usize).clamp(1, n - 2);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        plans.push((shuffled, train));
    }

    // Share of the held-out remainder that goes to validation.
    let val_share = spec.val_frac / (spec.val_frac + spec.test_frac);
    let held_out: usize = plans.iter().map(|(m, t)| m.len() - t).sum();
    let val_target = (held_out as f64 * val_share).round() as usize;

    let mut val_counts: Vec<usize> = plans
        .iter()
        .map(|(m, t)| {
            let r = m.len() - t;
            ((r as f64 * val_share).floor() as usize).clamp(1, r - 1)
        })
        .collect();
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.shuffle(&mut rng);
    let fraction = |i: usize| {
        let r = (plans[i].0.len() - plans[i].1) as f64;
        r * val_share - (r * val_share).floor()
    };
    order.sort_by(|&a, &b| fraction(b).total_cmp(&fraction(a)));

    let mut assigned: usize = val_counts.iter().sum();
    for &i in order.iter().cycle().take(order.len() * 4) {
        if assigned >= val_target {
            break;
        }
        let r = plans[i].0.len() - plans[i].1;
        if val_counts[i] + 2 <= r {
            val_counts[i] += 1;
            assigned += 1;
        }
    }

    let mut out = SplitIndices::default();
    for ((members, train), val) in plans.iter().zip(val_counts) {
        out.train.extend_from_slice(&members[..*train]);
        out.val.extend_from_slice(&members[*train..train + val]);
        out.test.extend_from_slice(&members[train + val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
