use serde::{Deserialize, Serialize};

use crate::data::{AccidentClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::XorShiftRng;

/// Stratified train/validation/test partition of clip ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Index form of a split, positions into the clip list it was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(labels: &[AccidentClass], ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut rng = XorShiftRng::new(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    // Val/test shares are carried across classes so that the global totals
    // round correctly even when per-class counts are fractional.
    let val_share = ratios[1] / (ratios[1] + ratios[2]);
    let mut val_exact = 0.0;
    let mut val_assigned = 0usize;
    for class in AccidentClass::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Config(format!(
                "class {class} has {} clips; every split needs at least one",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n = members.len();
        let n_train = ((ratios[0] * n as f64).round() as usize).clamp(1, n - 2);
        let rest = n - n_train;
        val_exact += rest as f64 * val_share;
        let n_val = (val_exact.round() as usize).saturating_sub(val_assigned).clamp(1, rest - 1);
        val_assigned += n_val;
        out.train.extend_from_slice(&members[..n_train]);
        out.val.extend_from_slice(&members[n_train..n_train + n_val]);
        out.test.extend_from_slice(&members[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Stratified split of `(clip_id, class)` pairs; deterministic under `seed`.
pub fn split_dataset(clips: &[(String, AccidentClass)], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let labels: Vec<AccidentClass> = clips.iter().map(|(_, c)| *c).collect();
    let idx = split_indices(&labels, ratios, seed)?;
    let ids = |v: &[usize]| v.iter().map(|&i| clips[i].0.clone()).collect();
    Ok(DatasetSplit {
        train: ids(&idx.train),
        val: ids(&idx.val),
        test: ids(&idx.test),
        seed,
        ratios,
    })
}

/// Per-class counts of a label list.
pub fn class_counts(labels: &[AccidentClass]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}
