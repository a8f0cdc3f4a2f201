use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Dataset, Label};
use crate::error::{Error, Result};

/// Stratified split into `(train, val)` with a `val_fraction` share of each
/// class (rounded, at least one sample on each side) held out. Both outputs
/// keep the input's sample order.
pub fn split<R: Rng + ?Sized>(
    dataset: &Dataset,
    val_fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::validation("fraction", format!("{val_fraction} not in (0, 1)")));
    }
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut in_val = vec![false; dataset.len()];
    for (label, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::validation(
                "dataset",
                format!("class {label:?} has {} sample(s); at least 2 are needed to split", idx.len()),
            ));
        }
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(rng);
        for &i in &idx[..n_val] {
            in_val[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| in_val[i]);
    Ok((dataset.subset(&train), dataset.subset(&val)))
}
