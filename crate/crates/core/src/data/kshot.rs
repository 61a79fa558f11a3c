use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Keeps `min(k, class size)` items per class, chosen without replacement.
/// Classes are visited in sorted order; items keep their source order within a class.
pub fn sample_k_shot<T: Clone>(items: &[T], k: usize, seed: u64, class_of: impl Fn(&T) -> String) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::Input("cannot sample from an empty dataset".into()));
    }
    let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        classes.entry(class_of(item)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for idx in classes.values_mut() {
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx.iter().copied().take(k).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| items[i].clone()));
    }
    Ok(out)
}
