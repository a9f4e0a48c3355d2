use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::metrics::Truth;
use crate::rng::derive_rng;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeckItem {
    /// Opaque, position-derived; never reveals the truth.
    pub image_id: String,
    pub file_ref: String,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDeck {
    pub items: Vec<DeckItem>,
    pub seed: u64,
}

impl StudyDeck {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, truth: Truth) -> usize {
        self.items.iter().filter(|i| i.truth == truth).count()
    }

    pub fn find(&self, image_id: &str) -> Option<&DeckItem> {
        self.items.iter().find(|i| i.image_id == image_id)
    }
}

/// Samples `n_each` refs from each list without replacement and shuffles the
/// union with `seed`.
pub fn build_deck(real_refs: &[String], fake_refs: &[String], n_each: usize, seed: u64) -> Result<StudyDeck> {
    if n_each == 0 {
        bail_arg!("a deck needs at least one image of each kind");
    }
    if real_refs.len() < n_each || fake_refs.len() < n_each {
        bail_arg!(
            "need {n_each} real and {n_each} fake images, have {} and {}",
            real_refs.len(),
            fake_refs.len()
        );
    }
    let mut rng = derive_rng(seed, "study-deck");
    let mut picked: Vec<(String, Truth)> = Vec::with_capacity(2 * n_each);
    for (refs, truth) in [(real_refs, Truth::Real), (fake_refs, Truth::Fake)] {
        let mut idx = sample(&mut rng, refs.len(), n_each).into_vec();
        idx.sort_unstable();
        picked.extend(idx.into_iter().map(|i| (refs[i].clone(), truth)));
    }
    picked.shuffle(&mut rng);
    let items = picked
        .into_iter()
        .enumerate()
        .map(|(k, (file_ref, truth))| DeckItem { image_id: format!("img{k:04}"), file_ref, truth })
        .collect();
    Ok(StudyDeck { items, seed })
}
