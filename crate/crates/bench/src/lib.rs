//! Shared input builders for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ret_core::init::normal;
use ret_core::{LayerStack, Modality, RetrievalIndex, Side, TokenMatrix};

pub fn random_tokens(side: Side, id: &str, k: usize, width: usize, seed: u64) -> TokenMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenMatrix::new(side, id, normal(&mut rng, &[k, width], 1.0))
}

/// `depth` layers of `rows × dim` standard-normal activations.
pub fn random_stack(modality: Modality, depth: usize, rows: usize, dim: usize, seed: u64) -> LayerStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..depth).map(|_| normal(&mut rng, &[rows, dim], 1.0)).collect();
    LayerStack::new(modality, layers).expect("uniform width")
}

/// Index of `n` random documents with `k` tokens of width `width`.
pub fn random_index(n: usize, k: usize, width: usize, seed: u64) -> RetrievalIndex {
    let mut index = RetrievalIndex::new(k, width);
    for i in 0..n {
        let id = format!("d{i}");
        let tokens = random_tokens(Side::Document, &id, k, width, seed.wrapping_add(i as u64));
        index.add(id, tokens, "", true).expect("unique ids");
    }
    index
}
