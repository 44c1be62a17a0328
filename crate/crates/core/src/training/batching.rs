//! Length-bucketed minibatches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Packs `order` into consecutive batches whose padded size
/// `count * max_len` stays within `frame_budget` (always at least one item).
pub fn pack(order: &[usize], lens: &[usize], frame_budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for &i in order {
        let m = cur_max.max(lens[i]);
        if !cur.is_empty() && m * (cur.len() + 1) > frame_budget {
            batches.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(lens[i]);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Deterministic batches sorted by length, no shuffling (for inference).
pub fn sorted_batches(lens: &[usize], frame_budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by_key(|&i| (lens[i], i));
    pack(&order, lens, frame_budget)
}

/// Batches for one training epoch, a pure function of `(seed, epoch)`:
/// items are shuffled, stably sorted by length (so equal lengths mix across
/// epochs), packed, and the batch order is shuffled.
pub fn epoch_batches(lens: &[usize], frame_budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lens[i]);
    let mut batches = pack(&order, lens, frame_budget);
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_item_appears_once_and_budgets_hold() {
        let lens: Vec<usize> = (0..57).map(|i| 3 + (i * 7) % 11).collect();
        for epoch in 0..3 {
            let b = epoch_batches(&lens, 40, 5, epoch);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..57).collect::<Vec<_>>());
            for batch in &b {
                let m = batch.iter().map(|&i| lens[i]).max().unwrap();
                assert!(batch.len() == 1 || m * batch.len() <= 40);
            }
        }
        assert_eq!(epoch_batches(&lens, 40, 5, 1), epoch_batches(&lens, 40, 5, 1));
        assert_ne!(epoch_batches(&lens, 40, 5, 1), epoch_batches(&lens, 40, 5, 2));
    }

    #[test]
    fn oversized_items_get_their_own_batch() {
        assert_eq!(pack(&[0, 1], &[50, 60], 10), vec![vec![0], vec![1]]);
    }
}
