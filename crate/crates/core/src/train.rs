//! Batch sampling shared by the training loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

/// Draws batches of distinct scenes from one split. Each epoch is a fresh
/// shuffle; each drawn scene contributes one of its captions at random.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    ids: Vec<u64>,
    order: Vec<u64>,
    cursor: usize,
    batch: usize,
    per_scene: usize,
    blocks: Vec<Vec<u64>>,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(data: &Dataset, split: Split, batch_size: usize, seed: u64) -> Result<Self> {
        let ids = data.split_ids(split);
        if ids.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(EpochSampler {
            order: Vec::new(),
            cursor: 0,
            batch: batch_size.min(ids.len()),
            ids,
            per_scene: data.config.captions_per_scene,
            blocks: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Batches are drawn from fixed blocks of about `block_size` scenes:
    /// the split is shuffled into blocks once, and each batch takes distinct
    /// random scenes from one random block. Pairwise quantities are then
    /// bounded by the block sizes and can be cached across epochs.
    pub fn blocked(
        data: &Dataset,
        split: Split,
        batch_size: usize,
        seed: u64,
        block_size: usize,
    ) -> Result<Self> {
        let mut s = Self::new(data, split, batch_size, seed)?;
        if block_size < s.batch {
            return Err(Error::Config(format!(
                "block size {block_size} is smaller than the batch size {}",
                s.batch
            )));
        }
        let mut order = s.ids.clone();
        order.shuffle(&mut s.rng);
        let count = (order.len() / block_size).max(1);
        let base = order.len() / count;
        let extra = order.len() % count;
        let mut at = 0;
        for b in 0..count {
            let len = base + usize::from(b < extra);
            s.blocks.push(order[at..at + len].to_vec());
            at += len;
        }
        Ok(s)
    }

    /// Scene blocks of a [`EpochSampler::blocked`] sampler; empty otherwise.
    pub fn blocks(&self) -> &[Vec<u64>] {
        &self.blocks
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// `(scene id, caption id)` pairs; scenes within a batch are distinct.
    pub fn next_batch(&mut self) -> Vec<(u64, u64)> {
        let scenes: Vec<u64> = if self.blocks.is_empty() {
            if self.cursor + self.batch > self.order.len() {
                self.order = self.ids.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            self.cursor += self.batch;
            self.order[self.cursor - self.batch..self.cursor].to_vec()
        } else {
            let b = self.rng.gen_range(0..self.blocks.len());
            self.blocks[b]
                .choose_multiple(&mut self.rng, self.batch)
                .copied()
                .collect()
        };
        scenes
            .into_iter()
            .map(|s| {
                let v = self.rng.gen_range(0..self.per_scene) as u64;
                (s, s * self.per_scene as u64 + v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataConfig};

    #[test]
    fn batches_hold_distinct_training_scenes() {
        let cfg = DataConfig {
            train_scenes: 30,
            val_scenes: 5,
            test_scenes: 5,
            ..DataConfig::default()
        };
        let data = generate_dataset(&cfg, 3).unwrap();
        let mut s = EpochSampler::new(&data, Split::Train, 8, 1).unwrap();
        for _ in 0..20 {
            let b = s.next_batch();
            assert_eq!(b.len(), 8);
            let mut scenes: Vec<u64> = b.iter().map(|p| p.0).collect();
            scenes.sort();
            scenes.dedup();
            assert_eq!(scenes.len(), 8);
            for &(scene, cap) in &b {
                assert_eq!(data.scene(scene).split, Split::Train);
                assert_eq!(data.captions[cap as usize].scene, scene);
            }
        }
        assert!(EpochSampler::new(&data, Split::Train, 0, 1).is_err());
    }

    #[test]
    fn blocked_batches_stay_inside_one_block() {
        let cfg = DataConfig {
            train_scenes: 50,
            val_scenes: 2,
            test_scenes: 2,
            ..DataConfig::default()
        };
        let data = generate_dataset(&cfg, 3).unwrap();
        let mut s = EpochSampler::blocked(&data, Split::Train, 6, 2, 16).unwrap();
        let blocks = s.blocks().to_vec();
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks.iter().map(Vec::len).sum::<usize>(), 50);
        for _ in 0..30 {
            let b = s.next_batch();
            let home = blocks.iter().position(|bl| bl.contains(&b[0].0)).unwrap();
            let mut scenes: Vec<u64> = b.iter().map(|p| p.0).collect();
            assert!(scenes.iter().all(|x| blocks[home].contains(x)));
            scenes.sort();
            scenes.dedup();
            assert_eq!(scenes.len(), 6);
        }
        assert!(EpochSampler::blocked(&data, Split::Train, 6, 2, 4).is_err());
    }
}
