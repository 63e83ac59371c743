//! Character-level language modeling over any local file, for desk-scale
//! smoke runs. Bytes map to a vocabulary built from the file; the stream is
//! cut into contiguous chunks of whole blocks with a 90/5/5 train/valid/test
//! contiguous split.

use serde::{Deserialize, Serialize};

use super::TaskSample;
use crate::error::{Error, Result};
use crate::train::TaskStream;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CharLmConfig {
    pub path: String,
    /// Tokens per forward block.
    pub block_size: usize,
    /// Blocks per training chunk; caches persist within a chunk.
    #[serde(default = "default_chunk_blocks")]
    pub chunk_blocks: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_chunk_blocks() -> usize {
    4
}

pub struct CharLmTask {
    pub vocab: Vec<u8>,
    block: usize,
    chunk_blocks: usize,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

impl CharLmTask {
    pub fn from_config(cfg: &CharLmConfig) -> Result<Self> {
        let bytes = std::fs::read(&cfg.path)?;
        Self::from_bytes(&bytes, cfg.block_size, cfg.chunk_blocks)
    }

    pub fn from_bytes(bytes: &[u8], block: usize, chunk_blocks: usize) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Config("char-lm input file is empty".into()));
        }
        let mut vocab: Vec<u8> = bytes.to_vec();
        vocab.sort_unstable();
        vocab.dedup();
        let mut id = [0usize; 256];
        for (i, &b) in vocab.iter().enumerate() {
            id[b as usize] = i;
        }
        let tokens: Vec<usize> = bytes.iter().map(|&b| id[b as usize]).collect();
        // contiguous 90/5/5
        let n = tokens.len();
        let t_end = n * 90 / 100;
        let v_end = n * 95 / 100;
        Ok(CharLmTask {
            vocab,
            block,
            chunk_blocks,
            train: tokens[..t_end].to_vec(),
            valid: tokens[t_end..v_end].to_vec(),
            test: tokens[v_end..].to_vec(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Non-overlapping chunks; each is an aligned next-token sample. The
    /// final position of the data has no next token and is masked out.
    fn chunks_of(&self, region: &[usize]) -> Vec<TaskSample> {
        let chunk_len = self.block * self.chunk_blocks;
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < region.len() {
            let end = (pos + chunk_len).min(region.len());
            let input = region[pos..end].to_vec();
            let mut target = Vec::with_capacity(input.len());
            let mut mask = Vec::with_capacity(input.len());
            for p in pos..end {
                if p + 1 < region.len() {
                    target.push(region[p + 1]);
                    mask.push(true);
                } else {
                    target.push(0);
                    mask.push(false);
                }
            }
            if mask.iter().any(|&m| m) {
                out.push(TaskSample { input_tokens: input, target_tokens: target, loss_mask: mask });
            }
            pos = end;
        }
        out
    }

    pub fn test_set(&self) -> Vec<TaskSample> {
        self.chunks_of(&self.test)
    }
}

impl TaskStream for CharLmTask {
    fn sample(&self, index: u64) -> TaskSample {
        let chunks = self.chunks_of(&self.train);
        chunks[(index % chunks.len() as u64) as usize].clone()
    }

    fn eval_set(&self) -> Vec<TaskSample> {
        self.chunks_of(&self.valid)
    }

    fn reports_bpb(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_shift_targets_and_mask_the_last_position() {
        // 12 bytes of "ab": the train region is the first 10 tokens. K=2
        // gives blocks "ab" with targets "ba"; the final block's last
        // position has no next byte and is masked out ("b?").
        let t = CharLmTask::from_bytes(b"abababababab", 2, 1).unwrap();
        assert_eq!(t.vocab, vec![b'a', b'b']);
        let first = t.sample(0);
        assert_eq!(first.input_tokens, vec![0, 1]);
        assert_eq!(first.target_tokens, vec![1, 0]);
        assert_eq!(first.loss_mask, vec![true, true]);
        let last = t.sample(4);
        assert_eq!(last.input_tokens, vec![0, 1]);
        assert_eq!(last.target_tokens[0], 1);
        assert_eq!(last.loss_mask, vec![true, false]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(CharLmTask::from_bytes(b"", 4, 2).is_err());
    }

    #[test]
    fn uniform_predictor_bpb_is_log2_vocab() {
        let t = CharLmTask::from_bytes(b"the quick brown fox jumps over the lazy dog", 8, 2)
            .unwrap();
        let v = t.vocab_size() as f64;
        let uniform_nats = v.ln();
        assert!((crate::metrics::bits_per_byte(uniform_nats) - v.log2()).abs() < 1e-12);
    }

    #[test]
    fn split_is_contiguous_and_covers_everything() {
        let data: Vec<u8> = (0..200u8).collect();
        let t = CharLmTask::from_bytes(&data, 4, 2).unwrap();
        assert_eq!(t.train.len(), 180);
        assert_eq!(t.valid.len(), 10);
        assert_eq!(t.test.len(), 10);
        assert_eq!(t.train[0], 0);
        assert_eq!(t.valid[0], t.train.len());
    }
}
