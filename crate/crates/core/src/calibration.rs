//! Collecting per-layer statistics from a model run or from dump files.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::activation_io::{read_layer_pair, ActivationMatrix};
use crate::cca::CosineAccumulator;
use crate::error::{NblError, Result};
use crate::stats::{CovarianceSet, MomentAccumulator};
use crate::toymodel::ToyTransformer;

/// Sequences per parallel work item. Fixed so merge order (and therefore
/// every floating-point sum) does not depend on the thread count.
const SEQUENCES_PER_TASK: usize = 8;

/// What the ranking criteria need to know about one layer.
#[derive(Debug, Clone)]
pub struct LayerStatistics {
    pub layer: usize,
    pub covariances: CovarianceSet,
    /// Cosine distance score, when raw activations were seen.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerAccumulator {
    pub layer: usize,
    pub moments: MomentAccumulator,
    pub cosine: CosineAccumulator,
}

impl LayerAccumulator {
    pub fn new(layer: usize, h_in: usize, h_out: usize) -> Self {
        LayerAccumulator {
            layer,
            moments: MomentAccumulator::new(h_in, h_out),
            cosine: CosineAccumulator::new(),
        }
    }

    pub fn update(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
        self.moments.accumulate(x, y)?;
        if x.rows() == y.rows() {
            self.cosine.update(x, y)?;
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &LayerAccumulator) -> Result<()> {
        self.moments.merge_from(&other.moments)?;
        self.cosine.merge_from(&other.cosine);
        Ok(())
    }

    pub fn finish(&self) -> Result<LayerStatistics> {
        Ok(LayerStatistics {
            layer: self.layer,
            covariances: self.moments.finalize()?,
            cosine: self.cosine.score().ok(),
        })
    }
}

/// Uniform random token ids cut into sequences of `seq_len` (the last one
/// may be shorter). ChaCha8 seeded with `seed`.
pub fn synthetic_corpus(seed: u64, total_tokens: usize, seq_len: usize, vocab: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 || vocab == 0 {
        return Err(NblError::InvalidArgument("sequence length and vocab must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total_tokens.div_ceil(seq_len));
    let mut left = total_tokens;
    while left > 0 {
        let len = seq_len.min(left);
        out.push((0..len).map(|_| rng.random_range(0..vocab as u32)).collect());
        left -= len;
    }
    Ok(out)
}

/// Runs `sequences` through `model` and accumulates statistics for `layers`.
pub fn calibrate(model: &ToyTransformer, sequences: &[Vec<u32>], layers: &[usize]) -> Result<Vec<LayerAccumulator>> {
    let d = model.config.d_model;
    let wanted: BTreeSet<usize> = layers.iter().copied().collect();
    let fresh = || -> Vec<LayerAccumulator> { wanted.iter().map(|&k| LayerAccumulator::new(k, d, d)).collect() };
    let partials = sequences
        .par_chunks(SEQUENCES_PER_TASK)
        .map(|chunk| -> Result<Vec<LayerAccumulator>> {
            let mut accs = fresh();
            for seq in chunk {
                let (_, captured) = model.forward(seq, &wanted)?;
                for acc in accs.iter_mut() {
                    let (x, y) = captured.get(acc.layer).expect("requested layer captured");
                    acc.update(x, y)?;
                }
            }
            Ok(accs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = fresh();
    for part in &partials {
        for (acc, p) in total.iter_mut().zip(part) {
            acc.merge_from(p)?;
        }
    }
    Ok(total)
}

/// Statistics for `layer` from its dump pair in `dir`.
pub fn layer_from_dumps(dir: &Path, layer: usize) -> Result<LayerAccumulator> {
    let (x, y) = read_layer_pair(dir, layer)?;
    let mut acc = LayerAccumulator::new(layer, x.rows(), y.rows());
    acc.update(&x, &y)?;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::ToyConfig;

    #[test]
    fn corpus_shape_and_determinism() {
        let a = synthetic_corpus(3, 100, 32, 50).unwrap();
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        assert!(a.iter().flatten().all(|&t| t < 50));
        assert_eq!(a, synthetic_corpus(3, 100, 32, 50).unwrap());
        assert_ne!(a, synthetic_corpus(4, 100, 32, 50).unwrap());
    }

    #[test]
    fn calibration_is_chunking_invariant() {
        let cfg = ToyConfig { layers: 2, d_model: 8, heads: 2, kv_groups: 1, d_ff: 16, vocab: 30, max_len: 16, seed: 1 };
        let model = ToyTransformer::init_random(cfg).unwrap();
        let seqs = synthetic_corpus(0, 16 * 20, 16, 30).unwrap();
        let all = calibrate(&model, &seqs, &[0, 1]).unwrap();
        let mut sequential = LayerAccumulator::new(1, 8, 8);
        for s in &seqs {
            let (_, cap) = model.forward(s, &BTreeSet::from([1])).unwrap();
            let (x, y) = cap.get(1).unwrap();
            sequential.update(x, y).unwrap();
        }
        assert_eq!(all[1].moments.count(), 320);
        let a = all[1].moments.finalize().unwrap();
        let b = sequential.moments.finalize().unwrap();
        assert!((&a.c_yx - &b.c_yx).norm() <= 1e-10 * b.c_yx.norm());
        assert!((&a.c_xx - &b.c_xx).norm() <= 1e-10 * b.c_xx.norm());
    }
}
