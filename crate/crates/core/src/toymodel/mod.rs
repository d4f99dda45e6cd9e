//! A small pre-norm decoder-only transformer with grouped-query attention.
//!
//! Hidden states are kept token-per-row (`T × d`) so every projection is a
//! plain `H · W` with `W` stored `in × out`. Captured activations are
//! transposed into the column-per-token [`ActivationMatrix`] layout.
//!
//! Weights come from ChaCha8 seeded with `config.seed`, drawn in a fixed order
//! (token embedding, positional embedding, then per layer Wq, Wk, Wv, Wo,
//! W_up, W_down, then the unembedding), each matrix filled row-major. Every
//! value is `(2u − 1)·√3 · scale` with `u` the 53-bit uniform from
//! `Rng::random::<f64>()`, so entries have variance `scale²`; projections use
//! `scale = 1/√fan_in`. Norm scales start at 1.

mod file;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation_io::ActivationMatrix;
use crate::error::{NblError, Result};
use crate::lmmse::LinearMap;
use crate::ranking::SelectionPlan;

pub use file::{load_model_file, read_model, save_model_file, write_model, MODEL_MAGIC};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kv_groups: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            layers: 8,
            d_model: 64,
            heads: 4,
            kv_groups: 2,
            d_ff: 256,
            vocab: 256,
            max_len: 128,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("kv_groups", self.kv_groups),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(NblError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.heads.is_multiple_of(self.kv_groups) {
            return Err(NblError::InvalidConfig(format!(
                "kv_groups ({}) must divide heads ({})",
                self.kv_groups, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(NblError::InvalidConfig(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.layers > u16::MAX as usize + 1 {
            return Err(NblError::InvalidConfig("too many layers for the dump format".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Width of the K and V projections, `d · g / h`.
    pub fn kv_dim(&self) -> usize {
        self.head_dim() * self.kv_groups
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Attention,
    Linearized(LinearMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: DVector<f64>,
    pub attn: Attention,
    pub mlp_norm: DVector<f64>,
    pub w_up: DMatrix<f64>,
    pub w_down: DMatrix<f64>,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub config: ToyConfig,
    /// `V × d`.
    pub tok_emb: DMatrix<f64>,
    /// `max_len × d`.
    pub pos_emb: DMatrix<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: DVector<f64>,
    /// `d × V`.
    pub unembed: DMatrix<f64>,
}

/// Per captured layer: (sublayer input X, sublayer output Y), both `d × T`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptureSet {
    pub layers: BTreeMap<usize, (ActivationMatrix, ActivationMatrix)>,
}

impl CaptureSet {
    pub fn get(&self, layer: usize) -> Option<&(ActivationMatrix, ActivationMatrix)> {
        self.layers.get(&layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitDrift {
    pub mean_kl: f64,
    pub max_abs: f64,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        let amp = 3f64.sqrt() * scale;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (2.0 * self.rng.random::<f64>() - 1.0) * amp)
            .collect();
        DMatrix::from_row_slice(rows, cols, &data)
    }

    fn projection(&mut self, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
        self.matrix(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

impl ToyTransformer {
    pub fn init_random(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let tok_emb = init.matrix(config.vocab, d, 1.0);
        let pos_emb = init.matrix(config.max_len, d, 0.5);
        let blocks = (0..config.layers)
            .map(|_| {
                let attn = Attention {
                    wq: init.projection(d, d),
                    wk: init.projection(d, config.kv_dim()),
                    wv: init.projection(d, config.kv_dim()),
                    wo: init.projection(d, d),
                };
                let w_up = init.projection(d, config.d_ff);
                let w_down = init.projection(config.d_ff, d);
                Block {
                    attn_norm: DVector::from_element(d, 1.0),
                    attn,
                    mlp_norm: DVector::from_element(d, 1.0),
                    w_up,
                    w_down,
                    kind: LayerKind::Attention,
                }
            })
            .collect();
        let unembed = init.projection(d, config.vocab);
        Ok(ToyTransformer {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm: DVector::from_element(d, 1.0),
            unembed,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_linearized(&self, layer: usize) -> bool {
        matches!(self.blocks.get(layer).map(|b| &b.kind), Some(LayerKind::Linearized(_)))
    }

    pub fn linear_map(&self, layer: usize) -> Option<&LinearMap> {
        match self.blocks.get(layer).map(|b| &b.kind) {
            Some(LayerKind::Linearized(map)) => Some(map),
            _ => None,
        }
    }

    /// Layers still running softmax attention.
    pub fn attention_layers(&self) -> Vec<usize> {
        (0..self.num_layers()).filter(|&k| !self.is_linearized(k)).collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(NblError::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(NblError::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(NblError::InvalidArgument(format!(
                "token id {t} out of range for vocab {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> DMatrix<f64> {
        let d = self.config.d_model;
        let mut h = DMatrix::zeros(tokens.len(), d);
        for (t, &id) in tokens.iter().enumerate() {
            let row = self.tok_emb.row(id as usize) + self.pos_emb.row(t);
            h.row_mut(t).copy_from(&row);
        }
        h
    }

    /// Runs the model and invokes `hook(layer, x_rows, y_rows)` for every
    /// layer after its attention sublayer (or linear substitute) has run.
    pub fn forward_with<F>(&self, tokens: &[u32], mut hook: F) -> Result<DMatrix<f64>>
    where
        F: FnMut(usize, &DMatrix<f64>, &DMatrix<f64>) -> Result<()>,
    {
        self.check_tokens(tokens)?;
        let mut h = self.embed(tokens);
        for (k, block) in self.blocks.iter().enumerate() {
            let y = self.sublayer_rows(block, &h)?;
            hook(k, &h, &y)?;
            h += &y;
            let hn = rms_norm(&h, &block.mlp_norm);
            let mut up = hn * &block.w_up;
            up.apply(|v| *v = gelu(*v));
            h += up * &block.w_down;
        }
        Ok(rms_norm(&h, &self.final_norm) * &self.unembed)
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<DMatrix<f64>> {
        self.forward_with(tokens, |_, _, _| Ok(()))
    }

    /// Logits (`T × V`) and the requested captures.
    pub fn forward(&self, tokens: &[u32], capture: &BTreeSet<usize>) -> Result<(DMatrix<f64>, CaptureSet)> {
        let mut captured = CaptureSet::default();
        let logits = self.forward_with(tokens, |k, x, y| {
            if capture.contains(&k) {
                let xs = ActivationMatrix::from_f64(&x.transpose())?;
                let ys = ActivationMatrix::from_f64(&y.transpose())?;
                captured.layers.insert(k, (xs, ys));
            }
            Ok(())
        })?;
        Ok((logits, captured))
    }

    fn sublayer_rows(&self, block: &Block, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &block.kind {
            LayerKind::Linearized(map) => {
                let mut y = x * map.weight.transpose();
                for mut row in y.row_iter_mut() {
                    row += map.bias.transpose();
                }
                Ok(y)
            }
            LayerKind::Attention => {
                let xn = rms_norm(x, &block.attn_norm);
                let (out, _) = self.attention(&block.attn, &xn, false);
                Ok(out)
            }
        }
    }

    /// Re-runs layer `layer`'s sublayer on columns of `x` taken as one sequence.
    pub fn sublayer_output(&self, layer: usize, x: &ActivationMatrix) -> Result<ActivationMatrix> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| NblError::InvalidArgument(format!("no layer {layer}")))?;
        if x.rows() != self.config.d_model {
            return Err(NblError::DimensionMismatch(format!(
                "expected {} features, got {}",
                self.config.d_model,
                x.rows()
            )));
        }
        let y = self.sublayer_rows(block, &x.to_f64().transpose())?;
        ActivationMatrix::from_f64(&y.transpose())
    }

    /// Per-head attention probabilities (`T × T`, row = query) of an attention layer.
    pub fn attention_probabilities(&self, tokens: &[u32], layer: usize) -> Result<Vec<DMatrix<f64>>> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| NblError::InvalidArgument(format!("no layer {layer}")))?;
        if !matches!(block.kind, LayerKind::Attention) {
            return Err(NblError::InvalidArgument(format!("layer {layer} is linearized")));
        }
        let mut xs = None;
        self.forward_with(tokens, |k, x, _| {
            if k == layer {
                xs = Some(x.clone());
            }
            Ok(())
        })?;
        let xn = rms_norm(&xs.expect("hook runs for every layer"), &block.attn_norm);
        Ok(self.attention(&block.attn, &xn, true).1)
    }

    fn attention(&self, attn: &Attention, xn: &DMatrix<f64>, keep_probs: bool) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let cfg = &self.config;
        let t = xn.nrows();
        let hd = cfg.head_dim();
        let per_group = cfg.heads / cfg.kv_groups;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = xn * &attn.wq;
        let k = xn * &attn.wk;
        let v = xn * &attn.wv;
        let mut concat = DMatrix::zeros(t, cfg.d_model);
        let mut probs = Vec::new();
        for head in 0..cfg.heads {
            let group = head / per_group;
            let qh = q.columns(head * hd, hd);
            let kh = k.columns(group * hd, hd);
            let vh = v.columns(group * hd, hd);
            // Column j holds the scores of query j against every key.
            let mut p = kh * qh.transpose() * scale;
            for (j, mut col) in p.column_iter_mut().enumerate() {
                let max = col.rows(0, j + 1).max();
                let mut total = 0.0;
                for (i, s) in col.iter_mut().enumerate() {
                    if i <= j {
                        *s = (*s - max).exp();
                        total += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                col /= total;
            }
            let out = p.tr_mul(&vh);
            concat.columns_mut(head * hd, hd).copy_from(&out);
            if keep_probs {
                probs.push(p.transpose());
            }
        }
        (concat * &attn.wo, probs)
    }

    /// Copy of the model with the planned layers replaced by their maps.
    pub fn substitute(&self, plan: &SelectionPlan, maps: &[LinearMap]) -> Result<Self> {
        if plan.layers.len() != maps.len() {
            return Err(NblError::InvalidArgument(format!(
                "plan has {} layers but {} maps were given",
                plan.layers.len(),
                maps.len()
            )));
        }
        let mut out = self.clone();
        let d = self.config.d_model;
        for (&layer, map) in plan.layers.iter().zip(maps) {
            if layer >= self.num_layers() {
                return Err(NblError::InvalidArgument(format!("no layer {layer}")));
            }
            if map.source_layer != layer {
                return Err(NblError::InvalidArgument(format!(
                    "map for layer {} given for planned layer {layer}",
                    map.source_layer
                )));
            }
            if map.h_in() != d || map.h_out() != d || map.bias.len() != d {
                return Err(NblError::DimensionMismatch(format!(
                    "map for layer {layer} is {}x{}, model width is {d}",
                    map.h_out(),
                    map.h_in()
                )));
            }
            out.blocks[layer].kind = LayerKind::Linearized(map.clone());
        }
        Ok(out)
    }

    /// exp(mean next-token cross-entropy) over one sequence.
    pub fn perplexity(&self, tokens: &[u32]) -> Result<f64> {
        self.corpus_perplexity(std::slice::from_ref(&tokens.to_vec()))
    }

    pub fn corpus_perplexity(&self, sequences: &[Vec<u32>]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for seq in sequences {
            if seq.len() < 2 {
                return Err(NblError::InvalidArgument("perplexity needs at least 2 tokens".into()));
            }
            let logits = self.logits(seq)?;
            for t in 0..seq.len() - 1 {
                let row = logits.row(t);
                nll += log_sum_exp(row.iter().copied()) - row[seq[t + 1] as usize];
                count += 1;
            }
        }
        if count == 0 {
            return Err(NblError::InvalidArgument("perplexity needs at least 2 tokens".into()));
        }
        Ok((nll / count as f64).exp())
    }
}

/// Mean KL(softmax(a) ‖ softmax(b)) per position and max |a − b| over logits.
pub fn logit_drift(a: &ToyTransformer, b: &ToyTransformer, sequences: &[Vec<u32>]) -> Result<LogitDrift> {
    if a.config.vocab != b.config.vocab {
        return Err(NblError::DimensionMismatch(format!(
            "vocab sizes differ: {} vs {}",
            a.config.vocab, b.config.vocab
        )));
    }
    let mut kl_sum = 0.0;
    let mut positions = 0usize;
    let mut max_abs: f64 = 0.0;
    for seq in sequences {
        let la = a.logits(seq)?;
        let lb = b.logits(seq)?;
        for t in 0..seq.len() {
            let ra = la.row(t);
            let rb = lb.row(t);
            let za = log_sum_exp(ra.iter().copied());
            let zb = log_sum_exp(rb.iter().copied());
            let mut kl = 0.0;
            for (&x, &y) in ra.iter().zip(rb.iter()) {
                let lpa = x - za;
                let lpb = y - zb;
                kl += lpa.exp() * (lpa - lpb);
                max_abs = max_abs.max((x - y).abs());
            }
            kl_sum += kl.max(0.0);
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(NblError::InvalidArgument("no tokens to compare".into()));
    }
    Ok(LogitDrift {
        mean_kl: kl_sum / positions as f64,
        max_abs,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn rms_norm(h: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let d = h.ncols() as f64;
    let mut sq = DVector::<f64>::zeros(h.nrows());
    for col in h.column_iter() {
        sq.zip_apply(&col, |acc, v| *acc += v * v);
    }
    let inv = sq.map(|s| 1.0 / (s / d + NORM_EPS).sqrt());
    let mut out = h.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let g = scale[j];
        col.zip_apply(&inv, |v, r| *v *= r * g);
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
