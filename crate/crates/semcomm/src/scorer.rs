//! Multi-task-aware patch scoring network.
//!
//! A small ViT maps a patch set to one importance distribution over
//! patches: embed (linear projection + frozen sine-cosine positions), run
//! B-1 standard pre-norm blocks, and in the final block replace the usual
//! path with score extraction — per head, pool the pre-softmax attention
//! logits over queries, softmax over patches, then average the heads.
//! Each head contributes a proper distribution, so the average is one too.

use crate::error::{Error, Result};
use crate::numcore::attention::{
    attention_logits, block_ids, init_block, transformer_block, BlockIx, INIT_STD, LN_EPS,
};
use crate::numcore::{gaussian_matrix, Matrix, RngStream, Tape, TensorStore, TId, VId};
use crate::vision::PatchSet;

/// Per-patch importance distribution: non-negative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f32>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f32>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::shape("empty score vector".into()));
        }
        if scores.iter().any(|&s| !s.is_finite() || s < 0.0) {
            return Err(Error::numeric("score vector has negative or non-finite entries".into()));
        }
        let sum: f64 = scores.iter().map(|&s| s as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::numeric(format!("score vector sums to {sum}, not 1")));
        }
        Ok(ScoreVector { scores })
    }

    /// For callers that already hold a valid distribution (tests, plumbing).
    pub fn new_unchecked(scores: Vec<f32>) -> Self {
        ScoreVector { scores }
    }

    pub fn uniform(n: usize) -> Self {
        ScoreVector {
            scores: vec![1.0 / n as f32; n],
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scoring network geometry.
#[derive(Debug, Clone)]
pub struct ScorerConfig {
    pub patch_count: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    /// Total transformer blocks, including the extraction block.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ScorerConfig {
    /// Desk-scale default for 64 patches of dim 48.
    pub fn toy(patch_count: usize, patch_dim: usize) -> Self {
        ScorerConfig {
            patch_count,
            patch_dim,
            d_model: 32,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_count == 0 || self.patch_dim == 0 {
            return Err(Error::config("scorer: empty patch geometry".into()));
        }
        if self.blocks == 0 {
            return Err(Error::config("scorer needs at least one block".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "scorer width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("scorer width must be even for sine-cosine positions".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "scorer:n{}:dp{}:d{}:b{}:h{}:m{}",
            self.patch_count, self.patch_dim, self.d_model, self.blocks, self.heads, self.mlp_ratio
        )
    }
}

struct ScorerIx {
    proj_w: TId,
    proj_b: TId,
    pos: TId,
    blocks: Vec<BlockIx>,
}

/// Scoring network parameters. The positional table is frozen; everything
/// else trains.
pub struct ScorerParams {
    pub cfg: ScorerConfig,
    pub store: TensorStore,
    ix: ScorerIx,
}

/// Frozen sine-cosine positional table: for position p and pair i,
/// out[p, 2i] = sin(p / 10000^(2i/d)), out[p, 2i+1] = cos(p / 10000^(2i/d)).
pub fn sincos_pos_embed(positions: usize, dim: usize) -> Result<Matrix> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "sine-cosine table needs even dim, got {dim}"
        )));
    }
    let mut out = Matrix::zeros(positions, dim);
    for p in 0..positions {
        let row = out.row_mut(p);
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = p as f64 * freq;
            row[2 * i] = angle.sin() as f32;
            row[2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(out)
}

/// Initialize scorer parameters: Gaussian(0, 0.02²) weights, zero biases,
/// frozen sine-cosine positional table. Deterministic in `rng`.
pub fn init_scorer(cfg: &ScorerConfig, rng: &mut RngStream) -> Result<ScorerParams> {
    cfg.validate()?;
    let mut store = TensorStore::new();
    let proj_w = store.add(
        "proj.w",
        gaussian_matrix(cfg.patch_dim, cfg.d_model, INIT_STD, rng),
        true,
    );
    let proj_b = store.add("proj.b", Matrix::zeros(1, cfg.d_model), true);
    let pos = store.add(
        "pos",
        sincos_pos_embed(cfg.patch_count, cfg.d_model)?,
        false,
    );
    let blocks = (0..cfg.blocks)
        .map(|b| {
            init_block(
                &mut store,
                &format!("block{b}"),
                cfg.d_model,
                cfg.d_model * cfg.mlp_ratio,
                rng,
            )
        })
        .collect();
    Ok(ScorerParams {
        cfg: cfg.clone(),
        store,
        ix: ScorerIx {
            proj_w,
            proj_b,
            pos,
            blocks,
        },
    })
}

impl ScorerParams {
    /// Zero the positional table (used by symmetry and permutation tests).
    pub fn zero_positional(&mut self) {
        let pos = self.store.get_mut(self.ix.pos);
        *pos = Matrix::zeros(pos.rows(), pos.cols());
    }

    pub fn from_store(cfg: ScorerConfig, store: TensorStore) -> Result<Self> {
        // Rebuild the index layout; the store must have been produced by
        // init_scorer with the same config (checkpoint loaders guarantee it).
        let rebuilt = init_scorer(&cfg, &mut RngStream::new(0))?;
        if rebuilt.store.len() != store.len() {
            return Err(Error::config("scorer store layout mismatch".into()));
        }
        Ok(ScorerParams {
            cfg,
            store,
            ix: rebuilt.ix,
        })
    }
}

/// Scores recorded on a tape: returns the [1×N] distribution id.
/// `bound` must come from `params.store.bind(..)` on the same tape.
pub fn forward_scores(
    tape: &mut Tape,
    patches: VId,
    params: &ScorerParams,
    bound: &[VId],
) -> Result<VId> {
    let cfg = &params.cfg;
    let (n, d_patch) = tape.value(patches).shape();
    if n != cfg.patch_count || d_patch != cfg.patch_dim {
        return Err(Error::shape(format!(
            "scorer expects {}x{} patches, got {}x{}",
            cfg.patch_count, cfg.patch_dim, n, d_patch
        )));
    }
    let ix = &params.ix;
    let mut x = tape.linear(patches, bound[ix.proj_w.0], bound[ix.proj_b.0])?;
    x = tape.add(x, bound[ix.pos.0])?;
    for b in 0..cfg.blocks - 1 {
        let ids = block_ids(bound, &ix.blocks[b]);
        x = transformer_block(tape, x, &ids, cfg.heads)?;
    }
    // Extraction block: layer norm, then per-head pre-softmax logits.
    let last = block_ids(bound, &ix.blocks[cfg.blocks - 1]);
    let normed = tape.layer_norm(x, last.ln1_g, last.ln1_b, LN_EPS)?;
    let logits = attention_logits(
        tape,
        normed,
        last.attn.wq,
        last.attn.bq,
        last.attn.wk,
        last.attn.bk,
        cfg.heads,
    )?;
    let mut acc: Option<VId> = None;
    for lh in logits {
        let pooled = tape.mean_rows(lh)?; // mean over queries -> [1×N]
        let dist = tape.row_softmax(pooled)?;
        acc = Some(match acc {
            None => dist,
            Some(prev) => tape.add(prev, dist)?,
        });
    }
    tape.scale(acc.expect("at least one head"), 1.0 / cfg.heads as f64)
}

/// Pure scoring: run the forward on a private tape and validate the
/// resulting distribution.
pub fn score(ps: &PatchSet, params: &ScorerParams) -> Result<ScoreVector> {
    let mut tape = Tape::new();
    let patches = tape.constant(ps.patches.clone());
    let bound = params.store.bind(&mut tape, true);
    let scores = forward_scores(&mut tape, patches, params, &bound)?;
    ScoreVector::new(tape.value(scores).as_slice().to_vec())
}
