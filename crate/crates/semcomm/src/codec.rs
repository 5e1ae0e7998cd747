//! Masked-autoencoder codec: encode kept patches into features at the
//! transmitter, reconstruct all patches from received features at the
//! receiver.
//!
//! The encoder sees only the kept subsequence (each patch projected and
//! offset by the sine-cosine row of its original grid position). The
//! decoder projects received features down, fills missing positions with a
//! learned mask token, adds positional rows everywhere, runs its blocks,
//! and maps every position back to patch pixels.

use crate::error::{Error, Result};
use crate::extractor::SelectionPlan;
use crate::numcore::attention::{block_ids, init_block, transformer_block, BlockIx, INIT_STD};
use crate::numcore::{gaussian_matrix, Matrix, RngStream, Tape, TensorStore, TId, VId};
use crate::scorer::{sincos_pos_embed, ScoreVector};
use crate::vision::PatchSet;

/// The over-the-air payload: kept indices plus one feature vector per kept
/// patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    /// Ascending original-grid indices of the kept patches.
    pub kept: Vec<usize>,
    /// One row per kept patch, matching `kept` order.
    pub features: Matrix,
    /// Total patches in the source grid.
    pub patch_count: usize,
}

impl FeatureFrame {
    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.kept.len() {
            return Err(Error::shape("feature rows != kept count".into()));
        }
        if !self.kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::shape("kept indices not ascending".into()));
        }
        if self.kept.last().is_some_and(|&i| i >= self.patch_count) {
            return Err(Error::shape("kept index out of range".into()));
        }
        Ok(())
    }
}

/// Codec geometry. The encoder/decoder asymmetry mirrors the MAE shape.
#[derive(Debug, Clone)]
pub struct CodecConfig {
    pub patch_count: usize,
    pub patch_dim: usize,
    pub d_enc: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    pub d_dec: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
}

impl CodecConfig {
    /// Desk-scale default for 64 patches of dim 48.
    pub fn toy(patch_count: usize, patch_dim: usize) -> Self {
        CodecConfig {
            patch_count,
            patch_dim,
            d_enc: 32,
            enc_blocks: 2,
            enc_heads: 4,
            d_dec: 16,
            dec_blocks: 1,
            dec_heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_count == 0 || self.patch_dim == 0 {
            return Err(Error::config("codec: empty patch geometry".into()));
        }
        for (what, d, h, b) in [
            ("encoder", self.d_enc, self.enc_heads, self.enc_blocks),
            ("decoder", self.d_dec, self.dec_heads, self.dec_blocks),
        ] {
            if b == 0 {
                return Err(Error::config(format!("codec {what} needs blocks")));
            }
            if h == 0 || d % h != 0 {
                return Err(Error::config(format!(
                    "codec {what} width {d} not divisible by {h} heads"
                )));
            }
            if d % 2 != 0 {
                return Err(Error::config(format!(
                    "codec {what} width must be even for sine-cosine positions"
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "codec:n{}:dp{}:e{}x{}h{}:d{}x{}h{}:m{}",
            self.patch_count,
            self.patch_dim,
            self.d_enc,
            self.enc_blocks,
            self.enc_heads,
            self.d_dec,
            self.dec_blocks,
            self.dec_heads,
            self.mlp_ratio
        )
    }
}

struct CodecIx {
    enc_proj_w: TId,
    enc_proj_b: TId,
    enc_pos: TId,
    enc_blocks: Vec<BlockIx>,
    dec_proj_w: TId,
    dec_proj_b: TId,
    mask_token: TId,
    dec_pos: TId,
    dec_blocks: Vec<BlockIx>,
    out_w: TId,
    out_b: TId,
}

/// Codec parameters: positional tables frozen, mask token trainable.
pub struct CodecParams {
    pub cfg: CodecConfig,
    pub store: TensorStore,
    ix: CodecIx,
}

pub fn init_codec(cfg: &CodecConfig, rng: &mut RngStream) -> Result<CodecParams> {
    cfg.validate()?;
    let mut store = TensorStore::new();
    let enc_proj_w = store.add(
        "enc.proj.w",
        gaussian_matrix(cfg.patch_dim, cfg.d_enc, INIT_STD, rng),
        true,
    );
    let enc_proj_b = store.add("enc.proj.b", Matrix::zeros(1, cfg.d_enc), true);
    let enc_pos = store.add(
        "enc.pos",
        sincos_pos_embed(cfg.patch_count, cfg.d_enc)?,
        false,
    );
    let enc_blocks = (0..cfg.enc_blocks)
        .map(|b| {
            init_block(
                &mut store,
                &format!("enc.block{b}"),
                cfg.d_enc,
                cfg.d_enc * cfg.mlp_ratio,
                rng,
            )
        })
        .collect();
    let dec_proj_w = store.add(
        "dec.proj.w",
        gaussian_matrix(cfg.d_enc, cfg.d_dec, INIT_STD, rng),
        true,
    );
    let dec_proj_b = store.add("dec.proj.b", Matrix::zeros(1, cfg.d_dec), true);
    let mask_token = store.add(
        "dec.mask_token",
        gaussian_matrix(1, cfg.d_dec, INIT_STD, rng),
        true,
    );
    let dec_pos = store.add(
        "dec.pos",
        sincos_pos_embed(cfg.patch_count, cfg.d_dec)?,
        false,
    );
    let dec_blocks = (0..cfg.dec_blocks)
        .map(|b| {
            init_block(
                &mut store,
                &format!("dec.block{b}"),
                cfg.d_dec,
                cfg.d_dec * cfg.mlp_ratio,
                rng,
            )
        })
        .collect();
    let out_w = store.add(
        "dec.out.w",
        gaussian_matrix(cfg.d_dec, cfg.patch_dim, INIT_STD, rng),
        true,
    );
    let out_b = store.add("dec.out.b", Matrix::zeros(1, cfg.patch_dim), true);
    Ok(CodecParams {
        cfg: cfg.clone(),
        store,
        ix: CodecIx {
            enc_proj_w,
            enc_proj_b,
            enc_pos,
            enc_blocks,
            dec_proj_w,
            dec_proj_b,
            mask_token,
            dec_pos,
            dec_blocks,
            out_w,
            out_b,
        },
    })
}

impl CodecParams {
    pub fn from_store(cfg: CodecConfig, store: TensorStore) -> Result<Self> {
        let rebuilt = init_codec(&cfg, &mut RngStream::new(0))?;
        if rebuilt.store.len() != store.len() {
            return Err(Error::config("codec store layout mismatch".into()));
        }
        Ok(CodecParams {
            cfg,
            store,
            ix: rebuilt.ix,
        })
    }

    /// Zero both positional tables (symmetry tests).
    pub fn zero_positional(&mut self) {
        for id in [self.ix.enc_pos, self.ix.dec_pos] {
            let t = self.store.get_mut(id);
            *t = Matrix::zeros(t.rows(), t.cols());
        }
    }
}

/// Encoder forward on a tape: kept patches -> [k×d_enc] features.
pub fn encode_on_tape(
    tape: &mut Tape,
    patches: VId,
    plan_kept: &[usize],
    params: &CodecParams,
    bound: &[VId],
) -> Result<VId> {
    let cfg = &params.cfg;
    let (n, d_patch) = tape.value(patches).shape();
    if n != cfg.patch_count || d_patch != cfg.patch_dim {
        return Err(Error::shape(format!(
            "codec expects {}x{} patches, got {n}x{d_patch}",
            cfg.patch_count, cfg.patch_dim
        )));
    }
    let ix = &params.ix;
    let kept_patches = tape.gather_rows(patches, plan_kept.to_vec())?;
    let mut x = tape.linear(kept_patches, bound[ix.enc_proj_w.0], bound[ix.enc_proj_b.0])?;
    let kept_pos = tape.gather_rows(bound[ix.enc_pos.0], plan_kept.to_vec())?;
    x = tape.add(x, kept_pos)?;
    for b in 0..cfg.enc_blocks {
        let ids = block_ids(bound, &ix.enc_blocks[b]);
        x = transformer_block(tape, x, &ids, cfg.enc_heads)?;
    }
    Ok(x)
}

/// Decoder forward on a tape. Returns (patch outputs [N×d_patch], decoder
/// features [N×d_dec]); the features feed the task heads.
pub fn decode_on_tape(
    tape: &mut Tape,
    features: VId,
    kept: &[usize],
    params: &CodecParams,
    bound: &[VId],
) -> Result<(VId, VId)> {
    let cfg = &params.cfg;
    if tape.value(features).cols() != cfg.d_enc {
        return Err(Error::shape(format!(
            "decoder expects {}-dim features, got {}",
            cfg.d_enc,
            tape.value(features).cols()
        )));
    }
    let ix = &params.ix;
    let projected = tape.linear(features, bound[ix.dec_proj_w.0], bound[ix.dec_proj_b.0])?;
    let mut x = tape.assemble_masked(
        projected,
        bound[ix.mask_token.0],
        kept.to_vec(),
        cfg.patch_count,
    )?;
    x = tape.add(x, bound[ix.dec_pos.0])?;
    for b in 0..cfg.dec_blocks {
        let ids = block_ids(bound, &ix.dec_blocks[b]);
        x = transformer_block(tape, x, &ids, cfg.dec_heads)?;
    }
    let out = tape.linear(x, bound[ix.out_w.0], bound[ix.out_b.0])?;
    Ok((out, x))
}

/// Pure encoding: kept patches -> feature frame.
pub fn encode(ps: &PatchSet, plan: &SelectionPlan, params: &CodecParams) -> Result<FeatureFrame> {
    if plan.patch_count != ps.patch_count() {
        return Err(Error::shape("plan and patch set disagree on patch count".into()));
    }
    let mut tape = Tape::new();
    let patches = tape.constant(ps.patches.clone());
    let bound = params.store.bind(&mut tape, true);
    let features = encode_on_tape(&mut tape, patches, &plan.kept, params, &bound)?;
    Ok(FeatureFrame {
        kept: plan.kept.clone(),
        features: tape.value(features).clone(),
        patch_count: plan.patch_count,
    })
}

/// Pure decode output.
pub struct Decoded {
    /// All N reconstructed patch vectors (unclamped model output).
    pub patches: Matrix,
    /// Decoder features per position, input to the task heads.
    pub features: Matrix,
}

/// Pure decoding of a received frame into all N patch vectors. An empty
/// frame (nothing received) decodes from mask tokens alone, which is the
/// no-information baseline.
pub fn decode(frame: &FeatureFrame, params: &CodecParams) -> Result<Decoded> {
    frame.validate()?;
    if frame.patch_count != params.cfg.patch_count {
        return Err(Error::shape("frame patch count mismatches codec".into()));
    }
    let mut tape = Tape::new();
    let features = tape.constant(frame.features.clone());
    let bound = params.store.bind(&mut tape, true);
    let (out, feats) = decode_on_tape(&mut tape, features, &frame.kept, params, &bound)?;
    Ok(Decoded {
        patches: tape.value(out).clone(),
        features: tape.value(feats).clone(),
    })
}

/// Forward-identity score scaling of a frame (the gradient bridge lives on
/// the tape; see `OpKind::StraightThroughScale`). Validates that every
/// kept patch has a strictly positive score and returns the frame as-is.
pub fn straight_through_scale(frame: &FeatureFrame, scores: &ScoreVector) -> Result<FeatureFrame> {
    if scores.len() != frame.patch_count {
        return Err(Error::shape("scores do not cover all patches".into()));
    }
    for &i in &frame.kept {
        if scores.scores[i] <= 0.0 {
            return Err(Error::numeric(format!(
                "straight-through scale: kept patch {i} has non-positive score"
            )));
        }
    }
    Ok(frame.clone())
}
