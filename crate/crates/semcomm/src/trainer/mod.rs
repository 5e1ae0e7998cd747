//! Two-phase training: pretrain the codec with random masking, then freeze
//! it and train the scorer plus task heads on the weighted multi-task loss
//! through the straight-through score path.
//!
//! Every stream of randomness (init, image synthesis, mask draws, epoch
//! shuffles) derives from the config seed with a distinct label, so a
//! training run is a pure function of (scene spec, architecture, config).

mod checkpoint;

pub use checkpoint::{config_digest, f32_from_hex, f32_to_hex, Checkpoint, CheckpointMeta};

use crate::codec::{
    decode_on_tape, encode_on_tape, init_codec, CodecConfig, CodecParams,
};
use crate::error::{Error, Result};
use crate::extractor::{kept_count, select_random, select_topk};
use crate::numcore::{Matrix, RngStream, Tape, TensorStore, VId};
use crate::scorer::{forward_scores, init_scorer, ScorerConfig, ScorerParams};
use crate::tasks::{heads_on_tape, init_heads, LossWeights, TaskHeads, DICE_SMOOTH};
use crate::trainer::checkpoint::config_digest as digest;
use crate::vision::{gen_scene, occupancy_grid, patchify, SceneSpec};
use std::time::Instant;

/// Training hyperparameters. `mask_ratio_lo/hi` bound the pretraining mask
/// draw; `rho_set` is the per-batch ratio set for scorer training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mask_ratio_lo: f64,
    pub mask_ratio_hi: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Images per epoch (regenerated deterministically by index).
    pub train_images: usize,
    /// Held-out images for the per-epoch evaluation line.
    pub holdout_images: usize,
    /// Mask ratios sampled during scorer training.
    pub rho_set: Vec<f64>,
    /// Probability of applying channel noise to a training example
    /// (default 0: clean training, noisy evaluation).
    pub noise_prob: f64,
    /// SNR used when training noise fires.
    pub noise_snr_db: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 20,
            mask_ratio_lo: 0.1,
            mask_ratio_hi: 0.9,
            weights: LossWeights::default(),
            seed: 42,
            train_images: 2000,
            holdout_images: 200,
            rho_set: vec![0.2, 0.4, 0.6, 0.8],
            noise_prob: 0.0,
            noise_snr_db: 16.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".into()));
        }
        // learning_rate of exactly 0 is allowed (it makes training a no-op,
        // which the determinism tests rely on); negative rates are not.
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be non-negative".into()));
        }
        if !(0.0 <= self.mask_ratio_lo
            && self.mask_ratio_lo <= self.mask_ratio_hi
            && self.mask_ratio_hi < 1.0)
        {
            return Err(Error::config(
                "mask ratio range must satisfy 0 <= lo <= hi < 1".into(),
            ));
        }
        if self.train_images == 0 {
            return Err(Error::config("train_images must be positive".into()));
        }
        if self.rho_set.is_empty()
            || self.rho_set.iter().any(|&r| !(0.0..1.0).contains(&r))
        {
            return Err(Error::config("rho_set must be non-empty ratios in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::config("noise_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "train:b{}:lr{}:e{}:mr{}-{}:w{},{},{}:seed{}:n{}",
            self.batch_size,
            self.learning_rate,
            self.epochs,
            self.mask_ratio_lo,
            self.mask_ratio_hi,
            self.weights.w_recon,
            self.weights.w_det,
            self.weights.w_kp,
            self.seed,
            self.train_images
        )
    }
}

/// Per-epoch loss trace returned by the training loops.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_holdout_loss: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer state aligned with one tensor store.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(store: &TensorStore) -> Self {
        let shapes: Vec<usize> = store.iter().map(|(_, m, _)| m.len()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update step from mean gradients (f64, aligned with the store).
    fn step(&mut self, store: &mut TensorStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..grads.len() {
            if grads[i].is_empty() {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let tensor = store.tensor_mut_by_index(i);
            for (j, &g) in grads[i].iter().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                let p = &mut tensor.as_mut_slice()[j];
                *p = (*p as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            }
        }
    }
}

/// Gradient accumulator aligned with one store's trainable tensors.
struct GradAccum {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccum {
    fn new(store: &TensorStore) -> Self {
        GradAccum {
            sums: store
                .iter()
                .map(|(_, m, trainable)| if trainable { vec![0.0; m.len()] } else { Vec::new() })
                .collect(),
            count: 0,
        }
    }

    fn add(&mut self, tape: &Tape, grads: &crate::numcore::Gradients, bound: &[VId]) {
        let _ = tape;
        for (i, slot) in self.sums.iter_mut().enumerate() {
            if slot.is_empty() {
                continue;
            }
            if let Some(g) = grads.get(bound[i]) {
                for (acc, &v) in slot.iter_mut().zip(g.as_slice()) {
                    *acc += v as f64;
                }
            }
        }
        self.count += 1;
    }

    fn into_means(mut self) -> Vec<Vec<f64>> {
        let n = self.count.max(1) as f64;
        for slot in &mut self.sums {
            for v in slot.iter_mut() {
                *v /= n;
            }
        }
        self.sums
    }
}

// ---------------------------------------------------------------------------
// Codec pretraining
// ---------------------------------------------------------------------------

fn scene_image(seed: u64, label: &str, index: u64, spec: &SceneSpec) -> Result<crate::vision::Image> {
    let mut rng = RngStream::indexed(seed, label, index);
    Ok(gen_scene(&mut rng, spec)?.0)
}

/// Mean reconstruction L1 of the codec over held-out images with fixed
/// per-image random masks.
fn codec_holdout_loss(
    params: &CodecParams,
    spec: &SceneSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    let n = spec.patch_count();
    let mut total = 0.0;
    for i in 0..cfg.holdout_images {
        let img = scene_image(cfg.seed, "holdout-img", i as u64, spec)?;
        let ps = patchify(&img, spec.patch_size)?;
        let mut mask_rng = RngStream::indexed(cfg.seed, "holdout-mask", i as u64);
        let rho = mask_rng.uniform_in(cfg.mask_ratio_lo, cfg.mask_ratio_hi);
        let k = kept_count(n, rho)?;
        let plan = select_random(n, k, &mut mask_rng)?;
        let mut tape = Tape::new();
        let patches = tape.constant(ps.patches.clone());
        let bound = params.store.bind(&mut tape, true);
        let features = encode_on_tape(&mut tape, patches, &plan.kept, params, &bound)?;
        let (out, _) = decode_on_tape(&mut tape, features, &plan.kept, params, &bound)?;
        let loss = tape.l1_loss(out, patches)?;
        total += tape.value(loss).get(0, 0) as f64;
    }
    Ok(total / cfg.holdout_images.max(1) as f64)
}

/// Pretrain the codec with random masking: per batch, draw a mask ratio
/// uniformly from the configured range, mask each image at random, and
/// minimize reconstruction L1 over all patches. No channel noise is
/// applied during pretraining.
pub fn pretrain_codec(
    spec: &SceneSpec,
    codec_cfg: &CodecConfig,
    cfg: &TrainConfig,
) -> Result<(CodecParams, TrainReport)> {
    spec.validate()?;
    cfg.validate()?;
    let mut params = init_codec(codec_cfg, &mut RngStream::labeled(cfg.seed, "codec-init"))?;
    let mut adam = Adam::new(&params.store);
    let mut report = TrainReport::default();
    let n = spec.patch_count();
    let mut rho_rng = RngStream::labeled(cfg.seed, "pretrain-rho");

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..cfg.train_images).collect();
        RngStream::indexed(cfg.seed, "pretrain-shuffle", epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let rho = rho_rng.uniform_in(cfg.mask_ratio_lo, cfg.mask_ratio_hi);
            let k = kept_count(n, rho)?;
            let mut accum = GradAccum::new(&params.store);
            for &idx in batch {
                let img = scene_image(cfg.seed, "train-img", idx as u64, spec)?;
                let ps = patchify(&img, spec.patch_size)?;
                let mut mask_rng = RngStream::indexed(
                    cfg.seed,
                    "pretrain-mask",
                    (epoch * cfg.train_images + idx) as u64,
                );
                let plan = select_random(n, k, &mut mask_rng)?;
                let mut tape = Tape::new();
                let patches = tape.constant(ps.patches.clone());
                let bound = params.store.bind(&mut tape, false);
                let features = encode_on_tape(&mut tape, patches, &plan.kept, &params, &bound)?;
                let (out, _) = decode_on_tape(&mut tape, features, &plan.kept, &params, &bound)?;
                let loss = tape.l1_loss(out, patches)?;
                let loss_v = tape.value(loss).get(0, 0);
                if !loss_v.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite pretraining loss at epoch {epoch}, image {idx}"
                    )));
                }
                epoch_loss += loss_v as f64;
                seen += 1;
                let grads = tape.backward(loss)?;
                accum.add(&tape, &grads, &bound);
            }
            adam.step(&mut params.store, &accum.into_means(), cfg.learning_rate);
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let holdout = codec_holdout_loss(&params, spec, cfg)?;
        report.epoch_train_loss.push(train_loss);
        report.epoch_holdout_loss.push(holdout);
        println!(
            "pretrain epoch {:>3}: recon {:.5} holdout {:.5} ({:.1}s)",
            epoch + 1,
            train_loss,
            holdout,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok((params, report))
}

// ---------------------------------------------------------------------------
// Scorer training
// ---------------------------------------------------------------------------

/// The trained transmitter-side bundle: scorer plus task heads.
pub struct ScorerBundle {
    pub scorer: ScorerParams,
    pub heads: TaskHeads,
}

struct ScorerBatchOutcome {
    loss: f64,
    recon: f64,
    det: f64,
    kp: f64,
}

#[allow(clippy::too_many_arguments)]
fn scorer_example_loss(
    tape: &mut Tape,
    ps_patches: &Matrix,
    occ_target: &Matrix,
    kp_target: &Matrix,
    rho: f64,
    codec: &CodecParams,
    scorer: &ScorerParams,
    heads: &TaskHeads,
    weights: &LossWeights,
    noise: Option<(f64, &mut RngStream)>,
) -> Result<(VId, ScorerBatchOutcome, Vec<VId>, Vec<VId>)> {
    let n = scorer.cfg.patch_count;
    let patches = tape.constant(ps_patches.clone());
    let codec_bound = codec.store.bind(tape, true); // frozen
    let scorer_bound = scorer.store.bind(tape, false);
    let heads_bound = heads.store.bind(tape, false);

    let scores = forward_scores(tape, patches, scorer, &scorer_bound)?;
    let score_vec = crate::scorer::ScoreVector::new(tape.value(scores).as_slice().to_vec())?;
    let k = kept_count(n, rho)?;
    let plan = select_topk(&score_vec, k)?;

    let features = encode_on_tape(tape, patches, &plan.kept, codec, &codec_bound)?;
    let scores_col = tape.transpose(scores)?;
    let kept_scores = tape.gather_rows(scores_col, plan.kept.clone())?;
    let mut payload = tape.straight_through(features, kept_scores)?;
    if let Some((snr_db, noise_rng)) = noise {
        // Additive form of the analog channel at the current signal power;
        // a constant with respect to the tape, as in deployment the noise
        // magnitude is not a gradient path.
        let f = tape.value(features);
        let mean_sq = f.as_slice().iter().map(|&v| v as f64 * v as f64).sum::<f64>()
            / f.len().max(1) as f64;
        if mean_sq > 0.0 {
            let sigma = mean_sq.sqrt() * 10f64.powf(-snr_db / 20.0);
            let mut delta = Matrix::zeros(f.rows(), f.cols());
            for v in delta.as_mut_slice() {
                *v = (noise_rng.gaussian() * sigma) as f32;
            }
            let d = tape.constant(delta);
            payload = tape.add(payload, d)?;
        }
    }
    let (out, dec_feats) = decode_on_tape(tape, payload, &plan.kept, codec, &codec_bound)?;
    let (det_probs, kp) = heads_on_tape(tape, dec_feats, heads, &heads_bound)?;

    let recon = tape.l1_loss(out, patches)?;
    let occ = tape.constant(occ_target.clone());
    let det = tape.dice_loss(det_probs, occ, DICE_SMOOTH)?;
    let kp_truth = tape.constant(kp_target.clone());
    let kp_loss = tape.mse_loss(kp, kp_truth)?;

    let wr = tape.scale(recon, weights.w_recon)?;
    let wd = tape.scale(det, weights.w_det)?;
    let wk = tape.scale(kp_loss, weights.w_kp)?;
    let partial = tape.add(wr, wd)?;
    let total = tape.add(partial, wk)?;
    let outcome = ScorerBatchOutcome {
        loss: tape.value(total).get(0, 0) as f64,
        recon: tape.value(recon).get(0, 0) as f64,
        det: tape.value(det).get(0, 0) as f64,
        kp: tape.value(kp_loss).get(0, 0) as f64,
    };
    Ok((total, outcome, scorer_bound, heads_bound))
}

/// Train the scorer and task heads against the frozen codec. Per batch, a
/// mask ratio is drawn from the configured set, patches are kept by score,
/// and gradients reach the scorer through the straight-through scaling of
/// the kept features.
pub fn train_scorer(
    codec: &CodecParams,
    spec: &SceneSpec,
    scorer_cfg: &ScorerConfig,
    cfg: &TrainConfig,
) -> Result<(ScorerBundle, TrainReport)> {
    spec.validate()?;
    cfg.validate()?;
    cfg.weights.validate_for_training()?;
    if scorer_cfg.patch_count != codec.cfg.patch_count
        || scorer_cfg.patch_dim != codec.cfg.patch_dim
    {
        return Err(Error::config("scorer and codec disagree on patch geometry".into()));
    }
    let mut scorer = init_scorer(scorer_cfg, &mut RngStream::labeled(cfg.seed, "scorer-init"))?;
    let mut heads = init_heads(
        codec.cfg.d_dec,
        &mut RngStream::labeled(cfg.seed, "heads-init"),
    )?;
    let mut adam_scorer = Adam::new(&scorer.store);
    let mut adam_heads = Adam::new(&heads.store);
    let mut report = TrainReport::default();
    let mut rho_rng = RngStream::labeled(cfg.seed, "scorer-rho");
    let mut noise_rng = RngStream::labeled(cfg.seed, "scorer-noise");

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..cfg.train_images).collect();
        RngStream::indexed(cfg.seed, "scorer-shuffle", epoch as u64).shuffle(&mut order);
        let (mut e_loss, mut e_recon, mut e_det, mut e_kp) = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let rho = cfg.rho_set[rho_rng.below(cfg.rho_set.len())];
            let mut acc_scorer = GradAccum::new(&scorer.store);
            let mut acc_heads = GradAccum::new(&heads.store);
            for &idx in batch {
                let mut scene_rng = RngStream::indexed(cfg.seed, "train-img", idx as u64);
                let (img, truth) = gen_scene(&mut scene_rng, spec)?;
                let ps = patchify(&img, spec.patch_size)?;
                let occ = occupancy_grid(&truth, spec.height, spec.width, spec.patch_size)?;
                let occ_target = Matrix::new(
                    occ.bits.len(),
                    1,
                    occ.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                )?;
                let kp_target = Matrix::row_vec(vec![
                    truth.primary_centroid.0 as f32,
                    truth.primary_centroid.1 as f32,
                ]);
                // Optional training-time channel noise (default off).
                let apply_noise = cfg.noise_prob > 0.0 && noise_rng.uniform() < cfg.noise_prob;
                let mut tape = Tape::new();
                let (total, outcome, scorer_bound, heads_bound) = scorer_example_loss(
                    &mut tape,
                    &ps.patches,
                    &occ_target,
                    &kp_target,
                    rho,
                    codec,
                    &scorer,
                    &heads,
                    &cfg.weights,
                    apply_noise.then_some((cfg.noise_snr_db, &mut noise_rng)),
                )?;
                if !outcome.loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite scorer loss at epoch {epoch}, image {idx}"
                    )));
                }
                e_loss += outcome.loss;
                e_recon += outcome.recon;
                e_det += outcome.det;
                e_kp += outcome.kp;
                seen += 1;
                let grads = tape.backward(total)?;
                acc_scorer.add(&tape, &grads, &scorer_bound);
                acc_heads.add(&tape, &grads, &heads_bound);
            }
            adam_scorer.step(&mut scorer.store, &acc_scorer.into_means(), cfg.learning_rate);
            adam_heads.step(&mut heads.store, &acc_heads.into_means(), cfg.learning_rate);
        }
        let denom = seen.max(1) as f64;
        report.epoch_train_loss.push(e_loss / denom);
        report.epoch_holdout_loss.push(e_loss / denom);
        println!(
            "scorer epoch {:>3}: total {:.5} recon {:.5} det {:.5} kp {:.5} ({:.1}s)",
            epoch + 1,
            e_loss / denom,
            e_recon / denom,
            e_det / denom,
            e_kp / denom,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok((
        ScorerBundle {
            scorer,
            heads,
        },
        report,
    ))
}

// ---------------------------------------------------------------------------
// Typed checkpoint wrappers
// ---------------------------------------------------------------------------

fn store_tensors(store: &TensorStore, prefix: &str) -> Vec<(String, Matrix)> {
    store
        .iter()
        .map(|(name, m, _)| (format!("{prefix}{name}"), m.clone()))
        .collect()
}

fn restore_store(
    template: &TensorStore,
    tensors: &[(String, Matrix)],
    prefix: &str,
) -> Result<TensorStore> {
    let mut out = TensorStore::new();
    for (name, template_m, trainable) in template.iter() {
        let full = format!("{prefix}{name}");
        let found = tensors
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| Error::parse(0, format!("checkpoint missing tensor '{full}'")))?;
        if found.1.shape() != template_m.shape() {
            return Err(Error::parse(
                0,
                format!(
                    "tensor '{full}' has dims {:?}, expected {:?}",
                    found.1.shape(),
                    template_m.shape()
                ),
            ));
        }
        out.add(name, found.1.clone(), trainable);
    }
    Ok(out)
}

/// Codec -> checkpoint, recording seed/epoch and the architecture line.
pub fn codec_to_checkpoint(params: &CodecParams, cfg: &TrainConfig, epoch: u64) -> Checkpoint {
    let c = &params.cfg;
    Checkpoint {
        meta: CheckpointMeta {
            seed: cfg.seed,
            epoch,
            config_digest: digest(&format!("{}|{}", c.summary(), cfg.summary())),
        },
        arch: format!(
            "kind=codec n={} d_patch={} d_enc={} enc_blocks={} enc_heads={} d_dec={} dec_blocks={} dec_heads={} mlp={}",
            c.patch_count,
            c.patch_dim,
            c.d_enc,
            c.enc_blocks,
            c.enc_heads,
            c.d_dec,
            c.dec_blocks,
            c.dec_heads,
            c.mlp_ratio
        ),
        tensors: store_tensors(&params.store, ""),
    }
}

pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<CodecParams> {
    if ck.arch_value("kind") != Some("codec") {
        return Err(Error::config("checkpoint is not a codec checkpoint".into()));
    }
    let cfg = CodecConfig {
        patch_count: ck.arch_usize("n")?,
        patch_dim: ck.arch_usize("d_patch")?,
        d_enc: ck.arch_usize("d_enc")?,
        enc_blocks: ck.arch_usize("enc_blocks")?,
        enc_heads: ck.arch_usize("enc_heads")?,
        d_dec: ck.arch_usize("d_dec")?,
        dec_blocks: ck.arch_usize("dec_blocks")?,
        dec_heads: ck.arch_usize("dec_heads")?,
        mlp_ratio: ck.arch_usize("mlp")?,
    };
    let template = init_codec(&cfg, &mut RngStream::new(0))?;
    let store = restore_store(&template.store, &ck.tensors, "")?;
    CodecParams::from_store(cfg, store)
}

/// Scorer bundle -> checkpoint ("scorer." and "heads." tensor prefixes).
pub fn bundle_to_checkpoint(bundle: &ScorerBundle, cfg: &TrainConfig, epoch: u64) -> Checkpoint {
    let s = &bundle.scorer.cfg;
    let mut tensors = store_tensors(&bundle.scorer.store, "scorer.");
    tensors.extend(store_tensors(&bundle.heads.store, "heads."));
    Checkpoint {
        meta: CheckpointMeta {
            seed: cfg.seed,
            epoch,
            config_digest: digest(&format!("{}|{}", s.summary(), cfg.summary())),
        },
        arch: format!(
            "kind=scorer n={} d_patch={} d_model={} blocks={} heads={} mlp={} d_dec={}",
            s.patch_count, s.patch_dim, s.d_model, s.blocks, s.heads, s.mlp_ratio, bundle.heads.d_dec
        ),
        tensors,
    }
}

pub fn bundle_from_checkpoint(ck: &Checkpoint) -> Result<ScorerBundle> {
    if ck.arch_value("kind") != Some("scorer") {
        return Err(Error::config("checkpoint is not a scorer checkpoint".into()));
    }
    let cfg = ScorerConfig {
        patch_count: ck.arch_usize("n")?,
        patch_dim: ck.arch_usize("d_patch")?,
        d_model: ck.arch_usize("d_model")?,
        blocks: ck.arch_usize("blocks")?,
        heads: ck.arch_usize("heads")?,
        mlp_ratio: ck.arch_usize("mlp")?,
    };
    let d_dec = ck.arch_usize("d_dec")?;
    let scorer_template = init_scorer(&cfg, &mut RngStream::new(0))?;
    let heads_template = init_heads(d_dec, &mut RngStream::new(0))?;
    let scorer_store = restore_store(&scorer_template.store, &ck.tensors, "scorer.")?;
    let heads_store = restore_store(&heads_template.store, &ck.tensors, "heads.")?;
    Ok(ScorerBundle {
        scorer: ScorerParams::from_store(cfg, scorer_store)?,
        heads: TaskHeads::from_store(d_dec, heads_store)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 16,
            channels: 3,
            patch_size: 4,
            min_objects: 1,
            max_objects: 2,
            min_size: 4,
            max_size: 8,
            region: (0.0, 0.0, 1.0, 1.0),
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            train_images: 8,
            holdout_images: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretrain_is_deterministic_in_seed() {
        let spec = tiny_spec();
        let ccfg = CodecConfig::toy(16, 48);
        let cfg = tiny_train_cfg();
        let (a, _) = pretrain_codec(&spec, &ccfg, &cfg).unwrap();
        let (b, _) = pretrain_codec(&spec, &ccfg, &cfg).unwrap();
        for ((_, ma, _), (_, mb, _)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let spec = tiny_spec();
        let ccfg = CodecConfig::toy(16, 48);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_train_cfg()
        };
        let (trained, _) = pretrain_codec(&spec, &ccfg, &cfg).unwrap();
        let fresh = init_codec(&ccfg, &mut RngStream::labeled(cfg.seed, "codec-init")).unwrap();
        for ((_, ma, _), (_, mb, _)) in trained.store.iter().zip(fresh.store.iter()) {
            assert_eq!(ma, mb, "lr=0 must leave parameters untouched");
        }
    }

    #[test]
    fn scorer_training_freezes_codec_and_moves_scorer() {
        let spec = tiny_spec();
        let ccfg = CodecConfig::toy(16, 48);
        let cfg = tiny_train_cfg();
        let (codec, _) = pretrain_codec(&spec, &ccfg, &cfg).unwrap();
        let before: Vec<Matrix> = codec.store.iter().map(|(_, m, _)| m.clone()).collect();

        let scfg = ScorerConfig::toy(16, 48);
        let (bundle, _) = train_scorer(&codec, &spec, &scfg, &cfg).unwrap();

        // Freeze contract: bitwise identical codec.
        for ((_, after, _), b) in codec.store.iter().zip(&before) {
            assert_eq!(after, b, "codec changed during scorer training");
        }
        // Gradient flow: at least one scorer parameter moved.
        let fresh = init_scorer(&scfg, &mut RngStream::labeled(cfg.seed, "scorer-init")).unwrap();
        let moved = bundle
            .scorer
            .store
            .iter()
            .zip(fresh.store.iter())
            .any(|((_, a, _), (_, b, _))| a != b);
        assert!(moved, "no scorer parameter changed after training");
    }

    #[test]
    fn scorer_training_is_deterministic() {
        let spec = tiny_spec();
        let ccfg = CodecConfig::toy(16, 48);
        let cfg = tiny_train_cfg();
        let (codec, _) = pretrain_codec(&spec, &ccfg, &cfg).unwrap();
        let scfg = ScorerConfig::toy(16, 48);
        let (a, _) = train_scorer(&codec, &spec, &scfg, &cfg).unwrap();
        let (b, _) = train_scorer(&codec, &spec, &scfg, &cfg).unwrap();
        for ((_, ma, _), (_, mb, _)) in a.scorer.store.iter().zip(b.scorer.store.iter()) {
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn all_zero_weights_rejected() {
        let spec = tiny_spec();
        let ccfg = CodecConfig::toy(16, 48);
        let mut cfg = tiny_train_cfg();
        cfg.weights = LossWeights {
            w_recon: 0.0,
            w_det: 0.0,
            w_kp: 0.0,
        };
        let (codec, _) = pretrain_codec(&spec, &ccfg, &tiny_train_cfg()).unwrap();
        assert!(train_scorer(&codec, &spec, &ScorerConfig::toy(16, 48), &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_codec_bits() {
        let ccfg = CodecConfig::toy(16, 48);
        let params = init_codec(&ccfg, &mut RngStream::new(7)).unwrap();
        let cfg = tiny_train_cfg();
        let ck = codec_to_checkpoint(&params, &cfg, 3);
        let text = ck.render();
        let restored = codec_from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        for ((na, ma, _), (nb, mb, _)) in params.store.iter().zip(restored.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ma, mb);
        }
        // save -> load -> save byte identity
        let again = codec_to_checkpoint(&restored, &cfg, 3);
        assert_eq!(again.render(), text);
    }

    #[test]
    fn bundle_checkpoint_round_trips() {
        let scfg = ScorerConfig::toy(16, 48);
        let bundle = ScorerBundle {
            scorer: init_scorer(&scfg, &mut RngStream::new(8)).unwrap(),
            heads: init_heads(16, &mut RngStream::new(9)).unwrap(),
        };
        let cfg = tiny_train_cfg();
        let ck = bundle_to_checkpoint(&bundle, &cfg, 5);
        let restored = bundle_from_checkpoint(&Checkpoint::parse(&ck.render()).unwrap()).unwrap();
        for ((_, ma, _), (_, mb, _)) in bundle.scorer.store.iter().zip(restored.scorer.store.iter())
        {
            assert_eq!(ma, mb);
        }
        for ((_, ma, _), (_, mb, _)) in bundle.heads.store.iter().zip(restored.heads.store.iter()) {
            assert_eq!(ma, mb);
        }
    }
}
