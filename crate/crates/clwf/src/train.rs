//! Self-supervised training of the velocity field and the VAE potential.
//!
//! Per batch: partition observed entries into target/conditional masks, draw
//! initial noise, project the (noise, target) pairs into the Wasserstein
//! space via the configured coupling, interpolate intermediate states, and
//! regress the network onto the straight-line velocities. Adam updates with
//! linear learning-rate decay and global-norm gradient clipping.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SeriesBatch;
use crate::interpolant::{self, InterpolantConfig};
use crate::model::{self, time_embedding, ModelParams};
use crate::optim::{clip_global_norm, AdamState};
use crate::ot::{couple_indices, CouplingMode};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vae::{self, VaeParams};
use crate::{Error, Result};

/// Which coordinates enter the flow-matching norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMask {
    /// Whole state (default reading of the objective).
    All,
    /// Ablation: restrict to target-masked coordinates.
    TargetOnly,
}

impl LossMask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LossMask::All),
            "target_only" => Ok(LossMask::TargetOnly),
            other => Err(Error::Config(format!(
                "loss_mask '{other}' not one of all|target_only"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays linearly to lr/epochs by the last epoch.
    pub learning_rate: f64,
    pub interpolant: InterpolantConfig,
    pub coupling: CouplingMode,
    pub target_mask_ratio: f64,
    /// Pure-generation mode: the whole state is the target and there is no
    /// conditioning (used by the 2-D toys).
    pub full_target: bool,
    pub loss_mask: LossMask,
    pub clip_norm: f64,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub latent_dim: usize,
    pub vae_hidden_dims: Vec<usize>,
    pub vae_beta: f64,
    pub seed: u64,
    /// Per-epoch TSV log (epoch, mean loss, lr, wall seconds).
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.001,
            interpolant: InterpolantConfig::default(),
            coupling: CouplingMode::Exact,
            target_mask_ratio: 0.2,
            full_target: false,
            loss_mask: LossMask::All,
            clip_norm: 1.0,
            hidden_dims: vec![128, 128],
            time_embed_dim: 32,
            latent_dim: 16,
            vae_hidden_dims: vec![128],
            vae_beta: 1.0,
            seed: 0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain(
                "train: epochs and batch_size must be positive".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Domain(
                "train: learning_rate and clip_norm must be positive".to_string(),
            ));
        }
        if !(self.target_mask_ratio > 0.0 && self.target_mask_ratio < 1.0) {
            return Err(Error::Domain(format!(
                "train: target_mask_ratio {} outside (0, 1)",
                self.target_mask_ratio
            )));
        }
        if self.vae_beta < 0.0 {
            return Err(Error::Domain("train: vae_beta must be nonnegative".to_string()));
        }
        self.interpolant.validate()
    }
}

/// Disjoint partition of the observed entries into target and conditional.
#[derive(Debug, Clone)]
pub struct MaskSplit {
    pub cond_mask: Tensor,
    pub target_mask: Tensor,
}

/// Mark a uniformly random subset of round(ratio · observed) entries as the
/// imputation target; the rest stay conditional. The target always keeps at
/// least one entry and leaves at least one conditional entry.
pub fn mask_split<R: Rng + ?Sized>(
    obs_mask: &Tensor,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskSplit> {
    let observed: Vec<usize> = obs_mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, m)| (*m == 1.0).then_some(i))
        .collect();
    if observed.len() < 2 {
        return Err(Error::Domain(format!(
            "mask_split: needs >= 2 observed entries, found {}",
            observed.len()
        )));
    }
    let want = (ratio * observed.len() as f64).round() as usize;
    let n_target = want.clamp(1, observed.len() - 1);
    let mut pool = observed;
    pool.shuffle(rng);
    let mut target = Tensor::zeros(obs_mask.shape());
    for &idx in pool.iter().take(n_target) {
        target.data_mut()[idx] = 1.0;
    }
    let cond = obs_mask.sub(&target)?;
    Ok(MaskSplit {
        cond_mask: cond,
        target_mask: target,
    })
}

/// One mask-split sample ready for the flow objective. The target state
/// carries true values at target positions and 0 elsewhere.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub target_state: Tensor,
    pub target_mask: Tensor,
    pub cond: Tensor,
    pub cond_mask: Tensor,
}

impl FlowSample {
    pub fn from_split(values: &Tensor, split: &MaskSplit) -> Result<FlowSample> {
        Ok(FlowSample {
            target_state: values.mul(&split.target_mask)?,
            target_mask: split.target_mask.clone(),
            cond: values.mul(&split.cond_mask)?,
            cond_mask: split.cond_mask.clone(),
        })
    }

    /// Whole state as target, no conditioning.
    pub fn full_target(values: &Tensor) -> FlowSample {
        FlowSample {
            target_state: values.clone(),
            target_mask: Tensor::full(values.shape(), 1.0),
            cond: Tensor::zeros(values.shape()),
            cond_mask: Tensor::zeros(values.shape()),
        }
    }
}

/// A coupled, interpolated training pair with its regression target.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x_t: Tensor,
    pub u_target: Tensor,
    pub t: f64,
    pub cond: Tensor,
    pub cond_mask: Tensor,
    pub target_mask: Tensor,
}

/// Draw noise, couple it with the batch targets, and interpolate: one
/// stochastic realization of the mini-batch objective.
pub fn make_training_pairs<R: Rng + ?Sized>(
    batch: &[FlowSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    if batch.is_empty() {
        return Err(Error::Domain("flow loss: empty batch".to_string()));
    }
    let shape = batch[0].target_state.shape().to_vec();
    let x0s: Vec<Tensor> = (0..batch.len())
        .map(|_| Tensor::randn(&shape, cfg.interpolant.sigma_0, rng))
        .collect();
    let targets: Vec<Tensor> = batch.iter().map(|s| s.target_state.clone()).collect();
    let mc = couple_indices(&x0s, &targets, cfg.coupling, rng)?;

    let mut pairs = Vec::with_capacity(batch.len());
    for (i, &j) in mc.pairing.iter().enumerate() {
        let sample = &batch[j];
        let t = interpolant::sample_time(&cfg.interpolant, rng);
        let x_t = interpolant::interpolate(&x0s[i], &sample.target_state, t, &cfg.interpolant, rng)?;
        let u_target = interpolant::target_velocity(&x0s[i], &sample.target_state, &cfg.interpolant)?;
        pairs.push(TrainingPair {
            x_t,
            u_target,
            t,
            cond: sample.cond.clone(),
            cond_mask: sample.cond_mask.clone(),
            target_mask: sample.target_mask.clone(),
        });
    }
    Ok(pairs)
}

/// Build the batched flow-matching loss on a tape:
/// mean over the batch of ‖u_target − μ_θ(x_input, t)‖².
pub(crate) fn flow_loss_on_tape(
    params: &ModelParams,
    tape: &mut Tape,
    param_ids: &[(NodeId, NodeId)],
    pairs: &[TrainingPair],
    loss_mask: LossMask,
) -> Result<NodeId> {
    let n = pairs.len();
    let mut rows = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for p in pairs {
        let embed = time_embedding(p.t, params.time_embed_dim);
        let row = Tensor::concat(
            0,
            &[
                &p.x_t.flatten(),
                &p.cond.flatten(),
                &p.cond_mask.flatten(),
                &embed,
            ],
        )?;
        rows.push(row.as_row());
        targets.push(p.u_target.flatten().as_row());
        masks.push(p.target_mask.flatten().as_row());
    }
    let row_refs: Vec<&Tensor> = rows.iter().collect();
    let target_refs: Vec<&Tensor> = targets.iter().collect();
    let inputs = tape.constant(Tensor::concat(0, &row_refs)?);
    let target_mat = tape.constant(Tensor::concat(0, &target_refs)?);

    let pred = params.forward_on_tape(tape, param_ids, inputs)?;
    let mut diff = tape.sub(pred, target_mat)?;
    if loss_mask == LossMask::TargetOnly {
        let mask_refs: Vec<&Tensor> = masks.iter().collect();
        let mask_mat = tape.constant(Tensor::concat(0, &mask_refs)?);
        diff = tape.mul(diff, mask_mat)?;
    }
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Scalar mini-batch flow-matching loss (one stochastic realization).
pub fn flow_matching_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[FlowSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let pairs = make_training_pairs(batch, cfg, rng)?;
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let loss = flow_loss_on_tape(params, &mut tape, &ids, &pairs, cfg.loss_mask)?;
    tape.value(loss).item()
}

/// Loss value and parameter gradients (layer order w0, b0, w1, b1, ...) for
/// one stochastic realization. Reseeding the rng identically makes this a
/// deterministic function of the parameters.
pub fn flow_loss_and_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[FlowSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    let pairs = make_training_pairs(batch, cfg, rng)?;
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let loss = flow_loss_on_tape(params, &mut tape, &ids, &pairs, cfg.loss_mask)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(2 * ids.len());
    for (li, (w_id, b_id)) in ids.iter().enumerate() {
        out.push(
            grads
                .take(*w_id)
                .unwrap_or_else(|| Tensor::zeros(params.layers[li].w.shape())),
        );
        out.push(
            grads
                .take(*b_id)
                .unwrap_or_else(|| Tensor::zeros(params.layers[li].b.shape())),
        );
    }
    Ok((value, out))
}

/// Trained parameters plus the per-epoch mean loss curve.
#[derive(Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug)]
pub struct VaeTrainRun {
    pub params: VaeParams,
    pub epoch_losses: Vec<f64>,
}

struct EpochLogger {
    writer: Option<std::io::BufWriter<std::fs::File>>,
    start: Instant,
}

impl EpochLogger {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let writer = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(EpochLogger {
            writer,
            start: Instant::now(),
        })
    }

    fn log(&mut self, epoch: usize, mean_loss: f64, lr: f64) -> Result<()> {
        let secs = self.start.elapsed().as_secs_f64();
        log::debug!("epoch {epoch}: loss {mean_loss:.6} lr {lr:.6} ({secs:.1}s)");
        if let Some(w) = &mut self.writer {
            writeln!(w, "{epoch}\t{mean_loss}\t{lr}\t{secs}")?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn batch_context(e: Error, epoch: usize, batch: usize) -> Error {
    Error::Domain(format!("training aborted at epoch {epoch}, batch {batch}: {e}"))
}

/// Train the velocity field per the flow-matching objective.
pub fn train_flow(dataset: &SeriesBatch, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("train_flow: empty dataset".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::init_params(
        dataset.k(),
        dataset.l(),
        &cfg.hidden_dims,
        cfg.time_embed_dim,
        cfg.seed,
    )?;
    let param_refs: Vec<&Tensor> = params
        .layers
        .iter()
        .flat_map(|l| [&l.w, &l.b])
        .collect();
    let mut adam = AdamState::new(&param_refs);
    drop(param_refs);

    let mut logger = EpochLogger::open(&cfg.log_path)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64);
        let mut loss_sum = 0.0;
        let batches = shuffled_batches(dataset.len(), cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        for (b_idx, chunk) in batches.into_iter().enumerate() {
            let mut step = |rng: &mut ChaCha8Rng, params: &mut ModelParams| -> Result<f64> {
                let mut batch = Vec::with_capacity(chunk.len());
                for &idx in &chunk {
                    let sample = if cfg.full_target {
                        FlowSample::full_target(&dataset.values[idx])
                    } else {
                        let split =
                            mask_split(&dataset.obs_mask[idx], cfg.target_mask_ratio, rng)?;
                        FlowSample::from_split(&dataset.values[idx], &split)?
                    };
                    batch.push(sample);
                }
                let pairs = make_training_pairs(&batch, cfg, rng)?;
                let mut tape = Tape::new();
                let ids = params.register(&mut tape);
                let loss_node =
                    flow_loss_on_tape(params, &mut tape, &ids, &pairs, cfg.loss_mask)?;
                let loss = tape.value(loss_node).item()?;
                if !loss.is_finite() {
                    return Err(Error::Domain(format!("non-finite loss {loss}")));
                }
                let mut grads = tape.backward(loss_node)?;
                let mut grad_tensors: Vec<Tensor> = Vec::with_capacity(2 * ids.len());
                for (li, (w_id, b_id)) in ids.iter().enumerate() {
                    grad_tensors.push(
                        grads
                            .take(*w_id)
                            .unwrap_or_else(|| Tensor::zeros(params.layers[li].w.shape())),
                    );
                    grad_tensors.push(
                        grads
                            .take(*b_id)
                            .unwrap_or_else(|| Tensor::zeros(params.layers[li].b.shape())),
                    );
                }
                clip_global_norm(&mut grad_tensors, cfg.clip_norm);
                let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
                let mut param_refs: Vec<&mut Tensor> = params
                    .layers
                    .iter_mut()
                    .flat_map(|l| [&mut l.w, &mut l.b])
                    .collect();
                adam.step(&mut param_refs, &grad_refs, lr)?;
                Ok(loss)
            };
            let loss =
                step(&mut rng, &mut params).map_err(|e| batch_context(e, epoch, b_idx))?;
            loss_sum += loss;
        }
        let mean_loss = loss_sum / n_batches as f64;
        epoch_losses.push(mean_loss);
        logger.log(epoch, mean_loss, lr)?;
    }
    logger.finish()?;
    Ok(TrainRun {
        params,
        epoch_losses,
    })
}

/// Pre-train the VAE potential on the observed data.
pub fn train_vae(dataset: &SeriesBatch, cfg: &TrainConfig) -> Result<VaeTrainRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("train_vae: empty dataset".to_string()));
    }
    // Decorrelated from the flow stream so both trainings can share a seed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9));
    let mut params = vae::init_vae(
        dataset.k(),
        dataset.l(),
        cfg.latent_dim,
        &cfg.vae_hidden_dims,
        cfg.seed.wrapping_add(1),
    )?;
    let param_refs: Vec<&Tensor> = params
        .encoder
        .iter()
        .chain(params.decoder.iter())
        .flat_map(|l| [&l.w, &l.b])
        .collect();
    let mut adam = AdamState::new(&param_refs);
    drop(param_refs);

    let mut logger = EpochLogger::open(&cfg.log_path)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64);
        let mut loss_sum = 0.0;
        let batches = shuffled_batches(dataset.len(), cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        for (b_idx, chunk) in batches.into_iter().enumerate() {
            let mut step = |rng: &mut ChaCha8Rng, params: &mut VaeParams| -> Result<f64> {
                let mut tape = Tape::new();
                let ids = params.register(&mut tape);
                let mut total: Option<NodeId> = None;
                for &idx in &chunk {
                    let eps = Tensor::randn(&[cfg.latent_dim], 1.0, rng);
                    let loss_i = vae::loss_on_tape(
                        params,
                        &mut tape,
                        &ids,
                        &dataset.values[idx],
                        &dataset.obs_mask[idx],
                        &eps,
                        cfg.vae_beta,
                    )?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, loss_i)?,
                        None => loss_i,
                    });
                }
                let total = total.expect("non-empty chunk");
                let loss_node = tape.scale(total, 1.0 / chunk.len() as f64)?;
                let loss = tape.value(loss_node).item()?;
                if !loss.is_finite() {
                    return Err(Error::Domain(format!("non-finite loss {loss}")));
                }
                let mut grads = tape.backward(loss_node)?;
                let all_ids: Vec<(NodeId, NodeId)> = ids
                    .encoder
                    .iter()
                    .chain(ids.decoder.iter())
                    .copied()
                    .collect();
                let n_enc = ids.encoder.len();
                let mut grad_tensors: Vec<Tensor> = Vec::with_capacity(2 * all_ids.len());
                for (li, (w_id, b_id)) in all_ids.iter().enumerate() {
                    let layer = if li < n_enc {
                        &params.encoder[li]
                    } else {
                        &params.decoder[li - n_enc]
                    };
                    grad_tensors.push(
                        grads
                            .take(*w_id)
                            .unwrap_or_else(|| Tensor::zeros(layer.w.shape())),
                    );
                    grad_tensors.push(
                        grads
                            .take(*b_id)
                            .unwrap_or_else(|| Tensor::zeros(layer.b.shape())),
                    );
                }
                clip_global_norm(&mut grad_tensors, cfg.clip_norm);
                let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
                let mut param_refs: Vec<&mut Tensor> = params
                    .encoder
                    .iter_mut()
                    .chain(params.decoder.iter_mut())
                    .flat_map(|l| [&mut l.w, &mut l.b])
                    .collect();
                adam.step(&mut param_refs, &grad_refs, lr)?;
                Ok(loss)
            };
            let loss =
                step(&mut rng, &mut params).map_err(|e| batch_context(e, epoch, b_idx))?;
            loss_sum += loss;
        }
        let mean_loss = loss_sum / n_batches as f64;
        epoch_losses.push(mean_loss);
        logger.log(epoch, mean_loss, lr)?;
    }
    logger.finish()?;
    Ok(VaeTrainRun {
        params,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind, SyntheticParams};
    use rand_chacha::ChaCha8Rng;

    fn zero_model(k: usize, l: usize) -> ModelParams {
        let mut p = model::init_params(k, l, &[4], 4, 0).unwrap();
        for layer in p.layers.iter_mut() {
            layer.w = Tensor::zeros(layer.w.shape());
            layer.b = Tensor::zeros(layer.b.shape());
        }
        p
    }

    fn pair_with(
        x_t: Tensor,
        u: Tensor,
        t: f64,
    ) -> TrainingPair {
        let shape = x_t.shape().to_vec();
        TrainingPair {
            x_t,
            u_target: u,
            t,
            cond: Tensor::zeros(&shape),
            cond_mask: Tensor::zeros(&shape),
            target_mask: Tensor::full(&shape, 1.0),
        }
    }

    #[test]
    fn mask_split_counts_and_disjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = Tensor::new(vec![2, 5], vec![1.0; 10]).unwrap();
        let split = mask_split(&obs, 0.5, &mut rng).unwrap();
        let n_target: f64 = split.target_mask.data().iter().sum();
        let n_cond: f64 = split.cond_mask.data().iter().sum();
        assert_eq!(n_target, 5.0);
        assert_eq!(n_cond, 5.0);
        let overlap: f64 = split
            .target_mask
            .mul(&split.cond_mask)
            .unwrap()
            .data()
            .iter()
            .sum();
        assert_eq!(overlap, 0.0);
        let union = split.target_mask.add(&split.cond_mask).unwrap();
        assert_eq!(union, obs);
    }

    #[test]
    fn mask_split_respects_partial_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = Tensor::new(vec![1, 6], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        for _ in 0..50 {
            let split = mask_split(&obs, 0.5, &mut rng).unwrap();
            // never marks an unobserved entry
            for (idx, m) in obs.data().iter().enumerate() {
                if *m == 0.0 {
                    assert_eq!(split.target_mask.data()[idx], 0.0);
                    assert_eq!(split.cond_mask.data()[idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_split_needs_two_observed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(mask_split(&obs, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mask_split_targets_each_entry_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = Tensor::new(vec![1, 10], vec![1.0; 10]).unwrap();
        let draws = 10_000;
        let mut hits = vec![0.0; 10];
        for _ in 0..draws {
            let split = mask_split(&obs, 0.5, &mut rng).unwrap();
            for (h, m) in hits.iter_mut().zip(split.target_mask.data()) {
                *h += m;
            }
        }
        for h in hits {
            let freq = h / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "freq = {freq}");
        }
    }

    #[test]
    fn hand_computed_single_sample_loss() {
        // x0 = 0, xT = 2, T = 1, μ ≡ 0  =>  ‖(2−0)/1 − 0‖² = 4
        let params = zero_model(1, 1);
        let pair = pair_with(
            Tensor::new(vec![1, 1], vec![0.8]).unwrap(),
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            0.4,
        );
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let loss = flow_loss_on_tape(&params, &mut tape, &ids, &[pair], LossMask::All).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 4.0);
    }

    #[test]
    fn zero_velocity_target_gives_zero_loss() {
        // xT = x0 ⇒ u_target = 0, matched exactly by the zero model.
        let params = zero_model(1, 2);
        let pair = pair_with(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2]), 0.3);
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let loss = flow_loss_on_tape(&params, &mut tape, &ids, &[pair], LossMask::All).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn loss_is_nonnegative() {
        let task = make_synthetic(
            SyntheticKind::TwoGaussians2d,
            &SyntheticParams {
                n_series: 16,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let cfg = TrainConfig {
            full_target: true,
            ..Default::default()
        };
        let params = model::init_params(2, 1, &[8], 8, 1).unwrap();
        let batch: Vec<FlowSample> = task
            .data
            .values
            .iter()
            .map(FlowSample::full_target)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let loss = flow_matching_loss(&params, &batch, &cfg, &mut rng).unwrap();
            assert!(loss >= 0.0);
        }
    }

    /// With independent pairing the batch loss is a plain iid average, so its
    /// mean over many draws must match a 100x-larger batch within standard
    /// error.
    #[test]
    fn small_batch_losses_average_to_large_batch_loss() {
        let task = make_synthetic(
            SyntheticKind::TwoGaussians2d,
            &SyntheticParams {
                n_series: 800,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            full_target: true,
            coupling: CouplingMode::Independent,
            ..Default::default()
        };
        let params = model::init_params(2, 1, &[8], 8, 2).unwrap();
        let all: Vec<FlowSample> = task
            .data
            .values
            .iter()
            .map(FlowSample::full_target)
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reps = 400;
        let mut small = Vec::with_capacity(reps);
        for r in 0..reps {
            let start = (r * 8) % 792;
            let loss = flow_matching_loss(&params, &all[start..start + 8], &cfg, &mut rng).unwrap();
            small.push(loss);
        }
        let small_mean: f64 = small.iter().sum::<f64>() / reps as f64;
        let small_var: f64 = small
            .iter()
            .map(|l| (l - small_mean) * (l - small_mean))
            .sum::<f64>()
            / (reps as f64 - 1.0);
        let se = (small_var / reps as f64).sqrt();

        let big = flow_matching_loss(&params, &all, &cfg, &mut rng).unwrap();
        assert!(
            (small_mean - big).abs() < 4.0 * se + 0.05 * big,
            "small mean {small_mean}, big batch {big}, se {se}"
        );
    }

    /// OT coupling shrinks the spread of the regression targets.
    #[test]
    fn ot_coupling_reduces_target_velocity_variance() {
        let task = make_synthetic(
            SyntheticKind::TwoGaussians2d,
            &SyntheticParams {
                n_series: 64,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let batch: Vec<FlowSample> = task
            .data
            .values
            .iter()
            .map(FlowSample::full_target)
            .collect();
        let base_cfg = TrainConfig {
            full_target: true,
            ..Default::default()
        };

        let variance_of = |mode: CouplingMode, seed: u64| -> f64 {
            let cfg = TrainConfig {
                coupling: mode,
                ..base_cfg.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = make_training_pairs(&batch, &cfg, &mut rng).unwrap();
            let dim = pairs[0].u_target.len();
            let n = pairs.len() as f64;
            let mut var = 0.0;
            for d in 0..dim {
                let mean: f64 = pairs.iter().map(|p| p.u_target.data()[d]).sum::<f64>() / n;
                var += pairs
                    .iter()
                    .map(|p| (p.u_target.data()[d] - mean).powi(2))
                    .sum::<f64>()
                    / n;
            }
            var
        };

        let v_ot = variance_of(CouplingMode::Exact, 10);
        let v_ind = variance_of(CouplingMode::Independent, 10);
        assert!(
            v_ot / v_ind < 1.0,
            "variance ratio {} not below 1",
            v_ot / v_ind
        );
    }

    #[test]
    fn one_epoch_training_is_deterministic() {
        let task = make_synthetic(
            SyntheticKind::SinusoidMix,
            &SyntheticParams {
                n_series: 8,
                ..Default::default()
            },
            11,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            hidden_dims: vec![16],
            time_embed_dim: 8,
            seed: 42,
            ..Default::default()
        };
        let a = train_flow(&task.data, &cfg).unwrap();
        let b = train_flow(&task.data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn training_loss_decreases_on_gaussian_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values: Vec<Tensor> = (0..256)
            .map(|_| {
                Tensor::new(vec![2, 1], vec![2.0, 0.0])
                    .unwrap()
                    .add(&Tensor::randn(&[2, 1], 0.3, &mut rng))
                    .unwrap()
            })
            .collect();
        let masks: Vec<Tensor> = values.iter().map(|_| Tensor::full(&[2, 1], 1.0)).collect();
        let data = SeriesBatch::new(values, masks).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.003,
            full_target: true,
            hidden_dims: vec![32, 32],
            time_embed_dim: 8,
            seed: 3,
            ..Default::default()
        };
        let run = train_flow(&data, &cfg).unwrap();
        let first = run.epoch_losses[0];
        let last = *run.epoch_losses.last().unwrap();
        assert!(
            last < 0.1 * first,
            "loss did not drop enough: first {first}, last {last}"
        );
    }

    #[test]
    fn diverging_values_abort_with_batch_diagnostic() {
        let values = vec![Tensor::full(&[1, 2], 1e160), Tensor::full(&[1, 2], 1e160)];
        let masks = vec![Tensor::full(&[1, 2], 1.0), Tensor::full(&[1, 2], 1.0)];
        let data = SeriesBatch::new(values, masks).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            full_target: true,
            hidden_dims: vec![4],
            time_embed_dim: 4,
            ..Default::default()
        };
        let err = train_flow(&data, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 0, batch 0"), "{msg}");
    }

    #[test]
    fn vae_training_learns_sinusoids() {
        let task = make_synthetic(
            SyntheticKind::SinusoidMix,
            &SyntheticParams {
                n_series: 48,
                ..Default::default()
            },
            13,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.003,
            latent_dim: 8,
            vae_hidden_dims: vec![48],
            vae_beta: 0.001,
            seed: 5,
            ..Default::default()
        };
        let run = train_vae(&task.data, &cfg).unwrap();
        let first = run.epoch_losses[0];
        let last = *run.epoch_losses.last().unwrap();
        assert!(last < 0.5 * first, "vae loss: first {first}, last {last}");

        // held-out clean sinusoids: reconstruction must beat the dataset mean
        let held = make_synthetic(
            SyntheticKind::SinusoidMix,
            &SyntheticParams {
                n_series: 16,
                eval_fraction: 0.0,
                amplitude: 1.0,
            },
            99,
        )
        .unwrap();
        let mut recon_sq = 0.0;
        let mut mean_sq = 0.0;
        let mut count = 0.0;
        let eps = Tensor::zeros(&[cfg.latent_dim]);
        for v in &held.truth {
            let ones = Tensor::full(v.shape(), 1.0);
            let (recon, _, _) =
                vae::vae_forward_with_eps(&run.params, v, &ones, &eps).unwrap();
            for (r, x) in recon.data().iter().zip(v.data()) {
                recon_sq += (r - x) * (r - x);
                mean_sq += x * x; // dataset mean of random-phase sinusoids is ~0
                count += 1.0;
            }
        }
        let recon_rmse = (recon_sq / count).sqrt();
        let mean_rmse = (mean_sq / count).sqrt();
        assert!(
            recon_rmse < mean_rmse,
            "recon {recon_rmse} vs mean baseline {mean_rmse}"
        );
    }

    #[test]
    fn vae_training_deterministic_per_seed() {
        let task = make_synthetic(
            SyntheticKind::SinusoidMix,
            &SyntheticParams {
                n_series: 6,
                ..Default::default()
            },
            14,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            latent_dim: 4,
            vae_hidden_dims: vec![8],
            vae_beta: 0.01,
            seed: 21,
            ..Default::default()
        };
        let a = train_vae(&task.data, &cfg).unwrap();
        let b = train_vae(&task.data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn training_log_has_one_line_per_epoch() {
        let task = make_synthetic(
            SyntheticKind::SinusoidMix,
            &SyntheticParams {
                n_series: 6,
                ..Default::default()
            },
            15,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("clwf_train_test");
        std::fs::create_dir_all(&dir).unwrap();
        let log_path = dir.join("train_log.tsv");
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            hidden_dims: vec![8],
            time_embed_dim: 4,
            log_path: Some(log_path.clone()),
            ..Default::default()
        };
        train_flow(&task.data, &cfg).unwrap();
        let content = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(lines.len(), 3);
        for (i, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 4);
            assert_eq!(fields[0], i.to_string());
            assert!(fields[1].parse::<f64>().is_ok());
        }
    }
}
