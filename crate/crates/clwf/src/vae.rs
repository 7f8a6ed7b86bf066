//! VAE-backed task potential.
//!
//! A variational autoencoder is pre-trained on the observed series; at
//! sampling time the reconstruction residual gives the negative potential
//! gradient v(x) = −(x − VAE(x))/σp², with the reconstruction evaluated at
//! the posterior mean (ε = 0) and treated as constant — the closed form needs
//! no backprop through the VAE.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::model::Layer;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CLWFVAE1";

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub k: usize,
    pub l: usize,
    pub latent_dim: usize,
    /// 2·K·L (values + mask channel) → ... → 2·latent (mean, log-variance).
    pub encoder: Vec<Layer>,
    /// latent → ... → K·L.
    pub decoder: Vec<Layer>,
}

/// Scale of the potential derivative.
#[derive(Debug, Clone, Copy)]
pub struct PotentialConfig {
    pub sigma_p_sq: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        PotentialConfig { sigma_p_sq: 0.01 }
    }
}

impl PotentialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_p_sq > 0.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "potential: sigma_p_sq must be positive, got {}",
                self.sigma_p_sq
            )))
        }
    }
}

pub(crate) struct VaeNodeIds {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub decoder: Vec<(NodeId, NodeId)>,
}

pub fn init_vae(
    k: usize,
    l: usize,
    latent_dim: usize,
    hidden_dims: &[usize],
    seed: u64,
) -> Result<VaeParams> {
    if k == 0 || l == 0 || latent_dim == 0 || hidden_dims.iter().any(|d| *d == 0) {
        return Err(Error::Domain("init_vae: dims must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = k * l;

    let mut enc_dims = vec![2 * state];
    enc_dims.extend_from_slice(hidden_dims);
    enc_dims.push(2 * latent_dim);

    let mut dec_dims = vec![latent_dim];
    dec_dims.extend(hidden_dims.iter().rev());
    dec_dims.push(state);

    let mut make = |dims: &[usize]| -> Vec<Layer> {
        dims.windows(2)
            .map(|io| Layer {
                w: Tensor::randn(&[io[0], io[1]], 1.0 / (io[0] as f64).sqrt(), &mut rng),
                b: Tensor::zeros(&[io[1]]),
            })
            .collect()
    };
    let encoder = make(&enc_dims);
    let decoder = make(&dec_dims);
    Ok(VaeParams {
        k,
        l,
        latent_dim,
        encoder,
        decoder,
    })
}

impl VaeParams {
    pub fn state_dim(&self) -> usize {
        self.k * self.l
    }

    pub fn num_params(&self) -> usize {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    pub(crate) fn register(&self, tape: &mut Tape) -> VaeNodeIds {
        VaeNodeIds {
            encoder: self
                .encoder
                .iter()
                .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
                .collect(),
        }
    }

    /// Encoder input row [1, 2·K·L]: zero-filled observed values plus the
    /// observation mask as a channel.
    pub fn input_row(&self, x: &Tensor, obs_mask: &Tensor) -> Result<Tensor> {
        if x.len() != self.state_dim() || obs_mask.len() != self.state_dim() {
            return Err(Error::Shape(format!(
                "vae input: state has {} entries, expected {}x{}",
                x.len(),
                self.k,
                self.l
            )));
        }
        let filled = x.mul(obs_mask)?;
        Ok(Tensor::concat(0, &[&filled.flatten(), &obs_mask.flatten()])?.as_row())
    }

    /// Encode/reparameterize/decode on a tape. Returns (recon, mean, logvar),
    /// each a [1, d] row.
    pub(crate) fn graph_on_tape(
        &self,
        tape: &mut Tape,
        ids: &VaeNodeIds,
        x_row: NodeId,
        eps_row: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let m = self.latent_dim;
        let mut h = x_row;
        let last = ids.encoder.len() - 1;
        for (idx, (w, b)) in ids.encoder.iter().enumerate() {
            h = tape.affine(h, *w, *b)?;
            if idx != last {
                h = tape.tanh(h)?;
            }
        }
        let mean = tape.slice(h, 1, 0, m)?;
        let logvar = tape.slice(h, 1, m, m)?;

        // z = mean + exp(logvar/2) ⊙ ε
        let half_logvar = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half_logvar)?;
        let noise = tape.mul(std, eps_row)?;
        let mut z = tape.add(mean, noise)?;

        let last = ids.decoder.len() - 1;
        for (idx, (w, b)) in ids.decoder.iter().enumerate() {
            z = tape.affine(z, *w, *b)?;
            if idx != last {
                z = tape.tanh(z)?;
            }
        }
        Ok((z, mean, logvar))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = vec![
            self.k as u64,
            self.l as u64,
            self.latent_dim as u64,
            self.encoder.len() as u64,
            self.decoder.len() as u64,
        ];
        let tensors: Vec<&Tensor> = self
            .encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|l| [&l.w, &l.b])
            .collect();
        checkpoint::write(path, MAGIC, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(path, MAGIC)?;
        if meta.len() != 5 {
            return Err(Error::Data(format!(
                "vae checkpoint {}: bad header",
                path.display()
            )));
        }
        let (n_enc, n_dec) = (meta[3] as usize, meta[4] as usize);
        if tensors.len() != 2 * (n_enc + n_dec) {
            return Err(Error::Data(format!(
                "vae checkpoint {}: expected {} tensors, found {}",
                path.display(),
                2 * (n_enc + n_dec),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut take = |n: usize| -> Vec<Layer> {
            (0..n)
                .map(|_| Layer {
                    w: it.next().unwrap(),
                    b: it.next().unwrap(),
                })
                .collect()
        };
        let encoder = take(n_enc);
        let decoder = take(n_dec);
        Ok(VaeParams {
            k: meta[0] as usize,
            l: meta[1] as usize,
            latent_dim: meta[2] as usize,
            encoder,
            decoder,
        })
    }
}

/// Forward pass with an explicit reparameterization noise vector.
pub fn vae_forward_with_eps(
    params: &VaeParams,
    x: &Tensor,
    obs_mask: &Tensor,
    eps: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if eps.len() != params.latent_dim {
        return Err(Error::Shape(format!(
            "vae: eps has {} entries, latent_dim is {}",
            eps.len(),
            params.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let x_row = tape.constant(params.input_row(x, obs_mask)?);
    let eps_row = tape.constant(eps.as_row());
    let ids = params.register(&mut tape);
    let (recon, mean, logvar) = params.graph_on_tape(&mut tape, &ids, x_row, eps_row)?;
    Ok((
        tape.value(recon).reshape(&[params.k, params.l])?,
        tape.value(mean).flatten(),
        tape.value(logvar).flatten(),
    ))
}

/// Forward pass with ε ∼ N(0, I).
pub fn vae_forward<R: Rng + ?Sized>(
    params: &VaeParams,
    x: &Tensor,
    obs_mask: &Tensor,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Tensor)> {
    let eps = Tensor::randn(&[params.latent_dim], 1.0, rng);
    vae_forward_with_eps(params, x, obs_mask, &eps)
}

/// Loss graph for one sample: masked reconstruction error averaged over
/// observed entries, plus beta · KL(N(mean, diag e^logvar) ‖ N(0, I)).
pub(crate) fn loss_on_tape(
    params: &VaeParams,
    tape: &mut Tape,
    ids: &VaeNodeIds,
    x: &Tensor,
    obs_mask: &Tensor,
    eps: &Tensor,
    beta: f64,
) -> Result<NodeId> {
    let observed = obs_mask.data().iter().sum::<f64>();
    if observed == 0.0 {
        return Err(Error::Domain(
            "vae_loss: observation mask is empty".to_string(),
        ));
    }
    let x_row = tape.constant(params.input_row(x, obs_mask)?);
    let eps_row = tape.constant(eps.as_row());
    let (recon, mean, logvar) = params.graph_on_tape(tape, ids, x_row, eps_row)?;

    let target = tape.constant(x.mul(obs_mask)?.as_row());
    let mask_row = tape.constant(obs_mask.as_row());
    let diff = tape.sub(recon, target)?;
    let masked = tape.mul(diff, mask_row)?;
    let sq = tape.square(masked)?;
    let sse = tape.sum(sq)?;
    let mse = tape.scale(sse, 1.0 / observed)?;

    // KL = ½ Σ (μ² + e^ℓ − 1 − ℓ)
    let mu_sq = tape.square(mean)?;
    let s_mu = tape.sum(mu_sq)?;
    let var = tape.exp(logvar)?;
    let s_var = tape.sum(var)?;
    let s_logvar = tape.sum(logvar)?;
    let s = tape.add(s_mu, s_var)?;
    let s = tape.sub(s, s_logvar)?;
    let dim = tape.constant(Tensor::scalar(params.latent_dim as f64));
    let s = tape.sub(s, dim)?;
    let kl = tape.scale(s, 0.5)?;

    let weighted_kl = tape.scale(kl, beta)?;
    tape.add(mse, weighted_kl)
}

/// Scalar ELBO-style loss for one sample.
pub fn vae_loss<R: Rng + ?Sized>(
    params: &VaeParams,
    x: &Tensor,
    obs_mask: &Tensor,
    rng: &mut R,
    beta: f64,
) -> Result<f64> {
    let eps = Tensor::randn(&[params.latent_dim], 1.0, rng);
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let loss = loss_on_tape(params, &mut tape, &ids, x, obs_mask, &eps, beta)?;
    tape.value(loss).item()
}

/// Loss value and parameter gradients (encoder layers then decoder layers,
/// w/b interleaved) at a fixed reparameterization draw.
pub fn vae_loss_and_gradients(
    params: &VaeParams,
    x: &Tensor,
    obs_mask: &Tensor,
    eps: &Tensor,
    beta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let loss = loss_on_tape(params, &mut tape, &ids, x, obs_mask, eps, beta)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let n_enc = ids.encoder.len();
    let all_ids: Vec<(NodeId, NodeId)> = ids
        .encoder
        .iter()
        .chain(ids.decoder.iter())
        .copied()
        .collect();
    let mut out = Vec::with_capacity(2 * all_ids.len());
    for (li, (w_id, b_id)) in all_ids.iter().enumerate() {
        let layer = if li < n_enc {
            &params.encoder[li]
        } else {
            &params.decoder[li - n_enc]
        };
        out.push(
            grads
                .take(*w_id)
                .unwrap_or_else(|| Tensor::zeros(layer.w.shape())),
        );
        out.push(
            grads
                .take(*b_id)
                .unwrap_or_else(|| Tensor::zeros(layer.b.shape())),
        );
    }
    Ok((value, out))
}

/// Negative potential gradient v = −(x − VAE(x))/σp², with the VAE evaluated
/// at the posterior mean (ε = 0) over a fully-observed input.
pub fn potential_gradient(
    params: &VaeParams,
    x_t: &Tensor,
    cfg: &PotentialConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let ones = Tensor::full(x_t.shape(), 1.0);
    let eps = Tensor::zeros(&[params.latent_dim]);
    let (recon, _, _) = vae_forward_with_eps(params, x_t, &ones, &eps)?;
    recon.sub(x_t)?.scale(1.0 / cfg.sigma_p_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    /// k=1, l=1, latent 1 VAE with all-zero encoder (mean = enc_bias[0],
    /// logvar = enc_bias[1]) and constant decoder output `recon`.
    fn constant_vae(mean: f64, logvar: f64, recon: f64) -> VaeParams {
        let mut p = init_vae(1, 1, 1, &[2], 0).unwrap();
        for layer in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            let z = Tensor::zeros(layer.w.shape());
            layer.w = z;
            layer.b = Tensor::zeros(layer.b.shape());
        }
        let out = p.encoder.last_mut().unwrap();
        out.b = Tensor::new(vec![2], vec![mean, logvar]).unwrap();
        let dec_out = p.decoder.last_mut().unwrap();
        dec_out.b = Tensor::new(vec![1], vec![recon]).unwrap();
        p
    }

    #[test]
    fn reconstruction_shape_matches_input() {
        let p = init_vae(3, 4, 5, &[16], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mask = Tensor::full(&[3, 4], 1.0);
        let (recon, mean, logvar) = vae_forward(&p, &x, &mask, &mut rng).unwrap();
        assert_eq!(recon.shape(), x.shape());
        assert_eq!(mean.len(), 5);
        assert_eq!(logvar.len(), 5);
    }

    #[test]
    fn zero_eps_is_deterministic() {
        let p = init_vae(2, 3, 4, &[8], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mask = Tensor::full(&[2, 3], 1.0);
        let eps = Tensor::zeros(&[4]);
        let a = vae_forward_with_eps(&p, &x, &mask, &eps).unwrap();
        let b = vae_forward_with_eps(&p, &x, &mask, &eps).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn perfect_reconstruction_and_unit_posterior_give_zero_loss() {
        let x = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let p = constant_vae(0.0, 0.0, 0.7);
        let mask = Tensor::full(&[1, 1], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loss = vae_loss(&p, &x, &mask, &mut rng, 1.0).unwrap();
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn kl_hand_value_for_unit_mean() {
        // KL(N(1, 1) ‖ N(0, 1)) = ½(μ² + σ² − 1 − log σ²) = 0.5
        let x = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let p = constant_vae(1.0, 0.0, 0.3);
        let mask = Tensor::full(&[1, 1], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let loss = vae_loss(&p, &x, &mask, &mut rng, 1.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12, "loss = {loss}");
        let loss2 = vae_loss(&p, &x, &mask, &mut rng, 2.0).unwrap();
        assert!((loss2 - 1.0).abs() < 1e-12, "loss = {loss2}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let p = init_vae(2, 2, 2, &[4], 7).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let mask = Tensor::zeros(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(vae_loss(&p, &x, &mask, &mut rng, 1.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = init_vae(2, 2, 3, &[6], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let eps = Tensor::randn(&[3], 1.0, &mut rng);
        let beta = 0.7;

        let loss_of = |params: &VaeParams| -> f64 {
            let mut tape = Tape::new();
            let ids = params.register(&mut tape);
            let loss = loss_on_tape(params, &mut tape, &ids, &x, &mask, &eps, beta).unwrap();
            tape.value(loss).item().unwrap()
        };

        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let loss = loss_on_tape(&p, &mut tape, &ids, &x, &mask, &eps, beta).unwrap();
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        let all_ids: Vec<(NodeId, NodeId)> = ids
            .encoder
            .iter()
            .chain(ids.decoder.iter())
            .copied()
            .collect();
        for (li, (w_id, b_id)) in all_ids.iter().enumerate() {
            for (node, is_w) in [(w_id, true), (b_id, false)] {
                let ad = match grads.get(*node) {
                    Some(g) => g.clone(),
                    None => continue,
                };
                for idx in [0, ad.len() / 2, ad.len() - 1] {
                    let perturb = |delta: f64| -> VaeParams {
                        let mut q = p.clone();
                        let n_enc = q.encoder.len();
                        let layer = if li < n_enc {
                            &mut q.encoder[li]
                        } else {
                            &mut q.decoder[li - n_enc]
                        };
                        let t = if is_w { &mut layer.w } else { &mut layer.b };
                        t.data_mut()[idx] += delta;
                        q
                    };
                    let fd = (loss_of(&perturb(h)) - loss_of(&perturb(-h))) / (2.0 * h);
                    let a = ad.data()[idx];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "layer {li} idx {idx}: ad={a} fd={fd} rel={rel}");
                }
            }
        }
    }

    #[test]
    fn potential_gradient_is_zero_at_fixed_point() {
        let p = constant_vae(0.0, 0.0, 0.4);
        let cfg = PotentialConfig { sigma_p_sq: 0.01 };
        let x = Tensor::new(vec![1, 1], vec![0.4]).unwrap();
        let v = potential_gradient(&p, &x, &cfg).unwrap();
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn potential_gradient_is_scaled_residual() {
        let p = constant_vae(0.0, 0.0, 0.4);
        let cfg = PotentialConfig { sigma_p_sq: 0.01 };
        let delta = 0.05;
        let x = Tensor::new(vec![1, 1], vec![0.4 + delta]).unwrap();
        let v = potential_gradient(&p, &x, &cfg).unwrap();
        assert!((v.data()[0] - (-delta / 0.01)).abs() < 1e-12, "v = {:?}", v.data());
    }

    #[test]
    fn potential_gradient_matches_frozen_quadratic() {
        // U(x) = ‖x − r‖²/(2σp²) with r = VAE(x) held constant; v must equal
        // −∇U within finite-difference error of that frozen quadratic.
        let p = init_vae(2, 2, 2, &[6], 11).unwrap();
        let cfg = PotentialConfig { sigma_p_sq: 0.01 };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[2, 2], 0.5, &mut rng);
        let ones = Tensor::full(&[2, 2], 1.0);
        let eps = Tensor::zeros(&[2]);
        let (recon, _, _) = vae_forward_with_eps(&p, &x, &ones, &eps).unwrap();
        let v = potential_gradient(&p, &x, &cfg).unwrap();

        let u = |probe: &Tensor| -> f64 {
            probe.sub(&recon).unwrap().norm_sq() / (2.0 * cfg.sigma_p_sq)
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let grad_u = (u(&plus) - u(&minus)) / (2.0 * h);
            let rel = (v.data()[i] + grad_u).abs() / grad_u.abs().max(1e-6);
            assert!(rel < 1e-4, "coord {i}: v={} -dU={}", v.data()[i], -grad_u);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = init_vae(2, 3, 4, &[8], 13).unwrap();
        let dir = std::env::temp_dir().join("clwf_vae_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vae.ckpt");
        p.save(&path).unwrap();
        let loaded = VaeParams::load(&path).unwrap();
        assert_eq!(loaded, p);
    }
}
