//! Velocity field μ_θ(x_input, t) over the joint conditional input.
//!
//! The backbone is an MLP with tanh hidden layers and a sinusoidal time
//! embedding: the flow-matching objective is backbone-agnostic, and at desk
//! scale an MLP trains in seconds while keeping the module swappable for a
//! richer sequence model later. The conditioning mask is fed as an explicit
//! input channel alongside the zero-filled conditional values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CLWFVEL1";

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// [fan_in, fan_out]
    pub w: Tensor,
    /// [fan_out]
    pub b: Tensor,
}

/// Parameters of the velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub k: usize,
    pub l: usize,
    pub time_embed_dim: usize,
    pub layers: Vec<Layer>,
}

/// Conditional input (x_cond, x_t) plus the mask channel and time.
#[derive(Debug, Clone)]
pub struct ConditionalInput {
    pub x_t: Tensor,
    pub x_cond: Tensor,
    pub cond_mask: Tensor,
    pub t: f64,
}

impl ConditionalInput {
    /// Validates the mask is exactly 0/1 and x_cond is zero off-mask.
    pub fn new(x_t: Tensor, x_cond: Tensor, cond_mask: Tensor, t: f64) -> Result<Self> {
        if x_t.shape() != x_cond.shape() || x_t.shape() != cond_mask.shape() {
            return Err(Error::Shape(format!(
                "conditional input: shapes differ (x_t {:?}, x_cond {:?}, mask {:?})",
                x_t.shape(),
                x_cond.shape(),
                cond_mask.shape()
            )));
        }
        for (i, m) in cond_mask.data().iter().enumerate() {
            if *m != 0.0 && *m != 1.0 {
                return Err(Error::Domain(format!(
                    "conditional input: mask entry {i} is {m}, expected 0 or 1"
                )));
            }
            if *m == 0.0 && x_cond.data()[i] != 0.0 {
                return Err(Error::Domain(format!(
                    "conditional input: x_cond entry {i} nonzero outside mask"
                )));
            }
        }
        Ok(ConditionalInput {
            x_t,
            x_cond,
            cond_mask,
            t,
        })
    }
}

/// Sinusoidal embedding of a scalar time with geometrically spaced
/// frequencies; smooth in t, which the ODE integrator appreciates.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    debug_assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = if half > 1 {
            1000f64.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        data.push((freq * t).sin());
        data.push((freq * t).cos());
    }
    Tensor::new(vec![dim], data).expect("sin/cos are finite")
}

/// Initialize an MLP of the given hidden widths. Weights are N(0, 1/fan_in),
/// biases zero, deterministic per seed.
pub fn init_params(
    k: usize,
    l: usize,
    hidden_dims: &[usize],
    time_embed_dim: usize,
    seed: u64,
) -> Result<ModelParams> {
    if k == 0 || l == 0 || hidden_dims.iter().any(|d| *d == 0) {
        return Err(Error::Domain("init_params: dims must be positive".to_string()));
    }
    if time_embed_dim < 2 || time_embed_dim % 2 != 0 {
        return Err(Error::Domain(format!(
            "init_params: time_embed_dim must be even and >= 2, got {time_embed_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = k * l;
    let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
    dims.push(3 * state + time_embed_dim);
    dims.extend_from_slice(hidden_dims);
    dims.push(state);

    let layers = dims
        .windows(2)
        .map(|io| {
            let (fan_in, fan_out) = (io[0], io[1]);
            Layer {
                w: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), &mut rng),
                b: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(ModelParams {
        k,
        l,
        time_embed_dim,
        layers,
    })
}

impl ModelParams {
    pub fn state_dim(&self) -> usize {
        self.k * self.l
    }

    pub fn input_dim(&self) -> usize {
        3 * self.state_dim() + self.time_embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat input row [1, input_dim] for one conditional input.
    pub fn input_row(&self, input: &ConditionalInput) -> Result<Tensor> {
        if input.x_t.len() != self.state_dim() {
            return Err(Error::Shape(format!(
                "input_row: state has {} entries, model expects {}x{}",
                input.x_t.len(),
                self.k,
                self.l
            )));
        }
        let embed = time_embedding(input.t, self.time_embed_dim);
        let row = Tensor::concat(
            0,
            &[
                &input.x_t.flatten(),
                &input.x_cond.flatten(),
                &input.cond_mask.flatten(),
                &embed,
            ],
        )?;
        Ok(row.as_row())
    }

    /// Register every layer on a tape as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|layer| (tape.param(layer.w.clone()), tape.param(layer.b.clone())))
            .collect()
    }

    /// MLP forward over already-registered parameters. `x` is [batch, input_dim].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_ids: &[(NodeId, NodeId)],
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        let last = param_ids.len() - 1;
        for (idx, (w, b)) in param_ids.iter().enumerate() {
            h = tape.affine(h, *w, *b)?;
            if idx != last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Batched forward on constant inputs; rows are input_dim wide.
    pub fn forward_rows(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.cols()? != self.input_dim() {
            return Err(Error::Shape(format!(
                "forward: rows have {} columns, model expects {}",
                rows.cols()?,
                self.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(rows.clone());
        let ids = self.register(&mut tape);
        let out = self.forward_on_tape(&mut tape, &ids, x)?;
        Ok(tape.value(out).clone())
    }

    /// Velocity for a single conditional input, shaped K×L.
    pub fn forward(&self, input: &ConditionalInput) -> Result<Tensor> {
        let row = self.input_row(input)?;
        let out = self.forward_rows(&row)?;
        out.reshape(&[self.k, self.l])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = vec![
            self.k as u64,
            self.l as u64,
            self.time_embed_dim as u64,
            self.layers.len() as u64,
        ];
        let tensors: Vec<&Tensor> = self
            .layers
            .iter()
            .flat_map(|l| [&l.w, &l.b])
            .collect();
        checkpoint::write(path, MAGIC, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(path, MAGIC)?;
        if meta.len() != 4 {
            return Err(Error::Data(format!(
                "velocity checkpoint {}: bad header",
                path.display()
            )));
        }
        let n_layers = meta[3] as usize;
        if tensors.len() != 2 * n_layers {
            return Err(Error::Data(format!(
                "velocity checkpoint {}: expected {} tensors, found {}",
                path.display(),
                2 * n_layers,
                tensors.len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut it = tensors.into_iter();
        for _ in 0..n_layers {
            let w = it.next().unwrap();
            let b = it.next().unwrap();
            layers.push(Layer { w, b });
        }
        Ok(ModelParams {
            k: meta[0] as usize,
            l: meta[1] as usize,
            time_embed_dim: meta[2] as usize,
            layers,
        })
    }
}
