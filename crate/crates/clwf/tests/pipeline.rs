//! In-process end-to-end checks that need trained models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clwf::data::{make_synthetic, SyntheticKind, SyntheticParams};
use clwf::ot::CouplingMode;
use clwf::sampler::{impute, SampleConfig};
use clwf::tensor::Tensor;
use clwf::train::{train_flow, train_vae, TrainConfig};
use clwf::vae::{potential_gradient, PotentialConfig};

/// A trained corrector must pull corrupted series back toward the clean
/// signal: ‖x + η·v − x_clean‖ < ‖x − x_clean‖ for a small step η.
#[test]
fn potential_correction_moves_toward_clean_signal() {
    let task = make_synthetic(
        SyntheticKind::SinusoidMix,
        &SyntheticParams {
            n_series: 64,
            eval_fraction: 0.1,
            amplitude: 1.0,
        },
        41,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 120,
        batch_size: 32,
        learning_rate: 0.002,
        latent_dim: 16,
        vae_hidden_dims: vec![128, 128],
        vae_beta: 0.0005,
        seed: 41,
        ..Default::default()
    };
    let run = train_vae(&task.data, &cfg).unwrap();

    let held = make_synthetic(
        SyntheticKind::SinusoidMix,
        &SyntheticParams {
            n_series: 8,
            eval_fraction: 0.0,
            amplitude: 1.0,
        },
        999,
    )
    .unwrap();
    let pot = PotentialConfig { sigma_p_sq: 1.0 };
    let eta = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut improved = 0;
    for clean in &held.truth {
        let corrupted = clean.add(&Tensor::randn(clean.shape(), 0.3, &mut rng)).unwrap();
        let v = potential_gradient(&run.params, &corrupted, &pot).unwrap();
        let stepped = corrupted.add_scaled(&v, eta * pot.sigma_p_sq).unwrap();
        let before = corrupted.sub(clean).unwrap().norm_sq().sqrt();
        let after = stepped.sub(clean).unwrap().norm_sq().sqrt();
        if after < before {
            improved += 1;
        }
    }
    assert!(
        improved >= 7,
        "correction reduced distance on only {improved}/8 held-out series"
    );
}

/// Sampling a flow trained on the two-Gaussian mixture reproduces the
/// mixture's first and second moments within 10%.
#[test]
fn mixture_sampling_matches_target_moments() {
    let task = make_synthetic(
        SyntheticKind::TwoGaussians2d,
        &SyntheticParams {
            n_series: 512,
            ..Default::default()
        },
        55,
    )
    .unwrap();
    // A wider source blob keeps the two-mode split away from the network's
    // smoothing scale; the mixture toy does not pin the source std.
    let mut interpolant = clwf::interpolant::InterpolantConfig::default();
    interpolant.sigma_0 = 0.5;
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 64,
        learning_rate: 0.002,
        full_target: true,
        hidden_dims: vec![64, 64],
        time_embed_dim: 16,
        seed: 55,
        interpolant,
        ..Default::default()
    };
    let run = train_flow(&task.data, &cfg).unwrap();

    let zero = Tensor::zeros(&[2, 1]);
    let scfg = SampleConfig {
        steps: 15,
        mc_samples: 2000,
        rao_blackwell: false,
        seed: 55,
        threads: 2,
    };
    let imp = impute(&run.params, &zero, &zero, &cfg.interpolant, &scfg, None).unwrap();
    let n = imp.samples.len() as f64;
    let mut mean = [0.0; 2];
    for s in &imp.samples {
        mean[0] += s.data()[0];
        mean[1] += s.data()[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0; 2];
    for s in &imp.samples {
        var[0] += (s.data()[0] - mean[0]).powi(2);
        var[1] += (s.data()[1] - mean[1]).powi(2);
    }
    var[0] /= n - 1.0;
    var[1] /= n - 1.0;

    // mixture of N(±2, 0.3²) on x and N(0, 0.3²) on y:
    let want_var_x = 4.0 + 0.09;
    let want_var_y = 0.09;
    let mode_scale = 2.0;
    assert!(
        mean[0].abs() < 0.1 * mode_scale && mean[1].abs() < 0.1 * mode_scale,
        "sample mean {mean:?} too far from (0, 0)"
    );
    assert!(
        (var[0] - want_var_x).abs() / want_var_x < 0.1,
        "x variance {} vs {want_var_x}",
        var[0]
    );
    assert!(
        (var[1] - want_var_y).abs() / want_var_y < 0.1,
        "y variance {} vs {want_var_y}",
        var[1]
    );
}

/// The Sinkhorn coupling path trains end to end.
#[test]
fn sinkhorn_coupling_trains() {
    let task = make_synthetic(
        SyntheticKind::TwoGaussians2d,
        &SyntheticParams {
            n_series: 64,
            ..Default::default()
        },
        66,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        full_target: true,
        coupling: CouplingMode::Sinkhorn { epsilon: 0.05 },
        hidden_dims: vec![16],
        time_embed_dim: 8,
        seed: 66,
        ..Default::default()
    };
    let run = train_flow(&task.data, &cfg).unwrap();
    assert!(run.epoch_losses.iter().all(|l| l.is_finite()));
}
