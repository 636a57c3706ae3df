//! Central-finite-difference checks of the analytic gradients, for the
//! classifier (including dropout masks) and the VAE (with frozen
//! reparameterization noise).

use rand::Rng;

use replaybench_core::matrix::Matrix;
use replaybench_core::nn::{cross_entropy, Batch, ForwardMode, ModelParams};
use replaybench_core::seeds;
use replaybench_core::vae::VaeParams;

const FD_STEP: f64 = 1e-4;
const MAX_REL_ERR: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = seeds::rng(seed, &[90]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
}

fn classifier_loss(params: &ModelParams, batch: &Batch, mode: ForwardMode) -> f64 {
    let (preds, _) = params.forward(batch, mode).unwrap();
    cross_entropy(&preds, batch.labels()).unwrap().value
}

fn check_classifier_case(case_seed: u64) -> f64 {
    let mut rng = seeds::rng(case_seed, &[91]);
    let input = rng.random_range(2..=5);
    let classes = rng.random_range(2..=4);
    let mut dims = vec![input];
    for _ in 0..rng.random_range(0..=2usize) {
        dims.push(rng.random_range(2..=32));
    }
    dims.push(classes);
    let dropout = if dims.len() > 2 && rng.random::<f64>() < 0.5 { 0.3 } else { 0.0 };
    let params = ModelParams::init(&dims, 0.1, dropout, case_seed).unwrap();
    let batch = random_batch(rng.random_range(1..=8), input, classes, case_seed);

    // A fixed dropout seed freezes the masks across all loss evaluations.
    let mode = if dropout > 0.0 {
        ForwardMode::Train { seed: 1234 }
    } else {
        ForwardMode::Eval
    };

    let (_, cache) = params.forward(&batch, mode).unwrap();
    let analytic = params.backward(&cache, batch.labels()).unwrap();

    let mut worst = 0.0f64;
    for i in 0..params.flat().len() {
        let mut plus = params.flat().to_vec();
        let mut minus = plus.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let build = |values: Vec<f64>| {
            ModelParams::from_flat(params.layer_shapes().to_vec(), values, 0.1, dropout).unwrap()
        };
        let numeric =
            (classifier_loss(&build(plus), &batch, mode) - classifier_loss(&build(minus), &batch, mode))
                / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.flat()[i], numeric));
    }
    worst
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let mut global_worst = 0.0f64;
    for case in 0..12u64 {
        let worst = check_classifier_case(case);
        assert!(
            worst < MAX_REL_ERR,
            "case {case}: max relative error {worst}"
        );
        global_worst = global_worst.max(worst);
    }
    println!("classifier gradient check: worst relative error {global_worst:.3e}");
}

#[test]
fn classifier_zero_batch_gradient_is_zero() {
    let params = ModelParams::init(&[3, 4, 2], 0.1, 0.0, 1).unwrap();
    let batch = Batch::empty(3);
    let (_, cache) = params.forward(&batch, ForwardMode::Eval).unwrap();
    let g = params.backward(&cache, &[]).unwrap();
    assert!(g.flat().iter().all(|&v| v == 0.0));
}

fn check_vae_case(case_seed: u64) -> f64 {
    let mut rng = seeds::rng(case_seed, &[92]);
    let input = rng.random_range(4..=8);
    let hidden = rng.random_range(4..=8);
    let vae = VaeParams::init(input, hidden, 2, 0.05, case_seed).unwrap();
    let batch = random_batch(rng.random_range(1..=6), input, 2, case_seed);
    let noise_seed = 777;

    let (g_enc, g_dec) = vae.elbo_gradients(&batch, noise_seed).unwrap();

    let rebuild = |enc: Vec<f64>, dec: Vec<f64>| {
        let encoder = ModelParams::from_flat(
            vae.encoder().layer_shapes().to_vec(),
            enc,
            vae.encoder().learning_rate(),
            0.0,
        )
        .unwrap();
        let decoder = ModelParams::from_flat(
            vae.decoder().layer_shapes().to_vec(),
            dec,
            vae.decoder().learning_rate(),
            0.0,
        )
        .unwrap();
        VaeParams::new(encoder, decoder, vae.latent_dim(), 0.05).unwrap()
    };

    let enc_flat = vae.encoder().flat().to_vec();
    let dec_flat = vae.decoder().flat().to_vec();
    let mut worst = 0.0f64;

    for i in 0..enc_flat.len() {
        let mut plus = enc_flat.clone();
        let mut minus = enc_flat.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let lp = rebuild(plus, dec_flat.clone()).elbo_loss(&batch, noise_seed).unwrap().value;
        let lm = rebuild(minus, dec_flat.clone()).elbo_loss(&batch, noise_seed).unwrap().value;
        worst = worst.max(rel_err(g_enc.flat()[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    for i in 0..dec_flat.len() {
        let mut plus = dec_flat.clone();
        let mut minus = dec_flat.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let lp = rebuild(enc_flat.clone(), plus).elbo_loss(&batch, noise_seed).unwrap().value;
        let lm = rebuild(enc_flat.clone(), minus).elbo_loss(&batch, noise_seed).unwrap().value;
        worst = worst.max(rel_err(g_dec.flat()[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}

#[test]
fn vae_gradients_match_finite_differences() {
    let mut global_worst = 0.0f64;
    for case in 0..8u64 {
        let worst = check_vae_case(case);
        assert!(worst < MAX_REL_ERR, "case {case}: max relative error {worst}");
        global_worst = global_worst.max(worst);
    }
    println!("vae gradient check: worst relative error {global_worst:.3e}");
}
