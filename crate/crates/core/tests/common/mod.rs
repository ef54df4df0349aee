#![allow(dead_code)]

use freqshift::datagen::Class;
use freqshift::netcore::{Mode, Model, ModelConfig};
use freqshift::plane::{Image, Plane};
use freqshift::tensorcore::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// DCT-II straight from the definition sum, O(H²W²).
pub fn dct2_definition(x: &Plane) -> Plane {
    let (h, w) = x.shape();
    let scale = |k: usize, n: usize| {
        if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    Plane::from_fn(h, w, |u, v| {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += x.get(i, j)
                    * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                    * (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
            }
        }
        scale(u, h) * scale(v, w) * acc
    })
}

pub fn random_plane(h: usize, w: usize, rng: &mut impl Rng) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.gen::<f64>())
}

/// Counts errors by walking every sample once; ties at the threshold are
/// attacks.
pub fn recount(scores: &[f64], labels: &[Class], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut n_att, mut n_bf, mut att_err, mut bf_err) = (0, 0, 0, 0);
    for (s, l) in scores.iter().zip(labels) {
        let says_attack = *s >= threshold;
        match l {
            Class::Attack => {
                n_att += 1;
                if !says_attack {
                    att_err += 1;
                }
            }
            Class::Bonafide => {
                n_bf += 1;
                if says_attack {
                    bf_err += 1;
                }
            }
        }
    }
    (n_att, n_bf, att_err, bf_err)
}

/// The miniature attention-enabled network used for whole-model gradient
/// checks: four 2-channel stages on 16x16 inputs.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![2, 2, 2, 2],
        fam_enabled: true,
        input_size: 16,
        crop_size: 16,
        stem_stride: 2,
        ..ModelConfig::default()
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;
/// Smaller steps tried when the ±FD_STEP interval straddles a ReLU kink.
pub const FD_KINK_STEPS: [f64; 2] = [1e-6, 1e-7];

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Entries that only matched at a smaller step because the default one
    /// crossed a ReLU kink.
    pub kinks: Vec<GradMismatch>,
    pub mismatches: Vec<GradMismatch>,
    pub max_rel: f64,
}

fn batch(seed: u64, n: usize, side: usize) -> (Vec<Image>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = (0..n)
        .map(|_| Image::from_fn(side, side, |_, _| rng.gen::<f64>()))
        .collect();
    let labels = (0..n).map(|i| i % 2).collect();
    (images, labels)
}

fn within_tol(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs <= FD_ABS_TOL || abs <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

fn loss_of(model: &Model, images: &[Image], labels: &[usize]) -> f64 {
    let refs: Vec<&Image> = images.iter().collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = model.params().iter().map(|p| tape.constant(p.clone())).collect();
    let x = tape.constant(Model::batch_tensor(&refs).unwrap());
    let fwd = model.forward(&mut tape, &vars, x, Mode::Train).unwrap();
    let loss = tape.softmax_xent(fwd.logits, labels).unwrap();
    tape.value(loss).item().unwrap()
}

/// Compares every parameter gradient of the training loss against central
/// differences for a freshly initialized model and a random batch.
pub fn check_model_gradients(cfg: &ModelConfig, seed: u64, batch_size: usize) -> GradCheck {
    let model = Model::new(cfg.clone(), seed).unwrap();
    let (images, labels) = batch(seed, batch_size, cfg.input_size);
    let refs: Vec<&Image> = images.iter().collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.constant(Model::batch_tensor(&refs).unwrap());
    let fwd = model.forward(&mut tape, &vars, x, Mode::Train).unwrap();
    let loss = tape.softmax_xent(fwd.logits, &labels).unwrap();
    tape.backward(loss).unwrap();

    let mut out = GradCheck::default();
    let mut probe = model.clone();
    for (p, (name, var)) in model.names().iter().zip(&vars).enumerate() {
        let grad = tape.grad(*var).cloned();
        for k in 0..model.params()[p].len() {
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[k]);
            let orig = model.params()[p].data()[k];
            let mut central = |h: f64| {
                probe.params_mut()[p].data_mut()[k] = orig + h;
                let up = loss_of(&probe, &images, &labels);
                probe.params_mut()[p].data_mut()[k] = orig - h;
                let down = loss_of(&probe, &images, &labels);
                probe.params_mut()[p].data_mut()[k] = orig;
                (up - down) / (2.0 * h)
            };
            let numeric = central(FD_STEP);
            out.checked += 1;
            if within_tol(analytic, numeric) {
                let abs = (analytic - numeric).abs();
                if abs > FD_ABS_TOL {
                    out.max_rel = out.max_rel.max(abs / analytic.abs().max(numeric.abs()));
                }
                continue;
            }
            let entry = GradMismatch {
                name: name.clone(),
                index: k,
                analytic,
                numeric,
            };
            if FD_KINK_STEPS.iter().any(|&h| within_tol(analytic, central(h))) {
                out.kinks.push(entry);
            } else {
                out.mismatches.push(entry);
            }
        }
    }
    out
}
