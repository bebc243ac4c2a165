//! Central finite-difference checks of every analytic backward pass.
//!
//! Each check evaluates a scalar function of one tensor, perturbs every
//! coordinate by `+-eps`, and compares the numeric gradient with the analytic
//! one by `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over the
//! whole tensor. Coordinates whose perturbation flips a ReLU unit are skipped,
//! since the difference quotient straddles a kink there.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{
    matmul_backward, normalize_backward, normalize_rows, row_softmax, softmax_backward, EmbeddingBatch, Modality,
    SimilarityKind, SimilarityMatrix,
};
use crate::encoders::{encode_features, init_params, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::loss::{clap_loss, soft_label_loss, soft_targets, SoftLabelConfig, SoftTargets};
use crate::trainer::{batch_loss_and_grads, Objective};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Absolute scale below which gradient norms are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub first_seed: u64,
    pub seeds: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Largest layer width drawn for the model checks.
    pub max_dim: usize,
    /// Largest batch drawn.
    pub max_batch: usize,
    /// Negates the analytic gradient of every tensor whose name contains
    /// this string. Used to confirm the harness detects a broken backward.
    pub inject_sign_flip: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            first_seed: 0,
            seeds: 10,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            max_dim: 16,
            max_batch: 6,
            inject_sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coordinates: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seeds: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed).collect()
    }
}

/// Relative error between two gradient tensors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Central differences of `f` at `x`. `f` returns the value and an optional
/// kink signature; coordinates whose two evaluations disagree on the
/// signature are returned as `None`.
pub fn numeric_gradient<F>(x: &mut [f64], eps: f64, mut f: F) -> Vec<Option<f64>>
where
    F: FnMut(&[f64]) -> (f64, Option<Vec<bool>>),
{
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let (plus, sig_plus) = f(x);
            x[i] = orig - eps;
            let (minus, sig_minus) = f(x);
            x[i] = orig;
            (sig_plus == sig_minus).then(|| (plus - minus) / (2.0 * eps))
        })
        .collect()
}

struct Tally {
    checks: Vec<TensorCheck>,
    tolerance: f64,
    fault: Option<String>,
}

impl Tally {
    fn record(&mut self, name: &str, seed: u64, analytic: &[f64], numeric: &[Option<f64>]) {
        let sign = match &self.fault {
            Some(f) if name.contains(f.as_str()) => -1.0,
            _ => 1.0,
        };
        let (a, n): (Vec<f64>, Vec<f64>) =
            analytic.iter().zip(numeric).filter_map(|(a, n)| n.map(|n| (sign * a, n))).unzip();
        let skipped = numeric.len() - n.len();
        let err = relative_error(&a, &n);
        let entry = match self.checks.iter_mut().position(|c| c.name == name) {
            Some(i) => &mut self.checks[i],
            None => {
                self.checks.push(TensorCheck {
                    name: name.to_owned(),
                    max_rel_error: 0.0,
                    worst_seed: seed,
                    coordinates: 0,
                    skipped: 0,
                    passed: true,
                });
                self.checks.last_mut().expect("just pushed")
            }
        };
        if err > entry.max_rel_error || err.is_nan() {
            entry.max_rel_error = err;
            entry.worst_seed = seed;
        }
        entry.coordinates += n.len();
        entry.skipped += skipped;
        entry.passed = entry.passed && err < self.tolerance;
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn check_primitives(seed: u64, opts: &GradCheckOptions, tally: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=opts.max_batch);
    let m = rng.random_range(1..=opts.max_batch);
    let d = rng.random_range(2..=opts.max_dim.min(8));
    let tau = rng.random_range(0.2..2.0);

    // row softmax with a random linear read-out
    let z = uniform_matrix(&mut rng, n, m, -2.0, 2.0);
    let w = uniform_matrix(&mut rng, n, m, -1.0, 1.0);
    let p = row_softmax(&z.view(), tau)?;
    let analytic = softmax_backward(&p.view(), &w.view())? / tau;
    let mut x = z.clone().into_raw_vec_and_offset().0;
    let numeric = numeric_gradient(&mut x, opts.eps, |v| {
        let z = Array2::from_shape_vec((n, m), v.to_vec()).expect("shape");
        ((row_softmax(&z.view(), tau).expect("softmax") * &w).sum(), None)
    });
    tally.record("softmax", seed, analytic.as_slice().expect("contiguous"), &numeric);

    // row normalization
    let xs = uniform_matrix(&mut rng, n, d, -1.0, 1.0) + 0.1;
    let w = uniform_matrix(&mut rng, n, d, -1.0, 1.0);
    let analytic = normalize_backward(&xs.view(), &w.view())?;
    let mut x = xs.clone().into_raw_vec_and_offset().0;
    let numeric = numeric_gradient(&mut x, opts.eps, |v| {
        let xs = Array2::from_shape_vec((n, d), v.to_vec()).expect("shape");
        ((normalize_rows(&xs.view()).expect("normalize") * &w).sum(), None)
    });
    tally.record("normalize", seed, analytic.as_slice().expect("contiguous"), &numeric);

    // C = X Y^T
    let xm = uniform_matrix(&mut rng, n, d, -1.0, 1.0);
    let ym = uniform_matrix(&mut rng, m, d, -1.0, 1.0);
    let g = uniform_matrix(&mut rng, n, m, -1.0, 1.0);
    let (gx, gy) = matmul_backward(&xm.view(), &ym.view(), &g.view())?;
    let mut x = xm.clone().into_raw_vec_and_offset().0;
    let numeric = numeric_gradient(&mut x, opts.eps, |v| {
        let xm = Array2::from_shape_vec((n, d), v.to_vec()).expect("shape");
        ((xm.dot(&ym.t()) * &g).sum(), None)
    });
    tally.record("similarity.x", seed, gx.as_slice().expect("contiguous"), &numeric);
    let mut y = ym.clone().into_raw_vec_and_offset().0;
    let numeric = numeric_gradient(&mut y, opts.eps, |v| {
        let ym = Array2::from_shape_vec((m, d), v.to_vec()).expect("shape");
        ((xm.dot(&ym.t()) * &g).sum(), None)
    });
    tally.record("similarity.y", seed, gy.as_slice().expect("contiguous"), &numeric);
    Ok(())
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> Result<SoftTargets> {
    let teacher = |rng: &mut ChaCha8Rng, m: Modality| -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(uniform_matrix(rng, n, 4, -1.0, 1.0) + 0.05, m)?.normalized()
    };
    let t = teacher(rng, Modality::Text)?;
    let a = teacher(rng, Modality::Audio)?;
    let ct = SimilarityMatrix::new(t.rows().dot(&t.rows().t()), SimilarityKind::IntraModal)?;
    let ca = SimilarityMatrix::new(a.rows().dot(&a.rows().t()), SimilarityKind::IntraModal)?;
    let cfg = SoftLabelConfig::new(rng.random_range(0.0..1.0), rng.random_range(0.5..2.0))?;
    soft_targets(&ct, &ca, &cfg)
}

fn check_losses(seed: u64, opts: &GradCheckOptions, tally: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let n = rng.random_range(1..=opts.max_batch);
    let c = uniform_matrix(&mut rng, n, n, -1.0, 1.0);
    let log_tau: f64 = rng.random_range((0.05f64).ln()..(1.0f64).ln());
    let targets = random_targets(&mut rng, n)?;

    for (label, soft) in [("clap_loss", None), ("soft_label_loss", Some(&targets))] {
        let eval = |c: &Array2<f64>, log_tau: f64| {
            let m = SimilarityMatrix::new(c.clone(), SimilarityKind::CrossModal).expect("finite");
            match soft {
                None => clap_loss(&m, log_tau.exp()),
                Some(t) => soft_label_loss(&m, log_tau.exp(), t),
            }
            .expect("loss")
        };
        let out = eval(&c, log_tau);
        let mut x = c.clone().into_raw_vec_and_offset().0;
        let numeric = numeric_gradient(&mut x, opts.eps, |v| {
            (eval(&Array2::from_shape_vec((n, n), v.to_vec()).expect("shape"), log_tau).value, None)
        });
        tally.record(&format!("{label}.C"), seed, out.grad_c.as_slice().expect("contiguous"), &numeric);
        let mut s = [log_tau];
        let numeric = numeric_gradient(&mut s, opts.eps, |v| (eval(&c, v[0]).value, None));
        tally.record(&format!("{label}.log_temperature"), seed, &[out.grad_log_temperature], &numeric);
    }
    Ok(())
}

fn random_dims(rng: &mut ChaCha8Rng, max_dim: usize) -> ModelDims {
    let mut w = |lo: usize| rng.random_range(lo..=max_dim.max(lo));
    ModelDims {
        vocab_dim: w(8),
        text_hash_seed: 0,
        audio_dim: w(2),
        encoder_hidden: w(2),
        text_latent: w(2),
        audio_latent: w(2),
        projection_hidden: w(2),
        embed_dim: w(2),
    }
}

fn check_model(seed: u64, opts: &GradCheckOptions, tally: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x30de1);
    let dims = random_dims(&mut rng, opts.max_dim);
    let n = rng.random_range(2..=opts.max_batch.max(2));
    let mut params = init_params(&dims, seed)?;
    // move biases and temperature off their initial values
    for (name, t) in params.tensors_mut() {
        if name.ends_with("bias") {
            t.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
    }
    params.log_temperature = rng.random_range((0.05f64).ln()..(1.0f64).ln());
    let xt = uniform_matrix(&mut rng, n, dims.vocab_dim, -1.0, 1.0);
    let xa = uniform_matrix(&mut rng, n, dims.audio_dim, -1.0, 1.0);
    let targets = random_targets(&mut rng, n)?;
    let objective = if seed.is_multiple_of(2) { Objective::Hard } else { Objective::Soft(&targets) };

    let (_, grads) = batch_loss_and_grads(&params, &xt.view(), &xa.view(), objective)?;
    let eval = |p: &ModelParams| -> (f64, Option<Vec<bool>>) {
        let (t, a, cache) = encode_features(p, &xt.view(), &xa.view()).expect("forward");
        let c = SimilarityMatrix::new(t.rows().dot(&a.rows().t()), SimilarityKind::CrossModal).expect("finite");
        let out = match objective {
            Objective::Hard => clap_loss(&c, p.temperature()),
            Objective::Soft(tg) => soft_label_loss(&c, p.temperature(), tg),
        }
        .expect("loss");
        (out.value, Some(cache.activation_pattern()))
    };

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, g)| g.to_vec()).collect();
    for (k, name) in names.iter().enumerate() {
        let mut work = params.clone();
        let len = work.tensors()[k].1.len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = work.tensors()[k].1[i];
            let at = |v: f64, work: &mut ModelParams| {
                work.tensors_mut()[k].1[i] = v;
                eval(work)
            };
            let (plus, sig_plus) = at(orig + opts.eps, &mut work);
            let (minus, sig_minus) = at(orig - opts.eps, &mut work);
            work.tensors_mut()[k].1[i] = orig;
            numeric.push((sig_plus == sig_minus).then(|| (plus - minus) / (2.0 * opts.eps)));
        }
        tally.record(&format!("model.{name}"), seed, &analytic[k], &numeric);
    }
    Ok(())
}

/// Runs every check over `opts.seeds` consecutive seeds.
pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut tally = Tally { checks: Vec::new(), tolerance: opts.tolerance, fault: opts.inject_sign_flip.clone() };
    for seed in opts.first_seed..opts.first_seed + opts.seeds {
        check_primitives(seed, opts, &mut tally)?;
        check_losses(seed, opts, &mut tally)?;
        check_model(seed, opts, &mut tally)?;
    }
    if let Some(name) = &opts.inject_sign_flip {
        if !tally.checks.iter().any(|t| &t.name == name) {
            return Err(Error::InvalidConfig(format!("no tensor named {name:?} to corrupt")));
        }
    }
    Ok(GradCheckReport { seeds: opts.seeds, eps: opts.eps, tolerance: opts.tolerance, tensors: tally.checks })
}
