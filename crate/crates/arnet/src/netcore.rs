//! The anomaly-score regression network: a fully connected layer with ReLU
//! and dropout feeding a one-unit sigmoid regression layer, with Xavier
//! initialization and an exact hand-derived backward pass.
//!
//! All model arithmetic is f64; the on-disk feature format stays f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Magic prefix of the parameter checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARNETW01";

/// The four learnable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// Hidden-layer weights, `F × F`.
    pub w_fc: Array2<f64>,
    /// Hidden-layer bias, length `F`.
    pub b_fc: Array1<f64>,
    /// Regression-layer weights (row vector), length `F`.
    pub w_ar: Array1<f64>,
    /// Regression-layer bias.
    pub b_ar: f64,
}

impl ModelParameters {
    pub fn feature_dim(&self) -> usize {
        self.b_fc.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_dim();
        if f == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if self.w_fc.dim() != (f, f) || self.w_ar.len() != f {
            return Err(Error::Shape(format!(
                "inconsistent parameter shapes: w_fc {:?}, b_fc {f}, w_ar {}",
                self.w_fc.dim(),
                self.w_ar.len()
            )));
        }
        let finite = self.w_fc.iter().all(|v| v.is_finite())
            && self.b_fc.iter().all(|v| v.is_finite())
            && self.w_ar.iter().all(|v| v.is_finite())
            && self.b_ar.is_finite();
        if !finite {
            return Err(Error::NonFinite("parameter entry".into()));
        }
        Ok(())
    }
}

/// Gradients (or moment estimates) with the same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_ar: Array1<f64>,
    pub b_ar: f64,
}

impl ParameterGradients {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            w_fc: Array2::zeros((feature_dim, feature_dim)),
            b_fc: Array1::zeros(feature_dim),
            w_ar: Array1::zeros(feature_dim),
            b_ar: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w_fc += &other.w_fc;
        self.b_fc += &other.b_fc;
        self.w_ar += &other.w_ar;
        self.b_ar += other.b_ar;
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_fc *= factor;
        self.b_fc *= factor;
        self.w_ar *= factor;
        self.b_ar *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.w_fc.iter().all(|v| v.is_finite())
            && self.b_fc.iter().all(|v| v.is_finite())
            && self.w_ar.iter().all(|v| v.is_finite())
            && self.b_ar.is_finite()
    }
}

/// Whether a forward pass samples a dropout mask or runs the pure
/// affine+ReLU pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Eval,
    Train { dropout_p: f64, mask_seed: u64 },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input features, `F × t`.
    pub input: Array2<f64>,
    /// Hidden pre-activation `w_fc·input + b_fc`.
    pub z1: Array2<f64>,
    /// Dropout mask with keep-scale baked in; all ones in eval mode.
    pub mask: Array2<f64>,
    /// `mask ⊙ relu(z1)`.
    pub hidden: Array2<f64>,
    /// Pre-sigmoid regression output, length `t`.
    pub z2: Array1<f64>,
    /// Per-clip anomaly scores in (0, 1), length `t`.
    pub scores: Array1<f64>,
}

impl ForwardCache {
    pub fn scores_slice(&self) -> &[f64] {
        self.scores.as_slice().expect("scores are contiguous")
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Xavier-uniform initial parameters: hidden weights on
/// `±sqrt(6/(F+F))`, regression weights on `±sqrt(6/(F+1))`, biases zero.
/// Deterministic per seed.
pub fn xavier_init(feature_dim: usize, seed: u64) -> ModelParameters {
    assert!(feature_dim >= 1, "feature dimension must be positive");
    let f = feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc_bound = (6.0 / (f + f) as f64).sqrt();
    let fc_dist = Uniform::new_inclusive(-fc_bound, fc_bound);
    let w_fc = Array2::from_shape_fn((f, f), |_| rng.sample(fc_dist));
    let ar_bound = (6.0 / (f + 1) as f64).sqrt();
    let ar_dist = Uniform::new_inclusive(-ar_bound, ar_bound);
    let w_ar = Array1::from_shape_fn(f, |_| rng.sample(ar_dist));
    ModelParameters {
        w_fc,
        b_fc: Array1::zeros(f),
        w_ar,
        b_ar: 0.0,
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p_drop`, else
/// `1/(1 - p_drop)`. Deterministic per seed.
pub fn dropout_mask(f: usize, t: usize, p_drop: f64, seed: u64) -> Array2<f64> {
    assert!(
        (0.0..1.0).contains(&p_drop),
        "dropout probability must be in [0, 1)"
    );
    let keep_scale = 1.0 / (1.0 - p_drop);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((f, t), |_| {
        if rng.gen::<f64>() < p_drop {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Forward pass over one video's `F × t` feature matrix:
/// `hidden = mask ⊙ relu(w_fc·x + b_fc)`, `scores = σ(w_ar·hidden + b_ar)`.
pub fn forward(
    params: &ModelParameters,
    input: &Array2<f64>,
    mode: ForwardMode,
) -> Result<ForwardCache> {
    params.validate()?;
    let f = params.feature_dim();
    if input.nrows() != f {
        return Err(Error::Shape(format!(
            "input has {} feature rows, model expects {f}",
            input.nrows()
        )));
    }
    let t = input.ncols();
    if t == 0 {
        return Err(Error::Shape("input has no clips".into()));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward input".into()));
    }

    let z1 = params.w_fc.dot(input) + params.b_fc.view().insert_axis(Axis(1));
    let mask = match mode {
        ForwardMode::Eval => Array2::ones((f, t)),
        ForwardMode::Train {
            dropout_p,
            mask_seed,
        } => dropout_mask(f, t, dropout_p, mask_seed),
    };
    let hidden = &mask * &z1.mapv(|v| v.max(0.0));
    let z2 = params.w_ar.dot(&hidden) + params.b_ar;
    let scores = z2.mapv(sigmoid);
    Ok(ForwardCache {
        input: input.clone(),
        z1,
        mask,
        hidden,
        z2,
        scores,
    })
}

/// Backward pass: given `∂L/∂s` for the cached forward, returns the
/// gradients of L with respect to every parameter. The sigmoid contributes
/// `s(1-s)`, dropout its stored mask, and ReLU a gate that is 0 at z = 0.
pub fn backward(
    params: &ModelParameters,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<ParameterGradients> {
    let f = params.feature_dim();
    let t = cache.scores.len();
    if cache.input.nrows() != f || cache.hidden.dim() != (f, t) {
        return Err(Error::Shape(
            "cache does not match the model's feature dimension".into(),
        ));
    }
    if upstream.len() != t {
        return Err(Error::Shape(format!(
            "upstream gradient has length {}, expected {t}",
            upstream.len()
        )));
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream gradient".into()));
    }

    // dL/dz2 = dL/ds · s(1-s)
    let dz2 = Array1::from_shape_fn(t, |j| {
        upstream[j] * cache.scores[j] * (1.0 - cache.scores[j])
    });
    let grad_w_ar = cache.hidden.dot(&dz2);
    let grad_b_ar = dz2.sum();

    // dL/dhidden = w_ar ⊗ dz2, then through dropout and the ReLU gate.
    let dhidden = params
        .w_ar
        .view()
        .insert_axis(Axis(1))
        .dot(&dz2.view().insert_axis(Axis(0)));
    let gate = cache.z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let dz1 = dhidden * &cache.mask * &gate;

    let grad_w_fc = dz1.dot(&cache.input.t());
    let grad_b_fc = dz1.sum_axis(Axis(1));

    Ok(ParameterGradients {
        w_fc: grad_w_fc,
        b_fc: grad_b_fc,
        w_ar: grad_w_ar,
        b_ar: grad_b_ar,
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────────────

/// Writes parameters: magic, `F` as u32 little-endian, then `w_fc`
/// (row-major), `b_fc`, `w_ar`, `b_ar` as f64 little-endian.
pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    params.validate()?;
    let f = params.feature_dim();
    let mut buf = Vec::with_capacity(12 + 8 * (f * f + 2 * f + 1));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for row in params.w_fc.rows() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &v in &params.b_fc {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &params.w_ar {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&params.b_ar.to_le_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &header[0..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic (expected {:?})",
            path.display(),
            std::str::from_utf8(CHECKPOINT_MAGIC).unwrap()
        )));
    }
    let f = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if f == 0 {
        return Err(Error::Format(format!(
            "{}: zero feature dimension",
            path.display()
        )));
    }
    let n_values = f * f + 2 * f + 1;
    let mut payload = vec![0u8; 8 * n_values];
    file.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let w_fc = Array2::from_shape_fn((f, f), |_| values.next().unwrap());
    let b_fc = Array1::from_shape_fn(f, |_| values.next().unwrap());
    let w_ar = Array1::from_shape_fn(f, |_| values.next().unwrap());
    let b_ar = values.next().unwrap();
    let params = ModelParameters {
        w_fc,
        b_fc,
        w_ar,
        b_ar,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let p = xavier_init(1, 3);
        assert!(p.w_fc[[0, 0]].abs() <= 3f64.sqrt());
        assert_eq!(p.b_fc[0], 0.0);
        assert_eq!(p.b_ar, 0.0);

        let p = xavier_init(128, 3);
        let bound = (6.0f64 / 256.0).sqrt();
        assert!(p.w_fc.iter().all(|v| v.abs() <= bound));
        let ar_bound = (6.0f64 / 129.0).sqrt();
        assert!(p.w_ar.iter().all(|v| v.abs() <= ar_bound));
        assert!(p.b_fc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        assert_eq!(xavier_init(8, 42), xavier_init(8, 42));
        assert_ne!(xavier_init(8, 42), xavier_init(8, 43));
    }

    #[test]
    fn dropout_degenerate_p_zero() {
        let mask = dropout_mask(3, 4, 0.0, 9);
        assert!(mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_zero_fraction_and_keep_scale() {
        let mask = dropout_mask(100, 100, 0.7, 11);
        let zeros = mask.iter().filter(|&&v| v == 0.0).count() as f64;
        let frac = zeros / 10_000.0;
        assert!(
            (frac - 0.7).abs() <= 0.03,
            "zero fraction {frac} outside 0.70 ± 0.03"
        );
        let keep = 10.0 / 3.0;
        assert!(mask
            .iter()
            .all(|&v| v == 0.0 || approx(v, keep, 1e-12)));
    }

    #[test]
    fn identity_params_score_half() {
        let params = ModelParameters {
            w_fc: Array2::eye(3),
            b_fc: Array1::zeros(3),
            w_ar: Array1::zeros(3),
            b_ar: 0.0,
        };
        let x = array![[0.3, -2.0], [1.5, 0.0], [-0.7, 4.0]];
        let cache = forward(&params, &x, ForwardMode::Eval).unwrap();
        assert!(cache.scores.iter().all(|&s| s == 0.5));
    }

    fn scalar_params() -> ModelParameters {
        ModelParameters {
            w_fc: array![[2.0]],
            b_fc: array![0.0],
            w_ar: array![1.0],
            b_ar: -1.0,
        }
    }

    #[test]
    fn scalar_forward_hand_example() {
        let cache = forward(&scalar_params(), &array![[1.0]], ForwardMode::Eval).unwrap();
        assert_eq!(cache.hidden, array![[2.0]]);
        assert_eq!(cache.z2, array![1.0]);
        assert!(approx(cache.scores[0], 0.731059, 1e-6));
    }

    #[test]
    fn scalar_forward_relu_clips_negative_preactivation() {
        let cache = forward(&scalar_params(), &array![[-1.0]], ForwardMode::Eval).unwrap();
        assert_eq!(cache.hidden, array![[0.0]]);
        assert_eq!(cache.z2, array![-1.0]);
        assert!(approx(cache.scores[0], 0.268941, 1e-6));
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        let params = xavier_init(6, 5);
        let x = Array2::from_shape_fn((6, 9), |(i, j)| (i as f64 - j as f64) * 3.7);
        let cache = forward(&params, &x, ForwardMode::Eval).unwrap();
        assert!(cache.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn eval_forward_ignores_everything_random() {
        let params = xavier_init(4, 1);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.25 - 1.0);
        let a = forward(&params, &x, ForwardMode::Eval).unwrap();
        let b = forward(&params, &x, ForwardMode::Eval).unwrap();
        assert_eq!(a.scores, b.scores);
        assert!(a.mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn train_mode_is_deterministic_per_mask_seed() {
        let params = xavier_init(4, 1);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let mode = ForwardMode::Train {
            dropout_p: 0.5,
            mask_seed: 77,
        };
        let a = forward(&params, &x, mode).unwrap();
        let b = forward(&params, &x, mode).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn zero_upstream_means_zero_gradients() {
        let params = xavier_init(3, 2);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - j as f64);
        let cache = forward(&params, &x, ForwardMode::Eval).unwrap();
        let grads = backward(&params, &cache, &[0.0; 4]).unwrap();
        assert_eq!(grads, ParameterGradients::zeros(3));
    }

    #[test]
    fn scalar_backward_hand_example() {
        let params = scalar_params();
        let cache = forward(&params, &array![[1.0]], ForwardMode::Eval).unwrap();
        let grads = backward(&params, &cache, &[1.0]).unwrap();
        // dz2 = σ(1)(1-σ(1))
        let dz2 = sigmoid(1.0) * (1.0 - sigmoid(1.0));
        assert!(approx(grads.b_ar, dz2, 1e-9));
        assert!(approx(grads.b_ar, 0.196612, 1e-6));
        assert!(approx(grads.w_ar[0], 2.0 * dz2, 1e-9));
        assert!(approx(grads.w_ar[0], 0.393224, 1e-6));
        // through the hidden layer: w_ar=1, relu gate open, x=1
        assert!(approx(grads.w_fc[[0, 0]], dz2, 1e-9));
        assert!(approx(grads.b_fc[0], dz2, 1e-9));
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let params = xavier_init(3, 2);
        let x = Array2::from_shape_fn((3, 4), |_| 0.5);
        let cache = forward(&params, &x, ForwardMode::Eval).unwrap();
        assert!(backward(&params, &cache, &[0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = xavier_init(5, 123);
        save_checkpoint(&params, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), params);
        // 8 magic + 4 dim + 8·(25+5+5+1)
        assert_eq!(fs::metadata(&path).unwrap().len(), 12 + 8 * 36);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = xavier_init(2, 0);
        save_checkpoint(&params, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());

        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    // Finite differences on a fixed scalar loss Σ w_j·s_j catch sign or
    // masking mistakes locally; the full composed losses are checked in the
    // acceptance suite.
    #[test]
    fn backward_matches_finite_differences_on_weighted_score_sum() {
        let f = 4;
        let t = 5;
        let params = xavier_init(f, 9);
        let x = Array2::from_shape_fn((f, t), |(i, j)| ((i * t + j) as f64 * 0.37).sin());
        let weights: Vec<f64> = (0..t).map(|j| 0.5 + 0.25 * j as f64).collect();

        let loss = |p: &ModelParameters| -> f64 {
            let cache = forward(p, &x, ForwardMode::Eval).unwrap();
            cache
                .scores
                .iter()
                .zip(&weights)
                .map(|(s, w)| s * w)
                .sum()
        };

        let cache = forward(&params, &x, ForwardMode::Eval).unwrap();
        let grads = backward(&params, &cache, &weights).unwrap();

        let h = 1e-6;
        let check = |analytic: f64, mut bump: Box<dyn FnMut(f64) -> ModelParameters>| {
            let plus = loss(&bump(h));
            let minus = loss(&bump(-h));
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "analytic {analytic} vs numeric {numeric}"
            );
        };

        for i in 0..f {
            for j in 0..f {
                let base = params.clone();
                check(
                    grads.w_fc[[i, j]],
                    Box::new(move |eps| {
                        let mut p = base.clone();
                        p.w_fc[[i, j]] += eps;
                        p
                    }),
                );
            }
            let base = params.clone();
            check(
                grads.b_fc[i],
                Box::new(move |eps| {
                    let mut p = base.clone();
                    p.b_fc[i] += eps;
                    p
                }),
            );
            let base = params.clone();
            check(
                grads.w_ar[i],
                Box::new(move |eps| {
                    let mut p = base.clone();
                    p.w_ar[i] += eps;
                    p
                }),
            );
        }
        let base = params.clone();
        check(
            grads.b_ar,
            Box::new(move |eps| {
                let mut p = base.clone();
                p.b_ar += eps;
                p
            }),
        );
    }
}
