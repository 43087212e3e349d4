//! Training loop: class-balanced batch sampling, per-video forward/loss/
//! backward accumulation, Adam updates, and training history. One epoch is
//! one sampled batch followed by one optimizer step.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::featio::{DatasetManifest, FeatureBag};
use crate::losses::{center_loss, dmil_loss, select_topk, LossOutput, SCORE_CLAMP};
use crate::netcore::{
    backward, forward, xavier_init, ForwardMode, ModelParameters, ParameterGradients,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{stream_rng, stream_seed, STREAM_DROPOUT, STREAM_INIT, STREAM_SAMPLING};

/// Which per-video objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Cross-entropy between the mean of the top-k scores and the label.
    KmaxMilBaseline,
    /// Per-instance cross-entropy over the top-k scores.
    Dmil,
    /// Instance loss plus the λ-weighted score-center penalty.
    DmilPlusCenter,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::KmaxMilBaseline => "kmax-baseline",
            Self::Dmil => "dmil",
            Self::DmilPlusCenter => "dmil-center",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmax-baseline" => Ok(Self::KmaxMilBaseline),
            "dmil" => Ok(Self::Dmil),
            "dmil-center" => Ok(Self::DmilPlusCenter),
            other => Err(Error::Invalid(format!(
                "unknown loss mode '{other}' (expected kmax-baseline, dmil or dmil-center)"
            ))),
        }
    }
}

/// All training hyperparameters. Defaults: α=4, λ=20, learning rate 1e-4,
/// dropout 0.7, 30 normal + 30 abnormal videos per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub batch_normal: usize,
    pub batch_abnormal: usize,
    /// Optimizer iterations; each samples one batch and takes one step.
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            lambda: 20.0,
            learning_rate: 1e-4,
            dropout_p: 0.7,
            batch_normal: 30,
            batch_abnormal: 30,
            epochs: 200,
            seed: 0,
            loss_mode: LossMode::DmilPlusCenter,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Invalid(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Invalid(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.batch_normal == 0 || self.batch_abnormal == 0 {
            return Err(Error::Invalid(
                "batch sizes must be at least 1 per class".into(),
            ));
        }
        Ok(())
    }
}

/// Batch-mean loss components at one iteration. `total = dmil + center`,
/// where `center` carries its λ weight.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub dmil: f64,
    pub center: f64,
}

/// Validation metrics after one iteration's update.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSnapshot {
    pub iteration: usize,
    pub auc: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub records: Vec<IterationRecord>,
    pub snapshots: Vec<ValidationSnapshot>,
}

impl TrainingHistory {
    /// Writes the per-iteration loss CSV: `iteration,total,dmil,center`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,total,dmil,center\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.total, r.dmil, r.center));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Writes validation snapshots as `iteration,auc,far`.
    pub fn write_validation_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,auc,far\n");
        for s in &self.snapshots {
            out.push_str(&format!("{},{},{}\n", s.iteration, s.auc, s.far));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Uniform class sample: without replacement within the batch when the
/// population suffices, with replacement otherwise.
fn sample_class_indices(rng: &mut ChaCha8Rng, population: usize, count: usize) -> Vec<usize> {
    if population >= count {
        rand::seq::index::sample(rng, population, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..population)).collect()
    }
}

/// Samples one training batch from the manifest: `batch_normal` label-0
/// videos followed by `batch_abnormal` label-1 videos, loaded from disk.
pub fn sample_batch(
    manifest: &DatasetManifest,
    config: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FeatureBag>> {
    manifest.require_both_classes()?;
    let bags = manifest.load_bags()?;
    let order = sample_batch_order(&bags, config, rng);
    Ok(order.into_iter().map(|i| bags[i].clone()).collect())
}

/// Index form of batch sampling over preloaded bags; normals are drawn
/// before abnormals so the RNG consumption order is fixed.
fn sample_batch_order(
    bags: &[FeatureBag],
    config: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let normals: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == Some(0)).collect();
    let abnormals: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == Some(1)).collect();
    let mut order: Vec<usize> = sample_class_indices(rng, normals.len(), config.batch_normal)
        .into_iter()
        .map(|i| normals[i])
        .collect();
    order.extend(
        sample_class_indices(rng, abnormals.len(), config.batch_abnormal)
            .into_iter()
            .map(|i| abnormals[i]),
    );
    order
}

/// Baseline MIL objective: binary cross-entropy between the mean of the
/// top-k scores and the video label, gradient spread evenly over the
/// selected indices.
fn kmax_baseline_loss(scores: &[f64], label: u8, alpha: f64) -> Result<LossOutput> {
    let selection = select_topk(scores, alpha)?;
    let k = selection.k as f64;
    let mean = selection.values.iter().sum::<f64>() / k;
    let m = mean.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let y = f64::from(label);
    let value = -(y * m.ln() + (1.0 - y) * (1.0 - m).ln());
    let dmean = -y / m + (1.0 - y) / (1.0 - m);
    let mut grad = vec![0.0; scores.len()];
    for &idx in &selection.indices {
        grad[idx] = dmean / k;
    }
    Ok(LossOutput { value, grad })
}

/// One video's loss under the configured mode:
/// `(total, dmil component, λ-weighted center component, dL/ds)`.
fn per_video_loss(
    scores: &[f64],
    label: u8,
    config: &TrainingConfig,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    match config.loss_mode {
        LossMode::KmaxMilBaseline => {
            let out = kmax_baseline_loss(scores, label, config.alpha)?;
            Ok((out.value, out.value, 0.0, out.grad))
        }
        LossMode::Dmil => {
            let out = dmil_loss(scores, label, config.alpha)?;
            Ok((out.value, out.value, 0.0, out.grad))
        }
        LossMode::DmilPlusCenter => {
            let dmil = dmil_loss(scores, label, config.alpha)?;
            let center = center_loss(scores, label)?;
            let center_weighted = config.lambda * center.value;
            let total = dmil.value + center_weighted;
            let grad = dmil
                .grad
                .iter()
                .zip(&center.grad)
                .map(|(d, c)| d + config.lambda * c)
                .collect();
            Ok((total, dmil.value, center_weighted, grad))
        }
    }
}

/// Trains from scratch on the manifest. See [`train_with_validation`].
pub fn train(
    manifest: &DatasetManifest,
    config: &TrainingConfig,
) -> Result<(ModelParameters, TrainingHistory)> {
    train_with_validation(manifest, config, None)
}

/// Trains from Xavier-initialized parameters. Each iteration samples a
/// class-balanced batch, runs forward (fresh dropout mask per video),
/// accumulates per-video gradients in batch order, averages them over the
/// batch and takes one Adam step. Deterministic end to end for a fixed
/// seed.
///
/// With a validation set, each iteration is scored on it and the
/// best-frame-AUC parameters are returned; otherwise the final parameters.
pub fn train_with_validation(
    manifest: &DatasetManifest,
    config: &TrainingConfig,
    validation: Option<&[FeatureBag]>,
) -> Result<(ModelParameters, TrainingHistory)> {
    config.validate()?;
    manifest.require_both_classes()?;
    let bags = manifest.load_bags()?;
    let feature_dim = manifest.feature_dim;

    let mut params = xavier_init(feature_dim, stream_seed(config.seed, STREAM_INIT));
    let mut history = TrainingHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }

    let inputs: Vec<Array2<f64>> = bags.iter().map(|b| b.features_f64()).collect();
    let mut sampling_rng = stream_rng(config.seed, STREAM_SAMPLING);
    let mut mask_rng = stream_rng(config.seed, STREAM_DROPOUT);
    let mut adam = AdamState::new(
        feature_dim,
        AdamConfig::with_learning_rate(config.learning_rate),
    );
    let batch_size = config.batch_normal + config.batch_abnormal;
    let mut best: Option<(f64, ModelParameters)> = None;

    for iteration in 1..=config.epochs {
        // accumulate in manifest order so summation order is canonical
        let mut order = sample_batch_order(&bags, config, &mut sampling_rng);
        order.sort_unstable();
        let mut accumulated = ParameterGradients::zeros(feature_dim);
        let (mut sum_total, mut sum_dmil, mut sum_center) = (0.0, 0.0, 0.0);
        for &bag_idx in &order {
            let bag = &bags[bag_idx];
            let mask_seed = mask_rng.gen::<u64>();
            let cache = forward(
                &params,
                &inputs[bag_idx],
                ForwardMode::Train {
                    dropout_p: config.dropout_p,
                    mask_seed,
                },
            )?;
            let label = bag.label.expect("manifest bags always carry labels");
            let (total, dmil_part, center_part, upstream) =
                per_video_loss(cache.scores_slice(), label, config)?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged on video '{}' at iteration {iteration}",
                    bag.video_id
                )));
            }
            let grads = backward(&params, &cache, &upstream)?;
            accumulated.add_assign(&grads);
            sum_total += total;
            sum_dmil += dmil_part;
            sum_center += center_part;
        }
        accumulated.scale(1.0 / batch_size as f64);
        adam_step(&mut params, &accumulated, &mut adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!(
                "gradient diverged at iteration {iteration}"
            )),
            other => other,
        })?;
        history.records.push(IterationRecord {
            iteration,
            total: sum_total / batch_size as f64,
            dmil: sum_dmil / batch_size as f64,
            center: sum_center / batch_size as f64,
        });
        if let Some(val_bags) = validation {
            let report = evaluate(&params, val_bags, 0.5)?;
            history.snapshots.push(ValidationSnapshot {
                iteration,
                auc: report.auc,
                far: report.far,
            });
            if best.as_ref().is_none_or(|(auc, _)| report.auc > *auc) {
                best = Some((report.auc, params.clone()));
            }
        }
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((final_params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::{generate_synthetic_dataset, write_feature_file, write_truth_file,
        ManifestEntry, SyntheticSpec};
    use std::path::PathBuf;
    use tempfile::{tempdir, TempDir};

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn synth_manifest(spec: &SyntheticSpec) -> (TempDir, DatasetManifest) {
        let dir = tempdir().unwrap();
        let bags = generate_synthetic_dataset(spec).unwrap();
        let mut entries = Vec::new();
        for bag in &bags {
            let fname = format!("{}.bin", bag.video_id);
            write_feature_file(bag, &dir.path().join(&fname)).unwrap();
            let tname = format!("{}.txt", bag.video_id);
            write_truth_file(bag.frame_truth.as_ref().unwrap(), &dir.path().join(&tname))
                .unwrap();
            entries.push(ManifestEntry {
                video_id: bag.video_id.clone(),
                label: bag.label.unwrap(),
                feature_path: PathBuf::from(&fname),
                frame_count: bag.frame_count,
                truth_path: Some(PathBuf::from(&tname)),
            });
        }
        let manifest = DatasetManifest {
            entries,
            feature_dim: spec.feature_dim,
            base_dir: dir.path().to_path_buf(),
        };
        (dir, manifest)
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            feature_dim: 6,
            n_normal: 4,
            n_abnormal: 4,
            clip_count_range: (3, 8),
            anomaly_span_fraction: 0.5,
            class_separation: 3.0,
            label_noise_rate: 0.0,
            seed: 11,
        }
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            batch_normal: 4,
            batch_abnormal: 4,
            epochs: 30,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn defaults_are_the_published_hyperparameters() {
        let c = TrainingConfig::default();
        assert_eq!(c.alpha, 4.0);
        assert_eq!(c.lambda, 20.0);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.dropout_p, 0.7);
        assert_eq!(c.batch_normal, 30);
        assert_eq!(c.batch_abnormal, 30);
        assert_eq!(c.loss_mode, LossMode::DmilPlusCenter);
    }

    #[test]
    fn zero_epochs_returns_xavier_init() {
        let (_dir, manifest) = synth_manifest(&tiny_spec());
        let mut config = tiny_config();
        config.epochs = 0;
        let (params, history) = train(&manifest, &config).unwrap();
        assert_eq!(
            params,
            xavier_init(6, stream_seed(config.seed, STREAM_INIT))
        );
        assert!(history.records.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (_dir, manifest) = synth_manifest(&tiny_spec());
        let config = tiny_config();
        let (a, ha) = train(&manifest, &config).unwrap();
        let (b, hb) = train(&manifest, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.records, hb.records);
    }

    #[test]
    fn training_loss_decreases_on_separable_data() {
        let (_dir, manifest) = synth_manifest(&tiny_spec());
        let mut config = tiny_config();
        config.epochs = 200;
        // Desk-scale feature dimension wants a larger step than the
        // full-scale default to move in 200 iterations.
        config.learning_rate = 5e-3;
        let (_, history) = train(&manifest, &config).unwrap();
        let first = history.records.first().unwrap().total;
        let last = history.records.last().unwrap().total;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn batch_covers_whole_set_when_populations_match() {
        let (_dir, manifest) = synth_manifest(&tiny_spec());
        let config = tiny_config();
        let mut rng = stream_rng(1, STREAM_SAMPLING);
        let batch = sample_batch(&manifest, &config, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        let mut ids: Vec<&str> = batch.iter().map(|b| b.video_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8, "whole set must appear exactly once");
        // normals come first
        assert!(batch[..4].iter().all(|b| b.label == Some(0)));
        assert!(batch[4..].iter().all(|b| b.label == Some(1)));
    }

    #[test]
    fn batch_order_depends_on_seed() {
        let (_dir, manifest) = synth_manifest(&tiny_spec());
        let config = tiny_config();
        let ids = |seed: u64| -> Vec<String> {
            let mut rng = stream_rng(seed, STREAM_SAMPLING);
            sample_batch(&manifest, &config, &mut rng)
                .unwrap()
                .iter()
                .map(|b| b.video_id.clone())
                .collect()
        };
        assert_ne!(ids(1), ids(2));
        assert_eq!(ids(3), ids(3));
    }

    #[test]
    fn small_class_is_sampled_with_replacement() {
        let mut spec = tiny_spec();
        spec.n_normal = 2;
        let (_dir, manifest) = synth_manifest(&spec);
        let mut config = tiny_config();
        config.batch_normal = 10;
        let mut rng = stream_rng(4, STREAM_SAMPLING);
        let batch = sample_batch(&manifest, &config, &mut rng).unwrap();
        assert_eq!(batch.len(), 14);
        assert_eq!(
            batch.iter().filter(|b| b.label == Some(0)).count(),
            10
        );
    }

    #[test]
    fn missing_class_is_rejected() {
        let mut spec = tiny_spec();
        spec.label_noise_rate = 0.0;
        let (_dir, mut manifest) = synth_manifest(&spec);
        manifest.entries.retain(|e| e.label == 1);
        let config = tiny_config();
        assert!(train(&manifest, &config).is_err());
    }

    #[test]
    fn kmax_baseline_is_bce_on_the_topk_mean() {
        let scores = [0.2, 0.8, 0.6, 0.4];
        let out = kmax_baseline_loss(&scores, 1, 2.0).unwrap();
        // k=2 selects 0.8 and 0.6; mean 0.7
        assert!(approx(out.value, -(0.7f64.ln()), 1e-12));
        let expected_grad = -1.0 / 0.7 / 2.0;
        assert!(approx(out.grad[1], expected_grad, 1e-12));
        assert!(approx(out.grad[2], expected_grad, 1e-12));
        assert_eq!(out.grad[0], 0.0);
        assert_eq!(out.grad[3], 0.0);
    }

    #[test]
    fn center_component_is_zero_without_normal_videos() {
        let config = TrainingConfig::default();
        for scores in [[0.2, 0.9, 0.4], [0.5, 0.5, 0.5]] {
            let (_, _, center, _) = per_video_loss(&scores, 1, &config).unwrap();
            assert_eq!(center, 0.0);
        }
        // and mean center over an all-abnormal set stays zero
        let total: f64 = [[0.1, 0.9, 0.3], [0.6, 0.2, 0.8]]
            .iter()
            .map(|s| per_video_loss(s, 1, &config).unwrap().2)
            .sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn non_dmil_center_modes_report_zero_center_column() {
        for mode in [LossMode::KmaxMilBaseline, LossMode::Dmil] {
            let config = TrainingConfig {
                loss_mode: mode,
                ..TrainingConfig::default()
            };
            let (total, dmil_part, center, _) =
                per_video_loss(&[0.3, 0.7], 0, &config).unwrap();
            assert_eq!(center, 0.0);
            assert_eq!(total, dmil_part);
        }
    }

    // With one clip per video the MIL machinery reduces away: the recorded
    // batch loss must equal plain video-level binary cross-entropy.
    #[test]
    fn single_clip_training_is_video_level_bce() {
        let spec = SyntheticSpec {
            clip_count_range: (1, 1),
            ..tiny_spec()
        };
        let (_dir, manifest) = synth_manifest(&spec);
        let config = TrainingConfig {
            loss_mode: LossMode::Dmil,
            dropout_p: 0.0,
            epochs: 1,
            ..tiny_config()
        };
        let (_, history) = train(&manifest, &config).unwrap();

        // reproduce the batch and its BCE by hand
        let params = xavier_init(6, stream_seed(config.seed, STREAM_INIT));
        let mut rng = stream_rng(config.seed, STREAM_SAMPLING);
        let batch = sample_batch(&manifest, &config, &mut rng).unwrap();
        let mut expected = 0.0;
        for bag in &batch {
            let cache = forward(&params, &bag.features_f64(), ForwardMode::Eval).unwrap();
            let s = cache.scores[0];
            let y = f64::from(bag.label.unwrap());
            expected += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        expected /= batch.len() as f64;
        assert!(
            approx(history.records[0].total, expected, 1e-12),
            "{} vs {expected}",
            history.records[0].total
        );
    }

    #[test]
    fn divergent_feature_file_aborts_with_video_name() {
        // NaN features written behind the writer's back
        let dir = tempdir().unwrap();
        let bags = generate_synthetic_dataset(&tiny_spec()).unwrap();
        let mut entries = Vec::new();
        for bag in &bags {
            let fname = format!("{}.bin", bag.video_id);
            write_feature_file(bag, &dir.path().join(&fname)).unwrap();
            entries.push(ManifestEntry {
                video_id: bag.video_id.clone(),
                label: bag.label.unwrap(),
                feature_path: PathBuf::from(&fname),
                frame_count: bag.frame_count,
                truth_path: None,
            });
        }
        let path = dir.path().join("normal_0000.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();

        let manifest = DatasetManifest {
            entries,
            feature_dim: 6,
            base_dir: dir.path().to_path_buf(),
        };
        let err = train(&manifest, &tiny_config()).unwrap_err();
        assert!(
            err.to_string().contains("normal_0000"),
            "diagnostic must name the video: {err}"
        );
    }

    #[test]
    fn validation_tracking_returns_best_auc_params() {
        let (_dir, manifest) = synth_manifest(&tiny_spec());
        let val_spec = SyntheticSpec {
            seed: 99,
            n_normal: 3,
            n_abnormal: 3,
            ..tiny_spec()
        };
        let val_bags = generate_synthetic_dataset(&val_spec).unwrap();
        let mut config = tiny_config();
        config.epochs = 40;
        let (params, history) = train_with_validation(&manifest, &config, Some(&val_bags)).unwrap();
        assert_eq!(history.snapshots.len(), 40);
        let best = history
            .snapshots
            .iter()
            .map(|s| s.auc)
            .fold(f64::NEG_INFINITY, f64::max);
        let report = evaluate(&params, &val_bags, 0.5).unwrap();
        assert!(approx(report.auc, best, 1e-12));
    }

    #[test]
    fn history_csv_format() {
        let dir = tempdir().unwrap();
        let history = TrainingHistory {
            records: vec![IterationRecord {
                iteration: 1,
                total: 0.5,
                dmil: 0.25,
                center: 0.25,
            }],
            snapshots: vec![],
        };
        let path = dir.path().join("history.csv");
        history.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,total,dmil,center\n1,0.5,0.25,0.25\n");
    }
}
