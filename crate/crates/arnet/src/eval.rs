//! Frame-level evaluation: ROC AUC via the Mann–Whitney midrank statistic,
//! false-alarm rate at a threshold, per-video score traces, and the α-sweep
//! experiment runner.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::featio::{expand_clip_scores_to_frames, DatasetManifest, FeatureBag};
use crate::netcore::{forward, ForwardMode, ModelParameters};
use crate::trainer::{train, TrainingConfig};

/// Frame-level metrics plus per-video score traces.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub auc: f64,
    pub far: f64,
    pub threshold: f64,
    pub n_frames_pos: usize,
    pub n_frames_neg: usize,
    pub traces: Vec<VideoTrace>,
    /// Resolved settings of the run, as key=value pairs.
    pub config_echo: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct VideoTrace {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
    pub frame_truth: Vec<u8>,
}

impl EvaluationReport {
    /// Writes the `metric,value` summary CSV.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("auc,{}\n", self.auc));
        out.push_str(&format!("far,{}\n", self.far));
        out.push_str(&format!("threshold,{}\n", self.threshold));
        out.push_str(&format!("n_frames_pos,{}\n", self.n_frames_pos));
        out.push_str(&format!("n_frames_neg,{}\n", self.n_frames_neg));
        fs::write(path, out)?;
        Ok(())
    }

    /// Writes one `frame_index,score,truth` CSV per video into `dir`.
    pub fn write_trace_csvs(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for trace in &self.traces {
            let path = dir.join(format!("{}.csv", trace.video_id));
            let mut file = fs::File::create(&path)?;
            let mut buf = String::from("frame_index,score,truth\n");
            for (j, (s, y)) in trace
                .frame_scores
                .iter()
                .zip(&trace.frame_truth)
                .enumerate()
            {
                buf.push_str(&format!("{j},{s},{y}\n"));
            }
            file.write_all(buf.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

/// ROC AUC as the Mann–Whitney statistic with midranks: the fraction of
/// (positive, negative) pairs ranked correctly, ties at half credit.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Walk tie groups in ascending score order; each member gets the group's
    // midrank (ranks are 1-based).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// False-alarm rate: the fraction of label-0 frames scoring strictly above
/// the threshold.
pub fn far(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_neg == 0 {
        return Err(Error::Invalid("FAR needs at least one label-0 frame".into()));
    }
    let alarms = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| y == 0 && **s > threshold)
        .count();
    Ok(alarms as f64 / n_neg as f64)
}

/// Scores every test bag in eval mode, expands clip scores to frames,
/// concatenates all frames in bag order, and reports AUC and FAR over the
/// pooled frames.
pub fn evaluate(
    params: &ModelParameters,
    test_bags: &[FeatureBag],
    threshold: f64,
) -> Result<EvaluationReport> {
    let missing: Vec<&str> = test_bags
        .iter()
        .filter(|b| b.frame_truth.is_none())
        .map(|b| b.video_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "missing frame truth for: {}",
            missing.join(", ")
        )));
    }
    if test_bags.is_empty() {
        return Err(Error::Invalid("no test videos".into()));
    }

    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut traces = Vec::with_capacity(test_bags.len());
    for bag in test_bags {
        bag.validate()?;
        let cache = forward(params, &bag.features_f64(), ForwardMode::Eval)?;
        let frame_scores = expand_clip_scores_to_frames(cache.scores_slice(), bag.frame_count);
        let truth = bag.frame_truth.clone().unwrap();
        all_scores.extend_from_slice(&frame_scores);
        all_labels.extend_from_slice(&truth);
        traces.push(VideoTrace {
            video_id: bag.video_id.clone(),
            frame_scores,
            frame_truth: truth,
        });
    }

    let auc = roc_auc(&all_scores, &all_labels)?;
    let far_value = far(&all_scores, &all_labels, threshold)?;
    let n_frames_pos = all_labels.iter().filter(|&&y| y == 1).count();
    let n_frames_neg = all_labels.len() - n_frames_pos;
    Ok(EvaluationReport {
        auc,
        far: far_value,
        threshold,
        n_frames_pos,
        n_frames_neg,
        traces,
        config_echo: vec![
            ("threshold".into(), threshold.to_string()),
            ("n_videos".into(), test_bags.len().to_string()),
            ("feature_dim".into(), params.feature_dim().to_string()),
        ],
    })
}

/// One α-sweep result row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub auc: f64,
    pub far: f64,
}

/// Trains one model per α (same base seed each run) and evaluates it,
/// returning rows in input order.
pub fn sweep_alpha(
    manifest: &DatasetManifest,
    test_bags: &[FeatureBag],
    base_config: &TrainingConfig,
    alphas: &[f64],
    threshold: f64,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Invalid("alpha list is empty".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut config = base_config.clone();
        config.alpha = alpha;
        let (params, _) = train(manifest, &config)?;
        let report = evaluate(&params, test_bags, threshold)?;
        rows.push(SweepRow {
            alpha,
            auc: report.auc,
            far: report.far,
        });
    }
    Ok(rows)
}

/// Writes sweep rows as an `alpha,auc,far` CSV.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("alpha,auc,far\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.alpha, row.auc, row.far));
    }
    fs::write(path, out)?;
    Ok(())
}
