//! Clip-feature I/O: the binary feature-file format, the dataset manifest,
//! frame-level ground truth, clip-to-frame score expansion, and a synthetic
//! weakly-labeled dataset generator for desk-scale verification.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Clips are 16 consecutive frames; scores expand to frames in these blocks.
pub const FRAMES_PER_CLIP: usize = 16;

/// Magic prefix of the binary feature-file format.
pub const FEATURE_MAGIC: &[u8; 8] = b"ARNETF01";

/// Manifest CSV header, in column order.
pub const MANIFEST_HEADER: [&str; 5] = [
    "video_id",
    "label",
    "feature_path",
    "frame_count",
    "truth_path",
];

// ── FeatureBag ───────────────────────────────────────────────────────────────

/// One video's clip-feature matrix plus its weak label and, for test videos,
/// frame-level ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub video_id: String,
    /// Feature matrix, `F × t` (feature dimension × clip count).
    pub features: Array2<f32>,
    /// Video-level anomaly label (0 normal, 1 abnormal); unset after a bare
    /// feature-file read.
    pub label: Option<u8>,
    /// Total frames in the source video.
    pub frame_count: usize,
    /// Per-frame 0/1 ground truth, test videos only.
    pub frame_truth: Option<Vec<u8>>,
}

impl FeatureBag {
    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn clip_count(&self) -> usize {
        self.features.ncols()
    }

    /// Checks the structural invariants: nonempty matrix, finite values,
    /// a positive frame count, and truth length matching the frame count.
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim() == 0 || self.clip_count() == 0 {
            return Err(Error::Invalid(format!(
                "bag '{}': feature matrix must be at least 1x1, got {}x{}",
                self.video_id,
                self.feature_dim(),
                self.clip_count()
            )));
        }
        if let Some(v) = self.features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "bag '{}': feature value {v}",
                self.video_id
            )));
        }
        if self.frame_count == 0 {
            return Err(Error::Invalid(format!(
                "bag '{}': frame_count must be positive",
                self.video_id
            )));
        }
        if let Some(label) = self.label {
            if label > 1 {
                return Err(Error::Invalid(format!(
                    "bag '{}': label must be 0 or 1, got {label}",
                    self.video_id
                )));
            }
        }
        if let Some(truth) = &self.frame_truth {
            if truth.len() != self.frame_count {
                return Err(Error::Invalid(format!(
                    "bag '{}': frame_truth length {} != frame_count {}",
                    self.video_id,
                    truth.len(),
                    self.frame_count
                )));
            }
            if truth.iter().any(|&v| v > 1) {
                return Err(Error::Invalid(format!(
                    "bag '{}': frame_truth entries must be 0 or 1",
                    self.video_id
                )));
            }
        }
        Ok(())
    }

    /// Feature matrix widened to f64 for model arithmetic.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

// ── Feature file format ──────────────────────────────────────────────────────

/// Writes a bag's matrix and counts: magic, `F`/`t`/`frame_count` as u32
/// little-endian, then `F·t` f32 little-endian values clip by clip
/// (column-major). Round-trips bit-exactly with [`read_feature_file`].
pub fn write_feature_file(bag: &FeatureBag, path: &Path) -> Result<()> {
    bag.validate()?;
    let f = bag.feature_dim();
    let t = bag.clip_count();
    let mut buf = Vec::with_capacity(20 + 4 * f * t);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.frame_count as u32).to_le_bytes());
    for clip in 0..t {
        for feat in 0..f {
            buf.extend_from_slice(&bag.features[[feat, clip]].to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Header of a feature file: `(feature_dim, clip_count, frame_count)`.
/// Validates magic and that the file length matches the header.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize, usize)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 20];
    file.read_exact(&mut header).map_err(|_| {
        Error::Format(format!("{}: truncated header", path.display()))
    })?;
    if &header[0..8] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic (expected {:?})",
            path.display(),
            std::str::from_utf8(FEATURE_MAGIC).unwrap()
        )));
    }
    let f = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let frame_count = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    if f == 0 || t == 0 {
        return Err(Error::Format(format!(
            "{}: zero feature dimension or clip count",
            path.display()
        )));
    }
    let expected = 20 + 4 * f * t;
    let actual = file.metadata()?.len() as usize;
    if actual != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes for F={f}, t={t}, got {actual}",
            path.display()
        )));
    }
    Ok((f, t, frame_count))
}

/// Reads a feature file back into a bag. Label and truth are unset; the
/// video id is taken from the file stem.
pub fn read_feature_file(path: &Path) -> Result<FeatureBag> {
    let (f, t, frame_count) = read_feature_header(path)?;
    let bytes = fs::read(path)?;
    let mut features = Array2::<f32>::zeros((f, t));
    let mut offset = 20;
    for clip in 0..t {
        for feat in 0..f {
            features[[feat, clip]] =
                f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureBag {
        video_id,
        features,
        label: None,
        frame_count,
        frame_truth: None,
    })
}

// ── Truth files ──────────────────────────────────────────────────────────────

/// Writes frame truth as one ASCII 0/1 character per frame, newline-terminated.
pub fn write_truth_file(truth: &[u8], path: &Path) -> Result<()> {
    let mut line = String::with_capacity(truth.len() + 1);
    for &v in truth {
        if v > 1 {
            return Err(Error::Invalid(format!(
                "truth value {v} is not 0 or 1"
            )));
        }
        line.push(if v == 1 { '1' } else { '0' });
    }
    line.push('\n');
    fs::write(path, line)?;
    Ok(())
}

/// Reads a truth file and checks it holds exactly `frame_count` 0/1 characters.
pub fn read_truth_file(path: &Path, frame_count: usize) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path)?;
    let trimmed = text.trim_end_matches(['\n', '\r']);
    let mut truth = Vec::with_capacity(trimmed.len());
    for c in trimmed.chars() {
        match c {
            '0' => truth.push(0),
            '1' => truth.push(1),
            _ => {
                return Err(Error::Format(format!(
                    "{}: unexpected character {c:?} in truth file",
                    path.display()
                )))
            }
        }
    }
    if truth.len() != frame_count {
        return Err(Error::Format(format!(
            "{}: truth has {} frames, expected {frame_count}",
            path.display(),
            truth.len()
        )));
    }
    Ok(truth)
}

// ── Manifest ─────────────────────────────────────────────────────────────────

/// One manifest row. Paths are stored as written in the CSV and resolved
/// against the manifest's directory when relative.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: u8,
    pub feature_path: PathBuf,
    pub frame_count: usize,
    pub truth_path: Option<PathBuf>,
}

/// A dataset: manifest rows plus the feature dimension shared by every
/// referenced feature file.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub feature_dim: usize,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Loads and validates a manifest CSV: exact header, unique video ids,
    /// labels in {0,1}, and a consistent feature dimension across every
    /// referenced feature file (headers are read to check).
    pub fn load(path: &Path) -> Result<Self> {
        let base_dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        {
            let headers = reader
                .headers()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let expected: Vec<&str> = MANIFEST_HEADER.to_vec();
            let actual: Vec<&str> = headers.iter().collect();
            if actual != expected {
                return Err(Error::Format(format!(
                    "{}: manifest header must be {:?}, got {:?}",
                    path.display(),
                    expected.join(","),
                    actual.join(",")
                )));
            }
        }
        let mut entries = Vec::new();
        for (row_idx, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            if record.len() != 5 {
                return Err(Error::Format(format!(
                    "{}: row {} has {} fields, expected 5",
                    path.display(),
                    row_idx + 2,
                    record.len()
                )));
            }
            let video_id = record[0].to_string();
            let label: u8 = record[1].parse().map_err(|_| {
                Error::Format(format!(
                    "{}: bad label {:?} for video '{video_id}'",
                    path.display(),
                    &record[1]
                ))
            })?;
            if label > 1 {
                return Err(Error::Format(format!(
                    "{}: label must be 0 or 1, got {label} for video '{video_id}'",
                    path.display()
                )));
            }
            let frame_count: usize = record[3].parse().map_err(|_| {
                Error::Format(format!(
                    "{}: bad frame_count {:?} for video '{video_id}'",
                    path.display(),
                    &record[3]
                ))
            })?;
            let truth_path = if record[4].is_empty() {
                None
            } else {
                Some(PathBuf::from(&record[4]))
            };
            entries.push(ManifestEntry {
                video_id,
                label,
                feature_path: PathBuf::from(&record[2]),
                frame_count,
                truth_path,
            });
        }
        if entries.is_empty() {
            return Err(Error::Invalid(format!(
                "{}: manifest has no entries",
                path.display()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.video_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "{}: duplicate video_id '{}'",
                    path.display(),
                    e.video_id
                )));
            }
        }
        let manifest = Self {
            entries,
            feature_dim: 0,
            base_dir,
        };
        let mut feature_dim = 0usize;
        for e in &manifest.entries {
            let fpath = manifest.resolve(&e.feature_path);
            let (f, _, file_frames) = read_feature_header(&fpath)?;
            if feature_dim == 0 {
                feature_dim = f;
            } else if f != feature_dim {
                return Err(Error::Shape(format!(
                    "feature dimension mismatch: '{}' has F={f}, expected F={feature_dim}",
                    e.video_id
                )));
            }
            if file_frames != e.frame_count {
                return Err(Error::Invalid(format!(
                    "'{}': manifest frame_count {} != feature file frame_count {}",
                    e.video_id, e.frame_count, file_frames
                )));
            }
        }
        Ok(Self {
            feature_dim,
            ..manifest
        })
    }

    /// Writes the manifest CSV with paths exactly as stored in the entries.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer
            .write_record(MANIFEST_HEADER)
            .map_err(|e| Error::Format(e.to_string()))?;
        for e in &self.entries {
            writer
                .write_record([
                    e.video_id.as_str(),
                    &e.label.to_string(),
                    &e.feature_path.to_string_lossy(),
                    &e.frame_count.to_string(),
                    &e.truth_path
                        .as_ref()
                        .map(|p| p.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads every entry's features (plus truth where listed) into bags,
    /// in manifest order.
    pub fn load_bags(&self) -> Result<Vec<FeatureBag>> {
        self.entries.iter().map(|e| self.load_bag(e)).collect()
    }

    fn load_bag(&self, entry: &ManifestEntry) -> Result<FeatureBag> {
        let mut bag = read_feature_file(&self.resolve(&entry.feature_path))?;
        bag.video_id = entry.video_id.clone();
        bag.label = Some(entry.label);
        if bag.frame_count != entry.frame_count {
            return Err(Error::Invalid(format!(
                "'{}': manifest frame_count {} != feature file frame_count {}",
                entry.video_id, entry.frame_count, bag.frame_count
            )));
        }
        if let Some(tp) = &entry.truth_path {
            bag.frame_truth = Some(read_truth_file(&self.resolve(tp), entry.frame_count)?);
        }
        bag.validate()?;
        Ok(bag)
    }

    /// Present when the manifest can drive training: at least one video of
    /// each label class.
    pub fn require_both_classes(&self) -> Result<()> {
        for class in [0u8, 1u8] {
            if !self.entries.iter().any(|e| e.label == class) {
                return Err(Error::Invalid(format!(
                    "manifest has no label-{class} videos"
                )));
            }
        }
        Ok(())
    }
}

// ── Clip-to-frame expansion ──────────────────────────────────────────────────

/// Expands per-clip scores to per-frame scores: frame `j` gets the score of
/// clip `j / 16`, clamped to the last clip for trailing frames.
pub fn expand_clip_scores_to_frames(clip_scores: &[f64], frame_count: usize) -> Vec<f64> {
    assert!(!clip_scores.is_empty(), "need at least one clip score");
    assert!(frame_count >= 1, "need at least one frame");
    let last = clip_scores.len() - 1;
    (0..frame_count)
        .map(|j| clip_scores[(j / FRAMES_PER_CLIP).min(last)])
        .collect()
}

// ── Synthetic dataset ────────────────────────────────────────────────────────

/// Parameters of the synthetic weakly-labeled dataset generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Inclusive range for the per-video clip count.
    pub clip_count_range: (usize, usize),
    /// Fraction of an abnormal video's clips that are anomalous, placed
    /// contiguously; in (0, 1].
    pub anomaly_span_fraction: f64,
    /// Euclidean distance between class feature centers, in units of the
    /// per-coordinate noise scale.
    pub class_separation: f64,
    /// Probability a video's stored label is flipped (frame truth untouched).
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        if self.n_normal == 0 || self.n_abnormal == 0 {
            return Err(Error::Invalid(
                "need at least one normal and one abnormal video".into(),
            ));
        }
        let (lo, hi) = self.clip_count_range;
        if lo == 0 || hi < lo {
            return Err(Error::Invalid(format!(
                "bad clip_count_range [{lo}, {hi}]"
            )));
        }
        if !(self.anomaly_span_fraction > 0.0 && self.anomaly_span_fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "anomaly_span_fraction must be in (0, 1], got {}",
                self.anomaly_span_fraction
            )));
        }
        if self.class_separation < 0.0 || !self.class_separation.is_finite() {
            return Err(Error::Invalid(format!(
                "class_separation must be finite and >= 0, got {}",
                self.class_separation
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Invalid(format!(
                "label_noise_rate must be in [0, 1), got {}",
                self.label_noise_rate
            )));
        }
        Ok(())
    }
}

/// Generates a synthetic dataset. Normal clips draw features from an
/// isotropic unit Gaussian around one center; each abnormal video carries a
/// contiguous span of `ceil(anomaly_span_fraction · t)` clips drawn around a
/// second center `class_separation` away. Frame truth marks the 16-frame
/// blocks of anomalous clips; `frame_count = 16·t`. Deterministic per seed.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<FeatureBag>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f64, 1.0).unwrap();
    let clip_dist = Uniform::new_inclusive(spec.clip_count_range.0, spec.clip_count_range.1);
    // Unit direction spread over all coordinates; centers sit
    // class_separation apart in Euclidean distance.
    let shift = spec.class_separation / (spec.feature_dim as f64).sqrt();

    let mut bags = Vec::with_capacity(spec.n_normal + spec.n_abnormal);
    for idx in 0..spec.n_normal + spec.n_abnormal {
        let abnormal = idx >= spec.n_normal;
        let video_id = if abnormal {
            format!("abnormal_{:04}", idx - spec.n_normal)
        } else {
            format!("normal_{idx:04}")
        };
        let t = clip_dist.sample(&mut rng);
        let (span_start, span_len) = if abnormal {
            let span_len = ((spec.anomaly_span_fraction * t as f64).ceil() as usize)
                .clamp(1, t);
            let span_start = rng.gen_range(0..=t - span_len);
            (span_start, span_len)
        } else {
            (0, 0)
        };
        let mut features = Array2::<f32>::zeros((spec.feature_dim, t));
        for clip in 0..t {
            let anomalous = abnormal && clip >= span_start && clip < span_start + span_len;
            let mean = if anomalous { shift } else { 0.0 };
            for feat in 0..spec.feature_dim {
                features[[feat, clip]] = (mean + noise.sample(&mut rng)) as f32;
            }
        }
        let frame_count = FRAMES_PER_CLIP * t;
        let mut truth = vec![0u8; frame_count];
        for clip in span_start..span_start + span_len {
            truth[clip * FRAMES_PER_CLIP..(clip + 1) * FRAMES_PER_CLIP].fill(1);
        }
        let mut label = u8::from(abnormal);
        if rng.gen::<f64>() < spec.label_noise_rate {
            label = 1 - label;
        }
        bags.push(FeatureBag {
            video_id,
            features,
            label: Some(label),
            frame_count,
            frame_truth: Some(truth),
        });
    }
    Ok(bags)
}
