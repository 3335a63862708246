//! Clip curation: threshold filters, hierarchical caption validation,
//! dataset statistics, and the seeded real-to-synthetic mixing sampler.
//!
//! Filter predicates operate on ingested scores; the upstream feature
//! extractors that produce them are out of scope. Every rule is evaluated
//! in a fixed order with no short-circuiting, and the keep side of every
//! comparison is inclusive, so a record sitting exactly on a threshold is
//! kept.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// The four transition categories a caption may declare.
pub const TRANSITION_TYPES: [&str; 4] =
    ["shot_reverse_shot", "cut_in", "cut_out", "multi_angle"];

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("record {clip_id}: {message}")]
    InvalidRecord { clip_id: String, message: String },
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("{0} must be nonempty")]
    EmptyInput(&'static str),
    #[error("invalid sampler setup: {0}")]
    InvalidSampler(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a clip came from filmed footage or a synthesis pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Real,
    Synthetic,
}

/// One curated clip with the scores the filter rules consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub duration_seconds: f64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub shot_count: u32,
    pub aesthetic_score: f64,
    pub boundary_aesthetic_score: f64,
    pub first_last_frame_similarity: f64,
    pub stitch_similarity: f64,
    pub clip_pair_similarity: f64,
    pub vlm_coherence_pass: bool,
    pub source_tag: SourceTag,
}

impl ClipRecord {
    /// Structural validity, separate from the filter verdict: a malformed
    /// record is a load error, never a drop.
    pub fn validate(&self) -> Result<(), CurationError> {
        let fail = |message: String| {
            Err(CurationError::InvalidRecord {
                clip_id: self.clip_id.clone(),
                message,
            })
        };
        if !(self.duration_seconds > 0.0) || !self.duration_seconds.is_finite() {
            return fail(format!(
                "duration must be positive and finite, got {}",
                self.duration_seconds
            ));
        }
        if self.shot_count < 1 {
            return fail("shot_count must be at least 1".into());
        }
        for (name, v) in [
            ("first_last_frame_similarity", self.first_last_frame_similarity),
            ("stitch_similarity", self.stitch_similarity),
            ("clip_pair_similarity", self.clip_pair_similarity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("aesthetic_score", self.aesthetic_score),
            ("boundary_aesthetic_score", self.boundary_aesthetic_score),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-shot caption content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotCaption {
    pub content: String,
    pub cinematography: String,
}

/// Hierarchical caption: global subject and narrative, per-shot detail, and
/// the transition annotation.
///
/// `transition_type` is kept as raw text so an unknown value (say, "fade")
/// surfaces as a schema violation rather than a parse failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalCaption {
    pub subject: String,
    pub overall: String,
    pub shots: Vec<ShotCaption>,
    pub transition_type: String,
    pub transition_description: String,
}

impl HierarchicalCaption {
    pub fn transition_type_is_valid(&self) -> bool {
        TRANSITION_TYPES.contains(&self.transition_type.as_str())
    }
}

/// One caption line in a captions file, keyed to its clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub clip_id: String,
    pub caption: HierarchicalCaption,
}

/// One schema violation of a caption against its clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaptionViolation {
    pub field: String,
    pub message: String,
}

/// Schema check. Violations are data in the return value, not errors.
pub fn validate_caption(
    caption: &HierarchicalCaption,
    shot_count: u32,
) -> Vec<CaptionViolation> {
    let mut violations = Vec::new();
    let mut require = |field: &str, value: &str| {
        if value.is_empty() {
            violations.push(CaptionViolation {
                field: field.to_string(),
                message: "must be nonempty".to_string(),
            });
        }
    };
    require("subject", &caption.subject);
    require("overall", &caption.overall);
    require("transition_description", &caption.transition_description);
    for (i, s) in caption.shots.iter().enumerate() {
        require(&format!("shots[{i}].content"), &s.content);
        require(&format!("shots[{i}].cinematography"), &s.cinematography);
    }
    if caption.shots.len() != shot_count as usize {
        violations.push(CaptionViolation {
            field: "shots".to_string(),
            message: format!(
                "expected {shot_count} shot captions, found {}",
                caption.shots.len()
            ),
        });
    }
    if !caption.transition_type_is_valid() {
        violations.push(CaptionViolation {
            field: "transition_type".to_string(),
            message: format!(
                "\"{}\" is not one of {}",
                caption.transition_type,
                TRANSITION_TYPES.join(", ")
            ),
        });
    }
    violations
}

/// Filter thresholds. Defaults reproduce the published pipeline settings.
///
/// `segmentation` applies upstream of record creation (shot-boundary
/// proposal by an external detector) and is carried for provenance only; no
/// predicate here consumes it. The aesthetic minima default to 0 on the
/// declared 0 to `aesthetic_scale` scale, since only the criterion, not the
/// cutoff, is published.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationThresholds {
    pub segmentation: f64,
    pub first_last_similarity_min: f64,
    pub stitching: f64,
    pub pair_similarity_max: f64,
    pub duration_min: f64,
    pub duration_max: f64,
    pub required_shot_count: u32,
    pub aesthetic_min: f64,
    pub boundary_aesthetic_min: f64,
    pub aesthetic_scale: f64,
}

impl Default for CurationThresholds {
    fn default() -> Self {
        Self {
            segmentation: 0.45,
            first_last_similarity_min: 0.90,
            stitching: 0.65,
            pair_similarity_max: 0.95,
            duration_min: 5.0,
            duration_max: 12.0,
            required_shot_count: 2,
            aesthetic_min: 0.0,
            boundary_aesthetic_min: 0.0,
            aesthetic_scale: 10.0,
        }
    }
}

impl CurationThresholds {
    pub fn validate(&self) -> Result<(), CurationError> {
        if !(self.duration_min < self.duration_max) {
            return Err(CurationError::InvalidThresholds(format!(
                "duration_min {} must be below duration_max {}",
                self.duration_min, self.duration_max
            )));
        }
        for (name, v) in [
            ("segmentation", self.segmentation),
            ("first_last_similarity_min", self.first_last_similarity_min),
            ("stitching", self.stitching),
            ("pair_similarity_max", self.pair_similarity_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CurationError::InvalidThresholds(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.aesthetic_scale > 0.0) {
            return Err(CurationError::InvalidThresholds(format!(
                "aesthetic_scale must be positive, got {}",
                self.aesthetic_scale
            )));
        }
        Ok(())
    }
}

/// Keep or drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Drop,
}

/// One failed rule with what was measured against what bound.
///
/// Boolean rules encode pass/fail as 1/0 against a threshold of 1; the
/// caption rule reports its violation count against 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRule {
    pub rule: String,
    pub measured: f64,
    pub threshold: f64,
}

/// Filter outcome for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub clip_id: String,
    pub verdict: Verdict,
    pub failed_rules: Vec<FailedRule>,
}

/// All filter rules against one record, evaluated in a fixed order with
/// every failure recorded. The keep side of each comparison is inclusive.
pub fn apply_filters(
    record: &ClipRecord,
    caption: Option<&HierarchicalCaption>,
    thresholds: &CurationThresholds,
) -> FilterReport {
    let mut failed = Vec::new();
    let mut rule = |name: &str, ok: bool, measured: f64, threshold: f64| {
        if !ok {
            failed.push(FailedRule {
                rule: name.to_string(),
                measured,
                threshold,
            });
        }
    };
    let t = thresholds;
    rule(
        "first_last_similarity_min",
        record.first_last_frame_similarity >= t.first_last_similarity_min,
        record.first_last_frame_similarity,
        t.first_last_similarity_min,
    );
    rule(
        "stitching",
        record.stitch_similarity >= t.stitching,
        record.stitch_similarity,
        t.stitching,
    );
    rule(
        "duration_min",
        record.duration_seconds >= t.duration_min,
        record.duration_seconds,
        t.duration_min,
    );
    rule(
        "duration_max",
        record.duration_seconds <= t.duration_max,
        record.duration_seconds,
        t.duration_max,
    );
    rule(
        "required_shot_count",
        record.shot_count == t.required_shot_count,
        record.shot_count as f64,
        t.required_shot_count as f64,
    );
    rule(
        "aesthetic_min",
        record.aesthetic_score >= t.aesthetic_min,
        record.aesthetic_score,
        t.aesthetic_min,
    );
    rule(
        "boundary_aesthetic_min",
        record.boundary_aesthetic_score >= t.boundary_aesthetic_min,
        record.boundary_aesthetic_score,
        t.boundary_aesthetic_min,
    );
    rule(
        "pair_similarity_max",
        record.clip_pair_similarity <= t.pair_similarity_max,
        record.clip_pair_similarity,
        t.pair_similarity_max,
    );
    rule(
        "vlm_coherence",
        record.vlm_coherence_pass,
        if record.vlm_coherence_pass { 1.0 } else { 0.0 },
        1.0,
    );
    if let Some(caption) = caption {
        let violations = validate_caption(caption, record.shot_count);
        rule(
            "caption_schema",
            violations.is_empty(),
            violations.len() as f64,
            0.0,
        );
    }
    FilterReport {
        clip_id: record.clip_id.clone(),
        verdict: if failed.is_empty() {
            Verdict::Keep
        } else {
            Verdict::Drop
        },
        failed_rules: failed,
    }
}

/// Aggregate of a batch of filter reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurationSummary {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failures_by_rule: BTreeMap<String, usize>,
}

pub fn summarize_reports(reports: &[FilterReport]) -> CurationSummary {
    let mut failures_by_rule = BTreeMap::new();
    let mut kept = 0;
    for r in reports {
        if r.verdict == Verdict::Keep {
            kept += 1;
        }
        for f in &r.failed_rules {
            *failures_by_rule.entry(f.rule.clone()).or_default() += 1;
        }
    }
    CurationSummary {
        total: reports.len(),
        kept,
        dropped: reports.len() - kept,
        failures_by_rule,
    }
}

// --- dataset statistics ---------------------------------------------------

/// Histogram bin edges for the three numeric summaries. Consecutive edges
/// bound half-open bins; the final bin includes its upper edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub duration_edges: Vec<f64>,
    pub aesthetic_edges: Vec<f64>,
    pub similarity_edges: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            duration_edges: (5..=12).map(f64::from).collect(),
            aesthetic_edges: (0..=10).map(f64::from).collect(),
            similarity_edges: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

/// Counts per bin plus how many values fell outside the edges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

fn histogram(values: &[f64], edges: &[f64]) -> Histogram {
    let bins = edges.len().saturating_sub(1);
    let mut counts = vec![0usize; bins];
    let mut below = 0;
    let mut above = 0;
    for &v in values {
        if bins == 0 || v < edges[0] {
            below += 1;
            continue;
        }
        if v > edges[bins] {
            above += 1;
            continue;
        }
        let mut placed = false;
        for b in 0..bins {
            let last = b == bins - 1;
            if v < edges[b + 1] || (last && v <= edges[b + 1]) {
                counts[b] += 1;
                placed = true;
                break;
            }
        }
        debug_assert!(placed, "value {v} fell through edges {edges:?}");
    }
    Histogram {
        edges: edges.to_vec(),
        counts,
        below,
        above,
    }
}

/// Mean, minimum, and maximum with a histogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

/// Values are sorted by total order before the sum, so the result is
/// invariant under permutation of the input records.
fn field_stats(values: &[f64], edges: &[f64]) -> FieldStats {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    FieldStats {
        mean: sum / sorted.len() as f64,
        min: sorted[0],
        max: *sorted.last().expect("caller checks nonempty"),
        histogram: histogram(values, edges),
    }
}

/// Deterministic dataset summary of kept records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub count: usize,
    pub duration: FieldStats,
    pub aesthetic: FieldStats,
    pub pair_similarity: FieldStats,
    /// Present when captions were supplied; counts raw transition strings.
    pub transition_types: Option<BTreeMap<String, usize>>,
}

pub fn dataset_stats(
    records: &[ClipRecord],
    captions: Option<&[HierarchicalCaption]>,
    config: &StatsConfig,
) -> Result<DatasetStats, CurationError> {
    if records.is_empty() {
        return Err(CurationError::EmptyInput("records"));
    }
    let durations: Vec<f64> = records.iter().map(|r| r.duration_seconds).collect();
    let aesthetics: Vec<f64> = records.iter().map(|r| r.aesthetic_score).collect();
    let pairs: Vec<f64> = records.iter().map(|r| r.clip_pair_similarity).collect();
    let transition_types = captions.map(|caps| {
        let mut counts = BTreeMap::new();
        for c in caps {
            *counts.entry(c.transition_type.clone()).or_default() += 1;
        }
        counts
    });
    Ok(DatasetStats {
        count: records.len(),
        duration: field_stats(&durations, &config.duration_edges),
        aesthetic: field_stats(&aesthetics, &config.aesthetic_edges),
        pair_similarity: field_stats(&pairs, &config.similarity_edges),
        transition_types,
    })
}

// --- mixing sampler -------------------------------------------------------

/// Seeded infinite stream of pool draws at a fixed real-to-synthetic ratio.
///
/// Each draw first picks the pool (an integer draw in `[0, real + synthetic)`
/// compared against the real weight), then an index uniformly with
/// replacement within the pool. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct MixingSampler {
    rng: ChaCha8Rng,
    real_len: usize,
    synthetic_len: usize,
    real_weight: u32,
    total_weight: u32,
}

impl MixingSampler {
    /// `ratio` is `(real, synthetic)`; a component may be zero but not both.
    pub fn new(
        real_len: usize,
        synthetic_len: usize,
        ratio: (u32, u32),
        seed: u64,
    ) -> Result<Self, CurationError> {
        if real_len == 0 {
            return Err(CurationError::EmptyInput("real pool"));
        }
        if synthetic_len == 0 {
            return Err(CurationError::EmptyInput("synthetic pool"));
        }
        let (a, b) = ratio;
        let total = a.checked_add(b).filter(|&t| t > 0).ok_or_else(|| {
            CurationError::InvalidSampler(format!(
                "ratio {a}:{b} must have a positive, non-overflowing sum"
            ))
        })?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            real_len,
            synthetic_len,
            real_weight: a,
            total_weight: total,
        })
    }
}

impl Iterator for MixingSampler {
    type Item = (SourceTag, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let pick = self.rng.gen_range(0..self.total_weight);
        if pick < self.real_weight {
            Some((SourceTag::Real, self.rng.gen_range(0..self.real_len)))
        } else {
            Some((SourceTag::Synthetic, self.rng.gen_range(0..self.synthetic_len)))
        }
    }
}

// --- line-delimited JSON I/O ----------------------------------------------

fn read_jsonl<T: serde::de::DeserializeOwned, P: AsRef<Path>>(
    path: P,
) -> Result<Vec<T>, CurationError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| CurationError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize, P: AsRef<Path>>(path: P, items: &[T]) -> Result<(), CurationError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CurationError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load and structurally validate clip records.
pub fn load_records<P: AsRef<Path>>(path: P) -> Result<Vec<ClipRecord>, CurationError> {
    let records: Vec<ClipRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub fn save_records<P: AsRef<Path>>(path: P, records: &[ClipRecord]) -> Result<(), CurationError> {
    write_jsonl(path, records)
}

pub fn load_captions<P: AsRef<Path>>(path: P) -> Result<Vec<CaptionRecord>, CurationError> {
    read_jsonl(path)
}

pub fn save_captions<P: AsRef<Path>>(
    path: P,
    captions: &[CaptionRecord],
) -> Result<(), CurationError> {
    write_jsonl(path, captions)
}

pub fn save_reports<P: AsRef<Path>>(
    path: P,
    reports: &[FilterReport],
) -> Result<(), CurationError> {
    write_jsonl(path, reports)
}
