//! Subcommand implementations. Every command validates all inputs and
//! computes its full result before writing any output file, then prints a
//! single JSON document on standard output (`curate` precedes it with one
//! report line per record).

use crate::config::ToolConfig;
use crate::CliError;
use serde::Serialize;
use shotkit::attention::{block_forward_cached, ShotTransformer};
use shotkit::camera::{
    load_trajectory, plucker_map, plucker_map_with, CameraPose, GridSampling,
};
use shotkit::conditioning::{seeded_uniform, ConvBranch, MlpBranch, EXTRINSIC_DIM};
use shotkit::curation::{
    apply_filters, dataset_stats, load_captions, load_records, save_reports, summarize_reports,
    CurationSummary, CurationThresholds, DatasetStats, FilterReport, HierarchicalCaption,
};
use shotkit::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use shotkit::mask::{
    build_mask, load_layout, mask_blocks, mask_stats, mask_stats_with_layout, save_mask_pgm,
    BlockFile, MaskStats, TokenLayout,
};
use shotkit::metrics::{
    consistency_scores, frechet_distance, load_consistency_input, load_logits, load_predictions,
    transition_confidence, type_accuracy, type_distribution, ConsistencyScores, FeatureSet,
    TransitionLikelihood, TypeBucket,
};
use shotkit::tensor::write_tensor_file;
use shotkit::Tensor;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Analytic gradients must stay within this relative error of the
/// finite-difference reference for `gradcheck` to exit successfully.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Offsets added to the model seed when synthesizing demo inputs, far from
/// the per-layer and per-branch offsets used inside the transformer.
const DEMO_Z_SEED_OFFSET: u64 = 40001;
const DEMO_TEXT_SEED_OFFSET: u64 = 40002;

fn print_json<T: Serialize>(value: &T) {
    let doc = serde_json::to_string(value).expect("output serialization cannot fail");
    println!("{doc}");
}

/// Prefixes a failure with the file it concerns.
fn locate<T, E: Into<CliError>>(result: Result<T, E>, path: &Path) -> Result<T, CliError> {
    result.map_err(|e| match e.into() {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
    })
}

// --- plucker --------------------------------------------------------------

#[derive(Serialize)]
struct PluckerSummary {
    frames: usize,
    grid: [usize; 2],
    sampling: GridSampling,
    out: String,
}

/// Grid argument in `HxW` form, for example `4x4` or `8x12`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    let err = || CliError::Validation(format!("grid must look like 4x4, got \"{s}\""));
    if parts.len() != 2 {
        return Err(err());
    }
    let h: usize = parts[0].parse().map_err(|_| err())?;
    let w: usize = parts[1].parse().map_err(|_| err())?;
    if h == 0 || w == 0 {
        return Err(err());
    }
    Ok((h, w))
}

pub fn run_plucker(
    config: &ToolConfig,
    trajectory: &Path,
    grid: &str,
    out: &Path,
    sampling: Option<GridSampling>,
) -> Result<(), CliError> {
    let (h, w) = parse_grid(grid)?;
    let poses = locate(load_trajectory(trajectory), trajectory)?;
    if poses.is_empty() {
        return Err(CliError::Validation("trajectory has no frames".to_string()));
    }
    let sampling = sampling.unwrap_or(config.grid_sampling);
    let maps = poses
        .iter()
        .map(|p| plucker_map_with(p, h, w, sampling).map(|m| m.to_tensor()))
        .collect::<Result<Vec<Tensor>, _>>()?;
    locate(write_tensor_file(out, &maps), out)?;
    print_json(&PluckerSummary {
        frames: maps.len(),
        grid: [h, w],
        sampling,
        out: out.display().to_string(),
    });
    Ok(())
}

// --- mask -----------------------------------------------------------------

#[derive(Serialize)]
struct MaskSummary {
    full_visibility_layers: usize,
    #[serde(flatten)]
    stats: MaskStats,
}

pub fn run_mask(
    layout_path: &Path,
    pgm: Option<&PathBuf>,
    blocks: Option<&PathBuf>,
) -> Result<(), CliError> {
    let (layout, full_visibility_layers) = locate(load_layout(layout_path), layout_path)?;
    let mask = build_mask(&layout);
    let stats = mask_stats_with_layout(&mask, &layout)?;
    if let Some(path) = pgm {
        locate(save_mask_pgm(path, &mask), path)?;
    }
    if let Some(path) = blocks {
        let file = BlockFile {
            n_tokens: layout.n_tokens(),
            blocks: mask_blocks(&layout),
        };
        let mut doc =
            serde_json::to_string_pretty(&file).expect("output serialization cannot fail");
        doc.push('\n');
        locate(std::fs::write(path, doc), path)?;
    }
    print_json(&MaskSummary {
        full_visibility_layers,
        stats,
    });
    Ok(())
}

// --- curate ---------------------------------------------------------------

#[derive(Serialize)]
struct CurateSummary {
    summary: CurationSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    stats: Option<DatasetStats>,
}

fn load_thresholds(config: &ToolConfig, arg: &str) -> Result<CurationThresholds, CliError> {
    if arg == "default" {
        return Ok(config.thresholds.clone());
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("thresholds {}: {e}", path.display())))?;
    let thresholds: CurationThresholds = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("thresholds {}: {e}", path.display())))?;
    Ok(thresholds)
}

pub fn run_curate(
    config: &ToolConfig,
    records_path: &Path,
    captions_path: Option<&PathBuf>,
    thresholds_arg: &str,
    reports_path: Option<&PathBuf>,
    with_stats: bool,
) -> Result<(), CliError> {
    let records = locate(load_records(records_path), records_path)?;
    let mut captions: BTreeMap<String, HierarchicalCaption> = BTreeMap::new();
    if let Some(path) = captions_path {
        for entry in locate(load_captions(path), path)? {
            if captions.insert(entry.clip_id.clone(), entry.caption).is_some() {
                return Err(CliError::Validation(format!(
                    "duplicate caption for clip {}",
                    entry.clip_id
                )));
            }
        }
    }
    let thresholds = load_thresholds(config, thresholds_arg)?;
    thresholds.validate()?;

    let reports: Vec<FilterReport> = records
        .iter()
        .map(|r| apply_filters(r, captions.get(&r.clip_id), &thresholds))
        .collect();
    let summary = summarize_reports(&reports);
    let stats = if with_stats {
        let kept: Vec<_> = records
            .iter()
            .zip(&reports)
            .filter(|(_, rep)| rep.failed_rules.is_empty())
            .map(|(r, _)| r.clone())
            .collect();
        let kept_captions: Vec<HierarchicalCaption> = kept
            .iter()
            .filter_map(|r| captions.get(&r.clip_id).cloned())
            .collect();
        let caption_arg = (!kept_captions.is_empty()).then_some(kept_captions.as_slice());
        Some(dataset_stats(&kept, caption_arg, &config.stats)?)
    } else {
        None
    };

    if let Some(path) = reports_path {
        locate(save_reports(path, &reports), path)?;
    }
    for report in &reports {
        print_json(report);
    }
    print_json(&CurateSummary { summary, stats });
    Ok(())
}

// --- metrics --------------------------------------------------------------

#[derive(Serialize)]
struct ClipConfidence {
    clip_id: String,
    confidence: f64,
}

#[derive(Serialize)]
struct ConfidenceDoc {
    per_clip: Vec<ClipConfidence>,
    mean: f64,
}

pub fn run_metrics_confidence(logits_path: &Path) -> Result<(), CliError> {
    let records = locate(load_logits(logits_path), logits_path)?;
    if records.is_empty() {
        return Err(CliError::Validation("logit file has no records".to_string()));
    }
    let mut per_clip = Vec::with_capacity(records.len());
    for record in records {
        let likelihood = TransitionLikelihood::new(record.d)
            .map_err(|e| CliError::Validation(format!("clip {}: {e}", record.clip_id)))?;
        per_clip.push(ClipConfidence {
            clip_id: record.clip_id,
            confidence: transition_confidence(&likelihood)?,
        });
    }
    let mean = per_clip.iter().map(|c| c.confidence).sum::<f64>() / per_clip.len() as f64;
    print_json(&ConfidenceDoc { per_clip, mean });
    Ok(())
}

#[derive(Serialize)]
struct TypesDoc {
    count: usize,
    accuracy: f64,
    distribution: Vec<TypeBucket>,
}

pub fn run_metrics_types(predictions_path: &Path) -> Result<(), CliError> {
    let preds = locate(load_predictions(predictions_path), predictions_path)?;
    let accuracy = type_accuracy(&preds)?;
    let distribution = type_distribution(&preds)?;
    print_json(&TypesDoc {
        count: preds.len(),
        accuracy,
        distribution,
    });
    Ok(())
}

pub fn run_metrics_consistency(input_path: &Path) -> Result<(), CliError> {
    let input = locate(load_consistency_input(input_path), input_path)?;
    let scores: ConsistencyScores = consistency_scores(&input)?;
    print_json(&scores);
    Ok(())
}

#[derive(Serialize)]
struct FvdDoc {
    n_a: usize,
    n_b: usize,
    dim: usize,
    frechet_distance: f64,
}

pub fn run_metrics_fvd(features_a: &Path, features_b: &Path) -> Result<(), CliError> {
    let a = locate(FeatureSet::load(features_a), features_a)?;
    let b = locate(FeatureSet::load(features_b), features_b)?;
    let d = frechet_distance(&a, &b)?;
    print_json(&FvdDoc {
        n_a: a.n(),
        n_b: b.n(),
        dim: a.dim(),
        frechet_distance: d,
    });
    Ok(())
}

// --- demo-forward ---------------------------------------------------------

#[derive(Serialize)]
struct DemoResults {
    seed: u64,
    d_model: usize,
    n_heads: usize,
    layers: usize,
    full_visibility_layers: usize,
    n_tokens: usize,
    out_shape: Vec<usize>,
    mask_densities: Vec<f64>,
    out: String,
}

/// Splits a whole-video trajectory into per-shot pose runs, requiring the
/// frame indices to cover exactly `0..frames`.
fn split_poses_by_shot(
    layout: &TokenLayout,
    mut poses: Vec<CameraPose>,
) -> Result<Vec<Vec<CameraPose>>, CliError> {
    if poses.len() != layout.frames() {
        return Err(CliError::Validation(format!(
            "trajectory has {} frames but the layout expects {}",
            poses.len(),
            layout.frames()
        )));
    }
    poses.sort_by_key(|p| p.frame_index);
    for (i, pose) in poses.iter().enumerate() {
        if pose.frame_index as usize != i {
            return Err(CliError::Validation(format!(
                "trajectory must cover frame indices 0..{} exactly, missing {i}",
                layout.frames()
            )));
        }
    }
    let mut per_shot = Vec::with_capacity(layout.shots().len());
    let mut rest = poses;
    for shot in layout.shots() {
        let tail = rest.split_off(shot.frame_end - shot.frame_start);
        per_shot.push(rest);
        rest = tail;
    }
    Ok(per_shot)
}

pub fn run_demo_forward(
    config: &ToolConfig,
    layout_path: &Path,
    trajectory_path: &Path,
    out: &Path,
    results_path: Option<&PathBuf>,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let seed = config.require_seed(seed_flag)?;
    let (layout, full_visibility_layers) = locate(load_layout(layout_path), layout_path)?;
    let poses = locate(load_trajectory(trajectory_path), trajectory_path)?;
    let per_shot = split_poses_by_shot(&layout, poses)?;

    let block_config = config.block_config(full_visibility_layers);
    let transformer = ShotTransformer::new(
        block_config,
        config.d_model,
        config.n_heads,
        config.hidden(),
        config.conv_kernel,
        seed,
    )?;
    let z = seeded_uniform(
        vec![layout.n_visual(), config.d_model],
        1.0,
        seed.wrapping_add(DEMO_Z_SEED_OFFSET),
    );
    let text = seeded_uniform(
        vec![layout.n_text(), config.d_model],
        1.0,
        seed.wrapping_add(DEMO_TEXT_SEED_OFFSET),
    );
    let cache = block_forward_cached(&transformer, &layout, &z, &text, &per_shot)?;
    let mask_densities: Vec<f64> = cache
        .masks
        .iter()
        .map(|m| mask_stats(m).density)
        .collect();

    let results = DemoResults {
        seed,
        d_model: config.d_model,
        n_heads: config.n_heads,
        layers: config.layers,
        full_visibility_layers,
        n_tokens: layout.n_tokens(),
        out_shape: cache.out.shape().to_vec(),
        mask_densities,
        out: out.display().to_string(),
    };
    locate(write_tensor_file(out, std::slice::from_ref(&cache.out)), out)?;
    if let Some(path) = results_path {
        let mut doc =
            serde_json::to_string_pretty(&results).expect("output serialization cannot fail");
        doc.push('\n');
        locate(std::fs::write(path, doc), path)?;
    }
    print_json(&results);
    Ok(())
}

// --- gradcheck ------------------------------------------------------------

#[derive(Serialize)]
struct GradcheckEntry {
    tensor: String,
    max_relative_error: f64,
}

#[derive(Serialize)]
struct GradcheckDoc {
    seed: u64,
    step: f64,
    threshold: f64,
    checks: Vec<GradcheckEntry>,
    max_relative_error: f64,
    pass: bool,
}

/// Finite-difference reference for one parameter tensor: perturb entries of
/// tensor `which` inside `tensors` and re-evaluate the loss.
fn fd_for_tensor(
    tensors: &[Tensor],
    which: usize,
    loss: &mut dyn FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    let mut params = tensors[which].data().to_vec();
    central_difference(&mut params, DEFAULT_STEP, |p| {
        let mut modified = tensors.to_vec();
        modified[which] = Tensor::new(tensors[which].shape().to_vec(), p.to_vec())
            .expect("perturbed tensor keeps its shape");
        loss(&modified)
    })
}

fn check_tensors(
    label: &str,
    names: &[&str],
    tensors: &[Tensor],
    analytic: &[Tensor],
    loss: &mut dyn FnMut(&[Tensor]) -> f64,
    checks: &mut Vec<GradcheckEntry>,
) {
    for (i, name) in names.iter().enumerate() {
        let numeric = fd_for_tensor(tensors, i, loss);
        checks.push(GradcheckEntry {
            tensor: format!("{label}.{name}"),
            max_relative_error: max_relative_error(analytic[i].data(), &numeric),
        });
    }
}

fn mlp_checks(seed: u64, checks: &mut Vec<GradcheckEntry>) -> Result<(), CliError> {
    let branch = MlpBranch::random_all(8, 16, seed)?;
    let x_tensor = seeded_uniform(vec![EXTRINSIC_DIM], 1.0, seed.wrapping_add(1));
    let mut x = [0.0; EXTRINSIC_DIM];
    x.copy_from_slice(x_tensor.data());

    let out = branch.forward(&x);
    let grads = branch.backward(&x, out.data());
    let analytic = [grads.w1, grads.b1, grads.w2, grads.b2];
    let tensors = branch.to_tensors();
    let mut loss = |ts: &[Tensor]| {
        let b = MlpBranch::from_tensors(ts.to_vec()).expect("tensor shapes preserved");
        0.5 * b.forward(&x).data().iter().map(|v| v * v).sum::<f64>()
    };
    check_tensors(
        "mlp",
        &["w1", "b1", "w2", "b2"],
        &tensors,
        &analytic,
        &mut loss,
        checks,
    );
    Ok(())
}

fn conv_checks(seed: u64, checks: &mut Vec<GradcheckEntry>) -> Result<(), CliError> {
    let branch = ConvBranch::new(8, 2, seed.wrapping_add(2))?;
    let pose = CameraPose {
        intrinsics: shotkit::camera::CameraIntrinsics::new(32.0, 32.0, 16.0, 12.0, 32, 24)?,
        extrinsics: shotkit::camera::CameraExtrinsics::identity(),
        frame_index: 0,
    };
    let map = plucker_map(&pose, 4, 4)?;

    let out = branch.forward(&map)?;
    let grads = branch.backward(&map, &out)?;
    let analytic = [grads.weight, grads.bias];
    let tensors = branch.to_tensors();
    let mut loss = |ts: &[Tensor]| {
        let b = ConvBranch::from_tensors(ts.to_vec()).expect("tensor shapes preserved");
        let y = b.forward(&map).expect("map divisible by kernel");
        0.5 * y.data().iter().map(|v| v * v).sum::<f64>()
    };
    check_tensors(
        "conv",
        &["weight", "bias"],
        &tensors,
        &analytic,
        &mut loss,
        checks,
    );
    Ok(())
}

fn attention_checks(seed: u64, checks: &mut Vec<GradcheckEntry>) -> Result<(), CliError> {
    use shotkit::attention::{masked_attention_backward, masked_attention_cached, AttentionParams};
    use shotkit::mask::ShotSpec;

    let params = AttentionParams::new(8, 2, seed.wrapping_add(3))?;
    // Two single-frame shots give the mask real structure.
    let layout = TokenLayout::new(
        2,
        1,
        2,
        vec![
            ShotSpec {
                shot_id: 0,
                frame_start: 0,
                frame_end: 1,
                local_text_start: 1,
                local_text_end: 2,
            },
            ShotSpec {
                shot_id: 1,
                frame_start: 1,
                frame_end: 2,
                local_text_start: 2,
                local_text_end: 3,
            },
        ],
        0,
        1,
    )?;
    let mask = build_mask(&layout);
    let x = seeded_uniform(vec![layout.n_tokens(), 8], 1.0, seed.wrapping_add(4));

    let cache = masked_attention_cached(&params, &x, &mask)?;
    let mut grads = params.zero_gradients();
    masked_attention_backward(&params, &cache, &mask, &cache.out, &mut grads);
    let analytic = [
        grads.wq, grads.bq, grads.wk, grads.bk, grads.wv, grads.bv, grads.wo, grads.bo,
    ];
    let tensors = params.to_tensors();
    let mut loss = |ts: &[Tensor]| {
        let p = AttentionParams::from_tensors(2, ts.to_vec()).expect("tensor shapes preserved");
        let y = shotkit::attention::masked_attention(&p, &x, &mask)
            .expect("mask matches input width");
        0.5 * y.data().iter().map(|v| v * v).sum::<f64>()
    };
    check_tensors(
        "attention",
        &["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"],
        &tensors,
        &analytic,
        &mut loss,
        checks,
    );
    Ok(())
}

pub fn run_gradcheck(config: &ToolConfig, seed_flag: Option<u64>) -> Result<(), CliError> {
    let seed = config.require_seed(seed_flag)?;
    let mut checks = Vec::new();
    mlp_checks(seed, &mut checks)?;
    conv_checks(seed, &mut checks)?;
    attention_checks(seed, &mut checks)?;
    let max = checks
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    let pass = max < GRADCHECK_THRESHOLD;
    print_json(&GradcheckDoc {
        seed,
        step: DEFAULT_STEP,
        threshold: GRADCHECK_THRESHOLD,
        checks,
        max_relative_error: max,
        pass,
    });
    if pass {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "gradient check failed: max relative error {max:.3e} at threshold {GRADCHECK_THRESHOLD:.0e}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use shotkit::camera::{CameraExtrinsics, CameraIntrinsics};
    use shotkit::mask::ShotSpec;

    #[test]
    fn grid_argument_accepts_hxw_and_rejects_the_rest() {
        assert_eq!(parse_grid("4x4").unwrap(), (4, 4));
        assert_eq!(parse_grid("8x12").unwrap(), (8, 12));
        for bad in ["4", "4x", "x4", "0x4", "4x0", "4x4x4", "axb", "4X4"] {
            assert!(parse_grid(bad).is_err(), "{bad} should be rejected");
        }
    }

    fn pose(frame_index: u32) -> CameraPose {
        CameraPose {
            intrinsics: CameraIntrinsics::new(32.0, 32.0, 16.0, 12.0, 32, 24).unwrap(),
            extrinsics: CameraExtrinsics::identity(),
            frame_index,
        }
    }

    fn two_shot_layout() -> TokenLayout {
        TokenLayout::new(
            3,
            1,
            1,
            vec![
                ShotSpec {
                    shot_id: 0,
                    frame_start: 0,
                    frame_end: 1,
                    local_text_start: 0,
                    local_text_end: 0,
                },
                ShotSpec {
                    shot_id: 1,
                    frame_start: 1,
                    frame_end: 3,
                    local_text_start: 0,
                    local_text_end: 0,
                },
            ],
            0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn poses_split_per_shot_after_sorting_by_frame() {
        let layout = two_shot_layout();
        let shuffled = vec![pose(2), pose(0), pose(1)];
        let per_shot = split_poses_by_shot(&layout, shuffled).unwrap();
        assert_eq!(per_shot.len(), 2);
        assert_eq!(per_shot[0].iter().map(|p| p.frame_index).collect::<Vec<_>>(), [0]);
        assert_eq!(per_shot[1].iter().map(|p| p.frame_index).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn pose_splitting_requires_exact_frame_coverage() {
        let layout = two_shot_layout();
        assert!(split_poses_by_shot(&layout, vec![pose(0), pose(1)]).is_err());
        assert!(split_poses_by_shot(&layout, vec![pose(0), pose(1), pose(3)]).is_err());
        assert!(split_poses_by_shot(&layout, vec![pose(0), pose(1), pose(1)]).is_err());
    }
}
