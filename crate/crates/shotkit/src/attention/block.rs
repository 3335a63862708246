//! Toy shot transformer: per-frame camera injection followed by a stack of
//! masked attention layers under the layer visibility schedule.

use super::core::{
    layer_backward, layer_forward, AttentionError, AttentionGradients, AttentionParams, LayerCache,
};
use crate::camera::{plucker_map, CameraPose, PluckerMap};
use crate::conditioning::{
    encode_extrinsic, encode_plucker, inject, ConvBranch, MlpBranch, EXTRINSIC_DIM,
};
use crate::mask::{build_mask, mask_for_layer, AttentionMask, TokenClass, TokenLayout};
use crate::tensor::Tensor;

/// Layer count, visibility schedule, and the ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub layers: usize,
    pub full_visibility_layers: usize,
    pub use_mask: bool,
    pub use_extrinsic_branch: bool,
    pub use_plucker_branch: bool,
    /// Enables the `x + attention(rms_norm(x))` layer variant.
    pub use_residual_norm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            full_visibility_layers: 2,
            use_mask: true,
            use_extrinsic_branch: true,
            use_plucker_branch: true,
            use_residual_norm: false,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.layers < 1 {
            return Err(AttentionError::InvalidDims(
                "at least one layer is required".into(),
            ));
        }
        if self.full_visibility_layers > self.layers {
            return Err(AttentionError::InvalidDims(format!(
                "full_visibility_layers {} exceeds layer count {}",
                self.full_visibility_layers, self.layers
            )));
        }
        Ok(())
    }
}

/// The toy model: a stack of attention layers plus both camera branches.
///
/// Branches for disabled toggles are still constructed so that flipping a
/// toggle never changes any other parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotTransformer {
    pub config: BlockConfig,
    pub layers: Vec<AttentionParams>,
    pub mlp: MlpBranch,
    pub conv: ConvBranch,
}

impl ShotTransformer {
    /// Seeded construction. Layer `l` derives its seed as `seed + l`; the
    /// branches use `seed + 1000` and `seed + 2000`.
    pub fn new(
        config: BlockConfig,
        d_model: usize,
        n_heads: usize,
        hidden: usize,
        conv_kernel: usize,
        seed: u64,
    ) -> Result<Self, AttentionError> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| AttentionParams::new(d_model, n_heads, seed.wrapping_add(l as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let mlp = MlpBranch::new(d_model, hidden, seed.wrapping_add(1000))?;
        let conv = ConvBranch::new(d_model, conv_kernel, seed.wrapping_add(2000))?;
        Ok(Self {
            config,
            layers,
            mlp,
            conv,
        })
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].d_model
    }
}

/// Everything produced by one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockForwardCache {
    /// Token matrix entering layer 0: text rows, then injected visual rows.
    pub x0: Tensor,
    /// Mask actually applied at each layer.
    pub masks: Vec<AttentionMask>,
    pub layers: Vec<LayerCache>,
    /// Per-frame flattened extrinsics (empty when the MLP branch is off).
    pub ext_inputs: Vec<[f64; EXTRINSIC_DIM]>,
    /// Per-frame Plücker maps (empty when the conv branch is off).
    pub maps: Vec<PluckerMap>,
    pub out: Tensor,
}

fn check_block_inputs(
    transformer: &ShotTransformer,
    layout: &TokenLayout,
    z: &Tensor,
    text: &Tensor,
    poses: &[Vec<CameraPose>],
) -> Result<(), AttentionError> {
    transformer.config.validate()?;
    let d = transformer.d_model();
    z.expect_shape(&[layout.n_visual(), d])
        .map_err(|e| AttentionError::ShapeMismatch(format!("visual tokens: {e}")))?;
    text.expect_shape(&[layout.n_text(), d])
        .map_err(|e| AttentionError::ShapeMismatch(format!("text tokens: {e}")))?;
    if poses.len() != layout.shots().len() {
        return Err(AttentionError::CountMismatch {
            what: "pose trajectories (one per shot)",
            expected: layout.shots().len(),
            got: poses.len(),
        });
    }
    for (i, (shot, traj)) in layout.shots().iter().zip(poses).enumerate() {
        let frames = shot.frame_end - shot.frame_start;
        if traj.len() != frames {
            return Err(AttentionError::ShapeMismatch(format!(
                "shot {i} spans {frames} frames but its trajectory has {} poses",
                traj.len()
            )));
        }
    }
    Ok(())
}

/// Camera injection and the layer stack, returning the full cache.
pub fn block_forward_cached(
    transformer: &ShotTransformer,
    layout: &TokenLayout,
    z: &Tensor,
    text: &Tensor,
    poses: &[Vec<CameraPose>],
) -> Result<BlockForwardCache, AttentionError> {
    check_block_inputs(transformer, layout, z, text, poses)?;
    let config = &transformer.config;
    let d = transformer.d_model();
    let ppf = layout.patches_per_frame();
    let k = transformer.conv.kernel;

    // Per-frame injection in global frame order.
    let mut x0 = Tensor::zeros(vec![layout.n_tokens(), d]);
    for t in 0..layout.n_text() {
        x0.row_mut(t).copy_from_slice(text.row(t));
    }
    let mut ext_inputs = Vec::new();
    let mut maps = Vec::new();
    let zero_ext = Tensor::zeros(vec![d]);
    let zero_plk = Tensor::zeros(vec![ppf, d]);
    for (shot_idx, shot) in layout.shots().iter().enumerate() {
        for (local_f, pose) in poses[shot_idx].iter().enumerate() {
            let frame = shot.frame_start + local_f;
            let c_ext = if config.use_extrinsic_branch {
                let flat = pose.extrinsics.flatten();
                ext_inputs.push(flat);
                encode_extrinsic(&transformer.mlp, &pose.extrinsics)
            } else {
                zero_ext.clone()
            };
            let c_plk = if config.use_plucker_branch {
                let map = plucker_map(pose, layout.patch_h() * k, layout.patch_w() * k)?;
                let grid = encode_plucker(&transformer.conv, &map)?;
                maps.push(map);
                Tensor::new(vec![ppf, d], grid.data().to_vec()).expect("patch grid flattens")
            } else {
                zero_plk.clone()
            };
            let mut z_frame = Tensor::zeros(vec![ppf, d]);
            for p in 0..ppf {
                z_frame.row_mut(p).copy_from_slice(z.row(frame * ppf + p));
            }
            let injected = inject(&z_frame, &c_ext, &c_plk)?;
            for p in 0..ppf {
                x0.row_mut(layout.n_text() + frame * ppf + p)
                    .copy_from_slice(injected.row(p));
            }
        }
    }

    // Layer stack under the visibility schedule.
    let n = layout.n_tokens();
    let base_mask = if config.use_mask {
        build_mask(layout)
    } else {
        AttentionMask::all_true(n)
    };
    let mut masks = Vec::with_capacity(config.layers);
    let mut layer_caches = Vec::with_capacity(config.layers);
    let mut x = x0.clone();
    for (l, params) in transformer.layers.iter().enumerate() {
        let mask = if config.use_mask {
            mask_for_layer(&base_mask, l, config.full_visibility_layers)
        } else {
            AttentionMask::all_true(n)
        };
        let cache = layer_forward(params, &x, &mask, config.use_residual_norm)?;
        x = cache.out.clone();
        masks.push(mask);
        layer_caches.push(cache);
    }

    Ok(BlockForwardCache {
        x0,
        masks,
        layers: layer_caches,
        ext_inputs,
        maps,
        out: x,
    })
}

/// Forward pass output only, shape `[n_tokens, d_model]`.
pub fn block_forward(
    transformer: &ShotTransformer,
    layout: &TokenLayout,
    z: &Tensor,
    text: &Tensor,
    poses: &[Vec<CameraPose>],
) -> Result<Tensor, AttentionError> {
    Ok(block_forward_cached(transformer, layout, z, text, poses)?.out)
}

/// Perturbs one non-first-frame visual token by `epsilon` on every channel
/// and reports the maximum absolute output change per token.
///
/// Frame-0 tokens are rejected: they are globally visible by design, so a
/// cross-shot isolation probe through them is meaningless.
pub fn leakage_probe(
    transformer: &ShotTransformer,
    layout: &TokenLayout,
    z: &Tensor,
    text: &Tensor,
    poses: &[Vec<CameraPose>],
    token: usize,
    epsilon: f64,
) -> Result<Vec<f64>, AttentionError> {
    if token >= layout.n_tokens() {
        return Err(AttentionError::PerturbIndex(format!(
            "token {token} out of range for {} tokens",
            layout.n_tokens()
        )));
    }
    match layout.classify(token) {
        TokenClass::Visual { frame, .. } if frame != 0 => {}
        TokenClass::Visual { .. } => {
            return Err(AttentionError::PerturbIndex(format!(
                "token {token} is in frame 0, which is globally visible by design"
            )))
        }
        _ => {
            return Err(AttentionError::PerturbIndex(format!(
                "token {token} is a text token; the probe perturbs visual tokens"
            )))
        }
    }
    let base = block_forward(transformer, layout, z, text, poses)?;
    let mut z_perturbed = z.clone();
    let row = token - layout.n_text();
    for v in z_perturbed.row_mut(row) {
        *v += epsilon;
    }
    let perturbed = block_forward(transformer, layout, &z_perturbed, text, poses)?;

    let d = transformer.d_model();
    let deltas = (0..layout.n_tokens())
        .map(|t| {
            (0..d)
                .map(|c| (perturbed.data()[t * d + c] - base.data()[t * d + c]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(deltas)
}

/// Mean squared error of the block output against `target`, minimized by
/// plain gradient descent over the attention layers and any enabled camera
/// branch. Returns the loss measured before each update.
///
/// Gradients flow through the frame-0 tokens like any others; a stop
/// gradient on the globally visible tokens would be the alternative.
pub fn train_demo(
    transformer: &mut ShotTransformer,
    layout: &TokenLayout,
    z: &Tensor,
    text: &Tensor,
    poses: &[Vec<CameraPose>],
    target: &Tensor,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>, AttentionError> {
    if steps < 1 {
        return Err(AttentionError::InvalidDims(
            "at least one training step is required".into(),
        ));
    }
    target
        .expect_shape(&[layout.n_tokens(), transformer.d_model()])
        .map_err(|e| AttentionError::ShapeMismatch(format!("target: {e}")))?;

    let d = transformer.d_model();
    let ppf = layout.patches_per_frame();
    let count = (layout.n_tokens() * d) as f64;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let cache = block_forward_cached(transformer, layout, z, text, poses)?;
        let loss = cache
            .out
            .data()
            .iter()
            .zip(target.data())
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / count;
        if !loss.is_finite() {
            return Err(AttentionError::NonFiniteLoss { step });
        }
        losses.push(loss);

        let mut d_x = Tensor::zeros(vec![layout.n_tokens(), d]);
        for i in 0..d_x.len() {
            d_x.data_mut()[i] = 2.0 * (cache.out.data()[i] - target.data()[i]) / count;
        }

        let mut layer_grads: Vec<AttentionGradients> = transformer
            .layers
            .iter()
            .map(|p| p.zero_gradients())
            .collect();
        for l in (0..transformer.layers.len()).rev() {
            d_x = layer_backward(
                &transformer.layers[l],
                &cache.layers[l],
                &cache.masks[l],
                &d_x,
                &mut layer_grads[l],
            );
        }

        // Branch gradients from the injection: the extrinsic feature is
        // broadcast over a frame's patches, the conv grid maps one-to-one.
        let mut mlp_grads = transformer.mlp.zero_gradients();
        let mut conv_grads = transformer.conv.zero_gradients();
        for frame in 0..layout.frames() {
            let rows = layout.n_text() + frame * ppf;
            if transformer.config.use_extrinsic_branch {
                let mut d_ext = vec![0.0; d];
                for p in 0..ppf {
                    for c in 0..d {
                        d_ext[c] += d_x.data()[(rows + p) * d + c];
                    }
                }
                mlp_grads.accumulate(&transformer.mlp.backward(&cache.ext_inputs[frame], &d_ext));
            }
            if transformer.config.use_plucker_branch {
                let upstream = Tensor::new(
                    vec![layout.patch_h(), layout.patch_w(), d],
                    d_x.data()[rows * d..(rows + ppf) * d].to_vec(),
                )
                .expect("frame slice matches patch grid");
                conv_grads.accumulate(&transformer.conv.backward(&cache.maps[frame], &upstream)?);
            }
        }

        for (params, grads) in transformer.layers.iter_mut().zip(&layer_grads) {
            params.apply_gradients(grads, learning_rate);
        }
        if transformer.config.use_extrinsic_branch {
            transformer.mlp.apply_gradients(&mlp_grads, learning_rate);
        }
        if transformer.config.use_plucker_branch {
            transformer.conv.apply_gradients(&conv_grads, learning_rate);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraExtrinsics, CameraIntrinsics};
    use crate::conditioning::seeded_uniform;
    use crate::mask::ShotSpec;
    use nalgebra::{Matrix3, Vector3};

    fn shot(
        shot_id: u32,
        frames: (usize, usize),
        text: (usize, usize),
    ) -> ShotSpec {
        ShotSpec {
            shot_id,
            frame_start: frames.0,
            frame_end: frames.1,
            local_text_start: text.0,
            local_text_end: text.1,
        }
    }

    fn pose_at(frame_index: u32, tx: f64) -> CameraPose {
        CameraPose {
            intrinsics: CameraIntrinsics::new(16.0, 16.0, 8.0, 8.0, 32, 32).unwrap(),
            extrinsics: CameraExtrinsics::new(
                Matrix3::identity(),
                Vector3::new(tx, 0.0, 0.1 * frame_index as f64),
            )
            .unwrap(),
            frame_index,
        }
    }

    fn trajectories(layout: &TokenLayout) -> Vec<Vec<CameraPose>> {
        layout
            .shots()
            .iter()
            .map(|s| {
                (s.frame_start..s.frame_end)
                    .map(|f| pose_at(f as u32, 0.2 * f as f64))
                    .collect()
            })
            .collect()
    }

    /// 2 shots x 2 frames x 2x2 patches, one local text token each, one
    /// global text token.
    fn two_shot_layout() -> TokenLayout {
        TokenLayout::new(
            4,
            2,
            2,
            vec![shot(0, (0, 2), (1, 2)), shot(1, (2, 4), (2, 3))],
            0,
            1,
        )
        .unwrap()
    }

    fn inputs(layout: &TokenLayout, d: usize) -> (Tensor, Tensor) {
        (
            seeded_uniform(vec![layout.n_visual(), d], 1.0, 101),
            seeded_uniform(vec![layout.n_text(), d], 1.0, 102),
        )
    }

    fn build(config: BlockConfig, d: usize, heads: usize, seed: u64) -> ShotTransformer {
        ShotTransformer::new(config, d, heads, 2 * d, 2, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = BlockConfig {
            layers: 1,
            full_visibility_layers: 2,
            ..BlockConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(BlockConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_query_single_layer_averages_values() {
        let config = BlockConfig {
            layers: 1,
            full_visibility_layers: 0,
            use_mask: false,
            use_extrinsic_branch: false,
            use_plucker_branch: false,
            use_residual_norm: false,
        };
        let mut t = build(config, 4, 2, 3);
        t.layers[0].wq = Tensor::zeros(vec![4, 4]);
        t.layers[0].bq = Tensor::zeros(vec![4]);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let out = block_forward(&t, &layout, &z, &text, &poses).unwrap();

        // Uniform attention averages the value vectors; every row then gets
        // the same output projection of that average.
        let n = layout.n_tokens();
        let p = &t.layers[0];
        let mut mean_v = vec![0.0; 4];
        let mut x0 = Tensor::zeros(vec![n, 4]);
        for tok in 0..layout.n_text() {
            x0.row_mut(tok).copy_from_slice(text.row(tok));
        }
        for v in 0..layout.n_visual() {
            x0.row_mut(layout.n_text() + v).copy_from_slice(z.row(v));
        }
        for tok in 0..n {
            for i in 0..4 {
                let mut acc = p.bv.data()[i];
                for j in 0..4 {
                    acc += p.wv.data()[i * 4 + j] * x0.row(tok)[j];
                }
                mean_v[i] += acc / n as f64;
            }
        }
        for tok in 0..n {
            for i in 0..4 {
                let mut expected = p.bo.data()[i];
                for j in 0..4 {
                    expected += p.wo.data()[i * 4 + j] * mean_v[j];
                }
                assert!((out.row(tok)[i] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_shot_mask_toggle_is_bitwise_noop() {
        let layout = TokenLayout::new(
            3,
            2,
            2,
            vec![shot(0, (0, 3), (1, 3))],
            0,
            1,
        )
        .unwrap();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let masked = build(
            BlockConfig {
                use_mask: true,
                ..BlockConfig::default()
            },
            4,
            2,
            7,
        );
        let unmasked = build(
            BlockConfig {
                use_mask: false,
                ..BlockConfig::default()
            },
            4,
            2,
            7,
        );
        let a = block_forward(&masked, &layout, &z, &text, &poses).unwrap();
        let b = block_forward(&unmasked, &layout, &z, &text, &poses).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn disabled_branches_equal_zero_branches_bitwise() {
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let off = build(
            BlockConfig {
                use_extrinsic_branch: false,
                use_plucker_branch: false,
                ..BlockConfig::default()
            },
            4,
            2,
            9,
        );
        let mut on = build(
            BlockConfig {
                use_extrinsic_branch: true,
                use_plucker_branch: true,
                ..BlockConfig::default()
            },
            4,
            2,
            9,
        );
        // A fresh MLP branch already outputs zero through its transfer
        // layer; zero the conv branch explicitly.
        on.conv = ConvBranch::zeros(4, 2).unwrap();
        let a = block_forward(&off, &layout, &z, &text, &poses).unwrap();
        let b = block_forward(&on, &layout, &z, &text, &poses).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn masked_leakage_is_structurally_zero() {
        // Single masked layer so the only cross-shot path would be direct
        // attention; global text still reads everything but shot-0 tokens
        // never read it back within one layer.
        let config = BlockConfig {
            layers: 1,
            full_visibility_layers: 0,
            use_mask: true,
            use_extrinsic_branch: true,
            use_plucker_branch: true,
            use_residual_norm: false,
        };
        let t = build(config, 4, 2, 11);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        // Perturb a shot-1 token in frame 3 (not frame 0).
        let token = layout.visual_token_index(3, 1, 1);
        let deltas = leakage_probe(&t, &layout, &z, &text, &poses, token, 0.5).unwrap();
        for tok in 0..layout.n_tokens() {
            match layout.classify(tok) {
                TokenClass::Visual { shot: 0, .. } | TokenClass::LocalText { shot: 0 } => {
                    assert_eq!(deltas[tok], 0.0, "token {tok} leaked");
                    assert_eq!(deltas[tok].to_bits(), 0.0_f64.to_bits());
                }
                _ => {}
            }
        }
        // The perturbed token itself must move.
        assert!(deltas[token] > 1e-8);
    }

    #[test]
    fn unmasked_leakage_is_nonzero() {
        let config = BlockConfig {
            layers: 1,
            full_visibility_layers: 0,
            use_mask: false,
            use_extrinsic_branch: true,
            use_plucker_branch: true,
            use_residual_norm: false,
        };
        let t = build(config, 4, 2, 13);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let token = layout.visual_token_index(3, 1, 1);
        let deltas = leakage_probe(&t, &layout, &z, &text, &poses, token, 0.5).unwrap();
        let max_shot0 = (0..layout.n_tokens())
            .filter(|&tok| matches!(layout.classify(tok), TokenClass::Visual { shot: 0, .. }))
            .map(|tok| deltas[tok])
            .fold(0.0, f64::max);
        assert!(max_shot0 > 1e-8);
    }

    #[test]
    fn zero_epsilon_means_zero_deltas() {
        let t = build(BlockConfig::default(), 4, 2, 15);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let token = layout.visual_token_index(2, 0, 0);
        let deltas = leakage_probe(&t, &layout, &z, &text, &poses, token, 0.0).unwrap();
        assert!(deltas.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn probe_rejects_frame0_and_text_tokens() {
        let t = build(BlockConfig::default(), 4, 2, 17);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let frame0 = layout.visual_token_index(0, 0, 0);
        assert!(matches!(
            leakage_probe(&t, &layout, &z, &text, &poses, frame0, 0.1),
            Err(AttentionError::PerturbIndex(_))
        ));
        assert!(leakage_probe(&t, &layout, &z, &text, &poses, 0, 0.1).is_err());
        assert!(leakage_probe(&t, &layout, &z, &text, &poses, 9999, 0.1).is_err());
    }

    #[test]
    fn pose_count_mismatch_rejected() {
        let t = build(BlockConfig::default(), 4, 2, 19);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let mut poses = trajectories(&layout);
        poses.pop();
        assert!(matches!(
            block_forward(&t, &layout, &z, &text, &poses),
            Err(AttentionError::CountMismatch { .. })
        ));
        let mut short = trajectories(&layout);
        short[1].pop();
        assert!(block_forward(&t, &layout, &z, &text, &short).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut t = build(BlockConfig::default(), 4, 2, 21);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let target = seeded_uniform(vec![layout.n_tokens(), 4], 1.0, 103);
        let trace = train_demo(&mut t, &layout, &z, &text, &poses, &target, 5, 0.0).unwrap();
        assert_eq!(trace.len(), 5);
        for l in &trace[1..] {
            assert_eq!(*l, trace[0]);
        }
    }

    #[test]
    fn one_parameter_training_matches_geometric_decay() {
        // With zero value and output weights and a single token, the output
        // is exactly the output bias, so the demo reduces to gradient
        // descent on (bo - y)² and the error contracts by (1 - 2·lr) each
        // step.
        let config = BlockConfig {
            layers: 1,
            full_visibility_layers: 0,
            use_mask: false,
            use_extrinsic_branch: false,
            use_plucker_branch: false,
            use_residual_norm: false,
        };
        let mut t = ShotTransformer::new(config, 1, 1, 1, 1, 23).unwrap();
        t.layers[0].wv = Tensor::zeros(vec![1, 1]);
        t.layers[0].bv = Tensor::zeros(vec![1]);
        t.layers[0].wo = Tensor::zeros(vec![1, 1]);
        let b0 = t.layers[0].bo.data()[0];
        let layout =
            TokenLayout::new(1, 1, 1, vec![shot(0, (0, 1), (0, 0))], 0, 0).unwrap();
        let z = Tensor::zeros(vec![1, 1]);
        let text = Tensor::zeros(vec![0, 1]);
        let poses = vec![vec![pose_at(0, 0.0)]];
        let y = 0.75;
        let target = Tensor::new(vec![1, 1], vec![y]).unwrap();
        let lr = 0.1;
        let trace = train_demo(&mut t, &layout, &z, &text, &poses, &target, 6, lr).unwrap();
        let contraction = 1.0 - 2.0 * lr;
        for (step, loss) in trace.iter().enumerate() {
            let err = (b0 - y) * contraction.powi(step as i32);
            assert!((loss - err * err).abs() < 1e-12, "step {step}");
        }
    }

    #[test]
    fn default_demo_reduces_loss() {
        let mut t = build(BlockConfig::default(), 8, 2, 25);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 8);
        let poses = trajectories(&layout);
        let target = seeded_uniform(vec![layout.n_tokens(), 8], 1.0, 104);
        let trace = train_demo(&mut t, &layout, &z, &text, &poses, &target, 200, 0.05).unwrap();
        assert_eq!(trace.len(), 200);
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut t = build(BlockConfig::default(), 4, 2, 27);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let target = seeded_uniform(vec![layout.n_tokens(), 4], 1.0, 105);
        match train_demo(&mut t, &layout, &z, &text, &poses, &target, 50, 1e30) {
            Err(AttentionError::NonFiniteLoss { step }) => assert!(step > 0 && step < 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_gradients_match_finite_differences_end_to_end() {
        // Flatten every trainable tensor of the two-layer model plus both
        // branches and compare the assembled analytic gradient against
        // central differences of the scalar loss.
        let config = BlockConfig {
            layers: 2,
            full_visibility_layers: 1,
            use_mask: true,
            use_extrinsic_branch: true,
            use_plucker_branch: true,
            use_residual_norm: true,
        };
        let t = build(config, 4, 2, 29);
        let layout = two_shot_layout();
        let (z, text) = inputs(&layout, 4);
        let poses = trajectories(&layout);
        let target = seeded_uniform(vec![layout.n_tokens(), 4], 1.0, 106);

        let loss_of = |probe: &ShotTransformer| {
            let out = block_forward(probe, &layout, &z, &text, &poses).unwrap();
            out.data()
                .iter()
                .zip(target.data())
                .map(|(o, y)| (o - y) * (o - y))
                .sum::<f64>()
                / (layout.n_tokens() * 4) as f64
        };

        // One gradient-descent step of zero length: reuse train_demo's
        // backward by cloning, stepping with a tiny rate, and reading the
        // parameter delta. Instead, recompute directly here.
        let cache = block_forward_cached(&t, &layout, &z, &text, &poses).unwrap();
        let count = (layout.n_tokens() * 4) as f64;
        let mut d_x = Tensor::zeros(vec![layout.n_tokens(), 4]);
        for i in 0..d_x.len() {
            d_x.data_mut()[i] = 2.0 * (cache.out.data()[i] - target.data()[i]) / count;
        }
        let mut layer_grads: Vec<AttentionGradients> =
            t.layers.iter().map(|p| p.zero_gradients()).collect();
        for l in (0..t.layers.len()).rev() {
            d_x = layer_backward(&t.layers[l], &cache.layers[l], &cache.masks[l], &d_x, &mut layer_grads[l]);
        }
        let ppf = layout.patches_per_frame();
        let mut mlp_grads = t.mlp.zero_gradients();
        let mut conv_grads = t.conv.zero_gradients();
        for frame in 0..layout.frames() {
            let rows = layout.n_text() + frame * ppf;
            let mut d_ext = vec![0.0; 4];
            for p in 0..ppf {
                for c in 0..4 {
                    d_ext[c] += d_x.data()[(rows + p) * 4 + c];
                }
            }
            mlp_grads.accumulate(&t.mlp.backward(&cache.ext_inputs[frame], &d_ext));
            let upstream = Tensor::new(
                vec![layout.patch_h(), layout.patch_w(), 4],
                d_x.data()[rows * 4..(rows + ppf) * 4].to_vec(),
            )
            .unwrap();
            conv_grads.accumulate(&t.conv.backward(&cache.maps[frame], &upstream).unwrap());
        }

        let analytic: Vec<f64> = layer_grads
            .iter()
            .flat_map(|g| {
                [&g.wq, &g.bq, &g.wk, &g.bk, &g.wv, &g.bv, &g.wo, &g.bo]
                    .into_iter()
                    .flat_map(|t| t.data().iter().copied())
                    .collect::<Vec<_>>()
            })
            .chain([&mlp_grads.w1, &mlp_grads.b1, &mlp_grads.w2, &mlp_grads.b2]
                .into_iter()
                .flat_map(|t| t.data().iter().copied()))
            .chain([&conv_grads.weight, &conv_grads.bias]
                .into_iter()
                .flat_map(|t| t.data().iter().copied()))
            .collect();

        let mut flat: Vec<f64> = t
            .layers
            .iter()
            .flat_map(|p| p.to_tensors().iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>())
            .chain(t.mlp.to_tensors().iter().flat_map(|t| t.data().to_vec()))
            .chain(t.conv.to_tensors().iter().flat_map(|t| t.data().to_vec()))
            .collect();
        let numeric = crate::gradcheck::central_difference(&mut flat, 1e-5, |p| {
            let mut probe = t.clone();
            let mut cursor = 0;
            let mut fill = |tensor: &mut Tensor| {
                let len = tensor.len();
                tensor.data_mut().copy_from_slice(&p[cursor..cursor + len]);
                cursor += len;
            };
            for layer in &mut probe.layers {
                fill(&mut layer.wq);
                fill(&mut layer.bq);
                fill(&mut layer.wk);
                fill(&mut layer.bk);
                fill(&mut layer.wv);
                fill(&mut layer.bv);
                fill(&mut layer.wo);
                fill(&mut layer.bo);
            }
            fill(&mut probe.mlp.w1);
            fill(&mut probe.mlp.b1);
            fill(&mut probe.mlp.w2);
            fill(&mut probe.mlp.b2);
            fill(&mut probe.conv.weight);
            fill(&mut probe.conv.bias);
            loss_of(&probe)
        });
        assert!(crate::gradcheck::max_relative_error(&analytic, &numeric) < 1e-5);
    }
}
