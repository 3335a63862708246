//! Shot-aware attention mask construction.
//!
//! Tokens are ordered text first, then visual tokens frame-major and
//! row-major within each frame. Visibility follows one rule set:
//!
//! * a visual query in shot i sees shot i's visual tokens, every visual
//!   token of frame 0, shot i's local text, and the global text;
//! * a local-text query of shot i sees shot i's visual tokens, its own
//!   range, and the global text;
//! * a global-text query sees everything;
//! * no other pair is visible.
//!
//! Frame 0 needs no special casing beyond the union: it belongs to the first
//! shot's local set and is simultaneously the globally visible set.
//!
//! [`build_mask`] assembles the matrix from rectangular block descriptors,
//! the same descriptors used for serialization; [`visible_pair`] evaluates
//! the rule for one (query, key) pair directly. The two are independent
//! implementations and the test suite holds them bit-for-bit equal.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("block {rule} range [{start}, {end}) exceeds token count {n}")]
    BlockOutOfRange {
        rule: String,
        start: usize,
        end: usize,
        n: usize,
    },
    #[error("mask has {mask_n} tokens but layout has {layout_n}")]
    LayoutMismatch { mask_n: usize, layout_n: usize },
    #[error("layout file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One shot: a half-open frame range plus a half-open local-text token range.
///
/// The local-text range may be empty (`local_text_start == local_text_end`)
/// for shots without their own description tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSpec {
    pub shot_id: u32,
    pub frame_start: usize,
    pub frame_end: usize,
    pub local_text_start: usize,
    pub local_text_end: usize,
}

/// Classification of one token index under a [`TokenLayout`].
///
/// `shot` is the index into the layout's shot list, not the `shot_id` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    GlobalText,
    LocalText { shot: usize },
    Visual { shot: usize, frame: usize },
}

impl TokenClass {
    /// Coarse label used for per-block statistics.
    pub fn label(&self) -> &'static str {
        match self {
            TokenClass::GlobalText => "global_text",
            TokenClass::LocalText { .. } => "local_text",
            TokenClass::Visual { .. } => "visual",
        }
    }
}

/// Token layout of one multi-shot clip: text tokens in `[0, n_text)`, then
/// `frames · patch_h · patch_w` visual tokens.
///
/// Constructed through [`TokenLayout::new`], which checks that shot frame
/// ranges tile `[0, frames)` in order and that the nonempty text ranges
/// (local and global) tile `[0, n_text)` without overlap, so every token has
/// exactly one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    frames: usize,
    patch_h: usize,
    patch_w: usize,
    shots: Vec<ShotSpec>,
    global_text_start: usize,
    global_text_end: usize,
    n_text: usize,
}

impl TokenLayout {
    pub fn new(
        frames: usize,
        patch_h: usize,
        patch_w: usize,
        shots: Vec<ShotSpec>,
        global_text_start: usize,
        global_text_end: usize,
    ) -> Result<Self, MaskError> {
        let invalid = |msg: String| Err(MaskError::InvalidLayout(msg));
        if frames < 1 || patch_h < 1 || patch_w < 1 {
            return invalid(format!(
                "frames/patch_h/patch_w must all be at least 1 (got {frames}/{patch_h}/{patch_w})"
            ));
        }
        if shots.is_empty() {
            return invalid("at least one shot is required".into());
        }

        let mut expected_start = 0;
        let mut ids = std::collections::BTreeSet::new();
        for s in &shots {
            if s.frame_end <= s.frame_start {
                return invalid(format!(
                    "shot {} frame range [{}, {}) is empty",
                    s.shot_id, s.frame_start, s.frame_end
                ));
            }
            if s.frame_start != expected_start {
                return invalid(format!(
                    "shot {} starts at frame {} but the previous shot ends at {}",
                    s.shot_id, s.frame_start, expected_start
                ));
            }
            expected_start = s.frame_end;
            if s.local_text_end < s.local_text_start {
                return invalid(format!(
                    "shot {} local text range [{}, {}) is reversed",
                    s.shot_id, s.local_text_start, s.local_text_end
                ));
            }
            if !ids.insert(s.shot_id) {
                return invalid(format!("duplicate shot_id {}", s.shot_id));
            }
        }
        if expected_start != frames {
            return invalid(format!(
                "shots cover frames [0, {expected_start}) but the layout has {frames} frames"
            ));
        }
        if global_text_end < global_text_start {
            return invalid(format!(
                "global text range [{global_text_start}, {global_text_end}) is reversed"
            ));
        }

        // Nonempty text ranges must tile [0, n_text) without overlap.
        let mut ranges: Vec<(usize, usize)> = shots
            .iter()
            .filter(|s| s.local_text_end > s.local_text_start)
            .map(|s| (s.local_text_start, s.local_text_end))
            .collect();
        if global_text_end > global_text_start {
            ranges.push((global_text_start, global_text_end));
        }
        ranges.sort_unstable();
        let mut cursor = 0;
        for &(start, end) in &ranges {
            if start != cursor {
                return invalid(format!(
                    "text ranges leave a gap or overlap at token {cursor} (next range starts at {start})"
                ));
            }
            cursor = end;
        }

        Ok(Self {
            frames,
            patch_h,
            patch_w,
            shots,
            global_text_start,
            global_text_end,
            n_text: cursor,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patch_h(&self) -> usize {
        self.patch_h
    }

    pub fn patch_w(&self) -> usize {
        self.patch_w
    }

    pub fn shots(&self) -> &[ShotSpec] {
        &self.shots
    }

    pub fn global_text_range(&self) -> (usize, usize) {
        (self.global_text_start, self.global_text_end)
    }

    /// Text token count; text tokens occupy `[0, n_text)`.
    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn n_visual(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_text + self.n_visual()
    }

    /// Index of the shot containing `frame`.
    pub fn shot_of_frame(&self, frame: usize) -> Option<usize> {
        self.shots
            .iter()
            .position(|s| s.frame_start <= frame && frame < s.frame_end)
    }

    /// Token range of one shot's visual tokens (contiguous, frame-major).
    pub fn visual_range_of_shot(&self, shot: usize) -> (usize, usize) {
        let s = &self.shots[shot];
        let ppf = self.patches_per_frame();
        (
            self.n_text + s.frame_start * ppf,
            self.n_text + s.frame_end * ppf,
        )
    }

    /// Token range of the first frame's visual tokens.
    pub fn frame0_visual_range(&self) -> (usize, usize) {
        (self.n_text, self.n_text + self.patches_per_frame())
    }

    /// Token index of the patch at (`row`, `col`) of `frame`.
    pub fn visual_token_index(&self, frame: usize, row: usize, col: usize) -> usize {
        debug_assert!(frame < self.frames && row < self.patch_h && col < self.patch_w);
        self.n_text + frame * self.patches_per_frame() + row * self.patch_w + col
    }

    /// Class of one token index.
    pub fn classify(&self, token: usize) -> TokenClass {
        assert!(token < self.n_tokens(), "token {token} out of range");
        if token < self.n_text {
            if self.global_text_start <= token && token < self.global_text_end {
                return TokenClass::GlobalText;
            }
            let shot = self
                .shots
                .iter()
                .position(|s| s.local_text_start <= token && token < s.local_text_end)
                .expect("text tiling leaves no unclassified token");
            return TokenClass::LocalText { shot };
        }
        let frame = (token - self.n_text) / self.patches_per_frame();
        let shot = self.shot_of_frame(frame).expect("frame tiling is exact");
        TokenClass::Visual { shot, frame }
    }
}

/// Boolean attention mask: `bits[q·n + k]` is true when query `q` may attend
/// to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    /// Validates the structural invariants: true diagonal, no all-false row.
    pub fn new(n: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != n * n {
            return Err(MaskError::InvalidMask(format!(
                "expected {n}x{n} = {} bits, got {}",
                n * n,
                bits.len()
            )));
        }
        for q in 0..n {
            if !bits[q * n + q] {
                return Err(MaskError::InvalidMask(format!(
                    "token {q} cannot attend to itself"
                )));
            }
        }
        Ok(Self { n, bits })
    }

    pub fn all_true(n: usize) -> Self {
        Self {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for q in 0..n {
            bits[q * n + q] = true;
        }
        Self { n, bits }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn visible_pairs(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Rectangular visibility block: queries in `[query_start, query_end)` may
/// attend to keys in `[key_start, key_end)` under the named rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub rule: String,
    pub query_start: usize,
    pub query_end: usize,
    pub key_start: usize,
    pub key_end: usize,
}

impl BlockDescriptor {
    fn new(rule: &str, query: (usize, usize), key: (usize, usize)) -> Self {
        Self {
            rule: rule.to_string(),
            query_start: query.0,
            query_end: query.1,
            key_start: key.0,
            key_end: key.1,
        }
    }

    fn is_empty(&self) -> bool {
        self.query_end <= self.query_start || self.key_end <= self.key_start
    }
}

/// Serialized mask: token count plus the visibility blocks whose union it is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFile {
    pub n_tokens: usize,
    pub blocks: Vec<BlockDescriptor>,
}

/// The visibility rule as rectangular blocks; the mask is their union.
///
/// Empty rectangles (a shot without local text, an empty global range) are
/// omitted.
pub fn mask_blocks(layout: &TokenLayout) -> Vec<BlockDescriptor> {
    let mut blocks = Vec::new();
    let frame0 = layout.frame0_visual_range();
    let global = layout.global_text_range();
    let all = (0, layout.n_tokens());
    for (i, s) in layout.shots().iter().enumerate() {
        let visual = layout.visual_range_of_shot(i);
        let local = (s.local_text_start, s.local_text_end);
        blocks.push(BlockDescriptor::new("visual_sees_own_shot", visual, visual));
        blocks.push(BlockDescriptor::new("visual_sees_frame0", visual, frame0));
        blocks.push(BlockDescriptor::new("visual_sees_local_text", visual, local));
        blocks.push(BlockDescriptor::new("visual_sees_global_text", visual, global));
        blocks.push(BlockDescriptor::new("local_text_sees_shot_visual", local, visual));
        blocks.push(BlockDescriptor::new("local_text_sees_self", local, local));
        blocks.push(BlockDescriptor::new("local_text_sees_global_text", local, global));
    }
    blocks.push(BlockDescriptor::new("global_text_sees_all", global, all));
    blocks.retain(|b| !b.is_empty());
    blocks
}

/// Union of visibility blocks into a concrete mask.
pub fn mask_from_blocks(n: usize, blocks: &[BlockDescriptor]) -> Result<AttentionMask, MaskError> {
    let mut bits = vec![false; n * n];
    for b in blocks {
        let out_of_range = |start, end| MaskError::BlockOutOfRange {
            rule: b.rule.clone(),
            start,
            end,
            n,
        };
        if b.query_end > n {
            return Err(out_of_range(b.query_start, b.query_end));
        }
        if b.key_end > n {
            return Err(out_of_range(b.key_start, b.key_end));
        }
        for q in b.query_start..b.query_end {
            for k in b.key_start..b.key_end {
                bits[q * n + k] = true;
            }
        }
    }
    AttentionMask::new(n, bits)
}

/// The visibility rule evaluated directly for one (query, key) pair.
pub fn visible_pair(layout: &TokenLayout, q: usize, k: usize) -> bool {
    match layout.classify(q) {
        TokenClass::GlobalText => true,
        TokenClass::LocalText { shot: i } => match layout.classify(k) {
            TokenClass::GlobalText => true,
            TokenClass::LocalText { shot: j } => j == i,
            TokenClass::Visual { shot: j, .. } => j == i,
        },
        TokenClass::Visual { shot: i, .. } => match layout.classify(k) {
            TokenClass::GlobalText => true,
            TokenClass::LocalText { shot: j } => j == i,
            TokenClass::Visual { shot: j, frame } => j == i || frame == 0,
        },
    }
}

/// Shot-aware mask for a full layout.
pub fn build_mask(layout: &TokenLayout) -> AttentionMask {
    mask_from_blocks(layout.n_tokens(), &mask_blocks(layout))
        .expect("blocks derived from a valid layout are in range and keep the diagonal")
}

/// Layer schedule: all tokens stay visible in the first
/// `full_visibility_layers` layers, the shot-aware mask applies afterwards.
pub fn mask_for_layer(
    mask: &AttentionMask,
    layer_index: usize,
    full_visibility_layers: usize,
) -> AttentionMask {
    if layer_index < full_visibility_layers {
        AttentionMask::all_true(mask.n())
    } else {
        mask.clone()
    }
}

/// Visibility statistics of one mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    pub n_tokens: usize,
    pub visible_pairs: usize,
    pub density: f64,
    /// Densities keyed by `"<query class>_to_<key class>"`; empty when no
    /// layout was supplied.
    pub block_densities: BTreeMap<String, f64>,
}

/// Global visibility statistics: visible pairs and density.
pub fn mask_stats(mask: &AttentionMask) -> MaskStats {
    let n = mask.n();
    let visible = mask.visible_pairs();
    MaskStats {
        n_tokens: n,
        visible_pairs: visible,
        density: visible as f64 / (n * n) as f64,
        block_densities: BTreeMap::new(),
    }
}

/// Statistics including per-class block densities, keyed by
/// `"<query class>_to_<key class>"` over the classes `visual`, `local_text`,
/// and `global_text`.
pub fn mask_stats_with_layout(
    mask: &AttentionMask,
    layout: &TokenLayout,
) -> Result<MaskStats, MaskError> {
    let n = mask.n();
    if n != layout.n_tokens() {
        return Err(MaskError::LayoutMismatch {
            mask_n: n,
            layout_n: layout.n_tokens(),
        });
    }
    let labels: Vec<&'static str> = (0..n).map(|t| layout.classify(t).label()).collect();
    let mut visible: BTreeMap<String, usize> = BTreeMap::new();
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    for q in 0..n {
        for k in 0..n {
            let key = format!("{}_to_{}", labels[q], labels[k]);
            *totals.entry(key.clone()).or_default() += 1;
            if mask.visible(q, k) {
                *visible.entry(key).or_default() += 1;
            }
        }
    }
    let mut stats = mask_stats(mask);
    stats.block_densities = totals
        .into_iter()
        .map(|(key, total)| {
            let seen = visible.get(&key).copied().unwrap_or(0);
            (key, seen as f64 / total as f64)
        })
        .collect();
    Ok(stats)
}

// --- serialization --------------------------------------------------------

/// On-disk layout description, carrying the layer schedule alongside the
/// token layout proper.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub frames: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub shots: Vec<ShotSpec>,
    pub global_text_start: usize,
    pub global_text_end: usize,
    pub full_visibility_layers: usize,
}

impl LayoutFile {
    pub fn from_parts(layout: &TokenLayout, full_visibility_layers: usize) -> Self {
        let (global_text_start, global_text_end) = layout.global_text_range();
        Self {
            frames: layout.frames(),
            patch_h: layout.patch_h(),
            patch_w: layout.patch_w(),
            shots: layout.shots().to_vec(),
            global_text_start,
            global_text_end,
            full_visibility_layers,
        }
    }

    /// Validate and split into the layout and the layer schedule.
    pub fn into_parts(self) -> Result<(TokenLayout, usize), MaskError> {
        let layout = TokenLayout::new(
            self.frames,
            self.patch_h,
            self.patch_w,
            self.shots,
            self.global_text_start,
            self.global_text_end,
        )?;
        Ok((layout, self.full_visibility_layers))
    }
}

pub fn load_layout<P: AsRef<Path>>(path: P) -> Result<(TokenLayout, usize), MaskError> {
    let reader = BufReader::new(File::open(path)?);
    let file: LayoutFile =
        serde_json::from_reader(reader).map_err(|e| MaskError::Parse(e.to_string()))?;
    file.into_parts()
}

pub fn save_layout<P: AsRef<Path>>(
    path: P,
    layout: &TokenLayout,
    full_visibility_layers: usize,
) -> Result<(), MaskError> {
    let file = LayoutFile::from_parts(layout, full_visibility_layers);
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &file).map_err(|e| MaskError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Binary PGM (P5) image of the mask: one pixel per pair, white where the
/// query row may attend to the key column.
pub fn write_mask_pgm<W: Write>(mask: &AttentionMask, writer: &mut W) -> std::io::Result<()> {
    let n = mask.n();
    write!(writer, "P5\n{n} {n}\n255\n")?;
    let pixels: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    writer.write_all(&pixels)
}

pub fn save_mask_pgm<P: AsRef<Path>>(path: P, mask: &AttentionMask) -> Result<(), MaskError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mask_pgm(mask, &mut w)?;
    w.flush()?;
    Ok(())
}
