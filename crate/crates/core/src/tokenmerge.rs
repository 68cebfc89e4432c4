//! Cross-frame token merging around self-attention.
//!
//! A token chunk holds `B` frames of `A = h * w` tokens each. One frame (the
//! keyframe) supplies the `A` merge targets; every token of the other `B - 1`
//! frames is a merge source. Each source is paired with one target, either by
//! following optical flow (down blocks) or by maximum cosine similarity,
//! optionally down-weighted by spatial distance (up blocks). The best-scoring
//! fraction `r` of pairs is merged, attention runs over the shorter merged
//! sequence, and unmerging copies each group's result back to every member.
//!
//! Padding tokens are stripped before any of this and restored afterwards,
//! so they never match real content.

use crate::error::{Error, Result};
use crate::flow::{ConfidenceMap, FlowField};

/// Row-major `(rows, cols)` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "token matrix ({rows}, {cols}) needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(TokenMatrix { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// `B` frames of `h_tok * w_tok` tokens with `C` channels. Only the top-left
/// `content` extent holds image tokens; the rest is padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenChunk {
    tokens: Vec<f64>,
    batch: usize,
    layout: (usize, usize),
    content: (usize, usize),
    channels: usize,
    target_index: usize,
}

impl TokenChunk {
    pub fn new(
        tokens: Vec<f64>,
        batch: usize,
        layout: (usize, usize),
        content: (usize, usize),
        channels: usize,
        target_index: usize,
    ) -> Result<Self> {
        let per_frame = layout.0 * layout.1;
        if tokens.len() != batch * per_frame * channels {
            return Err(Error::Shape(format!(
                "chunk ({batch}, {per_frame}, {channels}) needs {} values, got {}",
                batch * per_frame * channels,
                tokens.len()
            )));
        }
        if batch == 0 || channels == 0 || per_frame == 0 {
            return Err(Error::Shape(
                "token chunk dimensions must be non-zero".into(),
            ));
        }
        if content.0 == 0 || content.1 == 0 || content.0 > layout.0 || content.1 > layout.1 {
            return Err(Error::Shape(format!(
                "content extent {content:?} must be non-empty and fit inside layout {layout:?}"
            )));
        }
        if target_index >= batch {
            return Err(Error::Index(format!(
                "target index {target_index} outside batch of {batch}"
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("token chunk holds a non-finite value".into()));
        }
        Ok(TokenChunk {
            tokens,
            batch,
            layout,
            content,
            channels,
            target_index,
        })
    }

    /// `(B, A, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.per_frame(), self.channels)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn per_frame(&self) -> usize {
        self.layout.0 * self.layout.1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layout(&self) -> (usize, usize) {
        self.layout
    }

    pub fn content(&self) -> (usize, usize) {
        self.content
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<f64> {
        self.tokens
    }

    #[inline]
    pub fn token(&self, frame: usize, pos: usize) -> &[f64] {
        let start = (frame * self.per_frame() + pos) * self.channels;
        &self.tokens[start..start + self.channels]
    }

    pub fn frame_tokens(&self, frame: usize) -> &[f64] {
        let n = self.per_frame() * self.channels;
        &self.tokens[frame * n..(frame + 1) * n]
    }

    pub fn has_padding(&self) -> bool {
        self.content != self.layout
    }
}

/// Source and target tokens of a chunk plus the bookkeeping needed to put
/// them back.
#[derive(Debug, Clone)]
pub struct SrcTarSplit {
    pub src: TokenMatrix,
    pub tar: TokenMatrix,
    /// `(frame, position)` of every source row.
    pub src_slots: Vec<(usize, usize)>,
    batch: usize,
    layout: (usize, usize),
    content: (usize, usize),
    target_index: usize,
}

impl SrcTarSplit {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    /// Token-grid `(x, y)` of every source row.
    pub fn src_positions(&self) -> Vec<(f64, f64)> {
        let w = self.layout.1;
        self.src_slots
            .iter()
            .map(|&(_, p)| ((p % w) as f64, (p / w) as f64))
            .collect()
    }

    /// Token-grid `(x, y)` of every target row.
    pub fn tar_positions(&self) -> Vec<(f64, f64)> {
        let w = self.layout.1;
        (0..self.tar.rows())
            .map(|p| ((p % w) as f64, (p / w) as f64))
            .collect()
    }
}

/// Splits a chunk into the target frame's tokens and all other frames'
/// tokens, the latter flattened in frame order.
pub fn split_src_tar(chunk: &TokenChunk) -> Result<SrcTarSplit> {
    let (b, a, c) = chunk.shape();
    if b < 2 {
        return Err(Error::NothingToMerge(b));
    }
    let tar = TokenMatrix::from_vec(a, c, chunk.frame_tokens(chunk.target_index).to_vec())?;
    let mut src_data = Vec::with_capacity((b - 1) * a * c);
    let mut src_slots = Vec::with_capacity((b - 1) * a);
    for f in (0..b).filter(|&f| f != chunk.target_index) {
        src_data.extend_from_slice(chunk.frame_tokens(f));
        src_slots.extend((0..a).map(|p| (f, p)));
    }
    Ok(SrcTarSplit {
        src: TokenMatrix::from_vec((b - 1) * a, c, src_data)?,
        tar,
        src_slots,
        batch: b,
        layout: chunk.layout,
        content: chunk.content,
        target_index: chunk.target_index,
    })
}

/// `(N_src, A)` similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "score matrix ({rows}, {cols}) needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of every source row against every target row. A
/// zero-norm vector scores 0 against everything.
pub fn cosine_scores(src: &TokenMatrix, tar: &TokenMatrix) -> Result<ScoreMatrix> {
    if src.cols() != tar.cols() {
        return Err(Error::Shape(format!(
            "source has {} channels, target has {}",
            src.cols(),
            tar.cols()
        )));
    }
    let tar_norms: Vec<f64> = (0..tar.rows()).map(|j| norm(tar.row(j))).collect();
    let mut data = Vec::with_capacity(src.rows() * tar.rows());
    for i in 0..src.rows() {
        let s = src.row(i);
        let ns = norm(s);
        for (j, &nt) in tar_norms.iter().enumerate() {
            if ns == 0.0 || nt == 0.0 {
                data.push(0.0);
                continue;
            }
            let dot: f64 = s.iter().zip(tar.row(j)).map(|(a, b)| a * b).sum();
            data.push(dot / (ns * nt));
        }
    }
    ScoreMatrix::from_vec(src.rows(), tar.rows(), data)
}

/// Spatial distance penalty `s' = s * exp(-floor(|X_i - X_j|^2 / R))`, with
/// positions in token-grid units on the frame plane.
pub fn spatial_weight(
    scores: &ScoreMatrix,
    src_pos: &[(f64, f64)],
    tar_pos: &[(f64, f64)],
    radius: f64,
) -> Result<ScoreMatrix> {
    if radius.is_nan() || radius <= 0.0 || radius.is_infinite() {
        return Err(Error::Parameter(format!(
            "spatial radius must be > 0, got {radius}"
        )));
    }
    if src_pos.len() != scores.rows || tar_pos.len() != scores.cols {
        return Err(Error::Shape(format!(
            "positions ({}, {}) do not match scores ({}, {})",
            src_pos.len(),
            tar_pos.len(),
            scores.rows,
            scores.cols
        )));
    }
    let mut data = Vec::with_capacity(scores.data.len());
    for (i, &(xi, yi)) in src_pos.iter().enumerate() {
        for (j, &(xj, yj)) in tar_pos.iter().enumerate() {
            let d2 = (xi - xj) * (xi - xj) + (yi - yj) * (yi - yj);
            let tau = (d2 / radius).floor();
            data.push(scores.get(i, j) * (-tau).exp());
        }
    }
    ScoreMatrix::from_vec(scores.rows, scores.cols, data)
}

/// Best target for one source token; `target: None` marks an invalid pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub target: Option<usize>,
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub pairs: Vec<Pair>,
}

/// Row-wise argmax; ties go to the smallest target index.
pub fn cosine_correspondence(scores: &ScoreMatrix) -> Correspondence {
    let pairs = (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            Pair {
                target: Some(best),
                criterion: row[best],
            }
        })
        .collect();
    Correspondence { pairs }
}

/// Flow and forward-backward confidence for one source frame, at token
/// resolution. The flow lives on the source frame's grid and points into
/// the target frame.
#[derive(Debug, Clone)]
pub struct TokenFlow {
    pub flow: FlowField,
    pub confidence: ConfidenceMap,
}

/// Pairs each source token at `X` with the target cell `round(X + f(X))`,
/// ranked by the forward-backward confidence at `X`. Cells that land outside
/// the content extent are invalid with criterion 0.
///
/// `flows` is indexed by frame; the entry for the target frame is ignored.
pub fn flow_correspondence(
    split: &SrcTarSplit,
    flows: &[Option<TokenFlow>],
) -> Result<Correspondence> {
    let (h, w) = split.content;
    if split.layout != split.content {
        return Err(Error::Shape(
            "flow correspondence expects a chunk with padding removed".into(),
        ));
    }
    for f in (0..split.batch).filter(|&f| f != split.target_index) {
        let tf = flows
            .get(f)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Config(format!("no flow supplied for source frame {f}")))?;
        if tf.flow.resolution() != (h, w) || tf.confidence.resolution() != (h, w) {
            return Err(Error::Shape(format!(
                "flow for frame {f} is {:?}, token grid is {:?}",
                tf.flow.resolution(),
                (h, w)
            )));
        }
    }
    let pairs = split
        .src_slots
        .iter()
        .map(|&(f, p)| {
            let tf = flows[f].as_ref().expect("checked above");
            let (y, x) = (p / w, p % w);
            let tx = (x as f64 + tf.flow.u(y, x)).round();
            let ty = (y as f64 + tf.flow.v(y, x)).round();
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                Pair {
                    target: None,
                    criterion: 0.0,
                }
            } else {
                Pair {
                    target: Some(ty as usize * w + tx as usize),
                    criterion: tf.confidence.value(y, x),
                }
            }
        })
        .collect();
    Ok(Correspondence { pairs })
}

/// Source slots chosen for merging with their targets, sorted by slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeSet {
    pub pairs: Vec<(usize, usize)>,
}

impl MergeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Number of source tokens a ratio asks for: `floor(r * n)`. The small
/// epsilon keeps exact fractions such as `2/3 * 3` from rounding down.
pub fn merge_count(r: f64, n: usize) -> usize {
    ((r * n as f64) + 1e-9).floor() as usize
}

/// Keeps the `floor(r * N_src)` valid pairs with the largest criterion;
/// ties go to the smaller source slot. Invalid pairs are never selected.
pub fn select_top_r(corr: &Correspondence, r: f64) -> Result<MergeSet> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Parameter(format!(
            "merge ratio must be in [0, 1], got {r}"
        )));
    }
    let k = merge_count(r, corr.pairs.len());
    let mut valid: Vec<(usize, usize, f64)> = corr
        .pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.target.map(|t| (i, t, p.criterion)))
        .collect();
    valid.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    valid.truncate(k);
    let mut pairs: Vec<(usize, usize)> = valid.into_iter().map(|(i, t, _)| (i, t)).collect();
    pairs.sort_unstable();
    Ok(MergeSet { pairs })
}

/// How the `B * A` slots of a chunk were grouped by [`merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    batch: usize,
    layout: (usize, usize),
    content: (usize, usize),
    channels: usize,
    target_index: usize,
    /// Group of every slot, indexed `frame * A + position`.
    slot_group: Vec<usize>,
    groups: usize,
}

impl MergeRecord {
    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn slot_group(&self) -> &[usize] {
        &self.slot_group
    }

    /// Slots of every group, each list in ascending slot order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups];
        for (slot, &g) in self.slot_group.iter().enumerate() {
            out[g].push(slot);
        }
        out
    }
}

/// Merges selected sources into their targets by group mean.
///
/// Output rows are the `A` target groups (by target index) followed by the
/// unmerged sources (by slot), so `K = A + N_src - |set|`.
pub fn merge(split: &SrcTarSplit, set: &MergeSet) -> Result<(TokenMatrix, MergeRecord)> {
    let a = split.tar.rows();
    let n_src = split.src.rows();
    let c = split.tar.cols();
    let mut assigned = vec![None; n_src];
    for &(s, t) in &set.pairs {
        if s >= n_src || t >= a {
            return Err(Error::Index(format!("merge pair ({s}, {t}) out of range")));
        }
        if assigned[s].replace(t).is_some() {
            return Err(Error::Index(format!("source slot {s} selected twice")));
        }
    }
    let k = a + n_src - set.len();
    let mut merged = TokenMatrix::zeros(k, c);
    let mut counts = vec![1usize; a];
    for j in 0..a {
        merged.row_mut(j).copy_from_slice(split.tar.row(j));
    }
    let mut slot_group = vec![0usize; split.batch * a];
    for j in 0..a {
        slot_group[split.target_index * a + j] = j;
    }
    let mut next = a;
    for (s, target) in assigned.iter().enumerate() {
        let (f, p) = split.src_slots[s];
        let g = match *target {
            Some(t) => {
                counts[t] += 1;
                for (m, v) in merged.row_mut(t).iter_mut().zip(split.src.row(s)) {
                    *m += v;
                }
                t
            }
            None => {
                merged.row_mut(next).copy_from_slice(split.src.row(s));
                next += 1;
                next - 1
            }
        };
        slot_group[f * a + p] = g;
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 1 {
            let n = n as f64;
            merged.row_mut(j).iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok((
        merged,
        MergeRecord {
            batch: split.batch,
            layout: split.layout,
            content: split.content,
            channels: c,
            target_index: split.target_index,
            slot_group,
            groups: k,
        },
    ))
}

/// Copies each group's row back to every slot of the group.
pub fn unmerge(attended: &TokenMatrix, record: &MergeRecord) -> Result<TokenChunk> {
    if attended.rows() != record.groups || attended.cols() != record.channels {
        return Err(Error::Shape(format!(
            "attended tokens are ({}, {}), record expects ({}, {})",
            attended.rows(),
            attended.cols(),
            record.groups,
            record.channels
        )));
    }
    let mut tokens = Vec::with_capacity(record.slot_group.len() * record.channels);
    for &g in &record.slot_group {
        tokens.extend_from_slice(attended.row(g));
    }
    TokenChunk::new(
        tokens,
        record.batch,
        record.layout,
        record.content,
        record.channels,
        record.target_index,
    )
}

/// What [`strip_padding`] removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PadSpec {
    layout: (usize, usize),
    content: (usize, usize),
    batch: usize,
    channels: usize,
    /// Padding token values, frame-major then raster order.
    padding: Vec<f64>,
}

/// Drops token rows and columns outside the content extent.
pub fn strip_padding(chunk: &TokenChunk) -> (TokenChunk, PadSpec) {
    let (hl, wl) = chunk.layout;
    let (hc, wc) = chunk.content;
    let c = chunk.channels;
    let mut kept = Vec::with_capacity(chunk.batch * hc * wc * c);
    let mut padding = Vec::with_capacity(chunk.batch * (hl * wl - hc * wc) * c);
    for f in 0..chunk.batch {
        for y in 0..hl {
            for x in 0..wl {
                let t = chunk.token(f, y * wl + x);
                if y < hc && x < wc {
                    kept.extend_from_slice(t);
                } else {
                    padding.extend_from_slice(t);
                }
            }
        }
    }
    let stripped = TokenChunk {
        tokens: kept,
        batch: chunk.batch,
        layout: (hc, wc),
        content: (hc, wc),
        channels: c,
        target_index: chunk.target_index,
    };
    let spec = PadSpec {
        layout: chunk.layout,
        content: chunk.content,
        batch: chunk.batch,
        channels: c,
        padding,
    };
    (stripped, spec)
}

/// Reinserts the padding tokens recorded by [`strip_padding`] verbatim.
pub fn restore_padding(content_chunk: &TokenChunk, spec: &PadSpec) -> Result<TokenChunk> {
    let (hl, wl) = spec.layout;
    let (hc, wc) = spec.content;
    let c = spec.channels;
    if content_chunk.layout != (hc, wc)
        || content_chunk.batch != spec.batch
        || content_chunk.channels != c
        || spec.padding.len() != spec.batch * (hl * wl - hc * wc) * c
    {
        return Err(Error::Shape(format!(
            "content chunk {:?}/{:?} does not match pad spec {:?} -> {:?}",
            content_chunk.shape(),
            content_chunk.layout,
            spec.content,
            spec.layout
        )));
    }
    let mut tokens = Vec::with_capacity(spec.batch * hl * wl * c);
    let mut pad = spec.padding.chunks_exact(c);
    for f in 0..spec.batch {
        for y in 0..hl {
            for x in 0..wl {
                if y < hc && x < wc {
                    tokens.extend_from_slice(content_chunk.token(f, y * wc + x));
                } else {
                    tokens.extend_from_slice(pad.next().expect("length checked"));
                }
            }
        }
    }
    TokenChunk::new(
        tokens,
        spec.batch,
        spec.layout,
        spec.content,
        c,
        content_chunk.target_index,
    )
}

/// Merging-ratio annealing schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealParams {
    pub r: f64,
    pub delta: f64,
    pub i_beg: usize,
    pub i_end: usize,
}

impl AnnealParams {
    pub fn new(r: f64, delta: f64, i_beg: usize, i_end: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Parameter(format!(
                "base ratio r must be in [0, 1], got {r}"
            )));
        }
        if delta.is_nan() || delta <= 0.0 || delta.is_infinite() {
            return Err(Error::Parameter(format!("delta must be > 0, got {delta}")));
        }
        if i_beg >= i_end {
            return Err(Error::Parameter(format!(
                "anneal start {i_beg} must precede end {i_end}"
            )));
        }
        Ok(AnnealParams {
            r,
            delta,
            i_beg,
            i_end,
        })
    }
}

/// `r * cos(pi/2 * clamp(delta * (i - i_beg) / (i_end - i_beg), 0, 1))`.
pub fn anneal_ratio(i: usize, p: &AnnealParams) -> f64 {
    let progress = p.delta * (i as f64 - p.i_beg as f64) / (p.i_end as f64 - p.i_beg as f64);
    p.r * (std::f64::consts::FRAC_PI_2 * progress.clamp(0.0, 1.0)).cos()
}

/// Token transform applied by an attention layer: same row and column count
/// in and out.
pub type Attention<'a> = dyn FnMut(&TokenMatrix) -> TokenMatrix + 'a;

/// Runs `attention` on each frame of the chunk independently, padding
/// included. This is what a single-image model does without merging.
pub fn attend_per_frame(chunk: &TokenChunk, attention: &mut Attention<'_>) -> Result<TokenChunk> {
    let (b, a, c) = chunk.shape();
    let mut tokens = Vec::with_capacity(chunk.tokens.len());
    for f in 0..b {
        let m = TokenMatrix::from_vec(a, c, chunk.frame_tokens(f).to_vec())?;
        let out = attention(&m);
        if out.rows() != a || out.cols() != c {
            return Err(Error::Shape("attention changed the token shape".into()));
        }
        tokens.extend(out.into_vec());
    }
    TokenChunk::new(
        tokens,
        b,
        chunk.layout,
        chunk.content,
        c,
        chunk.target_index,
    )
}

/// Correspondence source for one merge pass.
#[derive(Debug, Clone, Copy)]
pub enum MergeMode<'a> {
    /// Flow-guided pairs ranked by forward-backward confidence. Flows are
    /// indexed by frame and must be at the content token resolution.
    Flow(&'a [Option<TokenFlow>]),
    /// Cosine-similarity pairs, optionally weighted by spatial distance with
    /// the given radius.
    Cosine { spatial_radius: Option<f64> },
}

/// Finds the merge set for a padding-free chunk.
pub fn correspondence_merge_set(
    split: &SrcTarSplit,
    mode: MergeMode<'_>,
    r_i: f64,
) -> Result<MergeSet> {
    let corr = match mode {
        MergeMode::Flow(flows) => flow_correspondence(split, flows)?,
        MergeMode::Cosine { spatial_radius } => {
            let scores = cosine_scores(&split.src, &split.tar)?;
            let scores = match spatial_radius {
                Some(radius) => spatial_weight(
                    &scores,
                    &split.src_positions(),
                    &split.tar_positions(),
                    radius,
                )?,
                None => scores,
            };
            cosine_correspondence(&scores)
        }
    };
    select_top_r(&corr, r_i)
}

/// Merge, attend, unmerge.
///
/// Padding is stripped first and restored verbatim afterwards. When nothing
/// gets merged (`r_i = 0`, a single frame, or no valid pairs) the chunk goes
/// through `attention` frame by frame, exactly as it would without this pass.
pub fn hybrid_merge_pass(
    chunk: &TokenChunk,
    mode: MergeMode<'_>,
    r_i: f64,
    attention: &mut Attention<'_>,
) -> Result<TokenChunk> {
    if !(0.0..=1.0).contains(&r_i) {
        return Err(Error::Parameter(format!(
            "merge ratio must be in [0, 1], got {r_i}"
        )));
    }
    let (b, _, _) = chunk.shape();
    if b < 2 || merge_count(r_i, (b - 1) * chunk.content.0 * chunk.content.1) == 0 {
        return attend_per_frame(chunk, attention);
    }
    let (content, pad) = strip_padding(chunk);
    let split = split_src_tar(&content)?;
    let set = correspondence_merge_set(&split, mode, r_i)?;
    if set.is_empty() {
        return attend_per_frame(chunk, attention);
    }
    let (merged, record) = merge(&split, &set)?;
    let attended = attention(&merged);
    let out = unmerge(&attended, &record)?;
    restore_padding(&out, &pad)
}
