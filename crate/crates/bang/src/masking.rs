//! Stream layouts and attention-visibility masks for the cross-stream
//! visible n-stream decoder.
//!
//! A layout stacks one main stream (s = 0, fed golden tokens) and
//! `n_streams` predicting streams (s >= 1, fed [MASK]s) over a target of
//! length `T`. A cell in predicting stream `s` at position `t` predicts
//! `y_t` from `t - s` golden tokens and `s - 1` mask predecessors, so it
//! is only meaningful when `t >= s`.

use ndarray::Array2;
use thiserror::Error;

/// Additive-bias sentinel for masked attention entries. Finite so that
/// rows consisting entirely of sentinel entries softmax to uniform
/// weights instead of NaN.
pub const MASKED: f32 = -1e9;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("invalid stream cell (s={s}, t={t})")]
    InvalidCell { s: usize, t: usize },
    #[error("layout must satisfy 1 <= n_streams <= target_len, got n={n}, T={t}")]
    BadLayout { n: usize, t: usize },
    #[error("render size cap exceeded: {cells} cells > {cap}")]
    SizeCap { cells: usize, cap: usize },
}

/// Geometry of one main stream plus `n_streams` predicting streams over a
/// target of length `target_len`. Storage is rectangular; cells with
/// `t < s` exist but are invalid and excluded from loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayout {
    pub target_len: usize,
    pub n_streams: usize,
}

impl StreamLayout {
    pub fn new(target_len: usize, n_streams: usize) -> Result<Self, MaskError> {
        if target_len == 0 || n_streams == 0 || n_streams > target_len {
            return Err(MaskError::BadLayout {
                n: n_streams,
                t: target_len,
            });
        }
        Ok(Self {
            target_len,
            n_streams,
        })
    }

    /// Total storage rows, valid or not.
    pub fn rows(&self) -> usize {
        (self.n_streams + 1) * self.target_len
    }

    /// Bijection (stream, position) -> row. Positions are 1-based.
    pub fn row_index(&self, s: usize, t: usize) -> usize {
        debug_assert!(s <= self.n_streams && t >= 1 && t <= self.target_len);
        s * self.target_len + (t - 1)
    }

    /// Inverse of [`row_index`](Self::row_index).
    pub fn cell(&self, row: usize) -> (usize, usize) {
        (row / self.target_len, row % self.target_len + 1)
    }

    /// Main-stream cells are always valid; a predicting cell needs
    /// `t - s >= 0` golden predecessors.
    pub fn is_valid(&self, s: usize, t: usize) -> bool {
        s == 0 || t >= s
    }

    /// Valid predicting cells in row order: `(s, t)` with `1 <= s <= t`.
    pub fn valid_predicting_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.n_streams)
            .flat_map(move |s| (s..=self.target_len).map(move |t| (s, t)))
    }

    /// Count of valid predicting cells: sum over t of min(t, n).
    pub fn valid_predicting_count(&self) -> usize {
        (1..=self.target_len)
            .map(|t| t.min(self.n_streams))
            .sum()
    }
}

/// The set of layout cells a query cell may attend to.
///
/// Main-stream cells see the causal, self-inclusive golden prefix.
/// A predicting cell (s, t) sees golden tokens up to position `t - s`,
/// one mask cell from each earlier predicting stream at the positions in
/// between, and itself (the [MASK] cell carries only mask-embedding and
/// position content, so self-visibility leaks nothing).
pub fn visible_set(
    layout: &StreamLayout,
    s: usize,
    t: usize,
) -> Result<Vec<(usize, usize)>, MaskError> {
    if s > layout.n_streams || t == 0 || t > layout.target_len || !layout.is_valid(s, t) {
        return Err(MaskError::InvalidCell { s, t });
    }
    if s == 0 {
        return Ok((1..=t).map(|u| (0, u)).collect());
    }
    let mut keys: Vec<(usize, usize)> = (1..=t - s).map(|u| (0, u)).collect();
    keys.extend((1..s).map(|j| (j, t - s + j)));
    keys.push((s, t));
    Ok(keys)
}

/// Additive attention-bias matrix over the rows of a layout, plus the
/// per-row validity flags.
#[derive(Debug, Clone)]
pub struct VisibilityMask {
    /// `[rows x rows]`; entry 0.0 where the key is visible, [`MASKED`]
    /// otherwise.
    pub bias: Array2<f32>,
    pub row_valid: Vec<bool>,
}

/// Per-cell validity flags in row order.
pub fn validity_mask(layout: &StreamLayout) -> Vec<bool> {
    (0..layout.rows())
        .map(|r| {
            let (s, t) = layout.cell(r);
            layout.is_valid(s, t)
        })
        .collect()
}

/// Fast mask builder. Evaluates the visibility predicate per (query, key)
/// pair; the per-cell [`visible_set`] enumeration is the oracle it is
/// tested against.
pub fn build_mask(layout: &StreamLayout) -> VisibilityMask {
    let rows = layout.rows();
    let mut bias = Array2::from_elem((rows, rows), MASKED);
    for q in 0..rows {
        let (s, t) = layout.cell(q);
        if !layout.is_valid(s, t) {
            continue; // invalid query rows stay fully masked
        }
        for k in 0..rows {
            let (ks, kt) = layout.cell(k);
            let visible = if s == 0 {
                ks == 0 && kt <= t
            } else if ks == 0 {
                kt <= t - s
            } else {
                ks <= s && kt == t - s + ks
            };
            if visible {
                bias[(q, k)] = 0.0;
            }
        }
    }
    VisibilityMask {
        bias,
        row_valid: validity_mask(layout),
    }
}

const RENDER_CAP: usize = 10_000;

fn render_class(mask: &VisibilityMask, q: usize, k: usize) -> u8 {
    if !mask.row_valid[q] || !mask.row_valid[k] {
        b'x'
    } else if mask.bias[(q, k)] == 0.0 {
        b'#'
    } else {
        b'.'
    }
}

/// Text grid over (query row, key row): `#` visible, `.` masked,
/// `x` invalid query or key.
pub fn render_mask_text(layout: &StreamLayout) -> Result<String, MaskError> {
    if layout.rows() > RENDER_CAP {
        return Err(MaskError::SizeCap {
            cells: layout.rows(),
            cap: RENDER_CAP,
        });
    }
    let mask = build_mask(layout);
    let rows = layout.rows();
    let mut out = String::with_capacity(rows * (rows + 1));
    for q in 0..rows {
        for k in 0..rows {
            out.push(render_class(&mask, q, k) as char);
        }
        out.push('\n');
    }
    Ok(out)
}

/// SVG 1.1 rendering of the same grid. Byte-stable for a fixed layout.
pub fn render_mask_svg(layout: &StreamLayout) -> Result<String, MaskError> {
    if layout.rows() > RENDER_CAP {
        return Err(MaskError::SizeCap {
            cells: layout.rows(),
            cap: RENDER_CAP,
        });
    }
    let mask = build_mask(layout);
    let rows = layout.rows();
    let cell = 12usize;
    let side = rows * cell;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{side}\" height=\"{side}\" viewBox=\"0 0 {side} {side}\">\n"
    ));
    svg.push_str(
        "<defs><pattern id=\"hatch\" width=\"4\" height=\"4\" patternUnits=\"userSpaceOnUse\">\
         <path d=\"M0,4 L4,0\" stroke=\"#999999\" stroke-width=\"1\"/></pattern></defs>\n",
    );
    for q in 0..rows {
        for k in 0..rows {
            let fill = match render_class(&mask, q, k) {
                b'#' => "#30506d",
                b'x' => "url(#hatch)",
                _ => "#ffffff",
            };
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{fill}\" stroke=\"#cccccc\" stroke-width=\"0.5\"/>\n",
                k * cell,
                q * cell,
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
