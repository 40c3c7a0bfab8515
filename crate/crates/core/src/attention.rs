//! Soft attention units over a set of positions: a recurrent unit that
//! scans the positions with an LSTM before scoring them, and a purely
//! convolutional unit that scores each position independently. Both share
//! the same read-out tail: per-glimpse softmax weights, weighted averaging
//! of the feature rows, and a final affine map with a learnable activation.
//!
//! The recurrent unit is order-aware: permuting its input positions does
//! not merely permute its attention weights. The convolutional unit is
//! exactly permutation-equivariant. That dichotomy is load-bearing and
//! pinned by tests.

use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Lstm, PreluSlope};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Dimensions of a recurrent attention unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RauConfig {
    /// Number of attended positions (grid cells or words).
    pub positions: usize,
    /// Channels of the joint input X.
    pub channels: usize,
    /// Channels after the per-position linear map that feeds the scan.
    pub scaled: usize,
    /// Hidden width of the scanning LSTM.
    pub hidden: usize,
    /// Number of parallel attention distributions.
    pub glimpses: usize,
    /// Width of the feature rows f that get pooled.
    pub feat_width: usize,
    /// Per-glimpse width of the final read-out.
    pub output: usize,
}

impl RauConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.positions,
            self.channels,
            self.scaled,
            self.hidden,
            self.glimpses,
            self.feat_width,
            self.output,
        ];
        if fields.iter().any(|&v| v == 0) {
            return Err(Error::config(format!(
                "attention config fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Width of the vector the unit emits.
    pub fn out_width(&self) -> usize {
        self.glimpses * self.output
    }
}

/// One normalized attention distribution per glimpse, detached from any
/// graph. Rows are convex weights over positions; masked positions hold
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub glimpses: usize,
    pub positions: usize,
    /// Row-major [glimpses x positions].
    pub weights: Vec<f64>,
    /// One label per position (cell coordinates, tokens); empty strings
    /// when unlabeled.
    pub labels: Vec<String>,
}

impl AttentionMap {
    pub fn new(glimpses: usize, positions: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != glimpses * positions {
            return Err(Error::dim(
                "attention_map",
                format!(
                    "{glimpses} x {positions} map needs {} weights, got {}",
                    glimpses * positions,
                    weights.len()
                ),
            ));
        }
        Ok(AttentionMap {
            glimpses,
            positions,
            weights,
            labels: vec![String::new(); positions],
        })
    }

    pub fn weight(&self, glimpse: usize, position: usize) -> f64 {
        self.weights[glimpse * self.positions + position]
    }

    pub fn glimpse_row(&self, glimpse: usize) -> &[f64] {
        &self.weights[glimpse * self.positions..(glimpse + 1) * self.positions]
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.positions {
            return Err(Error::dim(
                "attention_map",
                format!("{} labels for {} positions", labels.len(), self.positions),
            ));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Contract check: nonnegative weights, each row summing to 1 within
    /// 1e-9 over non-masked positions, masked positions exactly 0.
    pub fn validate(&self, mask: Option<&[bool]>) -> Result<()> {
        for g in 0..self.glimpses {
            let row = self.glimpse_row(g);
            let mut sum = 0.0;
            for (n, &w) in row.iter().enumerate() {
                let masked = mask.map_or(false, |m| m[n]);
                if masked && w != 0.0 {
                    return Err(Error::contract(
                        "attention_map",
                        format!("masked position {n} in glimpse {g} holds {w}"),
                    ));
                }
                if w < 0.0 {
                    return Err(Error::contract(
                        "attention_map",
                        format!("negative weight {w} at glimpse {g}, position {n}"),
                    ));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(
                    "attention_map",
                    format!("glimpse {g} sums to {sum}"),
                ));
            }
        }
        Ok(())
    }
}

/// Weighted-average pooling: row g of the result is the convex combination
/// of the rows of `f` under glimpse g's weights. Plain-data reference form,
/// written as the explicit double sum.
pub fn apply_attention(attn: &AttentionMap, f: &Tensor) -> Result<Tensor> {
    if f.rank() != 2 || f.shape()[0] != attn.positions {
        return Err(Error::dim(
            "apply_attention",
            format!(
                "feature shape {:?} vs {} attended positions",
                f.shape(),
                attn.positions
            ),
        ));
    }
    let width = f.shape()[1];
    let mut out = vec![0.0; attn.glimpses * width];
    for g in 0..attn.glimpses {
        for n in 0..attn.positions {
            let w = attn.weight(g, n);
            for d in 0..width {
                out[g * width + d] += w * f.data()[n * width + d];
            }
        }
    }
    Tensor::matrix(attn.glimpses, width, out)
}

// ── Shared read-out tail ────────────────────────────────────────────────────

/// The stages every attention unit ends with: per-glimpse masked softmax
/// over positions, weighted averaging of the feature rows, glimpse
/// concatenation, and an affine read-out with learnable slopes.
#[derive(Debug, Clone)]
struct AttentionTail {
    read: Conv1x1,
    slope: PreluSlope,
    glimpses: usize,
    feat_width: usize,
}

impl AttentionTail {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        glimpses: usize,
        feat_width: usize,
        output: usize,
    ) -> Result<Self> {
        let read = Conv1x1::register(
            store,
            &format!("{prefix}.read"),
            glimpses * feat_width,
            glimpses * output,
        )?;
        let slope = PreluSlope::register(store, &format!("{prefix}.read"), glimpses * output)?;
        Ok(AttentionTail {
            read,
            slope,
            glimpses,
            feat_width,
        })
    }

    /// `logits` is [K x G]; `f` is [K x feat_width]. Returns the read-out
    /// vector [G*output] and the detached attention map.
    fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        logits: Var,
        f: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, AttentionMap)> {
        let positions = g.shape(logits)[0];
        let weights_by_pos = g.softmax(logits, 0, mask)?;
        let weights = g.transpose(weights_by_pos)?;
        let pooled = g.matmul(weights, f)?;
        let flat = g.reshape(pooled, &[1, self.glimpses * self.feat_width])?;
        let read = self.read.forward(g, b, flat)?;
        let activated = self.slope.forward(g, b, read)?;
        let out = g.reshape(activated, &[self.read.out_ch])?;
        let map = AttentionMap::new(self.glimpses, positions, g.data(weights).to_vec())?;
        Ok((out, map))
    }

    fn param_count(&self) -> usize {
        self.read.param_count() + self.slope.param_count()
    }
}

// ── Recurrent attention unit ────────────────────────────────────────────────

/// Attention unit that scans the positions with a unidirectional LSTM
/// before scoring them, making the weights order-aware.
#[derive(Debug, Clone)]
pub struct RauParams {
    pub cfg: RauConfig,
    map: Conv1x1,
    map_slope: PreluSlope,
    scan: Lstm,
    glimpse: Conv1x1,
    glimpse_slope: PreluSlope,
    tail: AttentionTail,
}

impl RauParams {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: RauConfig) -> Result<Self> {
        cfg.validate()?;
        let map = Conv1x1::register(store, &format!("{prefix}.map"), cfg.channels, cfg.scaled)?;
        let map_slope = PreluSlope::register(store, &format!("{prefix}.map"), cfg.scaled)?;
        let scan = Lstm::register(store, &format!("{prefix}.scan"), cfg.scaled, cfg.hidden, 1)?;
        let glimpse = Conv1x1::register(
            store,
            &format!("{prefix}.glimpse"),
            cfg.hidden,
            cfg.glimpses,
        )?;
        let glimpse_slope =
            PreluSlope::register(store, &format!("{prefix}.glimpse"), cfg.glimpses)?;
        let tail = AttentionTail::register(store, prefix, cfg.glimpses, cfg.feat_width, cfg.output)?;
        Ok(RauParams {
            cfg,
            map,
            map_slope,
            scan,
            glimpse,
            glimpse_slope,
            tail,
        })
    }

    /// Scan-then-attend forward pass. `x` is the joint input [K x channels],
    /// `f` the feature rows [K x feat_width] to pool, `mask` marks excluded
    /// positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        f: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, AttentionMap)> {
        check_unit_inputs("rau_forward", g, x, f, self.cfg.positions, mask)?;
        let mapped = self.map.forward(g, b, x)?;
        let c = self.map_slope.forward(g, b, mapped)?;
        let h = self.scan.sequence(g, b, c)?;
        let scored = self.glimpse.forward(g, b, h)?;
        let logits = self.glimpse_slope.forward(g, b, scored)?;
        self.tail.forward(g, b, logits, f, mask)
    }

    pub fn param_count(&self) -> usize {
        self.map.param_count()
            + self.map_slope.param_count()
            + self.scan.param_count()
            + self.glimpse.param_count()
            + self.glimpse_slope.param_count()
            + self.tail.param_count()
    }
}

// ── Convolutional attention unit ────────────────────────────────────────────

/// Baseline unit scoring each position independently with two stacked
/// per-position linear maps; shares the read-out tail with the recurrent
/// unit.
#[derive(Debug, Clone)]
pub struct ConvAttnParams {
    pub positions: usize,
    pub channels: usize,
    pub hidden: usize,
    pub glimpses: usize,
    pub feat_width: usize,
    pub output: usize,
    score1: Conv1x1,
    score1_slope: PreluSlope,
    score2: Conv1x1,
    tail: AttentionTail,
}

impl ConvAttnParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        positions: usize,
        channels: usize,
        hidden: usize,
        glimpses: usize,
        feat_width: usize,
        output: usize,
    ) -> Result<Self> {
        if [positions, channels, hidden, glimpses, feat_width, output]
            .iter()
            .any(|&v| v == 0)
        {
            return Err(Error::config(
                "conv attention dims must be positive".to_string(),
            ));
        }
        let score1 = Conv1x1::register(store, &format!("{prefix}.score1"), channels, hidden)?;
        let score1_slope = PreluSlope::register(store, &format!("{prefix}.score1"), hidden)?;
        let score2 = Conv1x1::register(store, &format!("{prefix}.score2"), hidden, glimpses)?;
        let tail = AttentionTail::register(store, prefix, glimpses, feat_width, output)?;
        Ok(ConvAttnParams {
            positions,
            channels,
            hidden,
            glimpses,
            feat_width,
            output,
            score1,
            score1_slope,
            score2,
            tail,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        f: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, AttentionMap)> {
        check_unit_inputs("conv_attention", g, x, f, self.positions, mask)?;
        let hidden = self.score1.forward(g, b, x)?;
        let activated = self.score1_slope.forward(g, b, hidden)?;
        let logits = self.score2.forward(g, b, activated)?;
        self.tail.forward(g, b, logits, f, mask)
    }

    pub fn param_count(&self) -> usize {
        self.score1.param_count()
            + self.score1_slope.param_count()
            + self.score2.param_count()
            + self.tail.param_count()
    }
}

fn check_unit_inputs(
    op: &'static str,
    g: &Graph,
    x: Var,
    f: Var,
    positions: usize,
    mask: Option<&[bool]>,
) -> Result<()> {
    let xs = g.shape(x);
    let fs = g.shape(f);
    if xs.len() != 2 || fs.len() != 2 || xs[0] != positions || fs[0] != positions {
        return Err(Error::dim(
            op,
            format!("x {xs:?} and f {fs:?} must both have {positions} rows"),
        ));
    }
    if let Some(m) = mask {
        if m.len() != positions {
            return Err(Error::dim(
                op,
                format!("mask length {} vs {positions} positions", m.len()),
            ));
        }
    }
    Ok(())
}

/// Either unit behind one dispatch point, so models can swap kinds.
#[derive(Debug, Clone)]
pub enum AttentionUnit {
    Recurrent(RauParams),
    Conv(ConvAttnParams),
}

impl AttentionUnit {
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        f: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, AttentionMap)> {
        match self {
            AttentionUnit::Recurrent(p) => p.forward(g, b, x, f, mask),
            AttentionUnit::Conv(p) => p.forward(g, b, x, f, mask),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            AttentionUnit::Recurrent(p) => p.param_count(),
            AttentionUnit::Conv(p) => p.param_count(),
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            AttentionUnit::Recurrent(p) => p.cfg.out_width(),
            AttentionUnit::Conv(p) => p.glimpses * p.output,
        }
    }
}

// ── Parameter matching ──────────────────────────────────────────────────────

/// Result of sizing the conv unit against a recurrent unit's budget.
#[derive(Debug, Clone, Copy)]
pub struct MatchedSizing {
    /// Chosen hidden width for the conv unit's first scoring map.
    pub conv_hidden: usize,
    pub rau_count: usize,
    pub conv_count: usize,
    /// |conv - rau| / rau.
    pub rel_gap: f64,
    /// Whether the gap is within the 2% budget.
    pub matched: bool,
}

/// Trainable parameter count of a recurrent unit with this config, by
/// direct enumeration of its tensors.
pub fn rau_param_count(cfg: &RauConfig) -> usize {
    let map = cfg.channels * cfg.scaled + cfg.scaled + cfg.scaled;
    let scan = 4 * ((cfg.scaled + cfg.hidden) * cfg.hidden + cfg.hidden);
    let glimpse = cfg.hidden * cfg.glimpses + cfg.glimpses + cfg.glimpses;
    let tail = tail_param_count(cfg.glimpses, cfg.feat_width, cfg.output);
    map + scan + glimpse + tail
}

fn tail_param_count(glimpses: usize, feat_width: usize, output: usize) -> usize {
    let read_in = glimpses * feat_width;
    let read_out = glimpses * output;
    read_in * read_out + read_out + read_out
}

fn conv_param_count(cfg: &RauConfig, hidden: usize) -> usize {
    let score1 = cfg.channels * hidden + hidden + hidden;
    let score2 = hidden * cfg.glimpses + cfg.glimpses;
    score1 + score2 + tail_param_count(cfg.glimpses, cfg.feat_width, cfg.output)
}

/// Choose the conv unit's hidden width so its trainable parameter count
/// comes as close as possible to the recurrent unit's, aiming for a
/// relative gap of at most 2%. When no width lands inside the budget the
/// nearest sizing is returned with `matched` false.
pub fn match_parameter_counts(cfg: &RauConfig) -> Result<MatchedSizing> {
    cfg.validate()?;
    let rau = rau_param_count(cfg);
    let fixed = tail_param_count(cfg.glimpses, cfg.feat_width, cfg.output) + cfg.glimpses;
    let per_width = cfg.channels + 2 + cfg.glimpses;
    let ideal = if rau > fixed {
        ((rau - fixed) as f64 / per_width as f64).round() as usize
    } else {
        1
    };
    let mut best: Option<MatchedSizing> = None;
    for w in ideal.saturating_sub(2).max(1)..=ideal + 2 {
        let conv = conv_param_count(cfg, w);
        let gap = (conv as f64 - rau as f64).abs() / rau as f64;
        let cand = MatchedSizing {
            conv_hidden: w,
            rau_count: rau,
            conv_count: conv,
            rel_gap: gap,
            matched: gap <= 0.02,
        };
        if best.map_or(true, |b| cand.rel_gap < b.rel_gap) {
            best = Some(cand);
        }
    }
    Ok(best.expect("candidate range is never empty"))
}
