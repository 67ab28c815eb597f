//! Multiplication-count cost model for the self-attention variants.
//!
//! Only products of vectors and matrices are counted, and within attention
//! only the query-key scores:
//!
//! | type       | attention term          | dilation overhead                                   |
//! |------------|-------------------------|-----------------------------------------------------|
//! | full       | `N² d`                  |                                                     |
//! | restricted | `N R d`                 |                                                     |
//! | dilated    | `N (R + ⌈N/M⌉) d`       | AP: `N d B`; AP+PP: additionally `2 (B+1) d d_in ⌈N/M⌉` |
//!
//! [`estimate_paper`] evaluates these closed forms. [`estimate_exact`] sums
//! the clipped window size of every query instead of assuming `R` keys
//! everywhere, and equals the count an instrumented forward pass charges to
//! a [`MultiplyLedger`](crate::MultiplyLedger).

use serde::{Deserialize, Serialize};

use crate::attention::RestrictionWindow;
use crate::dilation::{DilationConfig, Mechanism};
use crate::encoder::AttentionType;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostQuery {
    pub n: u64,
    pub d_model: u64,
    pub attention: AttentionType,
    pub window: RestrictionWindow,
    pub dilation: DilationConfig,
}

impl CostQuery {
    pub fn full(n: u64, d_model: u64) -> Self {
        Self {
            n,
            d_model,
            attention: AttentionType::Full,
            window: RestrictionWindow::new(0, 0),
            dilation: DilationConfig::none(),
        }
    }

    pub fn restricted(n: u64, d_model: u64, window: RestrictionWindow) -> Self {
        Self {
            attention: AttentionType::Restricted,
            window,
            ..Self::full(n, d_model)
        }
    }

    pub fn dilated(n: u64, d_model: u64, window: RestrictionWindow, dilation: DilationConfig) -> Self {
        Self {
            attention: AttentionType::Dilated,
            window,
            dilation,
            ..Self::full(n, d_model)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_model == 0 {
            return Err(Error::InvalidConfig(
                "sequence length and d_model must be positive".into(),
            ));
        }
        if self.attention == AttentionType::Dilated {
            self.dilation.validate()?;
        }
        Ok(())
    }

    fn mechanism(&self) -> Mechanism {
        match self.attention {
            AttentionType::Dilated => self.dilation.mechanism,
            _ => Mechanism::None,
        }
    }

    /// Length of the dilation sequence, zero without dilation.
    pub fn dilation_len(&self) -> u64 {
        match self.mechanism() {
            Mechanism::None => 0,
            _ => self.n.div_ceil(self.dilation.chunk as u64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total: u64,
    pub attention_term: u64,
    pub xi_ap: u64,
    pub xi_pp: u64,
}

impl CostReport {
    fn new(attention_term: u64, xi_ap: u64, xi_pp: u64) -> Result<Self> {
        let total = attention_term
            .checked_add(xi_ap)
            .and_then(|t| t.checked_add(xi_pp))
            .ok_or(Error::Overflow("total cost"))?;
        Ok(Self {
            total,
            attention_term,
            xi_ap,
            xi_pp,
        })
    }

    /// Millions of multiplications, rounded half away from zero to one
    /// decimal, e.g. `7.6M`.
    pub fn display(&self) -> String {
        display_millions(self.total)
    }
}

pub fn display_millions(total: u64) -> String {
    let tenths = (total as u128 + 50_000) / 100_000;
    format!("{}.{}M", tenths / 10, tenths % 10)
}

fn mul(parts: &[u64], what: &'static str) -> Result<u64> {
    parts
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or(Error::Overflow(what))
}

fn dilation_overhead(q: &CostQuery) -> Result<(u64, u64)> {
    let mech = q.mechanism();
    let b = q.dilation.pool_heads as u64;
    let xi_ap = if mech.uses_attn_pool() {
        mul(&[q.n, q.d_model, b], "attention pooling cost")?
    } else {
        0
    };
    let xi_pp = if mech.uses_post_process() {
        mul(
            &[2, b + 1, q.d_model, q.dilation.d_in as u64, q.dilation_len()],
            "post-processing cost",
        )?
    } else {
        0
    };
    Ok((xi_ap, xi_pp))
}

/// Closed-form cost assuming every query sees exactly `R` window keys.
pub fn estimate_paper(q: &CostQuery) -> Result<CostReport> {
    q.validate()?;
    let attention_term = match q.attention {
        AttentionType::Full => mul(&[q.n, q.n, q.d_model], "attention cost")?,
        AttentionType::Restricted => mul(&[q.n, q.window.size() as u64, q.d_model], "attention cost")?,
        AttentionType::Dilated => {
            let keys = (q.window.size() as u64)
                .checked_add(q.dilation_len())
                .ok_or(Error::Overflow("keys per query"))?;
            mul(&[q.n, keys, q.d_model], "attention cost")?
        }
    };
    let (xi_ap, xi_pp) = dilation_overhead(q)?;
    CostReport::new(attention_term, xi_ap, xi_pp)
}

/// Total number of window keys over all queries, with edge clipping.
fn clipped_window_keys(n: u64, window: RestrictionWindow) -> Result<u64> {
    let (lb, la) = (window.look_back as u64, window.look_ahead as u64);
    // keys(i) = min(i, lb) + min(n-1-i, la) + 1, summed over i
    let side = |reach: u64| -> Option<u64> {
        let full = n.saturating_sub(reach); // queries that see the whole reach
        let partial = reach.min(n); // the first min(reach, n) queries see 0, 1, ..
        partial
            .checked_mul(partial.saturating_sub(1))
            .map(|t| t / 2)?
            .checked_add(full.checked_mul(reach)?)
    };
    side(lb)
        .zip(side(la))
        .and_then(|(a, b)| a.checked_add(b)?.checked_add(n))
        .ok_or(Error::Overflow("clipped window keys"))
}

/// Cost with clipped windows; equals what an instrumented forward pass counts.
pub fn estimate_exact(q: &CostQuery) -> Result<CostReport> {
    q.validate()?;
    let attention_term = match q.attention {
        AttentionType::Full => mul(&[q.n, q.n, q.d_model], "attention cost")?,
        AttentionType::Restricted | AttentionType::Dilated => {
            let window_keys = clipped_window_keys(q.n, q.window)?;
            let dilation_keys = mul(&[q.n, q.dilation_len()], "dilation keys")?;
            let keys = window_keys.checked_add(dilation_keys).ok_or(Error::Overflow("keys"))?;
            mul(&[keys, q.d_model], "attention cost")?
        }
    };
    let (xi_ap, xi_pp) = dilation_overhead(q)?;
    CostReport::new(attention_term, xi_ap, xi_pp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Average utterance of 195 frames, `d_model = 256`.
    Wsj,
    /// Average utterance of 310 frames, `d_model = 512`.
    Librispeech,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsj" => Ok(Preset::Wsj),
            "librispeech" => Ok(Preset::Librispeech),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

/// Bottleneck width used by every post-processing row of the presets.
pub const PRESET_D_IN: usize = 16;

/// One row of a preset: `(mechanism or None for restricted/full, B, R, M, published millions)`.
type PresetRow = (Option<Mechanism>, usize, Option<usize>, Option<usize>, f64);

const LIBRISPEECH_ROWS: &[PresetRow] = &[
    (None, 0, None, None, 52.0),
    (None, 0, Some(41), None, 6.5),
    (None, 0, Some(25), None, 4.0),
    (None, 0, Some(13), None, 2.1),
    (Some(Mechanism::Subsample), 1, Some(25), Some(20), 6.5),
    (Some(Mechanism::MeanPool), 1, Some(25), Some(20), 6.5),
    (Some(Mechanism::AttnPool), 1, Some(25), Some(20), 6.7),
    (Some(Mechanism::AttnPool), 2, Some(25), Some(20), 6.8),
    (Some(Mechanism::AttnPoolPp), 1, Some(25), Some(20), 7.2),
    (Some(Mechanism::AttnPoolPp), 2, Some(25), Some(20), 7.6),
    (Some(Mechanism::AttnPoolPp), 2, Some(17), Some(19), 6.6),
    (Some(Mechanism::Subsample), 1, Some(13), Some(40), 3.3),
    (Some(Mechanism::MeanPool), 1, Some(13), Some(40), 3.3),
    (Some(Mechanism::AttnPool), 1, Some(11), Some(34), 3.5),
    (Some(Mechanism::AttnPoolPp), 2, Some(11), Some(50), 3.5),
];

const WSJ_ROWS: &[PresetRow] = &[
    (None, 0, None, None, 9.8),
    (None, 0, Some(35), None, 1.8),
    (None, 0, Some(21), None, 1.1),
    (None, 0, Some(15), None, 0.8),
    (None, 0, Some(13), None, 0.7),
    (None, 0, Some(11), None, 0.6),
    (Some(Mechanism::Subsample), 1, Some(15), Some(10), 1.8),
    (Some(Mechanism::MeanPool), 1, Some(15), Some(10), 1.8),
    (Some(Mechanism::AttnPool), 1, Some(15), Some(11), 1.8),
    (Some(Mechanism::AttnPool), 2, Some(15), Some(12), 1.8),
    (Some(Mechanism::AttnPoolPp), 1, Some(21), Some(20), 1.8),
    (Some(Mechanism::AttnPoolPp), 2, Some(21), Some(27), 1.8),
    (Some(Mechanism::Subsample), 1, Some(11), Some(20), 1.1),
    (Some(Mechanism::MeanPool), 1, Some(11), Some(20), 1.1),
    (Some(Mechanism::AttnPool), 1, Some(11), Some(22), 1.1),
    (Some(Mechanism::AttnPool), 2, Some(11), Some(28), 1.1),
    (Some(Mechanism::AttnPoolPp), 1, Some(9), Some(24), 1.1),
    (Some(Mechanism::AttnPoolPp), 2, Some(9), Some(33), 1.1),
];

impl Preset {
    pub fn sequence_length(self) -> u64 {
        match self {
            Preset::Wsj => 195,
            Preset::Librispeech => 310,
        }
    }

    pub fn d_model(self) -> u64 {
        match self {
            Preset::Wsj => 256,
            Preset::Librispeech => 512,
        }
    }

    fn rows(self) -> &'static [PresetRow] {
        match self {
            Preset::Wsj => WSJ_ROWS,
            Preset::Librispeech => LIBRISPEECH_ROWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub r: Option<usize>,
    pub m: Option<usize>,
    pub report: CostReport,
    /// Published value in millions, for presets.
    pub published: Option<f64>,
}

impl TableRow {
    pub fn record(&self) -> TableRecord {
        TableRecord {
            label: self.label.clone(),
            r: self.r,
            m: self.m,
            total: self.report.total,
            attention_term: self.report.attention_term,
            xi_ap: self.report.xi_ap,
            xi_pp: self.report.xi_pp,
            display: self.report.display(),
        }
    }

    /// Human-readable note when the computed value rounds differently from
    /// the published one.
    pub fn note(&self) -> Option<String> {
        let published = self.published?;
        let printed = format!("{published:.1}M");
        (printed != self.report.display()).then(|| {
            format!(
                "{} (R={}, M={}): formula gives {} ({}), published table lists {}",
                self.label,
                self.r.map_or("-".into(), |r| r.to_string()),
                self.m.map_or("-".into(), |m| m.to_string()),
                self.report.display(),
                self.report.total,
                printed
            )
        })
    }
}

/// Every row of a preset table, evaluated with [`estimate_paper`].
pub fn table_generate(preset: Preset) -> Result<Vec<TableRow>> {
    let (n, d) = (preset.sequence_length(), preset.d_model());
    preset
        .rows()
        .iter()
        .map(|&(mech, b, r, m, published)| {
            let (label, query) = match (mech, r, m) {
                (None, None, _) => ("full-sequence".to_string(), CostQuery::full(n, d)),
                (None, Some(r), _) => (
                    "restricted".to_string(),
                    CostQuery::restricted(n, d, RestrictionWindow::symmetric(r)?),
                ),
                (Some(mech), Some(r), Some(m)) => {
                    let dil = DilationConfig::new(mech, m).with_pool_heads(b).with_d_in(PRESET_D_IN);
                    (
                        format!("dilated {}", mech.label(b)),
                        CostQuery::dilated(n, d, RestrictionWindow::symmetric(r)?, dil),
                    )
                }
                _ => unreachable!("preset rows are well formed"),
            };
            Ok(TableRow {
                label,
                r,
                m,
                report: estimate_paper(&query)?,
                published: Some(published),
            })
        })
        .collect()
}

/// A single row for an arbitrary query.
pub fn table_custom(q: &CostQuery, exact: bool) -> Result<TableRow> {
    let report = if exact { estimate_exact(q)? } else { estimate_paper(q)? };
    let (label, m) = match q.attention {
        AttentionType::Full => ("full-sequence".to_string(), None),
        AttentionType::Restricted => ("restricted".to_string(), None),
        AttentionType::Dilated => (
            format!("dilated {}", q.dilation.mechanism.label(q.dilation.pool_heads)),
            Some(q.dilation.chunk),
        ),
    };
    Ok(TableRow {
        label,
        r: (q.attention != AttentionType::Full).then(|| q.window.size()),
        m,
        report,
        published: None,
    })
}

/// One table row as emitted in CSV and JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRecord {
    pub label: String,
    #[serde(rename = "R")]
    pub r: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub total: u64,
    pub attention_term: u64,
    pub xi_ap: u64,
    pub xi_pp: u64,
    pub display: String,
}

pub const CSV_HEADER: &str = "label,R,M,total,attention_term,xi_ap,xi_pp,display";

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn render_csv(records: &[TableRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.label,
            opt(r.r),
            opt(r.m),
            r.total,
            r.attention_term,
            r.xi_ap,
            r.xi_pp,
            r.display
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<TableRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("missing or unexpected CSV header".into()));
    }
    let int = |s: &str| {
        s.parse::<u64>()
            .map_err(|e| Error::Format(format!("bad integer `{s}`: {e}")))
    };
    let opt_int = |s: &str| -> Result<Option<usize>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|e| Error::Format(format!("bad integer `{s}`: {e}")))
        }
    };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("expected 8 fields, got {}: `{line}`", f.len())));
            }
            Ok(TableRecord {
                label: f[0].to_string(),
                r: opt_int(f[1])?,
                m: opt_int(f[2])?,
                total: int(f[3])?,
                attention_term: int(f[4])?,
                xi_ap: int(f[5])?,
                xi_pp: int(f[6])?,
                display: f[7].to_string(),
            })
        })
        .collect()
}

pub fn render_json(records: &[TableRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("records serialise");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<Vec<TableRecord>> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("bad table JSON: {e}")))
}

pub fn render_markdown(rows: &[TableRow]) -> String {
    let with_published = rows.iter().any(|r| r.published.is_some());
    let mut out = String::from("| type | R | M | multiplications | attention | xi_AP | xi_PP | M (display) |");
    if with_published {
        out.push_str(" published |");
    }
    out.push('\n');
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|");
    if with_published {
        out.push_str("---:|");
    }
    out.push('\n');
    for row in rows {
        let dash = |v: Option<usize>| v.map_or("-".into(), |x| x.to_string());
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            row.label,
            dash(row.r),
            dash(row.m),
            row.report.total,
            row.report.attention_term,
            row.report.xi_ap,
            row.report.xi_pp,
            row.report.display()
        ));
        if with_published {
            out.push_str(&format!(
                " {} |",
                row.published.map_or("-".into(), |p| format!("{p:.1}M"))
            ));
        }
        out.push('\n');
    }
    let notes: Vec<String> = rows.iter().filter_map(TableRow::note).collect();
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out.push_str(&format!("Note: {n}\n"));
        }
    }
    out
}

/// Per-frame cost of producing the next self-attention output in streaming
/// mode, for the unbounded-look-back baseline and for dilated attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamingCost {
    pub past_frames: u64,
    pub baseline: u64,
    pub dilated: u64,
    pub ratio: f64,
}

/// Published speed-up factors at 4 s and 8 s of past input:
/// `(seconds, without new chunk, with new chunk)`.
pub const PUBLISHED_STREAMING_FACTORS: [(f64, f64, f64); 2] = [(4.0, 7.2, 1.25), (8.0, 11.8, 2.4)];

/// The streaming configuration the published factors refer to: look-back 9,
/// look-ahead 1, AP-2+PP with `M = 15`, `d_in = 16`, `d_model = 512`.
pub fn streaming_preset() -> CostQuery {
    CostQuery::dilated(
        1,
        512,
        RestrictionWindow::new(9, 1),
        DilationConfig::new(Mechanism::AttnPoolPp, 15)
            .with_pool_heads(2)
            .with_d_in(16),
    )
}

/// Dilation work needed to summarise one new chunk.
pub fn chunk_dilation_cost(q: &CostQuery) -> Result<u64> {
    let mech = q.mechanism();
    let b = q.dilation.pool_heads as u64;
    let mut cost = 0;
    if mech.uses_attn_pool() {
        cost += mul(&[q.dilation.chunk as u64, q.d_model, b], "chunk pooling cost")?;
    }
    if mech.uses_post_process() {
        cost += mul(
            &[2, b + 1, q.d_model, q.dilation.d_in as u64],
            "chunk post-processing cost",
        )?;
    }
    Ok(cost)
}

/// Streaming cost for the query frame that has `past_seconds` of input
/// before it. The baseline attends to every past frame plus the look-ahead;
/// dilated attention attends to its clipped window plus one summary per
/// completed chunk, and pays [`chunk_dilation_cost`] when `chunk_event` is set.
/// `q.n` is ignored.
pub fn streaming_report(past_seconds: f64, frame_ms: f64, q: &CostQuery, chunk_event: bool) -> Result<StreamingCost> {
    if !(past_seconds >= 0.0 && past_seconds.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "past duration must be non-negative, got {past_seconds}"
        )));
    }
    if !(frame_ms > 0.0 && frame_ms.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "frame period must be positive, got {frame_ms}"
        )));
    }
    if q.d_model == 0 {
        return Err(Error::InvalidConfig("d_model must be positive".into()));
    }
    q.dilation.validate()?;
    let past = (past_seconds * 1000.0 / frame_ms).round() as u64;
    let (lb, la) = (q.window.look_back as u64, q.window.look_ahead as u64);
    let baseline = mul(&[past + la + 1, q.d_model], "streaming baseline")?;
    let chunks = match q.dilation.mechanism {
        Mechanism::None => 0,
        _ => (past + 1) / q.dilation.chunk as u64,
    };
    let mut dilated = mul(&[lb.min(past) + la + 1 + chunks, q.d_model], "streaming dilated cost")?;
    if chunk_event {
        dilated += chunk_dilation_cost(q)?;
    }
    Ok(StreamingCost {
        past_frames: past,
        baseline,
        dilated,
        ratio: baseline as f64 / dilated as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(r: usize) -> RestrictionWindow {
        RestrictionWindow::symmetric(r).unwrap()
    }

    fn ap_pp(m: usize, b: usize) -> DilationConfig {
        DilationConfig::new(Mechanism::AttnPoolPp, m)
            .with_pool_heads(b)
            .with_d_in(16)
    }

    #[test]
    fn closed_form_values() {
        let r = estimate_paper(&CostQuery::restricted(310, 512, sym(41))).unwrap();
        assert_eq!(r.total, 310 * 41 * 512);
        assert_eq!(r.display(), "6.5M");

        let r = estimate_paper(&CostQuery::dilated(310, 512, sym(25), ap_pp(20, 2))).unwrap();
        assert_eq!(r.attention_term, 310 * (25 + 16) * 512);
        assert_eq!(r.xi_ap, 317_440);
        assert_eq!(r.xi_pp, 786_432);
        assert_eq!(r.total, 7_611_392);
        assert_eq!(r.display(), "7.6M");

        let sub = DilationConfig::new(Mechanism::Subsample, 40);
        let r = estimate_paper(&CostQuery::dilated(310, 512, sym(13), sub)).unwrap();
        assert_eq!(r.total, 3_333_120);
        assert_eq!(r.display(), "3.3M");

        let r = estimate_paper(&CostQuery::full(310, 512)).unwrap();
        assert_eq!(r.total, 49_203_200);
        assert_eq!(r.display(), "49.2M");
    }

    #[test]
    fn display_rounds_half_away_from_zero() {
        assert_eq!(display_millions(6_549_999), "6.5M");
        assert_eq!(display_millions(6_550_000), "6.6M");
        assert_eq!(display_millions(49_999), "0.0M");
        assert_eq!(display_millions(1), "0.0M");
    }

    #[test]
    fn exact_estimate_cases() {
        let full = estimate_exact(&CostQuery::restricted(20, 8, RestrictionWindow::new(19, 19))).unwrap();
        assert_eq!(full.total, 20 * 20 * 8);

        let w = RestrictionWindow::new(3, 2);
        let q = CostQuery::restricted(200, 16, w);
        let (paper, exact) = (estimate_paper(&q).unwrap().total, estimate_exact(&q).unwrap().total);
        assert!(exact < paper);
        assert!(paper - exact <= ((3 + 2) * (3 + 2) * 16) as u64);

        let brute: u64 = (0..200).map(|n| w.span(n, 200)).map(|(s, e)| (e - s) as u64).sum();
        assert_eq!(clipped_window_keys(200, w).unwrap(), brute);
    }

    #[test]
    fn clipped_keys_match_enumeration() {
        for n in 1..20u64 {
            for lb in 0..25 {
                for la in 0..25 {
                    let w = RestrictionWindow::new(lb, la);
                    let brute: u64 = (0..n as usize)
                        .map(|i| w.span(i, n as usize))
                        .map(|(s, e)| (e - s) as u64)
                        .sum();
                    assert_eq!(clipped_window_keys(n, w).unwrap(), brute, "n={n} lb={lb} la={la}");
                }
            }
        }
    }

    #[test]
    fn single_frame_collapse() {
        let f = estimate_paper(&CostQuery::full(1, 1)).unwrap();
        let r = estimate_paper(&CostQuery::restricted(1, 1, sym(1))).unwrap();
        let d = estimate_paper(&CostQuery::dilated(
            1,
            1,
            sym(1),
            DilationConfig::new(Mechanism::Subsample, 1),
        ))
        .unwrap();
        assert_eq!(f.total, 1);
        assert_eq!(r.total, 1);
        assert_eq!(d.attention_term, 2);
    }

    #[test]
    fn overflow_is_reported() {
        let q = CostQuery::full(u64::MAX / 2, 3);
        assert!(matches!(estimate_paper(&q), Err(Error::Overflow(_))));
    }

    #[test]
    fn presets_have_expected_rows() {
        let libri = table_generate(Preset::Librispeech).unwrap();
        assert_eq!(libri.len(), 15);
        let wsj = table_generate(Preset::Wsj).unwrap();
        assert_eq!(wsj.len(), 18);
        let r21 = wsj.iter().find(|r| r.label == "restricted" && r.r == Some(21)).unwrap();
        assert_eq!(r21.report.total, 1_048_320);
        let r35 = wsj.iter().find(|r| r.label == "restricted" && r.r == Some(35)).unwrap();
        assert_eq!(r35.report.total, 1_747_200);
        assert_eq!(r35.report.display(), "1.7M");
        assert!(r35.note().unwrap().contains("1.8M"));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let records: Vec<TableRecord> = table_generate(Preset::Librispeech)
            .unwrap()
            .iter()
            .map(TableRow::record)
            .collect();
        let csv = render_csv(&records);
        assert_eq!(render_csv(&parse_csv(&csv).unwrap()), csv);
        let json = render_json(&records);
        assert_eq!(render_json(&parse_json(&json).unwrap()), json);
        assert!(csv
            .lines()
            .any(|l| l == "dilated AP-2+PP,25,20,7611392,6507520,317440,786432,7.6M"));
    }

    #[test]
    fn streaming_cost_behaviour() {
        let q = streaming_preset();
        let zero = streaming_report(0.0, 40.0, &q, false).unwrap();
        assert_eq!(zero.past_frames, 0);
        assert!((zero.ratio - 1.0).abs() < 1e-12);

        let four = streaming_report(4.0, 40.0, &q, false).unwrap();
        let four_event = streaming_report(4.0, 40.0, &q, true).unwrap();
        assert_eq!(four.past_frames, 100);
        assert_eq!(four.baseline, 102 * 512);
        assert_eq!(four.dilated, (11 + 6) * 512);
        assert!(four.ratio > four_event.ratio);
        assert_eq!(four_event.dilated - four.dilated, 15 * 512 * 2 + 2 * 3 * 512 * 16);

        let eight = streaming_report(8.0, 40.0, &q, false).unwrap();
        assert!(eight.ratio > four.ratio);

        assert!(streaming_report(-1.0, 40.0, &q, false).is_err());
        assert!(streaming_report(1.0, 0.0, &q, false).is_err());
    }

    proptest! {
        #[test]
        fn estimate_orderings(n in 1u64..500, lb in 0usize..40, la in 0usize..40, m in 1usize..60, b in 1usize..4, mech_idx in 1usize..5, d in 1u64..64) {
            let w = RestrictionWindow::new(lb, la);
            let dil = DilationConfig::new(Mechanism::ALL[mech_idx], m).with_pool_heads(b).with_d_in(16);
            let restricted = CostQuery::restricted(n, d, w);
            let dilated = CostQuery::dilated(n, d, w, dil);
            let p_r = estimate_paper(&restricted).unwrap();
            let p_d = estimate_paper(&dilated).unwrap();
            prop_assert!(p_d.total >= p_r.total);
            if n > m as u64 {
                prop_assert!(p_d.total > p_r.total);
            }
            if w.size() as u64 <= n {
                prop_assert!(estimate_paper(&CostQuery::full(n, d)).unwrap().total >= p_r.total);
            }
            let e_r = estimate_exact(&restricted).unwrap();
            let e_d = estimate_exact(&dilated).unwrap();
            prop_assert!(e_r.total <= p_r.total);
            prop_assert!(e_d.total <= p_d.total);
            if lb == 0 && la == 0 {
                prop_assert_eq!(e_r, p_r);
                prop_assert_eq!(e_d, p_d);
            }
        }

        #[test]
        fn estimate_monotonicity(n in 1u64..400, r in 0usize..20, m in 1usize..50, b in 1usize..4, d in 1u64..64, mech_idx in 1usize..5) {
            let mech = Mechanism::ALL[mech_idx];
            let q = |n: u64, r: usize, m: usize, b: usize, d: u64| {
                let dil = DilationConfig::new(mech, m).with_pool_heads(b).with_d_in(16);
                estimate_paper(&CostQuery::dilated(n, d, sym(2 * r + 1), dil)).unwrap().total
            };
            let base = q(n, r, m, b, d);
            prop_assert!(q(n + 1, r, m, b, d) >= base);
            prop_assert!(q(n, r + 1, m, b, d) >= base);
            prop_assert!(q(n, r, m, b, d + 1) >= base);
            prop_assert!(q(n, r, m, b + 1, d) >= base);
            prop_assert!(q(n, r, m + 1, b, d) <= base);
        }
    }
}
