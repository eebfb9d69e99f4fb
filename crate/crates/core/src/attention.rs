//! Mechanistic head analysis via minimal pairs: perturb one span of an
//! email, diff the per-head attention maps, rank the heads that react,
//! and render paper-style heatmaps.
//!
//! Alignment works at the byte level: baseline and variant must be
//! identical outside the perturbed span, so tokens outside it pair up
//! one-to-one by offset. Cells whose query and key both align contribute
//! to `delta`; attention into the perturbed span feeds `focus_mass`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::EmailRecord;
use crate::error::{Error, Result};
use crate::model::{AttentionTensor, Model};
use crate::tokenizer::{encode, TokenSeq};

pub const GREETING_TEXT: &str = "Dear Valued Customer,\n";
pub const LINK_TEXT: &str = "click here: http://192.168.12.34/verify";
pub const THREAT_TEXT: &str = "\nYou must act now or face permanent suspension.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Perturbation {
    GenericGreeting,
    SuspiciousLink,
    UrgentThreat,
    Custom,
}

impl Perturbation {
    pub fn as_str(self) -> &'static str {
        match self {
            Perturbation::GenericGreeting => "GENERIC_GREETING",
            Perturbation::SuspiciousLink => "SUSPICIOUS_LINK",
            Perturbation::UrgentThreat => "URGENT_THREAT",
            Perturbation::Custom => "CUSTOM",
        }
    }
}

/// A baseline email and a variant that differs only inside `span` (byte
/// range in the variant). `base_span` is the byte range the span replaced
/// in the baseline; empty for pure insertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub baseline: EmailRecord,
    pub variant: EmailRecord,
    pub perturbation: Perturbation,
    pub span: (usize, usize),
    pub base_span: (usize, usize),
}

impl MinimalPair {
    /// The degenerate pair with variant == baseline; used to verify that
    /// identical inputs yield exactly zero deltas.
    pub fn identity(record: &EmailRecord) -> MinimalPair {
        let len = record.text.len();
        MinimalPair {
            baseline: record.clone(),
            variant: record.clone(),
            perturbation: Perturbation::Custom,
            span: (len, len),
            base_span: (len, len),
        }
    }

    /// Byte-level check that the two texts differ only inside the span.
    pub fn validate(&self) -> Result<()> {
        let b = &self.baseline.text;
        let v = &self.variant.text;
        let ok = self.base_span.0 <= self.base_span.1
            && self.span.0 <= self.span.1
            && self.base_span.1 <= b.len()
            && self.span.1 <= v.len()
            && self.base_span.0 == self.span.0
            && b[..self.base_span.0] == v[..self.span.0]
            && b[self.base_span.1..] == v[self.span.1..];
        if ok {
            Ok(())
        } else {
            Err(Error::new(
                "attention",
                "ATTENTION_ALIGNMENT",
                "baseline and variant differ outside the declared span",
            ))
        }
    }
}

fn variant_record(base: &EmailRecord, text: String, p: Perturbation) -> EmailRecord {
    EmailRecord {
        id: format!("{}#{}", base.id, p.as_str().to_lowercase()),
        text,
        label: base.label,
        source: base.source.clone(),
        split: base.split,
    }
}

/// Builds the standard minimal pairs: a generic greeting inserted after
/// the subject line, a named link replaced by an IP-address link, or an
/// urgent threat appended.
pub fn make_minimal_pair(base: &EmailRecord, perturbation: Perturbation) -> Result<MinimalPair> {
    let text = &base.text;
    let pair = match perturbation {
        Perturbation::GenericGreeting => {
            let nl = text.find('\n').ok_or_else(|| {
                Error::new(
                    "attention",
                    "ATTENTION_NO_ANCHOR",
                    "generic-greeting insertion needs a subject line (no newline found)",
                )
            })?;
            let at = nl + 1;
            let mut v = String::with_capacity(text.len() + GREETING_TEXT.len());
            v.push_str(&text[..at]);
            v.push_str(GREETING_TEXT);
            v.push_str(&text[at..]);
            MinimalPair {
                baseline: base.clone(),
                variant: variant_record(base, v, perturbation),
                perturbation,
                span: (at, at + GREETING_TEXT.len()),
                base_span: (at, at),
            }
        }
        Perturbation::SuspiciousLink => {
            let start = text
                .find("http://")
                .or_else(|| text.find("https://"))
                .ok_or_else(|| {
                    Error::new(
                        "attention",
                        "ATTENTION_NO_ANCHOR",
                        "link substitution needs an existing http(s) link",
                    )
                })?;
            let end = text[start..]
                .find(char::is_whitespace)
                .map(|i| start + i)
                .unwrap_or(text.len());
            let mut v = String::with_capacity(text.len());
            v.push_str(&text[..start]);
            v.push_str(LINK_TEXT);
            v.push_str(&text[end..]);
            MinimalPair {
                baseline: base.clone(),
                variant: variant_record(base, v, perturbation),
                perturbation,
                span: (start, start + LINK_TEXT.len()),
                base_span: (start, end),
            }
        }
        Perturbation::UrgentThreat => {
            let at = text.len();
            let mut v = text.clone();
            v.push_str(THREAT_TEXT);
            MinimalPair {
                baseline: base.clone(),
                variant: variant_record(base, v, perturbation),
                perturbation,
                span: (at, at + THREAT_TEXT.len()),
                base_span: (at, at),
            }
        }
        Perturbation::Custom => {
            return Err(Error::new(
                "attention",
                "ATTENTION_EMPTY_SPAN",
                "custom pairs are built with make_custom_pair",
            ))
        }
    };
    pair.validate()?;
    Ok(pair)
}

/// Custom insertion pair: `insert` spliced in at byte `at`.
pub fn make_custom_pair(base: &EmailRecord, insert: &str, at: usize) -> Result<MinimalPair> {
    if insert.is_empty() {
        return Err(Error::new(
            "attention",
            "ATTENTION_EMPTY_SPAN",
            "custom perturbation with empty span text is a no-op pair",
        ));
    }
    if at > base.text.len() || !base.text.is_char_boundary(at) {
        return Err(Error::new(
            "attention",
            "ATTENTION_NO_ANCHOR",
            format!("insertion offset {at} is not a char boundary of the base text"),
        ));
    }
    let mut v = String::with_capacity(base.text.len() + insert.len());
    v.push_str(&base.text[..at]);
    v.push_str(insert);
    v.push_str(&base.text[at..]);
    let pair = MinimalPair {
        baseline: base.clone(),
        variant: variant_record(base, v, Perturbation::Custom),
        perturbation: Perturbation::Custom,
        span: (at, at + insert.len()),
        base_span: (at, at),
    };
    pair.validate()?;
    Ok(pair)
}

/// Per-head reaction to a minimal pair: `delta` is the mean absolute
/// attention change over aligned cells, `focus_mass` the variant's mean
/// attention mass into the perturbed span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDelta {
    pub layer: usize,
    pub head: usize,
    pub delta: f64,
    pub focus_mass: f64,
}

fn encode_checked(model: &Model, text: &str) -> Result<TokenSeq> {
    let seq = encode(&model.vocab, text, usize::MAX);
    if seq.len() > model.cfg.max_len {
        return Err(Error::new(
            "model",
            "MODEL_SEQ_TOO_LONG",
            format!(
                "text tokenizes to {} tokens, beyond max_len {}",
                seq.len(),
                model.cfg.max_len
            ),
        ));
    }
    Ok(seq)
}

struct Alignment {
    /// (variant position, baseline position) pairs, BOS included.
    pairs: Vec<(usize, usize)>,
    /// Variant positions whose token lies inside the perturbed span.
    span_positions: Vec<usize>,
}

fn align(pair: &MinimalPair, base_seq: &TokenSeq, var_seq: &TokenSeq) -> Result<Alignment> {
    pair.validate()?;
    let (vs, ve) = pair.span;
    let (bs, be) = pair.base_span;
    let shift = (ve - vs) as isize - (be - bs) as isize;

    let mut span_positions = Vec::new();
    let mut pairs = Vec::new();
    // BOS aligns with BOS.
    pairs.push((0usize, 0usize));
    let mut expected: Vec<(usize, (usize, usize))> = Vec::new(); // (baseline pos, expected offsets)
    for (bp, &(s, e)) in base_seq.offsets.iter().enumerate().skip(1) {
        if e <= bs {
            expected.push((bp, (s, e)));
        } else if s >= be {
            expected.push((
                bp,
                (
                    (s as isize + shift) as usize,
                    (e as isize + shift) as usize,
                ),
            ));
        }
        // baseline tokens overlapping the replaced region are unmatched
    }
    let mut iter = expected.into_iter();
    let mut next = iter.next();
    for (vp, &(s, e)) in var_seq.offsets.iter().enumerate().skip(1) {
        if s >= vs && e <= ve {
            span_positions.push(vp);
            continue;
        }
        match next {
            Some((bp, (es, ee))) if es == s && ee == e => {
                if base_seq.ids[bp] != var_seq.ids[vp] {
                    return Err(Error::new(
                        "attention",
                        "ATTENTION_ALIGNMENT",
                        format!("token mismatch at baseline position {bp}"),
                    ));
                }
                pairs.push((vp, bp));
                next = iter.next();
            }
            _ => {
                return Err(Error::new(
                    "attention",
                    "ATTENTION_ALIGNMENT",
                    format!("variant token at {s}..{e} has no baseline counterpart"),
                ));
            }
        }
    }
    if next.is_some() {
        return Err(Error::new(
            "attention",
            "ATTENTION_ALIGNMENT",
            "baseline has tokens with no variant counterpart",
        ));
    }
    Ok(Alignment {
        pairs,
        span_positions,
    })
}

/// Computes the per-head deltas for one pair, sorted by descending delta
/// with (layer, head) tie-break. The list always covers every head.
pub fn head_deltas(model: &Model, pair: &MinimalPair) -> Result<Vec<HeadDelta>> {
    let base_seq = encode_checked(model, &pair.baseline.text)?;
    let var_seq = encode_checked(model, &pair.variant.text)?;
    let alignment = align(pair, &base_seq, &var_seq)?;

    let base_att = model
        .forward(&base_seq, true)?
        .attention
        .expect("attention requested");
    let var_att = model
        .forward(&var_seq, true)?
        .attention
        .expect("attention requested");

    let mut out = Vec::with_capacity(model.cfg.n_layers * model.cfg.n_heads);
    let n_cells = alignment.pairs.len() * alignment.pairs.len();
    for layer in 0..model.cfg.n_layers {
        for head in 0..model.cfg.n_heads {
            let mut acc = 0.0f64;
            for &(vq, bq) in &alignment.pairs {
                for &(vk, bk) in &alignment.pairs {
                    acc += libm::fabs(var_att.get(layer, head, vq, vk) - base_att.get(layer, head, bq, bk));
                }
            }
            let delta = if n_cells == 0 { 0.0 } else { acc / n_cells as f64 };
            let mut mass = 0.0f64;
            for q in 0..var_seq.len() {
                for &k in &alignment.span_positions {
                    mass += var_att.get(layer, head, q, k);
                }
            }
            let focus_mass = mass / var_seq.len() as f64;
            out.push(HeadDelta {
                layer,
                head,
                delta,
                focus_mass,
            });
        }
    }
    out.sort_by(|a, b| {
        b.delta
            .partial_cmp(&a.delta)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| (a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    Ok(out)
}

/// Renders the attention heatmap of one head on one record as a
/// self-contained SVG: a seq x seq grid, both axes labeled with the token
/// sequence, cell brightness equal to the attention weight (as
/// fill-opacity), titled "Layer L, Head H".
pub fn render_heatmap(model: &Model, record: &EmailRecord, layer: usize, head: usize) -> Result<String> {
    if layer >= model.cfg.n_layers || head >= model.cfg.n_heads {
        return Err(Error::new(
            "attention",
            "ATTENTION_INDEX_RANGE",
            format!(
                "layer {layer}, head {head} out of range for {} layers x {} heads",
                model.cfg.n_layers, model.cfg.n_heads
            ),
        ));
    }
    let seq = encode_checked(model, &record.text)?;
    let att = model
        .forward(&seq, true)?
        .attention
        .expect("attention requested");
    Ok(render_heatmap_svg(&att, &seq, model, layer, head))
}

fn render_heatmap_svg(att: &AttentionTensor, seq: &TokenSeq, model: &Model, layer: usize, head: usize) -> String {
    let n = seq.len();
    let cell = 18usize;
    let label_w = 90usize;
    let label_h = 90usize;
    let width = label_w + n * cell + 10;
    let height = label_h + n * cell + 10;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    ));
    s.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"#111111\"/>"
    ));
    s.push_str(&format!(
        "<text x=\"{label_w}\" y=\"18\" fill=\"white\" font-family=\"monospace\" font-size=\"14\" font-weight=\"bold\">Layer {layer}, Head {head}</text>"
    ));
    let surfaces: Vec<String> = seq
        .ids
        .iter()
        .map(|&id| crate::report::escape(model.vocab.surface(id)))
        .collect();
    for (i, surface) in surfaces.iter().enumerate() {
        let y = label_h + i * cell + cell / 2 + 4;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" fill=\"#cccccc\" font-family=\"monospace\" font-size=\"9\" text-anchor=\"end\">{surface}</text>",
            label_w - 4
        ));
        let x = label_w + i * cell + cell / 2;
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" fill=\"#cccccc\" font-family=\"monospace\" font-size=\"9\" text-anchor=\"start\" transform=\"rotate(-60 {x} {})\">{surface}</text>",
            label_h - 6,
            label_h - 6
        ));
    }
    for q in 0..n {
        for k in 0..n {
            let w = att.get(layer, head, q, k);
            let x = label_w + k * cell;
            let y = label_h + q * cell;
            s.push_str(&format!(
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"#ffb000\" fill-opacity=\"{:.9}\"/>",
                cell - 1,
                cell - 1,
                w
            ));
        }
    }
    s.push_str("</svg>");
    s
}

/// One perturbation class of the circuit report: the full ranked head
/// table plus side-by-side heatmaps for the strongest heads.
#[derive(Debug, Clone, Serialize)]
pub struct CircuitClass {
    pub perturbation: Perturbation,
    pub n_pairs: usize,
    /// Mean deltas across this class's pairs, ranked.
    pub table: Vec<HeadDelta>,
    pub top: Vec<CircuitEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CircuitEntry {
    pub layer: usize,
    pub head: usize,
    pub delta: f64,
    pub focus_mass: f64,
    pub baseline_heatmap: String,
    pub variant_heatmap: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CircuitReport {
    pub classes: Vec<CircuitClass>,
    pub top_k: usize,
}

/// Ranks heads per perturbation class over a set of minimal pairs and
/// renders heatmaps of each class's strongest heads on its first pair.
pub fn circuit_report(model: &Model, pairs: &[MinimalPair], top_k: usize) -> Result<CircuitReport> {
    if pairs.is_empty() {
        return Err(Error::new("attention", "ATTENTION_NO_PAIRS", "no minimal pairs given"));
    }
    let mut kinds: Vec<Perturbation> = pairs.iter().map(|p| p.perturbation).collect();
    kinds.sort_unstable();
    kinds.dedup();

    let mut classes = Vec::new();
    for kind in kinds {
        let class_pairs: Vec<&MinimalPair> = pairs.iter().filter(|p| p.perturbation == kind).collect();
        let mut sums: Vec<HeadDelta> = Vec::new();
        for (i, pair) in class_pairs.iter().enumerate() {
            let mut deltas = head_deltas(model, pair)?;
            deltas.sort_by_key(|d| (d.layer, d.head));
            if i == 0 {
                sums = deltas;
            } else {
                for (acc, d) in sums.iter_mut().zip(&deltas) {
                    acc.delta += d.delta;
                    acc.focus_mass += d.focus_mass;
                }
            }
        }
        let n = class_pairs.len() as f64;
        for d in sums.iter_mut() {
            d.delta /= n;
            d.focus_mass /= n;
        }
        sums.sort_by(|a, b| {
            b.delta
                .partial_cmp(&a.delta)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| (a.layer, a.head).cmp(&(b.layer, b.head)))
        });
        let first = class_pairs[0];
        let mut top = Vec::new();
        for d in sums.iter().take(top_k) {
            top.push(CircuitEntry {
                layer: d.layer,
                head: d.head,
                delta: d.delta,
                focus_mass: d.focus_mass,
                baseline_heatmap: render_heatmap(model, &first.baseline, d.layer, d.head)?,
                variant_heatmap: render_heatmap(model, &first.variant, d.layer, d.head)?,
            });
        }
        classes.push(CircuitClass {
            perturbation: kind,
            n_pairs: class_pairs.len(),
            table: sums,
            top,
        });
    }
    Ok(CircuitReport { classes, top_k })
}
