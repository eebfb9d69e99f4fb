//! The evaluation protocol: prompt construction, strict first-token
//! parsing, confidence scoring, and support-weighted classification
//! metrics. Invalid outputs are counted as incorrect everywhere.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmailRecord, Label, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::softmax_in_place;
use crate::tokenizer::{encode, TokenSeq, Vocab, CLS_LEGIT, CLS_SPAM};

/// The classification prompt, byte-exact. `{email_text}` is the only slot.
pub const PROMPT_TEMPLATE: &str = "Analyze the following email and classify it as either 'SPAM' or 'LEGIT'. Provide only the single word label as your answer.\n\nEmail:\n{email_text}\n\nClassification:\n";

const PROMPT_SLOT: &str = "{email_text}";

/// Instantiates the prompt template for one email body.
pub fn build_prompt(text: &str) -> String {
    PROMPT_TEMPLATE.replace(PROMPT_SLOT, text)
}

fn prompt_parts() -> (&'static str, &'static str) {
    let slot = PROMPT_TEMPLATE.find(PROMPT_SLOT).expect("template has a slot");
    (
        &PROMPT_TEMPLATE[..slot],
        &PROMPT_TEMPLATE[slot + PROMPT_SLOT.len()..],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PredLabel {
    Spam,
    Legit,
    Invalid,
}

impl PredLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PredLabel::Spam => "SPAM",
            PredLabel::Legit => "LEGIT",
            PredLabel::Invalid => "INVALID",
        }
    }

    pub fn matches(self, label: Label) -> bool {
        matches!(
            (self, label),
            (PredLabel::Spam, Label::Spam) | (PredLabel::Legit, Label::Legit)
        )
    }
}

/// Normalizes a raw model output (uppercase, trim) and tests whether it
/// begins with SPAM, then LEGIT; anything else is INVALID.
pub fn parse_output(raw: &str) -> PredLabel {
    let upper = raw.to_uppercase();
    let norm = upper.trim();
    if norm.starts_with("SPAM") {
        PredLabel::Spam
    } else if norm.starts_with("LEGIT") {
        PredLabel::Legit
    } else {
        PredLabel::Invalid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: PredLabel,
    /// Surface string of the first generated token ("SPAM"/"LEGIT"), or the
    /// whole generation in chain-of-thought mode.
    pub raw: String,
    /// Softmax probability of the chosen label over the two label-token
    /// logits; 0 for INVALID.
    pub confidence: f64,
    /// True when the email text had to be truncated to fit the context.
    pub truncated: bool,
}

/// A prompt encoded for the model: token sequence, the positions holding
/// email-body tokens (the attributable ones), and a truncation flag.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    pub seq: TokenSeq,
    pub email_positions: Vec<usize>,
    pub truncated: bool,
}

/// Tokenizes `build_prompt(text)`, dropping email tokens from the end of
/// the email region if the sequence would exceed `max_len - reserve`.
/// The prompt scaffold is never truncated.
pub fn encode_prompt(vocab: &Vocab, text: &str, max_len: usize, reserve: usize) -> EncodedPrompt {
    let (prefix, _suffix) = prompt_parts();
    let prompt = build_prompt(text);
    let email_range = prefix.len()..prefix.len() + text.len();
    // Tokenize without a length cap first, then drop email tokens to fit.
    let full = encode(vocab, &prompt, usize::MAX);
    let budget = max_len.saturating_sub(reserve).max(1);
    let email_pos: Vec<usize> = (0..full.len())
        .filter(|&p| {
            let (s, e) = full.offsets[p];
            p != 0 && s >= email_range.start && e <= email_range.end
        })
        .collect();
    let overflow = full.len().saturating_sub(budget);
    let dropped: Vec<usize> = email_pos.iter().rev().take(overflow).copied().collect();
    let truncated = !dropped.is_empty();
    let mut seq = TokenSeq {
        ids: Vec::with_capacity(full.len()),
        offsets: Vec::with_capacity(full.len()),
    };
    let mut email_positions = Vec::new();
    for p in 0..full.len() {
        if dropped.contains(&p) {
            continue;
        }
        if email_pos.contains(&p) {
            email_positions.push(seq.ids.len());
        }
        seq.ids.push(full.ids[p]);
        seq.offsets.push(full.offsets[p]);
    }
    // Scaffold alone can still overflow tiny contexts; hard-cap to budget.
    seq.ids.truncate(budget);
    seq.offsets.truncate(budget);
    email_positions.retain(|&p| p < budget);
    EncodedPrompt {
        seq,
        email_positions,
        truncated,
    }
}

/// Argmax over the two label logits [SPAM, LEGIT] with its softmax
/// confidence. Ties resolve to SPAM, matching the parse order.
pub fn label_confidence(label_logits: [f64; 2]) -> (PredLabel, f64) {
    let mut probs = label_logits;
    softmax_in_place(&mut probs);
    if probs[0] >= probs[1] {
        (PredLabel::Spam, probs[0])
    } else {
        (PredLabel::Legit, probs[1])
    }
}

/// Single-record prediction: greedy label readout at the final prompt
/// position. Oversized inputs are truncated (and flagged), never an error.
pub fn predict(model: &Model, record: &EmailRecord) -> Prediction {
    let enc = encode_prompt(&model.vocab, &record.text, model.cfg.max_len, 0);
    let fwd = model
        .forward(&enc.seq, false)
        .expect("encode_prompt respects max_len");
    let (label, confidence) = label_confidence(fwd.label_logits);
    let raw = match label {
        PredLabel::Spam => model.vocab.surface(CLS_SPAM).to_string(),
        PredLabel::Legit => model.vocab.surface(CLS_LEGIT).to_string(),
        PredLabel::Invalid => String::new(),
    };
    Prediction {
        label,
        raw,
        confidence,
        truncated: enc.truncated,
    }
}

/// Chain-of-thought prediction: generate greedily up to `max_new` tokens
/// and parse the final label token; a generation with no label token is
/// INVALID with confidence 0.
pub fn predict_cot(model: &Model, record: &EmailRecord, max_new: usize) -> Prediction {
    let enc = encode_prompt(&model.vocab, &record.text, model.cfg.max_len, max_new);
    let mut seq = enc.seq;
    let mut raw = String::new();
    let mut outcome: Option<(PredLabel, f64)> = None;
    for step in 0..max_new {
        if seq.len() >= model.cfg.max_len {
            break;
        }
        let logits = model
            .next_token_logits(&seq)
            .expect("generation stays within max_len");
        // Greedy argmax with lowest-id tie-break.
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        if step > 0 {
            raw.push(' ');
        }
        raw.push_str(model.vocab.surface(best as u32));
        if best as u32 == CLS_SPAM || best as u32 == CLS_LEGIT {
            let (label, confidence) =
                label_confidence([logits[CLS_SPAM as usize], logits[CLS_LEGIT as usize]]);
            outcome = Some((label, confidence));
            break;
        }
        seq.ids.push(best as u32);
        seq.offsets.push((0, 0));
    }
    match outcome {
        Some((label, confidence)) => Prediction {
            label,
            raw,
            confidence,
            truncated: enc.truncated,
        },
        None => Prediction {
            label: PredLabel::Invalid,
            raw,
            confidence: 0.0,
            truncated: enc.truncated,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    #[serde(rename = "SPAM")]
    pub spam: ClassMetrics,
    #[serde(rename = "LEGIT")]
    pub legit: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: PerClass,
    pub n_invalid: usize,
}

/// Metrics over (truth, prediction) pairs. INVALID predictions count as
/// incorrect for every metric: they are misses for their true class and
/// never count toward any predicted class.
pub fn metrics_from_pairs(pairs: &[(Label, PredLabel)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::new("eval", "EVAL_EMPTY", "no records to evaluate"));
    }
    let n = pairs.len() as f64;
    let mut correct = 0usize;
    let mut n_invalid = 0usize;
    let class = |label: Label| -> ClassMetrics {
        let tp = pairs.iter().filter(|(t, p)| *t == label && p.matches(label)).count() as f64;
        let fp = pairs.iter().filter(|(t, p)| *t != label && p.matches(label)).count() as f64;
        let support = pairs.iter().filter(|(t, _)| *t == label).count();
        let fn_ = support as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics { precision, recall, f1, support }
    };
    let spam = class(Label::Spam);
    let legit = class(Label::Legit);
    for (t, p) in pairs {
        if *p == PredLabel::Invalid {
            n_invalid += 1;
        }
        if p.matches(*t) {
            correct += 1;
        }
    }
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        (f(&spam) * spam.support as f64 + f(&legit) * legit.support as f64) / n
    };
    Ok(MetricsReport {
        accuracy: correct as f64 / n,
        weighted_precision: weighted(|c| c.precision),
        weighted_recall: weighted(|c| c.recall),
        weighted_f1: weighted(|c| c.f1),
        per_class: PerClass { spam, legit },
        n_invalid,
    })
}

fn check_test_records(records: &[&EmailRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::new("eval", "EVAL_EMPTY", "no records to evaluate"));
    }
    if let Some(r) = records.iter().find(|r| r.split != Some(Split::Test)) {
        return Err(Error::new(
            "eval",
            "EVAL_NOT_TEST",
            format!("record '{}' is not tagged TEST", r.id),
        ));
    }
    Ok(())
}

/// Evaluates a model over hold-out records. Every record must carry a TEST
/// split tag; training data must never leak into evaluation.
pub fn evaluate(model: &Model, records: &[&EmailRecord]) -> Result<MetricsReport> {
    check_test_records(records)?;
    let pairs: Vec<(Label, PredLabel)> = records
        .iter()
        .map(|r| (r.label, predict(model, r).label))
        .collect();
    metrics_from_pairs(&pairs)
}

/// Chain-of-thought evaluation: generations with no final label token are
/// INVALID and count as incorrect.
pub fn evaluate_cot(model: &Model, records: &[&EmailRecord], max_new: usize) -> Result<MetricsReport> {
    check_test_records(records)?;
    let pairs: Vec<(Label, PredLabel)> = records
        .iter()
        .map(|r| (r.label, predict_cot(model, r, max_new).label))
        .collect();
    metrics_from_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_byte_exact() {
        let p = build_prompt("hi");
        assert_eq!(
            p,
            "Analyze the following email and classify it as either 'SPAM' or 'LEGIT'. Provide only the single word label as your answer.\n\nEmail:\nhi\n\nClassification:\n"
        );
        assert!(p.ends_with("Classification:\n"));
    }

    #[test]
    fn build_prompt_is_injective_on_texts() {
        assert_ne!(build_prompt("a"), build_prompt("b"));
    }

    #[test]
    fn parse_output_follows_the_protocol() {
        assert_eq!(parse_output("  spam — obvious scam"), PredLabel::Spam);
        assert_eq!(parse_output("Legit\n"), PredLabel::Legit);
        assert_eq!(parse_output("I think it's ham"), PredLabel::Invalid);
        assert_eq!(parse_output(""), PredLabel::Invalid);
        assert_eq!(parse_output("SPAMLEGIT"), PredLabel::Spam, "SPAM tested before LEGIT");
    }

    #[test]
    fn parse_output_is_idempotent_under_normalization() {
        for raw in ["  SPAM  ", "legit!", "\tLeGiT rest", "noise"] {
            let once = parse_output(raw);
            let renorm = raw.to_uppercase();
            assert_eq!(parse_output(renorm.trim()), once);
        }
    }

    #[test]
    fn confidence_arithmetic() {
        let (label, c) = label_confidence([2.0, 2.0]);
        assert_eq!(label, PredLabel::Spam, "tie resolves in parse order");
        assert!((c - 0.5).abs() < 1e-12);
        let (label, c) = label_confidence([3.0f64.ln(), 0.0]);
        assert_eq!(label, PredLabel::Spam);
        assert!((c - 0.75).abs() < 1e-12);
        // the two label probabilities always sum to one
        let (_, c1) = label_confidence([1.3, -0.2]);
        let (_, c2) = label_confidence([-0.2, 1.3]);
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_confusion_matrix() {
        use Label::*;
        use PredLabel as P;
        let pairs = [
            (Spam, P::Spam),
            (Legit, P::Spam),
            (Spam, P::Legit),
            (Legit, P::Legit),
        ];
        let m = metrics_from_pairs(&pairs).unwrap();
        assert!((m.accuracy - 0.5).abs() < 1e-15);
        assert!((m.weighted_f1 - 0.5).abs() < 1e-15);
        assert!((m.per_class.spam.precision - 0.5).abs() < 1e-15);
        assert!((m.per_class.legit.recall - 0.5).abs() < 1e-15);
        assert_eq!(m.per_class.spam.support, 2);
    }

    #[test]
    fn all_correct_gives_ones() {
        let pairs = [
            (Label::Spam, PredLabel::Spam),
            (Label::Legit, PredLabel::Legit),
            (Label::Spam, PredLabel::Spam),
        ];
        let m = metrics_from_pairs(&pairs).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.weighted_f1, 1.0);
        assert_eq!(m.weighted_precision, 1.0);
        assert_eq!(m.weighted_recall, 1.0);
        assert_eq!(m.n_invalid, 0);
    }

    #[test]
    fn all_invalid_counts_as_incorrect() {
        let pairs = [
            (Label::Spam, PredLabel::Invalid),
            (Label::Legit, PredLabel::Invalid),
        ];
        let m = metrics_from_pairs(&pairs).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.weighted_recall, 0.0);
        assert_eq!(m.n_invalid, 2);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        assert_eq!(metrics_from_pairs(&[]).unwrap_err().code, "EVAL_EMPTY");
    }
}
