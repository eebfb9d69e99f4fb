//! Shapley-value attribution over tokens: an exact factorial-weighted
//! enumeration for small inputs, a hierarchical partition approximation
//! for realistic ones, and token-highlight rendering.
//!
//! The value function v(S) is the model's SPAM probability when only the
//! tokens in S are visible; hidden tokens are replaced by the MASK token so
//! coalition evaluations stay shape-compatible. Positive attributions push
//! the prediction toward SPAM.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::softmax_in_place;
use crate::tokenizer::{mask_subset, TokenSeq, Vocab};

/// Hard cap for the exact method: 2^12 = 4096 coalition evaluations.
pub const EXACT_MAX_TOKENS: usize = 12;

/// Coalitions are bitmasks over at most 128 players.
pub type Mask = u128;

/// A memoized coalition value function over `n` players. Repeated
/// coalitions cost one evaluation; `eval_count` reports distinct ones.
pub struct ValueFunction<'a> {
    n: usize,
    memo: BTreeMap<Mask, f64>,
    f: Box<dyn FnMut(Mask) -> f64 + 'a>,
}

impl<'a> ValueFunction<'a> {
    pub fn new(n: usize, f: impl FnMut(Mask) -> f64 + 'a) -> ValueFunction<'a> {
        assert!(n <= 128, "coalition masks hold at most 128 players");
        ValueFunction {
            n,
            memo: BTreeMap::new(),
            f: Box::new(f),
        }
    }

    /// The model-backed value function: players are the given token
    /// positions of `seq`; v(S) is the SPAM probability with every player
    /// outside S masked. Other positions stay visible throughout.
    pub fn from_model(model: &'a Model, seq: &'a TokenSeq, players: Vec<usize>) -> ValueFunction<'a> {
        let all_positions: Vec<usize> = (0..seq.len()).collect();
        ValueFunction::new(players.len(), move |mask| {
            let keep: Vec<usize> = all_positions
                .iter()
                .copied()
                .filter(|p| {
                    match players.iter().position(|q| q == p) {
                        Some(i) => mask & (1u128 << i) != 0,
                        None => true,
                    }
                })
                .collect();
            let masked = mask_subset(seq, &keep).expect("positions are in range");
            let fwd = model.forward(&masked, false).expect("seq length unchanged");
            let mut probs = fwd.label_logits;
            softmax_in_place(&mut probs);
            probs[0]
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn full_mask(&self) -> Mask {
        if self.n == 128 {
            Mask::MAX
        } else {
            (1u128 << self.n) - 1
        }
    }

    pub fn eval(&mut self, mask: Mask) -> f64 {
        debug_assert_eq!(mask & !self.full_mask(), 0, "mask outside player set");
        if let Some(&v) = self.memo.get(&mask) {
            return v;
        }
        let v = (self.f)(mask);
        self.memo.insert(mask, v);
        v
    }

    /// Number of distinct coalition evaluations performed so far.
    pub fn eval_count(&self) -> usize {
        self.memo.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Exact,
    Partition,
}

/// Per-player attributions with the base and full coalition values.
/// `positions`, when the map came from a model explanation, holds the
/// token position of each player in the explained sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub phi: Vec<f64>,
    pub base: f64,
    pub full: f64,
    pub method: Method,
    pub positions: Vec<usize>,
}

impl AttributionMap {
    /// Efficiency residual: sum(phi) - (full - base); zero up to rounding.
    pub fn efficiency_gap(&self) -> f64 {
        let sum: f64 = self.phi.iter().sum();
        sum - (self.full - self.base)
    }
}

/// Exact Shapley values by factorial-weighted subset enumeration.
/// Capped at 12 players; larger inputs must use the partition method.
pub fn shapley_exact(v: &mut ValueFunction<'_>) -> Result<AttributionMap> {
    let n = v.n();
    if n == 0 {
        return Err(Error::new("explain", "EXPLAIN_EMPTY", "no attributable tokens"));
    }
    if n > EXACT_MAX_TOKENS {
        return Err(Error::new(
            "explain",
            "EXPLAIN_N_TOO_LARGE",
            format!("{n} tokens exceed the exact cap of {EXACT_MAX_TOKENS}; use the PARTITION method"),
        ));
    }
    let mut factorial = [1.0f64; EXACT_MAX_TOKENS + 1];
    for i in 1..=EXACT_MAX_TOKENS {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let full = v.full_mask();
    let mut phi = vec![0.0; n];
    for f in 0..n {
        let fbit = 1u128 << f;
        let rest = full & !fbit;
        // enumerate subsets S of rest via the standard submask walk
        let mut s: Mask = rest;
        loop {
            let size = s.count_ones() as usize;
            let weight = factorial[size] * factorial[n - size - 1] / factorial[n];
            let with = v.eval(s | fbit);
            let without = v.eval(s);
            phi[f] += weight * (with - without);
            if s == 0 {
                break;
            }
            s = (s - 1) & rest;
        }
    }
    let base = v.eval(0);
    let full_v = v.eval(full);
    Ok(AttributionMap {
        phi,
        base,
        full: full_v,
        method: Method::Exact,
        positions: (0..n).collect(),
    })
}

// ---------------------------------------------------------------------------
// Partition approximation
// ---------------------------------------------------------------------------

/// Binary tree over contiguous player spans; leaves are single players.
/// Built by recursive midpoint split with a pinned ceiling tie rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTree {
    pub n: usize,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Node {
    start: usize,
    end: usize,
    /// Indices of (left, right) children; None for leaves.
    children: Option<(usize, usize)>,
}

impl PartitionTree {
    pub fn midpoint(n: usize) -> Result<PartitionTree> {
        if n == 0 {
            return Err(Error::new("explain", "EXPLAIN_EMPTY", "no attributable tokens"));
        }
        let mut nodes = Vec::new();
        build_node(&mut nodes, 0, n);
        Ok(PartitionTree { n, nodes })
    }

    /// Every span in the tree, root first, depth-first.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        fn walk(nodes: &[Node], i: usize, out: &mut Vec<(usize, usize)>) {
            out.push((nodes[i].start, nodes[i].end));
            if let Some((l, r)) = nodes[i].children {
                walk(nodes, l, out);
                walk(nodes, r, out);
            }
        }
        walk(&self.nodes, 0, &mut out);
        out
    }
}

fn build_node(nodes: &mut Vec<Node>, start: usize, end: usize) -> usize {
    let idx = nodes.len();
    nodes.push(Node {
        start,
        end,
        children: None,
    });
    if end - start > 1 {
        let mid = start + (end - start).div_ceil(2);
        let l = build_node(nodes, start, mid);
        let r = build_node(nodes, mid, end);
        nodes[idx].children = Some((l, r));
    }
    idx
}

/// Builds the partition tree over a sequence's text tokens.
pub fn build_partition(seq: &TokenSeq) -> Result<PartitionTree> {
    PartitionTree::midpoint(seq.text_positions().len())
}

fn span_mask(start: usize, end: usize) -> Mask {
    let mut m: Mask = 0;
    for i in start..end {
        m |= 1u128 << i;
    }
    m
}

/// Hierarchical mass splitting down the partition tree. The root mass
/// v(F) - v(∅) is split recursively: each child's marginal is averaged
/// over the off- and on-context of its sibling, then the pair is rescaled
/// to conserve the parent mass exactly (equal split when both marginals
/// cancel), so efficiency holds by construction. Costs O(n) evaluations.
pub fn shapley_partition(v: &mut ValueFunction<'_>, tree: &PartitionTree) -> Result<AttributionMap> {
    let n = v.n();
    if n == 0 {
        return Err(Error::new("explain", "EXPLAIN_EMPTY", "no attributable tokens"));
    }
    if tree.n != n {
        return Err(Error::new(
            "explain",
            "EXPLAIN_TREE_MISMATCH",
            format!("tree covers {} players, value function has {n}", tree.n),
        ));
    }
    let base = v.eval(0);
    let full = v.eval(v.full_mask());
    let mut phi = vec![0.0; n];
    assign(v, tree, 0, 0, full - base, &mut phi);
    Ok(AttributionMap {
        phi,
        base,
        full,
        method: Method::Partition,
        positions: (0..n).collect(),
    })
}

fn assign(
    v: &mut ValueFunction<'_>,
    tree: &PartitionTree,
    node: usize,
    context: Mask,
    mass: f64,
    phi: &mut [f64],
) {
    let nd = &tree.nodes[node];
    match nd.children {
        None => phi[nd.start] = mass,
        Some((l, r)) => {
            let (ls, le) = (tree.nodes[l].start, tree.nodes[l].end);
            let (rs, re) = (tree.nodes[r].start, tree.nodes[r].end);
            let lm = span_mask(ls, le);
            let rm = span_mask(rs, re);
            let vc = v.eval(context);
            let vl = v.eval(context | lm);
            let vr = v.eval(context | rm);
            let vlr = v.eval(context | lm | rm);
            let m_l = 0.5 * ((vl - vc) + (vlr - vr));
            let m_r = 0.5 * ((vr - vc) + (vlr - vl));
            let sum = m_l + m_r;
            let (left_mass, right_mass) = if sum == 0.0 || !(mass / sum).is_finite() {
                (mass * 0.5, mass * 0.5)
            } else {
                let factor = mass / sum;
                (m_l * factor, m_r * factor)
            };
            assign(v, tree, l, context, left_mass, phi);
            assign(v, tree, r, context, right_mass, phi);
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering and aggregation
// ---------------------------------------------------------------------------

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders token highlights as a self-contained SVG. Red pushes toward
/// SPAM (positive phi), blue toward LEGIT; intensity is |phi| normalized
/// by the maximum, and tokens under 10% of the maximum stay unhighlighted.
/// The model's SPAM probability is shown in the header.
pub fn render_attributions(map: &AttributionMap, seq: &TokenSeq, source: &str) -> String {
    let char_w = 8.5f64;
    let line_h = 24usize;
    let pad = 10usize;
    let wrap_w = 740usize;

    let max_abs = map.phi.iter().fold(0.0f64, |m, p| m.max(libm::fabs(*p)));
    let cutoff = 0.1 * max_abs;
    let phi_at = |pos: usize| -> Option<f64> {
        map.positions.iter().position(|&p| p == pos).map(|i| map.phi[i])
    };

    let mut body = String::new();
    let mut x = pad as f64;
    let mut y = 56usize;
    for pos in 1..seq.len() {
        let (s, e) = seq.offsets[pos];
        if e <= s {
            continue;
        }
        let word = &source[s..e];
        let w = word.chars().count() as f64 * char_w + 6.0;
        if x + w > wrap_w as f64 {
            x = pad as f64;
            y += line_h;
        }
        if let Some(p) = phi_at(pos) {
            if max_abs > 0.0 && libm::fabs(p) >= cutoff && cutoff > 0.0 {
                let intensity = libm::fabs(p) / max_abs;
                let color = if p > 0.0 { "#d62728" } else { "#1f77b4" };
                body.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{}\" width=\"{:.1}\" height=\"{}\" fill=\"{}\" fill-opacity=\"{:.6}\"/>",
                    x - 2.0,
                    y - 16,
                    w,
                    line_h - 4,
                    color,
                    intensity
                ));
            }
        }
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-family=\"monospace\" font-size=\"14\">{}</text>",
            x,
            y,
            escape_xml(word)
        ));
        x += w;
    }
    let height = y + line_h;
    let header = format!(
        "<text x=\"{pad}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" font-weight=\"bold\">SPAM score: {:.4} (base {:.4}, method {:?})</text>",
        map.full, map.base, map.method
    );
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"760\" height=\"{height}\" viewBox=\"0 0 760 {height}\"><rect width=\"760\" height=\"{height}\" fill=\"white\"/>{header}{body}</svg>"
    )
}

/// Mean attribution per vocabulary token over a set of explained records;
/// the simple aggregate a failure-clustering pipeline would consume.
/// Sorted by descending |mean|, ties by token.
pub fn aggregate_mean_phi(
    vocab: &Vocab,
    explained: &[(&AttributionMap, &TokenSeq)],
) -> Vec<(String, f64, usize)> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (map, seq) in explained {
        for (i, &pos) in map.positions.iter().enumerate() {
            let surface = vocab.surface(seq.ids[pos]).to_string();
            let entry = sums.entry(surface).or_insert((0.0, 0));
            entry.0 += map.phi[i];
            entry.1 += 1;
        }
    }
    let mut out: Vec<(String, f64, usize)> = sums
        .into_iter()
        .map(|(tok, (sum, count))| (tok, sum / count as f64, count))
        .collect();
    out.sort_by(|a, b| {
        libm::fabs(b.1)
            .partial_cmp(&libm::fabs(a.1))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    out
}
