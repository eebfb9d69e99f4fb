//! The specialist-vs-generalist experiment: train one model on the formal
//! corpus only and one on the concatenation of all three styles, from
//! bit-identical initial weights, then evaluate both against every style's
//! hold-out split plus the combined split. Optionally rerun the generalist
//! with chain-of-thought targets.

use std::time::Instant;

use phishscope_core::corpus::{generate_synthetic, split_corpus, Corpus, SynthManifest, SynthSpec};
use phishscope_core::eval::{evaluate, evaluate_cot, MetricsReport};
use phishscope_core::model::{Model, ModelConfig};
use phishscope_core::report::experiment_table;
use phishscope_core::tokenizer::Vocab;
use phishscope_core::train::{train, TargetFormat, TrainConfig, TrainRun};
use serde::Serialize;

use crate::Result;

pub const COT_VOCAB_SUPPLEMENT: &str =
    "FLAG LABEL : LINK_MISMATCH UNUSUAL_REQUEST BRIEF_VAGUE TONE_GREETING CREDENTIAL_REQUEST SUSPICIOUS_ATTACHMENT NO_PRIOR_CONTEXT URGENCY GRAMMAR_ERRORS";

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub test_fraction: f64,
    pub vocab_size: usize,
    pub train: TrainConfig,
    pub cot: bool,
    pub max_cot_tokens: usize,
}

impl ExperimentConfig {
    /// The default experiment: 300 emails per style, no contamination,
    /// the selected training configuration, everything under one seed.
    pub fn defaults(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            synth: SynthSpec {
                n_per_style: 300,
                noise_rate: 0.0,
                adversarial_rate: 0.0,
                seed,
            },
            test_fraction: 0.2,
            vocab_size: 2048,
            train: TrainConfig::selected_default(seed),
            cot: false,
            max_cot_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub regime: String,
    pub eval_set: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
pub struct ExperimentOutcome {
    pub rows: Vec<ExperimentRow>,
    pub cot_rows: Option<Vec<ExperimentRow>>,
    pub specialist_in_domain_f1: f64,
    pub specialist_combined_f1: f64,
    pub generalist_combined_f1: f64,
    pub wall_time_ms: u64,
    #[serde(skip)]
    pub specialist: Model,
    #[serde(skip)]
    pub generalist: Model,
    #[serde(skip)]
    pub specialist_run: TrainRun,
    #[serde(skip)]
    pub generalist_run: TrainRun,
    #[serde(skip)]
    pub corpora: Vec<Corpus>,
    #[serde(skip)]
    pub combined: Corpus,
    #[serde(skip)]
    pub synth_manifest: SynthManifest,
}

impl ExperimentOutcome {
    /// The comparison table as (plain text, HTML).
    pub fn tables(&self) -> (String, String) {
        let rows: Vec<(String, String, MetricsReport)> = self
            .rows
            .iter()
            .chain(self.cot_rows.iter().flatten())
            .map(|r| (r.regime.clone(), r.eval_set.clone(), r.metrics.clone()))
            .collect();
        experiment_table(&rows)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let started = Instant::now();
    let (corpora, synth_manifest) = generate_synthetic(&cfg.synth)?;
    let split: Vec<Corpus> = corpora
        .iter()
        .map(|c| split_corpus(c, cfg.test_fraction, cfg.synth.seed))
        .collect::<phishscope_core::error::Result<_>>()?;
    let refs: Vec<&Corpus> = split.iter().collect();
    let combined = Corpus::concat("combined", &refs)?;

    let vocab = if cfg.cot {
        Vocab::build_with_extra_text(&[&combined], &[COT_VOCAB_SUPPLEMENT], cfg.vocab_size)?
    } else {
        Vocab::build(&[&combined], cfg.vocab_size)?
    };
    let mcfg = ModelConfig {
        lora_rank: cfg.train.lora_rank,
        ..ModelConfig::desk_default(vocab.len(), cfg.synth.seed)
    };
    // One init, cloned: both regimes start from bit-identical weights.
    let init = Model::init(mcfg, vocab)?;
    let mut specialist = init.clone();
    let mut generalist = init.clone();

    let specialist_run = train(&mut specialist, &split[0], &cfg.train, TargetFormat::Label)?;
    let generalist_run = train(&mut generalist, &combined, &cfg.train, TargetFormat::Label)?;

    let mut rows = Vec::new();
    let mut eval_sets: Vec<(String, Vec<&phishscope_core::corpus::EmailRecord>)> = split
        .iter()
        .map(|c| (c.name.clone(), c.test_records().collect()))
        .collect();
    eval_sets.push(("combined".to_string(), combined.test_records().collect()));

    let mut specialist_in_domain_f1 = 0.0;
    let mut specialist_combined_f1 = 0.0;
    let mut generalist_combined_f1 = 0.0;
    for (regime, model) in [("specialist", &specialist), ("generalist", &generalist)] {
        for (set_name, records) in &eval_sets {
            let metrics = evaluate(model, records)?;
            if regime == "specialist" && set_name == &split[0].name {
                specialist_in_domain_f1 = metrics.weighted_f1;
            }
            if set_name == "combined" {
                if regime == "specialist" {
                    specialist_combined_f1 = metrics.weighted_f1;
                } else {
                    generalist_combined_f1 = metrics.weighted_f1;
                }
            }
            rows.push(ExperimentRow {
                regime: regime.to_string(),
                eval_set: set_name.clone(),
                metrics,
            });
        }
    }

    let cot_rows = if cfg.cot {
        let mut cot_model = init.clone();
        train(&mut cot_model, &combined, &cfg.train, TargetFormat::Cot)?;
        let mut out = Vec::new();
        for (set_name, records) in &eval_sets {
            let metrics = evaluate_cot(&cot_model, records, cfg.max_cot_tokens)?;
            out.push(ExperimentRow {
                regime: "generalist-cot".to_string(),
                eval_set: set_name.clone(),
                metrics,
            });
        }
        Some(out)
    } else {
        None
    };

    Ok(ExperimentOutcome {
        rows,
        cot_rows,
        specialist_in_domain_f1,
        specialist_combined_f1,
        generalist_combined_f1,
        wall_time_ms: started.elapsed().as_millis() as u64,
        specialist,
        generalist,
        specialist_run,
        generalist_run,
        corpora: split,
        combined,
        synth_manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A miniature experiment exercising the full harness shape quickly;
    /// the full-size directional claims live in the acceptance suite.
    #[test]
    fn experiment_shape_is_two_regimes_by_four_sets() {
        let mut cfg = ExperimentConfig::defaults(7);
        cfg.synth.n_per_style = 30;
        cfg.train.epochs = 1;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2 * 4);
        let regimes: std::collections::BTreeSet<&str> =
            out.rows.iter().map(|r| r.regime.as_str()).collect();
        assert_eq!(regimes.len(), 2);
        let sets: std::collections::BTreeSet<&str> =
            out.rows.iter().map(|r| r.eval_set.as_str()).collect();
        assert_eq!(sets.len(), 4);
        let (text, html) = out.tables();
        assert!(text.contains("Training Regime"));
        assert!(html.contains("<table>"));
        // both regimes started from the same init: adapters trained on
        // different data must now differ
        assert_ne!(
            out.specialist.layers[0].lora_q.b.data,
            out.generalist.layers[0].lora_q.b.data
        );
    }
}
