//! Central finite-difference oracle for the adapter gradients.
//!
//! Every trainable component (A and B of the query and value adapters in
//! both layers) is perturbed by +/- h at fp64 and the analytic gradient is
//! compared against (L(p+h) - L(p-h)) / 2h. Both the two-way label loss
//! and the full-vocabulary token loss go through the check.

use phishscope_core::corpus::{Corpus, CorpusStyle, EmailRecord, Label};
use phishscope_core::model::{Model, ModelConfig, TrainTarget};
use phishscope_core::rng::Rng;
use phishscope_core::tokenizer::{encode, Vocab};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn fixture_model(seed: u64) -> Model {
    let records = vec![
        EmailRecord {
            id: "a".into(),
            text: "claim your free prize money now before friday".into(),
            label: Label::Spam,
            source: "t".into(),
            split: None,
        },
        EmailRecord {
            id: "b".into(),
            text: "the quarterly report is ready for review thanks".into(),
            label: Label::Legit,
            source: "t".into(),
            split: None,
        },
    ];
    let c = Corpus::new("t", CorpusStyle::External, records).unwrap();
    let vocab = Vocab::build(&[&c], 32).unwrap();
    let cfg = ModelConfig::tiny(vocab.len(), seed);
    let mut m = Model::init(cfg, vocab).unwrap();
    // B is zero at init, which would leave the A-gradient path untested;
    // nudge every adapter off the origin first.
    let mut rng = Rng::seed_from(99);
    for l in m.layers.iter_mut() {
        for mat in [&mut l.lora_q.b, &mut l.lora_v.b] {
            for v in mat.data.iter_mut() {
                *v = rng.next_gaussian() * 0.05;
            }
        }
    }
    m
}

fn batch(m: &Model) -> Vec<(phishscope_core::tokenizer::TokenSeq, TrainTarget)> {
    let s1 = encode(&m.vocab, "claim your free prize money now", 16);
    let s2 = encode(&m.vocab, "the quarterly report is ready", 16);
    let s3 = encode(&m.vocab, "free money before friday", 16);
    let toks = s3.ids[1..].iter().enumerate().map(|(i, &t)| (i, t)).collect();
    vec![
        (s1, TrainTarget::Label(Label::Spam)),
        (s2, TrainTarget::Label(Label::Legit)),
        (s3, TrainTarget::Tokens(toks)),
    ]
}

#[test]
fn adapter_gradients_match_central_differences() {
    let mut m = fixture_model(31);
    let batch = batch(&m);
    let (_, grads) = m.loss_and_grads(&batch).unwrap();

    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for li in 0..m.layers.len() {
        // (selector, analytic grads) pairs for the four adapter matrices
        for which in 0..4 {
            let n = {
                let l = &m.layers[li];
                match which {
                    0 => l.lora_q.a.data.len(),
                    1 => l.lora_q.b.data.len(),
                    2 => l.lora_v.a.data.len(),
                    _ => l.lora_v.b.data.len(),
                }
            };
            for idx in 0..n {
                let analytic = {
                    let g = &grads.layers[li];
                    match which {
                        0 => g.q.a.data[idx],
                        1 => g.q.b.data[idx],
                        2 => g.v.a.data[idx],
                        _ => g.v.b.data[idx],
                    }
                };
                let param = |m: &mut Model| -> *mut f64 {
                    let l = &mut m.layers[li];
                    match which {
                        0 => &mut l.lora_q.a.data[idx],
                        1 => &mut l.lora_q.b.data[idx],
                        2 => &mut l.lora_v.a.data[idx],
                        _ => &mut l.lora_v.b.data[idx],
                    }
                };
                let p = param(&mut m);
                let orig = unsafe { *p };
                unsafe { *p = orig + H };
                let plus = m.loss(&batch).unwrap();
                unsafe { *param(&mut m) = orig - H };
                let minus = m.loss(&batch).unwrap();
                unsafe { *param(&mut m) = orig };
                let fd = (plus - minus) / (2.0 * H);
                let err = rel_err(analytic, fd);
                worst = worst.max(err);
                assert!(
                    err <= REL_TOL,
                    "layer {li} mat {which} idx {idx}: analytic {analytic:.3e} vs fd {fd:.3e} (rel {err:.3e})"
                );
                checked += 1;
            }
        }
    }
    // 2 layers x 2 adapters x (A: 2x32 + B: 32x2) = 512 components
    assert_eq!(checked, 512);
    println!("gradient check: {checked} components, worst rel err {worst:.3e}");
}
