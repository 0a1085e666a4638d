#![allow(dead_code)]

use std::collections::BTreeMap;

use mmfuse::fusion::{DialogueInstance, FusionConfig, Turn, VideoFeatures};
use mmfuse::metrics::EvalPair;
use mmfuse::transformer::TransformerConfig;
use mmfuse::{ModelConfig, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOY_VOCAB: usize = 24;

pub fn toy_config(vocab_size: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size,
            max_seq_len,
            dropout: 0.0,
        },
        fusion: FusionConfig { d_emb: 4, max_frames: 4, max_regions: 4, max_turns: 4 },
    }
}

fn words(rng: &mut ChaCha8Rng, vocab_size: usize, n: usize) -> Vec<usize> {
    // ids 0..5 are the special tokens
    (0..n).map(|_| rng.random_range(5..vocab_size)).collect()
}

/// A random instance with random lengths within the given bounds.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    max_turns: usize,
    max_words: usize,
) -> DialogueInstance {
    let n_hist = rng.random_range(0..max_turns);
    let history = (0..n_hist)
        .map(|_| {
            let u = rng.random_range(1..=max_words);
            let s = rng.random_range(1..=max_words);
            Turn { user: words(rng, vocab_size, u), system: words(rng, vocab_size, s) }
        })
        .collect();
    let c = rng.random_range(1..=max_words);
    let q = rng.random_range(1..=max_words);
    let t = rng.random_range(1..=max_words);
    let mut target = words(rng, vocab_size, t);
    target.push(mmfuse::data::EOS);
    DialogueInstance {
        id: format!("r{}", rng.random::<u32>()),
        caption: words(rng, vocab_size, c),
        history,
        question: words(rng, vocab_size, q),
        target,
        references: Vec::new(),
    }
}

pub fn random_video<T: Scalar>(rng: &mut ChaCha8Rng, frames: usize, regions: usize, d_emb: usize) -> VideoFeatures<T> {
    let data = (0..frames * regions * d_emb).map(|_| T::from(rng.random_range(-1.0..1.0)).unwrap()).collect();
    VideoFeatures::from_flat(frames, regions, d_emb, data).unwrap()
}

/// Ten candidate/reference sets covering partial overlap, repeated words,
/// candidates shorter and longer than every reference, and single references.
pub fn metric_fixture() -> Vec<EvalPair> {
    let raw: [(&str, &[&str]); 10] = [
        (
            "the color is red",
            &[
                "the color is red",
                "it is red",
                "red",
                "the region is red",
                "that one is red",
                "the color is clearly red",
            ],
        ),
        ("the color is blue", &["the color is green", "it is green", "green"]),
        ("the shape is square", &["the shape is a square", "square", "it looks square"]),
        ("a small red circle on the left", &["a red circle on the left side", "the left has a small red circle"]),
        ("the the the the", &["the cat is on the mat", "there is a cat on the mat"]),
        ("it is dark", &["the scene is dark", "it is dark outside", "dark"]),
        ("the scene is bright and the shape is round", &["the scene is bright", "bright scene with a round shape"]),
        ("yes", &["yes it is", "yes"]),
        ("the shape is triangle", &["the shape is triangle"]),
        ("no idea what color that is", &["the color is yellow", "yellow", "it is yellow i think"]),
    ];
    raw.iter().map(|(c, r)| EvalPair::new(c, r)).collect()
}

/// Direct transcriptions of the metric definitions, written independently of the library.
pub mod oracle {
    use super::*;

    fn grams(tokens: &[String], n: usize) -> Vec<String> {
        if tokens.len() < n {
            return Vec::new();
        }
        (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
    }

    fn count(list: &[String], g: &str) -> usize {
        list.iter().filter(|x| *x == g).count()
    }

    pub fn bleu(pairs: &[EvalPair], n: usize) -> f64 {
        let mut clipped = vec![0usize; n];
        let mut total = vec![0usize; n];
        let (mut c_len, mut r_len) = (0usize, 0usize);
        for p in pairs {
            let c = p.candidate.len();
            c_len += c;
            let mut best = p.references[0].len();
            for r in &p.references {
                let (d, bd) = ((r.len() as i64 - c as i64).abs(), (best as i64 - c as i64).abs());
                if d < bd || (d == bd && r.len() < best) {
                    best = r.len();
                }
            }
            r_len += best;
            for k in 1..=n {
                let cg = grams(&p.candidate, k);
                total[k - 1] += cg.len();
                let mut seen: Vec<&String> = Vec::new();
                for g in &cg {
                    if seen.contains(&g) {
                        continue;
                    }
                    seen.push(g);
                    let max_ref = p.references.iter().map(|r| count(&grams(r, k), g)).max().unwrap();
                    clipped[k - 1] += count(&cg, g).min(max_ref);
                }
            }
        }
        if c_len == 0 || clipped.contains(&0) {
            return 0.0;
        }
        let mut prod = 1.0f64;
        for k in 0..n {
            prod *= clipped[k] as f64 / total[k] as f64;
        }
        let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
        bp * prod.powf(1.0 / n as f64)
    }

    fn lcs(a: &[String], b: &[String], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = if a[0] == b[0] {
            1 + lcs(&a[1..], &b[1..], memo)
        } else {
            lcs(&a[1..], b, memo).max(lcs(a, &b[1..], memo))
        };
        memo.insert((a.len(), b.len()), v);
        v
    }

    pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
        let beta2 = 1.2f64 * 1.2;
        let mut sum = 0.0;
        for p in pairs {
            let mut best = 0.0f64;
            for r in &p.references {
                let l = lcs(&p.candidate, r, &mut BTreeMap::new()) as f64;
                if l == 0.0 {
                    continue;
                }
                let prec = l / p.candidate.len() as f64;
                let rec = l / r.len() as f64;
                best = best.max((1.0 + beta2) * prec * rec / (rec + beta2 * prec));
            }
            sum += best;
        }
        sum / pairs.len() as f64
    }

    pub fn cider(pairs: &[EvalPair]) -> f64 {
        let n_docs = pairs.len() as f64;
        let mut score = 0.0;
        for p in pairs {
            let mut per_n = 0.0;
            for n in 1..=4 {
                let df = |g: &str| {
                    pairs.iter().filter(|q| q.references.iter().any(|r| grams(r, n).iter().any(|x| x == g))).count()
                };
                let vec_of = |tokens: &[String]| -> BTreeMap<String, f64> {
                    let gs = grams(tokens, n);
                    let mut v = BTreeMap::new();
                    for g in &gs {
                        let idf = (n_docs / df(g).max(1) as f64).ln();
                        v.insert(g.clone(), count(&gs, g) as f64 * idf);
                    }
                    v
                };
                let vc = vec_of(&p.candidate);
                let nc = vc.values().map(|x| x * x).sum::<f64>().sqrt();
                let mut acc = 0.0;
                for r in &p.references {
                    let vr = vec_of(r);
                    let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
                    if nc > 0.0 && nr > 0.0 {
                        let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                        acc += dot / (nc * nr);
                    }
                }
                per_n += acc / p.references.len() as f64;
            }
            score += 10.0 * per_n / 4.0;
        }
        score / n_docs
    }
}
