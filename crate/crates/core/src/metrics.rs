//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr over multi-reference pairs.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, TensorError};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;
pub const METRIC_KEYS: [&str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>();
        EvalPair { candidate: split(candidate), references: references.iter().map(|r| split(r.as_ref())).collect() }
    }
}

fn check_pairs(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(TensorError::Contract("no candidates to score".into()));
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(TensorError::Contract(format!("pair {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats(pair: &EvalPair, n: usize) -> BleuStats {
    let mut s = BleuStats { cand_len: pair.candidate.len(), ..Default::default() };
    let c = pair.candidate.len() as i64;
    s.ref_len = pair.references.iter().map(|r| r.len()).min_by_key(|&l| ((l as i64 - c).abs(), l)).unwrap_or(0);
    for k in 1..=n {
        let cand = ngram_counts(&pair.candidate, k);
        let refs: Vec<_> = pair.references.iter().map(|r| ngram_counts(r, k)).collect();
        for (g, &cnt) in &cand {
            let max_ref = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            s.matches[k - 1] += cnt.min(max_ref);
        }
        s.totals[k - 1] += pair.candidate.len().saturating_sub(k - 1);
    }
    s
}

/// Corpus BLEU with uniform weights over 1..=n, no smoothing.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(TensorError::Contract(format!("BLEU order must be in 1..=4, got {n}")));
    }
    check_pairs(pairs)?;
    let per: Vec<BleuStats> = pairs.par_iter().map(|p| bleu_stats(p, n)).collect();
    let mut t = BleuStats::default();
    for s in per {
        for k in 0..4 {
            t.matches[k] += s.matches[k];
            t.totals[k] += s.totals[k];
        }
        t.cand_len += s.cand_len;
        t.ref_len += s.ref_len;
    }
    Ok(bleu_from_stats(&t, n))
}

fn bleu_from_stats(t: &BleuStats, n: usize) -> f64 {
    if t.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if t.matches[k] == 0 {
            return 0.0;
        }
        log_sum += (t.matches[k] as f64 / t.totals[k] as f64).ln() / n as f64;
    }
    let bp = (1.0 - t.ref_len as f64 / t.cand_len as f64).exp().min(1.0);
    bp * log_sum.exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-score of one pair, best over references.
pub fn rouge_l_pair(pair: &EvalPair) -> f64 {
    let c = &pair.candidate;
    if c.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    pair.references
        .iter()
        .map(|r| {
            let l = lcs_len(c, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check_pairs(pairs)?;
    let scores: Vec<f64> = pairs.par_iter().map(rouge_l_pair).collect();
    Ok(scores.iter().sum::<f64>() / pairs.len() as f64)
}

/// Document frequencies of reference n-grams, one count per instance.
struct Idf<'a> {
    df: Vec<HashMap<&'a [String], usize>>,
    log_n: f64,
}

impl<'a> Idf<'a> {
    fn new(pairs: &'a [EvalPair]) -> Self {
        let mut df = vec![HashMap::new(); CIDER_MAX_N];
        for p in pairs {
            for (n, table) in df.iter_mut().enumerate() {
                let seen: HashSet<&[String]> = p.references.iter().flat_map(|r| r.windows(n + 1)).collect();
                for g in seen {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Idf { df, log_n: (pairs.len() as f64).ln() }
    }

    fn vector(&self, tokens: &'a [String], n: usize) -> HashMap<&'a [String], f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
                (g, c as f64 * (self.log_n - df.ln()))
            })
            .collect()
    }
}

fn norm(v: &HashMap<&[String], f64>) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

fn cider_pair(idf: &Idf<'_>, pair: &EvalPair) -> f64 {
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let vc = idf.vector(&pair.candidate, n);
        let nc = norm(&vc);
        let mut sum = 0.0;
        for r in &pair.references {
            let vr = idf.vector(r, n);
            let nr = norm(&vr);
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc.iter().filter_map(|(g, &c)| vr.get(g).map(|&r| c * r)).sum();
            sum += dot / (nc * nr);
        }
        total += sum / pair.references.len() as f64;
    }
    10.0 * total / CIDER_MAX_N as f64
}

fn cider_check(pairs: &[EvalPair]) -> Result<()> {
    check_pairs(pairs)?;
    if pairs.len() < 2 {
        return Err(TensorError::Contract(
            "CIDEr needs at least two instances: with one, every idf is log(1) = 0 and all vectors vanish".into(),
        ));
    }
    Ok(())
}

/// Per-pair CIDEr scores against idf statistics of the whole corpus.
pub fn cider_scores(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    cider_check(pairs)?;
    let idf = Idf::new(pairs);
    Ok(pairs.par_iter().map(|p| cider_pair(&idf, p)).collect())
}

pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    let s = cider_scores(pairs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceScore {
    pub id: String,
    pub candidate: String,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub instances: Vec<InstanceScore>,
    /// Response ids absent from the corpus, or corpus ids without a response.
    pub missing: Vec<String>,
}

impl ScoreReport {
    pub fn headline(&self) -> [(&'static str, f64); 6] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("cider", self.cider),
        ]
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.headline() {
            s.push_str(&format!("{k}={v:.6}\n"));
        }
        s.push_str(&format!("instances={}\nmissing={}\n", self.instances.len(), self.missing.len()));
        s
    }
}

/// Scores `responses` (keyed by id) against `references` (keyed by id) on
/// their common ids.
pub fn evaluate_corpus(
    responses: &BTreeMap<String, Vec<String>>,
    references: &BTreeMap<String, Vec<Vec<String>>>,
) -> Result<ScoreReport> {
    let mut missing: Vec<String> = responses.keys().filter(|k| !references.contains_key(*k)).cloned().collect();
    missing.extend(references.keys().filter(|k| !responses.contains_key(*k)).cloned());
    missing.sort();
    if !missing.is_empty() {
        log::warn!("{} ids lack a response or reference; scoring the intersection", missing.len());
    }
    let (ids, pairs): (Vec<&String>, Vec<EvalPair>) = responses
        .iter()
        .filter_map(|(id, cand)| {
            references.get(id).map(|refs| (id, EvalPair { candidate: cand.clone(), references: refs.clone() }))
        })
        .unzip();
    if pairs.is_empty() {
        return Err(TensorError::Contract("responses and references share no ids".into()));
    }
    let ciders = cider_scores(&pairs)?;
    let instances = ids
        .iter()
        .zip(&pairs)
        .zip(&ciders)
        .map(|((id, p), &c)| InstanceScore {
            id: (*id).clone(),
            candidate: p.candidate.join(" "),
            rouge_l: rouge_l_pair(p),
            cider: c,
        })
        .collect();
    Ok(ScoreReport {
        bleu1: bleu(&pairs, 1)?,
        bleu2: bleu(&pairs, 2)?,
        bleu3: bleu(&pairs, 3)?,
        bleu4: bleu(&pairs, 4)?,
        rouge_l: rouge_l(&pairs)?,
        cider: ciders.iter().sum::<f64>() / ciders.len() as f64,
        instances,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brevity_example() {
        let p = [EvalPair::new("the cat sat", &["the cat sat down"])];
        assert!((bleu(&p, 1).unwrap() - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_example() {
        let p = EvalPair::new("the cat", &["the cat sat"]);
        let expected = 2.44 * (2.0 / 3.0) / (2.0 / 3.0 + 1.44);
        assert!((rouge_l_pair(&p) - expected).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_is_zero() {
        let p = [EvalPair::new("a b c d", &["w x y z"]), EvalPair::new("e f g h", &["p q r s"])];
        assert_eq!(bleu(&p, 1).unwrap(), 0.0);
        assert_eq!(rouge_l(&p).unwrap(), 0.0);
        assert_eq!(cider(&p).unwrap(), 0.0);
    }

    #[test]
    fn closest_reference_tie_prefers_shorter() {
        let p = EvalPair::new("a b c", &["a b c d", "a b"]);
        assert_eq!(bleu_stats(&p, 1).ref_len, 2);
    }

    #[test]
    fn cider_single_instance_is_error() {
        assert!(cider(&[EvalPair::new("a b", &["a b"])]).is_err());
    }

    #[test]
    fn empty_input_errors() {
        assert!(bleu(&[], 1).is_err());
        assert!(bleu(&[EvalPair::new("a", &["a"])], 5).is_err());
        assert!(rouge_l(&[EvalPair::new("a", &[] as &[&str])]).is_err());
    }
}
