//! Synthetic video-grounded QA world with a known latent grid.
//!
//! Each video is an F×P grid of (color, shape) cells plus one global
//! brightness. Region features are sums of fixed attribute embeddings plus
//! gaussian noise. Questions ask about individual cells or per-frame shape
//! majorities, so answers are recoverable from the video and never from text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Result, TensorError};

pub const COLORS: [&str; 5] = ["red", "blue", "green", "yellow", "purple"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const BRIGHTNESS: [&str; 2] = ["bright", "dark"];
pub const NUMBERS: [&str; 16] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen",
];
/// Largest frame or region count; cells are named by a frame letter and a region digit.
pub const MAX_GRID: usize = 8;

const COLOR_REFS: [&str; 6] =
    ["{} is the color", "{}", "it is {}", "the region is {}", "the color is {}", "that region looks {}"];
const SHAPE_REFS: [&str; 6] = [
    "{} is the most common shape",
    "{}",
    "the shape is {}",
    "the most common shape is {}",
    "the frame mostly shows {}",
    "most regions show a {}",
];
const CAPTION: &str = "the scene is {}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_dialogues: usize,
    pub frames: usize,
    pub regions: usize,
    pub turns: usize,
    pub d_emb: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, n_dialogues: 2000, frames: 4, regions: 4, turns: 3, d_emb: 32, noise: 0.1 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Contract(m));
        if self.frames == 0 || self.regions == 0 || self.d_emb == 0 || self.turns == 0 {
            return bad("frames, regions, turns and d_emb must be positive".into());
        }
        if self.frames > MAX_GRID || self.regions > MAX_GRID {
            return bad(format!("frames and regions are limited to {MAX_GRID} by the cell names"));
        }
        if self.turns > self.frames * self.regions + self.frames {
            return bad(format!(
                "{} turns exceed the {} distinct questions",
                self.turns,
                self.frames * (self.regions + 1)
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

/// The attribute vocabulary of the world and its fixed embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub d_emb: usize,
    pub noise: f64,
    color_vecs: Vec<Vec<f32>>,
    shape_vecs: Vec<Vec<f32>>,
    brightness_vecs: Vec<Vec<f32>>,
}

impl SyntheticWorld {
    pub fn new(seed: u64, d_emb: usize, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7AB1E);
        let mut table = |n: usize| -> Vec<Vec<f32>> {
            (0..n).map(|_| (0..d_emb).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
        };
        let color_vecs = table(COLORS.len());
        let shape_vecs = table(SHAPES.len());
        let brightness_vecs = table(BRIGHTNESS.len());
        SyntheticWorld { d_emb, noise, color_vecs, shape_vecs, brightness_vecs }
    }

    /// Noise-free embedding of one cell.
    pub fn cell_embedding(&self, brightness: usize, color: usize, shape: usize) -> Vec<f32> {
        (0..self.d_emb)
            .map(|k| self.color_vecs[color][k] + self.shape_vecs[shape][k] + self.brightness_vecs[brightness][k])
            .collect()
    }

    /// Frame-major `F·P·d_emb` features for a latent grid.
    pub fn render(&self, latent: &Latent, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let normal = Normal::new(0.0, self.noise).expect("noise validated");
        let mut out = Vec::with_capacity(latent.cells.len() * self.d_emb);
        for cell in &latent.cells {
            for v in self.cell_embedding(latent.brightness, cell.color, cell.shape) {
                out.push(v + normal.sample(rng) as f32);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub color: usize,
    pub shape: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Latent {
    pub frames: usize,
    pub regions: usize,
    pub brightness: usize,
    /// Frame-major cells.
    pub cells: Vec<Cell>,
}

impl Latent {
    pub fn cell(&self, frame: usize, region: usize) -> Cell {
        self.cells[frame * self.regions + region]
    }

    /// The unique most frequent shape of a frame, if there is one.
    pub fn majority_shape(&self, frame: usize) -> Option<usize> {
        majority(&self.cells[frame * self.regions..(frame + 1) * self.regions])
    }

    fn sample(frames: usize, regions: usize, rng: &mut ChaCha8Rng) -> Self {
        let brightness = rng.random_range(0..BRIGHTNESS.len());
        let mut cells = Vec::with_capacity(frames * regions);
        for _ in 0..frames {
            loop {
                let frame: Vec<Cell> = (0..regions)
                    .map(|_| Cell {
                        color: rng.random_range(0..COLORS.len()),
                        shape: rng.random_range(0..SHAPES.len()),
                    })
                    .collect();
                if majority(&frame).is_some() {
                    cells.extend(frame);
                    break;
                }
            }
        }
        Latent { frames, regions, brightness, cells }
    }
}

fn majority(cells: &[Cell]) -> Option<usize> {
    let mut counts = [0usize; SHAPES.len()];
    for c in cells {
        counts[c.shape] += 1;
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (s, _) = winners.next()?;
    winners.next().is_none().then_some(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    Color { frame: usize, region: usize },
    Shape { frame: usize },
}

/// Name of the cell at `frame`, `region`, e.g. `b3` for the third region of the second frame.
pub fn cell_name(frame: usize, region: usize) -> String {
    format!("{}{}", (b'a' + frame as u8) as char, region + 1)
}

fn parse_cell(name: &str) -> Option<(usize, usize)> {
    let mut chars = name.chars();
    let f = chars.next()?;
    let r: usize = chars.as_str().parse().ok()?;
    let frame = (f as usize).checked_sub('a' as usize)?;
    (frame < MAX_GRID && (1..=MAX_GRID).contains(&r)).then(|| (frame, r - 1))
}

impl Question {
    pub fn text(self) -> String {
        match self {
            Question::Color { frame, region } => {
                format!("what color is cell {}", cell_name(frame, region))
            }
            Question::Shape { frame } => {
                format!("which shape is most common in frame {}", NUMBERS[frame])
            }
        }
    }

    /// Parses a templated question back (used by the rule oracle).
    pub fn parse(text: &str) -> Option<Self> {
        let w: Vec<&str> = text.split_whitespace().collect();
        let num = |s: &str| NUMBERS.iter().position(|n| *n == s);
        match w.as_slice() {
            ["what", "color", "is", "cell", c] => {
                parse_cell(c).map(|(frame, region)| Question::Color { frame, region })
            }
            ["which", "shape", "is", "most", "common", "in", "frame", f] => Some(Question::Shape { frame: num(f)? }),
            _ => None,
        }
    }

    /// The attribute word answering this question for `latent`.
    pub fn attribute(self, latent: &Latent) -> &'static str {
        match self {
            Question::Color { frame, region } => COLORS[latent.cell(frame, region).color],
            Question::Shape { frame } => SHAPES[latent.majority_shape(frame).expect("frames have a unique majority")],
        }
    }

    fn templates(self) -> &'static [&'static str; 6] {
        match self {
            Question::Color { .. } => &COLOR_REFS,
            Question::Shape { .. } => &SHAPE_REFS,
        }
    }

    pub fn answer(self, latent: &Latent) -> String {
        self.templates()[0].replace("{}", self.attribute(latent))
    }

    pub fn references(self, latent: &Latent) -> Vec<String> {
        let a = self.attribute(latent);
        self.templates().iter().map(|t| t.replace("{}", a)).collect()
    }

    /// Number of distinct answers the template admits.
    pub fn answer_space(self) -> usize {
        match self {
            Question::Color { .. } => COLORS.len(),
            Question::Shape { .. } => SHAPES.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTurn {
    pub question: String,
    pub answer: String,
    pub references: Vec<String>,
}

/// Latent grid in its serialized form: attribute words, frame-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub brightness: String,
    pub cells: Vec<[String; 2]>,
}

impl LatentRecord {
    pub fn from_latent(l: &Latent) -> Self {
        LatentRecord {
            brightness: BRIGHTNESS[l.brightness].to_string(),
            cells: l.cells.iter().map(|c| [COLORS[c.color].to_string(), SHAPES[c.shape].to_string()]).collect(),
        }
    }

    pub fn to_latent(&self, frames: usize, regions: usize) -> std::result::Result<Latent, String> {
        let find =
            |set: &[&str], w: &str| set.iter().position(|s| *s == w).ok_or_else(|| format!("unknown attribute {w:?}"));
        if self.cells.len() != frames * regions {
            return Err(format!("latent grid has {} cells, expected {}", self.cells.len(), frames * regions));
        }
        let cells = self
            .cells
            .iter()
            .map(|[c, s]| Ok(Cell { color: find(&COLORS, c)?, shape: find(&SHAPES, s)? }))
            .collect::<std::result::Result<_, String>>()?;
        Ok(Latent { frames, regions, brightness: find(&BRIGHTNESS, &self.brightness)?, cells })
    }
}

/// One dialogue about one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub frames: usize,
    pub regions: usize,
    pub d_emb: usize,
    /// Frame-major `F·P·d_emb` features.
    pub features: Vec<f32>,
    pub latent: Latent,
    pub caption: String,
    pub turns: Vec<QaTurn>,
}

/// Every word the generator can emit, in a fixed order.
pub fn vocabulary() -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    let texts = COLOR_REFS
        .iter()
        .chain(&SHAPE_REFS)
        .chain([&CAPTION])
        .map(|t| t.to_string())
        .chain([Question::Color { frame: 0, region: 0 }.text(), Question::Shape { frame: 0 }.text()]);
    for t in texts {
        words.extend(t.split_whitespace().filter(|w| *w != "{}").map(String::from));
    }
    words.extend(COLORS.iter().chain(&SHAPES).chain(&BRIGHTNESS).chain(&NUMBERS[..MAX_GRID]).map(|s| s.to_string()));
    words.extend((0..MAX_GRID).flat_map(|f| (0..MAX_GRID).map(move |r| cell_name(f, r))));
    Vocabulary::from_words(words)
}

fn sample_questions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Question> {
    let mut out: Vec<Question> = Vec::with_capacity(cfg.turns);
    while out.len() < cfg.turns {
        let frame = rng.random_range(0..cfg.frames);
        let q = if rng.random_bool(0.5) {
            Question::Color { frame, region: rng.random_range(0..cfg.regions) }
        } else {
            Question::Shape { frame }
        };
        if !out.contains(&q) {
            out.push(q);
        }
    }
    out
}

/// Generates `cfg.n_dialogues` dialogues; ids are `"{prefix}{index:05}"`.
pub fn generate_dialogues(
    cfg: &SynthConfig,
    world: &SyntheticWorld,
    stream: u64,
    prefix: &str,
) -> Result<Vec<Dialogue>> {
    cfg.validate()?;
    if world.d_emb != cfg.d_emb {
        return Err(TensorError::Contract(format!("world d_emb {} differs from config {}", world.d_emb, cfg.d_emb)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::training::derive_seed(&[cfg.seed, stream]));
    let mut out = Vec::with_capacity(cfg.n_dialogues);
    for i in 0..cfg.n_dialogues {
        let latent = Latent::sample(cfg.frames, cfg.regions, &mut rng);
        let features = world.render(&latent, &mut rng);
        let questions = sample_questions(cfg, &mut rng);
        let turns = questions
            .iter()
            .map(|&q| QaTurn { question: q.text(), answer: q.answer(&latent), references: q.references(&latent) })
            .collect();
        out.push(Dialogue {
            id: format!("{prefix}{i:05}"),
            frames: cfg.frames,
            regions: cfg.regions,
            d_emb: cfg.d_emb,
            features,
            caption: CAPTION.replace("{}", BRIGHTNESS[latent.brightness]),
            latent,
            turns,
        });
    }
    Ok(out)
}

/// Train/validation/test dialogues from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

pub fn generate_corpus(cfg: &SynthConfig, sizes: [usize; 3]) -> Result<SplitCorpus> {
    let world = SyntheticWorld::new(cfg.seed, cfg.d_emb, cfg.noise);
    let split = |k: usize, n: usize, prefix: &str| {
        generate_dialogues(&SynthConfig { n_dialogues: n, ..cfg.clone() }, &world, k as u64, prefix)
    };
    Ok(SplitCorpus {
        vocab: vocabulary(),
        train: split(0, sizes[0], "train")?,
        val: split(1, sizes[1], "val")?,
        test: split(2, sizes[2], "test")?,
    })
}

/// Answers every turn from the latent grid alone.
pub fn rule_oracle(d: &Dialogue, turn: usize) -> Option<String> {
    Question::parse(&d.turns[turn].question).map(|q| q.answer(&d.latent))
}

/// Answers from the question text alone: the most frequent training answer
/// per question template (ties to the lexicographically smallest).
#[derive(Clone, Debug, Default)]
pub struct TextOnlyOracle {
    answers: std::collections::BTreeMap<String, String>,
}

impl TextOnlyOracle {
    fn template(question: &str) -> String {
        question
            .split_whitespace()
            .filter(|w| !NUMBERS.contains(w) && parse_cell(w).is_none())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn fit(train: &[Dialogue]) -> Self {
        let mut counts: std::collections::BTreeMap<String, std::collections::BTreeMap<String, usize>> =
            Default::default();
        for d in train {
            for t in &d.turns {
                *counts.entry(Self::template(&t.question)).or_default().entry(t.answer.clone()).or_default() += 1;
            }
        }
        let answers = counts
            .into_iter()
            .map(|(k, m)| {
                let best =
                    m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(a, _)| a.clone()).unwrap_or_default();
                (k, best)
            })
            .collect();
        TextOnlyOracle { answers }
    }

    pub fn answer(&self, question: &str) -> Option<&str> {
        self.answers.get(&Self::template(question)).map(String::as_str)
    }
}

/// Expected accuracy of guessing uniformly among each question's possible answers.
pub fn chance_accuracy(dialogues: &[Dialogue]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for d in dialogues {
        for t in &d.turns {
            if let Some(q) = Question::parse(&t.question) {
                sum += 1.0 / q.answer_space() as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A permutation with no fixed points (identity for n < 2).
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    loop {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_dialogues: 30, ..Default::default() }
    }

    #[test]
    fn vocabulary_is_small_and_covers_corpus() {
        let v = vocabulary();
        assert!(v.len() <= 200);
        let c = generate_corpus(&small(), [30, 5, 5]).unwrap();
        for d in c.train.iter().chain(&c.test) {
            let texts = std::iter::once(&d.caption).chain(
                d.turns.iter().flat_map(|t| std::iter::once(&t.question).chain([&t.answer]).chain(&t.references)),
            );
            for s in texts {
                assert!(!v.tokenize(s).contains(&super::super::vocab::UNK), "{s}");
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(&small(), [4, 2, 2]).unwrap(), generate_corpus(&small(), [4, 2, 2]).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(
            generate_corpus(&small(), [4, 2, 2]).unwrap().train,
            generate_corpus(&other, [4, 2, 2]).unwrap().train
        );
    }

    #[test]
    fn questions_are_distinct_and_parse() {
        let c = generate_corpus(&small(), [30, 0, 0]).unwrap();
        for d in &c.train {
            assert_eq!(d.turns.len(), 3);
            for (i, t) in d.turns.iter().enumerate() {
                assert!(t.question.ends_with(Question::parse(&t.question).unwrap().text().as_str()));
                assert!(Question::parse(&t.question).is_some());
                assert!(d.turns[..i].iter().all(|u| u.question != t.question));
                let attr = t.answer.split_whitespace().next().unwrap();
                assert!(t.references.iter().all(|r| r.split_whitespace().any(|w| w == attr)));
                assert_eq!(t.references[0], t.answer);
            }
        }
    }

    #[test]
    fn cell_names_round_trip() {
        assert_eq!(cell_name(1, 2), "b3");
        for f in 0..MAX_GRID {
            for r in 0..MAX_GRID {
                assert_eq!(parse_cell(&cell_name(f, r)), Some((f, r)));
            }
        }
        assert_eq!(parse_cell("i1"), None);
        assert_eq!(parse_cell("a0"), None);
    }

    #[test]
    fn majority_requires_unique_winner() {
        let c = |s| Cell { color: 0, shape: s };
        assert_eq!(majority(&[c(0), c(0), c(1), c(2)]), Some(0));
        assert_eq!(majority(&[c(0), c(0), c(1), c(1)]), None);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..20 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(SynthConfig { frames: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { regions: 9, ..small() }.validate().is_err());
        assert!(SynthConfig { noise: -1.0, ..small() }.validate().is_err());
        assert!(SynthConfig { frames: 1, regions: 1, turns: 3, ..small() }.validate().is_err());
    }
}
