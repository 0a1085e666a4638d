//! Line-delimited corpus files.
//!
//! The first line is a header naming the format and the vocabulary; every
//! following line is one dialogue. Features are base64 little-endian `f32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::synth::{Dialogue, LatentRecord, QaTurn};
use super::vocab::{Vocabulary, EOS};
use super::DataError;
use crate::fusion::{DialogueInstance, Turn, VideoFeatures};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::TrainingData;

pub const CORPUS_FORMAT: &str = "mmfuse-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    frames: usize,
    regions: usize,
    d_emb: usize,
    features: String,
    latent: LatentRecord,
    caption: String,
    turns: Vec<QaTurn>,
}

fn encode_f32(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(s: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("features: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("features: {} bytes is not a whole number of f32", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn to_record(d: &Dialogue) -> Record {
    Record {
        id: d.id.clone(),
        frames: d.frames,
        regions: d.regions,
        d_emb: d.d_emb,
        features: encode_f32(&d.features),
        latent: LatentRecord::from_latent(&d.latent),
        caption: d.caption.clone(),
        turns: d.turns.clone(),
    }
}

fn from_record(r: Record) -> Result<Dialogue, String> {
    let features = decode_f32(&r.features)?;
    if features.len() != r.frames * r.regions * r.d_emb {
        return Err(format!(
            "features: {} values, expected frames·regions·d_emb = {}",
            features.len(),
            r.frames * r.regions * r.d_emb
        ));
    }
    if r.turns.is_empty() {
        return Err("turns: empty".into());
    }
    if let Some(i) = r.turns.iter().position(|t| t.references.is_empty()) {
        return Err(format!("turns[{i}].references: empty"));
    }
    let latent = r.latent.to_latent(r.frames, r.regions).map_err(|e| format!("latent: {e}"))?;
    Ok(Dialogue {
        id: r.id,
        frames: r.frames,
        regions: r.regions,
        d_emb: r.d_emb,
        features,
        latent,
        caption: r.caption,
        turns: r.turns,
    })
}

pub fn write_corpus<W: Write>(mut w: W, vocab: &Vocabulary, dialogues: &[Dialogue]) -> std::io::Result<()> {
    let header = Header { format: CORPUS_FORMAT.into(), version: CORPUS_VERSION, vocab: vocab.tokens().to_vec() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for d in dialogues {
        serde_json::to_writer(&mut w, &to_record(d))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_corpus(path: &Path, vocab: &Vocabulary, dialogues: &[Dialogue]) -> Result<(), DataError> {
    let io = |e| DataError::io(path, e);
    let f = File::create(path).map_err(io)?;
    write_corpus(BufWriter::new(f), vocab, dialogues).map_err(io)
}

/// Streams dialogues one line at a time.
pub struct CorpusReader<R> {
    lines: Lines<R>,
    vocab: Vocabulary,
    index: usize,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|e| DataError::io(path, e))?;
        Self::new(BufReader::new(f))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Result<Self, DataError> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(Ok(l)) => l,
            Some(Err(e)) => return Err(DataError::Header(e.to_string())),
            None => return Err(DataError::Header("file is empty".into())),
        };
        let h: Header = serde_json::from_str(&first).map_err(|e| DataError::Header(e.to_string()))?;
        if h.format != CORPUS_FORMAT || h.version != CORPUS_VERSION {
            return Err(DataError::Header(format!("unsupported format {:?} version {}", h.format, h.version)));
        }
        let vocab = Vocabulary::from_token_list(&h.vocab).map_err(DataError::Header)?;
        Ok(CorpusReader { lines, vocab, index: 0 })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Dialogue, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = self.lines.next()?;
        let record = self.index;
        self.index += 1;
        let schema = |message: String| DataError::Schema { record, message };
        Some(match line {
            Err(e) => Err(schema(e.to_string())),
            Ok(l) => serde_json::from_str::<Record>(&l)
                .map_err(|e| schema(e.to_string()))
                .and_then(|r| from_record(r).map_err(schema)),
        })
    }
}

pub fn load_corpus(path: &Path) -> Result<(Vocabulary, Vec<Dialogue>), DataError> {
    let reader = CorpusReader::open(path)?;
    let vocab = reader.vocab().clone();
    let dialogues = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((vocab, dialogues))
}

/// Instance id of turn `turn` (0-based) of a dialogue.
pub fn instance_id(dialogue: &str, turn: usize) -> String {
    format!("{dialogue}/{turn}")
}

/// One instance per turn; earlier turns (with their gold answers) form the history.
pub fn dialogue_instances(d: &Dialogue, vocab: &Vocabulary) -> Vec<DialogueInstance> {
    let caption = vocab.tokenize(&d.caption);
    let mut history = Vec::new();
    let mut out = Vec::with_capacity(d.turns.len());
    for (k, t) in d.turns.iter().enumerate() {
        let question = vocab.tokenize(&t.question);
        let answer = vocab.tokenize(&t.answer);
        let mut target = answer.clone();
        target.push(EOS);
        out.push(DialogueInstance {
            id: instance_id(&d.id, k),
            caption: caption.clone(),
            history: history.clone(),
            question: question.clone(),
            target,
            references: t.references.iter().map(|r| vocab.tokenize(r)).collect(),
        });
        history.push(Turn { user: question, system: answer });
    }
    out
}

pub fn video_features<T: Scalar>(d: &Dialogue) -> VideoFeatures<T> {
    let grid = Tensor::new(
        vec![d.frames, d.regions, d.d_emb],
        d.features.iter().map(|&x| T::from_f32_bits(x.to_bits())).collect(),
    )
    .expect("feature length checked on load");
    VideoFeatures::new(grid).expect("rank-3 grid")
}

pub fn training_data<T: Scalar>(dialogues: &[Dialogue], vocab: &Vocabulary) -> TrainingData<T> {
    let mut data = TrainingData { instances: Vec::new(), videos: Vec::new(), video_of: Vec::new() };
    for (v, d) in dialogues.iter().enumerate() {
        data.videos.push(video_features(d));
        for inst in dialogue_instances(d, vocab) {
            data.instances.push(inst);
            data.video_of.push(v);
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_corpus, SynthConfig};

    fn corpus() -> (Vocabulary, Vec<Dialogue>) {
        let c = generate_corpus(&SynthConfig { n_dialogues: 3, ..Default::default() }, [3, 0, 0]).unwrap();
        (c.vocab, c.train)
    }

    fn to_bytes(v: &Vocabulary, d: &[Dialogue]) -> Vec<u8> {
        let mut b = Vec::new();
        write_corpus(&mut b, v, d).unwrap();
        b
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let (v, d) = corpus();
        let bytes = to_bytes(&v, &d);
        let r = CorpusReader::new(bytes.as_slice()).unwrap();
        assert_eq!(r.vocab(), &v);
        let back: Vec<Dialogue> = r.map(Result::unwrap).collect();
        assert_eq!(back, d);
        assert_eq!(to_bytes(&v, &back), bytes);
    }

    #[test]
    fn missing_references_names_record() {
        let (v, d) = corpus();
        let text = String::from_utf8(to_bytes(&v, &d)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        rec["turns"][1].as_object_mut().unwrap().remove("references");
        lines[2] = rec.to_string();
        let joined = lines.join("\n");
        let results: Vec<_> = CorpusReader::new(joined.as_bytes()).unwrap().collect();
        assert!(results[0].is_ok());
        match &results[1] {
            Err(DataError::Schema { record, message }) => {
                assert_eq!(*record, 1);
                assert!(message.contains("references"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(matches!(CorpusReader::new(&b""[..]), Err(DataError::Header(_))));
        assert!(matches!(
            CorpusReader::new(&b"{\"format\":\"x\",\"version\":1,\"vocab\":[]}\n"[..]),
            Err(DataError::Header(_))
        ));
    }

    #[test]
    fn instances_carry_history() {
        let (v, d) = corpus();
        let inst = dialogue_instances(&d[0], &v);
        assert_eq!(inst.len(), 3);
        assert_eq!(inst[2].history.len(), 2);
        assert_eq!(inst[2].history[0].system, v.tokenize(&d[0].turns[0].answer));
        assert_eq!(*inst[0].target.last().unwrap(), EOS);
        let data: TrainingData<f32> = training_data(&d, &v);
        assert_eq!(data.len(), 9);
        assert_eq!(data.video_of, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }
}
