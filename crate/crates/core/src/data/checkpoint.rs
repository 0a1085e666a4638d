//! Binary checkpoints: magic, version, a key=value config block, then named
//! `f32` arrays. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::vocab::Vocabulary;
use super::DataError;
use crate::fusion::FusionConfig;
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::training::Progress;
use crate::transformer::TransformerConfig;

pub const MAGIC: &[u8; 8] = b"MMFUSEv1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

fn err(field: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Checkpoint { field: field.into(), message: message.into() }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut text = String::new();
    for (k, v) in &ck.config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(err(format!("config.{k}"), "keys may not contain '=' or newlines, values no newlines"));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in &ck.arrays {
        let n = u16::try_from(name.len()).map_err(|_| err(name.as_str(), "name longer than 65535 bytes"))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| err(name.as_str(), "rank above 255"))?);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| err(name.as_str(), "extent above u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(err(
                field,
                format!("truncated: need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(err("magic", "not an MMFUSEv1 checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(err("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = c.u32("config length")? as usize;
    let text = std::str::from_utf8(c.take(len, "config")?).map_err(|e| err("config", e.to_string()))?;
    let mut config = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| err("config", format!("line {line:?} lacks '='")))?;
        config.insert(k.to_string(), v.to_string());
    }
    let mut arrays = Vec::new();
    while c.pos < bytes.len() {
        let i = arrays.len();
        let n = u16::from_le_bytes(c.take(2, &format!("array {i} name length"))?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(n, &format!("array {i} name"))?)
            .map_err(|e| err(format!("array {i} name"), e.to_string()))?
            .to_string();
        let rank = c.take(1, &format!("{name} rank"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32(&format!("{name} extents"))? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| err(&name, "element count overflows"))?;
        let bytes_needed = count.checked_mul(4).ok_or_else(|| err(&name, "payload size overflows"))?;
        let payload = c.take(bytes_needed, &format!("{name} payload"))?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| err(&name, e.to_string()))?;
        arrays.push((name, t));
    }
    if let Some(n) = config.get("n_arrays") {
        if n.parse::<usize>().ok() != Some(arrays.len()) {
            return Err(err("n_arrays", format!("header says {n}, file holds {}", arrays.len())));
        }
    }
    Ok(Checkpoint { config, arrays })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), DataError> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes)
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub vocab: Vocabulary,
    pub progress: Progress,
    /// Free-form run settings stored alongside (keys prefixed `run.` in the file).
    pub run: BTreeMap<String, String>,
}

fn model_config_entries(c: &ModelConfig) -> Vec<(&'static str, String)> {
    let t = &c.transformer;
    let f = &c.fusion;
    vec![
        ("model.n_layers", t.n_layers.to_string()),
        ("model.n_heads", t.n_heads.to_string()),
        ("model.d_model", t.d_model.to_string()),
        ("model.d_ff", t.d_ff.to_string()),
        ("model.vocab_size", t.vocab_size.to_string()),
        ("model.max_seq_len", t.max_seq_len.to_string()),
        ("model.dropout", t.dropout.to_string()),
        ("model.d_emb", f.d_emb.to_string()),
        ("model.max_frames", f.max_frames.to_string()),
        ("model.max_regions", f.max_regions.to_string()),
        ("model.max_turns", f.max_turns.to_string()),
    ]
}

fn field<T: std::str::FromStr>(config: &BTreeMap<String, String>, key: &str) -> Result<T, DataError> {
    let v = config.get(key).ok_or_else(|| err(key, "missing"))?;
    v.parse().map_err(|_| err(key, format!("cannot parse {v:?}")))
}

impl TrainingState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = BTreeMap::new();
        for (k, v) in model_config_entries(&self.model.config) {
            config.insert(k.to_string(), v);
        }
        config.insert("vocab".into(), self.vocab.tokens().join(" "));
        config.insert("adam.step".into(), self.adam.step.to_string());
        config.insert("progress.step".into(), self.progress.step.to_string());
        for (k, v) in &self.run {
            config.insert(format!("run.{k}"), v.clone());
        }
        let p = &self.model.params;
        let mut arrays = Vec::with_capacity(3 * p.len());
        for (prefix, tensors) in [("param", p.tensors()), ("adam_m", &self.adam.m[..]), ("adam_v", &self.adam.v[..])] {
            for (i, t) in tensors.iter().enumerate() {
                arrays.push((format!("{prefix}/{}", p.name(i)), t.clone()));
            }
        }
        config.insert("n_arrays".into(), arrays.len().to_string());
        Checkpoint { config, arrays }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DataError> {
        let c = &ck.config;
        let config = ModelConfig {
            transformer: TransformerConfig {
                n_layers: field(c, "model.n_layers")?,
                n_heads: field(c, "model.n_heads")?,
                d_model: field(c, "model.d_model")?,
                d_ff: field(c, "model.d_ff")?,
                vocab_size: field(c, "model.vocab_size")?,
                max_seq_len: field(c, "model.max_seq_len")?,
                dropout: field(c, "model.dropout")?,
            },
            fusion: FusionConfig {
                d_emb: field(c, "model.d_emb")?,
                max_frames: field(c, "model.max_frames")?,
                max_regions: field(c, "model.max_regions")?,
                max_turns: field(c, "model.max_turns")?,
            },
        };
        let tokens: Vec<String> =
            c.get("vocab").ok_or_else(|| err("vocab", "missing"))?.split(' ').map(String::from).collect();
        let vocab = Vocabulary::from_token_list(&tokens).map_err(|m| err("vocab", m))?;
        if vocab.len() != config.transformer.vocab_size {
            return Err(err(
                "vocab",
                format!("{} tokens but model.vocab_size = {}", vocab.len(), config.transformer.vocab_size),
            ));
        }
        let mut model = Model::<f32>::init(config, 0).map_err(|e| err("model", e.to_string()))?;
        let mut adam = AdamState::new(&model.params);
        adam.step = field(c, "adam.step")?;
        let lookup: BTreeMap<&str, &Tensor<f32>> = ck.arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if lookup.len() != 3 * model.params.len() {
            return Err(err("n_arrays", format!("{} arrays, model needs {}", lookup.len(), 3 * model.params.len())));
        }
        for i in 0..model.params.len() {
            let pname = model.params.name(i).to_string();
            for prefix in ["param", "adam_m", "adam_v"] {
                let name = format!("{prefix}/{pname}");
                let t = *lookup.get(name.as_str()).ok_or_else(|| err(&name, "missing"))?;
                let want = model.params.tensor(i).shape();
                if t.shape() != want {
                    return Err(err(&name, format!("shape {:?}, model expects {:?}", t.shape(), want)));
                }
                let slot = match prefix {
                    "param" => model.params.tensor_mut(i),
                    "adam_m" => &mut adam.m[i],
                    _ => &mut adam.v[i],
                };
                *slot = t.clone();
            }
        }
        let run = c.iter().filter_map(|(k, v)| k.strip_prefix("run.").map(|k| (k.to_string(), v.clone()))).collect();
        Ok(TrainingState { model, adam, vocab, progress: Progress { step: field(c, "progress.step")? }, run })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = BTreeMap::new();
        config.insert("a".into(), "1".into());
        Checkpoint {
            config,
            arrays: vec![
                ("x".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("s".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn roundtrip_bitwise() {
        let ck = sample();
        let back = decode(&encode(&ck).unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        for ((n1, a), (n2, b)) in ck.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_magic_names_field() {
        let mut b = encode(&sample()).unwrap();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(DataError::Checkpoint { field, .. }) if field == "magic"));
    }

    #[test]
    fn wrong_version_names_field() {
        let mut b = encode(&sample()).unwrap();
        b[8] = 9;
        assert!(matches!(decode(&b), Err(DataError::Checkpoint { field, .. }) if field == "version"));
    }

    #[test]
    fn truncation_names_array() {
        let b = encode(&sample()).unwrap();
        match decode(&b[..b.len() - 2]) {
            Err(DataError::Checkpoint { field, message }) => {
                assert_eq!(field, "s payload");
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }
}
