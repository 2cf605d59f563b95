//! Closed-vocabulary sub-sentence embedder and the external embedding file.
//!
//! Models consume a `[n, d_text]` matrix per prompt. It comes either from
//! [`TextEmbedder`] (a learned lookup table, mean-pooled per part) or from an
//! adapter file holding precomputed vectors from some other encoder.

use std::path::Path;

use diffnet::{Embedding, Graph, ParamStore, Result as NetResult, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{read_file, write_file, Error, Result};
use crate::motion::Verb;
use crate::text::{template, DecomposedPrompt};

pub const UNK: &str = "<unk>";
const MARKERS: [&str; 8] = ["then", "and", "before", "after", "while", "twice", "again", "it"];

/// Lowercases, splits on whitespace and trims punctuation from each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// Template words, sequence markers and verb names, plus `<unk>` at id 0.
    pub fn standard() -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        push(UNK);
        for v in Verb::ALL {
            for w in tokenize(template(v)) {
                push(&w);
            }
        }
        for m in MARKERS {
            push(m);
        }
        for v in Verb::ALL {
            for w in v.name().split('_') {
                push(w);
            }
        }
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).unwrap_or(0)
    }

    /// Token ids of `text`; a text with no tokens maps to `[<unk>]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    /// Short digest of the word list, stored alongside embeddings and
    /// checkpoints to catch vocabulary drift.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    /// `[n, d_text]`.
    pub vectors: Tensor,
    pub vocabulary_version: String,
}

impl TextEmbedding {
    pub fn new(vectors: Tensor, vocabulary_version: impl Into<String>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 {
            return Err(Error::validation(format!("embedding must be [n, d], got {:?}", vectors.shape())));
        }
        if !vectors.is_finite() {
            return Err(Error::validation("embedding contains non-finite values"));
        }
        Ok(Self {
            vectors,
            vocabulary_version: vocabulary_version.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Learned lookup table, mean-pooled over each part's tokens.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub vocabulary: Vocabulary,
    pub table: Embedding,
}

impl TextEmbedder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_text: usize, rng: &mut R) -> Self {
        let vocabulary = Vocabulary::standard();
        let table = Embedding::new(store, name, vocabulary.len(), d_text, 1.0, rng);
        Self { vocabulary, table }
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    /// `[parts.len(), d_text]` node, differentiable wrt the table.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, parts: &[String]) -> NetResult<Var> {
        let encoded: Vec<Vec<usize>> = parts.iter().map(|p| self.vocabulary.encode(p)).collect();
        let total: usize = encoded.iter().map(Vec::len).sum();
        let mut pool = vec![0.0; parts.len() * total];
        let mut ids = Vec::with_capacity(total);
        for (i, e) in encoded.iter().enumerate() {
            for &id in e {
                pool[i * total + ids.len()] = 1.0 / e.len() as f64;
                ids.push(id);
            }
        }
        let rows = self.table.forward(g, store, &ids)?;
        let pool = g.constant(Tensor::matrix(parts.len(), total, pool)?);
        g.matmul(pool, rows)
    }

    pub fn embed(&self, store: &ParamStore, prompt: &DecomposedPrompt) -> Result<TextEmbedding> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &prompt.parts)?;
        TextEmbedding::new(g.value(v).clone(), self.vocabulary.version())
    }
}

/// Adapter file: little-endian `u32 n`, `u32 d_text`, then `n * d_text` f32.
pub fn write_embedding_file(path: &Path, emb: &TextEmbedding) -> Result<()> {
    let mut out = Vec::with_capacity(8 + emb.vectors.numel() * 4);
    out.extend_from_slice(&(emb.len() as u32).to_le_bytes());
    out.extend_from_slice(&(emb.dim() as u32).to_le_bytes());
    for &v in emb.vectors.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_embedding_file(path: &Path) -> Result<TextEmbedding> {
    let bytes = read_file(path)?;
    if bytes.len() < 8 {
        return Err(Error::parse(bytes.len(), "embedding file shorter than its header"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let want = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::parse(0, "embedding header overflows"))?;
    if bytes.len() - 8 != want {
        return Err(Error::parse(
            bytes.len(),
            format!("expected {want} bytes of {n}x{d} rows, found {}", bytes.len() - 8),
        ));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    TextEmbedding::new(Tensor::matrix(n, d, data)?, "external")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Source;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn embedder() -> (ParamStore, TextEmbedder) {
        let mut store = ParamStore::new("text");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = TextEmbedder::new(&mut store, "embed", 16, &mut rng);
        (store, e)
    }

    #[test]
    fn vocabulary_is_closed() {
        let v = Vocabulary::standard();
        assert_eq!(v.words()[0], UNK);
        assert_eq!(v.encode("A person walks forward."), vec![v.id("a"), v.id("person"), v.id("walks"), v.id("forward")]);
        assert_eq!(v.encode("moonwalks"), vec![0]);
        assert_eq!(v.encode("..."), vec![0]);
        assert_eq!(v.version(), Vocabulary::standard().version());
    }

    #[test]
    fn identical_parts_identical_vectors() {
        let (store, e) = embedder();
        let p = DecomposedPrompt::new("x", vec!["waves".into(), "squats".into(), "waves".into()], Source::Rules).unwrap();
        let emb = e.embed(&store, &p).unwrap();
        assert_eq!(emb.vectors.shape(), &[3, 16]);
        assert_eq!(emb.vectors.row_slice(0), emb.vectors.row_slice(2));
        assert_ne!(emb.vectors.row_slice(0), emb.vectors.row_slice(1));
    }

    #[test]
    fn mean_pooling() {
        let (store, e) = embedder();
        let p = DecomposedPrompt::new("x", vec!["walks forward".into()], Source::Rules).unwrap();
        let emb = e.embed(&store, &p).unwrap();
        let table = store.value(e.table.table);
        let (a, b) = (e.vocabulary.id("walks"), e.vocabulary.id("forward"));
        for k in 0..16 {
            let want = 0.5 * (table.at(a, k) + table.at(b, k));
            assert!((emb.vectors.at(0, k) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let emb = TextEmbedding::new(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.25, 8.0]).unwrap(), "v").unwrap();
        write_embedding_file(&path, &emb).unwrap();
        let back = read_embedding_file(&path).unwrap();
        assert_eq!(back.vectors, emb.vectors);
        assert_eq!(back.vocabulary_version, "external");
        std::fs::write(&path, [1, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        assert!(matches!(read_embedding_file(&path), Err(Error::Parse { .. })));
    }
}
