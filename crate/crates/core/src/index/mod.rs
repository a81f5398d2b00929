//! Encoded databases and top-k retrieval.
//!
//! Database items are stored as one codeword index per subspace. A query keeps its
//! soft assignment probabilities; with orthonormal codebooks the asymmetric distance
//! `Σ_m ‖C_m p_m − C_m[b_m]‖²` equals `Σ_m (‖p_m‖² + 1) − 2·Σ_m p_m[b_m]`, so ranking
//! only needs `M` probability lookups per item.

mod scorer;
mod topk;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

pub use scorer::{
    accumulate, aqd_bruteforce, aqd_offset, score_orthonormal, AqdScorer, LookupTable,
    LutScorer, ProbabilityTable, Scorer, ScorerRegistry, AUTO,
};
pub use topk::{top_k, RankedResult};

use crate::data_io::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::quantizer::{hard_assign, quantization_gap};
use crate::trainer::ModelParams;
use crate::wire;

pub const DATABASE_MAGIC: &[u8; 4] = b"OPQB";
pub const DATABASE_VERSION: u32 = 1;

/// Row-major `N × M` codeword indices, one byte each when `K ≤ 256`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Codes {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl Codes {
    fn get(&self, idx: usize) -> usize {
        match self {
            Codes::U8(c) => c[idx] as usize,
            Codes::U16(c) => c[idx] as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDatabase {
    codes: Codes,
    m_books: usize,
    k_words: usize,
    labels: Vec<u32>,
    fingerprint: [u8; 32],
}

impl EncodedDatabase {
    /// Builds a database from row-major codes.
    pub fn new(
        codes: Vec<u16>,
        m_books: usize,
        k_words: usize,
        labels: Vec<u32>,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        if m_books == 0 || k_words == 0 || k_words > 1 << 16 {
            return Err(Error::Dimension(format!("invalid code shape M={m_books}, K={k_words}")));
        }
        if labels.is_empty() || codes.len() != labels.len() * m_books {
            return Err(Error::Dimension(format!(
                "{} codes for {} items of {m_books} subspaces",
                codes.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= k_words) {
            return Err(Error::Dimension(format!("code {bad} >= K = {k_words}")));
        }
        let codes = if k_words <= 256 {
            Codes::U8(codes.into_iter().map(|c| c as u8).collect())
        } else {
            Codes::U16(codes)
        };
        Ok(Self {
            codes,
            m_books,
            k_words,
            labels,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn m_books(&self) -> usize {
        self.m_books
    }

    pub fn k_words(&self) -> usize {
        self.k_words
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn codes(&self) -> &Codes {
        &self.codes
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    #[inline]
    pub fn code(&self, item: usize, subspace: usize) -> usize {
        self.codes.get(item * self.m_books + subspace)
    }

    pub fn row(&self, item: usize) -> Vec<usize> {
        (0..self.m_books).map(|m| self.code(item, m)).collect()
    }

    /// Fails unless the database was encoded by exactly this model.
    pub fn check_model(&self, model: &ModelParams) -> Result<()> {
        if model.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_header(w, DATABASE_MAGIC, DATABASE_VERSION)?;
        w.write_u32::<LittleEndian>(wire::to_u32(self.len(), "N")?)?;
        w.write_u32::<LittleEndian>(wire::to_u32(self.m_books, "M")?)?;
        w.write_u32::<LittleEndian>(wire::to_u32(self.k_words, "K")?)?;
        w.write_all(&self.fingerprint)?;
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
        match &self.codes {
            Codes::U8(c) => w.write_all(c)?,
            Codes::U16(c) => {
                for &v in c {
                    w.write_u16::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        wire::read_header(r, DATABASE_MAGIC, DATABASE_VERSION)?;
        let n = wire::read_u32(r)? as usize;
        let m_books = wire::read_u32(r)? as usize;
        let k_words = wire::read_u32(r)? as usize;
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint).map_err(wire::eof)?;
        let mut labels = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut labels).map_err(wire::eof)?;
        let total = n * m_books;
        let codes: Vec<u16> = if k_words <= 256 {
            let mut buf = vec![0u8; total];
            r.read_exact(&mut buf).map_err(wire::eof)?;
            buf.into_iter().map(u16::from).collect()
        } else {
            let mut buf = vec![0u16; total];
            r.read_u16_into::<LittleEndian>(&mut buf).map_err(wire::eof)?;
            buf
        };
        Self::new(codes, m_books, k_words, labels, fingerprint)
            .map_err(|e| Error::Format(format!("database body: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// A query's assignment probabilities, one row per subspace. The rows double as the
/// lookup tables of the orthonormal scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySoftRep {
    pub probs: Vec<Vec<f64>>,
    /// Copied from the producing model's codebooks.
    pub orthonormal: bool,
}

impl QuerySoftRep {
    pub fn m_books(&self) -> usize {
        self.probs.len()
    }

    pub fn k_words(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }
}

fn check_input(model: &ModelParams, embedding: &[f64]) -> Result<()> {
    if embedding.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "embedding of dimension {} for a model expecting {}",
            embedding.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Hard-assigns every subspace of every item.
pub fn encode_database(model: &ModelParams, embeddings: &EmbeddingDataset) -> Result<EncodedDatabase> {
    if embeddings.dim() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "embeddings of dimension {} for a model expecting {}",
            embeddings.dim(),
            model.input_dim()
        )));
    }
    let spec = *model.spec();
    let mut codes = Vec::with_capacity(embeddings.len() * spec.m_books);
    for row in embeddings.rows() {
        for p in model.probabilities(row)? {
            codes.push(hard_assign(&p) as u16);
        }
    }
    EncodedDatabase::new(
        codes,
        spec.m_books,
        spec.k_words,
        embeddings.labels().to_vec(),
        model.fingerprint(),
    )
}

pub fn query_soft_rep(model: &ModelParams, embedding: &[f64]) -> Result<QuerySoftRep> {
    check_input(model, embedding)?;
    Ok(QuerySoftRep {
        probs: model.probabilities(embedding)?,
        orthonormal: model.codebooks.is_orthonormal(),
    })
}

/// Mean `‖s − C_{k*}‖` over every (item, subspace) pair.
pub fn mean_quantization_gap(model: &ModelParams, embeddings: &EmbeddingDataset) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for row in embeddings.rows() {
        for (m, p) in model.probabilities(row)?.iter().enumerate() {
            total += quantization_gap(p, model.codebooks.book(m))?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A model paired with a database it encoded, plus the scoring strategy in use.
pub struct Searcher<'a> {
    model: &'a ModelParams,
    db: &'a EncodedDatabase,
    scorer: std::sync::Arc<dyn Scorer>,
}

impl<'a> Searcher<'a> {
    /// Verifies the fingerprint once and resolves `scorer` (`auto` picks `lut` for
    /// orthonormal codebooks and `aqd` otherwise).
    pub fn new(
        model: &'a ModelParams,
        db: &'a EncodedDatabase,
        registry: &ScorerRegistry,
        scorer: &str,
    ) -> Result<Self> {
        db.check_model(model)?;
        let scorer = registry.select(scorer, &model.codebooks)?;
        Ok(Self { model, db, scorer })
    }

    pub fn scorer_name(&self) -> &'static str {
        self.scorer.name()
    }

    pub fn scores(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let q = query_soft_rep(self.model, embedding)?;
        self.scorer.score(&q, self.db, &self.model.codebooks)
    }

    pub fn search(&self, embedding: &[f64], k: usize) -> Result<RankedResult> {
        Ok(top_k(&self.scores(embedding)?, k))
    }
}

/// One-shot retrieval with automatic scorer selection.
pub fn query(
    model: &ModelParams,
    db: &EncodedDatabase,
    embedding: &[f64],
    k: usize,
) -> Result<RankedResult> {
    Searcher::new(model, db, &ScorerRegistry::with_builtins(), AUTO)?.search(embedding, k)
}
