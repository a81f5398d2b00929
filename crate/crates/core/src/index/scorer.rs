//! Query-to-database scoring strategies.
//!
//! Every strategy returns one similarity per database item, higher is better, so
//! rankings are always produced by the same [`top_k`](super::top_k). Strategies are
//! registered by name in a [`ScorerRegistry`] and picked at runtime.

use std::collections::BTreeMap;
use std::ops::Add;
use std::sync::Arc;

use crate::codebook::CodebookSet;
use crate::error::{Error, Result};
use crate::index::{Codes, EncodedDatabase, QuerySoftRep};

/// Per-subspace table indexed by codeword id.
pub trait LookupTable {
    type Value: Copy + Add<Output = Self::Value>;

    fn lookup(&self, subspace: usize, code: usize) -> Self::Value;
}

/// The query's probability vectors laid out as one flat `M × K` table.
#[derive(Clone, Debug)]
pub struct ProbabilityTable {
    k_words: usize,
    values: Vec<f64>,
}

impl ProbabilityTable {
    pub fn new(query: &QuerySoftRep) -> Self {
        Self {
            k_words: query.k_words(),
            values: query.probs.concat(),
        }
    }
}

impl LookupTable for ProbabilityTable {
    type Value = f64;

    #[inline(always)]
    fn lookup(&self, subspace: usize, code: usize) -> f64 {
        self.values[subspace * self.k_words + code]
    }
}

/// Sums one table entry per subspace for every database row: `M` lookups and `M − 1` additions.
pub fn accumulate<T: LookupTable>(table: &T, db: &EncodedDatabase) -> Vec<T::Value> {
    match db.codes() {
        Codes::U8(codes) => accumulate_rows(table, codes, db.m_books()),
        Codes::U16(codes) => accumulate_rows(table, codes, db.m_books()),
    }
}

fn accumulate_rows<T, C>(table: &T, codes: &[C], m_books: usize) -> Vec<T::Value>
where
    T: LookupTable,
    C: Copy + Into<usize>,
{
    codes
        .chunks_exact(m_books)
        .map(|row| {
            let mut acc = table.lookup(0, row[0].into());
            for (m, &c) in row.iter().enumerate().skip(1) {
                acc = acc + table.lookup(m, c.into());
            }
            acc
        })
        .collect()
}

fn check_shapes(query: &QuerySoftRep, db: &EncodedDatabase) -> Result<()> {
    if query.m_books() != db.m_books() || query.k_words() != db.k_words() {
        return Err(Error::Dimension(format!(
            "query has {}x{} probabilities, database codes are {}x{}",
            query.m_books(),
            query.k_words(),
            db.m_books(),
            db.k_words()
        )));
    }
    Ok(())
}

/// Lookup-table similarity `Σ_m p_m[b_im]`, valid only for orthonormal codebooks where it
/// ranks items exactly like the asymmetric distance.
pub fn score_orthonormal(query: &QuerySoftRep, db: &EncodedDatabase) -> Result<Vec<f64>> {
    if !query.orthonormal {
        return Err(Error::NotOrthonormal);
    }
    check_shapes(query, db)?;
    Ok(accumulate(&ProbabilityTable::new(query), db))
}

/// Exact asymmetric distance `Σ_m ‖C_m p_m − C_m[b_im]‖²` for any codebook set; lower is better.
pub fn aqd_bruteforce(
    query: &QuerySoftRep,
    db: &EncodedDatabase,
    codebooks: &CodebookSet,
) -> Result<Vec<f64>> {
    check_shapes(query, db)?;
    let spec = codebooks.spec();
    if spec.m_books != db.m_books() || spec.k_words != db.k_words() {
        return Err(Error::Dimension("codebooks do not match the database codes".into()));
    }
    let soft: Vec<Vec<f64>> = codebooks
        .books()
        .iter()
        .zip(&query.probs)
        .map(|(book, p)| book.matrix().mul_vec(p))
        .collect::<Result<_>>()?;
    let distances = (0..db.len())
        .map(|i| {
            (0..db.m_books())
                .map(|m| {
                    let word = codebooks.book(m).codeword(db.code(i, m));
                    soft[m]
                        .iter()
                        .zip(word)
                        .map(|(s, c)| (s - c) * (s - c))
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(distances)
}

pub trait Scorer: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Whether this strategy produces correct rankings for the given codebooks.
    fn supports(&self, codebooks: &CodebookSet) -> bool;

    /// Similarity per database item; higher ranks first.
    fn score(
        &self,
        query: &QuerySoftRep,
        db: &EncodedDatabase,
        codebooks: &CodebookSet,
    ) -> Result<Vec<f64>>;
}

/// Probability lookups; requires orthonormal codebooks.
#[derive(Debug, Default)]
pub struct LutScorer;

impl Scorer for LutScorer {
    fn name(&self) -> &'static str {
        "lut"
    }

    fn description(&self) -> &'static str {
        "sum of query probabilities indexed by database codes (orthonormal codebooks only)"
    }

    fn supports(&self, codebooks: &CodebookSet) -> bool {
        codebooks.is_orthonormal()
    }

    fn score(&self, query: &QuerySoftRep, db: &EncodedDatabase, _: &CodebookSet) -> Result<Vec<f64>> {
        score_orthonormal(query, db)
    }
}

/// Negated exact asymmetric distance; works with any codebooks.
#[derive(Debug, Default)]
pub struct AqdScorer;

impl Scorer for AqdScorer {
    fn name(&self) -> &'static str {
        "aqd"
    }

    fn description(&self) -> &'static str {
        "negated asymmetric quantization distance (any codebooks)"
    }

    fn supports(&self, _: &CodebookSet) -> bool {
        true
    }

    fn score(
        &self,
        query: &QuerySoftRep,
        db: &EncodedDatabase,
        codebooks: &CodebookSet,
    ) -> Result<Vec<f64>> {
        Ok(aqd_bruteforce(query, db, codebooks)?
            .into_iter()
            .map(|d| -d)
            .collect())
    }
}

/// Name under which [`ScorerRegistry::select`] picks the first supporting scorer.
pub const AUTO: &str = "auto";

/// Scorers by name. `auto` resolves to the first registered scorer (in preference
/// order) that supports the codebooks.
#[derive(Clone, Default)]
pub struct ScorerRegistry {
    by_name: BTreeMap<&'static str, Arc<dyn Scorer>>,
    preference: Vec<&'static str>,
}

impl ScorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `lut` first, `aqd` as the fallback.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(LutScorer));
        r.register(Arc::new(AqdScorer));
        r
    }

    /// Adds a scorer; a scorer with the same name is replaced but keeps its preference slot.
    pub fn register(&mut self, scorer: Arc<dyn Scorer>) {
        let name = scorer.name();
        if self.by_name.insert(name, scorer).is_none() {
            self.preference.push(name);
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.preference.clone()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Scorer>> {
        self.by_name
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownScorer(name.to_string()))
    }

    /// Resolves `name` (or `auto`) against the codebooks the scorer will run with.
    pub fn select(&self, name: &str, codebooks: &CodebookSet) -> Result<Arc<dyn Scorer>> {
        if name == AUTO {
            return self
                .preference
                .iter()
                .map(|n| &self.by_name[n])
                .find(|s| s.supports(codebooks))
                .cloned()
                .ok_or_else(|| Error::UnknownScorer(AUTO.into()));
        }
        let scorer = self.get(name)?;
        if !scorer.supports(codebooks) {
            return Err(Error::NotOrthonormal);
        }
        Ok(scorer)
    }
}

/// `Σ_m ‖p_m‖² + M`: the per-query constant linking the two scorers under orthonormality,
/// `aqd_i = constant − 2·score_i`.
pub fn aqd_offset(query: &QuerySoftRep) -> f64 {
    query
        .probs
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .sum()
}
