//! Deterministic orthonormal codebooks.
//!
//! The raw DCT-II basis `A_ij = cos(jπ(i + ½)/d)` has orthogonal but not unit
//! columns. Scaling column 0 by `1/√2` and the whole matrix by `√(2/d)` yields an
//! orthogonal matrix `A†`. The first codebook is the leading `K` columns of `A†`,
//! and every following codebook is `A†` applied to the previous one, which keeps
//! each codebook orthonormal while making the books differ from each other.

use std::f64::consts::{PI, SQRT_2};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::wire;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"OPQC";
pub const CODEBOOK_VERSION: u32 = 1;

/// Shape of a set of codebooks: `m_books` books of `k_words` codewords in `sub_dim` dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodebookSpec {
    pub m_books: usize,
    pub sub_dim: usize,
    pub k_words: usize,
}

impl CodebookSpec {
    /// A spec usable for encoding: `K` is a power of two with `2 ≤ K ≤ d`.
    pub fn new(m_books: usize, sub_dim: usize, k_words: usize) -> Result<Self> {
        if k_words < 2 || !k_words.is_power_of_two() {
            return Err(Error::Spec(format!(
                "k_words = {k_words} must be a power of two >= 2"
            )));
        }
        Self::unrestricted(m_books, sub_dim, k_words)
    }

    /// Only the constraints the matrix construction needs: `1 ≤ K ≤ d`, `M ≥ 1`.
    pub fn unrestricted(m_books: usize, sub_dim: usize, k_words: usize) -> Result<Self> {
        if m_books == 0 {
            return Err(Error::Spec("m_books must be at least 1".into()));
        }
        if sub_dim == 0 {
            return Err(Error::Spec("sub_dim must be at least 1".into()));
        }
        if k_words == 0 {
            return Err(Error::Spec("k_words must be at least 1".into()));
        }
        if k_words > sub_dim {
            return Err(Error::Spec(format!(
                "k_words = {k_words} exceeds sub_dim = {sub_dim}; orthonormal codewords need K <= d"
            )));
        }
        Ok(Self {
            m_books,
            sub_dim,
            k_words,
        })
    }

    /// Splits a `dim`-dimensional feature into `m_books` equal sub-vectors.
    pub fn for_feature_dim(dim: usize, m_books: usize, k_words: usize) -> Result<Self> {
        if m_books == 0 || !dim.is_multiple_of(m_books) {
            return Err(Error::Spec(format!(
                "feature dimension {dim} is not divisible by {m_books} codebooks"
            )));
        }
        Self::new(m_books, dim / m_books, k_words)
    }

    /// Total feature dimension `M·d`.
    pub fn feature_dim(&self) -> usize {
        self.m_books * self.sub_dim
    }

    /// Code length in bits, `M·log2 K` (rounded up for non power-of-two `K`).
    pub fn code_bits(&self) -> u32 {
        let per_book = usize::BITS - (self.k_words.max(1) - 1).leading_zeros();
        self.m_books as u32 * per_book
    }
}

/// One codebook: a `sub_dim × k_words` matrix whose columns are the codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    matrix: Matrix,
}

impl Codebook {
    pub fn from_matrix(matrix: Matrix) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn sub_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn k_words(&self) -> usize {
        self.matrix.cols()
    }

    #[inline]
    pub fn codeword(&self, k: usize) -> &[f64] {
        self.matrix.col(k)
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.matrix
    }
}

/// An ordered set of `M` codebooks plus the orthonormality flag.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    spec: CodebookSpec,
    books: Vec<Codebook>,
    orthonormal: bool,
}

impl CodebookSet {
    pub fn new(spec: CodebookSpec, books: Vec<Codebook>, orthonormal: bool) -> Result<Self> {
        if books.len() != spec.m_books {
            return Err(Error::Dimension(format!(
                "{} codebooks for a spec with m_books = {}",
                books.len(),
                spec.m_books
            )));
        }
        for (m, b) in books.iter().enumerate() {
            if b.sub_dim() != spec.sub_dim || b.k_words() != spec.k_words {
                return Err(Error::Dimension(format!(
                    "codebook {m} is {}x{}, expected {}x{}",
                    b.sub_dim(),
                    b.k_words(),
                    spec.sub_dim,
                    spec.k_words
                )));
            }
        }
        Ok(Self {
            spec,
            books,
            orthonormal,
        })
    }

    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    pub fn books(&self) -> &[Codebook] {
        &self.books
    }

    pub fn book(&self, m: usize) -> &Codebook {
        &self.books[m]
    }

    /// Whether the set is known to be orthonormal (generated and never modified).
    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub(crate) fn books_mut(&mut self) -> &mut [Codebook] {
        // Any mutation invalidates the guarantee.
        self.orthonormal = false;
        &mut self.books
    }

    pub(crate) fn set_orthonormal(&mut self, flag: bool) {
        self.orthonormal = flag;
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_header(w, CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
        for v in [self.spec.m_books, self.spec.sub_dim, self.spec.k_words] {
            w.write_all(&wire::to_u32(v, "codebook dimension")?.to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.orthonormal)])?;
        for book in &self.books {
            // Column-major storage is codeword-major: each codeword's d components are contiguous.
            wire::write_f64s(w, book.matrix.as_slice())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        wire::read_header(r, CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
        let m = wire::read_u32(r)? as usize;
        let d = wire::read_u32(r)? as usize;
        let k = wire::read_u32(r)? as usize;
        let flag = match wire::read_u8(r)? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("orthonormal flag byte {other}"))),
        };
        let spec = CodebookSpec::unrestricted(m, d, k)
            .map_err(|e| Error::Format(format!("codebook header: {e}")))?;
        let mut books = Vec::with_capacity(m);
        for _ in 0..m {
            let mut data = vec![0.0; d * k];
            wire::read_f64s(r, &mut data)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite codeword entry".into()));
            }
            books.push(Codebook::from_matrix(Matrix::from_col_major(d, k, data)?));
        }
        CodebookSet::new(spec, books, flag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
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

/// The raw DCT-II basis `A_ij = cos(jπ(i + ½)/d)`.
pub fn dct_basis(sub_dim: usize) -> Matrix {
    let d = sub_dim as f64;
    Matrix::from_fn(sub_dim, sub_dim, |i, j| {
        (j as f64 * PI / d * (i as f64 + 0.5)).cos()
    })
}

/// Turns the raw DCT basis into the orthogonal matrix `A†`.
pub fn orthogonalize_basis(basis: &Matrix) -> Matrix {
    let d = basis.rows() as f64;
    let scale = SQRT_2 / d.sqrt();
    let mut out = basis.clone();
    for v in out.col_mut(0) {
        *v /= SQRT_2;
    }
    for v in out.as_mut_slice() {
        *v *= scale;
    }
    out
}

/// Generates `M` orthonormal codebooks; `C_1 = A†[:, :K]` and `C_m = A† · C_{m−1}`.
pub fn generate_orthonormal_codebooks(spec: &CodebookSpec) -> CodebookSet {
    let rotation = orthogonalize_basis(&dct_basis(spec.sub_dim));
    let first = Matrix::from_fn(spec.sub_dim, spec.k_words, |i, j| rotation.get(i, j));
    let mut books = Vec::with_capacity(spec.m_books);
    books.push(Codebook::from_matrix(first));
    for m in 1..spec.m_books {
        let next = rotation
            .matmul(books[m - 1].matrix())
            .expect("A† is d×d and codebooks are d×K");
        books.push(Codebook::from_matrix(next));
    }
    CodebookSet {
        spec: *spec,
        books,
        orthonormal: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthonormalityReport {
    pub max_gram_residual: f64,
    pub pass: bool,
}

/// Checks `max_m ‖C_mᵀC_m − I‖_max ≤ tol`.
pub fn validate_orthonormality(set: &CodebookSet, tol: f64) -> OrthonormalityReport {
    let max_gram_residual = set
        .books
        .iter()
        .map(|b| b.matrix.gram().max_identity_residual())
        .fold(0.0, f64::max);
    OrthonormalityReport {
        max_gram_residual,
        pass: max_gram_residual <= tol,
    }
}

/// Adds i.i.d. `N(0, variance)` noise to every codeword entry.
pub fn perturb_codebooks(set: &CodebookSet, variance: f64, seed: u64) -> Result<CodebookSet> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::Config(format!("noise variance {variance} must be >= 0")));
    }
    let mut out = set.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let noise = Normal::new(0.0, variance.sqrt()).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for book in out.books_mut() {
        for v in book.matrix.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Angles in degrees between every pair of codewords inside each codebook.
pub fn pairwise_angles(set: &CodebookSet) -> Vec<f64> {
    let mut angles = Vec::new();
    for book in &set.books {
        let k = book.k_words();
        let norms: Vec<f64> = (0..k).map(|i| norm(book.codeword(i))).collect();
        for i in 0..k {
            for j in (i + 1)..k {
                let cos = dot(book.codeword(i), book.codeword(j)) / (norms[i] * norms[j]);
                angles.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
    }
    angles
}

/// Normalized histogram of within-codebook codeword angles over `[0°, 180°]`.
///
/// Bin `b` is centred on `b · bin_width_deg`, so exact multiples of the width
/// (90° in particular) sit in the middle of a bin rather than on an edge.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularHistogram {
    pub bin_width_deg: f64,
    pub counts: Vec<f64>,
}

impl AngularHistogram {
    pub fn bin_center(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_width_deg
    }

    pub fn bin_of(&self, angle_deg: f64) -> usize {
        let b = (angle_deg / self.bin_width_deg).round().max(0.0) as usize;
        b.min(self.counts.len() - 1)
    }

    pub fn nonzero_bins(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&b| self.counts[b] > 0.0).collect()
    }
}

pub fn angular_histogram(set: &CodebookSet, bin_width_deg: f64) -> Result<AngularHistogram> {
    if !(bin_width_deg.is_finite() && bin_width_deg > 0.0) {
        return Err(Error::Config(format!("bin width {bin_width_deg} must be > 0")));
    }
    if set.books.iter().all(|b| b.k_words() < 2) {
        return Err(Error::Config(
            "angular histogram needs a codebook with at least two codewords".into(),
        ));
    }
    let bins = (180.0 / bin_width_deg).round() as usize + 1;
    let mut hist = AngularHistogram {
        bin_width_deg,
        counts: vec![0.0; bins],
    };
    let angles = pairwise_angles(set);
    for &a in &angles {
        let b = hist.bin_of(a);
        hist.counts[b] += 1.0;
    }
    let total = angles.len() as f64;
    for c in &mut hist.counts {
        *c /= total;
    }
    Ok(hist)
}
