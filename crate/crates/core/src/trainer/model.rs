use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::codebook::{Codebook, CodebookSet, CodebookSpec};
use crate::error::{Error, Result};
use crate::linalg::{normalize, Matrix};
use crate::metric_loss::ClassifierWeights;
use crate::quantizer::{assignment_logits, assignment_probabilities};
use crate::wire;

pub const MODEL_MAGIC: &[u8; 4] = b"OPQM";
pub const MODEL_VERSION: u32 = 1;

/// Whether codewords are fixed inputs or trained parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CodebookMode {
    /// Codebooks are given (normally the orthonormal DCT construction) and never updated.
    #[default]
    Predefined,
    /// Codewords are learned together with the rest of the head.
    L2q,
}

impl CodebookMode {
    fn flag(self) -> u8 {
        match self {
            CodebookMode::Predefined => 0,
            CodebookMode::L2q => 1,
        }
    }

    fn from_flag(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CodebookMode::Predefined),
            1 => Ok(CodebookMode::L2q),
            other => Err(Error::Format(format!("unknown mode flag {other}"))),
        }
    }
}

impl FromStr for CodebookMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthonormal" | "predefined" => Ok(CodebookMode::Predefined),
            "l2q" => Ok(CodebookMode::L2q),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected orthonormal or l2q)"
            ))),
        }
    }
}

impl fmt::Display for CodebookMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodebookMode::Predefined => "orthonormal",
            CodebookMode::L2q => "l2q",
        })
    }
}

/// Learnable quantization head over precomputed embeddings.
///
/// `encoder` is `Din × D`; feature `j` of the bottleneck is `⟨e, encoder[:, j]⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Matrix,
    /// One `d × K` assignment transform per subspace.
    pub transforms: Vec<Matrix>,
    pub classifier: ClassifierWeights,
    pub codebooks: CodebookSet,
    pub mode: CodebookMode,
}

impl ModelParams {
    /// Random initialization: encoder and transforms uniform in `±1/√fan_in`,
    /// classifier columns standard normal then unit-normalized.
    pub fn init<R: Rng>(
        input_dim: usize,
        codebooks: CodebookSet,
        classes: usize,
        mode: CodebookMode,
        identity_encoder: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = *codebooks.spec();
        let dim = spec.feature_dim();
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let encoder = if identity_encoder {
            if input_dim != dim {
                return Err(Error::Config(format!(
                    "identity encoder needs input dim {input_dim} == bottleneck dim {dim}"
                )));
            }
            Matrix::identity(dim)
        } else {
            uniform(input_dim, dim, input_dim, rng)
        };
        let transforms = (0..spec.m_books)
            .map(|_| uniform(spec.sub_dim, spec.k_words, spec.sub_dim, rng))
            .collect();
        let mut books = Vec::with_capacity(spec.m_books);
        for _ in 0..spec.m_books {
            books.push(unit_gaussian_columns(spec.sub_dim, classes, rng)?);
        }
        Ok(Self {
            encoder,
            transforms,
            classifier: ClassifierWeights { books },
            codebooks,
            mode,
        })
    }

    pub fn spec(&self) -> &CodebookSpec {
        self.codebooks.spec()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    /// Bottleneck features for one embedding.
    pub fn embed(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.encoder.tr_mul_vec(embedding)
    }

    /// Assignment probabilities `p_m` for every subspace of one embedding.
    pub fn probabilities(&self, embedding: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = self.embed(embedding)?;
        let d = self.spec().sub_dim;
        x.chunks_exact(d)
            .zip(&self.transforms)
            .map(|(sub, f)| assignment_logits(sub, f).map(|g| assignment_probabilities(&g)))
            .collect()
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let spec = *self.spec();
        if self.encoder.cols() != spec.feature_dim() {
            return Err(Error::Dimension(format!(
                "encoder outputs {} features, codebooks expect {}",
                self.encoder.cols(),
                spec.feature_dim()
            )));
        }
        if self.transforms.len() != spec.m_books || self.classifier.books.len() != spec.m_books {
            return Err(Error::Dimension("per-subspace tensor count differs from M".into()));
        }
        for f in &self.transforms {
            if f.rows() != spec.sub_dim || f.cols() != spec.k_words {
                return Err(Error::Dimension("transform shape is not d x K".into()));
            }
        }
        let c = self.classes();
        for w in &self.classifier.books {
            if w.rows() != spec.sub_dim || w.cols() != c {
                return Err(Error::Dimension("classifier shape is not d x C".into()));
            }
        }
        Ok(())
    }

    /// Flat views of the learnable tensors, in checkpoint order. Codebooks are included in l2q mode.
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.encoder.as_mut_slice()];
        out.extend(self.transforms.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.classifier.books.iter_mut().map(Matrix::as_mut_slice));
        if self.mode == CodebookMode::L2q {
            out.extend(
                self.codebooks
                    .books_mut()
                    .iter_mut()
                    .map(|b| b.matrix_mut().as_mut_slice()),
            );
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let spec = *self.spec();
        wire::write_header(w, MODEL_MAGIC, MODEL_VERSION)?;
        for v in [
            self.input_dim(),
            self.feature_dim(),
            spec.m_books,
            spec.sub_dim,
            spec.k_words,
            self.classes(),
        ] {
            w.write_all(&wire::to_u32(v, "model dimension")?.to_le_bytes())?;
        }
        w.write_all(&[self.mode.flag()])?;
        wire::write_f64s(w, self.encoder.as_slice())?;
        for f in &self.transforms {
            wire::write_f64s(w, f.as_slice())?;
        }
        for c in &self.classifier.books {
            wire::write_f64s(w, c.as_slice())?;
        }
        self.codebooks.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        wire::read_header(r, MODEL_MAGIC, MODEL_VERSION)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = wire::read_u32(r)? as usize;
        }
        let [din, dim, m, d, k, c] = dims;
        if m == 0 || m * d != dim {
            return Err(Error::Format(format!("bottleneck {dim} != {m} x {d}")));
        }
        let mode = CodebookMode::from_flag(wire::read_u8(r)?)?;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = vec![0.0; rows * cols];
            wire::read_f64s(r, &mut data)?;
            Matrix::from_col_major(rows, cols, data)
        };
        let encoder = read_matrix(din, dim)?;
        let transforms = (0..m).map(|_| read_matrix(d, k)).collect::<Result<Vec<_>>>()?;
        let books = (0..m).map(|_| read_matrix(d, c)).collect::<Result<Vec<_>>>()?;
        let codebooks = CodebookSet::read_from(r)?;
        if *codebooks.spec() != CodebookSpec::unrestricted(m, d, k)? {
            return Err(Error::Format("embedded codebooks disagree with model header".into()));
        }
        let model = Self {
            encoder,
            transforms,
            classifier: ClassifierWeights { books },
            codebooks,
            mode,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the checkpoint bytes; ties encoded databases to the model that produced them.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
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

fn uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

pub(crate) fn unit_gaussian_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    let mut m = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    for c in 0..cols {
        let (unit, _) = normalize(m.col(c))?;
        m.col_mut(c).copy_from_slice(&unit);
    }
    Ok(m)
}

/// Random unit-column codebooks used as the starting point of l2q training.
pub fn random_codebooks<R: Rng>(spec: &CodebookSpec, rng: &mut R) -> Result<CodebookSet> {
    let books = (0..spec.m_books)
        .map(|_| unit_gaussian_columns(spec.sub_dim, spec.k_words, rng).map(Codebook::from_matrix))
        .collect::<Result<Vec<_>>>()?;
    CodebookSet::new(*spec, books, false)
}
