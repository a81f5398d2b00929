//! Subspace-wise angular-margin classification loss and the entropy regularizer.
//!
//! For a unit feature `f` with label `y` and unit class weights `W_c`, the per-sample
//! loss is the cross-entropy of the logits `z_c = r·(⟨f, W_c⟩ − u·[c = y])`. It is applied
//! to the original sub-vectors (`l_x`) and to their soft quantizations (`l_s`) in every
//! subspace, with one shared classifier per subspace.

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize, Matrix, MIN_NORM};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    /// Scale `r` applied to cosines.
    pub scale_r: f64,
    /// Additive cosine margin `u` on the target class.
    pub margin_u: f64,
    /// Weight `λ` of the entropy term.
    pub entropy_weight: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            scale_r: 40.0,
            margin_u: 0.4,
            entropy_weight: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn new(scale_r: f64, margin_u: f64, entropy_weight: f64) -> Result<Self> {
        let hp = Self {
            scale_r,
            margin_u,
            entropy_weight,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_r.is_finite() && self.scale_r > 0.0) {
            return Err(Error::Config(format!("scale r = {} must be > 0", self.scale_r)));
        }
        if !(0.0..1.0).contains(&self.margin_u) {
            return Err(Error::Config(format!("margin u = {} must be in [0, 1)", self.margin_u)));
        }
        if !(self.entropy_weight.is_finite() && self.entropy_weight >= 0.0) {
            return Err(Error::Config(format!(
                "entropy weight = {} must be >= 0",
                self.entropy_weight
            )));
        }
        Ok(())
    }
}

/// Per-subspace classifier weights: `M` matrices of shape `d × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    pub books: Vec<Matrix>,
}

impl ClassifierWeights {
    pub fn classes(&self) -> usize {
        self.books.first().map_or(0, Matrix::cols)
    }

    /// Column-normalized copy of subspace `m` together with the original column norms.
    pub fn normalized(&self, m: usize) -> Result<(Matrix, Vec<f64>)> {
        let w = &self.books[m];
        let mut out = w.clone();
        let mut norms = Vec::with_capacity(w.cols());
        for c in 0..w.cols() {
            let (unit, n) = normalize(w.col(c))
                .map_err(|_| Error::Degenerate(format!("classifier column {c} of subspace {m}")))?;
            out.col_mut(c).copy_from_slice(&unit);
            norms.push(n);
        }
        Ok((out, norms))
    }
}

/// Components of the objective, averaged per (sample, subspace).
///
/// `l_x` and `l_s` are the mean margin losses of the original and quantized branches;
/// `l_clf = (l_x + l_s)/2` matches the `1/(2MN)` weighting of the summed terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_x: f64,
    pub l_s: f64,
    pub l_clf: f64,
    pub l_ent: f64,
    pub total: f64,
}

/// Raw inputs to [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_x: f64,
    pub l_s: f64,
    pub l_ent: f64,
}

/// Combines the parts into `total = l_clf + λ·l_ent`. With `include_lx = false` the original-feature
/// branch is zero-weighted (soft-only objective) while the `1/2` weighting of `l_s` is kept.
pub fn total_loss(parts: LossParts, lambda: f64, include_lx: bool) -> LossBreakdown {
    let lx_term = if include_lx { parts.l_x } else { 0.0 };
    let l_clf = (lx_term + parts.l_s) / 2.0;
    LossBreakdown {
        l_x: parts.l_x,
        l_s: parts.l_s,
        l_clf,
        l_ent: parts.l_ent,
        total: l_clf + lambda * parts.l_ent,
    }
}

/// Margin-softmax loss for one unit feature given its cosines to every class.
///
/// Returns the loss and the softmax over the margin-adjusted logits, which is what the
/// backward pass needs (`∂loss/∂cos_c = r·(q_c − [c = y])`).
pub fn margin_softmax(cosines: &[f64], label: usize, r: f64, u: f64) -> Result<(f64, Vec<f64>)> {
    if label >= cosines.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: cosines.len(),
        });
    }
    let mut z: Vec<f64> = cosines.iter().map(|c| r * c).collect();
    z[label] -= r * u;
    let target = z[label];
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let loss = max + sum.ln() - target;
    for v in z.iter_mut() {
        *v /= sum;
    }
    Ok((loss, z))
}

/// Mean margin loss over a batch of unit features against unit-column weights `w_m` (`d × C`).
pub fn margin_loss_subspace(
    features: &[Vec<f64>],
    labels: &[usize],
    w_m: &Matrix,
    r: f64,
    u: f64,
) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} features with {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        if dot(f, f).sqrt() < MIN_NORM {
            return Err(Error::Degenerate("zero-norm feature".into()));
        }
        let cos = w_m.tr_mul_vec(f)?;
        total += margin_softmax(&cos, y, r, u)?.0;
    }
    Ok(total / features.len() as f64)
}

/// `(L_x + L_s)/(2MN)` for per-subspace batches `x_subs[m][i]`, `s_subs[m][i]`.
///
/// Both batches must already be ℓ2-normalized; the classifier columns are normalized here.
pub fn joint_classification_loss(
    x_subs: &[Vec<Vec<f64>>],
    s_subs: &[Vec<Vec<f64>>],
    labels: &[usize],
    weights: &ClassifierWeights,
    r: f64,
    u: f64,
) -> Result<f64> {
    let m_books = weights.books.len();
    if x_subs.len() != m_books || s_subs.len() != m_books {
        return Err(Error::Dimension(format!(
            "{}/{} subspace batches for {m_books} classifiers",
            x_subs.len(),
            s_subs.len()
        )));
    }
    let mut total = 0.0;
    for m in 0..m_books {
        let (w_m, _) = weights.normalized(m)?;
        total += margin_loss_subspace(&x_subs[m], labels, &w_m, r, u)?;
        total += margin_loss_subspace(&s_subs[m], labels, &w_m, r, u)?;
    }
    Ok(total / (2.0 * m_books as f64))
}

/// Mean Shannon entropy of the assignment probabilities `p_batch[i][m]`, with `0·log 0 = 0`.
pub fn entropy_loss(p_batch: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in p_batch {
        for p in sample {
            total += entropy(p);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::new(40.0, 0.4, 0.1).is_ok());
        assert!(Hyperparams::new(0.0, 0.4, 0.1).is_err());
        assert!(Hyperparams::new(1.0, 1.0, 0.1).is_err());
        assert!(Hyperparams::new(1.0, 0.0, -0.1).is_err());
        assert_eq!(Hyperparams::default(), Hyperparams::new(40.0, 0.4, 0.1).unwrap());
    }

    #[test]
    fn two_class_example() {
        let w = Matrix::identity(2);
        let loss = margin_loss_subspace(&[vec![1.0, 0.0]], &[0], &w, 1.0, 0.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn many_orthogonal_classes_closed_form() {
        for c in [3usize, 10, 50] {
            let w = Matrix::identity(c);
            let mut f = vec![0.0; c];
            f[0] = 1.0;
            let loss = margin_loss_subspace(&[f], &[0], &w, 1.0, 0.0).unwrap();
            let oracle = (1.0 + (c as f64 - 1.0) * (-1f64).exp()).ln();
            assert!((loss - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let w = ClassifierWeights { books: vec![w] }.normalized(0).unwrap().0;
        let feats: Vec<Vec<f64>> = (0..5).map(|_| random_unit(&mut rng, 6)).collect();
        let labels = [0, 1, 2, 3, 1];
        let mut last = f64::NEG_INFINITY;
        for u in [0.0, 0.1, 0.2, 0.4, 0.6, 0.9] {
            let l = margin_loss_subspace(&feats, &labels, &w, 10.0, u).unwrap();
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn margin_loss_errors() {
        let w = Matrix::identity(2);
        assert!(matches!(
            margin_loss_subspace(&[vec![1.0, 0.0]], &[2], &w, 1.0, 0.0),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(matches!(
            margin_loss_subspace(&[vec![0.0, 0.0]], &[0], &w, 1.0, 0.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn stable_at_large_scale() {
        let w = Matrix::identity(3);
        let l = margin_loss_subspace(&[vec![0.0, 0.0, 1.0]], &[0], &w, 1e4, 0.4).unwrap();
        assert!(l.is_finite());
        assert!((l - 1e4 * 1.4).abs() < 1e-6);
    }

    #[test]
    fn entropy_examples() {
        let one_hot = vec![vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]];
        assert_eq!(entropy_loss(&one_hot), 0.0);
        let uniform = vec![vec![vec![0.25; 4]]];
        assert!((entropy_loss(&uniform) - 4f64.ln()).abs() < 1e-15);
        let skewed = vec![vec![vec![0.9, 0.1]]];
        let direct = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy_loss(&skewed) - direct).abs() < 1e-15);
        assert!((entropy_loss(&skewed) - 0.32508).abs() < 1e-5);
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            l_x: 1.0,
            l_s: 1.0,
            l_ent: 0.5,
        };
        let b = total_loss(parts, 0.1, true);
        assert_eq!(b.l_clf, 1.0);
        assert!((b.total - 1.05).abs() < 1e-15);
        assert_eq!(total_loss(parts, 0.0, true).total, b.l_clf);
        let one_hot = LossParts { l_ent: 0.0, ..parts };
        assert_eq!(total_loss(one_hot, 0.1, true).total, 1.0);
        assert_eq!(total_loss(parts, 0.0, false).l_clf, 0.5);
    }

    fn naive_joint(
        x: &[Vec<Vec<f64>>],
        s: &[Vec<Vec<f64>>],
        labels: &[usize],
        w: &[Matrix],
        r: f64,
        u: f64,
    ) -> f64 {
        let m_books = w.len();
        let n = labels.len();
        let mut lx = 0.0;
        let mut ls = 0.0;
        for i in 0..n {
            for m in 0..m_books {
                let c = w[m].cols();
                let wn: Vec<Vec<f64>> = (0..c).map(|k| unit(w[m].col(k).to_vec())).collect();
                for (branch, acc) in [(&x[m][i], &mut lx), (&s[m][i], &mut ls)] {
                    let cos: Vec<f64> = wn.iter().map(|wc| dot(branch, wc)).collect();
                    let num = (r * (cos[labels[i]] - u)).exp();
                    let mut den = num;
                    for j in 0..c {
                        if j != labels[i] {
                            den += (r * cos[j]).exp();
                        }
                    }
                    *acc += -(num / den).ln();
                }
            }
        }
        (lx + ls) / (2.0 * m_books as f64 * n as f64)
    }

    #[test]
    fn joint_loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m_books, n, d, c) = (3, 6, 5, 4);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let x: Vec<Vec<Vec<f64>>> = (0..m_books)
            .map(|_| (0..n).map(|_| random_unit(&mut rng, d)).collect())
            .collect();
        let s: Vec<Vec<Vec<f64>>> = (0..m_books)
            .map(|_| (0..n).map(|_| random_unit(&mut rng, d)).collect())
            .collect();
        let w: Vec<Matrix> = (0..m_books)
            .map(|_| Matrix::from_fn(d, c, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let weights = ClassifierWeights { books: w.clone() };
        let fast = joint_classification_loss(&x, &s, &labels, &weights, 3.0, 0.3).unwrap();
        let slow = naive_joint(&x, &s, &labels, &w, 3.0, 0.3);
        assert!((fast - slow).abs() < 1e-9);

        // Identical branches: the joint loss equals the x-only mean.
        let same = joint_classification_loss(&x, &x, &labels, &weights, 3.0, 0.3).unwrap();
        let mut x_only = 0.0;
        for m in 0..m_books {
            let (wm, _) = weights.normalized(m).unwrap();
            x_only += margin_loss_subspace(&x[m], &labels, &wm, 3.0, 0.3).unwrap();
        }
        assert!((same - x_only / m_books as f64).abs() < 1e-12);
    }

    #[test]
    fn single_sample_single_subspace() {
        let w = ClassifierWeights {
            books: vec![Matrix::identity(2)],
        };
        let x = vec![vec![vec![1.0, 0.0]]];
        let s = vec![vec![vec![0.0, 1.0]]];
        let joint = joint_classification_loss(&x, &s, &[0], &w, 2.0, 0.1).unwrap();
        let lx = margin_loss_subspace(&x[0], &[0], &Matrix::identity(2), 2.0, 0.1).unwrap();
        let ls = margin_loss_subspace(&s[0], &[0], &Matrix::identity(2), 2.0, 0.1).unwrap();
        assert!((joint - (lx + ls) / 2.0).abs() < 1e-15);
    }
}
