use std::cell::Cell;
use std::ops::Add;

use orthopq::codebook::{
    generate_orthonormal_codebooks, orthogonalize_basis, dct_basis, CodebookSpec,
};
use orthopq::data_io::{generate_synthetic, split_standard, split_unseen, SyntheticConfig};
use orthopq::eval::{average_precision, mean_average_precision, precision_at_t};
use orthopq::index::{
    accumulate, aqd_bruteforce, aqd_offset, score_orthonormal, top_k, EncodedDatabase,
    LookupTable, QuerySoftRep,
};
use orthopq::linalg::{normalize, Matrix};
use orthopq::metric_loss::{entropy_loss, margin_loss_subspace, ClassifierWeights};
use orthopq::quantizer::{assignment_probabilities, hard_assign, quantization_gap, soft_quantize};
use orthopq::trainer::{forward, CodebookMode, ModelParams};
use orthopq::Hyperparams;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pow2_spec() -> impl Strategy<Value = CodebookSpec> {
    (1usize..=8, 1u32..=7, 1u32..=7).prop_filter_map("K <= d", |(m, dl, kl)| {
        (kl <= dl).then(|| CodebookSpec::new(m, 1 << dl, 1 << kl).unwrap())
    })
}

fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-40.0f64..40.0, k)
}

fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    logits(k).prop_map(|g| assignment_probabilities(&g))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_codebooks_are_orthonormal_and_deterministic(spec in pow2_spec()) {
        let a = generate_orthonormal_codebooks(&spec);
        for book in a.books() {
            prop_assert!(book.matrix().gram().max_identity_residual() < 1e-10);
        }
        prop_assert_eq!(a.to_bytes(), generate_orthonormal_codebooks(&spec).to_bytes());
    }

    #[test]
    fn basis_preserves_orthonormality(dl in 1u32..=7, kl in 1u32..=7) {
        prop_assume!(kl <= dl);
        let (d, k) = (1usize << dl, 1usize << kl);
        let basis = orthogonalize_basis(&dct_basis(d));
        let book = generate_orthonormal_codebooks(&CodebookSpec::new(1, d, k).unwrap());
        let next = basis.matmul(book.book(0).matrix()).unwrap();
        prop_assert!(next.gram().max_identity_residual() < 1e-10);
    }

    #[test]
    fn softmax_is_shift_invariant(g in logits(16), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = g.iter().map(|v| v + c).collect();
        let a = assignment_probabilities(&g);
        let b = assignment_probabilities(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_assignment_is_logit_argmax(g in logits(12)) {
        let mut best = 0;
        for (k, v) in g.iter().enumerate() {
            if *v > g[best] {
                best = k;
            }
        }
        prop_assert_eq!(hard_assign(&assignment_probabilities(&g)), best);
    }

    #[test]
    fn gap_vanishes_exactly_at_one_hot(p in probs(8), hot in 0usize..8) {
        let set = generate_orthonormal_codebooks(&CodebookSpec::new(1, 8, 8).unwrap());
        let book = set.book(0);
        let mut one_hot = vec![0.0; 8];
        one_hot[hot] = 1.0;
        prop_assert!(quantization_gap(&one_hot, book).unwrap() < 1e-12);
        prop_assert_eq!(soft_quantize(&one_hot, book).unwrap(), book.codeword(hot).to_vec());
        let max = p.iter().cloned().fold(0.0, f64::max);
        if max < 1.0 - 1e-9 {
            prop_assert!(quantization_gap(&p, book).unwrap() > 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded(batch in prop::collection::vec(prop::collection::vec(probs(8), 2), 1..6)) {
        let l = entropy_loss(&batch);
        prop_assert!(l >= -1e-12 && l <= (8f64).ln() + 1e-12);
    }

    #[test]
    fn margin_loss_ignores_feature_and_weight_scale(
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
        label in 0usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(8, 5, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let raw: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let scaled: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        let weights = ClassifierWeights { books: vec![w.clone()] };
        let scaled_w = ClassifierWeights {
            books: vec![Matrix::from_fn(8, 5, |i, j| w.get(i, j) * scale)],
        };
        let (wn, _) = weights.normalized(0).unwrap();
        let (wn2, _) = scaled_w.normalized(0).unwrap();
        let a = margin_loss_subspace(&[normalize(&raw).unwrap().0], &[label], &wn, 40.0, 0.4).unwrap();
        let b = margin_loss_subspace(&[normalize(&scaled).unwrap().0], &[label], &wn2, 40.0, 0.4).unwrap();
        prop_assert!(a.is_finite());
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn batch_order_does_not_change_the_loss(seed in any::<u64>(), rot in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = CodebookSpec::new(2, 4, 4).unwrap();
        let params = ModelParams::init(6, generate_orthonormal_codebooks(&spec), 3, CodebookMode::Predefined, false, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..6).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let hp = Hyperparams::default();
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let (a, _) = forward(&params, &refs, &labels, &hp, true).unwrap();
        let mut refs_rot = refs.clone();
        refs_rot.rotate_left(rot);
        let mut labels_rot = labels.clone();
        labels_rot.rotate_left(rot);
        let (b, _) = forward(&params, &refs_rot, &labels_rot, &hp, true).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
        prop_assert!((a.l_x - b.l_x).abs() < 1e-12);
        prop_assert!((a.l_s - b.l_s).abs() < 1e-12);
        prop_assert!((a.l_ent - b.l_ent).abs() < 1e-12);
    }

    #[test]
    fn lut_and_aqd_agree(seed in any::<u64>(), ml in 0u32..4, kl in 1u32..7, n in 1usize..300) {
        let (m, k) = (1usize << ml, 1usize << kl);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = generate_orthonormal_codebooks(&CodebookSpec::new(m, k, k).unwrap());
        let codes = (0..n * m).map(|_| rand::Rng::random_range(&mut rng, 0..k) as u16).collect();
        let db = EncodedDatabase::new(codes, m, k, vec![0; n], [0; 32]).unwrap();
        let q = QuerySoftRep {
            probs: (0..m)
                .map(|_| {
                    let g: Vec<f64> = (0..k).map(|_| rand::Rng::random_range(&mut rng, -6.0..6.0)).collect();
                    assignment_probabilities(&g)
                })
                .collect(),
            orthonormal: true,
        };
        let score = score_orthonormal(&q, &db).unwrap();
        let aqd = aqd_bruteforce(&q, &db, &set).unwrap();
        let c = aqd_offset(&q);
        for (a, s) in aqd.iter().zip(&score) {
            prop_assert!((a + 2.0 * s - c).abs() < 1e-10);
            prop_assert!(*s > 0.0 && *s <= m as f64 + 1e-12);
        }
        let by_score = top_k(&score, n);
        for w in by_score.hits.windows(2) {
            prop_assert!(aqd[w[0].0] <= aqd[w[1].0] + 1e-10);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(flags in prop::collection::vec(any::<bool>(), 1..200), extra in 0usize..5, t in 1usize..300) {
        let found = flags.iter().filter(|&&f| f).count();
        let total = found + extra;
        prop_assume!(total > 0);
        let ap = average_precision(&flags, total).unwrap();
        let p = precision_at_t(&flags, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn prepending_a_hit_never_lowers_ap(flags in prop::collection::vec(any::<bool>(), 1..200), extra in 0usize..5) {
        let total = flags.iter().filter(|&&f| f).count() + extra;
        prop_assume!(total > 0);
        let before = average_precision(&flags, total).unwrap();
        let mut longer = vec![true];
        longer.extend_from_slice(&flags);
        let after = average_precision(&longer, total + 1).unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn full_ranking_precision_is_prevalence(flags in prop::collection::vec(any::<bool>(), 1..300)) {
        let hits = flags.iter().filter(|&&f| f).count();
        let p = precision_at_t(&flags, flags.len()).unwrap();
        prop_assert!((p - hits as f64 / flags.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn map_ignores_query_order(mut aps in prop::collection::vec(0.0f64..=1.0, 1..50), rot in 0usize..50) {
        let a = mean_average_precision(&aps).unwrap();
        let r = rot % aps.len();
        aps.rotate_left(r);
        prop_assert!((a - mean_average_precision(&aps).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splits_partition_the_dataset(seed in any::<u64>(), classes in 4usize..9, per_class in 3usize..12, q in 1usize..3) {
        let cfg = SyntheticConfig { classes, per_class, dim: 16, noise_sigma: 0.1, seed };
        let ds = generate_synthetic(&cfg).unwrap();
        let again = generate_synthetic(&cfg).unwrap();
        prop_assert_eq!(again.features(), ds.features());

        let (db, queries) = split_standard(&ds, q).unwrap();
        prop_assert_eq!(db.len() + queries.len(), ds.len());
        let mut rows: Vec<Vec<u64>> = db.rows().chain(queries.rows())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut original: Vec<Vec<u64>> = ds.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        original.sort();
        prop_assert_eq!(rows, original);

        let (train, udb, uq) = split_unseen(&ds, 0.5, q).unwrap();
        prop_assert_eq!(train.len() + udb.len() + uq.len(), ds.len());
        prop_assert!(uq.labels().iter().all(|l| udb.labels().contains(l)));
    }
}

/// A lookup table that counts how it is used.
struct CountingTable<'a> {
    probs: &'a [Vec<f64>],
    lookups: Cell<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Counted {
    value: f64,
    adds: usize,
}

impl Add for Counted {
    type Output = Counted;

    fn add(self, rhs: Counted) -> Counted {
        Counted {
            value: self.value + rhs.value,
            adds: self.adds + rhs.adds + 1,
        }
    }
}

impl LookupTable for CountingTable<'_> {
    type Value = Counted;

    fn lookup(&self, subspace: usize, code: usize) -> Counted {
        self.lookups.set(self.lookups.get() + 1);
        Counted {
            value: self.probs[subspace][code],
            adds: 0,
        }
    }
}

#[test]
fn scoring_costs_m_lookups_and_m_minus_one_additions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in [1usize, 2, 4, 8] {
        let (n, k) = (500, 16);
        let codes = (0..n * m).map(|_| rand::Rng::random_range(&mut rng, 0..k) as u16).collect();
        let db = EncodedDatabase::new(codes, m, k, vec![0; n], [0; 32]).unwrap();
        let probs: Vec<Vec<f64>> = (0..m).map(|_| assignment_probabilities(&vec![0.0; k])).collect();
        let table = CountingTable { probs: &probs, lookups: Cell::new(0) };
        let out = accumulate(&table, &db);
        assert_eq!(table.lookups.get(), n * m);
        assert!(out.iter().all(|c| c.adds == m - 1));
        let q = QuerySoftRep { probs: probs.clone(), orthonormal: true };
        let plain = score_orthonormal(&q, &db).unwrap();
        for (c, s) in out.iter().zip(&plain) {
            assert_eq!(c.value, *s);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn top_k_matches_a_full_sort(scores in prop::collection::vec(prop::sample::select(vec![0.0f64, 0.25, 0.5, 1.0, 2.0]), 0..200), k in 0usize..250) {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        prop_assert_eq!(top_k(&scores, k).ids(), order);
    }

    #[test]
    fn files_round_trip(seed in any::<u64>(), n in 1usize..40, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let features: Vec<f64> = (0..n * 8).map(|_| f64::from(rand::Rng::random_range(&mut rng, -1.0f32..1.0))).collect();
        let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let ds = orthopq::EmbeddingDataset::new(features, 8, labels.clone(), 3).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = orthopq::EmbeddingDataset::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());

        let codes: Vec<u16> = (0..n * m).map(|_| rand::Rng::random_range(&mut rng, 0..k) as u16).collect();
        let db = EncodedDatabase::new(codes, m, k, labels, [7; 32]).unwrap();
        let mut buf = Vec::new();
        db.write_to(&mut buf).unwrap();
        let back = EncodedDatabase::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!((0..n).map(|i| back.row(i)).collect::<Vec<_>>(), (0..n).map(|i| db.row(i)).collect::<Vec<_>>());
        prop_assert_eq!(back.fingerprint(), db.fingerprint());

        let set = generate_orthonormal_codebooks(&CodebookSpec::new(m, 4, k).unwrap());
        let model = ModelParams::init(8, set, 3, CodebookMode::Predefined, false, &mut rng).unwrap();
        let bytes = model.to_bytes();
        let back = ModelParams::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.fingerprint(), model.fingerprint());
    }

    #[test]
    fn encoding_is_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = generate_orthonormal_codebooks(&CodebookSpec::new(2, 4, 4).unwrap());
        let model = ModelParams::init(8, set, 3, CodebookMode::Predefined, false, &mut rng).unwrap();
        let features: Vec<f64> = (0..20 * 8).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let ds = orthopq::EmbeddingDataset::new(features, 8, (0..20).map(|i| i % 3).collect(), 3).unwrap();
        let a = orthopq::index::encode_database(&model, &ds).unwrap();
        let b = orthopq::index::encode_database(&model, &ds).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_to(&mut x).unwrap();
        b.write_to(&mut y).unwrap();
        prop_assert_eq!(x, y);
        for i in 0..ds.len() {
            let p = model.probabilities(ds.row(i)).unwrap();
            let hard: Vec<usize> = p.iter().map(|pm| hard_assign(pm)).collect();
            prop_assert_eq!(a.row(i), hard);
        }
    }
}
