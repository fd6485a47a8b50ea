use proptest::prelude::*;

use super::*;
use crate::align::{AlignmentCheckpoint, CheckpointMeta};
use crate::corpus::{build_nli_dataset, build_parallel_eval_set, Languages, NliSplit};
use crate::encoders::EncoderConfig;
use crate::rng::SplitMix64;

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

fn random_matrix(lang: &str, n: usize, p: usize, rng: &mut SplitMix64) -> EmbeddingMatrix {
    let data = (0..n).flat_map(|_| unit((0..p).map(|_| rng.normal()).collect())).collect();
    EmbeddingMatrix::new(lang, (0..n as u64).collect(), p, data).unwrap()
}

fn brute_force(src: &EmbeddingMatrix, tgt: &EmbeddingMatrix) -> f64 {
    let mut hits = 0;
    for i in 0..src.rows() {
        let mut scores = Vec::new();
        for j in 0..tgt.rows() {
            let mut s = 0.0f64;
            for k in 0..src.dim {
                s += src.data[i * src.dim + k] as f64 * tgt.data[j * tgt.dim + k] as f64;
            }
            scores.push(s);
        }
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&s| s == best).unwrap();
        if tgt.ids[first] == src.ids[i] {
            hits += 1;
        }
    }
    hits as f64 / src.rows() as f64
}

fn tiny_checkpoint(vocab: usize) -> AlignmentCheckpoint<f32> {
    AlignmentCheckpoint::init(CheckpointMeta {
        variant: "untuned".into(),
        seed: 3,
        step: 0,
        encoder: EncoderConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ff: 32,
            max_len: 24,
        },
        vocab_size: vocab,
        proj_dim: 8,
        with_vision: false,
    })
    .unwrap()
}

#[test]
fn self_retrieval_is_perfect() {
    let m = random_matrix("es", 20, 8, &mut SplitMix64::new(1));
    assert_eq!(retrieval_accuracy(&m, &m).unwrap(), 1.0);
}

#[test]
fn shifted_targets_score_zero() {
    let n = 8;
    let basis = |i: usize| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
    let src = EmbeddingMatrix::new("es", (0..n as u64).collect(), n, (0..n).flat_map(basis).collect()).unwrap();
    let tgt = EmbeddingMatrix::new("en", (0..n as u64).collect(), n, (0..n).flat_map(|i| basis((i + 1) % n)).collect()).unwrap();
    assert_eq!(retrieval_accuracy(&src, &tgt).unwrap(), 0.0);
}

#[test]
fn matches_brute_force_including_ties() {
    let mut rng = SplitMix64::new(7);
    for trial in 0..200 {
        let src = random_matrix("es", 10, 8, &mut rng);
        let mut tgt = random_matrix("en", 10, 8, &mut rng);
        if trial % 2 == 0 {
            // duplicate rows force exact score ties
            let (a, b) = (rng.below_usize(10), rng.below_usize(10));
            let row = tgt.row(a).to_vec();
            tgt.data[b * 8..(b + 1) * 8].copy_from_slice(&row);
            tgt.data[..8].copy_from_slice(src.row(rng.below_usize(10)));
        }
        assert_eq!(retrieval_accuracy(&src, &tgt).unwrap(), brute_force(&src, &tgt));
    }
}

#[test]
fn ties_resolve_to_lowest_index() {
    let row = unit(vec![1.0, 1.0]);
    let data = [row.clone(), row.clone(), row].concat();
    let m = EmbeddingMatrix::new("en", vec![0, 1, 2], 2, data).unwrap();
    assert_eq!(nearest_targets(&m, &m).unwrap(), vec![0, 0, 0]);
    assert!((retrieval_accuracy(&m, &m).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn retrieval_rejects_misaligned_ids() {
    let mut rng = SplitMix64::new(2);
    let a = random_matrix("es", 4, 3, &mut rng);
    let mut b = random_matrix("en", 4, 3, &mut rng);
    b.ids.swap(1, 2);
    assert!(matches!(retrieval_accuracy(&a, &b), Err(crate::Error::IdMismatch { row: 1, .. })));
    let c = random_matrix("en", 5, 3, &mut rng);
    assert!(retrieval_accuracy(&a, &c).is_err());
}

#[test]
fn matrix_validates_norms_and_shape() {
    assert!(matches!(
        EmbeddingMatrix::new("en", vec![0], 2, vec![1.0, 0.1]),
        Err(crate::Error::Unnormalized { row: 0, .. })
    ));
    assert!(EmbeddingMatrix::new("en", vec![0, 1], 2, vec![1.0, 0.0]).is_err());
    assert!(EmbeddingMatrix::new("en", vec![0], 2, vec![1.0, 0.000001]).is_ok());
}

fn roles() -> LanguageRoles {
    LanguageRoles::from_roster(&Languages::default_roster(), "qu").unwrap()
}

#[test]
fn roles_follow_roster() {
    let r = roles();
    assert_eq!(r.pivot, "en");
    assert_eq!(r.pretrain_seen, vec!["es", "ja", "hi"]);
    assert_eq!(r.pretrain_unseen, vec!["qu", "x1", "x2"]);
    assert!(LanguageRoles::from_roster(&Languages::default_roster(), "es").is_err());
}

#[test]
fn aggregates_are_means() {
    let r = LanguageRoles {
        pivot: "en".into(),
        pretrain_seen: vec!["es".into(), "ja".into()],
        pretrain_unseen: vec!["qu".into()],
        target_unseen: "qu".into(),
    };
    let per = vec![("es".to_string(), 0.2), ("ja".to_string(), 0.4), ("qu".to_string(), 0.9)];
    let rep = aggregate_retrieval("m", &per, &r).unwrap();
    assert!((rep.pretrain_seen - 0.3).abs() < 1e-15);
    assert_eq!(rep.pretrain_unseen, 0.9);
    assert_eq!(rep.target_unseen, 0.9);
    assert!((rep.all - 0.5).abs() < 1e-15);
    let bad = vec![("de".to_string(), 0.5)];
    assert!(matches!(aggregate_retrieval("m", &bad, &r), Err(crate::Error::UnknownLanguage(_))));
}

proptest! {
    #[test]
    fn all_mean_recomputes(acc in proptest::collection::vec(0.0f64..=1.0, 6)) {
        let r = roles();
        let langs = r.all();
        let per: Vec<(String, f64)> = langs.iter().cloned().zip(acc.iter().cloned()).collect();
        let rep = aggregate_retrieval("m", &per, &r).unwrap();
        let direct = acc.iter().sum::<f64>() / 6.0;
        prop_assert!((rep.all - direct).abs() < 1e-12);
        prop_assert!((rep.pretrain_seen - acc[..3].iter().sum::<f64>() / 3.0).abs() < 1e-12);
        prop_assert!((rep.pretrain_unseen - acc[3..].iter().sum::<f64>() / 3.0).abs() < 1e-12);
        prop_assert_eq!(rep.target_unseen, acc[3]);
        prop_assert!((rep.mean_of(&langs).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn features_have_expected_layout(v in proptest::collection::vec(-3.0f64..3.0, 1..12), seed in 0u64..1000) {
        let mut rng = SplitMix64::new(seed);
        let w: Vec<f64> = v.iter().map(|_| rng.normal()).collect();
        let f = nli_features(&v, &w).unwrap();
        let p = v.len();
        prop_assert_eq!(f.len(), 4 * p);
        prop_assert_eq!(&f[..p], &v[..]);
        prop_assert_eq!(&f[p..2 * p], &w[..]);
    }
}

#[test]
fn embedding_eval_set_is_deterministic_and_parallel() {
    let roster = Languages::default_roster();
    let set = build_parallel_eval_set(12, &roster.ids(), 5, &roster).unwrap();
    let ck = tiny_checkpoint(roster.vocab.len());
    let a = embed_eval_set(&ck, &set).unwrap();
    let b = embed_eval_set(&ck, &set).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 7);
    for m in &a {
        assert_eq!((m.rows(), m.dim), (12, 8));
        assert_eq!(m.ids, (0..12).collect::<Vec<u64>>());
        for i in 0..m.rows() {
            let n: f64 = m.row(i).iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
    }
    let rep = evaluate_retrieval("untuned", &a, &roles()).unwrap();
    assert_eq!(rep.per_language.len(), 6);
}

#[test]
fn embedding_rejects_unknown_tokens() {
    let roster = Languages::default_roster();
    let mut set = build_parallel_eval_set(4, &roster.ids(), 5, &roster).unwrap();
    set.records[1][2].tokens[0] = 10_000;
    let ck = tiny_checkpoint(roster.vocab.len());
    assert!(matches!(embed_eval_set(&ck, &set), Err(crate::Error::UnknownToken(10_000))));
}

#[test]
fn feature_examples() {
    let f = nli_features(&[1.0, 2.0], &[3.0, -1.0]).unwrap();
    assert_eq!(f, vec![1.0, 2.0, 3.0, -1.0, 2.0, 3.0, 3.0, -2.0]);
    let v = [0.5f32, -0.25, 2.0];
    let f = nli_features(&v, &v).unwrap();
    assert_eq!(&f[..6], &[0.5, -0.25, 2.0, 0.5, -0.25, 2.0]);
    assert_eq!(&f[6..9], &[0.0, 0.0, 0.0]);
    assert_eq!(&f[9..], &[0.25, 0.0625, 4.0]);
    assert!(nli_features(&[1.0], &[1.0, 2.0]).is_err());
}

fn one_hot(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let x = y
        .iter()
        .map(|&c| (0..6).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
        .collect();
    (x, y)
}

fn quick_cfg() -> NliProbeConfig {
    NliProbeConfig {
        hidden: 16,
        lr: 1e-2,
        batch_size: 16,
        seed: 4,
        ..NliProbeConfig::default()
    }
}

#[test]
fn separable_features_reach_perfect_train_accuracy() {
    let (x, y) = one_hot(60);
    let probe = train_nli_probe(&x, &y, &x, &y, &quick_cfg()).unwrap();
    assert_eq!(probe.accuracy(&x, &y).unwrap(), 1.0);
    assert_eq!(probe.best_dev_accuracy, 1.0);
    assert!(probe.best_epoch <= 100);
}

#[test]
fn constant_features_sit_at_chance() {
    let y: Vec<usize> = (0..90).map(|i| i % 3).collect();
    let x = vec![vec![0.3f64; 6]; 90];
    let probe = train_nli_probe(&x, &y, &x, &y, &quick_cfg()).unwrap();
    let acc = probe.accuracy(&x, &y).unwrap();
    assert!((acc - 1.0 / 3.0).abs() <= 0.05, "{acc}");
}

#[test]
fn probe_training_is_deterministic() {
    let mut rng = SplitMix64::new(9);
    let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let x: Vec<Vec<f32>> = y
        .iter()
        .map(|&c| (0..5).map(|j| rng.normal() as f32 + if j == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let cfg = NliProbeConfig { hidden: 8, ..quick_cfg() };
    let a = train_nli_probe(&x, &y, &x[..30], &y[..30], &cfg).unwrap();
    let b = train_nli_probe(&x, &y, &x[..30], &y[..30], &cfg).unwrap();
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a, b);
}

#[test]
fn probe_rejects_bad_labels() {
    let (x, mut y) = one_hot(6);
    y[4] = 3;
    assert!(matches!(
        train_nli_probe(&x, &y, &x, &y, &quick_cfg()),
        Err(crate::Error::BadLabel(3))
    ));
}

#[test]
fn random_probe_is_at_chance_in_every_language() {
    let roster = Languages::default_roster();
    let test = build_nli_dataset(60, &roster.ids(), NliSplit::TestMulti, 11, &roster).unwrap();
    let ck = tiny_checkpoint(roster.vocab.len());
    let probe = NliProbe::<f32>::init(32, 16, 5);
    let seen: Vec<String> = ["en", "es", "ja", "hi"].iter().map(|s| s.to_string()).collect();
    let rep = eval_nli("untuned", &probe, &ck, &test, &seen, "en").unwrap();
    assert_eq!(rep.rows.len(), 7);
    for r in &rep.rows {
        assert!((r.accuracy - 1.0 / 3.0).abs() <= 0.06, "{}: {}", r.lang, r.accuracy);
        assert_eq!(r.seen_in_finetune, seen.contains(&r.lang));
    }
    let mean = rep.rows.iter().map(|r| r.accuracy).sum::<f64>() / 7.0;
    assert!((rep.mean - mean).abs() < 1e-12);
    let transfer = rep.rows[1..].iter().map(|r| r.accuracy).sum::<f64>() / 6.0;
    assert!((rep.transfer_mean - transfer).abs() < 1e-12);
}

fn circle(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            vec![a.cos(), a.sin()]
        })
        .collect()
}

#[test]
fn bandwidth_search_on_equidistant_layout() {
    let pts = circle(40);
    let d2 = squared_distances(&pts);
    let (bands, _) = fit_bandwidths(&d2, 40, 8.0).unwrap();
    for b in &bands {
        assert!((b.perplexity - 8.0).abs() < 1e-4, "{}", b.perplexity);
        assert!((b.beta - bands[0].beta).abs() <= 1e-9 * bands[0].beta);
    }
}

#[test]
fn conditional_rows_sum_to_one() {
    let mut rng = SplitMix64::new(3);
    let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let (_, p) = fit_bandwidths(&squared_distances(&pts), 30, 5.0).unwrap();
    for row in p.chunks(30) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let joint = joint_affinities(&pts, 5.0).unwrap();
    assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn perplexity_must_fit_point_count() {
    let pts = circle(20);
    assert!(matches!(
        tsne(&pts, &TsneConfig { perplexity: 7.0, ..TsneConfig::default() }),
        Err(crate::Error::PerplexityTooLarge { n: 20, .. })
    ));
    assert!(tsne(&pts, &TsneConfig { perplexity: 6.0, iterations: 5, ..TsneConfig::default() }).is_ok());
}

fn two_clusters(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..per {
            rows.push((0..16).map(|k| rng.normal() + if k == 0 { 10.0 * c as f64 } else { 0.0 }).collect());
            labels.push(c);
        }
    }
    (rows, labels)
}

#[test]
fn separated_clusters_stay_separated() {
    let (rows, labels) = two_clusters(40, 5);
    let cfg = TsneConfig { perplexity: 15.0, iterations: 500, ..TsneConfig::default() };
    let (y, mid, kl) = tsne(&rows, &cfg).unwrap();
    assert!(y.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    assert!(silhouette(&y, &labels) > 0.5);
    assert!(kl >= 0.0 && kl < mid, "{kl} vs {mid}");
}

#[test]
fn tsne_is_deterministic_given_seed() {
    let (rows, _) = two_clusters(12, 1);
    let cfg = TsneConfig { perplexity: 5.0, iterations: 150, ..TsneConfig::default() };
    assert_eq!(tsne(&rows, &cfg).unwrap(), tsne(&rows, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn kl_is_nonnegative_and_decreases(seed in 0u64..10_000, n in 15usize..30) {
        let mut rng = SplitMix64::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let cfg = TsneConfig { perplexity: 4.0, iterations: 300, seed, ..TsneConfig::default() };
        let (_, mid, kl) = tsne(&rows, &cfg).unwrap();
        prop_assert!(kl >= 0.0 && mid >= 0.0);
        prop_assert!(kl < mid);
    }
}

fn point(lang: &str, id: u64, x: f64, y: f64) -> TsnePoint {
    TsnePoint { lang: lang.into(), sentence_id: id, x, y }
}

#[test]
fn clique_compactness_hand_example() {
    let layout = TsneLayout {
        points: vec![
            point("en", 0, 0.0, 0.0),
            point("es", 0, 1.0, 0.0),
            point("en", 1, 10.0, 0.0),
            point("es", 1, 11.0, 0.0),
            point("qu", 1, 50.0, 50.0),
        ],
        perplexity: 1.0,
        kl_after_exaggeration: 0.0,
        kl: 0.0,
    };
    let langs = vec!["en".to_string(), "es".to_string()];
    // within: 1 and 1; cross: 10, 11, 9, 10
    let r = clique_compactness(&layout, &langs).unwrap();
    assert!((r - 0.1).abs() < 1e-12);
    let mut broken = layout.clone();
    broken.points.remove(3);
    assert!(matches!(
        clique_compactness(&broken, &langs),
        Err(crate::Error::MissingCliqueMember(_))
    ));
}

#[test]
fn embd_round_trip_and_errors() {
    let mut rng = SplitMix64::new(4);
    let mats = vec![random_matrix("en", 3, 4, &mut rng), random_matrix("qu", 3, 4, &mut rng)];
    let (bytes, tsv) = encode_embd(&mats).unwrap();
    assert_eq!(&bytes[..4], b"EMBD");
    assert_eq!(bytes.len(), 16 + 6 * 4 * 4);
    assert_eq!(decode_embd(&bytes, &tsv).unwrap(), mats);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_embd(&bad, &tsv).unwrap_err().to_string().contains("bad magic"));
    assert!(matches!(decode_embd(&bytes[..40], &tsv), Err(crate::Error::Truncated(40))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.embd");
    assert!(matches!(read_embd(&path), Err(crate::Error::MissingArtifact(_))));
    write_embd(&path, &mats).unwrap();
    assert_eq!(read_embd(&path).unwrap(), mats);
}
