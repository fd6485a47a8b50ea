use super::*;
use crate::corpus::{
    build_pretraining_corpus, generate_scene, render_image, Color, Languages, Scene, SceneObject,
    Shape, Size,
};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

fn tiny() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff: 16,
        max_len: 12,
    }
}

struct Dual<T> {
    store: ParamStore<T>,
    text: TextEncoder,
    vision: VisionEncoder,
    th: ProjectionHead,
    ih: ProjectionHead,
}

fn dual<T: crate::tensor::Scalar>(cfg: EncoderConfig, vocab: usize, seed: u64) -> Dual<T> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let text = TextEncoder::new(&mut store, cfg, vocab, &mut rng).unwrap();
    let vision = VisionEncoder::new(&mut store, cfg, &mut rng).unwrap();
    let th = ProjectionHead::new(&mut store, "text_head", cfg.d_model, 6, &mut rng);
    let ih = ProjectionHead::new(&mut store, "image_head", cfg.d_model, 6, &mut rng);
    Dual {
        store,
        text,
        vision,
        th,
        ih,
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (norm(a) * norm(b))
}

#[test]
fn text_embeddings_are_unit_norm() {
    let m = dual::<f32>(EncoderConfig::default(), 40, 1);
    let mut rng = SplitMix64::new(9);
    for _ in 0..20 {
        let n = 1 + rng.below_usize(24);
        let toks: Vec<u32> = (0..n).map(|_| 2 + rng.below(38) as u32).collect();
        let e = encode_text(&m.store, &m.text, &m.th, &toks, &vec![true; n]).unwrap();
        assert_eq!(e.len(), 6);
        assert!((norm(&e) - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn padding_never_changes_the_embedding() {
    let m = dual::<f32>(EncoderConfig::default(), 40, 2);
    let toks = [5u32, 9, 3, 17, 22];
    let plain = encode_text(&m.store, &m.text, &m.th, &toks, &[true; 5]).unwrap();
    let mut padded = toks.to_vec();
    padded.extend([0, 0, 0, 0]);
    let mut mask = vec![true; 5];
    mask.extend([false; 4]);
    let e = encode_text(&m.store, &m.text, &m.th, &padded, &mask).unwrap();
    assert_eq!(plain, e);
    let batch = embed_sequences(
        &m.store,
        &m.text,
        &m.th,
        &[toks.to_vec(), vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]],
        8,
    )
    .unwrap();
    assert_eq!(batch[0], plain);
}

#[test]
fn all_padding_is_rejected() {
    let m = dual::<f32>(tiny(), 10, 3);
    let r = encode_text(&m.store, &m.text, &m.th, &[0, 0], &[false, false]);
    assert!(matches!(r, Err(crate::Error::AllPadding)));
    assert!(TokenBatch::from_sequences(&[Vec::<u32>::new()]).is_err());
}

#[test]
fn out_of_range_token_is_rejected() {
    let m = dual::<f32>(tiny(), 10, 3);
    assert!(encode_text(&m.store, &m.text, &m.th, &[10], &[true]).is_err());
}

fn red_circle_scene(color: Color) -> Scene {
    Scene::from_objects(
        0,
        vec![
            SceneObject {
                shape: Shape::Circle,
                color,
                size: Size::Large,
                cell: (1, 1),
            },
            SceneObject {
                shape: Shape::Cross,
                color: Color::White,
                size: Size::Small,
                cell: (3, 0),
            },
        ],
    )
}

#[test]
fn image_embeddings() {
    let m = dual::<f32>(EncoderConfig::default(), 40, 6);
    let img = render_image(&generate_scene(3));
    let a = encode_image(&m.store, &m.vision, &m.ih, &img).unwrap();
    let b = encode_image(&m.store, &m.vision, &m.ih, &img).unwrap();
    assert_eq!(a, b);
    assert!((norm(&a) - 1.0).abs() <= 1e-6);
    let red = encode_image(&m.store, &m.vision, &m.ih, &render_image(&red_circle_scene(Color::Red))).unwrap();
    let blue =
        encode_image(&m.store, &m.vision, &m.ih, &render_image(&red_circle_scene(Color::Blue))).unwrap();
    assert!(cosine(&red, &blue) < 1.0);
    let wrong = Tensor::<f32>::zeros(&[3, 16, 16]);
    assert!(encode_image(&m.store, &m.vision, &m.ih, &wrong).is_err());
}

#[test]
fn patchify_tiles_the_image() {
    let data: Vec<f64> = (0..3 * 32 * 32).map(|i| i as f64).collect();
    let img = Tensor::new(vec![3, 32, 32], data).unwrap();
    let p = patchify(&[&img]).unwrap();
    assert_eq!(p.shape(), &[16, 192]);
    let mut seen: Vec<f64> = p.data().to_vec();
    seen.sort_by(f64::total_cmp);
    assert!(seen.iter().enumerate().all(|(i, &v)| v == i as f64));
    // patch (1, 2), channel 1, row 3, col 4
    let v = p.data()[(4 + 2) * 192 + 64 + 3 * 8 + 4];
    assert_eq!(v, (1024 + (8 + 3) * 32 + 16 + 4) as f64);
}

/// Weighted sum of text and image embeddings, for finite differences.
fn probe_loss(m: &Dual<f64>, store: &ParamStore<f64>, w: &[f64], img: &Tensor<f64>) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let batch = TokenBatch::from_sequences(&[vec![2u32, 5, 7, 3], vec![4, 4, 9]]).unwrap();
    let et = m.text.encode(&mut tape, &bound, &m.th, &batch).unwrap();
    let ei = m.vision.encode(&mut tape, &bound, &m.ih, &[img]).unwrap();
    let e = tape.concat(&[et]).unwrap();
    let e = tape.reshape(e, &[12]).unwrap();
    let ei = tape.reshape(ei, &[6]).unwrap();
    let both = tape.concat(&[e, ei]).unwrap();
    let wv = tape.constant(Tensor::new(vec![18], w.to_vec()).unwrap());
    let prod = tape.mul(both, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let val = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let g = store
        .entries()
        .iter()
        .enumerate()
        .map(|(i, _)| grads.get(bound.var(param_id(store, i))).unwrap().to_vec())
        .collect();
    (val, g)
}

fn param_id(store: &ParamStore<f64>, i: usize) -> ParamId {
    store.find(&store.entries()[i].name).unwrap()
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let m = dual::<f64>(tiny(), 10, 7);
    let mut rng = SplitMix64::new(8);
    let w: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
    let img = render_image::<f64>(&generate_scene(11));
    let (_, grads) = probe_loss(&m, &m.store, &w, &img);
    let eps = 1e-5;
    let mut checked = 0;
    for (pi, entry) in m.store.entries().iter().enumerate() {
        let n = entry.tensor.numel();
        let picks: Vec<usize> = if entry.name == "text.tok_emb" {
            // rows of used tokens 2..=9 and an unused row 0
            [2 * 8, 5 * 8 + 3, 7 * 8 + 7, 4 * 8 + 1, 9 * 8 + 2, 3, 0]
                .into_iter()
                .collect()
        } else {
            (0..3).map(|_| rng.below_usize(n)).collect()
        };
        for k in picks {
            let mut plus = m.store.clone();
            let id = param_id(&plus, pi);
            plus.get_mut(id).data_mut()[k] += eps;
            let mut minus = m.store.clone();
            minus.get_mut(id).data_mut()[k] -= eps;
            let fd = (probe_loss(&m, &plus, &w, &img).0 - probe_loss(&m, &minus, &w, &img).0) / (2.0 * eps);
            let an = grads[pi][k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel <= 1e-4, "{}[{k}]: analytic {an} vs numeric {fd}", entry.name);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

fn seen_ids(roster: &Languages) -> Vec<String> {
    roster
        .specs
        .iter()
        .filter(|l| l.pretrain_seen)
        .map(|l| l.id.clone())
        .collect()
}

const SMALL: EncoderConfig = EncoderConfig {
    d_model: 32,
    layers: 1,
    heads: 2,
    ff: 64,
    max_len: 24,
};

fn pretrained(roster: &Languages) -> (TextModel<f32>, Vec<f64>) {
    let seen = seen_ids(roster);
    let corpus = build_pretraining_corpus(&seen, 300, 1, false, 0.0, roster).unwrap();
    let mut model = TextModel::<f32>::init(SMALL, roster.vocab.len(), 3).unwrap();
    let mlm = MlmConfig {
        epochs: 2,
        batch_size: 32,
        lr: 3e-3,
        mask_prob: 0.15,
        seed: 4,
    };
    let losses = pretrain_text_mlm(&mut model, &corpus, roster, &mlm).unwrap();
    (model, losses)
}

#[test]
fn word_order_matters() {
    let roster = Languages::default_roster();
    let (model, _) = pretrained(&roster);
    let mut rng = SplitMix64::new(6);
    let head = {
        let mut store = model.store.clone();
        let h = ProjectionHead::new(&mut store, "text_head", SMALL.d_model, 16, &mut rng);
        (store, h)
    };
    let caps = build_pretraining_corpus(&seen_ids(&roster), 30, 9, true, 0.0, &roster).unwrap();
    let mut checked = 0;
    for rec in caps.iter().filter(|r| r.tokens.len() >= 4) {
        let toks = &rec.tokens;
        let n = toks.len();
        let (i, j) = loop {
            let i = rng.below_usize(n);
            let j = rng.below_usize(n);
            if toks[i] != toks[j] {
                break (i, j);
            }
        };
        let mut swapped = toks.clone();
        swapped.swap(i, j);
        let a = encode_text(&head.0, &model.encoder, &head.1, toks, &vec![true; n]).unwrap();
        let b = encode_text(&head.0, &model.encoder, &head.1, &swapped, &vec![true; n]).unwrap();
        // the 1e-4 margin is asserted on aligned encoders; here it is only
        // required that positions reach the pooled output at all
        assert!(cosine(&a, &b) < 1.0, "{}", rec.text);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn mlm_pretraining_learns_and_leaves_unseen_rows_alone() {
    let roster = Languages::default_roster();
    let seen = seen_ids(&roster);
    let heldout = build_pretraining_corpus(&seen, 100, 1, true, 0.0, &roster).unwrap();
    let cfg = SMALL;
    let before = TextModel::<f32>::init(cfg, roster.vocab.len(), 3).unwrap();
    let (model, losses) = pretrained(&roster);
    let k = 5;
    let first: f64 = losses[..k].iter().sum::<f64>() / k as f64;
    let last: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(last < first, "{first} -> {last}");

    let emb = model.store.get(model.encoder.tok_emb);
    let emb0 = before.store.get(before.encoder.tok_emb);
    let d = cfg.d_model;
    for id in 0..roster.vocab.len() as u32 {
        let row = id as usize * d..(id as usize + 1) * d;
        let unseen = roster
            .vocab
            .owner(id)
            .is_some_and(|l| !roster.specs[l].pretrain_seen);
        if unseen {
            assert_eq!(emb.data()[row.clone()], emb0.data()[row], "row {id}");
        }
    }
    let acc = mlm_recovery(&model, &heldout, 5).unwrap();
    let chance = 1.0 / roster.vocab.len() as f64;
    assert!(acc > 5.0 * chance, "recovery {acc}");
}

#[test]
fn mlm_rejects_unseen_language_text() {
    let roster = Languages::default_roster();
    let corpus =
        build_pretraining_corpus(&["en".to_string(), "qu".to_string()], 5, 1, false, 0.0, &roster).unwrap();
    let mut model = TextModel::<f32>::init(tiny(), roster.vocab.len(), 3).unwrap();
    let r = pretrain_text_mlm(&mut model, &corpus, &roster, &MlmConfig::default());
    assert!(matches!(r, Err(crate::Error::UnseenLanguageToken(_))));
}
