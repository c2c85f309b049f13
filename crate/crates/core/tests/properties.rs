use clipit_core::data::EmbeddingStore;
use clipit_core::eval::{fisher_combined, omega, PredictionSet};
use clipit_core::model::{checkpoint, ClipItModel, ModelDims, ModelKind};
use clipit_core::numeric::{cosine_similarity, Matrix};
use clipit_core::pairing::{pair_modalities, PairingRequest};
use clipit_core::rng::Rng;
use clipit_core::text::{corrupt_text, encode_text, HashedEncoderConfig};
use proptest::prelude::*;

const KINDS: [ModelKind; 4] = [ModelKind::Late, ModelKind::Early, ModelKind::Direct, ModelKind::VisionOnly];

fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

fn random_model(kind: ModelKind, d_v: usize, d_t: usize, classes: usize, seed: u64) -> ClipItModel {
    let mut rng = Rng::new(seed);
    let mut m = ClipItModel::init(kind, ModelDims::new(d_v, d_t, classes), 1.0, &mut rng).unwrap();
    let parts = m.parts();
    for p in m.params_of_mut(&parts) {
        let (r, c) = p.shape();
        *p = random(&mut rng, r, c).scale(0.3);
    }
    m
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,6}", 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_embedding_is_unit_and_order_free(ws in words(), seed in any::<u64>(), hash_seed in 0u64..4) {
        let cfg = HashedEncoderConfig::new(32, hash_seed).unwrap();
        let text = ws.join(" ");
        let mut shuffled = ws.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        match encode_text(&text, &cfg) {
            Ok(v) => {
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
                prop_assert_eq!(encode_text(&shuffled.join("  "), &cfg).unwrap(), v);
            }
            // Signed buckets can cancel to zero.
            Err(e) => prop_assert!(matches!(e, clipit_core::Error::ZeroVector)),
        }
    }

    #[test]
    fn word_dropout_keeps_a_subsequence(ws in words(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let text = ws.join(" ");
        let kept = corrupt_text(&text, p, seed).unwrap();
        let mut it = ws.iter();
        for w in kept.split_whitespace() {
            prop_assert!(it.any(|x| x == w));
        }
        prop_assert_eq!(corrupt_text(&text, 0.0, seed).unwrap(), text.clone());
        prop_assert_eq!(corrupt_text(&text, 1.0, seed).unwrap(), "");
        prop_assert_eq!(corrupt_text(&text, p, seed).unwrap(), kept);
    }

    #[test]
    fn store_bytes_roundtrip(rows in 1usize..12, cols in 1usize..9, seed in any::<u64>(), labelled in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let labels = labelled.then(|| (0..rows).map(|_| rng.below(5) as u32).collect());
        let ids = (!labelled).then(|| (0..rows).map(|i| format!("id-{i}")).collect());
        let s = EmbeddingStore::new(random(&mut rng, rows, cols), labels, ids).unwrap();
        prop_assert_eq!(EmbeddingStore::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions(
        kind in 0usize..4, d_v in 2usize..12, d_t in 2usize..12, classes in 2usize..5, seed in any::<u64>()
    ) {
        let m = random_model(KINDS[kind], d_v, d_t, classes, seed);
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&m)).unwrap();
        prop_assert_eq!(&back, &m);
        let x = random(&mut Rng::new(seed ^ 1), 5, d_v);
        let uni = checkpoint::from_bytes(&checkpoint::to_bytes(&m.clone().into_unimodal())).unwrap();
        prop_assert_eq!(uni.predict_unimodal(&x).unwrap(), m.predict_unimodal(&x).unwrap());
    }

    #[test]
    fn ranked_similarities_descend(n in 1usize..20, m in 5usize..40, d in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let images = EmbeddingStore::new(random(&mut rng, n, d), None, None).unwrap();
        let ids = (0..m).map(|j| format!("r{j}")).collect();
        let texts = EmbeddingStore::new(random(&mut rng, m, d), None, Some(ids)).unwrap();
        let req = PairingRequest::new(&images, &texts);
        let mut prev: Option<Vec<f64>> = None;
        for k in 1..=5 {
            let pairs = pair_modalities(&req, k).unwrap();
            let sims = pairs.similarities();
            for (i, r) in pairs.records().iter().enumerate() {
                let j: usize = r.text_id[1..].parse().unwrap();
                prop_assert_eq!(r.similarity, cosine_similarity(images.row(i), texts.row(j)).unwrap());
            }
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&sims) {
                    prop_assert!(a + 1e-12 >= *b);
                }
            }
            prev = Some(sims);
        }
    }

    #[test]
    fn omega_is_bounded_by_branch_counts(n in 1usize..60, c in 2usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut draw = || (0..n).map(|_| rng.below(c)).collect::<Vec<_>>();
        let (y, v, t) = (draw(), draw(), draw());
        let vision_wrong = y.iter().zip(&v).filter(|(a, b)| a != b).count();
        let text_right = y.iter().zip(&t).filter(|(a, b)| a == b).count();
        let o = omega(&PredictionSet::new(y, v, Some(t), None, c).unwrap()).unwrap();
        prop_assert!(o.count <= vision_wrong.min(text_right));
        prop_assert!((0.0..=1.0).contains(&o.fraction));
    }

    #[test]
    fn fisher_p_is_a_probability(ps in prop::collection::vec(1e-300f64..=1.0, 1..30)) {
        let f = fisher_combined(&ps).unwrap();
        prop_assert!(f.p_value >= 0.0 && f.p_value <= 1.0);
        prop_assert_eq!(f.dof, 2 * ps.len());
        let mut with_one = ps.clone();
        with_one.push(1.0);
        // A p-value of 1 adds no evidence, so the combined p cannot fall.
        prop_assert!(fisher_combined(&with_one).unwrap().p_value >= f.p_value - 1e-12);
    }
}
