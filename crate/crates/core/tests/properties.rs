//! Property tests for the algebraic invariants of every module.

use asr::analysis::{orthogonality_matrix, paper_cosine_identity, sparsity_profile, ReconSpec2D};
use asr::autodiff::Graph;
use asr::encoder::{mask_features, GroupedFeatureMap};
use asr::episodes::{iou_metrics, make_dataset, render_scene, DatasetConfig, Split};
use asr::filtering::{fuse, project, FilterStrategy};
use asr::losses::{contrastive_loss, decoupling_loss};
use asr::reconstruction::ClassVector;
use asr::semantics::{support_weights, SemanticVector, SupportWeights};
use asr::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn vec_strategy(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_lies_on_simplex(x in vec_strategy(6, -1e3, 1e3)) {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[6], x));
        let s = g.softmax(a).unwrap();
        let p = g.value(s).data();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent_contracting_and_scale_free(
        px in vec_strategy(12, -3.0, 3.0),
        v in vec_strategy(3, -2.0, 2.0),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-4);
        let mut g = Graph::new();
        let x = g.constant(tensor(&[2, 2, 3], px.clone()));
        let fmap = GroupedFeatureMap::new(&g, x, 1, 3).unwrap();
        let vv = g.constant(tensor(&[3], v.clone()));
        let sv = ClassVector::new(&g, vv).unwrap();
        let once = project(&mut g, fmap, sv).unwrap();
        let twice = project(&mut g, once, sv).unwrap();
        let scaled_v = g.constant(tensor(&[3], v.iter().map(|c| c * s).collect()));
        let scaled_v = ClassVector::new(&g, scaled_v).unwrap();
        let scaled = project(&mut g, fmap, scaled_v).unwrap();
        let (a, b, c) = (g.value(once.values), g.value(twice.values), g.value(scaled.values));
        prop_assert!(a.max_abs_diff(b) <= 1e-10);
        prop_assert!(a.max_abs_diff(c) <= 1e-10);
        for (orig, proj) in px.chunks(3).zip(a.data().chunks(3)) {
            prop_assert!(dot(proj, proj).sqrt() <= dot(orig, orig).sqrt() + 1e-12);
        }
    }

    #[test]
    fn cosine_fusion_is_bounded(px in vec_strategy(12, -3.0, 3.0), v in vec_strategy(3, 0.1, 2.0)) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[2, 2, 3], px));
        let fmap = GroupedFeatureMap::new(&g, x, 1, 3).unwrap();
        let vv = g.constant(tensor(&[3], v));
        let v = ClassVector::new(&g, vv).unwrap();
        let out = fuse(&mut g, FilterStrategy::Cosine, fmap, v).unwrap();
        prop_assert!(g.value(out.values).data().iter().all(|c| c.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn decoupling_loss_is_bounded(raw in vec_strategy(5, 0.0, 1.0), c in 0usize..5) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut g = Graph::new();
        let values = g.constant(tensor(&[5], w));
        let l = decoupling_loss(&mut g, SupportWeights { values, groups: 5 }, c).unwrap();
        let l = g.value(l).item();
        prop_assert!(l >= (1.0 + (-1.0f64).exp()).ln() - 1e-12);
        prop_assert!(l <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn contrastive_loss_ignores_sub_vector_scale(
        s in vec_strategy(6, 0.1, 2.0),
        q in vec_strategy(6, 0.1, 2.0),
        b in 0usize..3,
    ) {
        let eval = |s: Vec<f64>| {
            let mut g = Graph::new();
            let vs = g.constant(tensor(&[6], s));
            let vq = g.constant(tensor(&[6], q.clone()));
            let vs = SemanticVector::new(&g, vs, 3, 2).unwrap();
            let vq = SemanticVector::new(&g, vq, 3, 2).unwrap();
            let l = contrastive_loss(&mut g, vs, vq).unwrap();
            g.value(l).item()
        };
        let mut scaled = s.clone();
        scaled[2 * b] *= 7.0;
        scaled[2 * b + 1] *= 7.0;
        let (a, c) = (eval(s), eval(scaled));
        prop_assert!((a - c).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn support_weights_are_a_distribution(v in vec_strategy(8, 0.0, 5.0)) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[8], v));
        let sv = SemanticVector::new(&g, x, 4, 2).unwrap();
        let w = support_weights(&mut g, sv).unwrap();
        let w = g.value(w.values).data().to_vec();
        prop_assert!(w.iter().all(|&p| p > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let entropy = sparsity_profile(&[(0, vec![w])]).unwrap()[0].entropy;
        prop_assert!((0.0..=4f64.ln() + 1e-12).contains(&entropy));
    }

    #[test]
    fn masking_is_idempotent(px in vec_strategy(32, 0.0, 1.0), bits in prop::collection::vec(any::<bool>(), 64)) {
        let mask = tensor(&[8, 8], bits.iter().map(|&b| f64::from(u8::from(b))).collect());
        let mut g = Graph::new();
        let x = g.constant(tensor(&[4, 4, 2], px));
        let f = GroupedFeatureMap::new(&g, x, 2, 1).unwrap();
        let once = mask_features(&mut g, f, &mask).unwrap();
        let twice = mask_features(&mut g, once, &mask).unwrap();
        prop_assert_eq!(g.value(once.values), g.value(twice.values));
    }

    #[test]
    fn cosine_identity_matches_inner_product(w11 in 0.0f64..=1.0, w21 in 0.0f64..=1.0, theta in 0.0f64..std::f64::consts::PI) {
        let (u1, u2) = ([w11 + (1.0 - w11) * theta.cos(), (1.0 - w11) * theta.sin()],
                        [w21 + (1.0 - w21) * theta.cos(), (1.0 - w21) * theta.sin()]);
        let spec = ReconSpec2D::new(w11, w21, theta.cos()).unwrap();
        prop_assert!((dot(&u1, &u2) - paper_cosine_identity(&spec)).abs() <= 1e-12);
    }

    #[test]
    fn orthogonality_matrix_is_symmetric(raw in prop::collection::vec(vec_strategy(3, -1.0, 1.0), 2..5)) {
        let vecs: Vec<(usize, Vec<f64>)> = raw
            .into_iter()
            .filter_map(|v| {
                let n = dot(&v, &v).sqrt();
                (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
            })
            .enumerate()
            .collect();
        prop_assume!(vecs.len() >= 2);
        let o = orthogonality_matrix(&vecs).unwrap();
        for i in 0..vecs.len() {
            prop_assert_eq!(o.matrix[i][i], 1.0);
            for j in 0..vecs.len() {
                prop_assert_eq!(o.matrix[i][j], o.matrix[j][i]);
            }
        }
    }

    #[test]
    fn miou_is_order_invariant(
        records in prop::collection::vec((prop::collection::vec(any::<bool>(), 16), prop::collection::vec(any::<bool>(), 16), 0usize..4), 1..12),
        rotate in 0usize..12,
    ) {
        let tensors: Vec<(Tensor, Tensor, usize)> = records
            .iter()
            .map(|(p, t, c)| {
                let m = |b: &Vec<bool>| tensor(&[4, 4], b.iter().map(|&x| f64::from(u8::from(x))).collect());
                (m(p), m(t), *c)
            })
            .collect();
        let refs: Vec<(&Tensor, &Tensor, usize)> = tensors.iter().map(|(p, t, c)| (p, t, *c)).collect();
        let mut shuffled = refs.clone();
        shuffled.rotate_left(rotate % refs.len());
        shuffled.reverse();
        let (a, b) = (iou_metrics(&refs).unwrap(), iou_metrics(&shuffled).unwrap());
        prop_assert!((a.miou - b.miou).abs() <= 1e-12);
        prop_assert!((a.fb_iou - b.fb_iou).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.miou));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scene_masks_are_disjoint_and_cover_the_foreground(seed in any::<u64>(), n in 1usize..=3) {
        let data = make_dataset(&DatasetConfig::default()).unwrap();
        let specs: Vec<_> = data.specs.iter().take(n).collect();
        let scene = render_scene(&specs, seed, 64, 3).unwrap();
        let mut cover = vec![0u8; 64 * 64];
        for (_, m) in &scene.masks {
            prop_assert!(m.data().contains(&1.0));
            for (c, &v) in cover.iter_mut().zip(m.data()) {
                *c += v as u8;
            }
        }
        prop_assert!(cover.iter().all(|&c| c <= 1));
        prop_assert_eq!(scene.label_map().iter().filter(|l| l.is_some()).count(), cover.iter().filter(|&&c| c == 1).count());
    }

    #[test]
    fn splits_are_disjoint_and_episodes_pure(seed in any::<u64>(), index in any::<u64>(), k in 1usize..=3) {
        let cfg = DatasetConfig { seed, image_size: 32, ..Default::default() };
        let data = make_dataset(&cfg).unwrap();
        prop_assert!(data.base_ids.iter().all(|c| !data.novel_ids.contains(c)));
        let e = data.sample_episode(Split::Novel, k, index).unwrap();
        prop_assert_eq!(&e, &make_dataset(&cfg).unwrap().sample_episode(Split::Novel, k, index).unwrap());
        prop_assert!(!e.distractor_ids.contains(&e.class_id));
        prop_assert_eq!(e.supports.len(), k);
    }
}
