use proptest::prelude::*;

use simva::features::{encode_text_stub, EncodedVideo};
use simva::harness::eval::accuracy;
use simva::harness::harmonic_mean;
use simva::motion::center_offsets;
use simva::params::ParameterStore;
use simva::rng::{normal_tensor, rng_from};
use simva::sampler::{sample_classes, GlobalAlignment, SampledVocabulary};
use simva::similarity::build_similarity;
use simva::temporal::selective_scan;
use simva::wse::wse_blend;
use simva::Tensor;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class {i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_stays_in_unit_interval(seed in any::<u64>(), t in 1usize..4, h in 1usize..4, d in 1usize..12, m in 2usize..5) {
        let mut rng = rng_from(seed, &[]);
        let video = EncodedVideo::new(normal_tensor(&mut rng, &[t, h, h, d], 3.0), normal_tensor(&mut rng, &[t, d], 1.0), "p").unwrap();
        let texts = encode_text_stub(&names(m), d, seed).unwrap();
        let s = build_similarity(&video, &SampledVocabulary::full(&texts, None).unwrap()).unwrap();
        prop_assert_eq!(s.values.shape(), &[t, h, h, m]);
        prop_assert!(s.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn centered_offsets_ignore_constant_shifts(seed in any::<u64>(), c0 in -5.0f64..5.0, c1 in -5.0f64..5.0) {
        let raw = normal_tensor(&mut rng_from(seed, &[]), &[3, 2, 4, 4], 1.0);
        let shifted = Tensor::from_fn(raw.shape().to_vec(), |i| raw.at(i) + if i[1] == 0 { c0 } else { c1 });
        let a = center_offsets(&raw).unwrap();
        prop_assert!(a.max_abs_diff(&center_offsets(&shifted).unwrap()) < 1e-10);
        for f in 0..3 {
            for ch in 0..2 {
                prop_assert!(a.narrow(0, f, 1).narrow(1, ch, 1).sum().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn training_vocabulary_contains_ground_truth(seed in any::<u64>(), n in 2usize..20, m_frac in 0.0f64..1.0, gt_frac in 0.0f64..1.0) {
        let m = 1 + (m_frac * (n - 1) as f64) as usize;
        let gt = ((gt_frac * n as f64) as usize).min(n - 1);
        let texts = encode_text_stub(&names(n), 4, 0).unwrap();
        let align = GlobalAlignment {
            video_vec: Tensor::zeros([4]),
            prior_scores: normal_tensor(&mut rng_from(seed, &[1]), &[n], 0.5),
        };
        let v = sample_classes(&align, &texts, m, true, Some(gt), seed).unwrap();
        prop_assert_eq!(v.indices.len(), m);
        prop_assert!(v.indices.contains(&gt));
        prop_assert!(v.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn scan_prefix_ignores_suffix(seed in any::<u64>(), cut in 1usize..7) {
        let mut rng = rng_from(seed, &[]);
        let (t, e, n) = (7, 3, 2);
        let u = normal_tensor(&mut rng, &[1, t, e], 1.0);
        let delta = Tensor::full([1, t, e], 0.3);
        let a = Tensor::from_fn([e, n], |i| -1.0 - i[1] as f64);
        let b = normal_tensor(&mut rng, &[1, t, n], 1.0);
        let c = normal_tensor(&mut rng, &[1, t, n], 1.0);
        let d = Tensor::full([e], 0.5);
        let full = selective_scan(&u, &delta, &a, &b, &c, &d).unwrap().y;
        let short = selective_scan(&u.narrow(1, 0, cut), &delta.narrow(1, 0, cut), &a, &b.narrow(1, 0, cut), &c.narrow(1, 0, cut), &d).unwrap().y;
        prop_assert_eq!(full.narrow(1, 0, cut), short);
    }

    #[test]
    fn wse_is_elementwise_interpolation(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let mut rng = rng_from(seed, &[]);
        let mut base = ParameterStore::new();
        let mut tuned = ParameterStore::new();
        base.insert("w", normal_tensor(&mut rng, &[5], 1.0)).unwrap();
        tuned.insert("w", normal_tensor(&mut rng, &[5], 1.0)).unwrap();
        let out = wse_blend(&base, &tuned, beta).unwrap();
        let (x, y, z) = (base.get("w").unwrap().data(), tuned.get("w").unwrap().data(), out.get("w").unwrap().data());
        for k in 0..5 {
            prop_assert!(((1.0 - beta) * x[k] + beta * y[k] - z[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_mean(b in 0.01f64..100.0, n in 0.01f64..100.0) {
        let hm = harmonic_mean(b, n);
        prop_assert!(b.min(n) <= hm + 1e-12);
        prop_assert!(hm <= (b + n) / 2.0 + 1e-12);
    }

    #[test]
    fn top1_never_exceeds_top5(seed in any::<u64>(), clips in 1usize..30) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = rng_from(seed, &[]);
        let mut ranked = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..clips {
            let mut r: Vec<usize> = (0..8).collect();
            r.shuffle(&mut rng);
            ranked.push(r);
            labels.push(rng.random_range(0..8));
        }
        let acc = accuracy(&ranked, &labels);
        prop_assert!(acc.top1 <= acc.top5 && acc.top5 <= 100.0);
    }
}
