mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skelvad::metrics::{auc_scores, eer_scores};
use skelvad::model::{group_digest, train_ctd, train_ftd, Params};
use skelvad::pose_io::{extract_windows, format_pose_tracks, read_pose_tracks, CoordinateSpace, PoseFileSchema};
use skelvad::synth::{realize, AnomalyKind, AnomalySpec, GaitParams, SynthScenario};
use skelvad::tokenizer::{detokenize, tokenize};
use skelvad::{SchemeKind, TokenizationScheme, TrainConfig, UetdWeights};

fn scheme() -> impl Strategy<Value = TokenizationScheme> {
    (0usize..4, any::<bool>()).prop_map(|(i, rel)| TokenizationScheme::new(SchemeKind::ALL[i], rel))
}

fn scenario(seed: u64, n_frames: usize, kind: AnomalyKind, start: u64, len: u64) -> SynthScenario {
    SynthScenario {
        seed,
        video_prefix: "p_".into(),
        n_videos: 2,
        persons_per_video: 2,
        n_frames,
        keypoints: 5,
        gait: GaitParams::default(),
        anomalies: vec![AnomalySpec {
            kind,
            video_id: "p_001".into(),
            person_id: 1,
            start,
            end: start + len,
        }],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokens_match_oracle_and_invert(seed in any::<u64>(), k in 1usize..=17, half in 1usize..=12, s in scheme()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = common::random_window(&mut rng, 2 * half, k);
        let seq = tokenize(&w, s).unwrap();
        prop_assert_eq!(seq.tokens.shape(), s.token_shape(2 * half, k));
        let want = common::oracle_tokens(&w, s);
        prop_assert_eq!(seq.tokens.as_slice(), want.as_slice());
        prop_assert_eq!(detokenize(&seq).unwrap().absolute, w.absolute);
    }

    #[test]
    fn relative_pose_starts_at_zero_and_rebuilds(seed in any::<u64>(), k in 1usize..=17, half in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = common::random_window(&mut rng, 2 * half, k);
        let row = 2 * k;
        prop_assert!(w.relative[..row].iter().all(|&v| v == 0.0));
        for i in 0..w.absolute.len() {
            let d = (w.relative[i] + w.absolute[i % row]).to_bits() as i64 - w.absolute[i].to_bits() as i64;
            prop_assert!(d.abs() <= 1, "slot {} off by {} ulp", i, d);
        }
    }

    #[test]
    fn windows_tile_tracks(seed in 0u64..1000, n in 30usize..90, half in 1usize..=8, stride in 1usize..10) {
        let (tracks, _) = realize(&scenario(seed, n, AnomalyKind::Freeze, 10, 0)).unwrap();
        let beta = 2 * half;
        for t in &tracks {
            let ws = extract_windows(t, beta, stride).unwrap();
            prop_assert_eq!(ws.len(), (n - beta) / stride + 1);
            for (i, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.start_frame, (i * stride) as u64);
            }
        }
    }

    #[test]
    fn generated_tracks_survive_the_file_format(seed in 0u64..1000) {
        let (tracks, _) = realize(&scenario(seed, 40, AnomalyKind::JointScramble, 12, 6)).unwrap();
        let schema = PoseFileSchema { keypoints: 5, space: CoordinateSpace::Normalized };
        let load = read_pose_tracks(format_pose_tracks(&schema, &tracks).as_bytes()).unwrap();
        prop_assert!(load.rejections.is_empty());
        prop_assert_eq!(load.tracks, tracks);
    }

    #[test]
    fn labels_mark_exactly_the_span(seed in 0u64..1000, kind in 0usize..4, start in 20u64..40, len in 0u64..20) {
        let (tracks, labels) = realize(&scenario(seed, 80, AnomalyKind::ALL[kind], start, len)).unwrap();
        for t in &tracks {
            for f in &t.frames {
                prop_assert!(f.keypoints.iter().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
                let hit = t.video_id == "p_001" && (start..start + len).contains(&f.frame_index);
                prop_assert_eq!(labels.get(&t.video_id, f.frame_index), Some(u8::from(hit)));
            }
        }
    }

    #[test]
    fn metrics_match_oracles(scores in prop::collection::vec(0u8..20, 2..60), mask in prop::collection::vec(any::<bool>(), 60)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let mut labels: Vec<u8> = mask[..scores.len()].iter().map(|&b| u8::from(b)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let auc = auc_scores(&scores, &labels).unwrap();
        prop_assert!((auc - common::pairwise_auc(&scores, &labels)).abs() <= 1e-12);
        let (eer, _) = eer_scores(&scores, &labels).unwrap();
        prop_assert!((eer - common::brute_force_eer(&scores, &labels)).abs() <= 1e-9);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc_scores(&flipped, &labels).unwrap() - (1.0 - auc)).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_is_seeded_and_ftd_leaves_the_rest_alone(seed in any::<u64>(), lr in 1e-4f64..1e-2) {
        let config = common::tiny_config();
        let scheme = TokenizationScheme::new(SchemeKind::StPrp, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<_> = (0..6).map(|_| tokenize(&common::random_window(&mut rng, 4, 1), scheme).unwrap()).collect();
        let pairs: Vec<_> = data.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect();
        let train = TrainConfig { learning_rate: lr, batch_size: 2, epochs: 2, weight_decay: 1e-4, dropout: 0.1, seed };

        let a = train_ctd(&data, config, &train).unwrap();
        let b = train_ctd(&data, config, &train).unwrap();
        prop_assert_eq!(a.log_text(), b.log_text());
        prop_assert_eq!(&a.weights, &b.weights);

        let f = train_ftd(&pairs, &a.weights, &train).unwrap();
        for g in ["embed.", "encoder.", "ctd.", "proj."] {
            prop_assert_eq!(group_digest(&a.weights, g), group_digest(&f.weights, g));
        }
        prop_assert_ne!(group_digest(&a.weights, "ftd."), group_digest(&f.weights, "ftd."));
        prop_assert_eq!(f.weights.param_count(), UetdWeights::zeros(config).param_count());
    }
}
