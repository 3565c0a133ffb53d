//! Property tests over the frontend, tokenizer counts, metrics, schedule and
//! augmentation.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectttra::augment::mix_values;
use spectttra::evaluation::{confusion, eer, Label, ScoredExample};
use spectttra::frontend::{fit_frames, standardize, FrameMode, LOG_FLOOR};
use spectttra::tokenizer::{spectral_patches, spectttra_token_count, temporal_patches, vit_token_count};
use spectttra::training::lr_at;
use spectttra::{ClipConfig, TrainConfig};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn scored_set() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..64).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v
    })
}

fn examples(pairs: &[(f64, bool)]) -> Vec<ScoredExample> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, y))| ScoredExample::new(i.to_string(), s, if y { Label::Fake } else { Label::Real }))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn standardized_cells_have_zero_mean_unit_variance(mut x in matrix(6, 9)) {
        standardize(&mut x);
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_input_standardizes_to_zeros(c in -20.0f64..20.0, rows in 1usize..8, cols in 1usize..8) {
        let mut x = Array2::from_elem((rows, cols), c);
        standardize(&mut x);
        prop_assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fitted_frames_hit_the_target(x in matrix(4, 20), target in 1usize..48, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [FrameMode::Eval, FrameMode::Train] {
            let y = fit_frames(&x, target, mode, &mut rng);
            prop_assert_eq!(y.dim(), (4, target));
            // every output column is an input column or floor padding
            let floor = LOG_FLOOR.ln();
            for col in y.columns() {
                let is_pad = col.iter().all(|&v| v == floor);
                let is_input = x.columns().into_iter().any(|c| c == col);
                prop_assert!(is_pad || is_input);
            }
        }
    }

    #[test]
    fn token_counts_follow_floor_division(n_mels in 1usize..160, n_frames in 1usize..400, t in 1usize..9, f in 1usize..9, p in 1usize..20) {
        let clip = ClipConfig::custom(t, f);
        let (nt, nf) = spectttra_token_count(n_mels, n_frames, &clip).unwrap();
        let x = Array2::<f64>::zeros((n_mels, n_frames));
        prop_assert_eq!(temporal_patches(x.view(), t, nt).nrows(), nt);
        prop_assert_eq!(spectral_patches(x.view(), f, nf).nrows(), nf);
        prop_assert_eq!(nt, n_frames / t);
        prop_assert_eq!(nf, n_mels / f);
        prop_assert_eq!(vit_token_count(n_mels, n_frames, p).unwrap(), (n_mels / p) * (n_frames / p));
    }

    #[test]
    fn eer_is_a_rate(pairs in scored_set()) {
        let e = eer(&examples(&pairs)).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn eer_ignores_monotone_rescaling(pairs in scored_set()) {
        let e = eer(&examples(&pairs)).unwrap();
        // strictly increasing on [0, 1] and exact enough to keep ties and order
        let warped: Vec<(f64, bool)> = pairs.iter().map(|&(s, y)| (0.25 + 0.5 * s, y)).collect();
        prop_assert!((e - eer(&examples(&warped)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn confusion_partitions_the_set(pairs in scored_set(), thr in 0.0f64..=1.0) {
        let ex = examples(&pairs);
        let c = confusion(&ex, thr);
        prop_assert_eq!(c.total(), ex.len());
        prop_assert_eq!(c.positives(), pairs.iter().filter(|p| p.1).count());
    }

    #[test]
    fn schedule_stays_within_bounds(epochs in 2usize..30, warmup in 0usize..5, spe in 1usize..20, base in 1e-5f64..1e-1) {
        let cfg = TrainConfig { epochs, warmup_epochs: warmup.min(epochs - 1), base_lr: base, ..TrainConfig::default() };
        let mut prev = 0.0;
        for step in 0..epochs * spe {
            let lr = lr_at(step, spe, &cfg).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
            if step < cfg.warmup_epochs * spe {
                prop_assert!(lr >= prev);
            } else if step > cfg.warmup_epochs * spe {
                prop_assert!(lr <= prev * (1.0 + 1e-12));
            }
            prev = lr;
        }
        prop_assert!((lr_at(epochs * spe - 1, spe, &cfg).unwrap() - base * 0.01).abs() < base * 1e-9
            || epochs * spe - 1 <= cfg.warmup_epochs * spe);
    }

    #[test]
    fn mixed_label_lies_between_inputs(lambda in 0.0f64..=1.0, ya in 0.0f64..=1.0, yb in 0.0f64..=1.0) {
        let a = Array2::<f32>::ones((2, 3));
        let b = Array2::<f32>::zeros((2, 3));
        let (x, y) = mix_values(&a, &b, ya, yb, lambda).unwrap();
        prop_assert!(y >= ya.min(yb) - 1e-12 && y <= ya.max(yb) + 1e-12);
        prop_assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
