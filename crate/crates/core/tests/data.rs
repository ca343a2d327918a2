use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pvnet_core::data::{
    default_profiles, generate_dataset, generate_phantom, load_split, postprocess, preprocess,
    AugmentPolicy, Augmentation, Manifest, Rvol, Split, Voxels,
};
use pvnet_core::metrics::dice_score;

#[test]
fn organ_fractions_stay_in_a_plausible_band() {
    for seed in 0..50 {
        let case = generate_phantom(seed, 32, 3, &default_profiles(3)).unwrap();
        let labels = case.labels.unwrap();
        let n = labels.len() as f64;
        for organ in 1..=3u8 {
            let frac = labels.iter().filter(|&&l| l == organ).count() as f64 / n;
            assert!(
                (0.001..=0.10).contains(&frac),
                "seed {seed} organ {organ}: {:.3}%",
                100.0 * frac
            );
        }
    }
}

fn round_trip_dice(seed: u64, size: usize, model: usize) -> Vec<f64> {
    let case = generate_phantom(seed, size, 3, &default_profiles(3)).unwrap();
    let p = preprocess(&case, model).unwrap();
    let back = postprocess(&p.labels.unwrap(), &p.record).unwrap();
    let gt = case.labels.as_ref().unwrap();
    (1..=3u8)
        .map(|organ| dice_score(&back, gt, organ).unwrap())
        .collect()
}

#[test]
fn resampling_round_trip_preserves_organs() {
    for seed in 0..20 {
        for size in [20, 32] {
            let d = round_trip_dice(seed, size, 32);
            assert!(
                d.iter().all(|&v| v >= 95.0),
                "seed {seed} size {size}: {d:?}"
            );
        }
    }
}

#[test]
fn downsampling_round_trip_loses_only_boundaries() {
    // Nearest-neighbour through a coarser grid drops thin rims of small organs.
    for (size, model, mean_floor) in [(40, 32, 88.0), (48, 32, 85.0), (24, 16, 70.0)] {
        let all: Vec<f64> = (0..5)
            .flat_map(|s| round_trip_dice(s, size, model))
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean >= mean_floor, "{size}->{model}: mean {mean:.2}");
        assert!(all.iter().all(|&v| v >= 50.0), "{size}->{model}: {all:?}");
    }
}

#[test]
fn augmentation_stays_in_range_and_leaves_labels_alone() {
    let case = generate_phantom(5, 24, 2, &default_profiles(2)).unwrap();
    let p = preprocess(&case, 16).unwrap();
    let image = p.image.data().to_vec();
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fired = [0usize; 4];
    for _ in 0..100 {
        let aug = Augmentation::draw(&policy, &mut rng);
        match aug {
            Augmentation::Identity => fired[0] += 1,
            Augmentation::Blur(s) => {
                fired[1] += 1;
                assert!((0.25..1.5).contains(&s));
            }
            Augmentation::Gamma(g) => {
                fired[2] += 1;
                assert!(((-0.3f64).exp()..0.3f64.exp()).contains(&g));
            }
            Augmentation::Noise(s, _) => {
                fired[3] += 1;
                assert!((0.0..0.05).contains(&s));
            }
        }
        let out = aug.apply(&image, [16; 3]);
        assert_eq!(out.len(), image.len());
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(fired.iter().all(|&c| c > 0), "{fired:?}");
    assert!((30..=70).contains(&fired[0]), "{fired:?}");
}

proptest! {
    #[test]
    fn rvol_round_trips(
        d in 1usize..5, h in 1usize..5, w in 1usize..5,
        spacing in prop::array::uniform3(0.1f64..5.0),
        floats in prop::collection::vec(any::<f32>(), 64),
        id in "[a-z0-9_]{1,12}",
        as_labels in any::<bool>(),
    ) {
        let n = d * h * w;
        let voxels = if as_labels {
            Voxels::U8(floats[..n].iter().map(|f| f.to_bits() as u8).collect())
        } else {
            Voxels::F32(floats[..n].to_vec())
        };
        let vol = Rvol { shape: [d, h, w], spacing, case_id: id, voxels };
        let bytes = vol.to_bytes().unwrap();
        let back = Rvol::from_bytes(&bytes).unwrap();
        // Compare bit patterns so NaN payloads count too.
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.shape, vol.shape);
        prop_assert_eq!(back.case_id, vol.case_id);
    }

    #[test]
    fn truncated_rvol_is_rejected(cut in 1usize..40) {
        let vol = Rvol {
            shape: [2, 2, 2],
            spacing: [1.0; 3],
            case_id: "t".into(),
            voxels: Voxels::F32(vec![1.5; 8]),
        };
        let bytes = vol.to_bytes().unwrap();
        prop_assert!(Rvol::from_bytes(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(a.path(), 6, 20, 3, 12).unwrap();
    let mb = generate_dataset(b.path(), 6, 20, 3, 12).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(Manifest::load(a.path()).unwrap(), ma);
    for c in &ma.cases {
        for rel in [&c.image, &c.label] {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "{}", rel.display());
        }
    }
    let held_out = ma.split(Split::Test).count();
    assert_eq!(held_out, 1);
    let train = load_split(a.path(), &ma, Split::Train, 16).unwrap();
    assert_eq!(train.len(), 5);
    assert!(train.iter().all(|c| c.labels.len() == 16 * 16 * 16));
}
