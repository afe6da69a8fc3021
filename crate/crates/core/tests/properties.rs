use demix::audio::Waveform;
use demix::dsp::{frames_available, WindowSpec};
use demix::eval::sdr;
use demix::io::{decode_wav, decode_weights, encode_wav, encode_weights, scan_dataset, WavSpec};
use demix::model::{Arch, Model, ModelConfig};
use demix::stream::open_session;
use demix::synth::{synthetic_track, write_track};
use demix::train::{augment, plateau_schedule, Augmentations, LossKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(arch: Arch, seed: u64) -> Model<f32> {
    Model::build(&ModelConfig::toy(arch), seed).unwrap()
}

fn signal(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn stems(seed: u64, len: usize) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4).map(|_| (0..2).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn session_emission_follows_formula(cuts in proptest::collection::vec(1usize..40, 1..20), seed in 0u64..100) {
        let model = toy(Arch::HsTasnet, seed);
        let spec = model.config().window_spec();
        let total: usize = cuts.iter().sum();
        let x = signal(total, seed);
        let mut session = open_session(&model);
        let (mut pos, mut hops) = (0, 0u64);
        for c in cuts {
            hops += session.push(&x[2 * pos..2 * (pos + c)]).unwrap().len() as u64;
            pos += c;
            prop_assert_eq!(hops, frames_available(&spec, pos as u64));
            let bound = pos.saturating_sub(spec.size - spec.hop) as u64;
            prop_assert!(session.samples_out() <= bound);
        }
        session.flush().unwrap();
        prop_assert_eq!(session.samples_out(), total as u64);
    }

    #[test]
    fn truncating_future_never_changes_emitted(split in 16usize..200, extra in 1usize..200, seed in 0u64..100) {
        for arch in [Arch::HsTasnet, Arch::HsTasnetSmall, Arch::Tasnet] {
            let model = toy(arch, seed);
            let x = signal(split + extra, seed + 1);
            let mut short = open_session(&model);
            let a = short.push(&x[..2 * split]).unwrap();
            let mut long = open_session(&model);
            let b = long.push(&x).unwrap();
            prop_assert!(b.len() >= a.len());
            for (p, q) in a.iter().zip(&b) {
                prop_assert_eq!(&p.stems, &q.stems);
            }
        }
    }

    #[test]
    fn losses_are_minimal_at_target(seed in 0u64..1000, scale in 0.01f64..2.0) {
        let reference = stems(seed, 600);
        let probe: Vec<Vec<Vec<f64>>> = stems(seed + 1, 600)
            .iter()
            .map(|s| s.iter().map(|c| c.iter().map(|v| v * scale).collect()).collect())
            .collect();
        let spec = WindowSpec::new(64, 32).unwrap();
        for kind in [LossKind::L1, LossKind::MultiDomain { alpha: 0.5 }, LossKind::SiSnr, LossKind::SdSdr] {
            let at_target = kind.compute(&reference, &reference, &spec).unwrap().value;
            let elsewhere = kind.compute(&probe, &reference, &spec).unwrap().value;
            prop_assert!(elsewhere >= at_target, "{:?}: {} < {}", kind, elsewhere, at_target);
        }
    }

    #[test]
    fn augmented_mixture_is_stem_sum(seed in 0u64..1000) {
        let batch: Vec<Vec<Vec<Vec<f32>>>> = (0..3)
            .map(|i| {
                stems(seed * 3 + i, 300)
                    .into_iter()
                    .map(|s| s.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect())
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ex in augment(&batch, &Augmentations::default(), &mut rng).unwrap() {
            for (c, mix) in ex.mixture.iter().enumerate() {
                for (n, &m) in mix.iter().enumerate() {
                    let sum = ex.stems.iter().fold(0.0f32, |acc, s| acc + s[c][n]);
                    prop_assert_eq!(m.to_bits(), sum.to_bits());
                }
            }
        }
    }

    #[test]
    fn lr_never_increases_and_halves_exactly(history in proptest::collection::vec(0.0f64..10.0, 1..60)) {
        let mut lr = 3e-4f64;
        for e in plateau_schedule(&history, 0.5, 3, 10).unwrap() {
            let next = if e.decay { lr * 0.5 } else { lr };
            prop_assert!(next <= lr);
            if next != lr {
                prop_assert_eq!(next * 2.0, lr);
            }
            lr = next;
        }
    }

    #[test]
    fn float_wav_round_trip_is_identity(bits in proptest::collection::vec(any::<u32>(), 2..400)) {
        let values: Vec<f32> = bits
            .iter()
            .map(|&b| f32::from_bits(b))
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        let even = values.len() / 2 * 2;
        let wave = Waveform::from_interleaved(48000, 2, &values[..even]).unwrap();
        let bytes = encode_wav(&wave, WavSpec::float32(48000, 2)).unwrap();
        let (back, _) = decode_wav(&bytes).unwrap();
        for (a, b) in back.channels.iter().flatten().zip(wave.channels.iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn weight_file_round_trip_is_identity(seed in 0u64..1000) {
        let model = toy(Arch::HsTasnetSmall, seed);
        let bytes = encode_weights(&model.params()).unwrap();
        let tensors = decode_weights(&bytes).unwrap();
        prop_assert_eq!(tensors.len(), model.params().len());
        for (t, p) in tensors.iter().zip(model.params()) {
            prop_assert_eq!(&t.name, &p.name);
            prop_assert_eq!(&t.shape, &p.shape);
            prop_assert!(t.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn sdr_decreases_with_added_noise(seed in 0u64..1000) {
        let reference: Vec<Vec<f32>> = stems(seed, 2000)[0]
            .iter()
            .map(|c| c.iter().map(|&v| v as f32).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let n: Vec<Vec<f32>> = (0..2).map(|_| (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut last = f64::INFINITY;
        for level in [0.001f32, 0.01, 0.1, 1.0] {
            let est: Vec<Vec<f32>> = reference
                .iter()
                .zip(&n)
                .map(|(r, z)| r.iter().zip(z).map(|(a, b)| a + level * b).collect())
                .collect();
            let v = sdr(&reference, &est).unwrap();
            prop_assert!(v < last);
            last = v;
        }
    }
}

#[test]
fn doubled_estimate_scores_zero_db() {
    let reference: Vec<Vec<f32>> = (0..2).map(|c| (0..1000).map(|n| ((n * (c + 3)) % 17) as f32 / 17.0 - 0.5).collect()).collect();
    let doubled: Vec<Vec<f32>> = reference.iter().map(|c| c.iter().map(|v| 2.0 * v).collect()).collect();
    assert_eq!(sdr(&reference, &doubled).unwrap(), 0.0);
}

#[test]
fn forward_is_bitwise_deterministic() {
    for arch in [Arch::HsTasnet, Arch::HsTasnetSmall, Arch::Tasnet] {
        let model = toy(arch, 9);
        let x: Vec<Vec<f32>> = {
            let i = signal(300, 2);
            (0..2).map(|c| i.iter().skip(c).step_by(2).copied().collect()).collect()
        };
        let a = model.separate_planar(&x, true).unwrap();
        let b = Model::<f32>::build(&ModelConfig::toy(arch), 9).unwrap().separate_planar(&x, true).unwrap();
        assert_eq!(a, b, "{arch:?}");
    }
}

#[test]
fn scan_dataset_is_sorted_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["zeta", "alpha", "mid"] {
        write_track(dir.path(), "test", name, &synthetic_track(0.1, 8000, name.len() as u64)).unwrap();
    }
    let first = scan_dataset(dir.path()).unwrap();
    let names: Vec<&str> = first.split("test").iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["alpha", "mid", "zeta"]);
    assert_eq!(first, scan_dataset(dir.path()).unwrap());
}
