mod common;

use std::collections::BTreeMap;

use common::rng;
use holosim::format::{decode_clip, encode_clip, load_library, pack_library, read_clip, write_clip, PackReader, PACK_MAGIC};
use holosim::generate::{generate, jitter, Family, FamilySpec, GenSpec};
use holosim::{ClipLibrary, Frame, MotionClip, RobotConfig, SimError};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_clip(r: &mut impl Rng, k: usize) -> MotionClip {
    let j = r.random_range(2..8);
    let n = r.random_range(12..40);
    let mut v = |s: f64| r.random_range(-s..s);
    let frames = (0..n)
        .map(|_| Frame {
            root_pos: [v(5.0), v(1.0), v(1.0)],
            pitch: v(1.0),
            root_vel: [v(2.0), v(2.0), v(2.0)],
            pitch_rate: v(3.0),
            q: (0..j).map(|_| v(1.5)).collect(),
            qd: (0..j).map(|_| v(4.0)).collect(),
            key_pos: (0..j + 2).map(|_| [v(2.0), v(2.0), v(2.0)]).collect(),
            gravity: [v(1.0), 0.0, -1.0],
            height: v(1.0),
            contacts: [v(1.0) > 0.0, v(1.0) > 0.0],
        })
        .collect();
    MotionClip {
        id: format!("clip-{k}"),
        source: ["a", "b", "c"][k % 3].into(),
        fps: 50.0,
        num_joints: j,
        frames,
    }
}

#[test]
fn fifty_random_clips_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let clips: Vec<MotionClip> = (0..50).map(|k| random_clip(&mut r, k)).collect();
    for c in &clips {
        let path = dir.path().join(format!("{}.mclip", c.id));
        write_clip(c, &path).unwrap();
        assert_eq!(&read_clip(&path).unwrap(), c);
        assert_eq!(&decode_clip(&encode_clip(c).unwrap()).unwrap(), c);
    }
}

#[test]
fn payload_is_little_endian() {
    let c = random_clip(&mut rng(1), 0);
    let bytes = encode_clip(&c).unwrap();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let first = &bytes[20 + header_len..28 + header_len];
    assert_eq!(first, c.frames[0].root_pos[0].to_le_bytes());
    assert_eq!(bytes.len(), 20 + header_len + 8 * c.len() * Frame::scalar_count(c.num_joints));
}

#[test]
fn packs_support_random_access() {
    let dir = tempfile::tempdir().unwrap();
    let robot = RobotConfig::biped(4);
    let lib = generate(&GenSpec::mixed(30, 3), &robot, &mut rng(2)).unwrap();
    let path = dir.path().join("lib.mpack");
    pack_library(&lib, &path).unwrap();
    let mut reader = PackReader::open(&path).unwrap();
    assert_eq!(reader.len(), lib.len());
    for k in [7, 0, 14, 3] {
        assert_eq!(&reader.read_clip(k).unwrap(), lib.get(k));
    }
    assert!(reader.read_clip(lib.len()).is_err());
    let back = load_library(&path).unwrap();
    assert_eq!(back.clips(), lib.clips());
    assert_eq!(back.weights(), lib.weights());
}

#[test]
fn empty_library_errors_cleanly() {
    assert!(matches!(ClipLibrary::new(vec![]), Err(SimError::EmptyLibrary)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.mpack");
    let header = br#"{"weights":{},"clips":[]}"#;
    let mut bytes = PACK_MAGIC.to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend((header.len() as u64).to_le_bytes());
    bytes.extend(header);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_library(&path), Err(SimError::EmptyLibrary)));
}

#[test]
fn malformed_files_are_rejected() {
    let c = random_clip(&mut rng(4), 0);
    let bytes = encode_clip(&c).unwrap();
    assert!(decode_clip(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_clip(&bytes[..10]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_clip(&bad).is_err());
    let mut future = bytes;
    future[8] = 9;
    assert!(decode_clip(&future).is_err());
}

#[test]
fn duplicate_ids_and_short_clips_are_rejected() {
    let robot = RobotConfig::biped(2);
    let lib = generate(&GenSpec::single_joint(20, 2, "s"), &robot, &mut rng(0)).unwrap();
    let mut clips = lib.into_clips();
    clips[1].id = clips[0].id.clone();
    assert!(ClipLibrary::new(clips.clone()).is_err());
    clips[1].id = "other".into();
    clips[1].frames.truncate(5);
    assert!(ClipLibrary::new(clips).is_err());
}

#[test]
fn weighted_sampling_matches_declared_proportions() {
    let robot = RobotConfig::biped(2);
    let spec = GenSpec {
        frames: 16,
        families: [("x", 1.0), ("y", 2.0), ("z", 5.0)]
            .iter()
            .map(|&(s, w)| FamilySpec {
                source: s.into(),
                count: 3,
                weight: w,
                family: Family::StandStill,
            })
            .collect(),
    };
    let lib = generate(&spec, &robot, &mut rng(0)).unwrap();
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut r = rng(12);
    let draws = 100_000;
    for _ in 0..draws {
        *counts.entry(lib.get(lib.sample(&mut r)).source.clone()).or_default() += 1.0;
    }
    let total: f64 = 8.0;
    let chi2: f64 = [("x", 1.0), ("y", 2.0), ("z", 5.0)]
        .iter()
        .map(|&(s, w)| {
            let expect = draws as f64 * w / total;
            (counts[s] - expect).powi(2) / expect
        })
        .sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn stand_still_clips_rest_on_both_feet() {
    let robot = RobotConfig::biped(6);
    let spec = GenSpec {
        frames: 30,
        families: vec![FamilySpec {
            source: "stand".into(),
            count: 2,
            weight: 1.0,
            family: Family::StandStill,
        }],
    };
    for c in generate(&spec, &robot, &mut rng(0)).unwrap().clips() {
        for f in &c.frames {
            assert_eq!(f.root_vel, [0.0; 3]);
            assert_eq!(f.pitch_rate, 0.0);
            assert!(f.qd.iter().all(|&v| v == 0.0));
            assert_eq!(f.contacts, [true, true]);
        }
    }
}

#[test]
fn smooth_families_have_consistent_velocities() {
    let robot = RobotConfig::biped(6);
    let mut spec = GenSpec::mixed(150, 3);
    spec.families.retain(|f| !matches!(f.family, Family::Jittered { .. }));
    let lib = generate(&spec, &robot, &mut rng(9)).unwrap();
    let mut worst: f64 = 0.0;
    for c in lib.clips() {
        let dt = c.dt();
        for w in c.frames.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            for k in 0..3 {
                worst = worst.max(((b.root_pos[k] - a.root_pos[k]) / dt - a.root_vel[k]).abs());
            }
            for k in 0..robot.num_joints {
                worst = worst.max(((b.q[k] - a.q[k]) / dt - a.qd[k]).abs());
            }
        }
    }
    assert!(worst <= 0.05, "worst finite-difference mismatch {worst}");
}

#[test]
fn jitter_is_bounded_by_its_amplitude() {
    let robot = RobotConfig::biped(6);
    let lib = generate(&GenSpec::mixed(60, 2), &robot, &mut rng(4)).unwrap();
    let base = &lib.clips()[lib.clips_of("sine")[0]];
    let noisy = jitter(base, &robot, 0.02, &mut rng(5));
    let mut any = false;
    for (a, b) in base.frames.iter().zip(&noisy.frames) {
        for (x, y) in a.q.iter().zip(&b.q) {
            assert!((x - y).abs() <= 0.02);
            any |= x != y;
        }
    }
    assert!(any);
    noisy.validate(12).unwrap();
}

#[test]
fn generated_clips_are_valid_and_grouped() {
    let robot = RobotConfig::biped(6);
    let lib = generate(&GenSpec::mixed(40, 2), &robot, &mut rng(1)).unwrap();
    assert_eq!(lib.len(), 10);
    let sources: Vec<&str> = lib.sources().collect();
    assert_eq!(sources, ["crouch", "sine", "spline", "stand", "video"]);
    for s in sources {
        assert_eq!(lib.clips_of(s).len(), 2);
    }
    for c in lib.clips() {
        c.validate(12).unwrap();
        let low = c.frames.iter().map(|f| f.key_pos[robot.feet()[0]][2].min(f.key_pos[robot.feet()[1]][2]));
        assert!(low.map(f64::abs).fold(0.0, f64::max) < 1e-9, "{} floats or sinks", c.id);
    }
}

#[test]
fn generation_is_deterministic_and_rejects_bad_specs() {
    let robot = RobotConfig::biped(4);
    let a = generate(&GenSpec::mixed(20, 1), &robot, &mut rng(8)).unwrap();
    let b = generate(&GenSpec::mixed(20, 1), &robot, &mut rng(8)).unwrap();
    assert_eq!(a.clips(), b.clips());
    assert!(generate(&GenSpec::mixed(5, 1), &robot, &mut rng(8)).is_err());
    let mut bad = GenSpec::single_joint(20, 1, "s");
    bad.families[0].family = Family::SingleJoint { joint: 9, amplitude: [0.1, 0.2], freq: [0.1, 0.2] };
    assert!(generate(&bad, &robot, &mut rng(8)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_encodable_clip_round_trips(seed in any::<u64>(), k in 0usize..100) {
        let c = random_clip(&mut rng(seed), k);
        prop_assert_eq!(decode_clip(&encode_clip(&c).unwrap()).unwrap(), c);
    }
}
