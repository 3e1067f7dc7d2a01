use proptest::prelude::*;
use qdmpc::quantizer::{schedule_interval, Codeword, QuantizerError, UniformQuantizer};

/// Nearest grid point of x̄ + step·ℤ, ties away from x̄.
fn grid_round(x: f64, mid: f64, step: f64) -> f64 {
    let lo = mid + ((x - mid) / step).floor() * step;
    let hi = lo + step;
    let (dl, dh) = (x - lo, hi - x);
    if dl < dh {
        lo
    } else if dh < dl {
        hi
    } else if (lo - mid).abs() > (hi - mid).abs() {
        lo
    } else {
        hi
    }
}

#[test]
fn quantize_point_three_one_bit() {
    let q = UniformQuantizer::new(vec![0.0], 1.0, 1).unwrap();
    assert_eq!(q.quantize(&[0.3]).unwrap(), vec![0.5]);
    assert_eq!(q.encode(&[0.3]).unwrap(), vec![Codeword { index: 1, saturated: false }]);
}

#[test]
fn quantize_at_mid_is_mid() {
    let q = UniformQuantizer::new(vec![1.25, -3.0], 0.7, 5).unwrap();
    assert_eq!(q.quantize(&[1.25, -3.0]).unwrap(), vec![1.25, -3.0]);
    assert!(q.encode(&[1.25, -3.0]).unwrap().iter().all(|w| w.index == 0 && !w.saturated));
}

#[test]
fn quantize_negative_matches_grid_rounding() {
    let q = UniformQuantizer::new(vec![0.0], 1.0, 2).unwrap();
    let got = q.quantize(&[-0.4]).unwrap()[0];
    assert_eq!(got, grid_round(-0.4, 0.0, 0.25));
    assert_eq!(got, -0.5);
}

#[test]
fn encode_saturates_far_input() {
    let q = UniformQuantizer::new(vec![0.0], 1.0, 1).unwrap();
    let w = q.encode(&[10.0]).unwrap();
    assert_eq!(w, vec![Codeword { index: 1, saturated: true }]);
    let (v, sat) = q.transmit(&[10.0]).unwrap();
    assert_eq!((v, sat), (vec![0.5], 1));
}

#[test]
fn rejects_bad_inputs() {
    assert_eq!(UniformQuantizer::new(vec![0.0], 0.0, 3), Err(QuantizerError::Interval(0.0)));
    assert_eq!(UniformQuantizer::new(vec![0.0], 1.0, 0), Err(QuantizerError::Bits));
    let q = UniformQuantizer::new(vec![0.0, 0.0], 1.0, 3).unwrap();
    assert_eq!(q.quantize(&[1.0]), Err(QuantizerError::Dimension { mid: 2, input: 1 }));
}

#[test]
fn schedule_examples() {
    assert_eq!(schedule_interval(1.0, 0.5, 0).unwrap(), 1.0);
    assert_eq!(schedule_interval(2.0, 0.5, 3).unwrap(), 0.25);
    let mut oracle = 1.0f64;
    for _ in 0..917 {
        oracle *= 0.975;
    }
    let got = schedule_interval(1.0, 0.975, 917).unwrap();
    assert!((got - oracle).abs() <= 1e-12 * oracle);
    assert!((got - 8.2648e-11).abs() < 1e-14);
    assert!(schedule_interval(0.0, 0.5, 1).is_err());
    assert!(schedule_interval(-1.0, 0.5, 1).is_err());
}

#[test]
fn exhaustive_small_grid_encode_decode() {
    for bits in 1..=4u32 {
        let q = UniformQuantizer::new(vec![0.0], 1.0, bits).unwrap();
        let cap = q.max_index();
        for i in -400..=400 {
            let x = i as f64 / 512.0;
            let w = q.encode(&[x]).unwrap()[0];
            let raw = q.quantize(&[x]).unwrap()[0];
            assert_eq!(raw, grid_round(x, 0.0, q.step()), "x = {x}, n = {bits}");
            assert!(w.index.abs() <= cap);
            if !w.saturated {
                assert_eq!(q.decode(&[w]).unwrap()[0], raw);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn error_bound_inside_range(
        mid in -100.0f64..100.0,
        interval in 1e-6f64..1e3,
        bits in 1u32..24,
        frac in -0.5f64..=0.5,
    ) {
        let q = UniformQuantizer::new(vec![mid], interval, bits).unwrap();
        let x = mid + frac * interval;
        let v = q.quantize(&[x]).unwrap()[0];
        prop_assert!((v - x).abs() <= interval / 2f64.powi(bits as i32 + 1));
    }

    #[test]
    fn decode_encode_is_quantize(
        mid in prop::collection::vec(-10.0f64..10.0, 1..6),
        interval in 1e-3f64..10.0,
        bits in 1u32..16,
        seed in prop::collection::vec(-0.5f64..=0.5, 6),
    ) {
        let q = UniformQuantizer::new(mid.clone(), interval, bits).unwrap();
        let x: Vec<f64> = mid.iter().zip(&seed).map(|(m, f)| m + f * interval).collect();
        let w = q.encode(&x).unwrap();
        prop_assert!(w.iter().all(|c| !c.saturated));
        prop_assert_eq!(q.decode(&w).unwrap(), q.quantize(&x).unwrap());
    }

    #[test]
    fn quantize_is_idempotent(
        mid in -10.0f64..10.0,
        bits in 1u32..12,
        idx in -2048i64..2048,
        jitter in -0.45f64..0.45,
    ) {
        // Powers-of-two intervals keep the grid exact in binary.
        let q = UniformQuantizer::new(vec![mid.round()], 4.0, bits).unwrap();
        let x = q.mid[0] + (idx as f64 + jitter) * q.step();
        let once = q.quantize(&[x]).unwrap();
        prop_assert_eq!(q.quantize(&once).unwrap(), once);
    }

    #[test]
    fn schedule_strictly_decreasing(c in 1e-3f64..1e3, kappa in 0.5f64..0.999, k in 0u64..500) {
        let a = schedule_interval(c, kappa, k).unwrap();
        let b = schedule_interval(c, kappa, k + 1).unwrap();
        prop_assume!(b >= f64::MIN_POSITIVE);
        prop_assert!(b < a);
    }
}
