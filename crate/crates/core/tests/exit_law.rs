use disclab::brownian::{g_round_trip, ExitLaw};

#[test]
fn complement_agrees_with_g_where_both_are_accurate() {
    let law = ExitLaw::standard();
    for x in [0.6, 0.8, 1.0, 1.2, 1.4] {
        let direct = 1.0 - law.g(x).unwrap();
        let series = law.g_complement(x).unwrap();
        assert!((direct - series).abs() < 1e-13, "x={x}: {direct} vs {series}");
    }
}

#[test]
fn round_trip_is_accurate_on_the_working_range() {
    let mut worst: f64 = 0.0;
    for i in 0..=4000 {
        let x = 0.15 + (5.0 - 0.15) * i as f64 / 4000.0;
        worst = worst.max((g_round_trip(x).unwrap() - x).abs());
    }
    assert!(worst <= 1e-6, "worst {worst:e}");
}

#[test]
fn complement_inverse_rejects_bad_input() {
    let law = ExitLaw::standard();
    assert!(law.g_complement_inverse(0.0).is_err());
    assert!(law.g_complement_inverse(1.0).is_err());
    assert!(law.g_complement(-1.0).is_err());
}
