use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stdfnc::dfnc::{
    dfnc, read_dfnc_bin, read_timecourse, taper_weights, window_count, windowed_correlation, write_dfnc_bin, write_timecourse_bin, write_timecourse_csv, NetworkTimecourse, WindowSpec,
};

fn random_timecourse(t: usize, n: usize, seed: u64) -> NetworkTimecourse {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    // shared component so correlations are not all near zero
    let mut values = Vec::with_capacity(t * n);
    for _ in 0..t {
        let common: f64 = r.sample(StandardNormal);
        for c in 0..n {
            let own: f64 = r.sample(StandardNormal);
            values.push(0.3 * c as f64 + common * (c % 3) as f64 + own);
        }
    }
    NetworkTimecourse::new(values, t, n, 2.0).unwrap()
}

/// Weighted Pearson by raw moments: (E[xy] - E[x]E[y]) / sqrt(var x var y).
fn pearson_oracle(tc: &NetworkTimecourse, weights: &[f64], start: usize, i: usize, j: usize) -> f64 {
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, &wk) in weights.iter().enumerate() {
        let x = tc.at(start + k, i);
        let y = tc.at(start + k, j);
        sx += wk * x;
        sy += wk * y;
        sxx += wk * x * x;
        syy += wk * y * y;
        sxy += wk * x * y;
    }
    (sxy - sx * sy) / ((sxx - sx * sx) * (syy - sy * sy)).sqrt()
}

#[test]
fn matches_moment_oracle_on_random_subjects() {
    let spec = WindowSpec::default();
    let taper = taper_weights(spec.width, spec.sigma).unwrap();
    for seed in 0..50 {
        let tc = random_timecourse(60, 16, seed);
        let d = windowed_correlation(&tc, &taper, spec.step).unwrap();
        assert_eq!(d.n_windows(), 51);
        d.check_invariants().unwrap();
        for win in 0..d.n_windows() {
            let m = d.window(win);
            for i in 0..16 {
                for j in i + 1..16 {
                    let want = pearson_oracle(&tc, taper.weights(), win, i, j);
                    assert!((m[i * 16 + j] - want).abs() < 1e-12, "subject {seed} window {win} ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn window_counts_from_acquisition_length() {
    assert_eq!(window_count(255, 10, 1).unwrap(), 246);
    assert_eq!(window_count(60, 10, 1).unwrap(), 51);
    assert_eq!(window_count(60, 10, 5).unwrap(), 11);
    assert!(window_count(9, 10, 1).is_err());
}

#[test]
fn stepped_windows_start_at_multiples_of_the_step() {
    let tc = random_timecourse(40, 5, 3);
    let spec = WindowSpec { width: 8, step: 3, sigma: 2.0 };
    let d = dfnc(&tc, &spec).unwrap();
    let taper = taper_weights(8, 2.0).unwrap();
    assert_eq!(d.n_windows(), 11);
    for win in 0..11 {
        let want = pearson_oracle(&tc, taper.weights(), win * 3, 1, 4);
        assert!((d.window(win)[9] - want).abs() < 1e-12);
    }
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("stdfnc-dfnc-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn file_round_trips() {
    let dir = scratch("io");
    let tc = random_timecourse(30, 4, 7).with_names(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();

    let bin = dir.join("tc.bin");
    write_timecourse_bin(&bin, &tc).unwrap();
    assert_eq!(read_timecourse(&bin, 0.0).unwrap(), tc);

    let csv = dir.join("tc.csv");
    write_timecourse_csv(&csv, &tc).unwrap();
    let back = read_timecourse(&csv, 2.0).unwrap();
    assert_eq!(back.names, tc.names);
    assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), tc.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    let d = dfnc(&tc, &WindowSpec::default()).unwrap();
    let path = dir.join("dfnc.bin");
    write_dfnc_bin(&path, &d).unwrap();
    assert_eq!(read_dfnc_bin(&path).unwrap(), d);

    // truncated payload and missing sidecar are reported
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(read_dfnc_bin(&path).is_err());
    std::fs::remove_file(dir.join("dfnc.json")).unwrap();
    assert!(read_dfnc_bin(&path).is_err());

    std::fs::write(&csv, "a,b\n1.0,2.0\n3.0\n").unwrap();
    let err = read_timecourse(&csv, 2.0).unwrap_err().to_string();
    assert!(err.contains("row 3"), "{err}");
    std::fs::remove_dir_all(dir).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn invariants_hold_for_any_geometry(seed in 0u64..10_000, n in 2usize..9, width in 3usize..15, step in 1usize..4, sigma in 0.0f64..4.0) {
        let tc = random_timecourse(width + 20, n, seed);
        let d = dfnc(&tc, &WindowSpec { width, step, sigma }).unwrap();
        prop_assert_eq!(d.n_windows(), window_count(width + 20, width, step).unwrap());
        prop_assert!(d.check_invariants().is_ok());
    }
}
