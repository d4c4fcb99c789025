use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stdfnc::dfnc::{dfnc, static_fnc, DomainPartition, WindowSpec};
use stdfnc::synth::{generate_cohort, labels_csv, repair_correlation, verify_planted_effect, CohortConfig, SyntheticCohort};
use stdfnc::Error;

#[test]
fn same_seed_same_cohort() {
    let c = CohortConfig::desk();
    let a = generate_cohort(&c, 5).unwrap();
    let b = generate_cohort(&c, 5).unwrap();
    assert_eq!(a, b);
    let bits = |x: &SyntheticCohort| x.subjects.iter().flat_map(|s| s.timecourse.values().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&generate_cohort(&c, 6).unwrap()));
    assert_eq!(a.subjects.len(), 120);
    assert_eq!(a.labels().iter().filter(|&&y| y == 1).count(), 60);
    assert_eq!(a.subjects[0].id, "sub-0001");
}

/// Per-subject block means of static FNC (off-diagonal entries only).
fn block_means(cohort: &SyntheticCohort, partition: &DomainPartition) -> Vec<Vec<f64>> {
    let n = partition.n_networks();
    let ranges = partition.ranges();
    cohort
        .subjects
        .iter()
        .map(|s| {
            let f = static_fnc(&s.timecourse).unwrap();
            let mut out = Vec::new();
            for a in 0..ranges.len() {
                for b in a..ranges.len() {
                    let mut acc = (0.0, 0);
                    for i in ranges[a].clone() {
                        for j in ranges[b].clone() {
                            if i != j {
                                acc.0 += f[i * n + j];
                                acc.1 += 1;
                            }
                        }
                    }
                    out.push(acc.0 / acc.1 as f64);
                }
            }
            out
        })
        .collect()
}

/// Family-wise p-value of the largest absolute group-mean difference over
/// all blocks, by relabelling.
fn max_stat_permutation_p(blocks: &[Vec<f64>], labels: &[usize], perms: usize, seed: u64) -> f64 {
    let stat = |lab: &[usize]| -> f64 {
        let k = blocks[0].len();
        let mut best = 0.0f64;
        for b in 0..k {
            let (mut s, mut c) = ([0.0; 2], [0usize; 2]);
            for (x, &y) in blocks.iter().zip(lab) {
                s[y] += x[b];
                c[y] += 1;
            }
            best = best.max((s[1] / c[1] as f64 - s[0] / c[0] as f64).abs());
        }
        best
    };
    let observed = stat(labels);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut lab = labels.to_vec();
    let mut exceed = 0;
    for _ in 0..perms {
        lab.shuffle(&mut r);
        if stat(&lab) >= observed {
            exceed += 1;
        }
    }
    (exceed + 1) as f64 / (perms + 1) as f64
}

#[test]
fn null_effect_groups_are_exchangeable() {
    let mut c = CohortConfig::desk();
    c.delta = 0.0;
    c.n_negative = 30;
    c.positive[0].n_subjects = 30;
    let runs = 20;
    let mut clean = 0;
    for run in 0..runs {
        let cohort = generate_cohort(&c, 1000 + run).unwrap();
        let blocks = block_means(&cohort, &c.partition);
        if max_stat_permutation_p(&blocks, &cohort.labels(), 300, run) >= 0.01 {
            clean += 1;
        }
        let table = verify_planted_effect(&cohort, &c.partition).unwrap();
        if run == 0 {
            for (e, se) in table.effect.iter().zip(&table.std_error) {
                assert!(e.abs() <= 3.0 * se + 1e-12, "effect {e} vs se {se}");
            }
        }
    }
    assert!(clean as f64 >= 0.95 * runs as f64, "{clean}/{runs}");
}

#[test]
fn planted_block_effect_is_recovered() {
    let mut c = CohortConfig::desk();
    c.planted_blocks = vec![("CC".into(), "CC".into())];
    c.timepoints = 200;
    let cohort = generate_cohort(&c, 9).unwrap();
    let table = verify_planted_effect(&cohort, &c.partition).unwrap();
    assert_eq!(table.effect.len(), 16);
    let cc = table.get("CC", "CC").unwrap();
    assert!((cc - 0.3).abs() <= 0.08, "CC-CC effect {cc}");
    let largest = table.effect.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    assert_eq!(largest, cc.abs());
}

#[test]
fn graded_subgroups_follow_their_multipliers() {
    let mut c = CohortConfig::desk_graded();
    c.timepoints = 200;
    c.positive = vec![
        stdfnc::synth::Subgroup { name: "weak".into(), n_subjects: 30, multiplier: 0.3 },
        stdfnc::synth::Subgroup { name: "mid".into(), n_subjects: 30, multiplier: 0.6 },
        stdfnc::synth::Subgroup { name: "strong".into(), n_subjects: 30, multiplier: 1.0 },
    ];
    let cohort = generate_cohort(&c, 4).unwrap();
    let blocks = block_means(&cohort, &c.partition);
    // index of the CC-CC entry in the upper-triangle block order
    let d = c.partition.len();
    let cc = c.partition.index_of("CC").unwrap();
    let k = (0..cc).map(|a| d - a).sum::<usize>();
    let mean = |tag: &str| {
        let v: Vec<f64> = cohort.subjects.iter().zip(&blocks).filter(|(s, _)| s.subgroup == tag).map(|(_, b)| b[k]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let base = mean("CN");
    let effects = [mean("weak") - base, mean("mid") - base, mean("strong") - base];
    // ranks of measured effects equal ranks of multipliers: Spearman 1
    assert!(effects[0] < effects[1] && effects[1] < effects[2], "{effects:?}");
}

#[test]
fn generated_subjects_yield_valid_dfnc() {
    let cohort = generate_cohort(&CohortConfig::desk(), 2).unwrap();
    for s in cohort.subjects.iter().take(10) {
        let d = dfnc(&s.timecourse, &WindowSpec::default()).unwrap();
        assert_eq!(d.n_windows(), 51);
        d.check_invariants().unwrap();
    }
}

#[test]
fn infeasible_effect_suggests_smaller_delta() {
    let mut c = CohortConfig::desk();
    c.planted_blocks = vec![("CC".into(), "DM".into())];
    c.delta = 1.0;
    match generate_cohort(&c, 0) {
        Err(e @ Error::InfeasibleEffect { .. }) => assert!(e.to_string().contains("smaller"), "{e}"),
        other => panic!("expected an infeasible-effect error, got {other:?}"),
    }
    let mut bad = CohortConfig::desk();
    bad.planted_blocks = vec![("CC".into(), "XX".into())];
    assert!(generate_cohort(&bad, 0).is_err());
}

#[test]
fn labels_csv_lists_every_subject() {
    let cohort = generate_cohort(&CohortConfig::desk_graded(), 1).unwrap();
    let csv = labels_csv(&cohort);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subject_id,group,subgroup,seed");
    assert_eq!(lines.len(), 121);
    assert!(lines[1].starts_with("sub-0001,CN,CN,"));
    assert!(lines.iter().any(|l| l.contains(",Asym,weak,")));
}

fn min_eig(m: &[f64], n: usize) -> f64 {
    SymmetricEigen::new(DMatrix::from_row_slice(n, n, m)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn repair_yields_unit_diagonal_psd(n in 2usize..12, vals in prop::collection::vec(-1.0f64..1.0, 144)) {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            for j in i + 1..n {
                m[i * n + j] = vals[i * 12 + j];
                m[j * n + i] = vals[i * 12 + j];
            }
        }
        let r = repair_correlation(&m, n).unwrap();
        prop_assert!(min_eig(&r, n) >= -1e-10);
        for i in 0..n {
            prop_assert!((r[i * n + i] - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((r[i * n + j] - r[j * n + i]).abs() < 1e-12);
                prop_assert!(r[i * n + j].abs() <= 1.0 + 1e-12);
            }
        }
    }
}
