use rand::Rng;

use promptseg::image::ClassMap;
use promptseg::metrics::{aggregate, dsc, fold_report, format_cell, DscReport, MeanStd};
use promptseg::rng;

fn map(h: usize, w: usize, v: &[u8]) -> ClassMap {
    ClassMap::new(h, w, v.to_vec()).unwrap()
}

#[test]
fn unit_cases() {
    let a = map(2, 2, &[1, 1, 0, 0]);
    assert_eq!(dsc(&[a.clone()], &[a.clone()], 1).unwrap(), 1.0);
    let not_a = map(2, 2, &[0, 0, 1, 1]);
    assert_eq!(dsc(&[a.clone()], &[not_a], 1).unwrap(), 0.0);
    // Top row vs left column.
    let col = map(2, 2, &[1, 0, 1, 0]);
    assert_eq!(dsc(&[a], &[col], 1).unwrap(), 0.5);
    let empty = map(2, 2, &[0; 4]);
    assert_eq!(dsc(&[empty.clone()], &[empty], 1).unwrap(), 1.0);
}

#[test]
fn counts_are_pooled_over_the_fold() {
    let p = [map(1, 2, &[1, 0]), map(1, 2, &[0, 0])];
    let g = [map(1, 2, &[1, 0]), map(1, 2, &[1, 0])];
    // TP 1, FN 1, FP 0 over both images.
    assert!((dsc(&p, &g, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

fn random_pair(case: u64) -> (Vec<ClassMap>, Vec<ClassMap>, usize) {
    let mut r = rng::stream(5, "metric", case);
    let c = r.gen_range(2..5);
    let imgs = r.gen_range(1..4);
    let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
    let mut gen = |_| map(h, w, &(0..h * w).map(|_| r.gen_range(0..c as u8)).collect::<Vec<_>>());
    let p: Vec<ClassMap> = (0..imgs).map(&mut gen).collect();
    let g: Vec<ClassMap> = (0..imgs).map(&mut gen).collect();
    (p, g, c)
}

#[test]
fn matches_counting_oracle_and_is_symmetric() {
    for case in 0..100 {
        let (p, g, c) = random_pair(case);
        for class in 0..c as u8 {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (a, b) in p.iter().zip(&g) {
                for (&x, &y) in a.labels().iter().zip(b.labels()) {
                    match (x == class, y == class) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        _ => {}
                    }
                }
            }
            let want = if tp + fp + fneg == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
            let got = dsc(&p, &g, class).unwrap();
            assert!((got - want).abs() < 1e-12);
            assert_eq!(got, dsc(&g, &p, class).unwrap());
            assert!((0.0..=1.0).contains(&got));
        }
    }
}

#[test]
fn class_permutation_permutes_scores() {
    for case in 0..100 {
        let (p, g, c) = random_pair(case);
        let perm: Vec<u8> = (0..c as u8).rev().collect();
        let remap = |ms: &[ClassMap]| -> Vec<ClassMap> {
            ms.iter()
                .map(|m| map(m.height(), m.width(), &m.labels().iter().map(|&l| perm[l as usize]).collect::<Vec<_>>()))
                .collect()
        };
        let base = fold_report(&p, &g, c).unwrap();
        let moved = fold_report(&remap(&p), &remap(&g), c).unwrap();
        for k in 0..c {
            assert_eq!(moved.per_class[perm[k] as usize], base.per_class[k]);
        }
        assert!((moved.average - base.average).abs() < 1e-15);
    }
}

#[test]
fn aggregate_mean_and_population_std() {
    let folds: Vec<DscReport> = [0.80, 0.82, 0.84].iter().map(|&v| DscReport::from_per_class(vec![v, v])).collect();
    let s = aggregate(&folds).unwrap();
    assert!((s.average.mean - 0.82).abs() < 1e-12);
    assert!((s.average.std - 0.016_329_931_618_554_5).abs() < 1e-12);
    let mut rev = folds.clone();
    rev.reverse();
    let r = aggregate(&rev).unwrap();
    assert!((r.average.mean - s.average.mean).abs() < 1e-15);
    assert!((r.average.std - s.average.std).abs() < 1e-15);
    assert_eq!(aggregate(&folds[..1]).unwrap().average.std, 0.0);
    assert!(aggregate(&[]).is_err());
    let odd = DscReport::from_per_class(vec![0.5, 0.5, 0.5]);
    assert!(aggregate(&[folds[0].clone(), odd]).is_err());
}

#[test]
fn table_style_cells() {
    assert_eq!(format_cell(MeanStd { mean: 0.8547, std: 0.0008 }), "85.47±0.08");
}
