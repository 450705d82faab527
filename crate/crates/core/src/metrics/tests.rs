use super::*;
use crate::data::{AttributeRule, RuleShape};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
}

fn random_cov(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d + 1, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose()
}

#[test]
fn stats_of_plus_minus_unit_rows() {
    let s = gaussian_stats(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(s.mean.as_slice(), &[0.0, 0.0, 0.0]);
    assert_eq!(s.cov, DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 0.0, 0.0])));
    let same = gaussian_stats(&[vec![0.5, -2.0], vec![0.5, -2.0]]).unwrap();
    assert_eq!(same.cov, DMatrix::zeros(2, 2));
    assert_eq!(same.mean.as_slice(), &[0.5, -2.0]);
    assert!(matches!(gaussian_stats(&[vec![1.0]]), Err(Error::Usage(_))));
}

#[test]
fn stats_mean_is_column_mean() {
    let rows = vec![vec![1.0, 4.0], vec![2.0, 5.0], vec![6.0, -3.0]];
    let s = gaussian_stats(&rows).unwrap();
    assert_eq!(s.mean.as_slice(), &[3.0, 2.0]);
    // var of {1,2,6}: mean 3, squares 4+1+9 over 2
    assert!((s.cov[(0, 0)] - 7.0).abs() < 1e-12);
}

#[test]
fn fid_analytic_cases() {
    let a = stats(&[0.3, -0.1], &[2.0, 0.5, 0.5, 1.0]);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    let i = [1.0, 0.0, 0.0, 1.0];
    let v = fid(&stats(&[0.0, 0.0], &i), &stats(&[2.0, 0.0], &i)).unwrap();
    assert!((v - 4.0).abs() <= 1e-6);
    let v = fid(&stats(&[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]), &stats(&[0.0, 0.0], &i)).unwrap();
    assert!((v - 2.0).abs() <= 1e-6);
}

#[test]
fn fid_two_by_two_closed_form() {
    // for a 2x2 product with non-negative eigenvalues,
    // Tr(M^½) = sqrt(Tr M + 2 sqrt(det M))
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let (ca, cb) = (random_cov(&mut rng, 2), random_cov(&mut rng, 2));
        let ma = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let mb = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let m = &ca * &cb;
        let cross = (m.trace() + 2.0 * m.determinant().max(0.0).sqrt()).sqrt();
        let want = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
        let a = GaussianStats::new(ma, ca).unwrap();
        let b = GaussianStats::new(mb, cb).unwrap();
        let got = fid(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "{got} vs {want}");
        assert!((got - fid(&b, &a).unwrap()).abs() <= 1e-8);
        assert!(got >= -1e-6);
    }
}

#[test]
fn fid_rejects_indefinite_covariance() {
    let bad = GaussianStats {
        mean: DVector::zeros(2),
        cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
    };
    let ok = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
    assert!(matches!(fid(&bad, &ok), Err(Error::Numeric(_))));
    assert!(matches!(fid(&ok, &bad), Err(Error::Numeric(_))));
    assert!(GaussianStats::new(bad.mean.clone(), bad.cov.clone()).is_err());
    assert!(fid(&ok, &stats(&[0.0], &[1.0])).is_err());
}

#[test]
fn fid_of_matches_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let proj = RandomProjection::new(12, 4, 9);
    let a: Vec<Tensor> = (0..20).map(|_| Tensor::randn(&[3, 2, 2], &mut rng)).collect();
    let b: Vec<Tensor> = (0..20).map(|_| Tensor::randn(&[3, 2, 2], &mut rng).map(|v| v + 0.5)).collect();
    let ea: Vec<Vec<f64>> = a.iter().map(|x| proj.embed(x).unwrap()).collect();
    let eb: Vec<Vec<f64>> = b.iter().map(|x| proj.embed(x).unwrap()).collect();
    let direct = fid(&gaussian_stats(&ea).unwrap(), &gaussian_stats(&eb).unwrap()).unwrap();
    assert_eq!(fid_of(&proj, &a, &b).unwrap(), direct);
    assert!(fid_of(&proj, &a, &a).unwrap().abs() <= 1e-6);
}

#[test]
fn random_projection_is_seeded_and_linear() {
    let p = RandomProjection::new(4, 3, 5);
    let q = RandomProjection::new(4, 3, 5);
    let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]);
    assert_eq!(p.embed(&x).unwrap(), q.embed(&x).unwrap());
    let twice = p.embed(&x.map(|v| 2.0 * v)).unwrap();
    for (a, b) in twice.iter().zip(p.embed(&x).unwrap()) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
    assert!(p.embed(&Tensor::zeros(&[5])).is_err());
}

#[test]
fn diversity_hand_cases() {
    let t = |v: f64| Tensor::full(&[1, 2, 2], v);
    let same = vec![vec![t(0.3), t(0.3), t(0.3)]];
    assert_eq!(diversity(&same, &PixelL1).unwrap().mean, 0.0);
    let pair = vec![vec![t(0.0), t(0.5)]];
    assert_eq!(diversity(&pair, &PixelL1).unwrap().mean, 0.5);
    // pairs: |0-1| = 1, |0-3| = 3, |1-3| = 2
    let three = vec![vec![t(0.0), t(1.0), t(3.0)]];
    let s = diversity(&three, &PixelL1).unwrap();
    assert!((s.mean - 2.0).abs() < 1e-15);
    assert_eq!(s.std, 0.0);
    let shuffled = vec![vec![t(3.0), t(0.0), t(1.0)]];
    assert_eq!(diversity(&shuffled, &PixelL1).unwrap(), s);
    // two inputs with means 2 and 0.5
    let both = vec![three[0].clone(), pair[0].clone()];
    let s = diversity(&both, &PixelL1).unwrap();
    assert!((s.mean - 1.25).abs() < 1e-15);
    assert!((s.std - 0.75).abs() < 1e-15);
    assert!(matches!(diversity(&[vec![t(0.0)]], &PixelL1), Err(Error::Usage(_))));
}

fn mask(labels: &[u8], classes: usize) -> SemanticMask {
    SemanticMask::from_labels(classes, 4, 4, labels.to_vec()).unwrap()
}

#[test]
fn miou_hand_cases() {
    let left: Vec<u8> = (0..16).map(|p| (p % 4 >= 2) as u8).collect();
    let top: Vec<u8> = (0..16).map(|p| (p / 4 >= 2) as u8).collect();
    // each class: 4 shared cells over a union of 12
    let v = miou(&mask(&left, 3), &mask(&top, 3)).unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(miou(&mask(&left, 3), &mask(&left, 3)).unwrap(), 1.0);
    assert_eq!(miou(&mask(&[0; 16], 2), &mask(&[1; 16], 2)).unwrap(), 0.0);
    // class 2 appears once in one mask only: (15/16 + 0) / 2
    let mut one = [0u8; 16];
    one[5] = 2;
    assert!((miou(&mask(&one, 3), &mask(&[0; 16], 3)).unwrap() - 15.0 / 32.0).abs() < 1e-15);
    let other = SemanticMask::from_labels(3, 2, 8, left.clone()).unwrap();
    assert!(miou(&mask(&left, 3), &other).is_err());
}

#[test]
fn miou_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let a: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let (a, b) = (mask(&a, 3), mask(&b, 3));
        let v = miou(&a, &b).unwrap();
        assert_eq!(v, miou(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&v));
    }
}

/// Brute force: every positive contributes `1/P` recall at its own score,
/// weighted by the best precision over every threshold at or below it.
fn ap_oracle(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let p = truths.iter().filter(|&&t| t).count();
    if p == 0 || p == truths.len() {
        return None;
    }
    let precision_at = |t: f64| {
        let taken = scores.iter().filter(|&&s| s >= t).count();
        let tp = scores.iter().zip(truths).filter(|(&s, &y)| s >= t && y).count();
        tp as f64 / taken as f64
    };
    let mut ap = 0.0;
    for (i, &y) in truths.iter().enumerate() {
        if y {
            let best = scores
                .iter()
                .filter(|&&t| t <= scores[i])
                .map(|&t| precision_at(t))
                .fold(0.0, f64::max);
            ap += best / p as f64;
        }
    }
    Some(ap)
}

fn f1_oracle(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
    let tp = pred.iter().zip(truths).filter(|(&a, &b)| a && b).count() as f64;
    let predicted = pred.iter().filter(|&&a| a).count() as f64;
    let actual = truths.iter().filter(|&&b| b).count() as f64;
    if predicted + actual == 0.0 {
        return None;
    }
    Some(2.0 * tp / (predicted + actual))
}

#[test]
fn ap_f1_matches_enumeration_on_all_small_tables() {
    let levels = [0.2, 0.5, 0.8];
    for n in 1..=8usize {
        let patterns = 3usize.pow(n as u32);
        for sp in 0..patterns {
            let mut k = sp;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v = levels[k % 3];
                    k /= 3;
                    v
                })
                .collect();
            for tb in 0..1u32 << n {
                let truths: Vec<bool> = (0..n).map(|i| tb >> i & 1 == 1).collect();
                let got = ap_f1(&scores, &truths).unwrap();
                let want = ap_oracle(&scores, &truths);
                match (got.ap, want) {
                    (None, None) => {}
                    (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "{scores:?} {truths:?}: {g} vs {w}"),
                    other => panic!("{scores:?} {truths:?}: {other:?}"),
                }
                assert_eq!(got.f1, f1_oracle(&scores, &truths));
            }
        }
    }
}

#[test]
fn ap_f1_named_cases() {
    let truths = [true, false, true, false, false];
    let perfect = [1.0, 0.0, 1.0, 0.0, 0.0];
    assert_eq!(ap_f1(&perfect, &truths).unwrap(), ApF1 { ap: Some(1.0), f1: Some(1.0) });
    let inverted = perfect.map(|s| 1.0 - s);
    let r = ap_f1(&inverted, &truths).unwrap();
    assert!((r.ap.unwrap() - 0.4).abs() < 1e-15);
    assert_eq!(ap_f1(&[0.9, 0.1], &[true, true]).unwrap().ap, None);
    assert!(ap_f1(&[0.5], &[true, false]).is_err());
    assert!(ap_f1(&[f64::NAN], &[true]).is_err());
}

/// Precision and recall at each distinct score, counted directly.
fn curve_oracle(scores: &[f64], truths: &[bool]) -> Vec<(f64, f64, f64)> {
    let p = truths.iter().filter(|&&t| t).count() as f64;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts.iter()
        .map(|&t| {
            let taken = scores.iter().filter(|&&s| s >= t).count() as f64;
            let tp = scores.iter().zip(truths).filter(|(&s, &y)| s >= t && y).count() as f64;
            (t, tp / taken, tp / p)
        })
        .collect()
}

#[test]
fn pr_curve_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
        let truths: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let got = pr_curve(&scores, &truths).unwrap();
        if !truths.contains(&true) {
            assert!(got.is_none());
            continue;
        }
        let c = got.unwrap();
        let want = curve_oracle(&scores, &truths);
        assert_eq!(c.thresholds.len(), want.len());
        for (k, (t, p, r)) in want.into_iter().enumerate() {
            assert_eq!(c.thresholds[k], t);
            assert!((c.precision[k] - p).abs() < 1e-15);
            assert!((c.recall[k] - r).abs() < 1e-15);
        }
    }
}

#[test]
fn pr_curve_named_cases() {
    let c = pr_curve(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap().unwrap();
    assert_eq!(c.thresholds, [0.9, 0.8, 0.7, 0.6]);
    assert_eq!(c.precision, [1.0, 0.5, 2.0 / 3.0, 0.5]);
    assert_eq!(c.recall, [0.5, 0.5, 1.0, 1.0]);
    assert!((c.average_precision() - 5.0 / 6.0).abs() < 1e-15);

    let perfect = pr_curve(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap().unwrap();
    let full = perfect.recall.iter().position(|&r| r == 1.0).unwrap();
    assert!(perfect.precision[..=full].iter().all(|&p| p == 1.0));
    assert!(pr_curve(&[0.3, 0.2], &[false, false]).unwrap().is_none());
}

#[test]
fn curves_export_marks_absent_entries() {
    let tables = vec![
        ScoreTable {
            manipulation: "add_hat".into(),
            attribute: "hat".into(),
            scores: vec![0.9, 0.1],
            truths: vec![true, false],
        },
        ScoreTable {
            manipulation: "add_hat".into(),
            attribute: "bald".into(),
            scores: vec![0.4, 0.2],
            truths: vec![false, false],
        },
    ];
    let entries = pr_curves(&tables).unwrap();
    let mut out = Vec::new();
    write_curves(&entries, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "manipulation,attribute,threshold,precision,recall");
    assert_eq!(lines[1], "add_hat,hat,0.9,1,1");
    assert_eq!(lines[2], "add_hat,hat,0.1,0.5,1");
    assert_eq!(lines[3], "add_hat,bald,NA,NA,NA");
}

fn table(rows: &[(&str, [f64; 3])]) -> PredictionTable {
    let mut t = PredictionTable::new(vec!["hat".into()]);
    for (id, pose) in rows {
        t.push(PredictionRow {
            id: id.to_string(),
            scores: vec![0.5],
            pose: *pose,
        })
        .unwrap();
    }
    t
}

#[test]
fn pose_rmse_cases() {
    let a = table(&[("a", [1.0, 2.0, 3.0]), ("b", [0.0, -1.0, 10.0])]);
    assert_eq!(pose_rmse(&a, &a).unwrap(), [0.0; 3]);
    let shifted = table(&[("b", [0.0, -1.0, 13.0]), ("a", [1.0, 2.0, 6.0])]);
    assert_eq!(pose_rmse(&shifted, &a).unwrap(), [0.0, 0.0, 3.0]);
    // roll errors 1 and 3
    let c = table(&[("a", [2.0, 2.0, 3.0]), ("b", [3.0, -1.0, 10.0])]);
    let r = pose_rmse(&c, &a).unwrap();
    assert!((r[0] - 5f64.sqrt()).abs() < 1e-15);
    let other = table(&[("a", [0.0; 3]), ("z", [0.0; 3])]);
    assert!(matches!(pose_rmse(&other, &a), Err(Error::Usage(_))));
    let short = table(&[("a", [0.0; 3])]);
    assert!(matches!(pose_rmse(&short, &a), Err(Error::Usage(_))));
}

#[test]
fn prediction_table_csv_round_trip() {
    let mut t = PredictionTable::new(vec!["hat".into(), "eyeglasses".into()]);
    t.push(PredictionRow {
        id: "toy000001".into(),
        scores: vec![0.25, 1.0],
        pose: [-3.5, 0.0, 12.125],
    })
    .unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("id,hat,eyeglasses,roll,pitch,yaw\n"));
    assert_eq!(PredictionTable::read_csv(&buf[..]).unwrap(), t);
    assert_eq!(t.column("eyeglasses").unwrap(), [1.0]);

    assert!(PredictionTable::read_csv("name,hat,roll,pitch,yaw\na,0,0,0,0\n".as_bytes()).is_err());
    assert!(PredictionTable::read_csv("id,hat,roll,pitch,yaw\na,1.5,0,0,0\n".as_bytes()).is_err());
    assert!(PredictionTable::read_csv("id,hat,roll,pitch,yaw\na,1,0,0,0\na,0,0,0,0\n".as_bytes()).is_err());
}

#[test]
fn toy_predictor_scores_and_pose() {
    let p = ToyPredictor {
        rules: vec![AttributeRule {
            name: "eyeglasses".into(),
            region: 3,
            shape: RuleShape::Bar,
            presence: 0.5,
        }],
        min_pixels: 2,
    };
    // a centred 2x2 head block on an 4x4 grid, plus two glasses pixels
    let mut labels = [0u8; 16];
    for p in [5, 6, 9, 10] {
        labels[p] = 1;
    }
    labels[0] = 3;
    labels[3] = 3;
    let (scores, pose) = p.predict(&mask(&labels, 4), None).unwrap();
    assert_eq!(scores, [1.0]);
    assert_eq!(pose, [0.0, 0.0, 0.0]);
    // head shifted to the right edge looks fully turned
    let mut right = [0u8; 16];
    for p in [3, 7, 11, 15] {
        right[p] = 1;
    }
    let (scores, pose) = p.predict(&mask(&right, 4), None).unwrap();
    assert_eq!(scores, [0.0]);
    assert!((pose[2] - 45.0).abs() < 1e-12);
    // a vertical line has its principal axis at 90 degrees
    assert!((pose[0].abs() - 90.0).abs() < 1e-9);
    let t = p.table(&[("x".into(), &mask(&right, 4), None)]).unwrap();
    assert_eq!(t.attributes, ["eyeglasses"]);
}
