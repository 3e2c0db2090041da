mod common;

use common::tiny_spec;
use cpl_harness::synthetic::{gen_synthetic, Synthetic, SyntheticSpec};
use cpl_harness::HarnessError;

/// (label, feature) of seen-class training rows and of test rows.
fn partitions(s: &Synthetic) -> (Vec<(u32, Vec<f32>)>, Vec<(u32, Vec<f32>)>) {
    let pool: std::collections::HashSet<u64> = s.dataset.meta.test_pool.clone().unwrap().into_iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in &s.dataset.archive.records {
        let item = (r.label, r.feature.clone());
        if pool.contains(&r.id) {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    (train, test)
}

/// Multinomial logistic regression by full-batch gradient descent.
struct Probe {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Probe {
    fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Self {
        let d = x[0].len();
        let mut p = Probe {
            w: vec![vec![0.0; d]; classes],
            b: vec![0.0; classes],
        };
        let n = x.len() as f64;
        for _ in 0..500 {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (xi, &yi) in x.iter().zip(y) {
                let probs = p.probs(xi);
                for c in 0..classes {
                    let e = probs[c] - if c == yi { 1.0 } else { 0.0 };
                    gb[c] += e / n;
                    for j in 0..d {
                        gw[c][j] += e * xi[j] / n;
                    }
                }
            }
            for c in 0..classes {
                p.b[c] -= 0.5 * gb[c];
                for j in 0..d {
                    p.w[c][j] -= 0.5 * gw[c][j];
                }
            }
        }
        p
    }

    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs(x);
        (0..p.len()).fold(0, |b, c| if p[c] > p[b] { c } else { b })
    }
}

fn within_chance(acc: f64, classes: usize, n: usize) -> bool {
    let p = 1.0 / classes as f64;
    (acc - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn spurious_dims_alone_fit_training_data_but_not_test_data() {
    let spec = SyntheticSpec {
        sigma: 0.3,
        kappa: 2.0,
        spurious_dims: 8,
        d_v: 32,
        ..SyntheticSpec::default()
    };
    let s = gen_synthetic(&spec).unwrap();
    let d = spec.d_v;
    let tail = |f: &[f32]| f[d - spec.spurious_dims..].iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (train, test) = partitions(&s);
    assert_eq!(train.len(), spec.n_seen * spec.train_per_class);
    assert!(train.iter().all(|(l, _)| (*l as usize) < spec.n_seen));

    let x: Vec<Vec<f64>> = train.iter().map(|(_, f)| tail(f)).collect();
    let y: Vec<usize> = train.iter().map(|(l, _)| *l as usize).collect();
    let probe = Probe::fit(&x, &y, spec.n_seen);
    let train_acc = x.iter().zip(&y).filter(|(xi, &yi)| probe.predict(xi) == yi).count() as f64 / x.len() as f64;
    assert!(train_acc > 0.9, "probe train accuracy {train_acc}");

    // unseen classes would own signature slot `c % s`; test rows carry none
    let slot = |l: u32| l as usize % spec.spurious_dims;
    let unseen: Vec<_> = test.iter().filter(|(l, _)| *l as usize >= spec.n_seen).collect();
    let hits = unseen.iter().filter(|(l, f)| probe.predict(&tail(f)) == slot(*l)).count();
    let unseen_acc = hits as f64 / unseen.len() as f64;
    assert!(within_chance(unseen_acc, spec.n_seen, unseen.len()), "unseen probe accuracy {unseen_acc}");

    let seen: Vec<_> = test.iter().filter(|(l, _)| (*l as usize) < spec.n_seen).collect();
    let hits = seen.iter().filter(|(l, f)| probe.predict(&tail(f)) == *l as usize).count();
    let seen_acc = hits as f64 / seen.len() as f64;
    assert!(within_chance(seen_acc, spec.n_seen, seen.len()), "seen test probe accuracy {seen_acc}");
}

fn moments(rows: &[&Vec<f32>], j: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|f| f[j] as f64).sum::<f64>() / n;
    let var = rows.iter().map(|f| (f[j] as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Largest per-dimension standardized gap between train and test class means.
fn max_mean_gap(spec: &SyntheticSpec) -> (f64, f64) {
    let s = gen_synthetic(spec).unwrap();
    let (train, test) = partitions(&s);
    let (mut gap, mut worst_ratio) = (0.0f64, 1.0f64);
    for c in 0..spec.n_seen as u32 {
        let a: Vec<&Vec<f32>> = train.iter().filter(|(l, _)| *l == c).map(|(_, f)| f).collect();
        let b: Vec<&Vec<f32>> = test.iter().filter(|(l, _)| *l == c).map(|(_, f)| f).collect();
        for j in 0..spec.d_v {
            let (ma, va) = moments(&a, j);
            let (mb, vb) = moments(&b, j);
            let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
            gap = gap.max((ma - mb).abs() / se);
            let r = va / vb;
            worst_ratio = worst_ratio.max(r.max(1.0 / r));
        }
    }
    (gap, worst_ratio)
}

#[test]
fn zero_kappa_makes_train_and_test_identically_distributed() {
    let base = SyntheticSpec {
        n_seen: 2,
        n_unseen: 1,
        train_per_class: 400,
        test_per_class: 400,
        ..tiny_spec(5)
    };
    let (gap, ratio) = max_mean_gap(&SyntheticSpec { kappa: 0.0, ..base.clone() });
    // 2 classes x 16 dims of two-sample z statistics; 4.5 sigma is far past their max
    assert!(gap < 4.5, "mean gap {gap} sigma");
    assert!(ratio < 1.35, "variance ratio {ratio}");
    let (gap, _) = max_mean_gap(&SyntheticSpec { kappa: 2.0, ..base });
    assert!(gap > 50.0, "planted signature not visible: {gap}");
}

#[test]
fn same_seed_same_bytes_other_seed_other_bytes() {
    let a = gen_synthetic(&tiny_spec(3)).unwrap();
    let b = gen_synthetic(&tiny_spec(3)).unwrap();
    let c = gen_synthetic(&tiny_spec(4)).unwrap();
    assert_eq!(a.dataset.archive.to_bytes(), b.dataset.archive.to_bytes());
    assert_eq!(a.dataset.prompts, b.dataset.prompts);
    assert_ne!(a.dataset.archive.to_bytes(), c.dataset.archive.to_bytes());
}

#[test]
fn layout_of_the_benchmark() {
    let spec = tiny_spec(1);
    let s = gen_synthetic(&spec).unwrap();
    let meta = &s.dataset.meta;
    assert_eq!(meta.seen_classes.as_ref().unwrap(), &vec![0, 1, 2, 3]);
    assert_eq!(meta.spurious_dims, Some(spec.spurious_dims));
    assert_eq!(meta.encoder.as_ref(), Some(&spec.encoder));
    assert_eq!(s.dataset.prompts.len(), spec.n_classes());
    let mut names = s.class_names.clone();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), spec.n_classes());
    let (train, test) = partitions(&s);
    assert_eq!(test.len(), spec.n_classes() * spec.test_per_class);
    assert_eq!(train.len(), spec.n_seen * spec.train_per_class);
    for p in &s.prototypes {
        assert!(p[spec.d_v - spec.spurious_dims..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn spec_errors_are_config_errors() {
    for spec in [
        SyntheticSpec { spurious_dims: 16, ..tiny_spec(0) },
        SyntheticSpec { sigma: -1.0, ..tiny_spec(0) },
        SyntheticSpec { n_seen: 8, n_unseen: 8, ..tiny_spec(0) },
    ] {
        assert!(matches!(gen_synthetic(&spec), Err(HarnessError::Config(_))));
    }
}
