use lowdose::dosesim::{
    drf_class, generate_dataset, generate_phantom, normalize, read_dataset, simulate_low_dose, write_dataset,
    DatasetPlan, PhantomSpec, Split, DRF_LEVELS,
};
use lowdose::tensor::Rng;
use lowdose::Tensor;

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn error_grows_with_dose_reduction() {
    let spec = PhantomSpec::default();
    let kappa = DatasetPlan::default().counts_scale;
    let mut totals = [0f64; 5];
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let y = generate_phantom(&spec, &mut rng).unwrap();
        for (k, &drf) in DRF_LEVELS.iter().enumerate() {
            let x = simulate_low_dose(&y, drf, kappa, &mut rng.split(drf as u64)).unwrap();
            totals[k] += mse(&x, &y) / 50.0;
        }
    }
    for k in 1..5 {
        assert!(totals[k] > totals[k - 1], "{totals:?}");
    }
    // Var(x) = y·drf/κ per voxel, so the mean error is close to linear in DRF.
    let ratio = totals[4] / totals[0];
    assert!((ratio / 25.0 - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn variance_at_drf_100_exceeds_drf_4() {
    let y = Tensor::from_fn(vec![1, 1, 32, 32, 32], |_| 2.0);
    let var = |drf| {
        let x = simulate_low_dose(&y, drf, 100.0, &mut Rng::new(drf as u64)).unwrap();
        let m = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        x.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (low, high) = (var(4), var(100));
    assert!(high > 10.0 * low, "{low} {high}");
}

#[test]
fn default_plan_is_balanced_and_consistent() {
    let data = generate_dataset(&DatasetPlan { seed: 7, ..DatasetPlan::default() }).unwrap();
    let m = &data.manifest;
    assert_eq!(
        [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).len()),
        [64, 16, 16]
    );
    assert_eq!(m.volumes.iter().map(|v| v.low_dose.len()).sum::<usize>(), 480);
    for v in 0..m.volumes.len() {
        for &drf in &DRF_LEVELS {
            let p = data.normalized_pair(v, drf).unwrap();
            assert_eq!(p.y_c, drf_class(drf).unwrap());
            assert_eq!(p.x.shape(), p.y_s.shape());
            assert!(p.x.data().iter().chain(p.y_s.data()).all(|&t| (0.0..=1.0).contains(&t)));
        }
    }
    let peak = data.standard.iter().flat_map(|t| t.data()).fold(0f32, |a, &b| a.max(b));
    assert_eq!(m.max_intensity, peak as f64);
    assert_eq!(normalize(&data.standard[0], m.max_intensity).unwrap(), data.normalized_pair(0, 4).unwrap().y_s);
}

#[test]
fn written_dataset_reads_back_identically() {
    let plan = DatasetPlan {
        train: 2,
        val: 1,
        test: 1,
        seed: 3,
        ..DatasetPlan::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&plan).unwrap();
    write_dataset(&data, tmp.path()).unwrap();
    assert_eq!(read_dataset(tmp.path()).unwrap(), data);
    assert_eq!(generate_dataset(&plan).unwrap(), data);
    let other = generate_dataset(&DatasetPlan { seed: 4, ..plan }).unwrap();
    assert_ne!(other.standard, data.standard);
}
