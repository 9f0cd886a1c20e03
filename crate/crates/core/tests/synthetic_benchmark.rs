use pyrad_core::data::{make_synthetic_benchmark, SyntheticSpec};
use pyrad_core::metrics::roc_auc;
use pyrad_core::ScoredSample;
use pyrad_tensor::Tensor;

/// Largest variance over all 3×3 windows of any channel.
fn max_local_variance(img: &Tensor<f32>) -> f32 {
    let &[c, h, w] = img.shape() else { panic!("C×H×W expected") };
    let px = |ch: usize, y: usize, x: usize| f64::from(img.data()[(ch * h + y) * w + x]);
    let mut best = 0.0f64;
    for ch in 0..c {
        for y in 0..h - 2 {
            for x in 0..w - 2 {
                let vals: Vec<f64> = (0..9).map(|i| px(ch, y + i / 3, x + i % 3)).collect();
                let mean = vals.iter().sum::<f64>() / 9.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                best = best.max(var);
            }
        }
    }
    best as f32
}

#[test]
fn patch_variance_detector_solves_the_benchmark() {
    for seed in 1..=3 {
        let bench = make_synthetic_benchmark(&SyntheticSpec { seed, ..Default::default() }).unwrap();
        let scored: Vec<ScoredSample> = bench
            .test
            .iter()
            .map(|s| ScoredSample { id: s.id(), score: max_local_variance(&s.pixels), label: s.label })
            .collect();
        let auc = roc_auc(&scored).unwrap();
        assert!(auc > 0.95, "seed {seed}: {auc}");
    }
}

#[test]
fn loading_twice_is_identical_and_in_range() {
    let spec = SyntheticSpec::default();
    let a = make_synthetic_benchmark(&spec).unwrap();
    let b = make_synthetic_benchmark(&spec).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!((a.train.len(), a.test.len()), (64, 64));
    assert!(a.test.iter().all(|s| s.pixels.shape() == [3, 32, 32]));
    assert!(a.train.iter().chain(&a.test).all(|s| s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
}
