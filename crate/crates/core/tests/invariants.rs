use filmiqa::film::{modulate, FilmStrength};
use filmiqa::heads::squash;
use filmiqa::metrics::{kendall, pearson, spearman};
use filmiqa::numeric::Tensor;
use filmiqa::pooling::{avg_pool_bins, bin_ranges, max_pool_bins};
use proptest::prelude::*;

fn tokens() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 4usize..40, 1usize..4).prop_flat_map(|(b, p, d)| {
        prop::collection::vec(-5.0f64..5.0, b * p * d).prop_map(move |v| Tensor::from_vec(&[b, p, d], v).unwrap())
    })
}

proptest! {
    #[test]
    fn bins_cover_tokens(p in 4usize..2000, k in prop::sample::select(vec![1usize, 2, 4])) {
        let bins = bin_ranges(p, k).unwrap();
        prop_assert_eq!(bins.first().unwrap().start, 0);
        prop_assert_eq!(bins.last().unwrap().end, p);
        for w in bins.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        let sizes: Vec<usize> = bins.iter().map(|b| b.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn max_dominates_average(t in tokens(), k in prop::sample::select(vec![1usize, 2, 4])) {
        let avg = avg_pool_bins(&t, k).unwrap();
        let max = max_pool_bins(&t, k).unwrap();
        for (a, m) in avg.data().iter().zip(max.values.data()) {
            prop_assert!(m + 1e-12 >= *a);
        }
    }

    #[test]
    fn film_scale_is_bounded(t in tokens(), g in -50.0f64..50.0, s in 0.0f64..1.0) {
        let d = t.shape()[2];
        let out = modulate(&t, &vec![g; d], &vec![0.0; d], FilmStrength::new(s).unwrap()).unwrap();
        for (y, x) in out.data().iter().zip(t.data()) {
            prop_assert!(y.abs() <= x.abs() * (1.0 + s) + 1e-12);
            prop_assert!(y.abs() + 1e-12 >= x.abs() * (1.0 - s));
        }
    }

    #[test]
    fn squash_in_open_interval(u in -30.0f64..30.0, tau in 0.1f64..5.0) {
        // strictly inside (0, 4) until sigma rounds to 1 near |l / tau| = 37
        let y = squash(u * tau, tau);
        prop_assert!(y > 0.0 && y < 4.0);
        prop_assert!(squash(u * tau + 0.5, tau) >= y);
        let far = squash(1e6, tau);
        prop_assert!((0.0..=4.0).contains(&far));
    }

    #[test]
    fn correlations_symmetric_and_bounded(
        xy in prop::collection::vec((0u8..6, 0u8..6), 3..40)
    ) {
        let x: Vec<f64> = xy.iter().map(|p| f64::from(p.0)).collect();
        let y: Vec<f64> = xy.iter().map(|p| f64::from(p.1)).collect();
        for f in [pearson, spearman, kendall] {
            if let (Ok(a), Ok(b)) = (f(&x, &y), f(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_maps(
        xy in prop::collection::vec((0.0f64..4.0, 0.0f64..4.0), 3..40)
    ) {
        let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
        let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&warped, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (kendall(&x, &y), kendall(&warped, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
