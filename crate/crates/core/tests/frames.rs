mod common;

use common::*;
use kvcoreset::kvcore::{expand_frames, frame_centroids, joint_feature};
use kvcoreset::LayerCache;

#[test]
fn centroids_match_per_frame_means() {
    let mut r = rng(41);
    let keys = gaussian_matrix(&mut r, 12, 3);
    let values = gaussian_matrix(&mut r, 12, 2);
    let cache = LayerCache::new(keys.clone(), values.clone(), (0..12).map(|i| i / 4).collect(), (0..12).collect()).unwrap();
    let view = frame_centroids(&cache).unwrap();
    assert_eq!(view.num_frames(), 3);
    for f in 0..3 {
        for (m, c) in [(&keys, &view.centroid_keys), (&values, &view.centroid_values)] {
            for col in 0..m.cols() {
                let mean = (4 * f..4 * f + 4).map(|i| m.row(i)[col]).sum::<f64>() / 4.0;
                assert!((c.row(f)[col] - mean).abs() < 1e-6);
            }
        }
    }
    assert_eq!(expand_frames(&view, &[2, 0]).unwrap(), vec![0, 1, 2, 3, 8, 9, 10, 11]);
    assert!(expand_frames(&view, &[]).unwrap().is_empty());
}

#[test]
fn joint_feature_starts_with_the_key_row() {
    let mut r = rng(42);
    let cache = layer(gaussian_matrix(&mut r, 5, 3), gaussian_matrix(&mut r, 5, 4));
    for i in 0..5 {
        let j = joint_feature(&cache, i).unwrap();
        assert_eq!(&j[..3], cache.keys().row(i));
        assert_eq!(&j[3..], cache.values().row(i));
    }
}
