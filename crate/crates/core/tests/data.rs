use std::path::{Path, PathBuf};

use auxq::data::{self, DatasetSpec, Source, SynthKind};

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

/// Multi-class linear discriminant with a pooled covariance, fit and scored
/// on the same points.
fn lda_accuracy(pts: &[[f64; 2]], labels: &[usize], classes: usize) -> f64 {
    let mut mean = vec![[0.0; 2]; classes];
    let mut count = vec![0.0; classes];
    for (p, &l) in pts.iter().zip(labels) {
        mean[l][0] += p[0];
        mean[l][1] += p[1];
        count[l] += 1.0;
    }
    for (m, n) in mean.iter_mut().zip(&count) {
        m[0] /= n;
        m[1] /= n;
    }
    let mut cov = [[0.0; 2]; 2];
    for (p, &l) in pts.iter().zip(labels) {
        let d = [p[0] - mean[l][0], p[1] - mean[l][1]];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += d[i] * d[j] / (pts.len() - classes) as f64;
            }
        }
    }
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    let score = |p: &[f64; 2], c: usize| {
        let w = [inv[0][0] * mean[c][0] + inv[0][1] * mean[c][1], inv[1][0] * mean[c][0] + inv[1][1] * mean[c][1]];
        p[0] * w[0] + p[1] * w[1] - 0.5 * (mean[c][0] * w[0] + mean[c][1] * w[1])
    };
    let correct = pts
        .iter()
        .zip(labels)
        .filter(|(p, &l)| (0..classes).max_by(|&a, &b| score(p, a).total_cmp(&score(p, b))).unwrap() == l)
        .count();
    correct as f64 / pts.len() as f64
}

#[test]
fn blobs_are_linearly_separable_and_spirals_are_not() {
    for (classes, seed) in [(2, 1), (4, 2), (10, 3)] {
        let (pts, labels) = data::synth_points(SynthKind::Blobs, 2000, classes, seed).unwrap();
        assert_eq!(lda_accuracy(&pts, &labels, classes), 1.0, "{classes} blobs");
        let (pts, labels) = data::synth_points(SynthKind::Spirals, 2000, classes, seed).unwrap();
        let acc = lda_accuracy(&pts, &labels, classes);
        assert!(acc < 0.7, "{classes} spirals: linear accuracy {acc}");
    }
}

#[test]
fn mnist_subset_headers_parse() {
    let d = mnist_dir();
    let train =
        data::load_idx(&d.join("train-images-idx3-ubyte.gz"), &d.join("train-labels-idx1-ubyte.gz"), 10).unwrap();
    let test = data::load_idx(&d.join("t10k-images-idx3-ubyte.gz"), &d.join("t10k-labels-idx1-ubyte.gz"), 10).unwrap();
    for ds in [&train, &test] {
        assert_eq!((ds.channels, ds.height, ds.width), (1, 28, 28));
        let s = ds.stats();
        assert_eq!(s.histogram.iter().sum::<usize>(), ds.len());
        assert!(s.histogram.iter().all(|&h| h > 0));
        assert_eq!((s.min_pixel, s.max_pixel), (0.0, 1.0));
    }
    assert_eq!(train.len(), 7996);
    assert_eq!(test.len(), 2004);
}

#[test]
fn stats_are_stable_across_reloads() {
    let text = r#"{"source": {"kind": "idx",
            "train_images": "train-images-idx3-ubyte.gz", "train_labels": "train-labels-idx1-ubyte.gz",
            "test_images": "t10k-images-idx3-ubyte.gz", "test_labels": "t10k-labels-idx1-ubyte.gz"},
          "train_limit": 500, "downsample": 2}"#;
    let spec: DatasetSpec = serde_json::from_str(text).unwrap();
    let a = spec.load(&mnist_dir()).unwrap();
    let b = spec.load(&mnist_dir()).unwrap();
    assert_eq!(a.train.stats(), b.train.stats());
    assert_eq!(a.test.stats(), b.test.stats());
    assert_eq!(a.train.len(), 500);
    assert_eq!((a.train.height, a.train.width), (14, 14));
}

#[test]
fn synthetic_splits_are_disjoint_draws() {
    let spec = DatasetSpec {
        source: Source::Synthetic { synth: SynthKind::Spirals, n: 64, classes: 2, seed: 9, size: 4, n_test: Some(32) },
        normalization: None,
        augment: Default::default(),
        train_limit: None,
        test_limit: None,
        downsample: None,
        classes: 2,
    };
    let s = spec.load(Path::new(".")).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (64, 32));
    assert_ne!(s.train.image(0), s.test.image(0));
}

#[test]
fn missing_file_names_the_path() {
    let err = data::load_idx(Path::new("/nonexistent/images"), Path::new("/nonexistent/labels"), 10).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/images"), "{err}");
}
