use std::path::PathBuf;

use colt::datasets::{load_idx, parse_idx, partition_by_class, synthetic_blobs, BlobSpec, DataError, Dataset, Split};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn idx_fixture_loads() {
    let d = load_idx(&fixture("two-images.idx3"), &fixture("two-labels.idx1")).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.shape(), [1, 2, 2]);
    assert_eq!(d.labels(), [1, 0]);
    assert_eq!(d.image(0), [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert_eq!(d.image(1), [1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
}

#[test]
fn idx_count_mismatch() {
    let err = load_idx(&fixture("two-images.idx3"), &fixture("three-labels.idx1")).unwrap_err();
    assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 3 }), "{err}");
}

#[test]
fn idx_bad_magic_and_truncation() {
    let images = std::fs::read(fixture("two-images.idx3")).unwrap();
    let labels = std::fs::read(fixture("two-labels.idx1")).unwrap();

    let mut bad = images.clone();
    bad[..4].copy_from_slice(&0xDEAD_BEEFu32.to_be_bytes());
    let err = parse_idx(&bad, &labels, "img", "lbl").unwrap_err();
    assert!(matches!(err, DataError::BadMagic { found: 0xDEAD_BEEF, .. }), "{err}");

    let err = parse_idx(&images[..images.len() - 1], &labels, "img", "lbl").unwrap_err();
    assert!(matches!(err, DataError::Truncated { .. }), "{err}");

    let err = load_idx(&fixture("missing.idx3"), &fixture("two-labels.idx1")).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }), "{err}");
}

/// One-hot least-squares linear classifier (with bias), solved in f64 by
/// Cholesky on the ridge-regularized normal equations.
fn least_squares_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.image(0).len() + 1;
    let k = train.num_classes();
    let row = |ds: &Dataset, i: usize| -> Vec<f64> {
        let mut r: Vec<f64> = ds.image(i).iter().map(|&v| f64::from(v)).collect();
        r.push(1.0);
        r
    };
    let mut a = vec![0.0f64; d * d];
    let mut b = vec![0.0f64; d * k];
    for i in 0..train.len() {
        let x = row(train, i);
        for p in 0..d {
            for q in 0..d {
                a[p * d + q] += x[p] * x[q];
            }
            b[p * k + train.labels()[i]] += x[p];
        }
    }
    for p in 0..d {
        a[p * d + p] += 1e-3;
    }
    // Cholesky: a = L Lᵀ, stored in the lower triangle.
    for j in 0..d {
        let mut s = a[j * d + j];
        for p in 0..j {
            s -= a[j * d + p] * a[j * d + p];
        }
        let ljj = s.sqrt();
        a[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= a[i * d + p] * a[j * d + p];
            }
            a[i * d + j] = s / ljj;
        }
    }
    for c in 0..k {
        let mut y: Vec<f64> = (0..d).map(|p| b[p * k + c]).collect();
        for i in 0..d {
            for p in 0..i {
                y[i] -= a[i * d + p] * y[p];
            }
            y[i] /= a[i * d + i];
        }
        for i in (0..d).rev() {
            for p in i + 1..d {
                y[i] -= a[p * d + i] * y[p];
            }
            y[i] /= a[i * d + i];
        }
        for (p, v) in y.into_iter().enumerate() {
            b[p * k + c] = v;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = row(test, i);
            let scores: Vec<f64> = (0..k).map(|c| (0..d).map(|p| x[p] * b[p * k + c]).sum()).collect();
            let best = (0..k).max_by(|&u, &v| scores[u].total_cmp(&scores[v])).unwrap();
            best == test.labels()[i]
        })
        .count();
    100.0 * correct as f64 / test.len() as f64
}

#[test]
fn linear_classifier_separates_three_sigma_blobs() {
    for seed in 0..3 {
        let spec = BlobSpec {
            separation: 3.0,
            ..BlobSpec::new(8, 100, [1, 16, 16], seed)
        };
        let data = synthetic_blobs(&spec).unwrap();
        let acc = least_squares_accuracy(&data.train, &data.test);
        assert!(acc > 90.0, "seed {seed}: {acc}%");
    }
}

#[test]
fn blob_values_are_pixels() {
    let data = synthetic_blobs(&BlobSpec::new(3, 10, [2, 5, 7], 4)).unwrap();
    assert_eq!(data.train.len() + data.test.len(), 30);
    assert_eq!(data.train.split(), Split::Train);
    assert_eq!(data.test.split(), Split::Test);
    for i in 0..data.train.len() {
        assert!(data.train.image(i).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn labelled(classes: usize, counts: &[usize]) -> Dataset {
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c % classes, n))
        .collect();
    let images = (0..labels.len()).map(|i| i as f32).collect();
    Dataset::new(images, [1, 1, 1], labels, classes, Split::Train).unwrap()
}

proptest! {
    #[test]
    fn partitions_are_disjoint_and_cover(
        classes in 2usize..=64,
        counts in proptest::collection::vec(0usize..4, 64),
        seed in any::<u64>(),
    ) {
        let d = labelled(classes, &counts[..classes]);
        let pair = partition_by_class(&d, seed).unwrap();
        let [a, b] = &pair.classes;
        prop_assert_eq!(a.len(), classes.div_ceil(2));
        prop_assert_eq!(b.len(), classes / 2);
        let mut all: Vec<usize> = a.iter().chain(b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
        prop_assert_eq!(pair.first.len() + pair.second.len(), d.len());
        prop_assert_eq!(pair.first.num_classes(), a.len());
        prop_assert_eq!(pair.second.num_classes(), b.len());

        // Every instance lands in exactly one half with its remapped label;
        // image values are unique ids, so they identify instances.
        let mut seen = vec![0u32; d.len()];
        for (half, part) in [&pair.first, &pair.second].into_iter().enumerate() {
            for i in 0..part.len() {
                let id = part.image(i)[0] as usize;
                seen[id] += 1;
                prop_assert_eq!(pair.remap(d.labels()[id]), Some((half, part.labels()[i])));
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }
}
