use std::collections::BTreeMap;
use std::path::Path;

use osseon::evalmetrics::dilate_contour;
use osseon::imagecore::{encode_pgm, NUM_CLASSES};
use osseon::synthdata::{
    generate_dataset, generate_phantom, generate_samples, split_assignment, surface_rows, DatasetManifest,
    PhantomSpec, Split,
};
use sha2::{Digest, Sha256};

#[test]
fn same_seed_gives_identical_samples() {
    for class in 0..4u8 {
        let spec = PhantomSpec::new(class, 99);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec::new(class, 100)).unwrap();
        assert_ne!(a.image, c.image);
    }
}

#[test]
fn shadow_is_darker_than_tissue_above() {
    for seed in 0..20u64 {
        let spec = PhantomSpec::new((seed % 4) as u8, seed);
        let s = generate_phantom(&spec).unwrap();
        let mut above = (0.0, 0usize);
        let mut below = (0.0, 0usize);
        for &(r, c) in &s.gt_contour {
            for rr in 0..s.image.rows() {
                let v = s.image.get(rr, c);
                if rr + 3 < r {
                    above = (above.0 + v, above.1 + 1);
                } else if rr > r + 3 {
                    below = (below.0 + v, below.1 + 1);
                }
            }
        }
        assert!(below.0 / (below.1 as f64) < above.0 / (above.1 as f64), "seed {seed}");
    }
}

#[test]
fn noiseless_ridge_peaks_on_the_contour() {
    for class in 0..4u8 {
        let spec = PhantomSpec {
            speckle_sigma: 0.0,
            ..PhantomSpec::new(class, 5)
        };
        let s = generate_phantom(&spec).unwrap();
        for &(r, c) in &s.gt_contour {
            let peak = (0..s.image.rows())
                .max_by(|&a, &b| s.image.get(a, c).total_cmp(&s.image.get(b, c)))
                .unwrap();
            assert!(peak.abs_diff(r) <= 1, "class {class} column {c}: peak {peak}, contour {r}");
        }
    }
}

#[test]
fn mask_pixels_stay_within_half_a_millimetre() {
    for seed in 0..8u64 {
        let s = generate_phantom(&PhantomSpec::new((seed % 4) as u8, seed)).unwrap();
        let sp = s.image.spacing();
        let mut count = 0;
        for r in 0..s.gt_mask.rows() {
            for c in 0..s.gt_mask.cols() {
                if s.gt_mask.get(r, c) == 0.0 {
                    continue;
                }
                assert_eq!(s.gt_mask.get(r, c), 1.0);
                count += 1;
                let d = s
                    .gt_contour
                    .iter()
                    .map(|&(pr, pc)| {
                        let dy = (pr as f64 - r as f64) * sp.row_mm;
                        let dx = (pc as f64 - c as f64) * sp.col_mm;
                        dy.hypot(dx)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= 0.5 + 1e-9, "mask pixel ({r},{c}) is {d} mm away");
            }
        }
        assert!(count > 0);
        assert_eq!(s.gt_mask, dilate_contour(&s.gt_contour, 1.0, sp, 64, 64));
    }
}

/// (mean depth as a fraction of height, sign changes of the curvature).
fn shape_features(spec: &PhantomSpec) -> (f64, f64) {
    let rows = surface_rows(spec).unwrap();
    let n = rows.len() as f64;
    let mean = rows.iter().sum::<f64>() / (n * spec.size as f64);
    let signs: Vec<f64> = rows
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .filter(|d| d.abs() > 1e-9)
        .map(f64::signum)
        .collect();
    let changes = signs.windows(2).filter(|p| p[0] != p[1]).count();
    (mean, changes as f64)
}

#[test]
fn classes_are_separable_by_shape() {
    let specs: Vec<PhantomSpec> = (0..200u64).map(|i| PhantomSpec::new((i % 4) as u8, 1000 + i)).collect();
    let feats: Vec<(f64, f64)> = specs.iter().map(shape_features).collect();
    // depth is compared in units of 5% of the height
    let scaled: Vec<(f64, f64)> = feats.iter().map(|&(d, k)| (d / 0.05, k)).collect();
    let mut centroids = [(0.0, 0.0, 0usize); NUM_CLASSES];
    for (s, &(d, k)) in specs.iter().zip(&scaled) {
        let e = &mut centroids[s.class_id as usize];
        e.0 += d;
        e.1 += k;
        e.2 += 1;
    }
    let centroids: Vec<(f64, f64)> = centroids.iter().map(|&(d, k, n)| (d / n as f64, k / n as f64)).collect();
    for (s, &(d, k)) in specs.iter().zip(&scaled) {
        let nearest = (0..NUM_CLASSES)
            .min_by(|&a, &b| {
                let da = (d - centroids[a].0).powi(2) + (k - centroids[a].1).powi(2);
                let db = (d - centroids[b].0).powi(2) + (k - centroids[b].1).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(nearest, s.class_id as usize, "seed {} features {:?}", s.seed, (d, k));
    }
}

#[test]
fn dataset_is_class_balanced_with_exact_split() {
    let (samples, splits) = generate_samples(8, 32, 3).unwrap();
    let mut per_class = [0; NUM_CLASSES];
    for s in &samples {
        per_class[s.class_id as usize] += 1;
    }
    assert_eq!(per_class, [2; NUM_CLASSES]);
    assert_eq!(splits.len(), 8);

    let split = split_assignment(100, 11);
    assert_eq!(split.iter().filter(|&&s| s == Split::Train).count(), 80);
    assert_eq!(split.iter().filter(|&&s| s == Split::Test).count(), 20);
}

#[test]
fn degenerate_geometry_is_rejected() {
    let spec = PhantomSpec {
        depth_range: (0.9, 0.99),
        ..PhantomSpec::new(1, 0)
    };
    assert!(generate_phantom(&spec).is_err());
    assert!(generate_phantom(&PhantomSpec { size: 16, ..PhantomSpec::new(0, 0) }).is_err());
    assert!(generate_samples(3, 64, 0).is_err());
}

fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, Sha256::digest(std::fs::read(&p).unwrap()).iter().map(|b| format!("{b:02x}")).collect::<String>());
            }
        }
    }
    out
}

#[test]
fn regenerating_a_dataset_reproduces_every_file() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(12, 32, 21, a.path()).unwrap();
    let mb = generate_dataset(12, 32, 21, b.path()).unwrap();
    assert_eq!(ma.entries, mb.entries);
    let da = tree_digest(a.path());
    assert_eq!(da, tree_digest(b.path()));
    assert_eq!(da.len(), 12 * 2 + 2);

    let loaded = DatasetManifest::load(a.path()).unwrap();
    assert_eq!(loaded.entries, ma.entries);
    let first = generate_samples(12, 32, 21).unwrap().0.remove(0);
    let bytes = std::fs::read(a.path().join("images").join("0000.pgm")).unwrap();
    assert_eq!(bytes, encode_pgm(&first.image));
}
