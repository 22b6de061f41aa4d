use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unirestore::autograd::{ParamGroup, ParamStore};
use unirestore::config::{Profile, RunConfig};
use unirestore::data::{synthesize_split, ImageTensor, Split, Task};
use unirestore::evaluation::{
    cluster_margin, count_params, dataset_features, export_features, feature_density_kl, histogram,
    kl_divergence, psnr, ssim, SsimWindow, PSNR_CAP,
};
use unirestore::model::{Model, Variant};
use unirestore::nn::{Conv2d, ConvSpec};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
}

fn reference_ssim(a: &ImageTensor, b: &ImageTensor, k: usize) -> f64 {
    let (h, w, c) = a.shape();
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0.0;
    for ch in 0..c {
        for y in 0..=h - k {
            for x in 0..=w - k {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dy in 0..k {
                    for dx in 0..k {
                        xs.push(a.get(y + dy, x + dx, ch));
                        ys.push(b.get(y + dy, x + dx, ch));
                    }
                }
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cxy = xs
                    .iter()
                    .zip(&ys)
                    .map(|(p, q)| (p - mx) * (q - my))
                    .sum::<f64>()
                    / n;
                let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

#[test]
fn ssim_matches_sliding_window_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..5 {
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let got = ssim(&a, &b, SsimWindow::Uniform { size: 8 }).unwrap();
        assert!((got - reference_ssim(&a, &b, 8)).abs() < 1e-6);
        let back = ssim(&b, &a, SsimWindow::Uniform { size: 8 }).unwrap();
        assert!((got - back).abs() < 1e-9);
    }
}

#[test]
fn psnr_cases() {
    let zero = ImageTensor::filled(4, 4, 3, 0.0);
    let half = ImageTensor::filled(4, 4, 3, 0.5);
    assert_eq!(psnr(&zero, &zero).unwrap(), PSNR_CAP);
    assert!((psnr(&zero, &half).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert!(psnr(&zero, &ImageTensor::filled(4, 5, 3, 0.0)).is_err());
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn cluster_margin_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let features: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            if i == j {
                continue;
            }
            let s = cosine(&features[i], &features[j]);
            if labels[i] == labels[j] {
                same.push(s);
            } else {
                diff.push(s);
            }
        }
    }
    let intra = same.iter().sum::<f64>() / same.len() as f64;
    let inter = diff.iter().sum::<f64>() / diff.len() as f64;
    let m = cluster_margin(&features, &labels).unwrap();
    assert!((m.intra - intra).abs() < 1e-12);
    assert!((m.inter - inter).abs() < 1e-12);
    assert!((m.margin - (intra - inter)).abs() < 1e-12);

    let ortho = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ];
    let m = cluster_margin(&ortho, &[0, 0, 1, 1]).unwrap();
    assert_eq!((m.intra, m.inter, m.margin), (1.0, 0.0, 1.0));
    let same = vec![vec![0.3, 0.4]; 4];
    assert!(cluster_margin(&same, &[0, 0, 1, 1]).unwrap().margin.abs() < 1e-12);
    assert!(cluster_margin(&same, &[0, 0, 0, 1]).is_err());
}

#[test]
fn kl_cases() {
    let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    assert!((kl_divergence(&[0.5, 0.5], &[0.9, 0.1]) - expect).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    assert!(feature_density_kl(&v, &v, 32).unwrap().kl.abs() < 1e-9);
    for _ in 0..100 {
        let a: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random::<f64>().powi(2)).collect();
        let (p, q) = (histogram(&a, 0.0, 1.0, 10), histogram(&b, 0.0, 1.0, 10));
        assert!(kl_divergence(&p, &q) >= -1e-12);
    }
    assert!(feature_density_kl(&[], &v, 8).is_err());
}

#[test]
fn exported_features_read_back() {
    let rc = RunConfig::profile(Profile::Ci);
    let model = Model::new(rc.model.clone(), 5).unwrap();
    let samples: Vec<_> = [Task::Noise, Task::Rain]
        .iter()
        .flat_map(|&t| {
            synthesize_split(t, Split::Test, 3, 32, &rc.data.regimes, 5)
                .unwrap()
                .0
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.tsv");
    assert_eq!(
        export_features(&model, &samples, Variant::Full, &path).unwrap(),
        6
    );
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("id\ttask\tdomain\tf0\t"));
    let feats = dataset_features(&model, &samples, Variant::Full).unwrap();
    for ((line, f), p) in lines[1..].iter().zip(&feats).zip(&samples) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], p.id);
        let vals: Vec<f64> = cols[3..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(vals.len(), f.pooled.len());
        for (v, e) in vals.iter().zip(&f.pooled) {
            assert!((v - e).abs() <= 1e-6);
        }
    }
    let again = dir.path().join("again.tsv");
    export_features(&model, &samples, Variant::Full, &again).unwrap();
    assert_eq!(text, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn dense_three_to_four_has_sixteen_params() {
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Conv2d::new(
        &mut store,
        "dense",
        ParamGroup::Restoration,
        ConvSpec::pointwise(3, 4),
        &mut rng,
    );
    assert_eq!(store.count(None), 16);
}

#[test]
fn group_counts_partition_total() {
    for p in [Profile::Ci, Profile::Paper] {
        let model = Model::new(RunConfig::profile(p).model, 0).unwrap();
        let parts: usize = ParamGroup::ALL
            .iter()
            .map(|g| count_params(&model, Some(*g)))
            .sum();
        assert_eq!(parts, count_params(&model, None));
    }
}

#[test]
fn toy_config_matches_hand_count() {
    use unirestore::backbone::{BackboneConfig, BlockKind};
    use unirestore::daam::DaamConfig;
    use unirestore::model::ModelConfig;
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            base_dim: 4,
            levels: 2,
            blocks_per_level: 1,
            block_kind: BlockKind::Conv,
            heads: 1,
            ffn_expansion: 2,
        },
        daam: DaamConfig {
            code_dim: 8,
            num_codes: 8,
            ..DaamConfig::default()
        },
        dam: Default::default(),
    };
    let model = Model::new(cfg, 0).unwrap();
    assert_eq!(count_params(&model, Some(ParamGroup::Restoration)), 8_895);
    assert_eq!(count_params(&model, Some(ParamGroup::Degradation)), 1_545);
    assert_eq!(count_params(&model, Some(ParamGroup::Adaptation)), 860);
    assert_eq!(count_params(&model, None), 11_300);
}
