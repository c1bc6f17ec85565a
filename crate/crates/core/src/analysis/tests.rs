use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::geom::{Aabb, Vec3};
use crate::scene::{generate_city, urban_classes, CityParams, MeshBuilder};

fn bounds() -> Aabb {
    Aabb {
        min: Vec3::new(0.0, 0.0, 0.0),
        max: Vec3::new(100.0, 100.0, 20.0),
    }
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn model(k: usize, seed: u64) -> ModelParams {
    let meta = ModelMeta::new(names(k), BinSpec::categorical(k), Normalizer::new(&bounds())).unwrap();
    ModelParams::init(seed, meta)
}

fn random_samples(n: usize, k: usize, seed: u64) -> Vec<ViewSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            ViewSample {
                viewpoint: Viewpoint::new(
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..20.0),
                    rng.gen_range(0.0..6.28),
                    rng.gen_range(-1.5..1.5),
                ),
                m_gt: ThematicDistribution(raw.iter().map(|v| v / s).collect()),
            }
        })
        .collect()
}

#[test]
fn latents_are_per_viewpoint_and_bounded() {
    let params = model(7, 1);
    let a = Viewpoint::new(10.0, 20.0, 5.0, 1.0, 0.1);
    let b = Viewpoint::new(70.0, 30.0, 2.0, 4.0, -0.4);
    let ab = latent_codes(&params, &[a, b, a]).unwrap();
    let ba = latent_codes(&params, &[b, a]).unwrap();
    assert_eq!(ab[0], ab[2]);
    assert_eq!(ab[0], ba[1]);
    assert_eq!(ab[1], ba[0]);
    assert_eq!(ab[0].len(), LATENT);
    assert!(ab.iter().flatten().all(|v| v.abs() < 1.0));
    assert!(latent_codes(&params, &[]).is_err());
}

#[test]
fn rank_one_latents_project_onto_a_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dir: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let latents: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let t: f64 = rng.gen_range(-2.0..2.0);
            base.iter().zip(&dir).map(|(b, d)| b + t * d).collect()
        })
        .collect();
    let xy = project_2d(&latents, Projection::PrincipalComponents).unwrap();
    let mean = xy.iter().map(|p| p[1]).sum::<f64>() / xy.len() as f64;
    let var = xy.iter().map(|p| (p[1] - mean).powi(2)).sum::<f64>() / xy.len() as f64;
    assert!(var < 1e-9, "{var}");
    assert!(xy.iter().map(|p| p[0].abs()).fold(0.0, f64::max) > 1.0);
}

#[test]
fn principal_axes_are_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let latents: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..128).map(|i| rng.gen_range(-1.0..1.0) * (1.0 + i as f64 / 32.0)).collect())
        .collect();
    let p = Projector::fit(&latents, Projection::PrincipalComponents).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    assert!((dot(&p.axes[0], &p.axes[0]) - 1.0).abs() < 1e-8);
    assert!((dot(&p.axes[1], &p.axes[1]) - 1.0).abs() < 1e-8);
    assert!(dot(&p.axes[0], &p.axes[1]).abs() < 1e-8);
    assert!(p.variance[0] >= p.variance[1]);
}

/// Eigen-decomposition of a symmetric 3×3 matrix from its characteristic
/// polynomial, eigenvalues descending.
fn eig3(c: [[f64; 3]; 3]) -> Vec<(f64, [f64; 3])> {
    let tr = c[0][0] + c[1][1] + c[2][2];
    let minors = c[0][0] * c[1][1] - c[0][1] * c[1][0] + c[0][0] * c[2][2] - c[0][2] * c[2][0]
        + c[1][1] * c[2][2]
        - c[1][2] * c[2][1];
    let det = c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1])
        - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0]);
    // λ³ − tr λ² + minors λ − det = 0, depressed with λ = t + tr/3
    let p = minors - tr * tr / 3.0;
    let q = -2.0 * tr.powi(3) / 27.0 + tr * minors / 3.0 - det;
    let r = 2.0 * (-p / 3.0).sqrt();
    let phi = ((3.0 * q / (p * r)).clamp(-1.0, 1.0)).acos() / 3.0;
    let mut lambdas: Vec<f64> = (0..3)
        .map(|j| tr / 3.0 + r * (phi - 2.0 * std::f64::consts::PI * j as f64 / 3.0).cos())
        .collect();
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    lambdas
        .into_iter()
        .map(|l| {
            let rows: Vec<[f64; 3]> = (0..3)
                .map(|i| {
                    let mut r = c[i];
                    r[i] -= l;
                    r
                })
                .collect();
            let cross = |a: [f64; 3], b: [f64; 3]| {
                [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
            };
            let v = [cross(rows[0], rows[1]), cross(rows[0], rows[2]), cross(rows[1], rows[2])]
                .into_iter()
                .max_by(|a, b| {
                    let n = |v: &[f64; 3]| v.iter().map(|x| x * x).sum::<f64>();
                    n(a).partial_cmp(&n(b)).unwrap()
                })
                .unwrap();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (l, [v[0] / n, v[1] / n, v[2] / n])
        })
        .collect()
}

#[test]
fn principal_components_match_characteristic_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            let (a, b, c): (f64, f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3));
            vec![a + 0.5 * b, 0.3 * a - b + c, 2.0 + c - 0.2 * a]
        })
        .collect();
    let mean: Vec<f64> = (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 10.0).collect();
    let mut cov = [[0.0; 3]; 3];
    for p in &pts {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / 9.0;
            }
        }
    }
    let eig = eig3(cov);
    let proj = Projector::fit(&pts, Projection::PrincipalComponents).unwrap();
    for axis in 0..2 {
        assert!((proj.variance[axis] - eig[axis].0).abs() < 1e-8);
        let dot: f64 = (0..3).map(|j| proj.axes[axis][j] * eig[axis].1[j]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "axis {axis}: {dot}");
        for p in &pts {
            let expect: f64 = (0..3).map(|j| (p[j] - mean[j]) * eig[axis].1[j]).sum();
            let got = proj.project(p)[axis];
            assert!((got.abs() - expect.abs()).abs() < 1e-8);
        }
    }
}

#[test]
fn degenerate_projections() {
    let same = vec![vec![0.3; 128]; 5];
    for p in project_2d(&same, Projection::PrincipalComponents).unwrap() {
        assert_eq!(p, [0.0, 0.0]);
    }
    assert!(project_2d(&same[..1], Projection::PrincipalComponents).is_err());
    let latents = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let xy = project_2d(&latents, Projection::AxisPair { i: 2, j: 0 }).unwrap();
    assert_eq!(xy, vec![[3.0, 1.0], [6.0, 4.0]]);
    assert!(project_2d(&latents, Projection::AxisPair { i: 3, j: 0 }).is_err());
    assert!(project_2d(&[], Projection::PrincipalComponents).is_err());
}

#[test]
fn knn_returns_exact_training_point() {
    let train = random_samples(50, 4, 5);
    let norm = Normalizer::new(&bounds());
    let m = knn_predict(&train, &norm, &train[17].viewpoint, 1).unwrap();
    assert_eq!(m, train[17].m_gt);
    assert!(knn_predict(&train, &norm, &train[0].viewpoint, 0).is_err());
    assert!(knn_predict(&train, &norm, &train[0].viewpoint, 51).is_err());
    assert!(knn_predict(&[], &norm, &train[0].viewpoint, 1).is_err());
}

#[test]
fn knn_averages_equidistant_neighbours() {
    let norm = Normalizer::new(&bounds());
    let s = |x: f64, m: Vec<f64>| ViewSample {
        viewpoint: Viewpoint::new(x, 50.0, 10.0, 1.0, 0.0),
        m_gt: ThematicDistribution(m),
    };
    let train = vec![
        s(40.0, vec![1.0, 0.0]),
        s(60.0, vec![0.0, 1.0]),
        s(95.0, vec![0.5, 0.5]),
    ];
    let q = Viewpoint::new(50.0, 50.0, 10.0, 1.0, 0.0);
    let m = knn_predict(&train, &norm, &q, 2).unwrap();
    assert_eq!(m.as_slice(), &[0.5, 0.5]);
    // ties prefer lower indices
    let model = KnnModel::new(&train, norm, 1).unwrap();
    assert_eq!(model.neighbours(&q), vec![0]);
}

#[test]
fn knn_matches_exhaustive_scan() {
    let train = random_samples(500, 5, 6);
    let norm = Normalizer::new(&bounds());
    let queries = random_samples(30, 5, 7);
    for k in [1, 3, 10] {
        let model = KnnModel::new(&train, norm, k).unwrap();
        for q in &queries {
            let t = norm.normalize(&q.viewpoint);
            let mut all: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let p = norm.normalize(&s.viewpoint);
                    ((0..5).map(|d| (p[d] - t[d]).powi(2)).sum::<f64>(), i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut expect = vec![0.0; 5];
            for &(_, i) in &all[..k] {
                for c in 0..5 {
                    expect[c] += train[i].m_gt[c] / k as f64;
                }
            }
            let got = model.predict_one(&q.viewpoint);
            for c in 0..5 {
                assert!((got[c] - expect[c]).abs() < 1e-15);
            }
        }
    }
}

fn invisible_scene() -> Scene {
    // two specks far below the far plane: every view is pure sky
    let mut mb = MeshBuilder::default();
    let speck = |mb: &mut MeshBuilder, x: f64, y: f64| {
        mb.triangle(
            Vec3::new(x, y, -6000.0),
            Vec3::new(x + 0.1, y, -6000.0),
            Vec3::new(x, y + 0.1, -6000.0),
            5,
        )
    };
    speck(&mut mb, 0.0, 0.0);
    speck(&mut mb, 199.9, 199.9);
    Scene::new(urban_classes(), mb.vertices, mb.triangles, mb.tri_class, None, vec![]).unwrap()
}

#[test]
fn uniform_predictor_on_a_single_class_scene() {
    let scene = invisible_scene();
    let k = scene.k();
    let uniform = FnPredictor(|vps: &[Viewpoint]| Ok(vec![ThematicDistribution::uniform(7); vps.len()]));
    let report = region_error(&scene, &uniform, &BinSpec::categorical(k), &RegionConfig::default()).unwrap();
    assert_eq!((report.grid.nx, report.grid.ny), (3, 3));
    assert_eq!(report.regions.len(), 9);
    for r in &report.regions {
        assert!((r.error[0] - (1.0 - 1.0 / 7.0)).abs() < 1e-12);
        for c in 1..7 {
            assert!((r.error[c] - 1.0 / 7.0).abs() < 1e-12);
        }
    }
    assert_eq!(report.percent("sky"), Some(0.0));
    assert_eq!(report.percent("tree"), Some(0.0));
    let loose = RegionConfig {
        threshold: 1.0,
        ..RegionConfig::default()
    };
    let report = region_error(&scene, &uniform, &BinSpec::categorical(k), &loose).unwrap();
    assert!(report.percent_under.iter().all(|&p| p == 100.0));
    assert!(report.to_table().contains("sky"));
}

#[test]
fn ground_truth_replay_is_perfect_and_avoids_buildings() {
    let params = CityParams {
        grid: 2,
        ..CityParams::default()
    };
    let scene = generate_city(3, &params).unwrap();
    let bins = BinSpec::categorical(scene.k());
    let config = RegionConfig {
        side: 40.0,
        camera: CameraConfig::default().with_size(32, 32),
        ..RegionConfig::default()
    };
    let truth = GroundTruth {
        scene: &scene,
        camera: config.camera,
        bins: bins.clone(),
    };
    let report = region_error(&scene, &truth, &bins, &config).unwrap();
    assert!(report.percent_under.iter().all(|&p| p == 100.0));
    assert_eq!(report.regions.len() + report.skipped, report.grid.nx * report.grid.ny);
    for r in &report.regions {
        let p = Vec3::new(r.position[0], r.position[1], r.position[2]);
        assert!(!scene.inside_building(&p, 0.0));
        assert!((r.position[2] - EYE_HEIGHT).abs() < 1e-12);
    }
    let bad = RegionConfig {
        side: 0.0,
        ..config
    };
    assert!(region_error(&scene, &truth, &bins, &bad).is_err());
}

#[test]
fn material_scenario_splits_buildings() {
    let scene = generate_city(5, &CityParams::default()).unwrap();
    let mixed = material_scenario(&scene, 0.8, 1).unwrap();
    assert_eq!(mixed.k(), scene.k() + 1);
    assert_eq!(mixed.class_names()[1], "brick");
    assert_eq!(mixed.class_names().last().unwrap(), "glass");
    let glass = mixed.class_id("glass").unwrap();
    let brick = mixed.class_id("brick").unwrap();
    let mut n_glass = 0;
    for b in &mixed.buildings {
        let classes: std::collections::BTreeSet<u8> = b
            .triangle_range()
            .map(|t| mixed.tri_class[t])
            .filter(|&c| c == glass || c == brick)
            .collect();
        assert_eq!(classes.len(), 1, "building {} mixes materials", b.id);
        n_glass += classes.contains(&glass) as usize;
    }
    let n = scene.buildings.len();
    assert_eq!(n_glass, n - (0.8 * n as f64).round() as usize);
    // everything that is not a building keeps its label
    for (t, (&a, &b)) in scene.tri_class.iter().zip(&mixed.tri_class).enumerate() {
        if a != 1 {
            assert_eq!(a, b, "triangle {t}");
        }
    }
    assert_eq!(material_scenario(&scene, 0.8, 1).unwrap(), mixed);
    assert!(material_scenario(&scene, 1.5, 1).is_err());
}

#[test]
fn comparison_table_has_one_column_per_fraction() {
    let train_set = random_samples(60, 3, 8);
    let test_set = random_samples(20, 3, 9);
    let meta = model(3, 0).meta;
    let config = CompareConfig {
        fractions: vec![1.0],
        knn: vec![2, 5, 100],
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        },
        model_seed: 1,
        subset_seed: 2,
    };
    let report = compare_models(&meta, &train_set, &test_set, &config).unwrap();
    assert_eq!(report.train_sizes, vec![60]);
    assert_eq!(report.rows.len(), 4);
    assert!(report.row("Ours").unwrap().rmse[0].is_some());
    assert!(report.row("100-Neighbors").unwrap().rmse[0].is_none());
    let knn = KnnModel::new(&train_set, meta.normalizer, 5).unwrap();
    assert_eq!(
        report.row("5-Neighbors").unwrap().rmse[0],
        Some(predictor_rmse(&knn, &test_set).unwrap())
    );
    let table = report.to_table();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().next().unwrap().ends_with("60"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn knn_outputs_lie_on_the_simplex(seed in 0u64..1000, k in 1usize..12) {
        let train = random_samples(40, 6, seed);
        let model = KnnModel::new(&train, Normalizer::new(&bounds()), k).unwrap();
        for q in random_samples(5, 6, seed + 1) {
            let m = model.predict_one(&q.viewpoint);
            prop_assert!(m.is_simplex(1e-9));
        }
    }

    #[test]
    fn projection_ignores_translation(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..16).map(|i| rng.gen_range(-1.0..1.0) * (1.0 + i as f64)).collect())
            .collect();
        let offset: Vec<f64> = (0..16).map(|i| shift * (i as f64 - 7.5)).collect();
        let moved: Vec<Vec<f64>> = latents
            .iter()
            .map(|l| l.iter().zip(&offset).map(|(a, b)| a + b).collect())
            .collect();
        let a = project_2d(&latents, Projection::PrincipalComponents).unwrap();
        let b = project_2d(&moved, Projection::PrincipalComponents).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9, "{:?} {:?}", p, q);
        }
    }
}
