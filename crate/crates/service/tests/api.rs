use std::sync::OnceLock;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;
use viewfield::dataset::{build_dataset, load_csv, sample_viewpoints, save_csv, SamplingStrategy, ViewSample};
use viewfield::net::{ModelMeta, ModelParams};
use viewfield::percept::walkability;
use viewfield::query::direct_query;
use viewfield::raster::{BinSpec, CameraConfig};
use viewfield::scene::{facade_patches, generate_city, CityParams, Scene};
use viewfield::{Normalizer, Parametrization, Viewpoint};
use viewfield_service::*;

struct Fixture {
    scene: Scene,
    params: ModelParams,
    dataset: Vec<ViewSample>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let scene = generate_city(3, &CityParams { grid: 1, ..CityParams::default() }).unwrap();
        let bins = BinSpec::categorical(scene.k());
        let vps = sample_viewpoints(&scene, &SamplingStrategy::street_level().with_directions(4), 120, 5)
            .unwrap();
        let camera = CameraConfig::default().with_size(24, 24);
        let dataset = build_dataset(&scene, &vps, &bins, &camera).unwrap();
        let meta = ModelMeta::new(scene.class_names(), bins, Normalizer::new(&scene.aabb)).unwrap();
        let params = ModelParams::init(11, meta);
        Fixture { scene, params, dataset }
    })
}

fn workspace(dataset: Vec<ViewSample>) -> Workspace {
    let f = fixture();
    let metrics = walkability(&f.params.meta.components).into_iter().collect();
    Workspace::new(f.scene.clone(), f.params.clone(), dataset, metrics).unwrap()
}

fn app_with(config: ServiceConfig) -> (ServiceState, Router) {
    let state = ServiceState::new(workspace(fixture().dataset.clone()), config);
    (state.clone(), router(state))
}

fn app() -> Router {
    app_with(ServiceConfig::default()).1
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Bytes) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Bytes) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: impl ToString) -> (StatusCode, Bytes) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn parse(bytes: &Bytes) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

fn decode_png(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

fn vp_json(vp: &Viewpoint) -> Value {
    serde_json::to_value(vp).unwrap()
}

#[tokio::test]
async fn data_endpoints_answer_503_before_load() {
    let app = router(ServiceState::empty(ServiceConfig::default()));
    for uri in ["/api/meta", "/api/groundtruth?limit=1", "/api/latent", "/api/thumbnail/0"] {
        assert_eq!(get(&app, uri).await.0, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
    let vp = json!({"x": 0.0, "y": 0.0, "z": 1.7, "alpha": 0.0, "gamma": 0.0});
    let posts = [
        ("/api/query/direct", json!({"viewpoints": [vp]})),
        ("/api/query/inverse", json!({"target": "sky:0-1", "count": 1})),
        ("/api/render", json!({"viewpoint": vp, "width": 8, "height": 8})),
        ("/api/facade", json!({"building": 0, "theme": "sky"})),
    ];
    for (uri, body) in posts {
        assert_eq!(post(&app, uri, body).await.0, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
}

#[tokio::test]
async fn loading_makes_the_service_available() {
    let state = ServiceState::empty(ServiceConfig::default());
    let app = router(state.clone());
    assert_eq!(get(&app, "/api/meta").await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.load(workspace(fixture().dataset.clone()));
    assert_eq!(get(&app, "/api/meta").await.0, StatusCode::OK);
}

#[tokio::test]
async fn meta_lists_classes_and_buildings() {
    let app = app();
    let (status, body) = get(&app, "/api/meta").await;
    assert_eq!(status, StatusCode::OK);
    let meta: MetaResponse = serde_json::from_slice(&body).unwrap();
    let f = fixture();
    assert_eq!(meta.k, 7);
    assert_eq!(meta.classes, f.scene.class_names());
    assert_eq!(meta.buildings.len(), f.scene.buildings.len());
    assert_eq!(meta.dataset_size, f.dataset.len());
    assert_eq!(meta.param_count, 662_023);
    assert_eq!(meta.metrics.len(), 1);
    assert_eq!(get(&app, "/api/meta").await.1, body, "meta is idempotent");
}

#[tokio::test]
async fn workspace_rejects_a_model_for_another_scene() {
    let f = fixture();
    let mut names = f.scene.class_names();
    names.swap(1, 2);
    let meta = ModelMeta::new(names, BinSpec::categorical(7), Normalizer::new(&f.scene.aabb)).unwrap();
    let params = ModelParams::init(1, meta);
    assert!(Workspace::new(f.scene.clone(), params, Vec::new(), Vec::new()).is_err());

    let names: Vec<String> = f.scene.class_names()[..5].to_vec();
    let meta = ModelMeta::new(names, BinSpec::categorical(5), Normalizer::new(&f.scene.aabb)).unwrap();
    assert!(Workspace::new(f.scene.clone(), ModelParams::init(1, meta), Vec::new(), Vec::new()).is_err());
}

#[tokio::test]
async fn groundtruth_limits_and_rejects_nonpositive() {
    let app = app();
    let f = fixture();
    let one: GroundTruthResponse = serde_json::from_slice(&get(&app, "/api/groundtruth?limit=1").await.1).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].m.len(), 7);
    assert_eq!(one.metrics, vec!["walkability".to_string()]);

    let all: GroundTruthResponse =
        serde_json::from_slice(&get(&app, "/api/groundtruth?limit=1000000").await.1).unwrap();
    assert_eq!(all.rows.len(), f.dataset.len());
    assert_eq!(all.total, f.dataset.len());

    for bad in ["0", "-4", "abc"] {
        let (status, _) = get(&app, &format!("/api/groundtruth?limit={bad}")).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "limit={bad}");
    }
}

#[tokio::test]
async fn groundtruth_rows_match_the_csv_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("views.csv");
    save_csv(&fixture().dataset, &path).unwrap();
    let rows = load_csv(&path).unwrap();
    let w = walkability(&fixture().params.meta.components).unwrap();
    let app = router(ServiceState::new(workspace(rows.clone()), ServiceConfig::default()));
    let gt: GroundTruthResponse = serde_json::from_slice(&get(&app, "/api/groundtruth?limit=50").await.1).unwrap();
    assert_eq!(gt.rows.len(), 50);
    for (row, sample) in gt.rows.iter().zip(&rows) {
        assert_eq!(row.viewpoint, sample.viewpoint);
        assert_eq!(row.m, sample.m_gt.0);
        let expected = w.eval(sample.m_gt.as_slice());
        assert!(row.metrics[0] == expected || (row.metrics[0].is_nan() && expected.is_nan()));
    }
}

#[tokio::test]
async fn direct_query_matches_the_library() {
    let app = app();
    let f = fixture();
    let vps: Vec<Viewpoint> = f.dataset.iter().take(20).map(|s| s.viewpoint).collect();
    let body = json!({"viewpoints": vps, "metric": "walkability"});
    let (status, bytes) = post(&app, "/api/query/direct", body).await;
    assert_eq!(status, StatusCode::OK);
    let resp: DirectResponse = serde_json::from_slice(&bytes).unwrap();
    let w = walkability(&f.params.meta.components).unwrap();
    let expected = direct_query(&f.params, &vps, Some(&w)).unwrap();
    let got: Vec<Vec<f64>> = expected.distributions.iter().map(|d| d.0.clone()).collect();
    assert_eq!(resp.distributions, got);
    assert_eq!(resp.values.unwrap(), expected.values.unwrap());
    assert_eq!(resp.clamped, 0);
}

#[tokio::test]
async fn direct_query_accepts_inline_metrics_and_clamps() {
    let app = app();
    let aabb = fixture().scene.aabb;
    let outside = Viewpoint::new(aabb.max.x + 50.0, aabb.min.y, 1.7, 0.3, 0.0);
    let body = json!({"viewpoints": [vp_json(&outside)], "metric": "green = tree + surface"});
    let resp: DirectResponse = serde_json::from_slice(&post(&app, "/api/query/direct", body).await.1).unwrap();
    assert_eq!(resp.clamped, 1);
    assert_eq!(resp.metric.as_deref(), Some("green"));
    let m = &resp.distributions[0];
    let names = fixture().scene.class_names();
    let idx = |n: &str| names.iter().position(|c| c == n).unwrap();
    assert!((resp.values.unwrap()[0] - (m[idx("tree")] + m[idx("surface")])).abs() < 1e-12);
}

#[tokio::test]
async fn direct_query_rejects_bad_input() {
    let app = app();
    let cases = [
        json!({"viewpoints": []}).to_string(),
        json!({"viewpoints": [{"x": 1.0, "y": 2.0}]}).to_string(),
        json!({"viewpoints": [{"x": "a", "y": 0, "z": 0, "alpha": 0, "gamma": 0}]}).to_string(),
        json!({"points": []}).to_string(),
        "{not json".to_string(),
    ];
    for body in cases {
        let (status, bytes) = post(&app, "/api/query/direct", &body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(parse(&bytes)["error"].is_string());
    }
    let vp = json!({"x": 0, "y": 0, "z": 1.7, "alpha": 0, "gamma": 0});
    let (status, bytes) = post(&app, "/api/query/direct", json!({"viewpoints": [vp], "metric": "tree +"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(parse(&bytes)["offset"].is_u64());
}

#[tokio::test]
async fn direct_query_answers_ten_thousand_views_in_one_response() {
    let app = app();
    let aabb = fixture().scene.aabb;
    let vps: Vec<Viewpoint> = (0..10_000)
        .map(|i| {
            let t = i as f64 / 10_000.0;
            Viewpoint::new(
                aabb.min.x + t * (aabb.max.x - aabb.min.x),
                aabb.min.y + (1.0 - t) * (aabb.max.y - aabb.min.y),
                1.7 + 20.0 * t,
                6.0 * t,
                0.2,
            )
        })
        .collect();
    let (status, bytes) = post(&app, "/api/query/direct", json!({"viewpoints": vps})).await;
    assert_eq!(status, StatusCode::OK);
    let resp: DirectResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.distributions.len(), 10_000);
    assert!(resp.distributions.iter().all(|d| (d.iter().sum::<f64>() - 1.0).abs() < 1e-6));
}

#[tokio::test]
async fn inverse_with_count_one_returns_one_ranked_result() {
    let app = app();
    let (status, bytes) = post(&app, "/api/query/inverse", json!({"target": "sky:0.3-0.5", "count": 1})).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let resp: InverseResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.results.len(), 1);
    assert_eq!(resp.results[0].rank, 0);
}

#[tokio::test]
async fn inverse_reports_syntax_errors_with_offsets() {
    let app = app();
    let (status, bytes) = post(
        &app,
        "/api/query/inverse",
        json!({"target": "tree:0.2-0.4,bogus:0.3-0.5", "count": 3}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&bytes)["offset"], 13);

    for body in [
        json!({"target": "tree:0.2-0.4", "count": 0}),
        json!({"count": 3}),
        json!({"target": "sky:0-1", "metric": "walkability", "value": 0.5, "count": 1}),
        json!({"target": "sky:0-1", "count": 2, "region": "p=0,0,1.7;v1=1,0,0"}),
        json!({"target": "sky:0-1", "count": 2, "config": {"learning_rate": -1.0}}),
    ] {
        assert_eq!(post(&app, "/api/query/inverse", &body).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn infeasible_targets_are_flagged() {
    let app = app();
    let body = json!({
        "target": "sky=1,tree=1",
        "count": 4,
        "config": {"max_iterations": 20, "tolerance": 1e-9}
    });
    let resp: InverseResponse = serde_json::from_slice(&post(&app, "/api/query/inverse", body).await.1).unwrap();
    assert_eq!(resp.results.len(), 4);
    for r in &resp.results {
        assert_eq!(r.status, viewfield::query::InverseStatus::MaxIterations);
        assert!(r.loss > 0.5);
    }
    assert!(resp.results.windows(2).all(|w| w[0].loss <= w[1].loss));
}

#[tokio::test]
async fn inverse_results_become_green_points_with_thumbnails() {
    let app = app();
    let before: LatentResponse = serde_json::from_slice(&get(&app, "/api/latent").await.1).unwrap();
    assert!(before.green.is_empty());

    let body = json!({"target": "tree:0.2-0.4,sky:0.3-0.5", "count": 5, "config": {"max_iterations": 40}});
    let resp: InverseResponse = serde_json::from_slice(&post(&app, "/api/query/inverse", body).await.1).unwrap();
    assert_eq!(resp.results.len(), 5);

    let after: LatentResponse = serde_json::from_slice(&get(&app, "/api/latent").await.1).unwrap();
    assert_eq!(after.green.len(), 5);
    for (g, r) in after.green.iter().zip(&resp.results) {
        assert_eq!(g.id, r.id);
        assert_eq!(g.xy, r.xy);
        assert_eq!(g.viewpoint, r.viewpoint);
    }

    let (status, png) = get(&app, &format!("/api/thumbnail/{}?size=32", resp.results[2].id)).await;
    assert_eq!(status, StatusCode::OK);
    let (w, h, _) = decode_png(&png);
    assert_eq!((w, h), (32, 32));
    assert_eq!(get(&app, "/api/thumbnail/999999").await.0, StatusCode::NOT_FOUND);

    // A new query replaces the generated views.
    let body = json!({"target": "sky:0-1", "count": 2, "config": {"max_iterations": 5}});
    let second: InverseResponse = serde_json::from_slice(&post(&app, "/api/query/inverse", body).await.1).unwrap();
    let latest: LatentResponse = serde_json::from_slice(&get(&app, "/api/latent").await.1).unwrap();
    assert_eq!(latest.green.len(), 2);
    assert!(latest.green.iter().all(|g| second.results.iter().any(|r| r.id == g.id)));
    assert_eq!(get(&app, &format!("/api/thumbnail/{}", resp.results[0].id)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn plane_constrained_inverse_stays_on_the_plane() {
    let app = app();
    let region = "p=10,10,1.7;v1=1,0,0;v2=0,1,0;l=60;L=60";
    let plane: Parametrization = region.parse().unwrap();
    for body in [
        json!({"target": "sky:0.3-0.5", "count": 4, "region": region, "config": {"max_iterations": 30}}),
        json!({"target": "sky:0.3-0.5", "count": 4, "region": plane, "config": {"max_iterations": 30}}),
    ] {
        let (status, bytes) = post(&app, "/api/query/inverse", body).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
        let resp: InverseResponse = serde_json::from_slice(&bytes).unwrap();
        for r in &resp.results {
            assert!(plane.residual(&r.viewpoint.position()) < 1e-6);
        }
    }
}

#[tokio::test]
async fn metric_targets_are_accepted() {
    let app = app();
    let body = json!({"metric": "walkability", "value": 0.5, "count": 3, "config": {"max_iterations": 10}});
    let (status, bytes) = post(&app, "/api/query/inverse", body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let resp: InverseResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.results.len(), 3);
}

#[tokio::test]
async fn renders_are_deterministic_and_bounded() {
    let app = app();
    let vp = fixture().dataset[3].viewpoint;
    let body = json!({"viewpoint": vp, "width": 64, "height": 48});
    let (status, a) = post(&app, "/api/render", &body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    let (_, b) = post(&app, "/api/render", &body).await;
    assert_eq!(a, b);
    assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    let (w, h, _) = decode_png(&a);
    assert_eq!((w, h), (64, 48));

    for (w, h) in [(1025, 1024), (0, 10), (usize::MAX, 2)] {
        let body = json!({"viewpoint": vp, "width": w, "height": h});
        assert_eq!(post(&app, "/api/render", body).await.0, StatusCode::BAD_REQUEST, "{w}x{h}");
    }
    let straight_up = json!({"viewpoint": {"x": 0, "y": 0, "z": 2, "alpha": 0, "gamma": std::f64::consts::FRAC_PI_2}});
    assert_eq!(post(&app, "/api/render", straight_up).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn sky_only_view_renders_a_solid_color() {
    let app = app();
    let aabb = fixture().scene.aabb;
    let vp = Viewpoint::new(0.5 * (aabb.min.x + aabb.max.x), 0.5 * (aabb.min.y + aabb.max.y), aabb.max.z + 10.0, 0.0, 1.2);
    let (status, bytes) = post(&app, "/api/render", json!({"viewpoint": vp, "width": 32, "height": 32})).await;
    assert_eq!(status, StatusCode::OK);
    let (_, _, rgb) = decode_png(&bytes);
    assert!(rgb.chunks(3).all(|p| p == &rgb[..3]));
}

#[tokio::test]
async fn render_256_is_fast() {
    let app = app();
    let vp = fixture().dataset[0].viewpoint;
    let body = json!({"viewpoint": vp, "width": 256, "height": 256});
    post(&app, "/api/render", &body).await;
    let mut best = Duration::MAX;
    for _ in 0..3 {
        let t = Instant::now();
        assert_eq!(post(&app, "/api/render", &body).await.0, StatusCode::OK);
        best = best.min(t.elapsed());
    }
    assert!(best < Duration::from_millis(200), "256x256 render took {best:?}");
}

#[tokio::test]
async fn facade_values_cover_every_patch() {
    let app = app();
    let f = fixture();
    let b = &f.scene.buildings[0];
    let body = json!({"building": b.id, "patch_size": 5.0, "samples": 2, "theme": "sky"});
    let (status, bytes) = post(&app, "/api/facade", body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let resp: FacadeResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.patches.len(), facade_patches(b, 5.0).unwrap().len());
    assert_eq!(resp.total, resp.patches.len());
    assert!(resp.patches.iter().all(|p| (0.0..=1.0).contains(&p.value)));
    let lo = resp.patches.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    let hi = resp.patches.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((resp.min, resp.max), (Some(lo), Some(hi)));

    let sky = f.scene.class_names().iter().position(|c| c == "sky").unwrap();
    assert!(resp.patches.iter().all(|p| p.value == p.m[sky]));
}

#[tokio::test]
async fn facade_filter_keeps_matching_patches() {
    let app = app();
    let b = &fixture().scene.buildings[0];
    let all: FacadeResponse = serde_json::from_slice(
        &post(&app, "/api/facade", json!({"building": b.id, "theme": "building", "samples": 2})).await.1,
    )
    .unwrap();
    let mut values: Vec<f64> = all.patches.iter().map(|p| p.value).collect();
    values.sort_by(f64::total_cmp);
    let lo = values[values.len() / 2];
    let body = json!({"building": b.id, "theme": "building", "samples": 2, "filter": [lo, 1.0]});
    let some: FacadeResponse = serde_json::from_slice(&post(&app, "/api/facade", body).await.1).unwrap();
    let expected = values.iter().filter(|&&v| v >= lo && v <= 1.0).count();
    assert_eq!(some.patches.len(), expected);
    assert!(some.patches.iter().all(|p| p.value >= lo));
    assert_eq!(some.total, all.total);
}

#[tokio::test]
async fn facade_errors() {
    let app = app();
    let (status, _) = post(&app, "/api/facade", json!({"building": 9999, "theme": "sky"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let b = fixture().scene.buildings[0].id;
    for body in [
        json!({"building": b, "theme": "sky +"}),
        json!({"building": b, "theme": "sky", "filter": [0.6, 0.2]}),
        json!({"building": b, "theme": "sky", "samples": 0}),
        json!({"building": b, "theme": "sky", "patch_size": -1.0}),
    ] {
        assert_eq!(post(&app, "/api/facade", &body).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
    let ok = json!({"building": b, "theme": "walkability", "samples": 1, "patch_size": 10.0});
    assert_eq!(post(&app, "/api/facade", ok).await.0, StatusCode::OK);
}

#[tokio::test]
async fn latent_filter_selects_ground_truth_intervals() {
    let app = app();
    let f = fixture();
    let all: LatentResponse = serde_json::from_slice(&get(&app, "/api/latent").await.1).unwrap();
    assert_eq!(all.purple.len(), f.dataset.len());

    let names = f.scene.class_names();
    for (class, lo) in [("tree", 0.5), ("road", 0.05)] {
        let c = names.iter().position(|n| n == class).unwrap();
        let (status, bytes) = get(&app, &format!("/api/latent?subset={class}:{lo}-1")).await;
        assert_eq!(status, StatusCode::OK);
        let some: LatentResponse = serde_json::from_slice(&bytes).unwrap();
        let expected: Vec<usize> = (0..f.dataset.len()).filter(|&i| f.dataset[i].m_gt[c] >= lo).collect();
        let got: Vec<usize> = some.purple.iter().map(|p| p.index).collect();
        assert_eq!(got, expected, "{class}");
        for p in &some.purple {
            assert_eq!(p.xy, all.purple[p.index].xy);
        }
    }
}

#[tokio::test]
async fn latent_projection_choice() {
    let app = app();
    let (status, bytes) = get(&app, "/api/latent?projection=axes:3,7").await;
    assert_eq!(status, StatusCode::OK);
    let resp: LatentResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.projection, viewfield::analysis::Projection::AxisPair { i: 3, j: 7 });
    for bad in ["/api/latent?projection=tsne", "/api/latent?subset=tree=0.3", "/api/latent?subset=tree:2-3"] {
        assert_eq!(get(&app, bad).await.0, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let app = app();
    let vps: Vec<Viewpoint> = fixture().dataset.iter().map(|s| s.viewpoint).collect();
    let direct = json!({"viewpoints": vps}).to_string();
    let facade = json!({"building": fixture().scene.buildings[0].id, "theme": "sky", "samples": 3}).to_string();
    let mut tasks = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        let (uri, body) = if i % 2 == 0 {
            ("/api/query/direct", direct.clone())
        } else {
            ("/api/facade", facade.clone())
        };
        tasks.push(tokio::spawn(async move { (uri, post(&app, uri, body).await) }));
    }
    let mut seen: std::collections::HashMap<&str, Bytes> = Default::default();
    for t in tasks {
        let (uri, (status, bytes)) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let first = seen.entry(uri).or_insert_with(|| bytes.clone());
        assert_eq!(*first, bytes, "{uri}");
    }
}

#[tokio::test]
async fn slow_requests_time_out_with_503() {
    let config = ServiceConfig {
        timeout: Duration::from_millis(1),
        ..ServiceConfig::default()
    };
    let (_, app) = app_with(config);
    let body = json!({"target": "sky=1,tree=1", "count": 256, "config": {"tolerance": 1e-12}});
    let (status, bytes) = post(&app, "/api/query/inverse", body).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(parse(&bytes)["error"].as_str().unwrap().contains("exceeded"));
}

#[tokio::test]
async fn cors_headers_are_present() {
    let app = app();
    let req = Request::get("/api/meta")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let config = ServiceConfig {
        cors_origin: Some("http://localhost:5173".into()),
        ..ServiceConfig::default()
    };
    let (_, app) = app_with(config);
    let req = Request::get("/api/meta")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
}
