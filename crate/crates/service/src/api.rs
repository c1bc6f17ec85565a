use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use viewfield::analysis::{latent_points, Projection, Projector};
use viewfield::geom::Aabb;
use viewfield::percept::{MetricDef, PerceptionMetric};
use viewfield::query::{
    direct_query, facade_summary, inverse_gradient, InverseConfig, InverseStatus, SearchSpace,
    TargetSpec,
};
use viewfield::raster::{render_falsecolor, Camera};
use viewfield::scene::FacadePatch;
use viewfield::{Parametrization, Viewpoint};

use crate::error::ApiError;
use crate::state::{ServiceState, Workspace};

type ApiResult<T> = Result<T, ApiError>;

/// Largest render, in pixels.
pub const MAX_RENDER_PIXELS: usize = 1024 * 1024;
/// Largest number of restarts a single inverse request may ask for.
pub const MAX_INVERSE_COUNT: usize = 1024;

pub fn router(state: ServiceState) -> Router {
    let cors = match &state.config().cors_origin {
        Some(origin) => match origin.parse::<HeaderValue>() {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => {
                log::warn!("ignoring unparsable CORS origin {origin:?}");
                CorsLayer::new().allow_origin(Any)
            }
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/groundtruth", get(groundtruth))
        .route("/api/query/direct", post(query_direct))
        .route("/api/query/inverse", post(query_inverse))
        .route("/api/render", post(render))
        .route("/api/thumbnail/{id}", get(thumbnail))
        .route("/api/facade", post(facade))
        .route("/api/latent", get(latent))
        .layer(cors)
        .with_state(state)
}

/// JSON body parsing that reports failures as 400 rather than 422.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request body: {e}")))
}

fn png_response(bytes: Vec<u8>) -> Response {
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))],
        bytes,
    )
        .into_response()
}

// ---------------------------------------------------------------- meta

#[derive(Debug, Serialize, Deserialize)]
pub struct BuildingInfo {
    pub id: u32,
    pub footprint: [f64; 4],
    pub height: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetaResponse {
    pub classes: Vec<String>,
    pub k: usize,
    pub aabb: Aabb,
    /// Bounds the model was trained over; inputs outside are clamped.
    pub model_aabb: Aabb,
    pub buildings: Vec<BuildingInfo>,
    pub dataset_size: usize,
    pub metrics: Vec<MetricDef>,
    pub param_count: usize,
    pub provenance: BTreeMap<String, String>,
}

async fn meta(State(state): State<ServiceState>) -> ApiResult<Json<MetaResponse>> {
    let ws = state.workspace()?;
    let meta = &ws.params.meta;
    Ok(Json(MetaResponse {
        classes: meta.components.clone(),
        k: meta.k,
        aabb: ws.scene.aabb,
        model_aabb: meta.normalizer.bounds(),
        buildings: ws
            .scene
            .buildings
            .iter()
            .map(|b| BuildingInfo {
                id: b.id,
                footprint: b.footprint,
                height: b.height,
            })
            .collect(),
        dataset_size: ws.dataset.len(),
        metrics: ws.metrics.iter().map(PerceptionMetric::definition).collect(),
        param_count: meta.param_count,
        provenance: meta.provenance.clone(),
    }))
}

// ---------------------------------------------------------------- ground truth

#[derive(Debug, Deserialize)]
struct LimitParams {
    limit: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub viewpoint: Viewpoint,
    pub m: Vec<f64>,
    /// Values of the registered metrics, in `GroundTruthResponse::metrics` order.
    pub metrics: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthResponse {
    pub components: Vec<String>,
    pub metrics: Vec<String>,
    pub total: usize,
    pub rows: Vec<GroundTruthRow>,
}

async fn groundtruth(
    State(state): State<ServiceState>,
    Query(params): Query<LimitParams>,
) -> ApiResult<Json<GroundTruthResponse>> {
    let ws = state.workspace()?;
    let n = match params.limit {
        Some(n) if n <= 0 => return Err(ApiError::bad(format!("limit must be positive, got {n}"))),
        Some(n) => usize::try_from(n).unwrap_or(usize::MAX).min(ws.dataset.len()),
        None => ws.dataset.len(),
    };
    let rows = ws.dataset[..n]
        .iter()
        .map(|s| GroundTruthRow {
            viewpoint: s.viewpoint,
            m: s.m_gt.0.clone(),
            metrics: ws.metrics.iter().map(|w| w.eval(s.m_gt.as_slice())).collect(),
        })
        .collect();
    Ok(Json(GroundTruthResponse {
        components: ws.components().to_vec(),
        metrics: ws.metrics.iter().map(|w| w.name.clone()).collect(),
        total: ws.dataset.len(),
        rows,
    }))
}

// ---------------------------------------------------------------- direct query

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectRequest {
    pub viewpoints: Vec<Viewpoint>,
    /// Registered metric name, `name=expression`, or a bare expression.
    #[serde(default)]
    pub metric: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DirectResponse {
    pub components: Vec<String>,
    pub distributions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    pub clamped: usize,
}

async fn query_direct(State(state): State<ServiceState>, body: Bytes) -> ApiResult<Json<DirectResponse>> {
    let ws = state.workspace()?;
    let req: DirectRequest = parse_body(&body)?;
    if req.viewpoints.is_empty() {
        return Err(ApiError::bad("viewpoints must not be empty"));
    }
    if let Some(i) = req.viewpoints.iter().position(|v| !v.is_finite()) {
        return Err(ApiError::bad(format!("viewpoint {i} has a non-finite coordinate")));
    }
    let metric = req.metric.as_deref().map(|m| ws.resolve_metric(m)).transpose()?;
    state
        .compute(move || {
            let q = direct_query(&ws.params, &req.viewpoints, metric.as_ref())?;
            Ok(Json(DirectResponse {
                components: ws.components().to_vec(),
                distributions: q.distributions.into_iter().map(|d| d.0).collect(),
                metric: metric.map(|w| w.name),
                values: q.values,
                clamped: q.clamped,
            }))
        })
        .await
}

// ---------------------------------------------------------------- inverse query

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionInput {
    /// `p=x,y,z;v1=..;v2=..;l=..;L=..`, `sphere:c=..;r=..` or `hemisphere:c=..;r=..`.
    Text(String),
    Spec(Parametrization),
}

/// Optional overrides of the inverse-query defaults.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseOverrides {
    pub learning_rate: Option<f64>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseRequest {
    /// `tree:0.2-0.4,sky:0.3-0.5` or `tree=0.3`.
    #[serde(default)]
    pub target: Option<String>,
    /// Metric target, used together with `value` instead of `target`.
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub region: Option<RegionInput>,
    /// Fixed `[yaw, pitch]` in radians.
    #[serde(default)]
    pub direction: Option<[f64; 2]>,
    /// Number of restarts, and so of returned results.
    pub count: usize,
    #[serde(default)]
    pub config: InverseOverrides,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InverseHit {
    pub rank: usize,
    /// Thumbnail id for `GET /api/thumbnail/{id}`.
    pub id: u64,
    pub viewpoint: Viewpoint,
    pub m: Vec<f64>,
    pub loss: f64,
    pub status: InverseStatus,
    pub iterations: usize,
    pub restart: usize,
    /// Position on the latent map.
    pub xy: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InverseResponse {
    pub components: Vec<String>,
    pub results: Vec<InverseHit>,
}

fn inverse_target(ws: &Workspace, req: &InverseRequest) -> ApiResult<TargetSpec> {
    let target = match (&req.target, &req.metric, req.value) {
        (Some(t), None, None) => TargetSpec::parse(t, ws.components())?,
        (None, Some(m), Some(v)) => {
            if !v.is_finite() {
                return Err(ApiError::bad("metric value must be finite"));
            }
            TargetSpec::metric(ws.resolve_metric(m)?, v)
        }
        (None, Some(_), None) => return Err(ApiError::bad("a metric target needs a value")),
        (None, None, _) => return Err(ApiError::bad("give either target or metric and value")),
        _ => return Err(ApiError::bad("target and metric are mutually exclusive")),
    };
    target.validate(ws.params.k())?;
    Ok(target)
}

fn inverse_config(req: &InverseRequest) -> ApiResult<InverseConfig> {
    if req.count < 1 || req.count > MAX_INVERSE_COUNT {
        return Err(ApiError::bad(format!(
            "count must be between 1 and {MAX_INVERSE_COUNT}, got {}",
            req.count
        )));
    }
    let region = match &req.region {
        None => None,
        Some(RegionInput::Text(s)) => Some(s.parse::<Parametrization>()?),
        Some(RegionInput::Spec(p)) => Some(p.clone()),
    };
    let defaults = InverseConfig::default();
    let o = &req.config;
    let config = InverseConfig {
        learning_rate: o.learning_rate.unwrap_or(defaults.learning_rate),
        max_iterations: o.max_iterations.unwrap_or(defaults.max_iterations),
        tolerance: o.tolerance.unwrap_or(defaults.tolerance),
        restarts: req.count,
        seed: o.seed.unwrap_or(defaults.seed),
        space: SearchSpace {
            region,
            direction: req.direction,
        },
    };
    config.validate()?;
    Ok(config)
}

async fn query_inverse(
    State(state): State<ServiceState>,
    body: Bytes,
) -> ApiResult<Json<InverseResponse>> {
    let ws = state.workspace()?;
    let req: InverseRequest = parse_body(&body)?;
    let target = inverse_target(&ws, &req)?;
    let config = inverse_config(&req)?;
    let job_ws = ws.clone();
    let ranked = state
        .compute(move || {
            let ws = job_ws;
            let results = inverse_gradient(&ws.params, &target, &config)?;
            let vps: Vec<Viewpoint> = results.iter().map(|r| r.viewpoint).collect();
            let projector = match &ws.projector {
                Some(p) => p.clone(),
                None => Projector::fit(
                    &viewfield::analysis::latent_codes(&ws.params, &vps)?,
                    Projection::PrincipalComponents,
                )?,
            };
            let points = latent_points(&ws.params, &vps, &projector)?;
            Ok(results.into_iter().zip(points).collect::<Vec<_>>())
        })
        .await?;
    let green = state.replace_green(ranked);
    Ok(Json(InverseResponse {
        components: ws.components().to_vec(),
        results: green
            .into_iter()
            .map(|g| InverseHit {
                rank: g.rank,
                id: g.id,
                viewpoint: g.result.viewpoint,
                m: g.result.m,
                loss: g.result.loss,
                status: g.result.status,
                iterations: g.result.iterations,
                restart: g.result.restart,
                xy: g.point.xy,
            })
            .collect(),
    }))
}

// ---------------------------------------------------------------- rendering

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub viewpoint: Viewpoint,
    #[serde(default = "default_render_size")]
    pub width: usize,
    #[serde(default = "default_render_size")]
    pub height: usize,
}

fn default_render_size() -> usize {
    256
}

fn check_size(width: usize, height: usize) -> ApiResult<()> {
    if width == 0 || height == 0 {
        return Err(ApiError::bad("render size must be positive"));
    }
    match width.checked_mul(height) {
        Some(n) if n <= MAX_RENDER_PIXELS => Ok(()),
        _ => Err(ApiError::bad(format!(
            "{width}x{height} exceeds the {MAX_RENDER_PIXELS}-pixel render limit"
        ))),
    }
}

async fn render_png(
    state: &ServiceState,
    viewpoint: Viewpoint,
    width: usize,
    height: usize,
) -> ApiResult<Response> {
    check_size(width, height)?;
    if !viewpoint.is_finite() {
        return Err(ApiError::bad("viewpoint has a non-finite coordinate"));
    }
    let ws = state.workspace()?;
    let camera = Camera::new(viewpoint, state.config().camera.clone().with_size(width, height));
    let bytes = state
        .compute(move || Ok(render_falsecolor(&ws.scene, &camera)?))
        .await?;
    Ok(png_response(bytes))
}

async fn render(State(state): State<ServiceState>, body: Bytes) -> ApiResult<Response> {
    let req: RenderRequest = parse_body(&body)?;
    render_png(&state, req.viewpoint, req.width, req.height).await
}

#[derive(Debug, Deserialize)]
struct ThumbnailParams {
    size: Option<usize>,
}

async fn thumbnail(
    State(state): State<ServiceState>,
    Path(id): Path<u64>,
    Query(params): Query<ThumbnailParams>,
) -> ApiResult<Response> {
    state.workspace()?;
    let green = state
        .green_point(id)
        .ok_or_else(|| ApiError::NotFound(format!("no generated view with id {id}")))?;
    let size = params.size.unwrap_or(state.config().thumbnail_size);
    render_png(&state, green.result.viewpoint, size, size).await
}

// ---------------------------------------------------------------- facades

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacadeRequest {
    pub building: u32,
    #[serde(default = "default_patch_size")]
    pub patch_size: f64,
    /// Samples averaged per patch.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// A component name, a registered metric, or a metric expression.
    pub theme: String,
    /// Keep only patches whose value lies in `[lo, hi]`.
    #[serde(default)]
    pub filter: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
}

fn default_patch_size() -> f64 {
    2.5
}

fn default_samples() -> usize {
    5
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FacadeValue {
    pub patch: FacadePatch,
    pub value: f64,
    pub m: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FacadeResponse {
    pub building: u32,
    pub theme: String,
    /// Patches on the building before filtering.
    pub total: usize,
    /// Extrema over the returned patches; absent when none are returned.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub patches: Vec<FacadeValue>,
}

enum Theme {
    Component(usize),
    Metric(PerceptionMetric),
}

impl Theme {
    fn value(&self, m: &[f64]) -> f64 {
        match self {
            Theme::Component(i) => m[*i],
            Theme::Metric(w) => w.eval(m),
        }
    }
}

async fn facade(State(state): State<ServiceState>, body: Bytes) -> ApiResult<Json<FacadeResponse>> {
    let ws = state.workspace()?;
    let req: FacadeRequest = parse_body(&body)?;
    if ws.scene.building(req.building).is_none() {
        return Err(ApiError::NotFound(format!("unknown building id {}", req.building)));
    }
    if let Some([lo, hi]) = req.filter {
        if !(lo <= hi) {
            return Err(ApiError::bad(format!("empty filter interval [{lo}, {hi}]")));
        }
    }
    let theme = match ws.components().iter().position(|c| c == req.theme.trim()) {
        Some(i) => Theme::Component(i),
        None => Theme::Metric(ws.resolve_metric(&req.theme)?),
    };
    state
        .compute(move || {
            let summary =
                facade_summary(&ws.params, &ws.scene, req.building, req.patch_size, req.samples, req.seed)?;
            let total = summary.len();
            let patches: Vec<FacadeValue> = summary
                .into_iter()
                .map(|s| FacadeValue {
                    value: theme.value(s.m.as_slice()),
                    patch: s.patch,
                    m: s.m.0,
                })
                .filter(|p| req.filter.is_none_or(|[lo, hi]| p.value >= lo && p.value <= hi))
                .collect();
            let min = patches.iter().map(|p| p.value).reduce(f64::min);
            let max = patches.iter().map(|p| p.value).reduce(f64::max);
            Ok(Json(FacadeResponse {
                building: req.building,
                theme: req.theme,
                total,
                min,
                max,
                patches,
            }))
        })
        .await
}

// ---------------------------------------------------------------- latent map

#[derive(Debug, Deserialize)]
struct LatentParams {
    /// Interval filter on the ground truth, in target syntax.
    subset: Option<String>,
    /// `pca` (default) or `axes:i,j`.
    projection: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PurplePoint {
    /// Row of the ground-truth dataset.
    pub index: usize,
    pub xy: [f64; 2],
    /// Model prediction.
    pub m: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GreenPointOut {
    pub id: u64,
    pub rank: usize,
    pub viewpoint: Viewpoint,
    pub xy: [f64; 2],
    pub m: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LatentResponse {
    pub projection: Projection,
    pub purple: Vec<PurplePoint>,
    pub green: Vec<GreenPointOut>,
}

fn parse_projection(s: &str) -> ApiResult<Projection> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("pca") {
        return Ok(Projection::PrincipalComponents);
    }
    let pair = s
        .strip_prefix("axes:")
        .and_then(|rest| rest.split_once(','))
        .and_then(|(i, j)| Some((i.trim().parse().ok()?, j.trim().parse().ok()?)));
    match pair {
        Some((i, j)) => Ok(Projection::AxisPair { i, j }),
        None => Err(ApiError::bad(format!("unknown projection {s:?}; use pca or axes:i,j"))),
    }
}

async fn latent(
    State(state): State<ServiceState>,
    Query(params): Query<LatentParams>,
) -> ApiResult<Json<LatentResponse>> {
    let ws = state.workspace()?;
    let projection = params
        .projection
        .as_deref()
        .map(parse_projection)
        .transpose()?
        .unwrap_or(Projection::PrincipalComponents);
    let bounds = match params.subset.as_deref().filter(|s| !s.trim().is_empty()) {
        None => None,
        Some(src) => match TargetSpec::parse(src, ws.components())? {
            TargetSpec::Intervals { bounds } => Some(bounds),
            _ => return Err(ApiError::bad("subset filter must use name:lo-hi intervals")),
        },
    };
    let green = state.green();
    state
        .compute(move || {
            let projector = match (&projection, &ws.projector) {
                (Projection::PrincipalComponents, Some(p)) => Some(p.clone()),
                (_, Some(_)) => Some(Projector::fit(&ws.latents, projection)?),
                (_, None) => None,
            };
            let project = |latent: &[f64], fallback: [f64; 2]| match &projector {
                Some(p) => p.project(latent),
                None => fallback,
            };
            let keep = |m: &[f64]| match &bounds {
                None => true,
                Some(b) => b.iter().zip(m).all(|(bound, &v)| match bound {
                    Some((lo, hi)) => v >= *lo && v <= *hi,
                    None => true,
                }),
            };
            let purple = ws
                .dataset
                .iter()
                .enumerate()
                .filter(|(_, s)| keep(s.m_gt.as_slice()))
                .map(|(i, _)| PurplePoint {
                    index: i,
                    xy: project(&ws.latents[i], [0.0, 0.0]),
                    m: ws.predictions[i].clone(),
                })
                .collect();
            let green = green
                .into_iter()
                .map(|g| GreenPointOut {
                    id: g.id,
                    rank: g.rank,
                    viewpoint: g.result.viewpoint,
                    xy: project(&g.point.latent, g.point.xy),
                    m: g.result.m,
                })
                .collect();
            Ok(Json(LatentResponse {
                projection,
                purple,
                green,
            }))
        })
        .await
}
