use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use tokio::sync::Semaphore;
use viewfield::analysis::{latent_codes, LatentPoint, Projection, Projector};
use viewfield::dataset::ViewSample;
use viewfield::net::ModelParams;
use viewfield::percept::PerceptionMetric;
use viewfield::query::InverseResult;
use viewfield::raster::CameraConfig;
use viewfield::scene::Scene;
use viewfield::{Error, Result};

use crate::error::ApiError;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Upper bound on any request, queueing included.
    pub timeout: Duration,
    /// Concurrent compute jobs; further requests wait for a slot.
    pub workers: usize,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    /// Field of view used for renders and thumbnails.
    pub camera: CameraConfig,
    pub thumbnail_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            timeout: Duration::from_secs(30),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cors_origin: None,
            camera: CameraConfig::default(),
            thumbnail_size: 128,
        }
    }
}

/// Immutable data behind every endpoint.
pub struct Workspace {
    pub scene: Scene,
    pub params: ModelParams,
    /// Ground-truth rows for the parallel coordinates view; also the purple
    /// points of the latent map.
    pub dataset: Vec<ViewSample>,
    pub metrics: Vec<PerceptionMetric>,
    pub(crate) latents: Vec<Vec<f64>>,
    pub(crate) predictions: Vec<Vec<f64>>,
    pub(crate) projector: Option<Projector>,
}

impl Workspace {
    /// Checks that scene, model, dataset and metrics share one component table
    /// and precomputes the dataset's latent codes.
    pub fn new(
        scene: Scene,
        params: ModelParams,
        dataset: Vec<ViewSample>,
        metrics: Vec<PerceptionMetric>,
    ) -> Result<Self> {
        let meta = &params.meta;
        let expected = meta.bins.component_names(&scene.class_names());
        if meta.k != expected.len() || meta.components != expected {
            return Err(Error::Validation(format!(
                "model components {:?} do not match the scene's {:?}",
                meta.components, expected
            )));
        }
        if matches!(meta.bins, viewfield::raster::BinSpec::Scalar { .. }) && scene.tri_value.is_none() {
            return Err(Error::Validation(
                "model uses scalar bins but the scene has no scalar layer".into(),
            ));
        }
        if let Some(i) = dataset.iter().position(|s| s.m_gt.len() != meta.k) {
            return Err(Error::Validation(format!(
                "dataset row {i} has {} components, the model has {}",
                dataset[i].m_gt.len(),
                meta.k
            )));
        }
        if let Some(w) = metrics.iter().find(|w| w.components() != meta.components.as_slice()) {
            return Err(Error::Validation(format!(
                "metric '{}' was compiled for another component table",
                w.name
            )));
        }

        let (latents, predictions, projector) = if dataset.is_empty() {
            (Vec::new(), Vec::new(), None)
        } else {
            let vps: Vec<_> = dataset.iter().map(|s| s.viewpoint).collect();
            let latents = latent_codes(&params, &vps)?;
            let predictions = params
                .predict(&vps)?
                .into_iter()
                .map(|d| d.0)
                .collect();
            let projector = Projector::fit(&latents, Projection::PrincipalComponents)?;
            (latents, predictions, Some(projector))
        };
        Ok(Workspace {
            scene,
            params,
            dataset,
            metrics,
            latents,
            predictions,
            projector,
        })
    }

    pub fn components(&self) -> &[String] {
        &self.params.meta.components
    }

    pub fn metric(&self, name: &str) -> Option<&PerceptionMetric> {
        self.metrics.iter().find(|w| w.name == name)
    }

    /// A registered metric by name, otherwise `name=expr` or a bare expression.
    pub fn resolve_metric(&self, def: &str) -> std::result::Result<PerceptionMetric, ApiError> {
        match self.metric(def.trim()) {
            Some(w) => Ok(w.clone()),
            None => Ok(PerceptionMetric::from_definition(def, self.components())?),
        }
    }
}

/// A generated view kept for the latent map and the gallery.
#[derive(Debug, Clone)]
pub struct GreenPoint {
    pub id: u64,
    pub rank: usize,
    pub result: InverseResult,
    pub point: LatentPoint,
}

struct Inner {
    config: ServiceConfig,
    workspace: RwLock<Option<Arc<Workspace>>>,
    green: Mutex<Vec<GreenPoint>>,
    next_id: Mutex<u64>,
    workers: Arc<Semaphore>,
}

/// Shared handle passed to every request handler.
#[derive(Clone)]
pub struct ServiceState {
    inner: Arc<Inner>,
}

impl ServiceState {
    /// A state with nothing loaded; data endpoints answer 503 until [`load`](Self::load).
    pub fn empty(config: ServiceConfig) -> Self {
        let workers = config.workers.max(1);
        ServiceState {
            inner: Arc::new(Inner {
                config,
                workspace: RwLock::new(None),
                green: Mutex::new(Vec::new()),
                next_id: Mutex::new(0),
                workers: Arc::new(Semaphore::new(workers)),
            }),
        }
    }

    pub fn new(workspace: Workspace, config: ServiceConfig) -> Self {
        let state = ServiceState::empty(config);
        state.load(workspace);
        state
    }

    /// Installs a workspace and clears generated views.
    pub fn load(&self, workspace: Workspace) {
        *self.inner.workspace.write().expect("workspace lock") = Some(Arc::new(workspace));
        self.inner.green.lock().expect("green lock").clear();
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn workspace(&self) -> std::result::Result<Arc<Workspace>, ApiError> {
        self.inner
            .workspace
            .read()
            .expect("workspace lock")
            .clone()
            .ok_or_else(|| ApiError::Unavailable("no scene and model loaded yet".into()))
    }

    pub fn green(&self) -> Vec<GreenPoint> {
        self.inner.green.lock().expect("green lock").clone()
    }

    pub fn green_point(&self, id: u64) -> Option<GreenPoint> {
        self.inner
            .green
            .lock()
            .expect("green lock")
            .iter()
            .find(|g| g.id == id)
            .cloned()
    }

    /// Replaces the generated views, assigning fresh ids in rank order.
    pub(crate) fn replace_green(&self, ranked: Vec<(InverseResult, LatentPoint)>) -> Vec<GreenPoint> {
        let mut next = self.inner.next_id.lock().expect("id lock");
        let points: Vec<GreenPoint> = ranked
            .into_iter()
            .enumerate()
            .map(|(rank, (result, point))| {
                let id = *next;
                *next += 1;
                GreenPoint {
                    id,
                    rank,
                    result,
                    point,
                }
            })
            .collect();
        *self.inner.green.lock().expect("green lock") = points.clone();
        points
    }

    /// Runs CPU-bound work on the blocking pool, at most `workers` at a time,
    /// and gives up with 503 after the configured timeout.
    pub(crate) async fn compute<T, F>(&self, job: F) -> std::result::Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
    {
        let workers = self.inner.workers.clone();
        let run = async move {
            let permit = workers
                .acquire_owned()
                .await
                .map_err(|_| ApiError::Unavailable("worker pool closed".into()))?;
            tokio::task::spawn_blocking(move || {
                let _permit = permit;
                job()
            })
            .await
            .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
        };
        let timeout = self.inner.config.timeout;
        tokio::time::timeout(timeout, run).await.map_err(|_| {
            ApiError::Unavailable(format!("request exceeded {} s", timeout.as_secs_f64()))
        })?
    }
}
