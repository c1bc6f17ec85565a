use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use viewfield::analysis::{
    compare_models, material_scenario, predictor_rmse, region_error, CompareConfig, KnnModel,
    RegionConfig,
};
use viewfield::dataset::{
    build_dataset, load_csv, load_meta, sample_viewpoints, save_csv, save_meta, split, DatasetMeta,
    SamplingKind, SamplingStrategy, ViewSample, EYE_HEIGHT,
};
use viewfield::geom::Aabb;
use viewfield::net::{load_checkpoint, save_checkpoint, ModelMeta, ModelParams};
use viewfield::percept::{walkability, PerceptionMetric};
use viewfield::query::{
    direct_query, facade_summary, inverse_gradient, InverseConfig, InverseStatus, SearchSpace,
    TargetSpec,
};
use viewfield::raster::{render_falsecolor, BinSpec, Camera, CameraConfig};
use viewfield::scene::{generate_city, load_scene, save_scene, CityParams, FacadePatch, Scene};
use viewfield::train::{evaluate_rmse, train, TrainReport};
use viewfield::{Normalizer, Parametrization, Viewpoint};
use viewfield_service::{ServiceConfig, ServiceState, Workspace};

use crate::args::*;
use crate::output::{fmt_vec, Out};
use crate::user_bail;

pub fn run(cli: Cli) -> Result<()> {
    let mut out = Out::new(cli.pretty);
    match cli.command {
        Command::GenScene(a) => gen_scene(a, &mut out),
        Command::GenData(a) => gen_data(a, &mut out),
        Command::Train(a) => train_cmd(a, &mut out),
        Command::Eval(a) => eval(a, &mut out),
        Command::RegionError(a) => region_error_cmd(a, &mut out),
        Command::Query(a) => query(a, &mut out),
        Command::Inverse(a) => inverse(a, &mut out),
        Command::Facade(a) => facade(a, &mut out),
        Command::Render(a) => render(a, &mut out),
        Command::Serve(a) => serve(a, cli.threads),
    }
}

fn scene_at(path: &Path) -> Result<Scene> {
    load_scene(path).with_context(|| format!("loading scene {}", path.display()))
}

fn model_at(path: &Path) -> Result<ModelParams> {
    load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))
}

fn data_at(path: &Path) -> Result<Vec<ViewSample>> {
    load_csv(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn meta_at(path: &Path) -> Result<DatasetMeta> {
    match load_meta(path)? {
        Some(meta) => Ok(meta),
        None => user_bail!(
            "{} has no metadata sidecar; datasets written by gen-data have one",
            path.display()
        ),
    }
}

/// `walkability`, `name=expression`, or a bare expression.
fn metric(def: &str, components: &[String]) -> Result<PerceptionMetric> {
    if def.trim() == "walkability" {
        if let Some(w) = walkability(components) {
            return Ok(w);
        }
    }
    PerceptionMetric::from_definition(def, components)
        .map_err(|e| anyhow::Error::new(e).context(format!("metric {def:?}")))
}

// ---------------------------------------------------------------- gen-scene

#[derive(Serialize)]
struct SceneSummary<'a> {
    scene: &'a Path,
    seed: u64,
    classes: Vec<String>,
    triangles: usize,
    buildings: usize,
    aabb: Aabb,
}

fn gen_scene(a: GenSceneArgs, out: &mut Out) -> Result<()> {
    let params = CityParams {
        grid: a.grid,
        block_size: a.block_size,
        street_width: a.street_width,
        building_density: a.building_density,
        max_height: a.max_height,
        tree_density: a.tree_density,
        water_fraction: a.water_fraction,
    };
    let mut scene = generate_city(a.seed, &params)?;
    if let Some(f) = a.brick_fraction {
        if !(0.0..=1.0).contains(&f) {
            user_bail!("--brick-fraction must be in [0, 1], got {f}");
        }
        scene = material_scenario(&scene, f, a.seed)?;
    }
    save_scene(&scene, &a.out)?;
    out.record(&SceneSummary {
        scene: &a.out,
        seed: a.seed,
        classes: scene.class_names(),
        triangles: scene.triangles.len(),
        buildings: scene.buildings.len(),
        aabb: scene.aabb,
    })
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct DataSummary<'a> {
    data: &'a Path,
    rows: usize,
    components: &'a [String],
    mean: Vec<f64>,
}

fn gen_data(a: GenDataArgs, out: &mut Out) -> Result<()> {
    if a.n == 0 {
        user_bail!("--n must be at least 1");
    }
    let scene = scene_at(&a.scene)?;
    let kind = match a.strategy {
        Strategy::StreetLevel => SamplingKind::StreetLevel,
        Strategy::Facade => SamplingStrategy::facade_mounted().kind,
        Strategy::Uniform => SamplingKind::Uniform {
            z_min: a.z_min.unwrap_or(EYE_HEIGHT.min(scene.aabb.max.z)),
            z_max: a.z_max.unwrap_or(scene.aabb.max.z),
            pitch_min: a.pitch_min.to_radians(),
            pitch_max: a.pitch_max.to_radians(),
        },
    };
    let strategy = SamplingStrategy {
        kind,
        directions_per_position: a.directions,
    };
    let bins = match a.scalar_bins {
        Some(edges) => BinSpec::scalar(edges)?,
        None => BinSpec::categorical(scene.k()),
    };
    let camera = a.camera.config();
    let vps = sample_viewpoints(&scene, &strategy, a.n, a.seed)?;
    log::info!("rendering {} views", vps.len());
    let samples = build_dataset(&scene, &vps, &bins, &camera)?;
    save_csv(&samples, &a.out)?;
    let components = bins.component_names(&scene.class_names());
    let meta = DatasetMeta {
        components: components.clone(),
        bins,
        aabb: scene.aabb,
        camera,
        strategy: Some(strategy),
        seed: Some(a.seed),
        count: samples.len(),
    };
    save_meta(&meta, &a.out)?;
    let mut mean = vec![0.0; components.len()];
    for s in &samples {
        for (acc, v) in mean.iter_mut().zip(s.m_gt.as_slice()) {
            *acc += v / samples.len() as f64;
        }
    }
    out.record(&DataSummary {
        data: &a.out,
        rows: samples.len(),
        components: &components,
        mean,
    })
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a Path,
    report: &'a Path,
    train_rmse: f64,
    test_rmse: Option<f64>,
    final_loss: f64,
    epochs: usize,
    wall_time_s: f64,
}

fn train_cmd(a: TrainArgs, out: &mut Out) -> Result<()> {
    let dmeta = meta_at(&a.data)?;
    let all = data_at(&a.data)?;
    let (train_set, test_set) = match (&a.test_data, a.test_fraction) {
        (Some(path), _) => (all, data_at(path)?),
        (None, Some(f)) => split(&all, f, a.train.seed)?,
        (None, None) => (all, Vec::new()),
    };
    let meta = ModelMeta::new(dmeta.components, dmeta.bins, Normalizer::new(&dmeta.aabb))?;
    let config = a.train.config();
    let test = (!test_set.is_empty()).then_some(test_set.as_slice());
    let (params, report) = train(ModelParams::init(config.seed, meta), &train_set, test, &config)?;
    save_checkpoint(&params, &a.out)?;
    let report_path = a.report.unwrap_or_else(|| default_report_path(&a.out));
    write_report(&report, &report_path)?;
    out.record(&TrainSummary {
        model: &a.out,
        report: &report_path,
        train_rmse: report.train_rmse,
        test_rmse: report.test_rmse,
        final_loss: report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        epochs: report.epoch_loss.len(),
        wall_time_s: report.wall_time_s,
    })
}

fn default_report_path(model: &Path) -> PathBuf {
    model.with_file_name("report.json")
}

fn write_report(report: &TrainReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalRow {
    model: String,
    rmse: f64,
    samples: usize,
}

fn eval(a: EvalArgs, out: &mut Out) -> Result<()> {
    let test = data_at(&a.data)?;
    if test.is_empty() {
        user_bail!("{} has no rows", a.data.display());
    }
    if let Some(fractions) = &a.fractions {
        let train_path = a.train_data.as_ref().expect("clap enforces --train-data");
        let dmeta = meta_at(train_path)?;
        let train_set = data_at(train_path)?;
        let meta = ModelMeta::new(dmeta.components, dmeta.bins, Normalizer::new(&dmeta.aabb))?;
        let config = CompareConfig {
            fractions: fractions.clone(),
            knn: a.knn.clone(),
            train: a.train.config(),
            model_seed: a.train.seed,
            subset_seed: a.subset_seed,
        };
        let report = compare_models(&meta, &train_set, &test, &config)?;
        return if out.pretty() {
            out.text(&report.to_table())
        } else {
            out.record(&report)
        };
    }

    let mut rows = Vec::new();
    let mut normalizer = None;
    if let Some(path) = &a.model {
        let params = model_at(path)?;
        normalizer = Some(*params.normalizer());
        rows.push(EvalRow {
            model: "Ours".into(),
            rmse: evaluate_rmse(&params, &test)?,
            samples: test.len(),
        });
    }
    if let Some(path) = &a.train_data {
        let train_set = data_at(path)?;
        let normalizer = match normalizer {
            Some(n) => n,
            None => Normalizer::new(&meta_at(path)?.aabb),
        };
        for &k in &a.knn {
            let knn = KnnModel::new(&train_set, normalizer, k)?;
            rows.push(EvalRow {
                model: format!("{k}-Neighbors"),
                rmse: predictor_rmse(&knn, &test)?,
                samples: test.len(),
            });
        }
    }
    if rows.is_empty() {
        user_bail!("nothing to evaluate: give --model and/or --train-data");
    }
    out.records(&rows, || {
        let mut t = format!("{:<14} {:>8}\n", "Model", "RMSE");
        for r in &rows {
            t += &format!("{:<14} {:>8.4}\n", r.model, r.rmse);
        }
        t
    })
}

// ---------------------------------------------------------------- region-error

fn region_error_cmd(a: RegionErrorArgs, out: &mut Out) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let params = model_at(&a.model)?;
    let config = RegionConfig {
        side: a.side,
        threshold: a.threshold,
        eye_height: a.eye_height,
        directions: a.directions,
        camera: a.camera.config(),
    };
    let bins = params.meta.bins.clone();
    let mut reports = vec![("Ours".to_string(), region_error(&scene, &params, &bins, &config)?)];
    if let Some(path) = &a.knn_data {
        let train_set = data_at(path)?;
        let knn = KnnModel::new(&train_set, *params.normalizer(), a.knn)?;
        reports.push((format!("{}-Neighbors", a.knn), region_error(&scene, &knn, &bins, &config)?));
    }
    for (name, report) in reports {
        if out.pretty() {
            out.text(&format!("{name}\n{}\n", report.to_table()))?;
        } else {
            #[derive(Serialize)]
            struct Tagged<'a, T> {
                model: &'a str,
                #[serde(flatten)]
                report: &'a T,
            }
            out.record(&Tagged {
                model: &name,
                report: &report,
            })?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- query

#[derive(Serialize)]
struct QueryRow {
    viewpoint: Viewpoint,
    m: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

fn read_viewpoints(path: &Path) -> Result<Vec<Viewpoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut vps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        // dataset rows carry the distribution after the five viewpoint columns
        let head: Vec<&str> = line.splitn(6, ',').take(5).collect();
        let vp = head
            .join(",")
            .parse::<Viewpoint>()
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        vps.push(vp);
    }
    Ok(vps)
}

fn query(a: QueryArgs, out: &mut Out) -> Result<()> {
    let params = model_at(&a.model)?;
    let mut vps = Vec::new();
    for s in &a.viewpoints {
        vps.push(s.parse::<Viewpoint>().with_context(|| format!("--viewpoint {s:?}"))?);
    }
    if let Some(path) = &a.input {
        vps.extend(read_viewpoints(path)?);
    }
    if vps.is_empty() {
        user_bail!("no viewpoints given; use --viewpoint or --input");
    }
    let w = a.metric.as_deref().map(|d| metric(d, &params.meta.components)).transpose()?;
    let q = direct_query(&params, &vps, w.as_ref())?;
    let rows: Vec<QueryRow> = vps
        .iter()
        .zip(&q.distributions)
        .enumerate()
        .map(|(i, (vp, d))| QueryRow {
            viewpoint: *vp,
            m: d.0.clone(),
            value: q.values.as_ref().map(|v| v[i]),
        })
        .collect();
    out.records(&rows, || {
        let mut t = format!("{:<44} {}\n", "viewpoint", params.meta.components.join(" "));
        for r in &rows {
            t += &format!("{:<44} {}", r.viewpoint.to_string(), fmt_vec(&r.m));
            if let Some(v) = r.value {
                t += &format!("  {}={v:.4}", w.as_ref().map_or("", |w| w.name.as_str()));
            }
            t += "\n";
        }
        t
    })
}

// ---------------------------------------------------------------- inverse

#[derive(Serialize)]
struct InverseRow {
    rank: usize,
    viewpoint: Viewpoint,
    m: Vec<f64>,
    loss: f64,
    status: InverseStatus,
    iterations: usize,
    restart: usize,
}

fn inverse(a: InverseArgs, out: &mut Out) -> Result<()> {
    let params = model_at(&a.model)?;
    let components = &params.meta.components;
    let target = match (&a.target, &a.metric, a.value) {
        (Some(t), None, _) => TargetSpec::parse(t, components)
            .map_err(|e| anyhow::Error::new(e).context(format!("--target {t:?}")))?,
        (None, Some(m), Some(v)) => TargetSpec::metric(metric(m, components)?, v),
        _ => user_bail!("give --target, or --metric with --value"),
    };
    target.validate(params.k())?;
    let region = match a.plane.as_deref().or(a.region.as_deref()) {
        Some(s) => Some(s.parse::<Parametrization>().with_context(|| format!("region {s:?}"))?),
        None => None,
    };
    let direction = match &a.direction {
        Some(s) => {
            let v: Vec<f64> = s
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| crate::UserError(format!("--direction {s:?}: expected yaw,pitch")))?;
            if v.len() != 2 {
                user_bail!("--direction {s:?}: expected yaw,pitch");
            }
            Some([v[0], v[1]])
        }
        None => None,
    };
    let config = InverseConfig {
        learning_rate: a.lr,
        max_iterations: a.max_iterations,
        tolerance: a.tolerance,
        restarts: a.n,
        seed: a.seed,
        space: SearchSpace { region, direction },
    };
    let results = inverse_gradient(&params, &target, &config)?;
    let rows: Vec<InverseRow> = results
        .into_iter()
        .enumerate()
        .map(|(rank, r)| InverseRow {
            rank,
            viewpoint: r.viewpoint,
            m: r.m,
            loss: r.loss,
            status: r.status,
            iterations: r.iterations,
            restart: r.restart,
        })
        .collect();
    out.records(&rows, || {
        let mut t = format!("{:>4} {:>10} {:<15} {:<44} {}\n", "rank", "loss", "status", "viewpoint", components.join(" "));
        for r in &rows {
            let status = match r.status {
                InverseStatus::Converged => "converged",
                InverseStatus::MaxIterations => "max_iterations",
            };
            t += &format!(
                "{:>4} {:>10.3e} {:<15} {:<44} {}\n",
                r.rank,
                r.loss,
                status,
                r.viewpoint.to_string(),
                fmt_vec(&r.m)
            );
        }
        t
    })
}

// ---------------------------------------------------------------- facade

#[derive(Serialize)]
struct FacadeRow {
    patch: FacadePatch,
    m: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

fn facade(a: FacadeArgs, out: &mut Out) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let params = model_at(&a.model)?;
    let components = &params.meta.components;
    let theme: Option<Box<dyn Fn(&[f64]) -> f64>> = match a.theme.as_deref() {
        None => None,
        Some(t) => match components.iter().position(|c| c == t.trim()) {
            Some(i) => Some(Box::new(move |m: &[f64]| m[i])),
            None => {
                let w = metric(t, components)?;
                Some(Box::new(move |m: &[f64]| w.eval(m)))
            }
        },
    };
    let summary = facade_summary(&params, &scene, a.building, a.patch_size, a.samples, a.seed)?;
    let rows: Vec<FacadeRow> = summary
        .into_iter()
        .map(|s| FacadeRow {
            value: theme.as_ref().map(|f| f(s.m.as_slice())),
            patch: s.patch,
            m: s.m.0,
        })
        .collect();
    out.records(&rows, || {
        let mut t = format!("{:>6} {:>4} {:>4}  {}\n", "facade", "row", "col", components.join(" "));
        for r in &rows {
            t += &format!("{:>6} {:>4} {:>4}  {}", r.patch.facade, r.patch.row, r.patch.col, fmt_vec(&r.m));
            if let Some(v) = r.value {
                t += &format!("  {v:.4}");
            }
            t += "\n";
        }
        t
    })
}

// ---------------------------------------------------------------- render

#[derive(Serialize)]
struct RenderSummary<'a> {
    image: &'a Path,
    width: usize,
    height: usize,
    viewpoint: Viewpoint,
}

fn render(a: RenderArgs, out: &mut Out) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let vp: Viewpoint = a.viewpoint.parse().with_context(|| format!("--viewpoint {:?}", a.viewpoint))?;
    let config = CameraConfig {
        vertical_fov_deg: a.fov,
        ..CameraConfig::default().with_size(a.width, a.height)
    };
    config.validate()?;
    let png = render_falsecolor(&scene, &Camera::new(vp, config))?;
    std::fs::write(&a.out, png).with_context(|| format!("writing {}", a.out.display()))?;
    out.record(&RenderSummary {
        image: &a.out,
        width: a.width,
        height: a.height,
        viewpoint: vp,
    })
}

// ---------------------------------------------------------------- serve

fn serve(a: ServeArgs, threads: Option<usize>) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let params = model_at(&a.model)?;
    let dataset = match &a.data {
        Some(path) => data_at(path)?,
        None => Vec::new(),
    };
    let components = params.meta.components.clone();
    let mut metrics: Vec<PerceptionMetric> = walkability(&components).into_iter().collect();
    for def in &a.metrics {
        let w = metric(def, &components)?;
        metrics.retain(|m| m.name != w.name);
        metrics.push(w);
    }
    if !(a.timeout > 0.0 && a.timeout.is_finite()) {
        user_bail!("--timeout must be positive");
    }
    let workspace = Workspace::new(scene, params, dataset, metrics)?;
    let defaults = ServiceConfig::default();
    let config = ServiceConfig {
        timeout: Duration::from_secs_f64(a.timeout),
        workers: a.workers.or(threads).unwrap_or(defaults.workers),
        cors_origin: a.cors_origin.clone(),
        ..defaults
    };
    let state = ServiceState::new(workspace, config);
    let mut runtime = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        runtime.worker_threads(n.max(1));
    }
    runtime.enable_all().build()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host, a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        println!("{}", serde_json::json!({ "listening": format!("http://{addr}") }));
        viewfield_service::serve(listener, state).await?;
        Ok(())
    })
}
