//! Direct and inverse queries against a trained field.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Parametrization, ThematicDistribution, Viewpoint};
use crate::net::ModelParams;
use crate::percept::{ParseError, PerceptionMetric};
use crate::scene::{facade_patches, FacadePatch, Scene};

/// What an inverse query is looking for.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// Squared error against `target` over the components where `mask` is set.
    Exact { target: Vec<f64>, mask: Vec<bool> },
    /// Per-component `[lo, hi]` ranges; unconstrained components are `None`.
    Intervals { bounds: Vec<Option<(f64, f64)>> },
    Metric { metric: PerceptionMetric, value: f64 },
}

fn resolve(names: &[String], name: &str) -> Option<usize> {
    names
        .iter()
        .position(|n| n == name)
        .or_else(|| name.strip_prefix("m_").and_then(|s| names.iter().position(|n| n == s)))
}

fn parse_unit(text: &str, offset: usize) -> std::result::Result<f64, ParseError> {
    let t = text.trim();
    let v: f64 = t
        .parse()
        .map_err(|_| ParseError::new(offset, format!("invalid number {t:?}")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(ParseError::new(offset, format!("{v} is outside [0, 1]")));
    }
    Ok(v)
}

/// Byte offset of the first non-whitespace character of `s[start..]`.
fn skip_ws(s: &str, start: usize) -> usize {
    start + (s[start..].len() - s[start..].trim_start().len())
}

/// Splits `lo-hi` at the range dash, ignoring exponent signs.
fn split_range(s: &str) -> Option<(&str, &str)> {
    let bytes = s.as_bytes();
    (1..bytes.len())
        .find(|&i| bytes[i] == b'-' && !matches!(bytes[i - 1], b'e' | b'E'))
        .map(|i| (&s[..i], &s[i + 1..]))
}

impl TargetSpec {
    /// Full-vector target with every component active.
    pub fn exact(target: &[f64]) -> Self {
        TargetSpec::Exact {
            target: target.to_vec(),
            mask: vec![true; target.len()],
        }
    }

    pub fn metric(metric: PerceptionMetric, value: f64) -> Self {
        TargetSpec::Metric { metric, value }
    }

    /// Parses `tree:0.2-0.4,sky:0.3-0.5` (intervals) or `tree=0.3,sky=0.4`
    /// (exact on the listed components).
    pub fn parse(src: &str, names: &[String]) -> std::result::Result<Self, ParseError> {
        if src.trim().is_empty() {
            return Err(ParseError::new(0, "empty target"));
        }
        let k = names.len();
        let mut bounds = vec![None; k];
        let mut target = vec![0.0; k];
        let mut mask = vec![false; k];
        let mut intervals = None;
        let mut start = 0;
        for item in src.split(',') {
            let item_start = start;
            let at = skip_ws(src, start);
            start += item.len() + 1;
            let (is_interval, sep) = match (item.find(':'), item.find('=')) {
                (Some(i), None) => (true, i),
                (None, Some(i)) => (false, i),
                _ => {
                    return Err(ParseError::new(
                        at,
                        "expected name:lo-hi or name=value",
                    ))
                }
            };
            if *intervals.get_or_insert(is_interval) != is_interval {
                return Err(ParseError::new(at, "cannot mix ranges and exact values"));
            }
            let name = item[..sep].trim();
            let c = resolve(names, name)
                .ok_or_else(|| ParseError::new(at, format!("unknown component '{name}'")))?;
            if mask[c] || bounds[c].is_some() {
                return Err(ParseError::new(at, format!("component '{name}' given twice")));
            }
            let value_at = skip_ws(src, item_start + sep + 1);
            let rest = &item[sep + 1..];
            if is_interval {
                let (lo, hi) = split_range(rest.trim())
                    .ok_or_else(|| ParseError::new(value_at, "expected lo-hi"))?;
                let lo = parse_unit(lo, value_at)?;
                let hi = parse_unit(hi, value_at)?;
                if lo > hi {
                    return Err(ParseError::new(value_at, format!("empty range {lo}-{hi}")));
                }
                bounds[c] = Some((lo, hi));
            } else {
                target[c] = parse_unit(rest, value_at)?;
                mask[c] = true;
            }
        }
        Ok(if intervals == Some(true) {
            TargetSpec::Intervals { bounds }
        } else {
            TargetSpec::Exact { target, mask }
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            TargetSpec::Exact { target, mask } => {
                if target.len() != k || mask.len() != k {
                    return Err(Error::invalid(format!("target must have {k} components")));
                }
                if !mask.iter().any(|&m| m) {
                    return Err(Error::invalid("target has no active component"));
                }
                if target.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("target values must be finite"));
                }
            }
            TargetSpec::Intervals { bounds } => {
                if bounds.len() != k {
                    return Err(Error::invalid(format!("target must have {k} components")));
                }
                if bounds.iter().all(Option::is_none) {
                    return Err(Error::invalid("target has no active constraint"));
                }
                for &(lo, hi) in bounds.iter().flatten() {
                    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                        return Err(Error::invalid(format!("invalid range {lo}-{hi}")));
                    }
                }
            }
            TargetSpec::Metric { metric, value } => {
                if metric.components().len() != k {
                    return Err(Error::invalid("metric was compiled for another component table"));
                }
                if !value.is_finite() {
                    return Err(Error::invalid("metric target must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn loss(&self, m: &[f64]) -> f64 {
        self.loss_grad(m).0
    }

    /// Loss and `∂loss/∂m`.
    pub fn loss_grad(&self, m: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; m.len()];
        let mut loss = 0.0;
        match self {
            TargetSpec::Exact { target, mask } => {
                for i in 0..m.len() {
                    if mask[i] {
                        let d = m[i] - target[i];
                        loss += d * d;
                        grad[i] = 2.0 * d;
                    }
                }
            }
            TargetSpec::Intervals { bounds } => {
                for (i, b) in bounds.iter().enumerate() {
                    if let Some((lo, hi)) = *b {
                        let d = if m[i] < lo {
                            m[i] - lo
                        } else if m[i] > hi {
                            m[i] - hi
                        } else {
                            continue;
                        };
                        loss += d * d;
                        grad[i] = 2.0 * d;
                    }
                }
            }
            TargetSpec::Metric { metric, value } => {
                let (w, g) = metric.eval_grad(m);
                let d = w - value;
                loss = d * d;
                for (o, gi) in grad.iter_mut().zip(g) {
                    *o = 2.0 * d * gi;
                }
            }
        }
        (loss, grad)
    }
}

/// Where inverse queries may look.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Restricts positions to ζ([0,1]²); otherwise the model's bounding box.
    pub region: Option<Parametrization>,
    /// Fixed `[yaw, pitch]` in radians.
    pub direction: Option<[f64; 2]>,
}

/// Optimization variables: normalized coordinates, or `(a, b, ·, yaw, pitch)`
/// with the last two normalized when a region is set.
type Vars = [f64; 5];

impl SearchSpace {
    fn random(&self, rng: &mut ChaCha8Rng) -> Vars {
        let mut v = [0.0; 5];
        if self.region.is_some() {
            v[0] = rng.gen_range(0.0..=1.0);
            v[1] = rng.gen_range(0.0..=1.0);
        } else {
            for x in &mut v[..3] {
                *x = rng.gen_range(-1.0..=1.0);
            }
        }
        v[3] = rng.gen_range(-1.0..1.0);
        v[4] = rng.gen_range(-1.0..=1.0);
        v
    }

    fn project(&self, v: &mut Vars) {
        if self.region.is_some() {
            v[0] = v[0].clamp(0.0, 1.0);
            v[1] = v[1].clamp(0.0, 1.0);
        } else {
            for x in &mut v[..3] {
                *x = x.clamp(-1.0, 1.0);
            }
        }
        v[3] = (v[3] + 1.0).rem_euclid(2.0) - 1.0;
        if v[3] >= 1.0 {
            v[3] = -1.0;
        }
        v[4] = v[4].clamp(-1.0, 1.0);
    }

    fn viewpoint(&self, params: &ModelParams, v: &Vars) -> Viewpoint {
        let norm = params.normalizer();
        let mut vp = match &self.region {
            None => norm.denormalize(v),
            Some(region) => {
                let p = region.point(v[0], v[1]);
                let dir = norm.denormalize(&[0.0, 0.0, 0.0, v[3], v[4]]);
                Viewpoint {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    ..dir
                }
            }
        };
        if let Some([alpha, gamma]) = self.direction {
            vp.alpha = alpha;
            vp.gamma = gamma;
        }
        Viewpoint::new(vp.x, vp.y, vp.z, vp.alpha, vp.gamma)
    }

    fn from_viewpoint(&self, params: &ModelParams, vp: &Viewpoint) -> Result<Vars> {
        if self.region.is_some() {
            return Err(Error::invalid(
                "explicit starting viewpoints need an unconstrained search space",
            ));
        }
        let mut v = params.normalizer().normalize(vp);
        self.project(&mut v);
        Ok(v)
    }

    fn gradient(&self, v: &Vars, normalized: &[f64; 5], raw: &[f64; 5]) -> Vars {
        let mut g = *normalized;
        if let Some(region) = &self.region {
            let (da, db) = region.jacobian(v[0], v[1]);
            g[0] = raw[0] * da.x + raw[1] * da.y + raw[2] * da.z;
            g[1] = raw[0] * db.x + raw[1] * db.y + raw[2] * db.z;
            g[2] = 0.0;
        }
        if self.direction.is_some() {
            g[3] = 0.0;
            g[4] = 0.0;
        }
        g
    }

    /// `n` seeded samples; a larger `n` extends a smaller one with the same seed.
    pub fn sample(&self, params: &ModelParams, n: usize, seed: u64) -> Vec<Viewpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = self.random(&mut rng);
                self.viewpoint(params, &v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseConfig {
    /// Step size in normalized coordinates (or plane parameters).
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub space: SearchSpace,
}

impl Default for InverseConfig {
    fn default() -> Self {
        InverseConfig {
            learning_rate: 0.01,
            max_iterations: 500,
            tolerance: 1e-3,
            restarts: 32,
            seed: 0,
            space: SearchSpace::default(),
        }
    }
}

impl InverseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.max_iterations < 1 {
            return Err(Error::invalid("max iterations must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if self.restarts < 1 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if let Some(d) = self.space.direction {
            if !d.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("fixed direction must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseResult {
    pub viewpoint: Viewpoint,
    pub m: Vec<f64>,
    pub loss: f64,
    pub status: InverseStatus,
    pub iterations: usize,
    pub restart: usize,
}

struct Run {
    vars: Vars,
    best: Vars,
    best_loss: f64,
    best_m: Vec<f64>,
    iterations: usize,
    done: bool,
}

fn by_loss(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.is_nan().cmp(&b.is_nan()))
}

/// Gradient descent from `config.restarts` seeded random starting points.
/// Results are sorted by loss; each reports the lowest-loss iterate of its run.
pub fn inverse_gradient(
    params: &ModelParams,
    target: &TargetSpec,
    config: &InverseConfig,
) -> Result<Vec<InverseResult>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts = (0..config.restarts)
        .map(|_| config.space.random(&mut rng))
        .collect();
    descend(params, target, config, starts)
}

/// As [`inverse_gradient`], starting from the given viewpoints instead.
pub fn inverse_gradient_from(
    params: &ModelParams,
    target: &TargetSpec,
    config: &InverseConfig,
    starts: &[Viewpoint],
) -> Result<Vec<InverseResult>> {
    config.validate()?;
    if starts.is_empty() {
        return Err(Error::invalid("no starting viewpoints"));
    }
    let starts = starts
        .iter()
        .map(|vp| config.space.from_viewpoint(params, vp))
        .collect::<Result<_>>()?;
    descend(params, target, config, starts)
}

fn descend(
    params: &ModelParams,
    target: &TargetSpec,
    config: &InverseConfig,
    starts: Vec<Vars>,
) -> Result<Vec<InverseResult>> {
    target.validate(params.k())?;
    let space = &config.space;
    let mut runs: Vec<Run> = starts
        .into_iter()
        .map(|vars| Run {
            vars,
            best: vars,
            best_loss: f64::INFINITY,
            best_m: Vec::new(),
            iterations: 0,
            done: false,
        })
        .collect();
    loop {
        let active: Vec<usize> = (0..runs.len()).filter(|&i| !runs[i].done).collect();
        if active.is_empty() {
            break;
        }
        let vps: Vec<Viewpoint> = active
            .iter()
            .map(|&i| space.viewpoint(params, &runs[i].vars))
            .collect();
        let grads = params.backward_inputs(&vps, |_, m| target.loss_grad(m))?;
        for (&i, g) in active.iter().zip(grads) {
            let run = &mut runs[i];
            if g.loss < run.best_loss || run.best_m.is_empty() {
                run.best = run.vars;
                run.best_loss = g.loss;
                run.best_m = g.m;
            }
            if g.loss <= config.tolerance || run.iterations >= config.max_iterations {
                run.done = true;
                continue;
            }
            let step = space.gradient(&run.vars, &g.normalized, &g.raw);
            if step.iter().any(|v| !v.is_finite()) {
                run.done = true;
                continue;
            }
            for (x, d) in run.vars.iter_mut().zip(step) {
                *x -= config.learning_rate * d;
            }
            space.project(&mut run.vars);
            run.iterations += 1;
        }
    }
    let mut results: Vec<InverseResult> = runs
        .into_iter()
        .enumerate()
        .map(|(restart, run)| InverseResult {
            viewpoint: space.viewpoint(params, &run.best),
            status: if run.best_loss <= config.tolerance {
                InverseStatus::Converged
            } else {
                InverseStatus::MaxIterations
            },
            m: run.best_m,
            loss: run.best_loss,
            iterations: run.iterations,
            restart,
        })
        .collect();
    results.sort_by(|a, b| by_loss(a.loss, b.loss).then(a.restart.cmp(&b.restart)));
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepHit {
    pub viewpoint: Viewpoint,
    pub m: Vec<f64>,
    pub loss: f64,
    /// Position in the seeded sample sequence.
    pub index: usize,
}

/// Evaluates `n` seeded random viewpoints of `space` and keeps the `q` best.
pub fn inverse_sweep(
    params: &ModelParams,
    target: &TargetSpec,
    space: &SearchSpace,
    n: usize,
    q: usize,
    seed: u64,
) -> Result<Vec<SweepHit>> {
    if q < 1 || n < q {
        return Err(Error::invalid(format!("need n >= q >= 1, got n={n}, q={q}")));
    }
    target.validate(params.k())?;
    let vps = space.sample(params, n, seed);
    let inf = params.forward(&vps)?;
    let mut hits: Vec<SweepHit> = vps
        .into_iter()
        .enumerate()
        .map(|(index, viewpoint)| {
            let m: Vec<f64> = inf.output_row(index).iter().map(|&v| v as f64).collect();
            SweepHit {
                viewpoint,
                loss: target.loss(&m),
                m,
                index,
            }
        })
        .collect();
    hits.sort_by(|a, b| by_loss(a.loss, b.loss).then(a.index.cmp(&b.index)));
    hits.truncate(q);
    Ok(hits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectQuery {
    pub distributions: Vec<ThematicDistribution>,
    /// `ω(m)` per viewpoint when a metric was supplied.
    pub values: Option<Vec<f64>>,
    /// Viewpoints moved into the model's bounding box before evaluation.
    pub clamped: usize,
}

pub fn direct_query(
    params: &ModelParams,
    viewpoints: &[Viewpoint],
    metric: Option<&PerceptionMetric>,
) -> Result<DirectQuery> {
    if let Some(metric) = metric {
        if metric.components() != params.meta.components.as_slice() {
            return Err(Error::invalid(format!(
                "metric '{}' was compiled for another component table",
                metric.name
            )));
        }
    }
    let norm = params.normalizer();
    let mut clamped = 0;
    let vps: Vec<Viewpoint> = viewpoints
        .iter()
        .map(|vp| {
            if vp.is_finite() && !norm.contains(vp) {
                clamped += 1;
                norm.clamp_position(vp)
            } else {
                *vp
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} viewpoint(s) outside the model bounds were clamped");
    }
    let distributions = params.predict(&vps)?;
    let values = metric.map(|w| distributions.iter().map(|m| w.eval(m.as_slice())).collect());
    Ok(DirectQuery {
        distributions,
        values,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub patch: FacadePatch,
    pub m: ThematicDistribution,
    /// The sampled viewpoints whose predictions were averaged.
    pub samples: Vec<Viewpoint>,
}

/// Mean prediction over `p` random points per facade tile, each looking
/// along the tile's outward normal.
pub fn facade_summary(
    params: &ModelParams,
    scene: &Scene,
    building: u32,
    patch_size: f64,
    p: usize,
    seed: u64,
) -> Result<Vec<PatchSummary>> {
    let b = scene
        .building(building)
        .ok_or(Error::UnknownBuilding(building))?;
    if p < 1 {
        return Err(Error::invalid("samples per patch must be at least 1"));
    }
    let patches = facade_patches(b, patch_size)?;
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vps = Vec::with_capacity(patches.len() * p);
    for patch in &patches {
        for _ in 0..p {
            let point = patch.point(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
            vps.push(Viewpoint::looking(point, patch.normal));
        }
    }
    let query = direct_query(params, &vps, None)?;
    let k = params.k();
    Ok(patches
        .into_iter()
        .enumerate()
        .map(|(i, patch)| {
            let block = &query.distributions[i * p..(i + 1) * p];
            let mut m = vec![0.0; k];
            for d in block {
                for (acc, v) in m.iter_mut().zip(d.as_slice()) {
                    *acc += v;
                }
            }
            for v in &mut m {
                *v /= p as f64;
            }
            PatchSummary {
                patch,
                m: ThematicDistribution(m),
                samples: vps[i * p..(i + 1) * p].to_vec(),
            }
        })
        .collect())
}
