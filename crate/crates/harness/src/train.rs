//! Training loops for the volume and splat pipelines.

use crate::config::{ExperimentConfig, FieldKind, GaugeKind, OffsetBackend, PipelineKind};
use crate::image::{self, psnr_from_mse, ImageError, ImageFormat};
use crate::metrics::{to_csv, MetricsRow};
use crate::scene::{self, Scene};
use erm_core::diff::container;
use erm_core::diff::{AdamState, Ctx, DiffError, ParamId, ParamStore, SparseGrad, Tape};
use erm_core::fields::Field;
use erm_core::gauge::{EvolutiveGauge, GaugeTransform, OffsetKind, Orthogonal};
use erm_core::par;
use erm_core::primitives::{
    render_splats, rasterize, DirectionSet, GaussianInit, GaussianSet, OrganizeConfig, OrganizeReport, Organizer,
};
use erm_core::relay::{Element, RelayError, RelaySchedule, RelayState};
use erm_core::sampling::{SamplerMode, SamplingError, USource};
use erm_core::volren::{render_image, render_ray, Camera, ImageBuffer, SamplerConfig, VolumePipeline, WHITE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Rays per worker task. Fixed so results do not depend on the worker count.
pub const RAY_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("unknown scene preset `{0}`")]
    Scene(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Relay(#[from] RelayError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("non-finite loss at iteration {iter}; last gradient norms:\n{}", format_norms(.norms))]
    NonFinite { iter: usize, norms: Vec<(String, f64)> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn format_norms(norms: &[(String, f64)]) -> String {
    if norms.is_empty() {
        return "  (no step completed)".into();
    }
    norms.iter().map(|(n, g)| format!("  {n}: {g:.6e}")).collect::<Vec<_>>().join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn grad_norms(store: &ParamStore) -> Vec<(String, f64)> {
    store.iter().map(|(id, t)| (t.name().to_string(), store.grad_norm(&[id]))).collect()
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub rows: Vec<MetricsRow>,
    pub store: ParamStore,
    /// Final renders of the test cameras.
    pub renders: Vec<ImageBuffer>,
    /// `(step, element)` for every relay that fired.
    pub relays: Vec<(usize, Element)>,
    pub organize: Vec<OrganizeReport>,
}

impl TrainOutput {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("a run records at least the initial row")
    }
}

fn relay_schedule(cfg: &ExperimentConfig) -> Result<RelaySchedule, RelayError> {
    // Elements with nothing to hand over to never relay.
    let live = |e: Element| match e {
        Element::Gauge => cfg.gauge == GaugeKind::Evolutive,
        Element::Sampling => cfg.sampler_mode == SamplerMode::Evolutive,
        Element::Organization => cfg.org_mode != Organizer::Heuristic,
    };
    let mut s = RelaySchedule::new(cfg.iters.max(1), cfg.relay_fraction)?;
    for (e, f) in [
        (Element::Gauge, cfg.relay_gauge),
        (Element::Sampling, cfg.relay_sampling),
        (Element::Organization, cfg.relay_organization),
    ] {
        let f = if live(e) { f.unwrap_or(cfg.relay_fraction) } else { 1.0 };
        s = s.with_override(e, f)?;
    }
    Ok(s)
}

/// Learning-rate multiplier at `step`: exponential from 1 down to `cfg.lr_decay`.
pub fn lr_factor(cfg: &ExperimentConfig, step: usize) -> f64 {
    cfg.lr_decay.powf(step as f64 / cfg.iters.max(1) as f64)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------- volume

/// Parameters and pipeline of a volume run, independent of any training data.
#[derive(Debug, Clone)]
pub struct VolumeModel {
    pub store: ParamStore,
    pub pipe: VolumePipeline,
    base_gauge: Option<GaugeTransform>,
    evo_gauge: Option<GaugeTransform>,
    pub gauge_params: Vec<ParamId>,
}

fn build_field(cfg: &ExperimentConfig, store: &mut ParamStore, name: &str, res: usize, rng: &mut ChaCha8Rng) -> Result<Field, DiffError> {
    match cfg.field {
        FieldKind::Grid => Field::grid(store, name, res, cfg.field_features, cfg.density_scale, rng),
        FieldKind::Planes => Field::planes(store, name, res, cfg.field_features, cfg.density_scale, rng),
        FieldKind::Mlp => Field::mlp(store, name, &vec![cfg.field_hidden; cfg.field_layers], cfg.field_degree, false, rng),
    }
}

impl VolumeModel {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed, 0);
        let mut store = ParamStore::new();
        let field = build_field(cfg, &mut store, "field", cfg.field_res, &mut rng)?;
        let coarse = if cfg.n_coarse >= 2 {
            Some(build_field(cfg, &mut store, "coarse", cfg.coarse_res, &mut rng)?)
        } else {
            None
        };
        let (base_gauge, evo_gauge) = match cfg.gauge {
            GaugeKind::None => (None, None),
            GaugeKind::Orthogonal => (Some(GaugeTransform::Orthogonal(Orthogonal::axis_planes())), None),
            GaugeKind::Evolutive => {
                let kind = match cfg.gauge_offset {
                    OffsetBackend::Plane => OffsetKind::Plane {
                        res: cfg.gauge_offset_res,
                    },
                    OffsetBackend::Mlp => OffsetKind::Mlp {
                        hidden: cfg.gauge_offset_hidden,
                        degree: cfg.gauge_offset_degree,
                    },
                };
                let evo = EvolutiveGauge::new(
                    &mut store,
                    "gauge",
                    Orthogonal::axis_planes(),
                    kind,
                    cfg.gauge_offset_scale,
                    cfg.gauge_target,
                    &mut rng,
                )?;
                (
                    Some(GaugeTransform::Orthogonal(Orthogonal::axis_planes())),
                    Some(GaugeTransform::Evolutive(evo)),
                )
            }
        };
        let gauge_params = evo_gauge.as_ref().map(|g| g.param_ids()).unwrap_or_default();
        let pipe = VolumePipeline {
            field,
            coarse,
            gauge: base_gauge.clone(),
            sampler: SamplerConfig {
                n_coarse: cfg.n_coarse,
                n_fine: cfg.n_fine,
                mode: SamplerMode::Heuristic,
                union: cfg.union,
            },
            background: WHITE,
        };
        Ok(Self {
            store,
            pipe,
            base_gauge,
            evo_gauge,
            gauge_params,
        })
    }

    /// Points the pipeline at the elements `state` has switched on.
    pub fn sync(&mut self, state: &RelayState) {
        self.pipe.gauge = if state.gauge_live {
            self.evo_gauge.clone().or_else(|| self.base_gauge.clone())
        } else {
            self.base_gauge.clone()
        };
        self.pipe.sampler.mode = state.sampler;
    }

    /// Field evaluations per ray.
    pub fn samples_per_ray(&self) -> usize {
        self.pipe.sampler.n_fine + if self.pipe.coarse.is_some() { self.pipe.sampler.n_coarse } else { 0 }
    }
}

/// One training pixel and the seed of its sample jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub seed: u64,
}

/// Batch loss split into its terms. `aux_term` already includes the aux weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub photometric: f64,
    pub aux_term: f64,
    pub total: f64,
}

pub struct VolumeTrainer<'s> {
    pub cfg: ExperimentConfig,
    pub scene: &'s Scene,
    pub model: VolumeModel,
    pub adam: AdamState,
    pub sched: RelaySchedule,
    pub state: RelayState,
    pub step: usize,
    pub relays: Vec<(usize, Element)>,
    rng: ChaCha8Rng,
    last_norms: Vec<(String, f64)>,
}

impl<'s> VolumeTrainer<'s> {
    pub fn new(cfg: &ExperimentConfig, scene: &'s Scene) -> Result<Self, TrainError> {
        let mut model = VolumeModel::build(cfg)?;
        let mut adam = AdamState::new(cfg.lr);
        for &id in &model.gauge_params {
            adam.set_lr_scale(id, cfg.lr_gauge / cfg.lr);
        }
        let sched = relay_schedule(cfg)?;
        let state = RelayState::heuristic(&mut model.store, model.gauge_params.clone(), cfg.aux_weight, cfg.org_mode);
        model.sync(&state);
        Ok(Self {
            cfg: cfg.clone(),
            scene,
            model,
            adam,
            sched,
            state,
            step: 0,
            relays: Vec::new(),
            rng: seeded(cfg.seed, 1),
            last_norms: Vec::new(),
        })
    }

    /// Fires the relays due at the current step.
    pub fn fire_relays(&mut self) -> Result<Vec<Element>, TrainError> {
        let fired = self.state.advance(&self.sched, self.step, &mut self.model.store)?;
        for &e in &fired {
            self.relays.push((self.step, e));
        }
        self.model.sync(&self.state);
        Ok(fired)
    }

    pub fn sample_batch(&mut self) -> Vec<Pick> {
        let views = self.scene.train.len();
        (0..self.cfg.batch)
            .map(|_| {
                let view = self.rng.random_range(0..views);
                let img = &self.scene.train[view].image;
                Pick {
                    view,
                    x: self.rng.random_range(0..img.width),
                    y: self.rng.random_range(0..img.height),
                    seed: self.rng.random(),
                }
            })
            .collect()
    }

    /// Loss of `picks` under the current state. `jitter = false` uses strata
    /// midpoints instead of the per-pick random offsets.
    pub fn batch_loss(&self, picks: &[Pick], jitter: bool, with_grad: bool) -> Result<(LossParts, SparseGrad), TrainError> {
        let norm = 1.0 / (3.0 * picks.len().max(1) as f64);
        let aux_w = self.state.aux_weight;
        let pipe = &self.model.pipe;
        let store = &self.model.store;
        let parts = par::map_chunks(picks.len(), RAY_CHUNK, |range| -> Result<_, TrainError> {
            let tape = if with_grad { Tape::new() } else { Tape::detached() };
            let ctx = Ctx::new(&tape, store);
            let mut photo = Vec::with_capacity(3 * range.len());
            let mut aux = Vec::new();
            for p in &picks[range] {
                let view = &self.scene.train[p.view];
                // rays that miss the volume render the background exactly
                let Some(ray) = view.camera.pixel_ray(p.x, p.y) else {
                    continue;
                };
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
                let mut u = if jitter { USource::Random(&mut rng) } else { USource::Midpoints };
                let r = render_ray(&ctx, pipe, &ray, &mut u)?;
                let gt = view.image.pixel(p.x, p.y);
                for k in 0..3 {
                    photo.push((r.color[k] - gt[k]).square());
                    if let Some(cc) = r.coarse_color {
                        aux.push((cc[k] - gt[k]).square());
                    }
                }
            }
            let photo = tape.sum(&photo) * norm;
            let aux = tape.sum(&aux) * norm * aux_w;
            let total = photo + aux;
            let grads = if with_grad {
                tape.backward(total)?.into_sparse()
            } else {
                SparseGrad::default()
            };
            Ok((photo.val(), aux.val(), total.val(), grads))
        });
        let mut out = LossParts {
            photometric: 0.0,
            aux_term: 0.0,
            total: 0.0,
        };
        let mut grads = SparseGrad::default();
        for part in parts {
            let (p, a, t, g) = part?;
            out.photometric += p;
            out.aux_term += a;
            out.total += t;
            grads.extend(g);
        }
        Ok((out, grads))
    }

    /// Relays, one batch, backward and an Adam update. Returns the batch loss.
    pub fn train_step(&mut self) -> Result<LossParts, TrainError> {
        self.fire_relays()?;
        let picks = self.sample_batch();
        let (loss, grads) = self.batch_loss(&picks, true, true)?;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite {
                iter: self.step,
                norms: self.last_norms.clone(),
            });
        }
        grads.apply(&mut self.model.store);
        self.last_norms = grad_norms(&self.model.store);
        self.adam.lr = self.cfg.lr * lr_factor(&self.cfg, self.step);
        self.adam.step(&mut self.model.store)?;
        self.model.store.zero_grads();
        self.step += 1;
        Ok(loss)
    }

    /// Test-view renders with their mean squared error.
    pub fn evaluate(&self) -> Result<(f64, Vec<ImageBuffer>), TrainError> {
        evaluate_views(self.scene.test.iter().map(|v| (&v.camera, &v.image)), |cam| {
            render_image(&self.model.pipe, &self.model.store, cam)
        })
    }

    pub fn run(mut self) -> Result<TrainOutput, TrainError> {
        let start = Instant::now();
        let mut rows = Vec::new();
        let mut renders;
        let count = self.model.samples_per_ray();
        let row = |iter: usize, mse: f64, start: &Instant, cfg: &ExperimentConfig| MetricsRow {
            experiment: cfg.id.clone(),
            iter,
            loss: mse,
            psnr: psnr_from_mse(mse),
            seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
            count,
        };
        let (mse, r) = self.evaluate()?;
        renders = r;
        rows.push(row(0, mse, &start, &self.cfg));
        while self.step < self.cfg.iters {
            self.train_step()?;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.iters {
                let (mse, r) = self.evaluate()?;
                renders = r;
                rows.push(row(self.step, mse, &start, &self.cfg));
            }
        }
        Ok(TrainOutput {
            rows,
            store: self.model.store,
            renders,
            relays: self.relays,
            organize: Vec::new(),
        })
    }
}

fn evaluate_views<'a>(
    views: impl Iterator<Item = (&'a Camera, &'a ImageBuffer)>,
    render: impl Fn(&Camera) -> ImageBuffer,
) -> Result<(f64, Vec<ImageBuffer>), TrainError> {
    let mut total = 0.0;
    let mut renders = Vec::new();
    for (cam, gt) in views {
        let img = render(cam);
        total += image::mse(&img, gt)?;
        renders.push(img);
    }
    Ok((total / renders.len().max(1) as f64, renders))
}

// ---------------------------------------------------------------- splat

/// Camera and target of the flat fitting task.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatTask {
    pub camera: Camera,
    pub target: ImageBuffer,
}

impl SplatTask {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, TrainError> {
        let target = scene::splat_target(&cfg.scene, cfg.scene_size).ok_or_else(|| TrainError::Scene(cfg.scene.clone()))?;
        Ok(Self {
            camera: scene::plane_camera(cfg.scene_size),
            target,
        })
    }
}

fn splat_inits(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Vec<GaussianInit> {
    (0..cfg.splat_init)
        .map(|_| {
            let s = cfg.splat_init_scale;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            GaussianInit {
                mu: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), 0.5],
                scale: [s * rng.random_range(0.7..1.3), s * rng.random_range(0.7..1.3), s],
                // rotation about the view axis
                rot: [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()],
                opacity: 0.5,
                color: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
            }
        })
        .collect()
}

pub struct SplatTrainer<'s> {
    pub cfg: ExperimentConfig,
    pub task: &'s SplatTask,
    pub store: ParamStore,
    pub set: GaussianSet,
    pub adam: AdamState,
    pub sched: RelaySchedule,
    pub state: RelayState,
    pub organize: OrganizeConfig,
    pub step: usize,
    pub relays: Vec<(usize, Element)>,
    pub reports: Vec<OrganizeReport>,
    rng: ChaCha8Rng,
    last_norms: Vec<(String, f64)>,
}

fn splat_lr_scales(cfg: &ExperimentConfig, set: &GaussianSet, adam: &mut AdamState) {
    let ids = set.ids;
    for (id, lr) in [
        (ids.mu, cfg.lr_mu),
        (ids.log_scale, cfg.lr_scale),
        (ids.rot, cfg.lr_rot),
        (ids.opacity, cfg.lr_opacity),
        (ids.color, cfg.lr_color),
        (ids.grow_logits, cfg.lr_evo),
        (ids.grow_len, cfg.lr_evo),
        (ids.split_shift, cfg.lr_evo),
        (ids.split_scale, cfg.lr_evo),
    ] {
        adam.set_lr_scale(id, lr);
    }
}

impl<'s> SplatTrainer<'s> {
    pub fn new(cfg: &ExperimentConfig, task: &'s SplatTask) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed, 0);
        let mut store = ParamStore::new();
        let set = GaussianSet::new(&mut store, &splat_inits(cfg, &mut rng), DirectionSet::circle(cfg.n_dirs), None)?;
        // per-tensor rates live entirely in the scales
        let mut adam = AdamState::new(1.0);
        splat_lr_scales(cfg, &set, &mut adam);
        let sched = relay_schedule(cfg)?;
        let state = RelayState::heuristic(&mut store, Vec::new(), 0.0, cfg.org_mode);
        Ok(Self {
            cfg: cfg.clone(),
            task,
            store,
            set,
            adam,
            sched,
            state,
            organize: OrganizeConfig {
                cadence: cfg.cadence,
                grad_threshold: cfg.grad_threshold,
                scale_threshold: cfg.scale_threshold,
                prune_opacity: cfg.prune_opacity,
                cap: cfg.cap,
            },
            step: 0,
            relays: Vec::new(),
            reports: Vec::new(),
            rng: seeded(cfg.seed, 1),
            last_norms: Vec::new(),
        })
    }

    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        for e in self.state.advance(&self.sched, self.step, &mut self.store)? {
            self.relays.push((self.step, e));
        }
        let tape = Tape::new();
        let (loss, view_grad, grads) = {
            let ctx = Ctx::new(&tape, &self.store);
            let r = render_splats(&ctx, &self.set, &self.task.camera, WHITE, Some(&self.task.target));
            let loss = r.loss.expect("target given");
            (loss.val(), r.view_grad, tape.backward(loss)?)
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iter: self.step,
                norms: self.last_norms.clone(),
            });
        }
        grads.accumulate(&mut self.store);
        self.last_norms = grad_norms(&self.store);
        self.set.record_view_grads(&view_grad);
        self.adam.lr = lr_factor(&self.cfg, self.step);
        self.adam.step(&mut self.store)?;
        self.store.zero_grads();
        self.step += 1;
        if self.step < self.cfg.iters {
            let rep = self.set.organize_step(
                &mut self.store,
                &mut self.adam,
                &self.organize,
                self.state.organizer,
                self.step,
                &mut self.rng,
            )?;
            if rep.ran {
                self.reports.push(rep);
            }
        }
        Ok(loss)
    }

    pub fn render(&self) -> ImageBuffer {
        rasterize(&self.set, &self.store, &self.task.camera, WHITE)
    }

    pub fn run(mut self) -> Result<TrainOutput, TrainError> {
        let start = Instant::now();
        let mut rows = Vec::new();
        let row = |iter: usize, img: &ImageBuffer, count: usize, start: &Instant, cfg: &ExperimentConfig, target: &ImageBuffer| {
            image::mse(img, target).map(|mse| MetricsRow {
                experiment: cfg.id.clone(),
                iter,
                loss: mse,
                psnr: psnr_from_mse(mse),
                seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
                count,
            })
        };
        let mut img = self.render();
        rows.push(row(0, &img, self.set.len(&self.store), &start, &self.cfg, &self.task.target)?);
        while self.step < self.cfg.iters {
            self.train_step()?;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.iters {
                img = self.render();
                rows.push(row(self.step, &img, self.set.len(&self.store), &start, &self.cfg, &self.task.target)?);
            }
        }
        Ok(TrainOutput {
            rows,
            store: self.store,
            renders: vec![img],
            relays: self.relays,
            organize: self.reports,
        })
    }
}

// ---------------------------------------------------------------- runs

/// Builds the scene the config asks for.
pub fn volume_scene(cfg: &ExperimentConfig) -> Result<Scene, TrainError> {
    scene::make_scene(&cfg.scene, cfg.scene_density, cfg.scene_size, cfg.scene_views, cfg.test_views, cfg.oracle_samples)
        .ok_or_else(|| TrainError::Scene(cfg.scene.clone()))
}

/// Trains according to `cfg.pipeline`, building the scene from scratch.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput, TrainError> {
    match cfg.pipeline {
        PipelineKind::Volume => {
            let scene = volume_scene(cfg)?;
            VolumeTrainer::new(cfg, &scene)?.run()
        }
        PipelineKind::Splat => {
            let task = SplatTask::new(cfg)?;
            SplatTrainer::new(cfg, &task)?.run()
        }
    }
}

pub const CONFIG_FILE: &str = "config.cfg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ermf";

pub fn render_file_name(k: usize) -> String {
    format!("test_{k}.png")
}

/// Writes the config copy, metrics, checkpoint and final test renders into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &TrainOutput) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_text()).map_err(io_err(&p))?;
    let p = dir.join(METRICS_FILE);
    fs::write(&p, to_csv(&out.rows)).map_err(io_err(&p))?;
    let p = dir.join(CHECKPOINT_FILE);
    fs::write(&p, container::to_bytes(&out.store)).map_err(io_err(&p))?;
    for (k, img) in out.renders.iter().enumerate() {
        let p = dir.join(render_file_name(k));
        image::write_image(img, &p, ImageFormat::Png)?;
    }
    Ok(())
}

/// Which cameras `render` may address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraRef {
    Train(usize),
    Test(usize),
}

impl std::str::FromStr for CameraRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, k) = s.split_once(':').ok_or_else(|| format!("camera `{s}`: expected test:K or train:K"))?;
        let k = k.parse().map_err(|_| format!("camera `{s}`: bad index"))?;
        match kind {
            "train" => Ok(CameraRef::Train(k)),
            "test" => Ok(CameraRef::Test(k)),
            _ => Err(format!("camera `{s}`: expected test:K or train:K")),
        }
    }
}

/// Replaces every tensor value of `store` by the same-named tensor of `loaded`.
fn load_values(store: &mut ParamStore, loaded: &ParamStore) -> Result<(), TrainError> {
    if store.len() != loaded.len() {
        return Err(TrainError::Checkpoint(format!(
            "expected {} tensors, found {}",
            store.len(),
            loaded.len()
        )));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let src = loaded
            .find(t.name())
            .map(|l| loaded.get(l))
            .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {}", t.name())))?;
        if src.shape() != t.shape() {
            return Err(TrainError::Checkpoint(format!("shape mismatch for {}", t.name())));
        }
        t.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

/// Renders one camera from a checkpoint, rebuilding the model from the config
/// written next to it.
pub fn render_checkpoint(checkpoint: &Path, camera: CameraRef) -> Result<ImageBuffer, TrainError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let bytes = fs::read(checkpoint).map_err(io_err(checkpoint))?;
    let mut loaded = container::from_bytes(&bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let last = cfg.iters.saturating_sub(1);
    let sched = relay_schedule(&cfg)?;
    let missing = |k: usize| TrainError::Checkpoint(format!("no camera {k}"));
    match cfg.pipeline {
        PipelineKind::Volume => {
            let cam = match camera {
                CameraRef::Train(k) => scene::train_cameras(cfg.scene_views, cfg.scene_size).get(k).cloned().ok_or(missing(k))?,
                CameraRef::Test(k) => scene::test_cameras(cfg.test_views, cfg.scene_size).get(k).cloned().ok_or(missing(k))?,
            };
            let mut model = VolumeModel::build(&cfg)?;
            load_values(&mut model.store, &loaded)?;
            let mut state = RelayState::heuristic(&mut model.store, model.gauge_params.clone(), cfg.aux_weight, cfg.org_mode);
            if cfg.iters > 0 {
                state.advance(&sched, last, &mut model.store)?;
            }
            model.sync(&state);
            Ok(render_image(&model.pipe, &model.store, &cam))
        }
        PipelineKind::Splat => {
            let (CameraRef::Test(0) | CameraRef::Train(0)) = camera else {
                return Err(missing(match camera {
                    CameraRef::Test(k) | CameraRef::Train(k) => k,
                }));
            };
            let mut set = GaussianSet::from_store(&mut loaded, DirectionSet::circle(cfg.n_dirs), None)
                .ok_or_else(|| TrainError::Checkpoint("not a primitive checkpoint".into()))?;
            let mut state = RelayState::heuristic(&mut loaded, Vec::new(), 0.0, cfg.org_mode);
            if cfg.iters > 0 {
                state.advance(&sched, last, &mut loaded)?;
            }
            set.select = state.organizer.select_mode();
            Ok(rasterize(&set, &loaded, &scene::plane_camera(cfg.scene_size), WHITE))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_volume() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.scene_size = 8;
        c.scene_views = 4;
        c.test_views = 2;
        c.oracle_samples = 128;
        c.field_res = 8;
        c.coarse_res = 4;
        c.n_coarse = 8;
        c.n_fine = 8;
        c.batch = 40;
        c.iters = 6;
        c.eval_every = 3;
        c
    }

    #[test]
    fn zero_iterations_give_the_initial_row() {
        let mut c = tiny_volume();
        c.iters = 0;
        let out = train(&c).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].iter, 0);
        assert_eq!(out.renders.len(), 2);
    }

    #[test]
    fn volume_rows_at_eval_points() {
        let out = train(&tiny_volume()).unwrap();
        let iters: Vec<usize> = out.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 3, 6]);
        assert!(out.rows.iter().all(|r| r.loss.is_finite() && r.seconds == 0.0));
        assert_eq!(out.rows[0].count, 16);
    }

    #[test]
    fn relays_fire_once_at_their_step() {
        let mut c = tiny_volume();
        c.sampler_mode = SamplerMode::Evolutive;
        c.iters = 10;
        c.relay_fraction = 0.3;
        let out = train(&c).unwrap();
        assert_eq!(out.relays, vec![(3, Element::Sampling)]);
    }

    #[test]
    fn splat_run_reports_counts() {
        let mut c = ExperimentConfig::default();
        c.pipeline = PipelineKind::Splat;
        c.scene = "blobs".into();
        c.scene_size = 16;
        c.splat_init = 5;
        c.iters = 4;
        c.eval_every = 2;
        c.cadence = 2;
        c.grad_threshold = 0.0;
        let out = train(&c).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert_eq!(out.rows[0].count, 5);
        assert!(out.rows[2].count > 5, "densification ran at the cadence");
    }

    #[test]
    fn camera_refs_parse() {
        assert_eq!("test:2".parse::<CameraRef>(), Ok(CameraRef::Test(2)));
        assert_eq!("train:0".parse::<CameraRef>(), Ok(CameraRef::Train(0)));
        assert!("side:1".parse::<CameraRef>().is_err());
    }
}
