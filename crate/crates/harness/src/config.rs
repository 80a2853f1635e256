//! Flat `section.key=value` experiment configuration.

use erm_core::gauge::OffsetTarget;
use erm_core::primitives::Organizer;
use erm_core::sampling::SamplerMode;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Volume,
    Splat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Grid,
    Planes,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeKind {
    None,
    Orthogonal,
    Evolutive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetBackend {
    Plane,
    Mlp,
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub iters: usize,
    pub eval_every: usize,
    pub out_dir: Option<PathBuf>,
    /// Write measured seconds into the metrics; off keeps the CSV reproducible.
    pub record_time: bool,

    pub scene: String,
    pub scene_size: usize,
    pub scene_views: usize,
    pub test_views: usize,
    pub oracle_samples: usize,
    /// Interior density of the preset solids.
    pub scene_density: f64,

    pub field: FieldKind,
    pub field_res: usize,
    pub field_features: usize,
    pub density_scale: f64,
    pub field_hidden: usize,
    pub field_layers: usize,
    pub field_degree: usize,
    pub coarse_res: usize,

    /// 0 disables the coarse pass.
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Sampler after the sampling relay; `Heuristic` never relays.
    pub sampler_mode: SamplerMode,
    pub union: bool,
    pub aux_weight: f64,

    pub gauge: GaugeKind,
    pub gauge_offset: OffsetBackend,
    pub gauge_offset_res: usize,
    pub gauge_offset_hidden: usize,
    pub gauge_offset_degree: usize,
    pub gauge_offset_scale: f64,
    pub gauge_target: OffsetTarget,

    /// Organizer after the organization relay; `Heuristic` never relays.
    pub org_mode: Organizer,
    pub n_dirs: usize,
    pub cadence: usize,
    pub grad_threshold: f64,
    pub scale_threshold: f64,
    pub prune_opacity: f64,
    pub cap: usize,
    pub splat_init: usize,
    pub splat_init_scale: f64,

    pub relay_fraction: f64,
    pub relay_gauge: Option<f64>,
    pub relay_sampling: Option<f64>,
    pub relay_organization: Option<f64>,

    pub lr: f64,
    pub lr_gauge: f64,
    pub batch: usize,
    pub lr_mu: f64,
    pub lr_scale: f64,
    pub lr_rot: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_evo: f64,
    /// Final over initial learning rate; the rate decays exponentially in between.
    pub lr_decay: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "run".into(),
            pipeline: PipelineKind::Volume,
            seed: 0,
            iters: 1000,
            eval_every: 500,
            out_dir: None,
            record_time: false,
            scene: "two-spheres".into(),
            scene_size: 64,
            scene_views: 20,
            test_views: 4,
            oracle_samples: 4096,
            scene_density: 40.0,
            field: FieldKind::Grid,
            field_res: 32,
            field_features: 4,
            density_scale: 10.0,
            field_hidden: 64,
            field_layers: 4,
            field_degree: 6,
            coarse_res: 16,
            n_coarse: 16,
            n_fine: 32,
            sampler_mode: SamplerMode::Heuristic,
            union: false,
            aux_weight: 1.0,
            gauge: GaugeKind::None,
            gauge_offset: OffsetBackend::Plane,
            gauge_offset_res: 16,
            gauge_offset_hidden: 32,
            gauge_offset_degree: 4,
            gauge_offset_scale: 0.1,
            gauge_target: OffsetTarget::Both,
            org_mode: Organizer::Heuristic,
            n_dirs: 128,
            cadence: 100,
            grad_threshold: 2e-4,
            scale_threshold: 0.01,
            prune_opacity: 0.005,
            cap: 100_000,
            splat_init: 50,
            splat_init_scale: 0.05,
            relay_fraction: 0.1,
            relay_gauge: None,
            relay_sampling: None,
            relay_organization: None,
            lr: 0.02,
            lr_gauge: 0.01,
            batch: 1024,
            lr_mu: 2e-3,
            lr_scale: 5e-3,
            lr_rot: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2e-2,
            lr_evo: 5e-2,
            lr_decay: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
    })
}

fn choice<T: Copy>(key: &str, v: &str, table: &[(&str, T)]) -> Result<T, ConfigError> {
    table.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or(ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
    })
}

fn name_of<T: Copy + PartialEq>(x: T, table: &[(&'static str, T)]) -> &'static str {
    table.iter().find(|(_, t)| *t == x).map(|(n, _)| *n).expect("every variant is named")
}

const PIPELINES: [(&str, PipelineKind); 2] = [("volume", PipelineKind::Volume), ("splat", PipelineKind::Splat)];
const FIELDS: [(&str, FieldKind); 3] = [("grid", FieldKind::Grid), ("planes", FieldKind::Planes), ("mlp", FieldKind::Mlp)];
const SAMPLERS: [(&str, SamplerMode); 2] = [("heuristic", SamplerMode::Heuristic), ("evolutive", SamplerMode::Evolutive)];
const GAUGES: [(&str, GaugeKind); 3] = [
    ("none", GaugeKind::None),
    ("orthogonal", GaugeKind::Orthogonal),
    ("evolutive", GaugeKind::Evolutive),
];
const OFFSETS: [(&str, OffsetBackend); 2] = [("plane", OffsetBackend::Plane), ("mlp", OffsetBackend::Mlp)];
const TARGETS: [(&str, OffsetTarget); 2] = [("both", OffsetTarget::Both), ("color", OffsetTarget::ColorOnly)];
const ORGANIZERS: [(&str, Organizer); 4] = [
    ("heuristic", Organizer::Heuristic),
    ("soft", Organizer::SoftGrow),
    ("reparam", Organizer::ReparamGrow),
    ("full", Organizer::Full),
];

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>, ConfigError> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "id" => self.id = v.to_string(),
            "pipeline" => self.pipeline = choice(key, v, &PIPELINES)?,
            "seed" => self.seed = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "record_time" => self.record_time = parse(key, v)?,
            "scene.preset" => self.scene = v.to_string(),
            "scene.size" => self.scene_size = parse(key, v)?,
            "scene.views" => self.scene_views = parse(key, v)?,
            "scene.test_views" => self.test_views = parse(key, v)?,
            "scene.oracle_samples" => self.oracle_samples = parse(key, v)?,
            "scene.density" => self.scene_density = parse(key, v)?,
            "field.kind" => self.field = choice(key, v, &FIELDS)?,
            "field.res" => self.field_res = parse(key, v)?,
            "field.features" => self.field_features = parse(key, v)?,
            "field.density_scale" => self.density_scale = parse(key, v)?,
            "field.hidden" => self.field_hidden = parse(key, v)?,
            "field.layers" => self.field_layers = parse(key, v)?,
            "field.degree" => self.field_degree = parse(key, v)?,
            "field.coarse_res" => self.coarse_res = parse(key, v)?,
            "sampler.n_coarse" => self.n_coarse = parse(key, v)?,
            "sampler.n_fine" => self.n_fine = parse(key, v)?,
            "sampler.mode" => self.sampler_mode = choice(key, v, &SAMPLERS)?,
            "sampler.union" => self.union = parse(key, v)?,
            "sampler.aux_weight" => self.aux_weight = parse(key, v)?,
            "gauge.kind" => self.gauge = choice(key, v, &GAUGES)?,
            "gauge.offset" => self.gauge_offset = choice(key, v, &OFFSETS)?,
            "gauge.offset_res" => self.gauge_offset_res = parse(key, v)?,
            "gauge.offset_hidden" => self.gauge_offset_hidden = parse(key, v)?,
            "gauge.offset_degree" => self.gauge_offset_degree = parse(key, v)?,
            "gauge.offset_scale" => self.gauge_offset_scale = parse(key, v)?,
            "gauge.target" => self.gauge_target = choice(key, v, &TARGETS)?,
            "org.mode" => self.org_mode = choice(key, v, &ORGANIZERS)?,
            "org.n_dirs" => self.n_dirs = parse(key, v)?,
            "org.cadence" => self.cadence = parse(key, v)?,
            "org.grad_threshold" => self.grad_threshold = parse(key, v)?,
            "org.scale_threshold" => self.scale_threshold = parse(key, v)?,
            "org.prune_opacity" => self.prune_opacity = parse(key, v)?,
            "org.cap" => self.cap = parse(key, v)?,
            "splat.init_count" => self.splat_init = parse(key, v)?,
            "splat.init_scale" => self.splat_init_scale = parse(key, v)?,
            "relay.fraction" => self.relay_fraction = parse(key, v)?,
            "relay.gauge" => self.relay_gauge = opt_f64(key, v)?,
            "relay.sampling" => self.relay_sampling = opt_f64(key, v)?,
            "relay.organization" => self.relay_organization = opt_f64(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.lr_gauge" => self.lr_gauge = parse(key, v)?,
            "optim.batch" => self.batch = parse(key, v)?,
            "optim.lr_mu" => self.lr_mu = parse(key, v)?,
            "optim.lr_scale" => self.lr_scale = parse(key, v)?,
            "optim.lr_rot" => self.lr_rot = parse(key, v)?,
            "optim.lr_opacity" => self.lr_opacity = parse(key, v)?,
            "optim.lr_color" => self.lr_color = parse(key, v)?,
            "optim.lr_evo" => self.lr_evo = parse(key, v)?,
            "optim.lr_decay" => self.lr_decay = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("eval_every", self.eval_every),
            ("scene.size", self.scene_size),
            ("scene.views", self.scene_views),
            ("scene.test_views", self.test_views),
            ("scene.oracle_samples", self.oracle_samples),
            ("field.res", self.field_res),
            ("field.features", self.field_features),
            ("field.hidden", self.field_hidden),
            ("field.layers", self.field_layers),
            ("field.degree", self.field_degree),
            ("field.coarse_res", self.coarse_res),
            ("sampler.n_fine", self.n_fine),
            ("gauge.offset_res", self.gauge_offset_res),
            ("gauge.offset_hidden", self.gauge_offset_hidden),
            ("gauge.offset_degree", self.gauge_offset_degree),
            ("org.cadence", self.cadence),
            ("org.cap", self.cap),
            ("splat.init_count", self.splat_init),
            ("optim.batch", self.batch),
        ];
        for (key, n) in positive {
            if n == 0 {
                return Err(ConfigError::Invalid {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        let check_fraction = |key: &str, f: f64| {
            if (0.0..=1.0).contains(&f) {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key: key.into(),
                    reason: "fraction outside [0, 1]".into(),
                })
            }
        };
        check_fraction("relay.fraction", self.relay_fraction)?;
        for (k, f) in [
            ("relay.gauge", self.relay_gauge),
            ("relay.sampling", self.relay_sampling),
            ("relay.organization", self.relay_organization),
        ] {
            if let Some(f) = f {
                check_fraction(k, f)?;
            }
        }
        if !(self.scene_density > 0.0 && self.scene_density.is_finite()) {
            return Err(ConfigError::Invalid {
                key: "scene.density".into(),
                reason: "must be positive and finite".into(),
            });
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ConfigError::Invalid {
                key: "optim.lr_decay".into(),
                reason: "must be in (0, 1]".into(),
            });
        }
        if self.n_coarse == 1 {
            return Err(ConfigError::Invalid {
                key: "sampler.n_coarse".into(),
                reason: "needs 0 or at least 2 boundaries".into(),
            });
        }
        if self.gauge != GaugeKind::None && self.field != FieldKind::Planes {
            return Err(ConfigError::Invalid {
                key: "gauge.kind".into(),
                reason: "gauges index plane fields; use field.kind=planes".into(),
            });
        }
        if self.n_dirs < 2 {
            return Err(ConfigError::Invalid {
                key: "org.n_dirs".into(),
                reason: "needs at least 2 directions".into(),
            });
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` gives back an equal config.
    pub fn to_text(&self) -> String {
        let opt = |x: Option<f64>| x.map(|f| f.to_string()).unwrap_or_else(|| "none".into());
        let entries: Vec<(&str, String)> = vec![
            ("id", self.id.clone()),
            ("pipeline", name_of(self.pipeline, &PIPELINES).into()),
            ("seed", self.seed.to_string()),
            ("iters", self.iters.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("record_time", self.record_time.to_string()),
            ("scene.preset", self.scene.clone()),
            ("scene.size", self.scene_size.to_string()),
            ("scene.views", self.scene_views.to_string()),
            ("scene.test_views", self.test_views.to_string()),
            ("scene.oracle_samples", self.oracle_samples.to_string()),
            ("scene.density", self.scene_density.to_string()),
            ("field.kind", name_of(self.field, &FIELDS).into()),
            ("field.res", self.field_res.to_string()),
            ("field.features", self.field_features.to_string()),
            ("field.density_scale", self.density_scale.to_string()),
            ("field.hidden", self.field_hidden.to_string()),
            ("field.layers", self.field_layers.to_string()),
            ("field.degree", self.field_degree.to_string()),
            ("field.coarse_res", self.coarse_res.to_string()),
            ("sampler.n_coarse", self.n_coarse.to_string()),
            ("sampler.n_fine", self.n_fine.to_string()),
            ("sampler.mode", name_of(self.sampler_mode, &SAMPLERS).into()),
            ("sampler.union", self.union.to_string()),
            ("sampler.aux_weight", self.aux_weight.to_string()),
            ("gauge.kind", name_of(self.gauge, &GAUGES).into()),
            ("gauge.offset", name_of(self.gauge_offset, &OFFSETS).into()),
            ("gauge.offset_res", self.gauge_offset_res.to_string()),
            ("gauge.offset_hidden", self.gauge_offset_hidden.to_string()),
            ("gauge.offset_degree", self.gauge_offset_degree.to_string()),
            ("gauge.offset_scale", self.gauge_offset_scale.to_string()),
            ("gauge.target", name_of(self.gauge_target, &TARGETS).into()),
            ("org.mode", name_of(self.org_mode, &ORGANIZERS).into()),
            ("org.n_dirs", self.n_dirs.to_string()),
            ("org.cadence", self.cadence.to_string()),
            ("org.grad_threshold", self.grad_threshold.to_string()),
            ("org.scale_threshold", self.scale_threshold.to_string()),
            ("org.prune_opacity", self.prune_opacity.to_string()),
            ("org.cap", self.cap.to_string()),
            ("splat.init_count", self.splat_init.to_string()),
            ("splat.init_scale", self.splat_init_scale.to_string()),
            ("relay.fraction", self.relay_fraction.to_string()),
            ("relay.gauge", opt(self.relay_gauge)),
            ("relay.sampling", opt(self.relay_sampling)),
            ("relay.organization", opt(self.relay_organization)),
            ("optim.lr", self.lr.to_string()),
            ("optim.lr_gauge", self.lr_gauge.to_string()),
            ("optim.batch", self.batch.to_string()),
            ("optim.lr_mu", self.lr_mu.to_string()),
            ("optim.lr_scale", self.lr_scale.to_string()),
            ("optim.lr_rot", self.lr_rot.to_string()),
            ("optim.lr_opacity", self.lr_opacity.to_string()),
            ("optim.lr_color", self.lr_color.to_string()),
            ("optim.lr_evo", self.lr_evo.to_string()),
            ("optim.lr_decay", self.lr_decay.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Every key with its current value.
    pub fn as_map(&self) -> BTreeMap<String, String> {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}
