//! Flat `key = value` configuration layered as defaults < file < flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use doge_core::pipeline::RunConfig;

/// Everything an optimization run can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub meters_per_pixel: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { run: RunConfig::default(), meters_per_pixel: 1.0 }
    }
}

type Setter = fn(&mut Settings, &str) -> Result<()>;

struct Key {
    name: &'static str,
    help: &'static str,
    get: fn(&Settings) -> String,
    set: Setter,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| anyhow!("invalid value {v:?} for {key}: {e}"))
}

macro_rules! key {
    ($name:literal, $help:literal, |$s:ident| $field:expr) => {
        Key {
            name: $name,
            help: $help,
            get: |$s: &Settings| $field.to_string(),
            set: |$s: &mut Settings, v: &str| {
                $field = num($name, v)?;
                Ok(())
            },
        }
    };
}

fn keys() -> Vec<Key> {
    vec![
        key!("canvas.meters_per_pixel", "ground size of one mask pixel (m)", |s| s.meters_per_pixel),
        key!("run.max_iterations", "hard cap on optimization iterations", |s| s.run.max_iterations),
        key!("run.early_stop_window", "iterations per plateau window", |s| s.run.early_stop_window),
        key!("run.early_stop_tolerance", "relative change of windowed coverage loss", |s| s.run.early_stop_tolerance),
        key!("run.seed", "seed for every random choice", |s| s.run.seed),
        key!("run.snapshot_period", "iterations between snapshots (0 = off)", |s| s.run.snapshot_period),
        key!("run.normalize_lengths", "optimize lengths in canvas units", |s| s.run.normalize_lengths),
        key!("run.init_area_per_edge", "road area per initial edge (m^2)", |s| s.run.init_area_per_edge),
        key!("loss.lambda_cover", "weight of the coverage term", |s| s.run.weights.lambda_cover),
        key!("loss.lambda_overlap", "weight of the overlap term", |s| s.run.weights.lambda_overlap),
        key!("loss.lambda_g1", "weight of the tangent-continuity term", |s| s.run.weights.lambda_g1),
        key!("loss.lambda_offset", "weight of the offset term", |s| s.run.weights.lambda_offset),
        key!("loss.lambda_spacing", "weight of the spacing term", |s| s.run.weights.lambda_spacing),
        key!("loss.t_g1", "tangent term activation angle (deg)", |s| s.run.weights.t_g1),
        key!("loss.tau_d", "offset tolerance as a fraction of the chord", |s| s.run.weights.tau_d),
        key!("adam.lr", "learning rate", |s| s.run.adam.lr),
        key!("adam.beta1", "first-moment decay", |s| s.run.adam.beta1),
        key!("adam.beta2", "second-moment decay", |s| s.run.adam.beta2),
        key!("adam.eps", "denominator epsilon", |s| s.run.adam.eps),
        key!("topo.eps_merge", "node merge / junction radius (m)", |s| s.run.topo.eps_merge),
        key!("topo.theta_collinear", "collinear merge angle (deg)", |s| s.run.topo.theta_collinear),
        key!("topo.min_edge_length", "prune edges shorter than this (m)", |s| s.run.topo.min_edge_length),
        key!("topo.min_edge_width", "prune edges thinner than this (m)", |s| s.run.topo.min_edge_width),
        key!("topo.min_unfit_area", "smallest uncovered patch that spawns a road (m^2)", |s| s.run.topo.min_unfit_area),
        key!("topo.road_add_period", "iterations between road additions", |s| s.run.topo.road_add_period),
        key!("topo.connect_min_age", "age before merges and junctions", |s| s.run.topo.connect_min_age),
        key!("topo.collinear_min_age", "age before collinear merges", |s| s.run.topo.collinear_min_age),
        key!("topo.prune_grace", "age before pruning applies", |s| s.run.topo.prune_grace),
        key!("topo.t_warmup", "iterations before merges and junctions", |s| s.run.topo.t_warmup),
        key!("topo.tau_seg", "target threshold for road pixels", |s| s.run.topo.tau_seg),
        key!("topo.tau_render", "render threshold for covered pixels", |s| s.run.topo.tau_render),
        key!("topo.init_edge_length", "length of new edges (m)", |s| s.run.topo.init_edge_length),
        key!("topo.init_edge_width", "width of new edges (m)", |s| s.run.topo.init_edge_width),
        key!("topo.cell_size", "spatial grid cell size (m)", |s| s.run.topo.cell_size),
    ]
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = keys().into_iter().find(|k| k.name == key).ok_or_else(|| anyhow!("unknown configuration key {key:?}"))?;
        (k.set)(self, value)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_flags(&mut self, flags: &[String]) -> Result<()> {
        for f in flags {
            let Some((k, v)) = f.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {f:?}");
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `--set` flags.
    pub fn layered(file: Option<&Path>, flags: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(f) = file {
            s.apply_file(f)?;
        }
        s.apply_flags(flags)?;
        s.run.validate()?;
        if !(s.meters_per_pixel > 0.0) {
            bail!("canvas.meters_per_pixel must be positive");
        }
        Ok(s)
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let defaults = Settings::default();
    let mut out = String::from("Configuration keys (set with --set KEY=VALUE or in a --config file):\n");
    for k in keys() {
        out.push_str(&format!("  {:<26} {:<10} {}\n", k.name, (k.get)(&defaults), k.help));
    }
    out
}
