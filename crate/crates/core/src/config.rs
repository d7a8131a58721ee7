//! Run and sweep configuration files.
//!
//! A config file is a flat list of `key = value` lines in TOML syntax:
//! strings are quoted, numbers are bare, booleans are `true`/`false`, lists
//! use brackets, and `#` starts a comment. Tables and dotted keys are
//! rejected, as is any key not listed in the README. Keys may appear in any
//! order; omitted keys take their defaults. Serialization writes every key
//! in a fixed order, so `parse(serialize(c)) == c`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::DistSpec;
use crate::models::Activation;
use crate::vgan::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{}unknown key `{key}`{}", loc(*.line), hint_suffix(.hint))]
    UnknownKey {
        key: String,
        line: Option<usize>,
        hint: Option<String>,
    },
    #[error("{}field `{key}`: {msg}", loc(*.line))]
    Field {
        key: String,
        line: Option<usize>,
        msg: String,
    },
    #[error("invalid override `{0}`: expected KEY=VALUE")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn loc(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

fn hint_suffix(h: &Option<String>) -> String {
    h.as_ref().map(|h| format!(" ({h})")).unwrap_or_default()
}

/// Which engine runs the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Neural generator and critic on continuous targets.
    Neural,
    /// Logit generator and tabular critic on a categorical target.
    Exact,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Neural => "neural",
            Mode::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub dist: DistSpec,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Neural,
            out_dir: PathBuf::from("out"),
            dist: DistSpec::default(),
            training: TrainingConfig::default(),
        }
    }
}

/// The four compared schedules. Variants without clipping use one generator
/// step per outer iteration; variants with clipping keep the base `n_gen`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Reweighting,
    Clipping,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Reweighting,
        Variant::Clipping,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Reweighting => "reweighting",
            Variant::Clipping => "clipping",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    /// The base config with this variant's flags and step schedule.
    pub fn apply(self, base: &TrainingConfig) -> TrainingConfig {
        let (reweighting, clipping) = match self {
            Variant::Baseline => (false, false),
            Variant::Reweighting => (true, false),
            Variant::Clipping => (false, true),
            Variant::Full => (true, true),
        };
        TrainingConfig {
            reweighting,
            clipping,
            n_gen: if clipping { base.n_gen } else { 1 },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Everything not randomized per trial.
    pub base: RunConfig,
    pub trials: usize,
    /// Critic learning rate is log-uniform on this range; the generator uses
    /// half of it.
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Hidden width, applied to every hidden layer of the base depth.
    pub widths: Vec<usize>,
    pub master_seed: u64,
    pub variants: Vec<Variant>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            trials: 200,
            lr_min: 1e-5,
            lr_max: 1e-3,
            batch_sizes: vec![64, 128, 256],
            activations: vec![Activation::Relu, Activation::LeakyRelu(0.2)],
            widths: vec![32, 64],
            master_seed: 0,
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|&b| b < 2) {
            return bad("batch_sizes must be non-empty with entries >= 2");
        }
        if self.activations.is_empty() {
            return bad("activations must be non-empty");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.variants.is_empty() {
            return bad("variants must be non-empty");
        }
        let mut v = self.variants.clone();
        v.sort();
        v.dedup();
        if v.len() != self.variants.len() {
            return bad("variants must not repeat");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// key tables

/// Keys of a run config, in serialization order.
pub const RUN_KEYS: &[&str] = &[
    "mode",
    "out_dir",
    "dist",
    "modes",
    "radius",
    "sigma",
    "rows",
    "cols",
    "spacing",
    "weights",
    "means",
    "sigmas",
    "probs",
    "epsilon",
    "alpha",
    "n_critic",
    "n_gen",
    "lambda_gp",
    "lr_generator",
    "lr_critic",
    "lr_classifier",
    "beta1",
    "beta2",
    "anneal",
    "batch_size",
    "iterations",
    "seed",
    "reweighting",
    "clipping",
    "sample_from_old",
    "latent_dim",
    "hidden",
    "activation",
    "leaky_slope",
    "eval_every",
    "eval_samples",
    "sliced_projections",
    "abort_on_collapse",
    "collapse_window",
    "collapse_coverage_floor",
    "collapse_loss_ceiling",
    "collapse_min_loss_variance",
];

/// Extra keys of a sweep spec.
pub const SWEEP_KEYS: &[&str] = &[
    "trials",
    "lr_min",
    "lr_max",
    "batch_sizes",
    "activations",
    "widths",
    "master_seed",
    "variants",
];

const DIST_KINDS: &[&str] = &["gaussian-ring", "gaussian-grid", "mixture-1d", "categorical"];

const DIST_PARAM_KEYS: &[&str] = &[
    "modes", "radius", "sigma", "rows", "cols", "spacing", "weights", "means", "sigmas", "probs",
];

// ---------------------------------------------------------------------------
// parsing

/// Line of the first `key =` assignment in `src`, for diagnostics.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key)
            .map(|rest| rest.trim_start().starts_with('=') || rest.starts_with('.'))
            .unwrap_or(false)
    })
    .map(|i| i + 1)
}

fn parse_table(src: &str) -> Result<Table, ConfigError> {
    let table: Table = src.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1)
            .unwrap_or(1);
        ConfigError::Syntax {
            line,
            msg: e.message().trim().to_string(),
        }
    })?;
    for (k, v) in &table {
        if v.is_table() {
            return Err(ConfigError::Syntax {
                line: line_of(src, k).unwrap_or(1),
                msg: format!("`{k}` is a table; the format is flat key = value"),
            });
        }
    }
    Ok(table)
}

/// Typed access to a flat table with per-key diagnostics.
struct Fields<'a> {
    table: Table,
    src: &'a str,
}

impl Fields<'_> {
    fn err(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::Field {
            key: key.into(),
            line: line_of(self.src, key),
            msg: msg.into(),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.table.remove(key)
    }

    fn f64(&mut self, key: &str, dst: &mut f64) -> Result<(), ConfigError> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Float(x)) => {
                *dst = x;
                Ok(())
            }
            Some(Value::Integer(i)) => {
                *dst = i as f64;
                Ok(())
            }
            Some(v) => Err(self.err(key, format!("expected a number, got {}", v.type_str()))),
        }
    }

    fn usize(&mut self, key: &str, dst: &mut usize) -> Result<(), ConfigError> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Integer(i)) if i >= 0 => {
                *dst = i as usize;
                Ok(())
            }
            Some(v) => Err(self.err(key, format!("expected a non-negative integer, got {v}"))),
        }
    }

    fn u64(&mut self, key: &str, dst: &mut u64) -> Result<(), ConfigError> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Integer(i)) if i >= 0 => {
                *dst = i as u64;
                Ok(())
            }
            // seeds above i64::MAX are written as decimal strings
            Some(Value::String(s)) => match s.parse() {
                Ok(x) => {
                    *dst = x;
                    Ok(())
                }
                Err(_) => Err(self.err(key, format!("`{s}` is not an unsigned 64-bit integer"))),
            },
            Some(v) => Err(self.err(key, format!("expected a non-negative integer, got {v}"))),
        }
    }

    fn bool(&mut self, key: &str, dst: &mut bool) -> Result<(), ConfigError> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Boolean(b)) => {
                *dst = b;
                Ok(())
            }
            Some(v) => Err(self.err(key, format!("expected true or false, got {v}"))),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(self.err(key, format!("expected a string, got {v}"))),
        }
    }

    fn array(&mut self, key: &str) -> Result<Option<Vec<Value>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(a)) => Ok(Some(a)),
            Some(v) => Err(self.err(key, format!("expected a list, got {v}"))),
        }
    }

    fn f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(a) = self.array(key)? else { return Ok(None) };
        a.into_iter()
            .map(|v| match v {
                Value::Float(x) => Ok(x),
                Value::Integer(i) => Ok(i as f64),
                v => Err(self.err(key, format!("list entries must be numbers, got {v}"))),
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }

    fn usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        let Some(a) = self.array(key)? else { return Ok(None) };
        a.into_iter()
            .map(|v| match v {
                Value::Integer(i) if i >= 0 => Ok(i as usize),
                v => Err(self.err(key, format!("list entries must be non-negative integers, got {v}"))),
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }

    fn string_list(&mut self, key: &str) -> Result<Option<Vec<String>>, ConfigError> {
        let Some(a) = self.array(key)? else { return Ok(None) };
        a.into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                v => Err(self.err(key, format!("list entries must be strings, got {v}"))),
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }

    fn reject_leftovers(&self) -> Result<(), ConfigError> {
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort_by_key(|k| (line_of(self.src, k).unwrap_or(usize::MAX), k.as_str()));
        match keys.first() {
            None => Ok(()),
            Some(k) => Err(ConfigError::UnknownKey {
                key: k.to_string(),
                line: line_of(self.src, k),
                hint: DIST_PARAM_KEYS
                    .contains(&k.as_str())
                    .then(|| "does not apply to the selected dist".to_string()),
            }),
        }
    }
}

fn activation_of(name: &str, slope: f64) -> Option<Activation> {
    match Activation::parse(name)? {
        Activation::LeakyRelu(_) => Some(Activation::LeakyRelu(slope)),
        a => Some(a),
    }
}

fn read_run(fields: &mut Fields) -> Result<RunConfig, ConfigError> {
    let mut c = RunConfig::default();
    if let Some(m) = fields.string("mode")? {
        c.mode = match m.as_str() {
            "neural" => Mode::Neural,
            "exact" => Mode::Exact,
            _ => return Err(fields.err("mode", format!("expected neural or exact, got `{m}`"))),
        };
    }
    if let Some(p) = fields.string("out_dir")? {
        c.out_dir = PathBuf::from(p);
    }
    c.dist = read_dist(fields)?;

    let t = &mut c.training;
    fields.f64("epsilon", &mut t.epsilon)?;
    fields.f64("alpha", &mut t.alpha)?;
    fields.usize("n_critic", &mut t.n_critic)?;
    fields.usize("n_gen", &mut t.n_gen)?;
    fields.f64("lambda_gp", &mut t.lambda_gp)?;
    fields.f64("lr_generator", &mut t.lr_generator)?;
    fields.f64("lr_critic", &mut t.lr_critic)?;
    fields.f64("lr_classifier", &mut t.lr_classifier)?;
    fields.f64("beta1", &mut t.beta1)?;
    fields.f64("beta2", &mut t.beta2)?;
    fields.bool("anneal", &mut t.anneal)?;
    fields.usize("batch_size", &mut t.batch_size)?;
    fields.usize("iterations", &mut t.iterations)?;
    fields.u64("seed", &mut t.seed)?;
    fields.bool("reweighting", &mut t.reweighting)?;
    fields.bool("clipping", &mut t.clipping)?;
    fields.bool("sample_from_old", &mut t.sample_from_old)?;
    fields.usize("latent_dim", &mut t.latent_dim)?;
    if let Some(h) = fields.usize_list("hidden")? {
        t.hidden = h;
    }
    let mut slope = 0.2;
    fields.f64("leaky_slope", &mut slope)?;
    let name = fields.string("activation")?;
    let name = name.as_deref().unwrap_or(t.activation.name());
    t.activation = activation_of(name, slope).ok_or_else(|| {
        fields.err("activation", format!("expected leaky-relu, relu or tanh, got `{name}`"))
    })?;
    fields.usize("eval_every", &mut t.eval_every)?;
    fields.usize("eval_samples", &mut t.eval_samples)?;
    fields.usize("sliced_projections", &mut t.sliced_projections)?;
    fields.bool("abort_on_collapse", &mut t.abort_on_collapse)?;
    let k = &mut t.collapse;
    fields.usize("collapse_window", &mut k.window)?;
    fields.usize("collapse_coverage_floor", &mut k.coverage_floor)?;
    fields.f64("collapse_loss_ceiling", &mut k.loss_ceiling)?;
    fields.f64("collapse_min_loss_variance", &mut k.min_loss_variance)?;

    c.training
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    c.dist.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if c.mode == Mode::Exact && !matches!(c.dist, DistSpec::Categorical { .. }) {
        return Err(fields.err("mode", "exact mode needs dist = \"categorical\""));
    }
    if c.mode == Mode::Neural && matches!(c.dist, DistSpec::Categorical { .. }) {
        return Err(fields.err("dist", "categorical targets need mode = \"exact\""));
    }
    Ok(c)
}

fn read_dist(fields: &mut Fields) -> Result<DistSpec, ConfigError> {
    let kind = fields.string("dist")?.unwrap_or_else(|| "gaussian-ring".into());
    if !DIST_KINDS.contains(&kind.as_str()) {
        return Err(fields.err(
            "dist",
            format!("expected gaussian-ring, gaussian-grid, mixture-1d or categorical, got `{kind}`"),
        ));
    }
    // parameters of other families stay in the table and are reported as
    // unknown keys afterwards
    Ok(match kind.as_str() {
        "gaussian-ring" => {
            let (mut modes, mut radius, mut sigma) = (8, 2.0, 0.05);
            fields.usize("modes", &mut modes)?;
            fields.f64("radius", &mut radius)?;
            fields.f64("sigma", &mut sigma)?;
            DistSpec::GaussianRing { modes, radius, sigma }
        }
        "gaussian-grid" => {
            let (mut rows, mut cols, mut spacing, mut sigma) = (5, 5, 2.0, 0.05);
            fields.usize("rows", &mut rows)?;
            fields.usize("cols", &mut cols)?;
            fields.f64("spacing", &mut spacing)?;
            fields.f64("sigma", &mut sigma)?;
            DistSpec::GaussianGrid {
                rows,
                cols,
                spacing,
                sigma,
            }
        }
        "mixture-1d" => {
            let need = |f: &mut Fields, k: &str| {
                f.f64_list(k)?
                    .ok_or_else(|| f.err(k, "required for dist = \"mixture-1d\""))
            };
            DistSpec::Mixture1d {
                weights: need(fields, "weights")?,
                means: need(fields, "means")?,
                sigmas: need(fields, "sigmas")?,
            }
        }
        _ => DistSpec::Categorical {
            probs: fields
                .f64_list("probs")?
                .ok_or_else(|| fields.err("probs", "required for dist = \"categorical\""))?,
        },
    })
}

pub fn parse_run_config(src: &str) -> Result<RunConfig, ConfigError> {
    let mut fields = Fields {
        table: parse_table(src)?,
        src,
    };
    let c = read_run(&mut fields)?;
    fields.reject_leftovers()?;
    Ok(c)
}

pub fn parse_sweep_spec(src: &str) -> Result<SweepSpec, ConfigError> {
    let mut fields = Fields {
        table: parse_table(src)?,
        src,
    };
    let mut s = SweepSpec::default();
    fields.usize("trials", &mut s.trials)?;
    fields.f64("lr_min", &mut s.lr_min)?;
    fields.f64("lr_max", &mut s.lr_max)?;
    if let Some(b) = fields.usize_list("batch_sizes")? {
        s.batch_sizes = b;
    }
    if let Some(w) = fields.usize_list("widths")? {
        s.widths = w;
    }
    fields.u64("master_seed", &mut s.master_seed)?;
    let mut slope = 0.2;
    if let Some(Value::Float(x)) = fields.table.get("leaky_slope") {
        slope = *x;
    }
    if let Some(a) = fields.string_list("activations")? {
        s.activations = a
            .iter()
            .map(|n| {
                activation_of(n, slope).ok_or_else(|| {
                    fields.err("activations", format!("unknown activation `{n}`"))
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = fields.string_list("variants")? {
        s.variants = v
            .iter()
            .map(|n| {
                Variant::parse(n).ok_or_else(|| {
                    fields.err(
                        "variants",
                        format!("unknown variant `{n}` (baseline, reweighting, clipping, full)"),
                    )
                })
            })
            .collect::<Result<_, _>>()?;
    }
    s.base = read_run(&mut fields)?;
    fields.reject_leftovers()?;
    s.validate()?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// overrides

/// Parses `KEY=VALUE`. The value is read as a config value; `on`/`off` mean
/// `true`/`false` and any other bare word is taken as a string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(s.to_string()))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(ConfigError::Override(s.to_string()));
    }
    let value = match v {
        "on" => Value::Boolean(true),
        "off" => Value::Boolean(false),
        _ => match format!("v = {v}").parse::<Table>() {
            Ok(mut t) => t.remove("v").ok_or_else(|| ConfigError::Override(s.to_string()))?,
            Err(_) if !v.is_empty() => Value::String(v.to_string()),
            Err(_) => return Err(ConfigError::Override(s.to_string())),
        },
    };
    Ok((k.to_string(), value))
}

/// Applies overrides to config text: each `KEY=VALUE` replaces or adds that
/// key, and the result is parsed with the usual checks.
pub fn apply_overrides(src: &str, overrides: &[String]) -> Result<String, ConfigError> {
    if overrides.is_empty() {
        return Ok(src.to_string());
    }
    let mut table = parse_table(src)?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    Ok(table_to_text(&table))
}

fn table_to_text(t: &Table) -> String {
    let mut out = String::new();
    for (k, v) in t {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// serialization

fn float(x: f64) -> Value {
    Value::Float(x)
}

fn int(x: usize) -> Value {
    Value::Integer(x as i64)
}

fn seed_value(x: u64) -> Value {
    match i64::try_from(x) {
        Ok(i) => Value::Integer(i),
        Err(_) => Value::String(x.to_string()),
    }
}

fn run_entries(c: &RunConfig) -> Vec<(&'static str, Value)> {
    let t = &c.training;
    let mut e: Vec<(&'static str, Value)> = vec![
        ("mode", Value::String(c.mode.name().into())),
        ("out_dir", Value::String(c.out_dir.to_string_lossy().into_owned())),
    ];
    let list = |v: &[f64]| Value::Array(v.iter().map(|&x| float(x)).collect());
    match &c.dist {
        DistSpec::GaussianRing { modes, radius, sigma } => e.extend([
            ("dist", Value::String("gaussian-ring".into())),
            ("modes", int(*modes)),
            ("radius", float(*radius)),
            ("sigma", float(*sigma)),
        ]),
        DistSpec::GaussianGrid {
            rows,
            cols,
            spacing,
            sigma,
        } => e.extend([
            ("dist", Value::String("gaussian-grid".into())),
            ("rows", int(*rows)),
            ("cols", int(*cols)),
            ("spacing", float(*spacing)),
            ("sigma", float(*sigma)),
        ]),
        DistSpec::Mixture1d {
            weights,
            means,
            sigmas,
        } => e.extend([
            ("dist", Value::String("mixture-1d".into())),
            ("weights", list(weights)),
            ("means", list(means)),
            ("sigmas", list(sigmas)),
        ]),
        DistSpec::Categorical { probs } => e.extend([
            ("dist", Value::String("categorical".into())),
            ("probs", list(probs)),
        ]),
    }
    e.extend([
        ("epsilon", float(t.epsilon)),
        ("alpha", float(t.alpha)),
        ("n_critic", int(t.n_critic)),
        ("n_gen", int(t.n_gen)),
        ("lambda_gp", float(t.lambda_gp)),
        ("lr_generator", float(t.lr_generator)),
        ("lr_critic", float(t.lr_critic)),
        ("lr_classifier", float(t.lr_classifier)),
        ("beta1", float(t.beta1)),
        ("beta2", float(t.beta2)),
        ("anneal", Value::Boolean(t.anneal)),
        ("batch_size", int(t.batch_size)),
        ("iterations", int(t.iterations)),
        ("seed", seed_value(t.seed)),
        ("reweighting", Value::Boolean(t.reweighting)),
        ("clipping", Value::Boolean(t.clipping)),
        ("sample_from_old", Value::Boolean(t.sample_from_old)),
        ("latent_dim", int(t.latent_dim)),
        ("hidden", Value::Array(t.hidden.iter().map(|&h| int(h)).collect())),
        ("activation", Value::String(t.activation.name().into())),
    ]);
    if let Activation::LeakyRelu(s) = t.activation {
        e.push(("leaky_slope", float(s)));
    }
    let k = &t.collapse;
    e.extend([
        ("eval_every", int(t.eval_every)),
        ("eval_samples", int(t.eval_samples)),
        ("sliced_projections", int(t.sliced_projections)),
        ("abort_on_collapse", Value::Boolean(t.abort_on_collapse)),
        ("collapse_window", int(k.window)),
        ("collapse_coverage_floor", int(k.coverage_floor)),
        ("collapse_loss_ceiling", float(k.loss_ceiling)),
        ("collapse_min_loss_variance", float(k.min_loss_variance)),
    ]);
    e
}

fn write_entries(e: &[(&str, Value)]) -> String {
    e.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn serialize_run_config(c: &RunConfig) -> String {
    write_entries(&run_entries(c))
}

pub fn serialize_sweep_spec(s: &SweepSpec) -> String {
    let strs = |v: Vec<&str>| Value::Array(v.into_iter().map(|x| Value::String(x.into())).collect());
    let mut e: Vec<(&str, Value)> = vec![
        ("trials", int(s.trials)),
        ("lr_min", float(s.lr_min)),
        ("lr_max", float(s.lr_max)),
        ("batch_sizes", Value::Array(s.batch_sizes.iter().map(|&b| int(b)).collect())),
        ("activations", strs(s.activations.iter().map(|a| a.name()).collect())),
        ("widths", Value::Array(s.widths.iter().map(|&w| int(w)).collect())),
        ("master_seed", seed_value(s.master_seed)),
        ("variants", strs(s.variants.iter().map(|v| v.name()).collect())),
    ];
    e.extend(run_entries(&s.base));
    write_entries(&e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse_run_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_sweep_spec("").unwrap(), SweepSpec::default());
    }

    #[test]
    fn every_key_is_listed() {
        let text = serialize_run_config(&RunConfig::default());
        for line in text.lines() {
            let k = line.split(" = ").next().unwrap();
            assert!(RUN_KEYS.contains(&k), "{k}");
        }
    }

    #[test]
    fn parses_typed_values() {
        let c = parse_run_config(
            "# ring\nseed = 7\nclipping = false\nhidden = [32, 16]\nactivation = \"relu\"\nlr_critic = 1\n",
        )
        .unwrap();
        assert_eq!(c.training.seed, 7);
        assert!(!c.training.clipping);
        assert_eq!(c.training.hidden, vec![32, 16]);
        assert_eq!(c.training.activation, Activation::Relu);
        assert_eq!(c.training.lr_critic, 1.0);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let e = parse_run_config("seed = 1\n\nlearning_rate = 0.1\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                key: "learning_rate".into(),
                line: Some(3),
                hint: None
            }
        );
        assert_eq!(e.to_string(), "line 3: unknown key `learning_rate`");
        let e = parse_run_config("rows = 3\n").unwrap_err();
        assert!(e.to_string().contains("does not apply"), "{e}");
    }

    #[test]
    fn type_errors_name_the_field() {
        let e = parse_run_config("iterations = 1\nbatch_size = \"big\"\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { key, line: Some(2), .. } if key == "batch_size"), "{e}");
        let e = parse_run_config("seed = -3\n").unwrap_err();
        assert!(e.to_string().contains("seed"));
        let e = parse_run_config("epsilon = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("epsilon"));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let e = parse_run_config("seed = 1\nalpha = = 2\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 2, .. }), "{e:?}");
        let e = parse_run_config("[training]\nseed = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }), "{e:?}");
    }

    #[test]
    fn mode_and_dist_must_agree() {
        assert!(parse_run_config("mode = \"exact\"\n").is_err());
        assert!(parse_run_config("dist = \"categorical\"\nprobs = [0.5, 0.5]\n").is_err());
        let c = parse_run_config("mode = \"exact\"\ndist = \"categorical\"\nprobs = [0.25, 0.75]\n").unwrap();
        assert_eq!(c.dist, DistSpec::Categorical { probs: vec![0.25, 0.75] });
    }

    #[test]
    fn overrides() {
        assert_eq!(parse_override("clipping=off").unwrap(), ("clipping".into(), Value::Boolean(false)));
        assert_eq!(parse_override("seed=12").unwrap(), ("seed".into(), Value::Integer(12)));
        assert_eq!(
            parse_override("activation=relu").unwrap(),
            ("activation".into(), Value::String("relu".into()))
        );
        assert!(parse_override("noequals").is_err());
        assert!(parse_override("=3").is_err());
        let text = apply_overrides("clipping = true\nseed = 4\n", &["clipping=off".into(), "hidden=[8]".into()]).unwrap();
        let c = parse_run_config(&text).unwrap();
        assert!(!c.training.clipping);
        assert_eq!(c.training.seed, 4);
        assert_eq!(c.training.hidden, vec![8]);
        let text = apply_overrides("", &["bogus=1".into()]).unwrap();
        assert!(matches!(parse_run_config(&text), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn huge_seed_round_trips() {
        let mut c = RunConfig::default();
        c.training.seed = u64::MAX;
        assert_eq!(parse_run_config(&serialize_run_config(&c)).unwrap(), c);
    }

    #[test]
    fn variants_set_flags_and_schedule() {
        let base = TrainingConfig::default();
        let b = Variant::Baseline.apply(&base);
        assert!(!b.reweighting && !b.clipping);
        assert_eq!((b.n_critic, b.n_gen), (5, 1));
        let f = Variant::Full.apply(&base);
        assert!(f.reweighting && f.clipping);
        assert_eq!((f.n_critic, f.n_gen), (5, 5));
        assert_eq!(Variant::Reweighting.apply(&base).n_gen, 1);
        assert_eq!(Variant::Clipping.apply(&base).n_gen, 5);
    }

    #[test]
    fn sweep_spec_parses() {
        let s = parse_sweep_spec(
            "trials = 40\nvariants = [\"baseline\", \"reweighting\"]\nactivations = [\"relu\"]\niterations = 100\n",
        )
        .unwrap();
        assert_eq!(s.trials, 40);
        assert_eq!(s.variants, vec![Variant::Baseline, Variant::Reweighting]);
        assert_eq!(s.activations, vec![Activation::Relu]);
        assert_eq!(s.base.training.iterations, 100);
        assert!(parse_sweep_spec("variants = [\"best\"]\n").is_err());
        assert!(parse_sweep_spec("variants = []\n").is_err());
        assert_eq!(parse_sweep_spec(&serialize_sweep_spec(&s)).unwrap(), s);
    }

    fn arb_dist() -> impl Strategy<Value = DistSpec> {
        prop_oneof![
            (1usize..20, 0.0f64..10.0, 1e-3f64..1.0)
                .prop_map(|(modes, radius, sigma)| DistSpec::GaussianRing { modes, radius, sigma }),
            (1usize..6, 1usize..6, 0.1f64..5.0, 1e-3f64..1.0).prop_map(|(rows, cols, spacing, sigma)| {
                DistSpec::GaussianGrid { rows, cols, spacing, sigma }
            }),
            (1usize..5, -5.0f64..5.0, 0.01f64..2.0).prop_map(|(n, m, s)| DistSpec::Mixture1d {
                weights: vec![1.0 / n as f64; n].iter().enumerate().map(|(i, w)| if i == 0 { 1.0 - w * (n - 1) as f64 } else { *w }).collect(),
                means: (0..n).map(|i| m + i as f64).collect(),
                sigmas: vec![s; n],
            }),
        ]
    }

    proptest! {
        #[test]
        fn run_config_round_trips(
            dist in arb_dist(),
            seed in any::<u64>(),
            eps in 0.01f64..0.99,
            lr in 1e-7f64..1.0,
            flags in any::<(bool, bool, bool)>(),
            hidden in proptest::collection::vec(1usize..300, 1..4),
            act in 0usize..3,
            slope in -1.0f64..1.0,
            iters in 0usize..100_000,
        ) {
            let mut c = RunConfig { dist, ..RunConfig::default() };
            c.out_dir = PathBuf::from(format!("runs/{seed}"));
            let t = &mut c.training;
            t.seed = seed;
            t.epsilon = eps;
            t.lr_critic = lr;
            t.lr_generator = lr / 3.0;
            (t.reweighting, t.clipping, t.anneal) = flags;
            t.hidden = hidden;
            t.activation = [Activation::LeakyRelu(slope), Activation::Relu, Activation::Tanh][act];
            t.iterations = iters;
            let text = serialize_run_config(&c);
            let back = parse_run_config(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(serialize_run_config(&back), text);
        }
    }
}
