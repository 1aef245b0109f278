//! Run configuration: a `key = value` text format with `[section]` headers.
//!
//! Keys form one flat namespace; each key has a home section and may appear
//! either there or before the first header. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use dgff_core::limitproc::BallParams;
use dgff_core::overlap::OverlapMode;
use dgff_core::{DecorationModel, DomainSpec, FieldModel, Site, BETA_C};
use num_rational::Rational64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Green,
    SampleField,
    FreeEnergy,
    HighPoints,
    Overlap,
    DerivativeCheck,
    LimitQ,
    QInfinity,
    Theorem2,
    Lemma32,
    Shift,
    Ibp,
    Decoration,
}

impl Experiment {
    pub const ALL: [Experiment; 13] = [
        Experiment::Green,
        Experiment::SampleField,
        Experiment::FreeEnergy,
        Experiment::HighPoints,
        Experiment::Overlap,
        Experiment::DerivativeCheck,
        Experiment::LimitQ,
        Experiment::QInfinity,
        Experiment::Theorem2,
        Experiment::Lemma32,
        Experiment::Shift,
        Experiment::Ibp,
        Experiment::Decoration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Green => "green",
            Experiment::SampleField => "sample-field",
            Experiment::FreeEnergy => "free-energy",
            Experiment::HighPoints => "high-points",
            Experiment::Overlap => "overlap",
            Experiment::DerivativeCheck => "derivative-check",
            Experiment::LimitQ => "limit-q",
            Experiment::QInfinity => "q-infinity",
            Experiment::Theorem2 => "theorem2",
            Experiment::Lemma32 => "lemma32",
            Experiment::Shift => "shift",
            Experiment::Ibp => "ibp",
            Experiment::Decoration => "decoration",
        }
    }

    /// Experiments on the limiting point process; every inverse temperature must exceed `beta_c`.
    pub fn is_limit(self) -> bool {
        matches!(self, Experiment::LimitQ | Experiment::QInfinity | Experiment::Theorem2 | Experiment::Shift)
    }

    /// Verifiers with a pass/fail gate.
    pub fn is_verify(self) -> bool {
        matches!(self, Experiment::Lemma32 | Experiment::Shift | Experiment::Ibp | Experiment::Decoration)
    }

    pub fn needs_lattice(self) -> bool {
        matches!(
            self,
            Experiment::Green
                | Experiment::SampleField
                | Experiment::FreeEnergy
                | Experiment::HighPoints
                | Experiment::Overlap
                | Experiment::DerivativeCheck
        )
    }

    fn needs_beta(self) -> bool {
        !matches!(
            self,
            Experiment::Green
                | Experiment::SampleField
                | Experiment::HighPoints
                | Experiment::Lemma32
                | Experiment::Ibp
                | Experiment::Decoration
        )
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

/// Lattice source: a domain shape or an explicit site list.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Shape(DomainSpec),
    Sites(Vec<Site>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Svg => "svg",
        }
    }
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            _ => Err(format!("unknown format `{s}` (expected csv, json or svg)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecorationKind {
    Constant,
    TwoSite,
    DgffBall,
}

impl DecorationKind {
    fn name(self) -> &'static str {
        match self {
            DecorationKind::Constant => "constant",
            DecorationKind::TwoSite => "two-site",
            DecorationKind::DgffBall => "dgff-ball",
        }
    }
}

impl FromStr for DecorationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(DecorationKind::Constant),
            "two-site" => Ok(DecorationKind::TwoSite),
            "dgff-ball" => Ok(DecorationKind::DgffBall),
            _ => Err(format!("unknown decoration `{s}` (expected constant, two-site or dgff-ball)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub domain: Domain,
    pub n: Vec<u32>,
    pub beta: Vec<f64>,
    /// Empty means "same as beta" where a second temperature is optional.
    pub beta_prime: Vec<f64>,
    pub model: FieldModel,
    pub mode: OverlapMode,
    pub replicates: usize,
    pub pairs: usize,
    /// Random walks for the Monte Carlo Green row; `None` skips it.
    pub walks: Option<u64>,
    pub samples: usize,
    pub lambda: Vec<f64>,
    pub delta_beta: f64,
    pub r: u32,
    /// Truncation level; derived from `epsilon` when absent.
    pub level: Option<f64>,
    pub epsilon: f64,
    pub decoration: DecorationKind,
    pub decoration_c: Vec<f64>,
    pub decoration_radius: u32,
    pub window_r: u32,
    pub window_big_r: u32,
    pub burn_in: u32,
    pub thin: u32,
    pub pool: usize,
    pub offset: f64,
    pub p: Vec<Rational64>,
    pub q: Vec<Rational64>,
    pub multipliers: Vec<Rational64>,
    pub multiplier_probs: Vec<Rational64>,
    pub instances: usize,
    pub seed: u64,
    /// 0 uses every available core.
    pub threads: usize,
    pub out: PathBuf,
    pub formats: Vec<Format>,
    pub dense_cap: usize,
}

impl RunConfig {
    pub fn decoration_model(&self) -> DecorationModel {
        match self.decoration {
            DecorationKind::Constant => DecorationModel::Constant {
                c: self.decoration_c.first().copied().unwrap_or(0.0),
                radius: self.decoration_radius,
            },
            DecorationKind::TwoSite => DecorationModel::TwoSite { gaps: self.decoration_c.clone() },
            DecorationKind::DgffBall => DecorationModel::DgffBall(BallParams {
                r: self.window_r,
                big_r: self.window_big_r,
                burn_in: self.burn_in,
                thin: self.thin,
            }),
        }
    }

    /// `(beta, beta')` combinations: the product of both lists, or the
    /// diagonal when `beta_prime` is empty.
    pub fn beta_pairs(&self) -> Vec<(f64, f64)> {
        if self.beta_prime.is_empty() {
            self.beta.iter().map(|&b| (b, b)).collect()
        } else {
            self.beta.iter().flat_map(|&b| self.beta_prime.iter().map(move |&bp| (b, bp))).collect()
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    /// Canonical text form; `parse_config(&c.to_text()) == Ok(c)`.
    pub fn to_text(&self) -> String {
        let mut sections: BTreeMap<&str, Vec<(&str, String)>> = BTreeMap::new();
        let mut put = |key: &'static str, value: String| {
            let sec = KEYS.iter().find(|k| k.name == key).expect("declared key").section;
            sections.entry(sec).or_default().push((key, value));
        };
        put("experiment", self.experiment.name().into());
        put("seed", self.seed.to_string());
        put("threads", self.threads.to_string());
        put("out", self.out.display().to_string());
        put("formats", join(&self.formats.iter().map(|f| f.name()).collect::<Vec<_>>()));
        put("dense_cap", self.dense_cap.to_string());
        match &self.domain {
            Domain::Shape(spec) => {
                put("domain", spec.keyword().into());
                match *spec {
                    DomainSpec::UnitSquare => {}
                    DomainSpec::Disc { center, radius } => {
                        put("center", format!("{},{}", center.0, center.1));
                        put("radius", radius.to_string());
                    }
                    DomainSpec::Annulus { center, r_in, r_out } => {
                        put("center", format!("{},{}", center.0, center.1));
                        put("r_in", r_in.to_string());
                        put("r_out", r_out.to_string());
                    }
                }
            }
            Domain::Sites(sites) => {
                put("domain", "sites".into());
                put("sites", sites.iter().map(|(x, y)| format!("{x}:{y}")).collect::<Vec<_>>().join(","));
            }
        }
        if !self.n.is_empty() {
            put("N", join(&self.n));
        }
        if !self.beta.is_empty() {
            put("beta", join(&self.beta));
        }
        if !self.beta_prime.is_empty() {
            put("beta_prime", join(&self.beta_prime));
        }
        put("model", model_name(self.model).into());
        put("mode", mode_name(self.mode).into());
        put("replicates", self.replicates.to_string());
        put("pairs", self.pairs.to_string());
        if let Some(w) = self.walks {
            put("walks", w.to_string());
        }
        put("samples", self.samples.to_string());
        put("lambda", join(&self.lambda));
        put("delta_beta", self.delta_beta.to_string());
        put("r", self.r.to_string());
        if let Some(l) = self.level {
            put("L", l.to_string());
        }
        put("epsilon", self.epsilon.to_string());
        put("decoration", self.decoration.name().into());
        if !self.decoration_c.is_empty() {
            put("decoration_c", join(&self.decoration_c));
        }
        put("decoration_radius", self.decoration_radius.to_string());
        put("window_r", self.window_r.to_string());
        put("window_R", self.window_big_r.to_string());
        put("burn_in", self.burn_in.to_string());
        put("thin", self.thin.to_string());
        put("pool", self.pool.to_string());
        put("offset", self.offset.to_string());
        put("p", join(&self.p));
        put("q", join(&self.q));
        put("multipliers", join(&self.multipliers));
        put("multiplier_probs", join(&self.multiplier_probs));
        put("instances", self.instances.to_string());
        let mut out = String::new();
        for sec in SECTIONS {
            if let Some(entries) = sections.get(sec) {
                out.push_str(&format!("[{sec}]\n"));
                for (k, v) in entries {
                    out.push_str(&format!("{k} = {v}\n"));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn model_name(m: FieldModel) -> &'static str {
    match m {
        FieldModel::Dgff => "dgff",
        FieldModel::Rem => "rem",
    }
}

fn mode_name(m: OverlapMode) -> &'static str {
    match m {
        OverlapMode::Sampled => "sampled",
        OverlapMode::Exact => "exact",
    }
}

pub const SECTIONS: [&str; 4] = ["run", "domain", "params", "limit"];

pub struct KeySpec {
    pub name: &'static str,
    pub section: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, section: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, section, help }
}

pub const KEYS: &[KeySpec] = &[
    key("experiment", "run", "experiment name (required)"),
    key("seed", "run", "master seed, u64 (required)"),
    key("threads", "run", "worker threads, 0 = all cores"),
    key("out", "run", "output directory"),
    key("formats", "run", "comma list of csv, json, svg"),
    key("dense_cap", "run", "largest lattice with a dense Green matrix"),
    key("domain", "domain", "unit-square | disc | annulus | sites"),
    key("center", "domain", "disc/annulus centre as x,y"),
    key("radius", "domain", "disc radius"),
    key("r_in", "domain", "annulus inner radius"),
    key("r_out", "domain", "annulus outer radius"),
    key("sites", "domain", "explicit sites x:y,x:y,... for domain=sites"),
    key("N", "domain", "comma list of lattice scales"),
    key("beta", "params", "comma list of inverse temperatures"),
    key("beta_prime", "params", "comma list of second inverse temperatures"),
    key("model", "params", "dgff | rem"),
    key("mode", "params", "overlap mode: sampled | exact"),
    key("replicates", "params", "independent replicates per grid point"),
    key("pairs", "params", "Gibbs pairs per overlap replica"),
    key("walks", "params", "random walks for the Monte Carlo Green row"),
    key("samples", "params", "Monte Carlo samples (ibp draws, decoration sweeps)"),
    key("lambda", "params", "comma list of high-point levels"),
    key("delta_beta", "params", "finite-difference step"),
    key("r", "params", "local-maximum radius"),
    key("instances", "params", "random instances for the lemma32 suite"),
    key("p", "params", "lemma32 weights, rationals"),
    key("q", "params", "lemma32 sequence, rationals"),
    key("multipliers", "params", "lemma32 multiplier values, rationals"),
    key("multiplier_probs", "params", "lemma32 multiplier probabilities, rationals"),
    key("L", "limit", "truncation level"),
    key("epsilon", "limit", "bound on neglected point-process mass"),
    key("decoration", "limit", "constant | two-site | dgff-ball"),
    key("decoration_c", "limit", "constant value or two-site gaps"),
    key("decoration_radius", "limit", "ball radius of the constant decoration"),
    key("window_r", "limit", "radius of the conditioned ball"),
    key("window_R", "limit", "radius of the simulation window"),
    key("burn_in", "limit", "heat-bath burn-in sweeps"),
    key("thin", "limit", "sweeps between pooled decorations"),
    key("pool", "limit", "decoration pool size and c_beta draws"),
    key("offset", "limit", "added to c_beta in the shift test"),
];

/// Where a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(l) => write!(f, "line {l}"),
            Origin::Override => f.write_str("command line"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: Option<Origin>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(o) = self.origin {
            write!(f, "{o}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

/// Every violation found in one pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Key/value pairs before validation.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, (String, Origin)>,
    errors: Vec<ConfigError>,
}

impl RawConfig {
    pub fn parse(text: &str) -> RawConfig {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let at = Some(Origin::Line(lineno));
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                match rest.strip_suffix(']').map(str::trim) {
                    Some(name) if SECTIONS.contains(&name) => section = Some(name.to_string()),
                    Some(name) => raw.errors.push(ConfigError {
                        origin: at,
                        key: None,
                        message: format!("unknown section [{name}] (expected one of {})", SECTIONS.join(", ")),
                    }),
                    None => raw.errors.push(ConfigError {
                        origin: at,
                        key: None,
                        message: "malformed section header".into(),
                    }),
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                raw.errors.push(ConfigError {
                    origin: at,
                    key: None,
                    message: format!("expected key = value, got `{line}`"),
                });
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(spec) = KEYS.iter().find(|s| s.name == k) else {
                raw.errors.push(ConfigError { origin: at, key: Some(k.into()), message: "unknown key".into() });
                continue;
            };
            if let Some(sec) = &section {
                if sec != spec.section {
                    raw.errors.push(ConfigError {
                        origin: at,
                        key: Some(k.into()),
                        message: format!("belongs in section [{}], found in [{sec}]", spec.section),
                    });
                    continue;
                }
            }
            if let Some((_, Origin::Line(first))) = raw.values.get(k) {
                raw.errors.push(ConfigError {
                    origin: at,
                    key: Some(k.into()),
                    message: format!("duplicate key, first set on line {first} and again on line {lineno}"),
                });
                continue;
            }
            raw.values.insert(k.to_string(), (v.to_string(), Origin::Line(lineno)));
        }
        raw
    }

    /// Sets or replaces a key from outside the file.
    pub fn set(&mut self, key: &str, value: &str) {
        if KEYS.iter().any(|s| s.name == key) {
            self.values.insert(key.to_string(), (value.to_string(), Origin::Override));
        } else {
            self.errors.push(ConfigError {
                origin: Some(Origin::Override),
                key: Some(key.into()),
                message: "unknown key".into(),
            });
        }
    }

    pub fn build(self) -> Result<RunConfig, ConfigErrors> {
        Builder { raw: self.values, errors: self.errors }.finish()
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    RawConfig::parse(text).build()
}

struct Builder {
    raw: BTreeMap<String, (String, Origin)>,
    errors: Vec<ConfigError>,
}

impl Builder {
    fn fail(&mut self, key: &str, message: impl Into<String>) {
        let origin = self.raw.get(key).map(|v| v.1);
        self.errors.push(ConfigError { origin, key: Some(key.into()), message: message.into() });
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        let (v, _) = self.raw.get(key)?.clone();
        match v.parse::<T>() {
            Ok(x) => Some(x),
            Err(e) => {
                self.fail(key, format!("cannot parse `{v}`: {e}"));
                None
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Option<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let (v, _) = self.raw.get(key)?.clone();
        let mut out = Vec::new();
        for part in v.split(',').map(str::trim) {
            match part.parse::<T>() {
                Ok(x) => out.push(x),
                Err(e) => {
                    self.fail(key, format!("cannot parse list entry `{part}`: {e}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn require<T>(&mut self, key: &str, v: Option<T>, why: &str) -> Option<T> {
        if v.is_none() && !self.raw.contains_key(key) {
            self.errors.push(ConfigError {
                origin: None,
                key: Some(key.into()),
                message: format!("missing required key ({why})"),
            });
        }
        v
    }

    fn at_least<T: PartialOrd + fmt::Display + Copy>(&mut self, key: &str, v: T, min: T) {
        if v < min {
            self.fail(key, format!("must be >= {min}, got {v}"));
        }
    }

    fn domain(&mut self) -> Domain {
        let shape: String = self.get("domain").unwrap_or_else(|| "unit-square".into());
        let center = match self.list::<f64>("center") {
            Some(c) if c.len() == 2 => (c[0], c[1]),
            Some(_) => {
                self.fail("center", "expected two coordinates x,y");
                (0.5, 0.5)
            }
            None => (0.5, 0.5),
        };
        let spec = match shape.as_str() {
            "unit-square" => DomainSpec::UnitSquare,
            "disc" => {
                let radius = self.get("radius");
                let radius = self.require("radius", radius, "domain=disc").unwrap_or(0.5);
                DomainSpec::Disc { center, radius }
            }
            "annulus" => {
                let r_in = self.get("r_in");
                let r_in = self.require("r_in", r_in, "domain=annulus").unwrap_or(0.2);
                let r_out = self.get("r_out");
                let r_out = self.require("r_out", r_out, "domain=annulus").unwrap_or(0.5);
                DomainSpec::Annulus { center, r_in, r_out }
            }
            "sites" => {
                let sites = self.sites();
                return Domain::Sites(sites);
            }
            other => {
                self.fail("domain", format!("unknown shape `{other}` (expected unit-square, disc, annulus or sites)"));
                DomainSpec::UnitSquare
            }
        };
        if let Err(e) = spec.validate() {
            self.fail("domain", e.to_string());
        }
        Domain::Shape(spec)
    }

    fn sites(&mut self) -> Vec<Site> {
        let Some((v, _)) = self.raw.get("sites").cloned() else {
            self.require::<()>("sites", None, "domain=sites");
            return Vec::new();
        };
        let mut out = Vec::new();
        for part in v.split(',').map(str::trim) {
            let parsed = part.split_once(':').and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)));
            match parsed {
                Some(s) => out.push(s),
                None => {
                    self.fail("sites", format!("expected x:y, got `{part}`"));
                    return Vec::new();
                }
            }
        }
        if out.is_empty() {
            self.fail("sites", "site list is empty");
        }
        out
    }

    fn finish(mut self) -> Result<RunConfig, ConfigErrors> {
        let experiment = self.get::<Experiment>("experiment");
        let experiment = self.require("experiment", experiment, "names the experiment to run");
        let seed = self.get::<u64>("seed");
        let seed = self.require("seed", seed, "master seed");
        let domain = self.domain();
        let n = self.list::<u32>("N").unwrap_or_default();
        let beta = self.list::<f64>("beta").unwrap_or_default();
        let beta_prime = self.list::<f64>("beta_prime").unwrap_or_default();
        let model = match self.get::<String>("model").as_deref() {
            None | Some("dgff") => FieldModel::Dgff,
            Some("rem") => FieldModel::Rem,
            Some(other) => {
                self.fail("model", format!("unknown model `{other}` (expected dgff or rem)"));
                FieldModel::Dgff
            }
        };
        let mode = match self.get::<String>("mode").as_deref() {
            None | Some("sampled") => OverlapMode::Sampled,
            Some("exact") => OverlapMode::Exact,
            Some(other) => {
                self.fail("mode", format!("unknown mode `{other}` (expected sampled or exact)"));
                OverlapMode::Sampled
            }
        };
        let fixture = |s: &str| -> Vec<Rational64> { s.split(',').map(|x| x.parse().unwrap()).collect() };
        let cfg = RunConfig {
            experiment: experiment.unwrap_or(Experiment::Green),
            domain,
            n,
            beta,
            beta_prime,
            model,
            mode,
            replicates: self.get("replicates").unwrap_or(100),
            pairs: self.get("pairs").unwrap_or(1000),
            walks: self.get("walks"),
            samples: self.get("samples").unwrap_or(10_000),
            lambda: self.list("lambda").unwrap_or_else(|| vec![0.5]),
            delta_beta: self.get("delta_beta").unwrap_or(0.05),
            r: self.get("r").unwrap_or(4),
            level: self.get("L"),
            epsilon: self.get("epsilon").unwrap_or(dgff_core::limitproc::DEFAULT_EPSILON),
            decoration: self.get("decoration").unwrap_or(DecorationKind::DgffBall),
            decoration_c: self.list("decoration_c").unwrap_or_default(),
            decoration_radius: self.get("decoration_radius").unwrap_or(1),
            window_r: self.get("window_r").unwrap_or(2),
            window_big_r: self.get("window_R").unwrap_or(8),
            burn_in: self.get("burn_in").unwrap_or(200),
            thin: self.get("thin").unwrap_or(10),
            pool: self.get("pool").unwrap_or(4096),
            offset: self.get("offset").unwrap_or(0.0),
            p: self.list("p").unwrap_or_else(|| fixture("2/3,1/3")),
            q: self.list("q").unwrap_or_else(|| fixture("1,0")),
            multipliers: self.list("multipliers").unwrap_or_else(|| fixture("1,2")),
            multiplier_probs: self.list("multiplier_probs").unwrap_or_else(|| fixture("1/2,1/2")),
            instances: self.get("instances").unwrap_or(0),
            seed: seed.unwrap_or(0),
            threads: self.get("threads").unwrap_or(0),
            out: self.get::<String>("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
            formats: self.list("formats").unwrap_or_else(|| vec![Format::Csv, Format::Json, Format::Svg]),
            dense_cap: self.get("dense_cap").unwrap_or(dgff_core::greens::DEFAULT_DENSE_CAP),
        };
        if let Some(e) = experiment {
            self.validate(e, &cfg);
        }
        if self.errors.is_empty() {
            Ok(cfg)
        } else {
            self.errors.sort_by_key(|e| match e.origin {
                Some(Origin::Line(l)) => (0, l),
                Some(Origin::Override) => (1, 0),
                None => (2, 0),
            });
            Err(ConfigErrors(self.errors))
        }
    }

    fn validate(&mut self, e: Experiment, c: &RunConfig) {
        for (key, v) in [
            ("replicates", c.replicates),
            ("pairs", c.pairs),
            ("samples", c.samples),
            ("pool", c.pool),
            ("dense_cap", c.dense_cap),
        ] {
            self.at_least(key, v, 1);
        }
        if let Some(w) = c.walks {
            self.at_least("walks", w, 1);
        }
        self.at_least("thin", c.thin, 1);
        if c.formats.is_empty() {
            self.fail("formats", "at least one format is needed");
        }
        if e.needs_lattice() {
            if c.n.is_empty() {
                self.require::<()>("N", None, "lattice experiments need at least one scale");
            }
            if c.n.contains(&0) {
                self.fail("N", "every scale must be >= 1");
            }
        }
        if e.needs_beta() && c.beta.is_empty() {
            self.require::<()>("beta", None, &format!("experiment={e} needs at least one inverse temperature"));
        }
        if e == Experiment::Theorem2 && c.beta_prime.is_empty() {
            self.require::<()>("beta_prime", None, "experiment=theorem2 compares two temperatures");
        }
        if e.is_limit() {
            for key in ["beta", "beta_prime"] {
                let list = if key == "beta" { &c.beta } else { &c.beta_prime };
                if let Some(b) = list.iter().find(|&&b| !(b > BETA_C)) {
                    self.fail(key, format!("experiment={e} requires every {key} > beta_c = {BETA_C:.6}, got {b}"));
                }
            }
        } else {
            for key in ["beta", "beta_prime"] {
                let list = if key == "beta" { &c.beta } else { &c.beta_prime };
                if let Some(b) = list.iter().find(|&&b| !(b >= 0.0 && b.is_finite())) {
                    self.fail(key, format!("inverse temperatures must be finite and >= 0, got {b}"));
                }
            }
            if e == Experiment::DerivativeCheck {
                if let Some(b) = c.beta.iter().find(|&&b| !(b > c.delta_beta)) {
                    self.fail("beta", format!("derivative check needs beta > delta_beta = {}, got {b}", c.delta_beta));
                }
            }
        }
        if !(c.delta_beta > 0.0) {
            self.fail("delta_beta", format!("must be > 0, got {}", c.delta_beta));
        }
        if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
            self.fail("epsilon", format!("must lie in (0, 1), got {}", c.epsilon));
        }
        if let Some(l) = c.level {
            if !(l > 0.0 && l.is_finite()) {
                self.fail("L", format!("must be > 0, got {l}"));
            }
        }
        if c.lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            self.fail("lambda", "levels must be > 0");
        }
        if !c.offset.is_finite() {
            self.fail("offset", "must be finite");
        }
        if e.is_limit() || e == Experiment::Decoration {
            if matches!(c.decoration, DecorationKind::Constant | DecorationKind::TwoSite) && c.decoration_c.is_empty() {
                self.require::<()>(
                    "decoration_c",
                    None,
                    &format!("decoration={} needs its values", c.decoration.name()),
                );
            } else if let Err(err) = c.decoration_model().validate() {
                self.fail("decoration", err.to_string());
            }
            if e == Experiment::Decoration && c.window_r == 0 {
                self.fail("window_r", "the self-check needs a conditioned ball, window_r >= 1");
            }
        }
        if e == Experiment::Lemma32 {
            if c.p.is_empty() || c.p.len() != c.q.len() {
                self.fail("q", "p and q must be non-empty and of equal length");
            }
            if c.multipliers.is_empty() || c.multipliers.len() != c.multiplier_probs.len() {
                self.fail("multiplier_probs", "needs one probability per multiplier value");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("experiment=free-energy\ndomain=unit-square\nN=32\nbeta=1.0\nseed=1\n").unwrap();
        assert_eq!(c.experiment, Experiment::FreeEnergy);
        assert_eq!(c.domain, Domain::Shape(DomainSpec::UnitSquare));
        assert_eq!(c.n, vec![32]);
        assert_eq!(c.beta, vec![1.0]);
        assert_eq!(c.replicates, 100);
        assert_eq!(c.formats.len(), 3);
        assert_eq!(c.dense_cap, 5000);
    }

    #[test]
    fn limit_experiment_names_beta_c() {
        let err = parse_config("experiment=limit-q\nbeta=0\nseed=1\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("beta_c"), "{text}");
        assert!(text.contains("line 2"), "{text}");
    }

    #[test]
    fn duplicate_key_reports_both_lines() {
        let err = parse_config("experiment=green\nN=8\nseed=1\nN=16\n").unwrap_err();
        assert_eq!(err.0.len(), 1);
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn all_violations_are_collected() {
        let text = "[run]\nexperiment=overlap\nbogus=1\n[params]\nreplicates=0\npairs=x\n[nowhere]\n";
        let err = parse_config(text).unwrap_err();
        let msg = err.to_string();
        for needle in
            ["line 3", "`bogus`", "line 5", "`replicates`", "line 6", "`pairs`", "line 7", "`seed`", "`N`", "`beta`"]
        {
            assert!(msg.contains(needle), "missing {needle} in\n{msg}");
        }
    }

    #[test]
    fn sections_are_checked() {
        let err = parse_config("[limit]\nexperiment=green\n").unwrap_err();
        assert!(err.to_string().contains("belongs in section [run]"));
        let ok = parse_config("[run]\nexperiment=green\nseed=3\n[domain]\nN=8\n").unwrap();
        assert_eq!(ok.seed, 3);
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut raw = RawConfig::parse("experiment=green\nN=8\nseed=1\n");
        raw.set("N", "4,8");
        raw.set("seed", "9");
        let c = raw.build().unwrap();
        assert_eq!((c.n, c.seed), (vec![4, 8], 9));
    }

    #[test]
    fn explicit_sites() {
        let c = parse_config("experiment=green\ndomain=sites\nsites=0:0,1:0\nN=1\nseed=1\n").unwrap();
        assert_eq!(c.domain, Domain::Sites(vec![(0, 0), (1, 0)]));
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        let shape = prop_oneof![
            Just(Domain::Shape(DomainSpec::UnitSquare)),
            (0.1f64..0.9, 0.1f64..0.9, 0.05f64..2.0)
                .prop_map(|(x, y, r)| Domain::Shape(DomainSpec::Disc { center: (x, y), radius: r })),
            (0.05f64..0.5, 0.01f64..0.5).prop_map(|(a, d)| Domain::Shape(DomainSpec::Annulus {
                center: (0.5, 0.5),
                r_in: a,
                r_out: a + d
            })),
            prop::collection::vec((-5i64..5, -5i64..5), 1..5).prop_map(Domain::Sites),
        ];
        let betas = prop::collection::vec(2.6f64..20.0, 1..4);
        let rat = (1i64..9, 1i64..9).prop_map(|(a, b)| Rational64::new(a, b));
        (
            (
                prop::sample::select(Experiment::ALL.to_vec()),
                shape,
                prop::collection::vec(1u32..300, 1..4),
                betas.clone(),
                betas,
            ),
            (1usize..10_000, 1usize..10_000, prop::option::of(1u64..1_000_000), 1usize..1_000_000, 0.01f64..10.0),
            (prop::option::of(0.1f64..50.0), 1e-9f64..0.5, prop::collection::vec(0.0f64..5.0, 1..4), 0u32..5, 1u32..12),
            (any::<u64>(), 0usize..16, prop::collection::vec(rat.clone(), 1..4), prop::collection::vec(rat, 1..4)),
        )
            .prop_map(
                |(
                    (experiment, domain, n, beta, beta_prime),
                    (replicates, pairs, walks, samples, delta),
                    (level, epsilon, dc, r, big_r),
                    (seed, threads, p, mult),
                )| {
                    let decoration = if dc.len() == 1 { DecorationKind::Constant } else { DecorationKind::TwoSite };
                    RunConfig {
                        experiment,
                        domain,
                        n,
                        beta,
                        beta_prime,
                        model: if seed % 2 == 0 { FieldModel::Dgff } else { FieldModel::Rem },
                        mode: if seed % 3 == 0 { OverlapMode::Exact } else { OverlapMode::Sampled },
                        replicates,
                        pairs,
                        walks,
                        samples,
                        lambda: vec![0.5, delta],
                        delta_beta: delta / 100.0,
                        r: r + 1,
                        level,
                        epsilon,
                        decoration,
                        decoration_c: dc,
                        decoration_radius: r,
                        window_r: (r + 1).min(big_r),
                        window_big_r: big_r,
                        burn_in: 7,
                        thin: 3,
                        pool: samples,
                        offset: delta - 1.0,
                        q: p.clone(),
                        p,
                        multiplier_probs: mult.clone(),
                        multipliers: mult,
                        instances: threads * 10,
                        seed,
                        threads,
                        out: PathBuf::from(format!("runs/r{threads}")),
                        formats: vec![Format::Csv, Format::Svg],
                        dense_cap: 100 + pairs,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn round_trip(c in arb_config()) {
            let text = c.to_text();
            prop_assert_eq!(parse_config(&text), Ok(c), "{}", text);
        }
    }
}
