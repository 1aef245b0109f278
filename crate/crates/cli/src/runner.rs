//! Experiment dispatch, artifact bookkeeping and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use dgff_core::fields::{
    extremal_stats, free_energy, free_energy_limit, high_points, max_centering, sample_dgff, sample_rem,
};
use dgff_core::greens::{green_exact, green_mc_batched};
use dgff_core::limitproc::{
    decoration_self_check, empirical_cdf, lemma_hypotheses, lemma_suite, perturbed_inner_product_exact,
    perturbed_inner_product_mc, q_at_infinity, rational, sample_q, strictness_expected, theorem2_gap, truncation_level,
    verify_shift, verify_shift_joint, BallParams, DecorationTable, DiscreteLaw, LimitParams, ENUMERATION_BUDGET,
};
use dgff_core::overlap::{
    derivative_identity, gaussian_ibp_check, ibp_catalog, overlap_distribution_on, random_covariance, OverlapMode,
    OverlapSetup, TestFunction,
};
use dgff_core::stats::Summary;
use dgff_core::{build_lattice, DomainSpec, FieldModel, FieldSample, Lattice, SeedSource};
use num_rational::{BigRational, Rational64};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Domain, Experiment, Format, RunConfig};
use crate::plot::{render, Curve, PlotData, PlotError, PlotKind, Series};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{experiment} ({context}): {source}")]
    Core {
        experiment: Experiment,
        context: String,
        #[source]
        source: dgff_core::Error,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl RunError {
    /// 2 for resource caps, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Core { source: dgff_core::Error::ResourceCap { .. }, .. } => 2,
            _ => 1,
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub kind: String,
    pub bytes: u64,
    /// Absent only for the manifest itself.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedSeed {
    pub label: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateOutcome {
    pub passed: bool,
    pub summary: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config: String,
    pub code_version: String,
    pub master_seed: u64,
    /// Each grid point runs on `SeedSource::new(seed)`; every random stream
    /// is `stream_id(seed, tag, replicate)`.
    pub seeds: Vec<DerivedSeed>,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<Artifact>,
    pub gate: Option<GateOutcome>,
}

impl RunManifest {
    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    master: SeedSource,
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    seeds: Vec<DerivedSeed>,
    gate: Option<GateOutcome>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl<'a> Ctx<'a> {
    fn core<T>(&self, context: impl Into<String>, r: dgff_core::Result<T>) -> RunResult<T> {
        r.map_err(|source| RunError::Core { experiment: self.cfg.experiment, context: context.into(), source })
    }

    /// Seeds for one grid point, recorded in the manifest.
    fn child(&mut self, label: impl Into<String>) -> SeedSource {
        let index = self.seeds.len() as u64;
        let s = self.master.child(self.cfg.experiment.name(), index);
        self.seeds.push(DerivedSeed { label: label.into(), seed: s.master() });
        s
    }

    fn write(&mut self, name: &str, kind: &str, bytes: &[u8]) -> RunResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| RunError::Io { path, source })?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            kind: kind.to_string(),
            bytes: bytes.len() as u64,
            sha256: Some(hex(&Sha256::digest(bytes))),
        });
        Ok(())
    }

    /// CSV with the schema line, a header and pre-formatted rows.
    fn csv(&mut self, name: &str, header: &str, rows: &[String]) -> RunResult<()> {
        if !self.cfg.wants(Format::Csv) {
            return Ok(());
        }
        let mut s = String::from("# schema=1\n");
        s.push_str(header);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        self.write(name, "csv", s.as_bytes())
    }

    /// CSV produced by a core writer, which emits its own schema line.
    fn csv_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> RunResult<()> {
        if !self.cfg.wants(Format::Csv) {
            return Ok(());
        }
        let mut buf = Vec::new();
        f(&mut buf).map_err(|source| RunError::Io { path: self.dir.join(name), source })?;
        self.write(name, "csv", &buf)
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> RunResult<()> {
        if !self.cfg.wants(Format::Json) {
            return Ok(());
        }
        let text = serde_json::to_string_pretty(value).expect("json values serialise");
        self.write(name, "json", text.as_bytes())
    }

    fn svg(&mut self, name: &str, series: Series, kind: PlotKind) -> RunResult<()> {
        if !self.cfg.wants(Format::Svg) {
            return Ok(());
        }
        let text = render(&series, kind)?;
        self.write(name, "svg", text.as_bytes())
    }

    fn lattice(&self, n: u32) -> RunResult<Arc<Lattice>> {
        let lat = match &self.cfg.domain {
            Domain::Shape(spec) => self.core(format!("N={n}"), build_lattice(*spec, n))?,
            Domain::Sites(sites) => Lattice::from_sites(DomainSpec::UnitSquare, n, sites.clone()),
        };
        if lat.is_empty() {
            return Err(RunError::Core {
                experiment: self.cfg.experiment,
                context: format!("N={n}"),
                source: dgff_core::Error::DegenerateLattice("the domain contains no lattice sites".into()),
            });
        }
        Ok(Arc::new(lat))
    }

    fn setup(&self, n: u32) -> RunResult<OverlapSetup> {
        let lat = self.lattice(n)?;
        self.core(format!("N={n}"), OverlapSetup::from_lattice(lat, self.cfg.dense_cap))
    }

    fn set_gate(&mut self, passed: bool, summary: String) {
        self.gate = Some(GateOutcome { passed, summary });
    }
}

fn sample_field(
    setup: &OverlapSetup,
    model: FieldModel,
    rng: &mut dgff_core::StreamRng,
) -> dgff_core::Result<FieldSample> {
    match model {
        FieldModel::Dgff => Ok(sample_dgff(&setup.chol, rng)),
        FieldModel::Rem => sample_rem(&setup.lattice, setup.green.max_diag(), rng),
    }
}

/// Executes the configured experiment and writes its artifacts and `manifest.json`.
pub fn run(cfg: &RunConfig) -> RunResult<RunManifest> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out).map_err(|source| RunError::Io { path: cfg.out.clone(), source })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| RunError::Threads(e.to_string()))?;
    let threads = pool.current_num_threads();
    let mut ctx = Ctx {
        cfg,
        master: SeedSource::new(cfg.seed),
        dir: cfg.out.clone(),
        artifacts: Vec::new(),
        seeds: Vec::new(),
        gate: None,
    };
    pool.install(|| dispatch(&mut ctx))?;
    let mut manifest = RunManifest {
        experiment: cfg.experiment.name().to_string(),
        config: cfg.to_text(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.seed,
        seeds: ctx.seeds,
        threads,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        artifacts: ctx.artifacts,
        gate: ctx.gate,
    };
    manifest.artifacts.push(Artifact { path: "manifest.json".into(), kind: "manifest".into(), bytes: 0, sha256: None });
    let path = cfg.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })?;
    Ok(manifest)
}

fn dispatch(ctx: &mut Ctx) -> RunResult<()> {
    match ctx.cfg.experiment {
        Experiment::Green => green(ctx),
        Experiment::SampleField => sample_fields(ctx),
        Experiment::FreeEnergy => free_energies(ctx),
        Experiment::HighPoints => high_point_counts(ctx),
        Experiment::Overlap => overlaps(ctx),
        Experiment::DerivativeCheck => derivative(ctx),
        Experiment::LimitQ | Experiment::QInfinity => limit_q(ctx),
        Experiment::Theorem2 => theorem2(ctx),
        Experiment::Lemma32 => lemma32(ctx),
        Experiment::Shift => shift(ctx),
        Experiment::Ibp => ibp(ctx),
        Experiment::Decoration => decoration(ctx),
    }
}

fn green(ctx: &mut Ctx) -> RunResult<()> {
    let mut summary = Vec::new();
    let mut json_rows = Vec::new();
    for &n in &ctx.cfg.n.clone() {
        let lat = ctx.lattice(n)?;
        let g = ctx.core(format!("N={n}"), green_exact(&lat, ctx.cfg.dense_cap))?;
        ctx.csv_with(&format!("lattice_N{n}.csv"), |w| lat.write_csv(w))?;
        ctx.csv_with(&format!("green_N{n}.csv"), |w| g.write_csv(w))?;
        let residual = g.harmonicity_residual();
        let mut worst_z = None;
        if let Some(walks) = ctx.cfg.walks {
            let diag = g.diag();
            let x = (0..diag.len()).fold(0, |b, i| if diag[i] > diag[b] { i } else { b });
            let seeds = ctx.child(format!("N={n} mc"));
            let est = ctx.core(format!("N={n}"), green_mc_batched(&lat, x, walks, 16, &seeds))?;
            let mut rows = Vec::new();
            let mut worst = 0.0f64;
            for j in 0..lat.len() {
                let (sx, sy) = lat.site(j);
                let exact = g.get(x, j);
                let z = if est.se[j] > 0.0 { (est.mean[j] - exact) / est.se[j] } else { 0.0 };
                worst = worst.max(z.abs());
                rows.push(format!("{x},{j},{sx},{sy},{exact},{},{},{z}", est.mean[j], est.se[j]));
            }
            ctx.csv(&format!("green_mc_N{n}.csv"), "start,j,x,y,exact,mc,se,z", &rows)?;
            worst_z = Some(worst);
        }
        summary.push(format!(
            "{n},{},{},{residual},{}",
            lat.len(),
            g.max_diag(),
            worst_z.map(|z| z.to_string()).unwrap_or_default()
        ));
        json_rows.push(json!({"N": n, "sites": lat.len(), "max_diag": g.max_diag(), "harmonicity_residual": residual, "mc_max_abs_z": worst_z}));
        let cells = (0..lat.len()).map(|i| (lat.site(i).0, lat.site(i).1, g.get(i, i))).collect();
        ctx.svg(
            &format!("green_diag_N{n}.svg"),
            Series {
                title: format!("G_N(x,x), N={n}"),
                x_label: "x".into(),
                y_label: "y".into(),
                data: PlotData::Cells(cells),
            },
            PlotKind::Heatmap,
        )?;
    }
    ctx.csv("green.csv", "N,sites,max_diag,harmonicity_residual,mc_max_abs_z", &summary)?;
    ctx.json("green.json", &json!(json_rows))
}

fn sample_fields(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    for &n in &cfg.n {
        let setup = ctx.setup(n)?;
        let seeds = ctx.child(format!("N={n}"));
        let fields: Vec<FieldSample> = (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|k| {
                sample_field(&setup, cfg.model, &mut seeds.stream("field", k))
                    .map(|f| f.with_seed(seeds.stream_id("field", k)))
            })
            .collect::<dgff_core::Result<_>>()
            .map_err(|source| RunError::Core { experiment: cfg.experiment, context: format!("N={n}"), source })?;
        let lat = &setup.lattice;
        let mut rows = Vec::with_capacity(fields.len() * lat.len());
        let mut summary = Vec::new();
        for (k, f) in fields.iter().enumerate() {
            for (i, h) in f.values.iter().enumerate() {
                let (x, y) = lat.site(i);
                rows.push(format!("{k},{i},{x},{y},{h}"));
            }
            let ex = ctx.core(format!("N={n}"), extremal_stats(f, lat, cfg.r))?;
            let (ax, ay) = lat.site(f.argmax().expect("non-empty"));
            summary.push(format!(
                "{k},{},{},{ax},{ay},{},{}",
                f.seed.unwrap_or(0),
                ex.max,
                ex.recentered_max,
                ex.local_maxima.len()
            ));
        }
        ctx.csv(&format!("fields_N{n}.csv"), "replicate,index,x,y,h", &rows)?;
        ctx.csv(
            &format!("field_maxima_N{n}.csv"),
            "replicate,seed,max,argmax_x,argmax_y,recentered_max,local_maxima",
            &summary,
        )?;
        let first = &fields[0];
        let (title, cells): (String, Vec<(i64, i64, f64)>) = match cfg.beta.first() {
            Some(&b) => {
                let m = first.max();
                (
                    format!("exp(beta h), beta={b}, N={n}"),
                    (0..lat.len()).map(|i| (lat.site(i).0, lat.site(i).1, (b * (first.values[i] - m)).exp())).collect(),
                )
            }
            None => {
                (format!("h, N={n}"), (0..lat.len()).map(|i| (lat.site(i).0, lat.site(i).1, first.values[i])).collect())
            }
        };
        ctx.svg(
            &format!("field_N{n}.svg"),
            Series { title, x_label: "x".into(), y_label: "y".into(), data: PlotData::Cells(cells) },
            PlotKind::Heatmap,
        )?;
        let maxima: Vec<f64> = fields.iter().map(|f| f.max()).collect();
        let s = Summary::of(&maxima);
        ctx.json(
            &format!("fields_N{n}.json"),
            &json!({"N": n, "sites": lat.len(), "model": cfg.model, "replicates": cfg.replicates, "mean_max": s.mean, "se_max": s.se, "centering": max_centering(n)}),
        )?;
    }
    Ok(())
}

/// `replicates` fields per scale, evaluated by `eval` on common random numbers.
fn per_field<T: Send>(
    ctx: &mut Ctx,
    n: u32,
    eval: impl Fn(&FieldSample) -> dgff_core::Result<T> + Sync,
) -> RunResult<Vec<T>> {
    let setup = ctx.setup(n)?;
    let seeds = ctx.child(format!("N={n}"));
    let cfg = ctx.cfg;
    (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|k| eval(&sample_field(&setup, cfg.model, &mut seeds.stream("field", k))?))
        .collect::<dgff_core::Result<Vec<T>>>()
        .map_err(|source| RunError::Core { experiment: cfg.experiment, context: format!("N={n}"), source })
}

fn free_energies(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let mut samples = Vec::new();
    let mut summary = Vec::new();
    let mut js = Vec::new();
    let mut curves: Vec<Curve> =
        cfg.beta.iter().map(|b| Curve { label: format!("beta={b}"), points: vec![] }).collect();
    for &n in &cfg.n {
        let per = per_field(ctx, n, |f| {
            cfg.beta.iter().map(|&b| free_energy(f, b)).collect::<dgff_core::Result<Vec<f64>>>()
        })?;
        for (j, &b) in cfg.beta.iter().enumerate() {
            let col: Vec<f64> = per.iter().map(|r| r[j]).collect();
            for (k, v) in col.iter().enumerate() {
                samples.push(format!("{n},{b},{k},{v}"));
            }
            let s = Summary::of(&col);
            let limit = free_energy_limit(b);
            summary.push(format!("{n},{b},{},{},{limit}", s.mean, s.se));
            js.push(json!({"N": n, "beta": b, "mean": s.mean, "se": s.se, "limit": limit, "replicates": s.n}));
            curves[j].points.push((f64::from(n), s.mean));
        }
    }
    ctx.csv("free_energy_samples.csv", "N,beta,replicate,f", &samples)?;
    ctx.csv("free_energy.csv", "N,beta,mean,se,limit", &summary)?;
    ctx.json("free_energy.json", &json!(js))?;
    ctx.svg(
        "free_energy.svg",
        Series {
            title: "free energy".into(),
            x_label: "N".into(),
            y_label: "log Z / log N^2".into(),
            data: PlotData::Curves(curves),
        },
        PlotKind::Line,
    )
}

fn high_point_counts(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let mut samples = Vec::new();
    let mut summary = Vec::new();
    let mut js = Vec::new();
    let mut curves: Vec<Curve> =
        cfg.lambda.iter().map(|l| Curve { label: format!("lambda={l}"), points: vec![] }).collect();
    for &n in &cfg.n {
        let per = per_field(ctx, n, |f| {
            cfg.lambda.iter().map(|&l| high_points(f, l)).collect::<dgff_core::Result<Vec<_>>>()
        })?;
        for (j, &l) in cfg.lambda.iter().enumerate() {
            let mut exps = Vec::new();
            let mut counts = Vec::new();
            for (k, r) in per.iter().enumerate() {
                let hp = r[j];
                samples.push(format!("{n},{l},{k},{},{}", hp.count, hp.exponent));
                counts.push(hp.count as f64);
                if hp.exponent.is_finite() {
                    exps.push(hp.exponent);
                }
            }
            let (s, c) = (Summary::of(&exps), Summary::of(&counts));
            let empty = per.len() - exps.len();
            let limit = 1.0 - l * l;
            summary.push(format!("{n},{l},{},{},{},{empty},{limit}", c.mean, s.mean, s.se));
            js.push(json!({"N": n, "lambda": l, "mean_count": c.mean, "mean_exponent": s.mean, "se": s.se, "empty_fields": empty, "limit": limit}));
            if s.mean.is_finite() {
                curves[j].points.push((f64::from(n), s.mean));
            }
        }
    }
    ctx.csv("high_points_samples.csv", "N,lambda,replicate,count,exponent", &samples)?;
    ctx.csv("high_points.csv", "N,lambda,mean_count,mean_exponent,se,empty_fields,limit", &summary)?;
    ctx.json("high_points.json", &json!(js))?;
    if curves.iter().any(|c| !c.points.is_empty()) {
        ctx.svg(
            "high_points.svg",
            Series {
                title: "high points".into(),
                x_label: "N".into(),
                y_label: "log count / log N^2".into(),
                data: PlotData::Curves(curves),
            },
            PlotKind::Line,
        )?;
    }
    Ok(())
}

fn overlaps(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let mut tails = Vec::new();
    let mut reps = Vec::new();
    let mut summary = Vec::new();
    let mut js = Vec::new();
    let mut plot = 0;
    for &n in &cfg.n {
        let setup = ctx.setup(n)?;
        for (b, bp) in cfg.beta_pairs() {
            let seeds = ctx.child(format!("N={n} beta={b} beta_prime={bp}"));
            let est = ctx.core(
                format!("N={n} beta={b} beta'={bp}"),
                overlap_distribution_on(&setup, cfg.model, b, bp, cfg.replicates, cfg.pairs, cfg.mode, &seeds),
            )?;
            for k in 0..est.grid.len() {
                tails.push(format!(
                    "{n},{b},{bp},{},{},{},{}",
                    est.grid[k], est.tail[k], est.tail_se[k], est.tail_replica_se[k]
                ));
            }
            for (k, r) in est.per_replica.iter().enumerate() {
                reps.push(format!("{n},{b},{bp},{k},{},{}", r.seed, r.mean));
            }
            summary.push(format!("{n},{b},{bp},{},{},{}", est.mean, est.se, est.replica_se));
            js.push(json!({
                "N": n, "beta": b, "beta_prime": bp, "mode": est.mode, "model": est.model,
                "mean": est.mean, "se": est.se, "replica_se": est.replica_se,
                "grid": est.grid, "tail": est.tail, "tail_replica_se": est.tail_replica_se,
            }));
            let title = format!("overlap, N={n}, beta={b}, beta'={bp}");
            let series = match cfg.mode {
                OverlapMode::Sampled => Series {
                    title,
                    x_label: "q".into(),
                    y_label: "count".into(),
                    data: PlotData::Samples(est.draws.clone()),
                },
                OverlapMode::Exact => Series {
                    title,
                    x_label: "a".into(),
                    y_label: "P(q >= a)".into(),
                    data: PlotData::Curves(vec![Curve {
                        label: String::new(),
                        points: est.grid.iter().copied().zip(est.tail.iter().copied()).collect(),
                    }]),
                },
            };
            let kind = if cfg.mode == OverlapMode::Sampled { PlotKind::Histogram } else { PlotKind::Line };
            ctx.svg(&format!("overlap_{plot}.svg"), series, kind)?;
            plot += 1;
        }
    }
    ctx.csv("overlap_tail.csv", "N,beta,beta_prime,a,tail,pooled_se,replica_se", &tails)?;
    ctx.csv("overlap_replicas.csv", "N,beta,beta_prime,replica,seed,mean", &reps)?;
    ctx.csv("overlap.csv", "N,beta,beta_prime,mean,pooled_se,replica_se", &summary)?;
    ctx.json("overlap.json", &json!(js))
}

fn derivative(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let mut rows = Vec::new();
    let mut js = Vec::new();
    for &n in &cfg.n {
        let setup = ctx.setup(n)?;
        for &b in &cfg.beta {
            let seeds = ctx.child(format!("N={n} beta={b}"));
            let r = ctx.core(
                format!("N={n} beta={b}"),
                derivative_identity(&setup, b, cfg.delta_beta, cfg.replicates, &seeds),
            )?;
            rows.push(format!(
                "{n},{b},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.delta_beta,
                r.lhs,
                r.lhs_se,
                r.rhs,
                r.rhs_se,
                r.rhs_finite,
                r.mean_overlap,
                r.diff,
                r.combined_se,
                r.diff_finite,
                r.combined_se_finite,
                r.fd_bias.map(|x| x.to_string()).unwrap_or_default(),
                r.finite_size_bias,
                r.reported_bias
            ));
            js.push(
                json!({"N": n, "report": r, "agrees_4se": r.agrees(4.0), "agrees_finite_4se": r.agrees_finite(4.0)}),
            );
        }
    }
    ctx.csv(
        "derivative.csv",
        "N,beta,delta_beta,lhs,lhs_se,rhs,rhs_se,rhs_finite,mean_overlap,diff,combined_se,diff_finite,combined_se_finite,fd_bias,finite_size_bias,reported_bias",
        &rows,
    )?;
    ctx.json("derivative.json", &json!(js))
}

fn decoration_table(ctx: &mut Ctx) -> RunResult<DecorationTable> {
    let seeds = ctx.child("decoration pool");
    let model = ctx.cfg.decoration_model();
    ctx.core("decoration", model.table(ctx.cfg.pool, &seeds))
}

fn level_for(ctx: &Ctx, betas: &[f64]) -> RunResult<f64> {
    match ctx.cfg.level {
        Some(l) => Ok(l),
        None => ctx.core("truncation", truncation_level(betas, ctx.cfg.epsilon)),
    }
}

const CDF_GRID: [f64; 20] =
    [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0];

fn limit_q(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let infinity = cfg.experiment == Experiment::QInfinity;
    let table = decoration_table(ctx)?;
    let pairs: Vec<(f64, f64)> =
        if infinity { cfg.beta.iter().map(|&b| (b, f64::INFINITY)).collect() } else { cfg.beta_pairs() };
    let mut samples = Vec::new();
    let mut summary = Vec::new();
    let mut cdf = Vec::new();
    let mut js = Vec::new();
    for (k, &(b, bp)) in pairs.iter().enumerate() {
        let betas = if infinity { vec![b] } else { vec![b, bp] };
        let level = level_for(ctx, &betas)?;
        let params = LimitParams { level, epsilon: cfg.epsilon, replicates: cfg.replicates };
        let seeds = ctx.child(format!("beta={b} beta_prime={bp}"));
        let est = if infinity {
            ctx.core(format!("beta={b}"), q_at_infinity(b, &table, params, &seeds))?
        } else {
            ctx.core(format!("beta={b} beta'={bp}"), sample_q(b, bp, &table, params, &seeds))?
        };
        for (i, (q, r)) in est.values.iter().zip(&est.partner).enumerate() {
            samples.push(format!("{b},{bp},{i},{q},{r},{}", q - r));
        }
        summary.push(format!(
            "{b},{bp},{level},{},{},{},{},{},{},{}",
            est.mean, est.se, est.partner_mean, est.partner_se, est.diff_mean, est.diff_se, est.deepened
        ));
        let (c1, c2) = (empirical_cdf(&est.values, &CDF_GRID), empirical_cdf(&est.partner, &CDF_GRID));
        for (a, r) in c1.iter().zip(&c2) {
            cdf.push(format!("{b},{bp},{},{},{},{},{}", a.0, a.1, a.2, r.1, r.2));
        }
        js.push(json!({
            "beta": b, "beta_prime": if infinity { json!("inf") } else { json!(bp) },
            "level": level, "tail_bounds": est.tail_bounds, "replicates": est.values.len(),
            "mean": est.mean, "se": est.se, "rem_mean": est.partner_mean, "rem_se": est.partner_se,
            "diff_mean": est.diff_mean, "diff_se": est.diff_se, "deepened": est.deepened,
            "decoration_table": table.len(),
        }));
        ctx.svg(
            &format!("{}_{k}.svg", cfg.experiment.name().replace('-', "_")),
            Series {
                title: format!("Q, beta={b}, beta'={bp}"),
                x_label: "Q".into(),
                y_label: "count".into(),
                data: PlotData::Samples(est.values.clone()),
            },
            PlotKind::Histogram,
        )?;
    }
    let stem = cfg.experiment.name().replace('-', "_");
    ctx.csv(&format!("{stem}_samples.csv"), "beta,beta_prime,replicate,q,q_rem,diff", &samples)?;
    ctx.csv(
        &format!("{stem}.csv"),
        "beta,beta_prime,level,mean,se,rem_mean,rem_se,diff_mean,diff_se,deepened",
        &summary,
    )?;
    ctx.csv(&format!("{stem}_cdf.csv"), "beta,beta_prime,t,cdf,se,rem_cdf,rem_se", &cdf)?;
    ctx.json(&format!("{stem}.json"), &json!(js))
}

fn theorem2(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let table = decoration_table(ctx)?;
    let mut rows = Vec::new();
    let mut js = Vec::new();
    for (b, bp) in cfg.beta_pairs() {
        let level = level_for(ctx, &[b, bp])?;
        let seeds = ctx.child(format!("beta={b} beta_prime={bp}"));
        let params = LimitParams { level, epsilon: cfg.epsilon, replicates: cfg.replicates };
        let g = ctx.core(format!("beta={b} beta'={bp}"), theorem2_gap(b, bp, &table, params, &seeds))?;
        rows.push(format!(
            "{b},{bp},{level},{},{},{},{},{},{}",
            g.mean_q, g.mean_q_rem, g.diff, g.diff_se, g.z, g.p_value
        ));
        js.push(json!({
            "beta": b, "beta_prime": bp, "level": level, "tail_bounds": g.estimate.tail_bounds,
            "mean_q": g.mean_q, "mean_q_rem": g.mean_q_rem, "diff": g.diff, "diff_se": g.diff_se,
            "z": g.z, "p_value": g.p_value, "replicates": cfg.replicates,
        }));
    }
    ctx.csv("theorem2.csv", "beta,beta_prime,level,mean_q,mean_q_rem,diff,diff_se,z,p_value", &rows)?;
    ctx.json("theorem2.json", &json!(js))
}

fn big(r: &Rational64) -> BigRational {
    rational(*r.numer(), *r.denom())
}

fn to_f64(r: &Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn lemma32(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let (p, q) = (cfg.p.iter().map(big).collect::<Vec<_>>(), cfg.q.iter().map(big).collect::<Vec<_>>());
    let law = DiscreteLaw {
        values: cfg.multipliers.iter().map(big).collect(),
        probs: cfg.multiplier_probs.iter().map(big).collect(),
    };
    let (pf, qf) = (cfg.p.iter().map(to_f64).collect::<Vec<_>>(), cfg.q.iter().map(to_f64).collect::<Vec<_>>());
    let lawf = DiscreteLaw {
        values: cfg.multipliers.iter().map(to_f64).collect(),
        probs: cfg.multiplier_probs.iter().map(to_f64).collect(),
    };
    let hypotheses = lemma_hypotheses(&pf, &qf, &lawf);
    let expected = strictness_expected(&pf, &qf, &lawf);
    let mut passed;
    let mut js = json!({"p": join(&cfg.p), "q": join(&cfg.q), "multipliers": join(&cfg.multipliers), "multiplier_probs": join(&cfg.multiplier_probs),
        "lemma_hypotheses": hypotheses, "strictness_expected": expected});
    match perturbed_inner_product_exact(&p, &q, &law, ENUMERATION_BUDGET) {
        Ok(r) => {
            use num_traits::ToPrimitive;
            let (e, b) = (r.expectation.to_f64().unwrap_or(f64::NAN), r.baseline.to_f64().unwrap_or(f64::NAN));
            passed = r.expectation <= r.baseline && r.strict == expected;
            ctx.csv(
                "lemma32.csv",
                "method,expectation,expectation_f64,baseline,baseline_f64,se,strict,lemma_hypotheses,strictness_expected,outcomes",
                &[format!("exact,{},{e},{},{b},0,{},{hypotheses},{expected},{}", r.expectation, r.baseline, r.strict, r.outcomes)],
            )?;
            js["method"] = json!("exact");
            js["expectation"] = json!(r.expectation.to_string());
            js["baseline"] = json!(r.baseline.to_string());
            js["expectation_f64"] = json!(e);
            js["strict"] = json!(r.strict);
            js["outcomes"] = json!(r.outcomes.to_string());
        }
        Err(dgff_core::Error::EnumerationBudget { .. }) => {
            let seeds = ctx.child("monte carlo fallback");
            let mc = ctx.core(
                "lemma32",
                perturbed_inner_product_mc(&pf, &qf, &lawf, cfg.samples, &mut seeds.stream("lemma-mc", 0)),
            )?;
            // without enumeration only the inequality is testable
            passed = mc.mean <= mc.baseline + 4.0 * mc.se;
            ctx.csv(
                "lemma32.csv",
                "method,expectation,expectation_f64,baseline,baseline_f64,se,strict,lemma_hypotheses,strictness_expected,outcomes",
                &[format!("monte-carlo,,{},,{},{},,{hypotheses},{expected},{}", mc.mean, mc.baseline, mc.se, mc.samples)],
            )?;
            js["method"] = json!("monte-carlo");
            js["expectation_f64"] = json!(mc.mean);
            js["se"] = json!(mc.se);
            js["baseline_f64"] = json!(mc.baseline);
        }
        Err(e) => return ctx.core("lemma32", Err(e)),
    }
    if cfg.instances > 0 {
        let seeds = ctx.child("random suite");
        let s = ctx.core("lemma32 suite", lemma_suite(cfg.instances, &seeds))?;
        passed &= s.violations == 0 && s.strictness_mismatches == 0;
        ctx.csv(
            "lemma32_suite.csv",
            "instances,violations,strictness_mismatches,strict,flat_equalities",
            &[format!(
                "{},{},{},{},{}",
                s.instances, s.violations, s.strictness_mismatches, s.strict, s.flat_equalities
            )],
        )?;
        js["suite"] = json!(s);
    }
    js["passed"] = json!(passed);
    ctx.json("lemma32.json", &js)?;
    ctx.set_gate(passed, format!("lemma32: {}", if passed { "consistent" } else { "inconsistent" }));
    Ok(())
}

fn join(xs: &[Rational64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn shift(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let table = decoration_table(ctx)?;
    let mut rows = Vec::new();
    let mut js = Vec::new();
    let mut all = true;
    if cfg.beta_prime.is_empty() {
        for &b in &cfg.beta {
            let level = level_for(ctx, &[b])?;
            let seeds = ctx.child(format!("beta={b}"));
            let params = LimitParams { level, epsilon: cfg.epsilon, replicates: cfg.replicates };
            let r = ctx.core(format!("beta={b}"), verify_shift(b, &table, params, cfg.pool, cfg.offset, &seeds))?;
            all &= !r.rejected;
            rows.push(format!(
                "{b},,{level},{},{},{},{},{},,{},{},{}",
                r.n, r.c_beta, r.c_beta_se, r.offset, r.ks.statistic, r.ks.p_value, r.best_shift, r.rejected
            ));
            js.push(json!({"level": level, "report": r}));
        }
    } else {
        for (b, bp) in cfg.beta_pairs() {
            let level = level_for(ctx, &[b, bp])?;
            let seeds = ctx.child(format!("beta={b} beta_prime={bp}"));
            let params = LimitParams { level, epsilon: cfg.epsilon, replicates: cfg.replicates };
            let r =
                ctx.core(format!("beta={b} beta'={bp}"), verify_shift_joint(b, bp, &table, params, cfg.pool, &seeds))?;
            all &= !r.rejected;
            rows.push(format!(
                "{b},{bp},{level},{},{},{},,{},{},{},,{}",
                cfg.replicates,
                r.c_beta,
                r.c_beta_se,
                r.ks_beta.statistic.max(r.ks_beta_prime.statistic),
                r.ks_beta.p_value.min(r.ks_beta_prime.p_value),
                r.corr_p_value,
                r.rejected
            ));
            js.push(json!({"level": level, "report": r}));
        }
    }
    ctx.csv(
        "shift.csv",
        "beta,beta_prime,level,n,c_beta,c_beta_se,offset,ks_statistic,ks_p_value,corr_p_value,best_shift,rejected",
        &rows,
    )?;
    ctx.json("shift.json", &json!(js))?;
    ctx.set_gate(all, format!("shift: {}", if all { "not rejected" } else { "rejected" }));
    Ok(())
}

fn function_name(f: &TestFunction) -> String {
    let list = |v: Vec<String>| v.join(" ");
    match f {
        TestFunction::Linear(w) => format!("linear {}", list(w.iter().map(|x| x.to_string()).collect())),
        TestFunction::Product(ix) => format!("product {}", list(ix.iter().map(|x| x.to_string()).collect())),
        TestFunction::SoftMax { beta } => format!("softmax {beta}"),
    }
}

/// Dimension of the Gaussian vector in the integration-by-parts check.
const IBP_DIM: usize = 3;

fn ibp(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let seeds = ctx.child("catalog");
    let catalog = ibp_catalog(IBP_DIM);
    let jobs: Vec<(usize, usize)> = (0..cfg.replicates).flat_map(|c| (0..catalog.len()).map(move |f| (c, f))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(c, f)| {
            let cov = random_covariance(IBP_DIM + 1, &mut seeds.stream("ibp-cov", c as u64));
            let mut rng = seeds.stream("ibp", (c * catalog.len() + f) as u64);
            gaussian_ibp_check(&cov, &catalog[f], cfg.samples, &mut rng)
        })
        .collect::<dgff_core::Result<Vec<_>>>()
        .map_err(|source| RunError::Core { experiment: cfg.experiment, context: "ibp".into(), source })?;
    let mut rows = Vec::new();
    let mut all = true;
    for (&(c, f), r) in jobs.iter().zip(&reports) {
        let ok = r.within(4.0);
        all &= ok;
        let z = if r.se > 0.0 { r.diff / r.se } else { 0.0 };
        rows.push(format!("{c},{f},{},{},{},{},{},{z},{ok}", function_name(&catalog[f]), r.lhs, r.rhs, r.diff, r.se));
    }
    ctx.csv("ibp.csv", "covariance,function,function_name,lhs,rhs,diff,se,z,within_4se", &rows)?;
    ctx.json(
        "ibp.json",
        &json!({"dimension": IBP_DIM, "samples": cfg.samples, "cases": reports.len(), "passed": all}),
    )?;
    ctx.set_gate(
        all,
        format!("ibp: {} cases, {}", reports.len(), if all { "all within 4 SE" } else { "some outside 4 SE" }),
    );
    Ok(())
}

fn decoration(ctx: &mut Ctx) -> RunResult<()> {
    let cfg = ctx.cfg;
    let params = BallParams { r: cfg.window_r, big_r: cfg.window_big_r, burn_in: cfg.burn_in, thin: cfg.thin };
    let seeds = ctx.child("self-check");
    let c = ctx.core("decoration", decoration_self_check(params, cfg.samples, cfg.samples, &seeds))?;
    let rows: Vec<String> = c
        .per_site
        .iter()
        .map(|((x, y), ks)| format!("{x},{y},{},{},{}", ks.statistic, ks.p_value, ks.rejects(c.site_alpha)))
        .collect();
    ctx.csv("decoration_sites.csv", "x,y,ks_statistic,p_value,rejected", &rows)?;
    let passed = c.sites_pass() && c.zero_mean_pass(4.0);
    ctx.csv(
        "decoration.csv",
        "sweeps,site_alpha,pooled_statistic,pooled_p_value,zero_mean,zero_mean_se,zero_mean_target,passed",
        &[format!(
            "{},{},{},{},{},{},{},{passed}",
            c.sweeps,
            c.site_alpha,
            c.pooled.statistic,
            c.pooled.p_value,
            c.zero_mean,
            c.zero_mean_se,
            c.zero_mean_target
        )],
    )?;
    ctx.json("decoration.json", &json!({"check": c, "passed": passed}))?;
    ctx.set_gate(passed, format!("decoration: {}", if passed { "consistent" } else { "inconsistent" }));
    Ok(())
}

/// Paths of regular files directly under `dir`, sorted.
pub fn list_files(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut out: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    Ok(out)
}
