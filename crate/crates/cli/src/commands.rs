use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mtsens::confounding::{residual_sd, ConfoundingSpec};
use mtsens::dataset::{load_csv, save_csv, validate_overlap, ObservationalDataset, TreatmentPair};
use mtsens::engine::{run_with_draws, EngineConfig, Estimand, PairwiseEffectPosterior};
use mtsens::gps::fit_gps;
use mtsens::simlab::{
    contour_grid_with_draws, metric_table, run_replications, write_metric_csv, write_replication_csv, ArmRatio, ContourGrid,
    Overlap, Scenario, SimStrategy, SimulationConfig,
};

use crate::config::{arm, AnalysisConfig, Profile};
use crate::error::CliError;
use crate::report::{self, AnalysisReport, DataSummary, OverlapSummary, PairEstimate, PriorEntry, SimulationReport};

pub const DEFAULT_SEED: u64 = 1;
const OVERLAP_EPS: f64 = 0.01;

#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub profile: Option<Profile>,
    pub quiet: bool,
}

/// Prints "label done/total" lines on stderr, at most once per percent.
struct Ticker {
    label: String,
    quiet: bool,
    last: Mutex<usize>,
}

impl Ticker {
    fn new(label: &str, quiet: bool) -> Self {
        Ticker { label: label.into(), quiet, last: Mutex::new(usize::MAX) }
    }

    fn tick(&self, done: usize, total: usize) {
        if self.quiet || total == 0 {
            return;
        }
        let pct = done * 100 / total;
        let mut last = self.last.lock().expect("ticker lock");
        if *last != pct || done == total {
            *last = pct;
            eprintln!("{} {done}/{total}", self.label);
        }
    }
}

fn note(g: &Globals, msg: &str) {
    if !g.quiet {
        eprintln!("{msg}");
    }
}

/// A loaded config with everything resolved against its data.
struct Prepared {
    cfg: AnalysisConfig,
    name: String,
    ds: ObservationalDataset,
    spec: ConfoundingSpec,
    engine: EngineConfig,
    sigma: Option<f64>,
    profile: Profile,
    out_dir: PathBuf,
}

fn prepare(path: &Path, g: &Globals) -> Result<Prepared, CliError> {
    let (cfg, base) = AnalysisConfig::load(path)?;
    let ctx = path.display().to_string();
    let data_path = base.join(&cfg.data.path);
    let ds = load_csv(&data_path, &cfg.schema()).map_err(|e| CliError::from(e).context(&format!("{ctx}: {}", data_path.display())))?;
    let sigma = if cfg.needs_sigma() {
        Some(residual_sd(&ds).map_err(|e| CliError::from(e).context(&ctx))?)
    } else {
        None
    };
    let spec = cfg.confounding_spec(&ds, sigma.unwrap_or(0.0)).map_err(|e| e.context(&ctx))?;
    spec.check_against(&ds).map_err(|e| CliError::from(e).context(&ctx))?;
    let profile = g.profile.or(cfg.profile).unwrap_or(Profile::Fast);
    let seed = g.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let engine = cfg.engine_config(&ds, profile, seed, 0).map_err(|e| e.context(&ctx))?;
    engine.validate(ds.n_arms()).map_err(|e| CliError::from(e).context(&ctx))?;
    let out_dir = match (&g.out_dir, &cfg.out_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => PathBuf::from("."),
    };
    let name = cfg
        .name
        .clone()
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    Ok(Prepared { cfg, name, ds, spec, engine, sigma, profile, out_dir })
}

fn analysis_report(p: &Prepared, post: &PairwiseEffectPosterior, flagged: usize) -> AnalysisReport {
    let ds = &p.ds;
    let lab = |a: usize| ds.label_of_arm(a);
    let estimand = match post.estimand {
        Estimand::Cate => "cate".to_string(),
        Estimand::Catt { reference } => format!("catt (reference {})", lab(reference)),
    };
    AnalysisReport {
        kind: "analysis".into(),
        name: p.name.clone(),
        estimand,
        profile: p.profile.name().into(),
        seed: post.seed,
        gps_seed: p.engine.gps_seed(),
        sensitivity_seed: p.engine.sensitivity_seed(),
        m1: post.m1,
        m2: post.m2,
        keep: post.keep,
        data: DataSummary { n: ds.n(), covariates: ds.p(), arms: ds.arm_labels().to_vec(), counts: ds.arm_counts() },
        gps: post.gps.clone(),
        sigma_hat: p.sigma,
        trees: p.engine.trees.clone(),
        priors: p
            .spec
            .ordered_pairs()
            .into_iter()
            .map(|(j, l)| PriorEntry { j: lab(j), l: lab(l), prior: p.spec.get(j, l).clone() })
            .collect(),
        overlap: OverlapSummary { eps: OVERLAP_EPS, flagged },
        pairs: post
            .pairs
            .iter()
            .map(|pp| PairEstimate {
                j: lab(pp.pair.j),
                k: lab(pp.pair.k),
                mean: pp.summary.mean,
                lower95: pp.summary.lower,
                upper95: pp.summary.upper,
                m1: post.m1,
                m2: post.m2,
                seed: post.seed,
            })
            .collect(),
        fits: post.fits.iter().map(Into::into).collect(),
    }
}

fn write_samples(path: &Path, ds: &ObservationalDataset, post: &PairwiseEffectPosterior) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["m1".to_string(), "m2".into(), "draw".into()];
    header.extend(post.pairs.iter().map(|p| format!("{}-{}", ds.label_of_arm(p.pair.j), ds.label_of_arm(p.pair.k))));
    let e = |e: csv::Error| CliError::io(&path.display().to_string(), e);
    out.write_record(&header).map_err(e)?;
    let total = post.pairs.first().map_or(0, |p| p.samples.len());
    for s in 0..total {
        let fit = s / post.keep;
        let mut row = vec![(fit / post.m2).to_string(), (fit % post.m2).to_string(), (s % post.keep).to_string()];
        row.extend(post.pairs.iter().map(|p| p.samples[s].to_string()));
        out.write_record(&row).map_err(e)?;
    }
    let bytes = out.into_inner().map_err(|err| CliError::io(&path.display().to_string(), err))?;
    report::write_file(path, bytes)
}

pub fn analyze(path: &Path, samples: bool, g: &Globals) -> Result<(), CliError> {
    let p = prepare(path, g)?;
    let ctx = path.display().to_string();
    note(g, &format!("analyze {}: n={} arms={:?} M1={} M2={}", p.name, p.ds.n(), p.ds.arm_labels(), p.engine.m1, p.engine.m2));
    let gps = fit_gps(&p.ds, &p.engine.gps, p.engine.m1, p.engine.gps_seed()).map_err(|e| CliError::from(e).context(&ctx))?;
    let flagged = validate_overlap(&p.ds, &gps, OVERLAP_EPS).map(|r| r.flagged.len()).unwrap_or(0);
    if flagged > 0 {
        note(g, &format!("warning: {flagged} (unit, arm) GPS means fall outside [{OVERLAP_EPS}, {}]", 1.0 - OVERLAP_EPS));
    }
    let ticker = Ticker::new("fits", g.quiet);
    let cb = |d: usize, t: usize| ticker.tick(d, t);
    let post = run_with_draws(&p.ds, &p.spec, &gps, &p.engine, Some(&cb)).map_err(|e| CliError::from(e).context(&ctx))?;
    let doc = analysis_report(&p, &post, flagged);
    let json = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    let json_path = p.out_dir.join(&p.cfg.output.json);
    report::write_file(&json_path, json)?;
    note(g, &format!("wrote {}", json_path.display()));
    let samples_path = match (&p.cfg.output.samples_csv, samples) {
        (Some(s), _) => Some(p.out_dir.join(s)),
        (None, true) => Some(json_path.with_extension("samples.csv")),
        (None, false) => None,
    };
    if let Some(sp) = samples_path {
        write_samples(&sp, &p.ds, &post)?;
        note(g, &format!("wrote {}", sp.display()));
    }
    if p.cfg.output.table {
        print!("{}", doc.table());
    }
    Ok(())
}

pub fn contour(path: &Path, g: &Globals) -> Result<(), CliError> {
    let p = prepare(path, g)?;
    let ctx = path.display().to_string();
    let section = p
        .cfg
        .contour
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{ctx}: no [contour] section")))?;
    let pair = TreatmentPair {
        j: arm(&p.ds, section.pair[0], "contour.pair").map_err(|e| e.context(&ctx))?,
        k: arm(&p.ds, section.pair[1], "contour.pair").map_err(|e| e.context(&ctx))?,
    };
    if pair.j == pair.k {
        return Err(CliError::Usage(format!("{ctx}: contour.pair needs two distinct labels")));
    }
    let grid = ContourGrid { jk: section.c_jk, kj: section.c_kj };
    let cells = grid.cells().map_err(|e| CliError::from(e).context(&ctx))?;
    // The size check runs before the GPS fit so refusal is immediate.
    if cells > mtsens::simlab::MAX_CONTOUR_CELLS {
        let fits = cells.saturating_mul(p.engine.m1 * p.engine.m2);
        return Err(CliError::Usage(format!(
            "{ctx}: grid has {cells} cells (limit {}); it would need about {fits} outcome-model fits",
            mtsens::simlab::MAX_CONTOUR_CELLS
        )));
    }
    note(g, &format!("contour {}: {cells} cells, {} fits each", p.name, p.engine.m1 * p.engine.m2));
    let gps = fit_gps(&p.ds, &p.engine.gps, p.engine.m1, p.engine.gps_seed()).map_err(|e| CliError::from(e).context(&ctx))?;
    let ticker = Ticker::new("cells", g.quiet);
    let cb = |d: usize, t: usize| ticker.tick(d, t);
    let out = contour_grid_with_draws(&p.ds, &gps, pair, &grid, &p.spec, &p.engine, Some(&cb))
        .map_err(|e| CliError::from(e).context(&ctx))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_path = p.out_dir.join(&section.csv);
    let e = |e: csv::Error| CliError::io(&csv_path.display().to_string(), e);
    if section.intervals {
        w.write_record(["c_jk", "c_kj", "estimate", "lower95", "upper95"]).map_err(e)?;
    } else {
        w.write_record(["c_jk", "c_kj", "estimate"]).map_err(e)?;
    }
    for c in &out {
        let mut row = vec![c.c_jk.to_string(), c.c_kj.to_string(), c.estimate.to_string()];
        if section.intervals {
            row.extend([c.lower.to_string(), c.upper.to_string()]);
        }
        w.write_record(&row).map_err(e)?;
    }
    let bytes = w.into_inner().map_err(|err| CliError::io(&csv_path.display().to_string(), err))?;
    report::write_file(&csv_path, bytes)?;
    note(g, &format!("wrote {}", csv_path.display()));
    println!("{:>7} {:>7} {:>9}", "c_jk", "c_kj", "estimate");
    for c in &out {
        println!("{:>7} {:>7} {:>9}", report::r2(c.c_jk), report::r2(c.c_kj), report::r2(c.estimate));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub scenario: String,
    pub reps: usize,
    pub strategies: String,
    pub overlap: String,
    pub n: Option<usize>,
    pub ratio: Option<String>,
    pub m1: usize,
    pub m2: usize,
    pub write_data: bool,
}

pub fn simulation_config(a: &SimulateArgs, g: &Globals) -> Result<SimulationConfig, CliError> {
    let overlap: Overlap = a.overlap.parse()?;
    let ratio: ArmRatio = match &a.ratio {
        Some(r) => r.parse()?,
        None if overlap == Overlap::Strong => ArmRatio::Balanced,
        None => ArmRatio::Registry,
    };
    let scenario = Scenario::parse(&a.scenario, overlap, ratio)?;
    let n = a.n.unwrap_or(match scenario {
        Scenario::Contextual { ratio: ArmRatio::Registry, .. } => 10_000,
        _ => 1500,
    });
    let strategies = a
        .strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<SimStrategy>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimulationConfig {
        scenario,
        n,
        reps: a.reps,
        m1: a.m1,
        m2: a.m2,
        trees: g.profile.unwrap_or(Profile::Fast).trees(),
        strategies,
        seed: g.seed.unwrap_or(DEFAULT_SEED),
        jobs: 0,
    })
}

pub fn simulate(a: &SimulateArgs, g: &Globals) -> Result<(), CliError> {
    let cfg = simulation_config(a, g)?;
    if cfg.m1 == 0 || cfg.m2 == 0 {
        return Err(CliError::Usage("--m1 and --m2 must be at least 1".into()));
    }
    let out_dir = g.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let stem = match cfg.scenario {
        Scenario::Contextual { overlap, ratio, .. } => {
            let r = if ratio == ArmRatio::Balanced { "balanced" } else { "registry" };
            format!("simulate-{}-{}-{r}", a.scenario, serde_json::to_value(overlap).expect("overlap").as_str().unwrap_or(""))
        }
        _ => format!("simulate-{}", a.scenario),
    };
    if a.write_data {
        let truth = cfg.scenario.generate(cfg.n, cfg.seed)?;
        let data_path = out_dir.join(format!("{stem}-data.csv"));
        if let Some(dir) = data_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        }
        let schema = save_csv(truth.observed(), &data_path)?;
        note(g, &format!("wrote {} (outcome {}, treatment {})", data_path.display(), schema.outcome, schema.treatment));
    }
    note(
        g,
        &format!(
            "simulate {}: n={} reps={} M1={} M2={} strategies={}",
            a.scenario,
            cfg.n,
            cfg.reps,
            cfg.m1,
            cfg.m2,
            cfg.strategies.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        ),
    );
    let ticker = Ticker::new("replications", g.quiet);
    let cb = |d: usize, t: usize| ticker.tick(d, t);
    let records = run_replications(&cfg, Some(&cb))?;
    let rows = metric_table(&records)?;
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |e: csv::Error| CliError::io(&p, e)
    };

    let metrics_path = out_dir.join(format!("{stem}-metrics.csv"));
    let mut buf = Vec::new();
    write_metric_csv(&rows, &mut buf).map_err(io(&metrics_path))?;
    report::write_file(&metrics_path, buf)?;

    let reps_path = out_dir.join(format!("{stem}-replications.csv"));
    let mut buf = Vec::new();
    write_replication_csv(&records, &mut buf).map_err(io(&reps_path))?;
    report::write_file(&reps_path, buf)?;

    let doc = SimulationReport::new(&a.scenario, g.profile.unwrap_or(Profile::Fast).name(), &cfg, &rows);
    let table_path = out_dir.join(format!("{stem}-table.csv"));
    let mut buf = Vec::new();
    doc.write_wide_csv(&mut buf).map_err(io(&table_path))?;
    report::write_file(&table_path, buf)?;

    let json_path = out_dir.join(format!("{stem}.json"));
    report::write_file(&json_path, serde_json::to_string_pretty(&doc).expect("report serializes") + "\n")?;
    note(g, &format!("wrote {}, {}, {}, {}", metrics_path.display(), table_path.display(), reps_path.display(), json_path.display()));
    print!("{}", doc.table());
    Ok(())
}

pub fn report(inputs: &[PathBuf], g: &Globals) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one JSON output file".into()));
    }
    let (text, csv) = report::combine(inputs)?;
    if let Some(csv) = csv {
        let path = g.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join("report.csv");
        report::write_file(&path, csv)?;
        note(g, &format!("wrote {}", path.display()));
    }
    print!("{text}");
    Ok(())
}
