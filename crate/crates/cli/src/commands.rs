use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use probreach::cde::{fit_with_cv, CdeConfig, CdeModel};
use probreach::dynamics::{generate_dataset, BuiltinModel, Dataset};
use probreach::par::Execution;
use probreach::polyset::{MonomialBasis, SublevelSetParams};
use probreach::resample::{generate_raw_paths, generate_scenarios, RawSamples, ScenarioSet};
use probreach::rng::stream;
use probreach::solver::{solve_reachset, solve_scenario_baseline, SolveResult, SolverConfig};
use probreach::validate::{
    example1_study, monte_carlo_study, write_reports_csv, Example1Case, StudyConfig,
    ValidationReport,
};
use serde_json::{json, Value};

use crate::manifest::{changed, Manifest, Record};
use crate::Failure;
use crate::{
    Cli, Command, EngineStudy, Example1, FitCde, GenData, PlotData, Reach, Replay, ScenariosArgs,
    Validate,
};

type Outcome = Result<(), Failure>;

/// Runs one parsed command line and writes its manifest, also when the
/// command fails after it started.
pub fn run(cli: &Cli, argv: Vec<String>) -> Outcome {
    if let Command::Replay(r) = &cli.command {
        return replay(r);
    }
    let exec = cli.execution();
    let manifest_path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest(&cli.command));
    let mut rec = Record::default();
    let status = match &cli.command {
        Command::GenData(a) => gen_data(a, &mut rec),
        Command::FitCde(a) => fit_cde(a, exec, &mut rec),
        Command::Scenarios(a) => scenarios(a, exec, &mut rec),
        Command::Reach(a) => reach(a, &mut rec),
        Command::Validate(a) => validate(a, exec, &mut rec),
        Command::Example1(a) => example1(a, exec, &mut rec),
        Command::EngineStudy(a) => engine_study(a, exec, &mut rec),
        Command::PlotData(a) => plot_data(a, &mut rec),
        Command::Replay(_) => unreachable!(),
    };
    if let Err(f) = &status {
        rec.summarize("error", f.to_string());
    }
    let cwd = std::env::current_dir()
        .map_err(|e| Failure::Usage(format!("no working directory: {e}")))?;
    let parameters = json!({ "sequential": cli.sequential, "command": &cli.command });
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    rec.into_manifest(cli.command.name(), argv, cwd, parameters)?
        .write(&manifest_path)?;
    status
}

fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn default_manifest(cmd: &Command) -> PathBuf {
    match cmd {
        Command::GenData(a) => sibling_manifest(&a.out),
        Command::FitCde(a) => sibling_manifest(&a.out),
        Command::Scenarios(a) => a.out.join("manifest.json"),
        Command::Reach(a) => sibling_manifest(&a.out),
        Command::Validate(a) => a.out.join("manifest.json"),
        Command::Example1(a) => a.out_dir().join("manifest.json"),
        Command::EngineStudy(a) => a.out_dir().join("manifest.json"),
        Command::PlotData(a) => sibling_manifest(&a.out_path()),
        Command::Replay(a) => a.path.clone(),
    }
}

impl Example1 {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            PathBuf::from(format!("example1-case{}-seed{}", self.case, self.seed))
        })
    }
}

impl EngineStudy {
    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("engine-study-seed{}", self.seed)))
    }
}

impl PlotData {
    fn out_path(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| self.params.with_extension("grid.csv"))
    }
}

fn open(path: &Path, rec: &mut Record) -> Result<BufReader<File>, Failure> {
    let f = File::open(path)
        .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))?;
    rec.input(path);
    Ok(BufReader::new(f))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, rec: &mut Record) -> Result<T, Failure> {
    serde_json::from_reader(open(path, rec)?)
        .map_err(|e| Failure::Usage(format!("cannot parse {}: {e}", path.display())))
}

fn csv_bytes(
    write: impl FnOnce(&mut Vec<u8>) -> probreach::Result<()>,
) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn gen_data(a: &GenData, rec: &mut Record) -> Outcome {
    let model = BuiltinModel::from(a.model);
    rec.seed("dataset", a.seed);
    let data = generate_dataset(
        model.ground_truth().as_ref(),
        model.state_marginal().as_ref(),
        a.n,
        &mut stream(a.seed, &[]),
    )?;
    rec.write(&a.out, &csv_bytes(|b| data.write_csv(b))?)?;
    rec.summarize("pairs", data.len());
    Ok(())
}

fn fit_cde(a: &FitCde, exec: Execution, rec: &mut Record) -> Outcome {
    let data = Dataset::read_csv(open(&a.data, rec)?)?;
    let cfg = CdeConfig {
        max_centers: a.max_centers,
        folds: a.folds,
        score: a.score.into(),
        ..CdeConfig::default()
    };
    rec.seed("cross_validation", a.seed);
    let (model, sel) = fit_with_cv(&data, &cfg, &mut stream(a.seed, &[]), exec)?;
    log::info!(
        "selected sigma_x = {}, sigma_w = {}, lambda = {}",
        sel.sigma_x,
        sel.sigma_w,
        sel.lambda
    );
    rec.write_json(&a.out, &model)?;
    rec.summarize("selection", sel);
    Ok(())
}

fn scenarios(a: &ScenariosArgs, exec: Execution, rec: &mut Record) -> Outcome {
    let model = BuiltinModel::from(a.model).system();
    rec.seed("scenarios", a.seed);
    let mut rng = stream(a.seed, &[]);
    let sets = match (&a.cde, &a.raw_data) {
        (Some(path), _) => {
            let cde: CdeModel = read_json(path, rec)?;
            generate_scenarios(model.as_ref(), &cde, &a.x0, a.k, a.nr, &mut rng, exec)?
        }
        (None, Some(path)) => {
            let data = Dataset::read_csv(open(path, rec)?)?;
            let pool = RawSamples::new(data.disturbances().to_vec())?;
            generate_raw_paths(
                model.as_ref(),
                &pool,
                a.raw_rule.into(),
                &a.x0,
                a.k,
                a.nr,
                &mut rng,
                exec,
            )?
        }
        (None, None) => return Err(Failure::Usage("give --cde or --raw-data".into())),
    };
    for set in &sets {
        let path = a.out.join(format!("scenarios_k{}.csv", set.k));
        rec.write(&path, &csv_bytes(|b| set.write_csv(b))?)?;
    }
    rec.summarize("steps", sets.len());
    Ok(())
}

/// Step encoded in a `scenarios_k<k>.csv` file name.
fn step_from_name(path: &Path) -> Option<usize> {
    path.file_stem()?
        .to_str()?
        .strip_prefix("scenarios_k")?
        .parse()
        .ok()
}

fn reach(a: &Reach, rec: &mut Record) -> Outcome {
    let (file, k) = if a.scenarios.is_dir() {
        let k = a.k.ok_or_else(|| {
            Failure::Usage("--k is required when --scenarios is a directory".into())
        })?;
        (a.scenarios.join(format!("scenarios_k{k}.csv")), k)
    } else {
        let k = a.k.or_else(|| step_from_name(&a.scenarios)).unwrap_or(1);
        (a.scenarios.clone(), k)
    };
    let set = ScenarioSet::read_csv(k, open(&file, rec)?)?;
    let basis = MonomialBasis::new(set.state_dim(), a.d)?;
    let res = if a.enclose_all {
        solve_scenario_baseline(&set, &basis)?
    } else {
        solve_reachset(&set, &basis, &SolverConfig::with_alpha_s(a.alpha_s))?
    };
    rec.write_json(&a.out, &res)?;
    if let Some(trace) = &a.trace {
        rec.write(trace, &csv_bytes(|b| res.write_trace_csv(b))?)?;
    }
    rec.summarize("objective", res.objective);
    rec.summarize("scenario_coverage", res.hard_coverage);
    rec.summarize("converged", res.converged);
    if !res.converged {
        return Err(Failure::Numeric(format!(
            "solver did not converge (bound hit: {}); best iterate written to {}",
            res.bound_hit,
            a.out.display()
        )));
    }
    Ok(())
}

fn write_reports(dir: &Path, reports: &[ValidationReport], rec: &mut Record) -> Outcome {
    let table = csv_bytes(|b| write_reports_csv(reports, b))?;
    rec.write(&dir.join("report.csv"), &table)?;
    rec.write_json(&dir.join("report.json"), &reports)?;
    print!("{}", String::from_utf8_lossy(&table));
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "method": r.method.label(),
                "k": r.k,
                "n_r": r.n_r,
                "violation_probability": r.violation_probability,
                "expected_risk": r.expected_risk,
            })
        })
        .collect();
    rec.summarize("reports", rows);
    Ok(())
}

fn run_study(cfg: &StudyConfig, dir: &Path, exec: Execution, rec: &mut Record) -> Outcome {
    cfg.validate()?;
    rec.seed("study", cfg.seed);
    rec.summarize("study", cfg);
    let reports = monte_carlo_study(cfg, exec)?;
    write_reports(dir, &reports, rec)
}

fn validate(a: &Validate, exec: Execution, rec: &mut Record) -> Outcome {
    let text = fs::read_to_string(&a.study)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", a.study.display())))?;
    rec.input(&a.study);
    let mut cfg: StudyConfig = toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("bad study file {}: {e}", a.study.display())))?;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    run_study(&cfg, &a.out, exec, rec)
}

fn engine_study(a: &EngineStudy, exec: Execution, rec: &mut Record) -> Outcome {
    let cfg = StudyConfig {
        model: BuiltinModel::EnginePowertrain,
        methods: a.methods.iter().map(|&m| m.into()).collect(),
        trials: a.trials,
        n_data: a.n_data,
        n_r: a.nr.clone(),
        alpha: a.alpha,
        alpha_s: a.alpha_s,
        steps: a.k.clone(),
        m_eval: a.m_eval,
        seed: a.seed,
        cde: CdeConfig {
            score: a.score.into(),
            ..CdeConfig::default()
        },
        ..StudyConfig::default()
    };
    run_study(&cfg, &a.out_dir(), exec, rec)
}

fn example1(a: &Example1, exec: Execution, rec: &mut Record) -> Outcome {
    let case = Example1Case::from_number(a.case)?;
    rec.seed("example1", a.seed);
    let out = example1_study(case, a.n, a.alpha_s, a.m_eval, a.seed, exec)?;
    rec.write_json(&a.out_dir().join("result.json"), &out)?;
    println!("case {}: coverage {:.4}", out.case, out.coverage);
    rec.summarize("coverage", out.coverage);
    rec.summarize("converged", out.result.converged);
    if !out.result.converged {
        return Err(Failure::Numeric("solver did not converge".into()));
    }
    Ok(())
}

fn plot_data(a: &PlotData, rec: &mut Record) -> Outcome {
    let value: Value = read_json(&a.params, rec)?;
    let bad = |e: serde_json::Error| Failure::Usage(format!("{}: {e}", a.params.display()));
    let (params, bounds) = if value.get("params").is_some() {
        let res: SolveResult = serde_json::from_value(value).map_err(bad)?;
        (res.params, Some(res.bounds))
    } else {
        let p: SublevelSetParams = serde_json::from_value(value).map_err(bad)?;
        (p, None)
    };
    if params.basis().state_dim() != 2 {
        return Err(Failure::Usage(
            "plot-data needs a two-dimensional set".into(),
        ));
    }
    if a.grid < 2 {
        return Err(Failure::Usage("--grid must be at least 2".into()));
    }
    let (lo, hi) = match (&a.bbox, bounds) {
        (Some(b), _) if b.len() == 4 && b[0] < b[1] && b[2] < b[3] => ([b[0], b[2]], [b[1], b[3]]),
        (Some(b), _) => return Err(Failure::Usage(format!("bad --bbox {b:?}"))),
        (None, Some(b)) => ([b.lo[0], b.lo[1]], [b.hi[0], b.hi[1]]),
        (None, None) => {
            return Err(Failure::Usage(
                "bare parameters carry no scenario box; pass --bbox".into(),
            ))
        }
    };
    // Interpolating from both ends hits the box corners exactly.
    let axis = |j: usize, i: usize| {
        let t = i as f64 / (a.grid - 1) as f64;
        lo[j] * (1.0 - t) + hi[j] * t
    };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::from(probreach::Error::from(e));
    wtr.write_record(["x1", "x2", "q"]).map_err(io)?;
    for i in 0..a.grid {
        for j in 0..a.grid {
            let x = [axis(0, i), axis(1, j)];
            let q = params.evaluate_q(&x)?;
            wtr.serialize((x[0], x[1], q)).map_err(io)?;
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    rec.write(&a.out_path(), &bytes)?;
    rec.summarize("cells", a.grid * a.grid);
    Ok(())
}

/// Reruns the recorded command line from the recorded directory and checks
/// every artifact against its recorded hash.
fn replay(a: &Replay) -> Outcome {
    let path = fs::canonicalize(&a.path)
        .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", a.path.display())))?;
    let m = Manifest::read(&path)?;
    std::env::set_current_dir(&m.cwd)
        .map_err(|e| Failure::Usage(format!("cannot enter {}: {e}", m.cwd.display())))?;
    let stale = changed(&m.inputs);
    if !stale.is_empty() {
        return Err(Failure::Usage(format!(
            "inputs changed since the run: {stale:?}"
        )));
    }
    let cli = <Cli as clap::Parser>::try_parse_from(
        std::iter::once(crate::manifest::TOOL.to_string()).chain(m.argv.iter().cloned()),
    )
    .map_err(|e| Failure::Usage(format!("manifest command line: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::Usage(
            "a manifest cannot replay another replay".into(),
        ));
    }
    let status = run(&cli, m.argv.clone());
    let differing = changed(&m.artifacts);
    if !differing.is_empty() {
        return Err(Failure::Numeric(format!(
            "{} of {} artifacts differ: {differing:?}",
            differing.len(),
            m.artifacts.len()
        )));
    }
    println!(
        "replayed {}: {} artifacts identical",
        m.command,
        m.artifacts.len()
    );
    status
}
