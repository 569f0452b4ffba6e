use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use seqrank::baseline::SrConfig;
use seqrank::calibration::{self, CalibrationTable};
use seqrank::session::{Decision, Session, SessionConfig, StepReport, Threshold};
use seqrank::sim::{self, ExperimentResult, Scenario, ScenarioSpec};
use seqrank::Error;
use serde::Serialize;

use crate::args::{BaselineArgs, CalibrateArgs, ExperimentArgs, Format, ModelArgs, SimulateArgs, TestArgs, ThresholdArg};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Io(m) => m,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) if p != Path::new("-") => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        )),
        _ => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_tables(path: &Path) -> Result<Vec<CalibrationTable>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Ok(tables) = serde_json::from_str::<Vec<CalibrationTable>>(&text) {
        return Ok(tables);
    }
    CalibrationTable::from_json(&text)
        .map(|t| vec![t])
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Session configuration from flags; `budget` is the run's sample limit.
fn session_config(
    model: &ModelArgs,
    threshold: ThresholdArg,
    tables: Option<&Path>,
    budget: Option<u64>,
) -> Result<SessionConfig, CliError> {
    let mut config = SessionConfig {
        alpha: model.alpha,
        model: model.model(),
        max_n: budget,
        seed: model.seed,
        tie_policy: model.ties,
        merge: model.merge(),
        ..SessionConfig::default()
    };
    config.threshold = match threshold {
        ThresholdArg::Ville => Threshold::Ville,
        ThresholdArg::Fixed(value) => Threshold::Fixed { value },
        ThresholdArg::Auto(horizon) => {
            let horizon = horizon.or(budget).ok_or_else(|| {
                CliError::Usage("an auto threshold needs a horizon: use auto:N or set --max-n".into())
            })?;
            match tables {
                None => Threshold::Calibrated { horizon },
                Some(path) => {
                    if budget.is_some_and(|b| b > horizon) {
                        return Err(CliError::Usage(format!("--max-n exceeds the calibrated horizon {horizon}")));
                    }
                    let value = load_tables(path)?
                        .iter()
                        .filter(|t| t.matches(&config.model, config.alpha))
                        .find_map(|t| t.threshold_for(horizon))
                        .ok_or_else(|| {
                            CliError::Usage(format!(
                                "{} has no table for this configuration at alpha = {}, N = {horizon}",
                                path.display(),
                                config.alpha
                            ))
                        })?;
                    config.max_n = Some(budget.unwrap_or(horizon));
                    Threshold::Fixed { value }
                }
            }
        }
    };
    config.resolve().map_err(usage)?;
    Ok(config)
}

struct StepWriter {
    out: Box<dyn Write>,
    format: Format,
    depths: Vec<usize>,
    line: String,
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    n: u64,
    depths: &'a [usize],
    per_depth_log10: &'a [f64],
    log10_m: f64,
    max_log10_m: f64,
    p_value: f64,
    decision: &'static str,
}

impl StepWriter {
    fn header(&mut self) -> io::Result<()> {
        if self.format == Format::Csv {
            self.line.clear();
            self.line.push('n');
            for d in &self.depths {
                let _ = write!(self.line, ",log10_m_d{d}");
            }
            self.line.push_str(",log10_m,max_log10_m,p_value,decision\n");
            self.out.write_all(self.line.as_bytes())?;
        }
        Ok(())
    }

    fn record(&mut self, r: &StepReport, max_log10: f64) -> io::Result<()> {
        self.line.clear();
        match self.format {
            Format::Csv => {
                let _ = write!(self.line, "{}", r.n);
                for v in &r.per_depth_log10 {
                    let _ = write!(self.line, ",{v}");
                }
                let _ = writeln!(
                    self.line,
                    ",{},{},{},{}",
                    r.aggregate_log10,
                    max_log10,
                    r.p_value,
                    r.decision.as_str()
                );
            }
            Format::Jsonl => {
                let rec = JsonRecord {
                    n: r.n,
                    depths: &self.depths,
                    per_depth_log10: &r.per_depth_log10,
                    log10_m: r.aggregate_log10,
                    max_log10_m: max_log10,
                    p_value: r.p_value,
                    decision: r.decision.as_str(),
                };
                self.line = serde_json::to_string(&rec).expect("records serialize");
                self.line.push('\n');
            }
        }
        self.out.write_all(self.line.as_bytes())
    }
}

/// Rows of a two-column CSV stream with their line numbers.
struct CsvRows {
    reader: csv::Reader<Box<dyn Read>>,
    record: csv::StringRecord,
    first: bool,
}

impl CsvRows {
    fn new(input: Box<dyn Read>) -> Self {
        let reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        Self {
            reader,
            record: csv::StringRecord::new(),
            first: true,
        }
    }

    fn next_row(&mut self) -> Result<Option<(u64, f64, f64)>, CliError> {
        loop {
            let more = self
                .reader
                .read_record(&mut self.record)
                .map_err(|e| CliError::Data(format!("malformed input: {e}")))?;
            if !more {
                return Ok(None);
            }
            let line = self.record.position().map_or(0, |p| p.line());
            let first = std::mem::replace(&mut self.first, false);
            if self.record.len() == 1 && self.record[0].is_empty() {
                continue;
            }
            if self.record.len() != 2 {
                return Err(CliError::Data(format!(
                    "line {line}: expected 2 columns, found {}",
                    self.record.len()
                )));
            }
            let x = self.record[0].parse::<f64>();
            let y = self.record[1].parse::<f64>();
            match (x, y) {
                (Ok(x), Ok(y)) => return Ok(Some((line, x, y))),
                (Err(_), Err(_)) if first => continue,
                (x, _) => {
                    let (col, cell) = if x.is_err() { (1, &self.record[0]) } else { (2, &self.record[1]) };
                    return Err(CliError::Data(format!("line {line}: column {col}: '{cell}' is not a number")));
                }
            }
        }
    }
}

enum Source {
    Csv(CsvRows),
    Synthetic(sim::Generator, u64),
}

impl Source {
    fn next_row(&mut self) -> Result<Option<(u64, f64, f64)>, CliError> {
        match self {
            Source::Csv(rows) => rows.next_row(),
            Source::Synthetic(g, n) => {
                *n += 1;
                let (x, y) = g.sample();
                Ok(Some((*n, x, y)))
            }
        }
    }
}

fn observe_error(e: Error, line: u64, what: &str) -> CliError {
    match e {
        Error::TiesPresent(_) => CliError::Data(format!(
            "{what} {line}: value repeats an earlier observation; the derandomized test needs \
             continuous data. Rerun with --ties randomized or --ties paths:B for discrete data"
        )),
        Error::InvalidObservation(v) => CliError::Data(format!("{what} {line}: non-finite value {v}")),
        other => CliError::Io(format!("{what} {line}: {other}")),
    }
}

pub fn test(args: &TestArgs) -> Result<(), CliError> {
    if args.every == 0 {
        return Err(CliError::Usage("--every must be positive".into()));
    }
    let mut session = match &args.resume {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Session::restore(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => Session::new(session_config(
            &args.model,
            args.threshold,
            args.calibration.as_deref(),
            args.max_n,
        )?)
        .map_err(usage)?,
    };

    let (mut source, what) = match &args.scenario {
        Some(name) => {
            let scenario: Scenario = name.parse().map_err(usage)?;
            let spec = ScenarioSpec::new(scenario, args.noise, args.model.seed).map_err(usage)?;
            if session.budget().is_none() {
                return Err(CliError::Usage("synthetic streams need --max-n or an auto threshold".into()));
            }
            (Source::Synthetic(spec.generator(0), session.n()), "observation")
        }
        None => {
            let input: Box<dyn Read> = match &args.input {
                Some(p) if p != Path::new("-") => Box::new(
                    File::open(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
                ),
                _ => Box::new(io::stdin().lock()),
            };
            (Source::Csv(CsvRows::new(input)), "line")
        }
    };

    let mut writer = StepWriter {
        out: open_output(args.output.as_deref())?,
        format: args.format,
        depths: session.depths(),
        line: String::new(),
    };
    writer.header()?;

    let mut max_log10 = if session.p_value() < 1.0 { -session.p_value().log10() } else { 0.0 };
    let mut pending: Option<StepReport> = None;
    while !session.is_stopped() {
        let Some((line, x, y)) = source.next_row()? else {
            break;
        };
        let report = session.observe(x, y).map_err(|e| observe_error(e, line, what))?;
        max_log10 = max_log10.max(report.aggregate_log10);
        if report.n % args.every == 0 || report.decision != Decision::Continue {
            writer.record(&report, max_log10)?;
            pending = None;
        } else {
            pending = Some(report);
        }
    }
    if let Some(report) = pending {
        writer.record(&report, max_log10)?;
    }
    writer.out.flush()?;

    if let Some(path) = &args.save_state {
        std::fs::write(path, session.snapshot()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    eprintln!(
        "n = {}, log10 M = {:.4}, p = {:.6}, threshold = {:.4}, decision = {}",
        session.n(),
        session.log_m() / std::f64::consts::LN_10,
        session.p_value(),
        session.threshold(),
        session.decision().as_str()
    );
    Ok(())
}

fn specs(args: &ExperimentArgs, seed: u64) -> Result<Vec<ScenarioSpec>, CliError> {
    if args.reps == 0 || args.max_n == 0 {
        return Err(CliError::Usage("--reps and --max-n must be positive".into()));
    }
    let mut out = Vec::new();
    for name in &args.scenario {
        let scenario: Scenario = name.parse().map_err(usage)?;
        for &noise in &args.noise {
            out.push(ScenarioSpec::new(scenario, noise, seed).map_err(usage)?);
        }
    }
    Ok(out)
}

fn write_results(args: &ExperimentArgs, results: &[ExperimentResult]) -> Result<(), CliError> {
    if let Some(path) = &args.runs {
        let mut out = open_output(Some(path))?;
        writeln!(out, "method,scenario,noise,rep,rejected,stop,final_log10,p_value")?;
        for res in results {
            let s = &res.summary;
            for r in &res.runs {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    s.method, s.scenario, s.noise, r.rep, r.rejected, r.stop, r.final_log10, r.p_value
                )?;
            }
        }
        out.flush()?;
    }
    if let Some(path) = &args.curve {
        let mut out = open_output(Some(path))?;
        writeln!(out, "method,scenario,noise,n,rejection_rate")?;
        for res in results {
            let s = &res.summary;
            let sizes: Vec<u64> = (1..=s.budget).collect();
            for (n, rate) in res.rejection_curve(&sizes) {
                writeln!(out, "{},{},{},{n},{rate}", s.method, s.scenario, s.noise)?;
            }
        }
        out.flush()?;
    }
    let mut out = open_output(None)?;
    for res in results {
        writeln!(out, "{}", serde_json::to_string(&res.summary).expect("summaries serialize"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let specs = specs(&args.experiment, args.model.seed)?;
    let config = session_config(
        &args.model,
        args.threshold,
        args.calibration.as_deref(),
        Some(args.experiment.max_n),
    )?;
    let results = specs
        .iter()
        .map(|spec| sim::run_experiment(spec, &config, args.experiment.reps, args.experiment.max_n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_results(&args.experiment, &results)
}

pub fn baseline_sr(args: &BaselineArgs) -> Result<(), CliError> {
    let specs = specs(&args.experiment, args.seed)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!("alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let threshold = match args.threshold {
        ThresholdArg::Ville => 1.0 / args.alpha,
        ThresholdArg::Fixed(v) => v,
        ThresholdArg::Auto(_) => {
            return Err(CliError::Usage(
                "calibrated thresholds are tabulated for the rank test only; use ville or a number".into(),
            ))
        }
    };
    let config = SrConfig {
        grid_step: args.grid_step,
        lambda_max: args.lambda_max,
    };
    config.validate().map_err(usage)?;
    let results = specs
        .iter()
        .map(|spec| sim::run_baseline_experiment(spec, &config, threshold, args.experiment.reps, args.experiment.max_n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_results(&args.experiment, &results)
}

pub fn calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let alphas = args.alphas.clone().unwrap_or_else(|| vec![args.model.alpha]);
    let model = args.model.model();
    model.validate().map_err(usage)?;
    let tables = calibration::calibrate_levels(&model, &alphas, &args.horizons, args.reps, args.model.seed)
        .map_err(usage)?;
    for t in &tables {
        if let Some(w) = &t.warning {
            eprintln!("warning: {w}");
        }
        for e in &t.entries {
            eprintln!(
                "alpha = {}, N = {}: L = {:.4}, crossing rate at 1/alpha = {:.4}",
                t.alpha, e.horizon, e.threshold, e.ville_crossing
            );
        }
    }
    let mut out = open_output(args.output.as_deref())?;
    let text = serde_json::to_string_pretty(&tables).expect("tables serialize");
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
