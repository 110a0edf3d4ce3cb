use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use qbs_audit::analysis::{vulnerability_scan, AttackReport};
use qbs_audit::data::{load_csv, load_schema_config, synth_from_marginals, write_csv, ValueFormat};
use qbs_audit::experiment::{prepare_repetition, replay_user, run_experiment, ExperimentConfig};
use qbs_audit::seed::rng_for;
use qbs_audit::Error;

const THREADS_ENV: &str = "QBS_AUDIT_THREADS";

#[derive(Parser)]
#[command(name = "qbs-audit", version, about = "Audit query-based systems for inference attacks")]
struct Cli {
    /// Worker threads (default: $QBS_AUDIT_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for attacks on sampled targets and play the privacy game.
    Attack(RunArgs),
    /// Attack many targets and report the spread of their vulnerability.
    Scan(RunArgs),
    /// Replay the games of an attack report, e.g. under other mitigations.
    Game {
        /// Report written by `attack`.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a correlation-free synthetic copy of a dataset.
    Synth {
        #[arg(long)]
        input: PathBuf,
        /// Schema config; defaults to <input>.schema.json.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Experiment settings. Precedence: defaults, then `--desk-scale`, then the
/// config file, then explicit flags.
#[derive(Args, Default)]
struct RunArgs {
    /// JSON file with flat experiment keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// cheetah | single | evolutionary | gadotti
    #[arg(long)]
    method: Option<String>,
    /// `lim` or comma-separated axes, e.g. `D1,D2,D3,D4`.
    #[arg(long)]
    syntax: Option<String>,
    /// aia | mia
    #[arg(long)]
    game: Option<String>,
    /// random | mixed
    #[arg(long)]
    attribute_rule: Option<String>,
    #[arg(long)]
    known_attributes: Option<usize>,
    /// A count or `all`.
    #[arg(long)]
    users: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    new_per_iter: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    z: Option<usize>,
    /// Game repetitions.
    #[arg(long = "R", short = 'R')]
    game_repetitions: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    elite: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    mutation_rate: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_iterations: Option<usize>,
    #[arg(long)]
    l2_lambda: Option<f64>,
    /// gradient_descent or newton
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    explain: bool,
    #[arg(long)]
    isolating_attributes: bool,
    #[arg(long)]
    shadow_table: bool,
    #[arg(long)]
    noise_when_no_conditions: bool,
    #[arg(long)]
    stats_dynamic_seed: bool,
    /// Enable all four mitigations.
    #[arg(long)]
    all_mitigations: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InsufficientData(_) => 3,
            Error::InvalidParameter(_) | Error::Schema(_) | Error::Query(_) | Error::Json(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn set(map: &mut Map<String, Value>, key: &str, value: impl Into<Value>) {
    map.insert(key.to_string(), value.into());
}

impl RunArgs {
    fn overrides(&self) -> Result<Map<String, Value>, Failure> {
        let mut o = Map::new();
        let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
        if let Some(p) = &self.dataset {
            set(&mut o, "dataset", path(p));
        }
        if let Some(p) = &self.schema {
            set(&mut o, "schema", path(p));
        }
        if let Some(p) = &self.output_dir {
            set(&mut o, "output_dir", path(p));
        }
        for (key, value) in [
            ("method", &self.method),
            ("game", &self.game),
            ("attribute_rule", &self.attribute_rule),
        ] {
            if let Some(v) = value {
                set(&mut o, key, v.as_str());
            }
        }
        if let Some(s) = &self.syntax {
            let axes: Vec<Value> = if s.trim().eq_ignore_ascii_case("lim") {
                Vec::new()
            } else {
                s.split(',')
                    .map(|a| Value::String(a.trim().to_ascii_uppercase()))
                    .collect()
            };
            set(&mut o, "syntax", axes);
        }
        if let Some(u) = &self.users {
            let users: Value = match u.parse::<u64>() {
                Ok(n) => n.into(),
                Err(_) if u == "all" => "all".into(),
                Err(_) => return Err(invalid(format!("--users must be a count or all, got {u}"))),
            };
            set(&mut o, "users", users);
        }
        for (key, value) in [
            ("known_attributes", self.known_attributes),
            ("repetitions", self.repetitions),
            ("m", self.m),
            ("new_per_iter", self.new_per_iter),
            ("iterations", self.iterations),
            ("f", self.f),
            ("g", self.g),
            ("z", self.z),
            ("R", self.game_repetitions),
            ("population", self.population),
            ("elite", self.elite),
            ("generations", self.generations),
        ] {
            if let Some(v) = value {
                set(&mut o, key, v);
            }
        }
        for (key, value) in [
            ("mutation_rate", self.mutation_rate),
            ("learning_rate", self.learning_rate),
            ("l2_lambda", self.l2_lambda),
        ] {
            if let Some(v) = value {
                set(&mut o, key, v);
            }
        }
        if let Some(n) = self.train_iterations {
            set(&mut o, "train_iterations", n);
        }
        if let Some(s) = &self.solver {
            set(&mut o, "solver", s.as_str());
        }
        if let Some(s) = self.seed {
            set(&mut o, "master_seed", s);
        }
        for (key, on) in [
            ("explain", self.explain),
            ("isolating_attributes", self.isolating_attributes || self.all_mitigations),
            ("shadow_table", self.shadow_table || self.all_mitigations),
            ("noise_when_no_conditions", self.noise_when_no_conditions || self.all_mitigations),
            ("stats_dynamic_seed", self.stats_dynamic_seed || self.all_mitigations),
        ] {
            if on {
                set(&mut o, key, true);
            }
        }
        Ok(o)
    }

    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig, Failure> {
        let base = if self.desk_scale { base.desk_scale() } else { base };
        let mut merged = match serde_json::to_value(&base).map_err(Error::from)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(file)) => merged.extend(file),
                Ok(_) => return Err(invalid("config file must hold a JSON object")),
                Err(e) => return Err(invalid(format!("config {}: {e}", path.display()))),
            }
        }
        merged.extend(self.overrides()?);
        let config: ExperimentConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| invalid(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

fn threads(flag: Option<usize>, config: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return v
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{THREADS_ENV} must be a positive integer, got {v}")));
    }
    Ok(config)
}

fn init_pool(n: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = n {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into())
}

fn output_dir(config: &ExperimentConfig) -> Result<&Path, Failure> {
    let dir = config.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    std::io::Write::write_all(&mut w, b"\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Attack(args) => {
            let config = args.resolve(ExperimentConfig::default())?;
            init_pool(threads(cli.threads, config.threads)?)?;
            let data = config.load_dataset()?;
            let report = run_experiment(&data, &config)?;
            let dir = output_dir(&config)?;
            report.write_json(dir.join("report.json"))?;
            report.write_csv(create(&dir.join("report.csv"))?)?;
            println!(
                "{} runs, mean accuracy {:.4} (pooled {:.4}, 95% CI {:.4}-{:.4})",
                report.aggregate.runs,
                report.aggregate.mean_accuracy,
                report.aggregate.pooled_accuracy,
                report.aggregate.pooled_ci.0,
                report.aggregate.pooled_ci.1
            );
        }
        Command::Scan(args) => {
            let config = args.resolve(ExperimentConfig::default())?;
            init_pool(threads(cli.threads, config.threads)?)?;
            let data = config.load_dataset()?;
            let scan = vulnerability_scan(&data, &config)?;
            let dir = output_dir(&config)?;
            write_json(&dir.join("scan.json"), &serde_json::to_value(&scan).map_err(Error::from)?)?;
            scan.report.write_csv(create(&dir.join("scan.csv"))?)?;
            println!(
                "{} targets, accuracy spread {:.4}",
                scan.entries.len(),
                scan.spread
            );
        }
        Command::Game { report, run } => {
            let saved = AttackReport::read_json(&report)?;
            let config = run.resolve(saved.config.clone())?;
            init_pool(threads(cli.threads, config.threads)?)?;
            let data = config.load_dataset()?;
            let mut games = Vec::new();
            let mut reps = std::collections::BTreeMap::new();
            for user in &saved.users {
                if let std::collections::btree_map::Entry::Vacant(e) = reps.entry(user.repetition) {
                    e.insert(prepare_repetition(&data, &config, user.repetition)?);
                }
                let result = replay_user(&reps[&user.repetition], user, &config)?;
                games.push(serde_json::json!({
                    "repetition": user.repetition,
                    "user_id": user.user_id,
                    "result": result,
                }));
            }
            let dir = output_dir(&config)?;
            write_json(&dir.join("games.json"), &Value::Array(games.clone()))?;
            println!("{} games replayed", games.len());
        }
        Command::Synth {
            input,
            schema,
            output,
            seed,
        } => {
            let schema = schema.unwrap_or_else(|| input.with_extension("schema.json"));
            let data = load_csv(&input, &load_schema_config(&schema)?)?;
            let synth = synth_from_marginals(&data, &mut rng_for(seed, "synth", 0));
            write_csv(&synth, create(&output)?, ValueFormat::Labels)?;
            println!("wrote {} rows to {}", synth.len(), output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
