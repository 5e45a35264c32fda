//! Command-line entry points: `run` drives the whole pipeline, `report`
//! summarizes a checkpoint.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapter::{AdapterConfig, SubprocessAdapter, TargetAdapter, DEFAULT_ENV_PASSTHROUGH, DEFAULT_TIMEOUT};
use crate::engine::{Engine, EventLog, LoopConfig, SourceTree, TEST_FILE_PREFIX};
use crate::gateway::{
    Budget, CaptureGateway, ChatGateway, GatewayError, HttpTransport, LeakyBucket, LiveGateway, RateLimiter,
    ScriptedGateway, SystemClock, Transport, DEFAULT_API_KEY_VAR, DEFAULT_ENDPOINT,
};
use crate::integrator::{integration_check, IntegrationMode};
use crate::prompt::PromptTemplateSet;
use crate::report::{tallies_from_log, RunReport};
use crate::segment::identify_segments;
use crate::state::{digest_of, RunState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_RATE_LIMIT: (f64, f64) = (1.0, 10.0);
const HTTP_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Parser)]
#[command(name = "covergen", version, about = "Coverage-guided test generation with a chat LLM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure coverage, generate tests for uncovered code and integrate them.
    Run(RunOptions),
    /// Summarize a checkpoint (and optionally an event log).
    Report(ReportArgs),
}

/// Every option can also be set in the `[run]` table of a TOML config file,
/// under the same name; flags win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunOptions {
    /// TOML config file with a [run] table.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Root of the code under test.
    #[arg(long)]
    pub source_dir: Option<PathBuf>,
    /// Suite directory; accepted tests are written here.
    #[arg(long)]
    pub tests_dir: Option<PathBuf>,
    /// Runner command implementing the adapter protocol; {source_dir} and
    /// {suite_dir} are substituted.
    #[arg(long)]
    pub runner: Option<String>,
    /// Per-test timeout in seconds [default: 60].
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Flags passed through to the runner.
    #[arg(long, allow_hyphen_values = true)]
    pub extra_runner_flags: Option<String>,
    /// Comma-separated environment variables passed to the runner.
    #[arg(long)]
    pub env_passthrough: Option<String>,
    /// Where candidate tests are written while they run.
    #[arg(long)]
    pub scratch_dir: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// [default: 0]
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    /// Advisory segment length in lines [default: 50].
    #[arg(long)]
    pub segment_max_len: Option<u32>,
    /// Prompts per segment, including the first [default: 3].
    #[arg(long)]
    pub max_rounds: Option<u32>,
    /// Segments processed concurrently [default: 1].
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Requests per second and burst capacity, as RATE:CAPACITY [default: 1:10].
    #[arg(long)]
    pub rate_limit: Option<String>,
    /// Largest prompt, in estimated tokens.
    #[arg(long)]
    pub context_budget: Option<usize>,
    /// Characters of failure output kept in error follow-ups [default: 4096].
    #[arg(long)]
    pub error_tail: Option<usize>,
    /// Stop prompting after this many LLM calls.
    #[arg(long)]
    pub max_calls: Option<u64>,
    /// Stop prompting after this many tokens.
    #[arg(long)]
    pub max_tokens: Option<u64>,
    /// live, script:PATH or capture:PATH [default: live].
    #[arg(long)]
    pub llm: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key [default: OPENAI_API_KEY].
    #[arg(long)]
    pub api_key_var: Option<String>,
    /// Prompt template file.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from --checkpoint, skipping finished segments.
    #[arg(long)]
    pub resume: bool,
    /// Overwrite an existing --checkpoint.
    #[arg(long)]
    pub fresh: bool,
    /// How failing tests are handled in the final suite run [default: disable-all].
    #[arg(long, value_enum)]
    pub integration: Option<IntegrationMode>,
    /// Times each test runs in the final suite run [default: 1].
    #[arg(long)]
    pub repeat: Option<u32>,
    /// Write missing modules here, one per line.
    #[arg(long)]
    pub record_requirements: Option<PathBuf>,
    /// Append JSON-lines events here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    run: RunOptions,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($opt:ident),*; $($flag:ident),*) => {
        $( if $dst.$opt.is_none() { $dst.$opt = $src.$opt; } )*
        $( $dst.$flag |= $src.$flag; )*
    };
}

impl RunOptions {
    /// Fills unset options from `file`.
    pub fn overlay(mut self, file: RunOptions) -> RunOptions {
        overlay!(self, file;
            source_dir, tests_dir, runner, timeout, extra_runner_flags, env_passthrough, scratch_dir, model,
            temperature, max_output_tokens, segment_max_len, max_rounds, parallel, rate_limit, context_budget,
            error_tail, max_calls, max_tokens, llm, endpoint, api_key_var, prompts, checkpoint, integration, repeat,
            record_requirements, log, stop_after;
            resume, fresh, json);
        self
    }

    fn with_config_file(self) -> Result<RunOptions, CliError> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut file: ConfigFile =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut file.run.source_dir,
            &mut file.run.tests_dir,
            &mut file.run.scratch_dir,
            &mut file.run.prompts,
            &mut file.run.checkpoint,
            &mut file.run.record_requirements,
            &mut file.run.log,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(self.overlay(file.run))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Event log; success-by-round is taken from it when given.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] anyhow::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmMode {
    Live,
    Script(PathBuf),
    Capture(PathBuf),
}

impl std::str::FromStr for LlmMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "live" => Ok(LlmMode::Live),
            Some(("script", p)) if !p.is_empty() => Ok(LlmMode::Script(p.into())),
            Some(("capture", p)) if !p.is_empty() => Ok(LlmMode::Capture(p.into())),
            _ => Err(format!("--llm must be live, script:PATH or capture:PATH, not {s:?}")),
        }
    }
}

/// Options after defaults and validation.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub adapter: AdapterConfig,
    pub loop_config: LoopConfig,
    pub templates: PromptTemplateSet,
    pub llm: LlmMode,
    pub rate_limit: (f64, f64),
    pub budget: Budget,
    pub endpoint: String,
    pub api_key_var: String,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub integration: IntegrationMode,
    pub repeat: u32,
    pub record_requirements: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub json: bool,
    pub stop_after: Option<usize>,
}

fn parse_rate_limit(s: &str) -> Result<(f64, f64), String> {
    let bad = || format!("--rate-limit must be RATE:CAPACITY with positive numbers, not {s:?}");
    let (r, c) = s.split_once(':').ok_or_else(bad)?;
    let (r, c): (f64, f64) = (r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?);
    if !(r > 0.0 && c >= 1.0 && r.is_finite() && c.is_finite()) {
        return Err(bad());
    }
    Ok((r, c))
}

fn split_words(flag: &str, s: &str) -> Result<Vec<String>, String> {
    shlex::split(s).ok_or_else(|| format!("{flag}: unbalanced quotes in {s:?}"))
}

impl RunSettings {
    pub fn from_options(opts: RunOptions) -> Result<Self, CliError> {
        let opts = opts.with_config_file()?;
        let usage = |m: String| CliError::Usage(m);
        let source_dir = opts.source_dir.clone().ok_or_else(|| usage("--source-dir is required".into()))?;
        let tests_dir = opts.tests_dir.clone().ok_or_else(|| usage("--tests-dir is required".into()))?;
        let runner =
            split_words("--runner", opts.runner.as_deref().ok_or_else(|| usage("--runner is required".into()))?)
                .map_err(usage)?;
        if runner.is_empty() {
            return Err(usage("--runner is empty".into()));
        }
        if !source_dir.is_dir() {
            return Err(usage(format!("--source-dir {} is not a directory", source_dir.display())));
        }
        if opts.resume && opts.checkpoint.is_none() {
            return Err(usage("--resume requires --checkpoint".into()));
        }
        if opts.resume && opts.fresh {
            return Err(usage("--resume and --fresh conflict".into()));
        }
        if let Some(ck) = &opts.checkpoint {
            if ck.exists() && !opts.resume && !opts.fresh {
                return Err(usage(format!(
                    "checkpoint {} exists; pass --resume to continue or --fresh to start over",
                    ck.display()
                )));
            }
        }
        let positive = |name: &str, v: Option<u64>| match v {
            Some(0) => Err(usage(format!("--{name} must be at least 1"))),
            _ => Ok(()),
        };
        positive("segment-max-len", opts.segment_max_len.map(u64::from))?;
        positive("max-rounds", opts.max_rounds.map(u64::from))?;
        positive("parallel", opts.parallel.map(|v| v as u64))?;
        positive("repeat", opts.repeat.map(u64::from))?;
        positive("context-budget", opts.context_budget.map(|v| v as u64))?;
        let timeout = match opts.timeout {
            None => DEFAULT_TIMEOUT,
            Some(t) if t > 0.0 && t.is_finite() => Duration::from_secs_f64(t),
            Some(_) => return Err(usage("--timeout must be positive".into())),
        };
        let temperature = opts.temperature.unwrap_or(0.0);
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(usage("--temperature must be non-negative".into()));
        }
        let llm = opts.llm.as_deref().unwrap_or("live").parse().map_err(usage)?;
        let rate_limit = opts.rate_limit.as_deref().map(parse_rate_limit).transpose().map_err(usage)?;
        let templates = match &opts.prompts {
            Some(p) => PromptTemplateSet::load(p).map_err(|e| usage(e.to_string()))?,
            None => PromptTemplateSet::default(),
        };
        let defaults = LoopConfig::default();
        let loop_config = LoopConfig {
            model: opts.model.clone().unwrap_or(defaults.model),
            temperature,
            max_output_tokens: opts.max_output_tokens,
            max_rounds: opts.max_rounds.unwrap_or(defaults.max_rounds),
            max_len: opts.segment_max_len.unwrap_or(defaults.max_len),
            parallel: opts.parallel.unwrap_or(defaults.parallel),
            error_tail: opts.error_tail.unwrap_or(defaults.error_tail),
            context_budget: opts.context_budget,
        };
        let mut adapter = AdapterConfig::new(source_dir, tests_dir, runner);
        adapter.timeout = timeout;
        adapter.extra_flags = match &opts.extra_runner_flags {
            Some(s) => split_words("--extra-runner-flags", s).map_err(usage)?,
            None => Vec::new(),
        };
        adapter.env_passthrough = match &opts.env_passthrough {
            Some(s) => s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect(),
            None => DEFAULT_ENV_PASSTHROUGH.iter().map(|s| s.to_string()).collect(),
        };
        adapter.scratch_root = opts.scratch_dir.clone();
        Ok(Self {
            adapter,
            loop_config,
            templates,
            llm,
            rate_limit: rate_limit.unwrap_or(DEFAULT_RATE_LIMIT),
            budget: Budget { max_calls: opts.max_calls, max_total_tokens: opts.max_tokens },
            endpoint: opts.endpoint.clone().unwrap_or_else(|| DEFAULT_ENDPOINT.into()),
            api_key_var: opts.api_key_var.clone().unwrap_or_else(|| DEFAULT_API_KEY_VAR.into()),
            checkpoint: opts.checkpoint.clone(),
            resume: opts.resume,
            integration: opts.integration.unwrap_or(IntegrationMode::DisableAll),
            repeat: opts.repeat.unwrap_or(1),
            record_requirements: opts.record_requirements.clone(),
            log: opts.log.clone(),
            json: opts.json,
            stop_after: opts.stop_after,
        })
    }

    /// Digest of the settings that shape prompts and verdicts; a checkpoint
    /// only resumes under the same digest.
    pub fn digest(&self) -> String {
        let mut lc = self.loop_config.clone();
        lc.parallel = 0;
        digest_of(&json!({
            "source_dir": self.adapter.source_dir,
            "tests_dir": self.adapter.suite_dir,
            "runner": self.adapter.runner,
            "extra_flags": self.adapter.extra_flags,
            "loop": lc,
            "templates": self.templates,
        }))
    }
}

pub type TransportFactory = dyn Fn(&RunSettings) -> Result<Box<dyn Transport>, GatewayError>;

/// Builds the gateway for `settings.llm`. The transport is only constructed
/// for live and capture modes.
pub fn build_gateway(
    settings: &RunSettings,
    make_transport: &TransportFactory,
) -> Result<Box<dyn ChatGateway>, GatewayError> {
    let live = |s: &RunSettings| -> Result<LiveGateway, GatewayError> {
        let clock = Arc::new(SystemClock::new());
        let (rate, capacity) = s.rate_limit;
        let limiter = Arc::new(RateLimiter::new(LeakyBucket::new(capacity, rate), clock.clone()));
        Ok(LiveGateway::new(make_transport(s)?, clock).with_rate_limiter(limiter).with_budget(s.budget))
    };
    Ok(match &settings.llm {
        LlmMode::Script(p) => Box::new(ScriptedGateway::load(p)?),
        LlmMode::Live => Box::new(live(settings)?),
        LlmMode::Capture(p) => Box::new(CaptureGateway::new(live(settings)?, p.clone())?),
    })
}

fn http_transport(s: &RunSettings) -> Result<Box<dyn Transport>, GatewayError> {
    Ok(Box::new(HttpTransport::new(&s.endpoint, &s.api_key_var, HTTP_TIMEOUT)?))
}

fn test_index(name: &str) -> Option<u64> {
    name.strip_prefix(TEST_FILE_PREFIX)?.strip_suffix(".py")?.parse().ok()
}

#[derive(Debug)]
pub enum RunOutcome {
    Completed(Box<RunReport>),
    /// Stopped early on request; the checkpoint holds the progress.
    Stopped {
        outcomes: usize,
    },
}

/// The whole pipeline: baseline, segmentation, generation, integration,
/// final measurement.
pub fn execute_run(settings: &RunSettings, gateway: &dyn ChatGateway) -> anyhow::Result<RunOutcome> {
    let adapter = SubprocessAdapter::new(settings.adapter.clone())?;
    let digest = settings.digest();
    let state = match (&settings.checkpoint, settings.resume) {
        (Some(ck), true) => RunState::load(ck, Some(&digest))
            .with_context(|| "refusing to resume; pass --fresh to start over".to_string())?,
        _ => {
            let baseline = adapter.measure_baseline().context("measuring baseline coverage")?;
            RunState::new(digest, baseline, settings.loop_config.max_rounds)
        }
    };
    if let Some(ck) = &settings.checkpoint {
        state.save(ck)?;
    }
    let sources = SourceTree::load(&settings.adapter.source_dir, &state.baseline, &adapter)?;
    let segments = identify_segments(&state.baseline, &sources.outlines, settings.loop_config.max_len)?;
    let events = settings.log.as_deref().map(EventLog::to_file).transpose().context("opening event log")?;
    let engine = Engine {
        config: &settings.loop_config,
        templates: &settings.templates,
        gateway,
        adapter: &adapter,
        sources: &sources,
        suite_dir: &settings.adapter.suite_dir,
        checkpoint: settings.checkpoint.as_deref(),
        events: events.as_ref(),
        stop_after: settings.stop_after,
    };
    let segments = engine.fit_to_budget(segments, &state.baseline);
    log::info!("{} segments to cover", segments.len());
    let (state, complete) = engine.run_all(&segments, state)?;
    if !complete {
        return Ok(RunOutcome::Stopped { outcomes: state.outcomes.len() });
    }

    if let Some(path) = &settings.record_requirements {
        let text: String = state.requirements.iter().map(|m| format!("{m}\n")).collect();
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }

    let mut tests: Vec<String> =
        state.accepted.keys().filter(|t| settings.adapter.suite_dir.join(t).exists()).cloned().collect();
    tests.sort_by_key(|t| (test_index(t), t.clone()));
    let integration = if tests.is_empty() {
        None
    } else {
        let coverage = state.accepted.iter().map(|(k, v)| (k.clone(), v.coverage.clone())).collect();
        Some(integration_check(
            &tests,
            &settings.adapter.suite_dir,
            &adapter,
            settings.integration,
            settings.repeat,
            &coverage,
            &state.baseline,
        )?)
    };

    let coverage = match adapter.measure_baseline() {
        Ok(c) => c,
        Err(e) => {
            log::warn!("final coverage measurement failed ({e}); reporting cumulative coverage");
            state.cumulative.clone()
        }
    };
    let mut report = RunReport::new(&coverage, &state);
    report.integration = integration;
    Ok(RunOutcome::Completed(Box::new(report)))
}

fn cmd_run(opts: RunOptions, out: &mut dyn Write) -> Result<(), CliError> {
    let settings = RunSettings::from_options(opts)?;
    let gateway = build_gateway(&settings, &http_transport).map_err(|e| CliError::Engine(e.into()))?;
    match execute_run(&settings, gateway.as_ref())? {
        RunOutcome::Completed(report) => {
            let text = if settings.json {
                serde_json::to_string_pretty(&report).unwrap() + "\n"
            } else {
                report.render_text()
            };
            out.write_all(text.as_bytes()).map_err(|e| CliError::Engine(e.into()))?;
        }
        RunOutcome::Stopped { outcomes } => {
            writeln!(out, "stopped with {outcomes} segment outcomes recorded; continue with --resume")
                .map_err(|e| CliError::Engine(e.into()))?;
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let state = RunState::load(&args.checkpoint, None).map_err(|e| CliError::Engine(e.into()))?;
    let mut report = RunReport::new(&state.cumulative, &state);
    if let Some(log_path) = &args.log {
        let f = std::fs::File::open(log_path).map_err(|e| CliError::Engine(anyhow!("{}: {e}", log_path.display())))?;
        let (tallies, skipped) = tallies_from_log(std::io::BufReader::new(f), state.success_by_round.len())
            .map_err(|e| CliError::Engine(e.into()))?;
        if skipped > 0 {
            log::warn!("skipped {skipped} corrupt lines in {}", log_path.display());
        }
        report = report.with_tallies(tallies, skipped);
    }
    let text = if args.json { serde_json::to_string_pretty(&report).unwrap() + "\n" } else { report.render_text() };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Engine(e.into()))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(opts) => cmd_run(opts, out),
        Command::Report(args) => cmd_report(args, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Engine(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_FAILURE
        }
    }
}
