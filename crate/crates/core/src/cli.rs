//! Command-line front end.
//!
//! Settings come from three layers: built-in defaults, then `--config`,
//! then flags. Every run writes `report.txt`, any data files and a
//! `manifest.txt` into the output directory. The manifest is itself a
//! config file, so `--config <dir>/manifest.txt` repeats the run.
//!
//! Exit status is 2 for invalid settings, 1 for a failed run or, under
//! `--strict`, for a run with no positive key rate, and 0 otherwise.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{self, FreeVariable, QberSource, SweepVariable};
use crate::config::{load_config, RunConfig, RunMode};
use crate::error::{AnalysisError, ConfigError, ParamError, ProtocolError};
use crate::protocol::{self, key_digest, wire, SessionResult};
use crate::rng;
use crate::types::KeyRateReport;

#[derive(Debug, Parser)]
#[command(name = "passive-bb84", version, about = "Passive BB84 link simulator and key-rate analysis")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Require an explicit seed for randomised runs and fail when no
    /// positive key rate results.
    #[arg(long, global = true)]
    pub strict: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Runs the config file's `mode` when omitted.
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a full session in one process.
    Simulate {
        #[command(flatten)]
        link: LinkArgs,
        #[arg(long)]
        emissions: Option<u64>,
    },
    /// Evaluate the closed-form key rate.
    Analyze {
        #[command(flatten)]
        link: LinkArgs,
        /// Defaults to the QBER predicted by the link model.
        #[arg(long)]
        qber: Option<f64>,
    },
    /// Key rate over a grid of one parameter.
    Sweep {
        #[command(flatten)]
        link: LinkArgs,
        #[arg(long)]
        variable: Option<SweepVariable>,
        /// `start:stop:step`, inclusive.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        qber: Option<f64>,
        /// Also simulate a session at every point.
        #[arg(long)]
        mc: bool,
        #[arg(long)]
        mc_emissions: Option<u64>,
    },
    /// Maximise the key rate over mu and/or delta_phi.
    Optimize {
        #[command(flatten)]
        link: LinkArgs,
        #[arg(long, value_delimiter = ',')]
        free: Option<Vec<FreeVariable>>,
        /// `lo:hi`
        #[arg(long, value_parser = parse_bounds)]
        mu_bounds: Option<[f64; 2]>,
        /// `lo:hi`, radians
        #[arg(long, value_parser = parse_bounds)]
        delta_phi_bounds: Option<[f64; 2]>,
        #[arg(long)]
        qber: Option<f64>,
    },
    /// Acceptance rate and QBER against the comparator level.
    Tradeoff {
        #[command(flatten)]
        link: LinkArgs,
        /// `start:stop:step` in units of the tomography intensity.
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Transmitter side of a two-process session; listens for the receiver.
    ServeAlice {
        #[command(flatten)]
        link: LinkArgs,
        #[arg(long)]
        emissions: Option<u64>,
        #[arg(long)]
        address: Option<String>,
    },
    /// Receiver side of a two-process session; connects to the transmitter.
    ServeBob {
        #[arg(long)]
        address: Option<String>,
    },
}

/// Link parameter overrides shared by the subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long = "loss-db")]
    pub channel_loss_db: Option<f64>,
    #[arg(long)]
    pub receiver_loss_db: Option<f64>,
    #[arg(long)]
    pub delta_phi: Option<f64>,
    #[arg(long)]
    pub visibility: Option<f64>,
    #[arg(long)]
    pub detector_efficiency: Option<f64>,
    #[arg(long)]
    pub dark_rate_hz: Option<f64>,
    #[arg(long)]
    pub drift_rate: Option<f64>,
    /// Error-correction inefficiency f.
    #[arg(long)]
    pub ec_efficiency: Option<f64>,
    #[arg(long)]
    pub duty_cycle: Option<f64>,
    #[arg(long)]
    pub clock_hz: Option<f64>,
    /// Treat receiver losses as adversarial.
    #[arg(long)]
    pub untrusted_receiver: bool,
}

impl LinkArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let l = &mut cfg.link;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut l.mu, self.mu);
        set(&mut l.channel_loss_db, self.channel_loss_db);
        set(&mut l.receiver_loss_db, self.receiver_loss_db);
        set(&mut l.window.delta_phi, self.delta_phi);
        set(&mut l.visibility, self.visibility);
        set(&mut l.detector_efficiency, self.detector_efficiency);
        set(&mut l.dark_rate_hz, self.dark_rate_hz);
        set(&mut l.drift_rate, self.drift_rate);
        set(&mut l.ec_efficiency, self.ec_efficiency);
        set(&mut l.duty_cycle, self.duty_cycle);
        set(&mut l.clock_hz, self.clock_hz);
        if self.untrusted_receiver {
            l.trusted_receiver = false;
        }
    }
}

fn parse_bounds(s: &str) -> Result<[f64; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("`{s}`: expected lo:hi"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok([num(lo)?, num(hi)?])
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] AnalysisError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::Config(e.into())
    }
}

/// Fold defaults, the config file and flags into one validated config.
pub fn resolve(cli: &Cli) -> Result<(RunConfig, RunMode), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    let mode = match &cli.command {
        None => cfg
            .mode
            .ok_or_else(|| CliError::Usage("no subcommand given and the config sets no `mode`".into()))?,
        Some(cmd) => {
            apply_command(cmd, &mut cfg);
            command_mode(cmd)
        }
    };
    cfg.mode = Some(mode);
    cfg.validate()?;
    if cli.strict && cfg.seed.is_none() && mode.is_randomized(&cfg) {
        return Err(CliError::Usage(format!(
            "`{}` is randomised; --strict requires --seed or `seed` in the config",
            mode.name()
        )));
    }
    Ok((cfg, mode))
}

fn command_mode(cmd: &Command) -> RunMode {
    match cmd {
        Command::Simulate { .. } => RunMode::Simulate,
        Command::Analyze { .. } => RunMode::Analyze,
        Command::Sweep { .. } => RunMode::Sweep,
        Command::Optimize { .. } => RunMode::Optimize,
        Command::Tradeoff { .. } => RunMode::Tradeoff,
        Command::ServeAlice { .. } => RunMode::ServeAlice,
        Command::ServeBob { .. } => RunMode::ServeBob,
    }
}

fn apply_command(cmd: &Command, cfg: &mut RunConfig) {
    fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *dst = v.clone();
        }
    }
    match cmd {
        Command::Simulate { link, emissions } => {
            link.apply(cfg);
            set(&mut cfg.emissions, emissions);
        }
        Command::Analyze { link, qber } => {
            link.apply(cfg);
            if qber.is_some() {
                cfg.analyze.qber = *qber;
            }
        }
        Command::Sweep {
            link,
            variable,
            grid,
            qber,
            mc,
            mc_emissions,
        } => {
            link.apply(cfg);
            set(&mut cfg.sweep.variable, variable);
            set(&mut cfg.sweep.grid, grid);
            if qber.is_some() {
                cfg.sweep.qber = *qber;
            }
            cfg.sweep.monte_carlo |= *mc;
            set(&mut cfg.mc_emissions, mc_emissions);
        }
        Command::Optimize {
            link,
            free,
            mu_bounds,
            delta_phi_bounds,
            qber,
        } => {
            link.apply(cfg);
            set(&mut cfg.optimize.free, free);
            set(&mut cfg.optimize.mu_bounds, mu_bounds);
            set(&mut cfg.optimize.delta_phi_bounds, delta_phi_bounds);
            if qber.is_some() {
                cfg.optimize.qber = *qber;
            }
        }
        Command::Tradeoff { link, thresholds } => {
            link.apply(cfg);
            set(&mut cfg.tradeoff.thresholds, thresholds);
        }
        Command::ServeAlice {
            link,
            emissions,
            address,
        } => {
            link.apply(cfg);
            set(&mut cfg.emissions, emissions);
            set(&mut cfg.wire_address, address);
        }
        Command::ServeBob { address } => set(&mut cfg.wire_address, address),
    }
}

/// Result of one subcommand before it is written out.
pub struct Outcome {
    pub report: String,
    /// `(stem, extension, contents)`; files are named `<stem>_<unix time>.<ext>`.
    pub data: Vec<(String, &'static str, Vec<u8>)>,
    /// At least one configuration yielded a positive key rate.
    pub positive_rate: bool,
    /// Parameters learned from a peer, recorded in the manifest.
    pub peer_config: Option<RunConfig>,
}

fn line(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key:<24}{value}");
}

pub fn format_report(r: &KeyRateReport) -> String {
    let mut s = String::new();
    line(&mut s, "regime", format!("{:?}", r.regime));
    line(&mut s, "secret_rate_hz", r.secret_rate_hz);
    line(&mut s, "secret_fraction", r.secret_fraction);
    line(&mut s, "qber", r.qber);
    line(&mut s, "gain_q", r.gain_q);
    line(&mut s, "gain_detector", r.gain_detector);
    line(&mut s, "p_multi", r.p_multi);
    line(&mut s, "y1", r.y1);
    line(&mut s, "e1_bound", r.e1_bound);
    line(&mut s, "leak_ec", r.leak_ec);
    line(&mut s, "sifted_rate_keygen_hz", r.sifted_rate_keygen_hz);
    line(&mut s, "sifted_rate_hz", r.sifted_rate_hz);
    line(&mut s, "duty_cycle", r.duty_cycle);
    s
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct SessionRecord<'a> {
    tally: &'a protocol::SessionTally,
    report: &'a KeyRateReport,
    uncertainty: &'a protocol::RateUncertainty,
    final_key_sha256: String,
    rng: &'a rng::RngProvenance,
}

fn session_outcome(r: &SessionResult, role: &str) -> Outcome {
    let key = r.alice_key.as_ref().or(r.bob_key.as_ref());
    let digest = hex(&key_digest(key.map_or(&[][..], |k| &k[..])));
    let t = &r.tally;
    let mut s = String::new();
    let _ = writeln!(s, "[{role}]");
    line(&mut s, "emitted", t.emitted);
    line(&mut s, "postselected", t.postselected);
    line(&mut s, "detected", t.detected);
    line(&mut s, "detected_keygen", t.detected_keygen);
    line(&mut s, "sifted", t.sifted);
    line(&mut s, "disclosed", t.disclosed);
    line(&mut s, "errors_in_disclosed", t.errors_in_disclosed);
    line(
        &mut s,
        "qber_estimate",
        t.qber_estimate.map_or("none".to_string(), |q| q.to_string()),
    );
    line(&mut s, "corrected_errors", t.corrected_errors);
    line(&mut s, "leak_ec_bits", t.leak_ec_bits);
    line(&mut s, "final_key_bits", t.final_key_bits);
    line(&mut s, "final_key_sha256", &digest);
    if let Some(why) = &t.aborted {
        line(&mut s, "aborted", why);
    }
    let _ = writeln!(s, "\n[report]");
    s.push_str(&format_report(&r.report));
    line(&mut s, "secret_rate_se_hz", r.uncertainty.secret_rate_hz);
    line(&mut s, "qber_se", r.uncertainty.qber);
    let record = SessionRecord {
        tally: t,
        report: &r.report,
        uncertainty: &r.uncertainty,
        final_key_sha256: digest,
        rng: &r.rng,
    };
    Outcome {
        report: s,
        data: vec![(
            "session".into(),
            "json",
            serde_json::to_vec_pretty(&record).expect("session record serialises"),
        )],
        positive_rate: r.report.secret_rate_hz > 0.0 && t.final_key_bits > 0,
        peer_config: None,
    }
}

fn connect_with_retry(addr: &str, patience: Duration) -> std::io::Result<TcpStream> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() >= patience => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(100)),
        }
    }
}

/// Execute the resolved run. Diagnostics go to `log`.
pub fn execute(cfg: &RunConfig, mode: RunMode, log: &mut dyn Write) -> Result<Outcome, CliError> {
    match mode {
        RunMode::Simulate => Ok(session_outcome(&protocol::run_session(&cfg.session())?, "session")),
        RunMode::Analyze => {
            let qber = cfg.analyze.qber.unwrap_or_else(|| analysis::qber_model(&cfg.link));
            let r = analysis::analytic_rate(&cfg.link, qber)?;
            Ok(Outcome {
                report: format_report(&r),
                data: vec![],
                positive_rate: r.secret_rate_hz > 0.0,
                peer_config: None,
            })
        }
        RunMode::Sweep => {
            let spec = cfg.sweep_spec()?;
            let mc = cfg.monte_carlo();
            let points = analysis::sweep(&spec, mc.as_ref())?;
            let mut csv = Vec::new();
            analysis::write_curve_csv(&mut csv, spec.variable, &points)?;
            let mut nd = Vec::new();
            analysis::write_curve_ndjson(&mut nd, &spec, mc.as_ref(), &points)?;
            let mut s = String::new();
            let _ = writeln!(s, "{:<16}{:<24}{:<24}", spec.variable.name(), "analytic_rate_hz", "mc_rate_hz");
            for p in &points {
                let mc = p.mc.as_ref().map_or(String::new(), |m| format!("{} ± {}", m.rate_hz, m.rate_se_hz));
                let _ = writeln!(s, "{:<16}{:<24}{}", p.x, p.analytic_rate_hz, mc);
            }
            let stem = format!("sweep_{}", spec.variable.name());
            Ok(Outcome {
                report: s,
                positive_rate: points
                    .iter()
                    .any(|p| p.analytic_rate_hz > 0.0 || p.mc_rate_hz().is_some_and(|r| r > 0.0)),
                data: vec![(stem.clone(), "csv", csv), (stem, "ndjson", nd)],
                peer_config: None,
            })
        }
        RunMode::Optimize => {
            let qber = cfg.optimize.qber.map_or(QberSource::Model, QberSource::Fixed);
            match analysis::optimize(&cfg.link, &cfg.optimize_bounds(), qber) {
                Ok(opt) => {
                    let mut s = String::new();
                    line(&mut s, "mu", opt.params.mu);
                    line(&mut s, "delta_phi", opt.params.window.delta_phi);
                    s.push_str(&format_report(&opt.report));
                    Ok(Outcome {
                        report: s,
                        data: vec![],
                        positive_rate: true,
                        peer_config: None,
                    })
                }
                Err(AnalysisError::NoPositiveRate) => Ok(Outcome {
                    report: "no positive key rate within the bounds\n".into(),
                    data: vec![],
                    positive_rate: false,
                    peer_config: None,
                }),
                Err(e) => Err(e.into()),
            }
        }
        RunMode::Tradeoff => {
            let rows = analysis::postselection_tradeoff(&cfg.link, &cfg.thresholds()?)?;
            let mut csv = String::from("threshold,delta_phi,accept_rate_per_label_hz,accept_rate_per_basis_hz,qber_model\n");
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.threshold, r.delta_phi, r.accept_rate_per_label_hz, r.accept_rate_per_basis_hz, r.qber_model
                );
            }
            Ok(Outcome {
                report: csv.clone(),
                data: vec![("tradeoff".into(), "csv", csv.into_bytes())],
                positive_rate: true,
                peer_config: None,
            })
        }
        RunMode::ServeAlice => {
            let listener = TcpListener::bind(&cfg.wire_address)?;
            let _ = writeln!(log, "listening on {}", listener.local_addr()?);
            let (stream, peer) = listener.accept()?;
            let _ = writeln!(log, "receiver connected from {peer}");
            let r = wire::alice_session(BufReader::new(stream.try_clone()?), stream, &cfg.session())?;
            Ok(session_outcome(&r, "alice"))
        }
        RunMode::ServeBob => {
            let stream = connect_with_retry(&cfg.wire_address, Duration::from_secs(30))?;
            let (r, params) = wire::bob_session_with_params(BufReader::new(stream.try_clone()?), stream)?;
            let mut peer = cfg.clone();
            peer.seed = Some(params.seed);
            peer.emissions = params.emissions;
            peer.link = params.link;
            peer.stabilizer = params.stabilizer;
            peer.protocol = params.protocol;
            let mut out = session_outcome(&r, "bob");
            out.peer_config = Some(peer);
            Ok(out)
        }
    }
}

/// Write report, data files and manifest. Returns the data file paths.
pub fn write_outputs(cfg: &RunConfig, out: &Outcome) -> std::io::Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut h = Sha256::new();
    h.update(out.report.as_bytes());
    std::fs::write(dir.join("report.txt"), &out.report)?;
    let mut paths = Vec::new();
    for (stem, ext, bytes) in &out.data {
        h.update(bytes);
        let path = dir.join(format!("{stem}_{ts}.{ext}"));
        std::fs::write(&path, bytes)?;
        paths.push(path);
    }
    std::fs::write(dir.join("manifest.txt"), manifest(cfg, out, &hex(&h.finalize())))?;
    Ok(paths)
}

fn manifest(cfg: &RunConfig, out: &Outcome, digest: &str) -> String {
    let mut recorded = out.peer_config.clone().unwrap_or_else(|| cfg.clone());
    recorded.seed = Some(recorded.seed_or_default());
    let mut s = String::new();
    let _ = writeln!(s, "# passive-bb84 {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# rng {} (rand_chacha 0.9)", rng::ALGORITHM);
    let _ = writeln!(s, "# seed {}", recorded.seed_or_default());
    let _ = writeln!(s, "# results sha256 {digest}");
    let _ = writeln!(s, "# rerun with: passive-bb84 --config manifest.txt");
    s.push_str(&recorded.to_toml());
    s
}

/// Parse `args`, run, write outputs; returns the process exit status.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code() as u8;
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let fail = |stderr: &mut dyn Write, e: CliError| {
        let _ = writeln!(stderr, "error: {e}");
        e.exit_code()
    };
    let (cfg, mode) = match resolve(&cli) {
        Ok(r) => r,
        Err(e) => return fail(stderr, e),
    };
    let out = match execute(&cfg, mode, stderr) {
        Ok(o) => o,
        Err(e) => return fail(stderr, e),
    };
    let _ = write!(stdout, "{}", out.report);
    match write_outputs(&cfg, &out) {
        Ok(paths) => {
            for p in paths {
                let _ = writeln!(stderr, "wrote {}", p.display());
            }
        }
        Err(e) => return fail(stderr, e.into()),
    }
    if cli.strict && !out.positive_rate {
        let _ = writeln!(stderr, "error: no configuration produced a positive key rate");
        return 1;
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("passive-bb84").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[link]\nmu = 0.2\nchannel_loss_db = 4.0").unwrap();
        let path = f.path().to_str().unwrap();
        let (cfg, mode) = resolve(&cli(&["--config", path, "analyze", "--loss-db", "9"])).unwrap();
        assert_eq!(mode, RunMode::Analyze);
        // flag beats file
        assert_eq!(cfg.link.channel_loss_db, 9.0);
        // file beats default
        assert_eq!(cfg.link.mu, 0.2);
        // default survives
        assert_eq!(cfg.link.ec_efficiency, 1.16);
    }

    #[test]
    fn mode_comes_from_config_without_subcommand() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "mode = \"tradeoff\"").unwrap();
        let (_, mode) = resolve(&cli(&["--config", f.path().to_str().unwrap()])).unwrap();
        assert_eq!(mode, RunMode::Tradeoff);
        assert_eq!(resolve(&cli(&[])).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn strict_needs_seed_for_random_runs() {
        assert_eq!(resolve(&cli(&["--strict", "simulate"])).unwrap_err().exit_code(), 2);
        assert!(resolve(&cli(&["--strict", "--seed", "1", "simulate"])).is_ok());
        assert!(resolve(&cli(&["--strict", "analyze"])).is_ok());
        assert!(resolve(&cli(&["--strict", "sweep"])).is_ok());
        assert_eq!(resolve(&cli(&["--strict", "sweep", "--mc"])).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn invalid_flags_are_config_errors() {
        let e = resolve(&cli(&["analyze", "--mu=-1"])).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("link.mu"), "{e}");
        assert_eq!(
            resolve(&cli(&["optimize", "--mu-bounds", "0.5:0.1"])).unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn bounds_parse() {
        assert_eq!(parse_bounds("0.1:2").unwrap(), [0.1, 2.0]);
        assert!(parse_bounds("0.1").is_err());
        assert!(parse_bounds("a:1").is_err());
    }
}
