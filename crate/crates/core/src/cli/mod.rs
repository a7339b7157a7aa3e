//! The `qoverlay` command line: seeded batch scenarios over a topology
//! file, printed as plain tables.
//!
//! Exit codes: 0 when the scenario ran to contract (an expected lossy
//! mismatch included), 1 for configuration or argument errors, 2 for
//! delivery and protocol failures.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::apps::{
    monte_carlo, parallel_las_vegas_search, parallel_monte_carlo, split_axis_2d, split_circular, split_unfolded,
    to_fraction, Estimand, McJob, Partition, SharedRandom,
};
use crate::classical::NodeId;
use crate::config::TopologyConfig;
use crate::control::{Controller, ControllerSettings, PathHandle, PathSpec};
use crate::error::{Error, Result};
use crate::overlay::{CircuitConfig, CircuitKind};
use crate::qkd::QkdStatus;
use crate::rng;

/// Used when no `--topology` is given.
pub const DEFAULT_TOPOLOGY: &str = "\
[node]
name = alice
[node]
name = relay
[node]
name = bob

[link]
a = alice
b = relay
[link]
a = relay
b = bob

[path]
name = main
nodes = alice relay bob
";

#[derive(Parser, Debug)]
#[command(name = "qoverlay", about = "Scenarios over a simulated QKD overlay network")]
pub struct Cli {
    /// Topology file; a three-node line is used when absent.
    #[arg(long, global = true)]
    pub topology: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Bound on simulated ticks any single blocking wait may take.
    #[arg(long, global = true, default_value_t = 200_000)]
    pub ticks: u64,
    /// Write one `key=value` record per line here.
    #[arg(long, global = true)]
    pub records: Option<PathBuf>,
    /// Write the management event log here.
    #[arg(long, global = true)]
    pub event_log: Option<PathBuf>,
    /// Step node contexts on separate threads.
    #[arg(long, global = true)]
    pub parallel_nodes: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run QKD sessions on one link.
    Qkd(QkdArgs),
    /// Transfer a file over a circuit or path.
    Circuit(CircuitArgs),
    /// Paired synchronized random draws.
    Syncrand(SyncArgs),
    /// Parallel Monte Carlo over a shared split.
    Montecarlo(McArgs),
    /// Parallel Las Vegas search over a shared permutation.
    Search(SearchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Route {
    /// Named path from the topology.
    #[arg(long, conflicts_with = "link")]
    pub path: Option<String>,
    /// Direct circuit between two nodes, `a,b`.
    #[arg(long)]
    pub link: Option<String>,
}

#[derive(Args, Debug)]
pub struct QkdArgs {
    /// `a,b`; the first link of the topology when absent.
    #[arg(long)]
    pub link: Option<String>,
    #[arg(long)]
    pub pulses: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
}

#[derive(Args, Debug)]
pub struct CircuitArgs {
    #[command(flatten)]
    pub route: Route,
    /// lossy, reliable or bytestream; the path's kind when absent.
    #[arg(long)]
    pub kind: Option<CircuitKind>,
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct SyncArgs {
    #[command(flatten)]
    pub route: Route,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long, default_value_t = 32)]
    pub bits: u32,
}

#[derive(Args, Debug)]
pub struct McArgs {
    #[command(flatten)]
    pub route: Route,
    #[arg(long, default_value = "quarter-circle")]
    pub estimand: Estimand,
    #[arg(long, default_value_t = 2)]
    pub parts: usize,
    /// Total samples over all nodes.
    #[arg(long, default_value_t = 400_000)]
    pub samples: usize,
    /// unfolded, circular or axis.
    #[arg(long, default_value = "unfolded")]
    pub strategy: String,
    #[arg(long, default_value_t = 1024)]
    pub resolution: u64,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub bits: u32,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub route: Route,
    #[arg(long, default_value_t = 10_000)]
    pub items: usize,
    #[arg(long, default_value_t = 4)]
    pub parts: usize,
    /// Index of the single matching item; derived from the seed when absent.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub bits: u32,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::InvalidInput(_)
        | Error::UnknownNode(_)
        | Error::UnknownLink(_)
        | Error::DuplicateLink(..)
        | Error::InvalidFilter(_)
        | Error::WrongKind(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command, writing the
/// report to `out`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(out, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut ctx = match Context::new(&cli) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            return exit_code(&e);
        }
    };
    let result = match &cli.command {
        Command::Qkd(a) => cmd_qkd(&mut ctx, a, out),
        Command::Circuit(a) => cmd_circuit(&mut ctx, a, out),
        Command::Syncrand(a) => cmd_syncrand(&mut ctx, a, out),
        Command::Montecarlo(a) => cmd_montecarlo(&mut ctx, a, out),
        Command::Search(a) => cmd_search(&mut ctx, a, out),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            exit_code(&e)
        }
    };
    if let Err(e) = ctx.finish(&cli) {
        let _ = writeln!(out, "error: {e}");
        return code.max(1);
    }
    code
}

struct Context {
    topo: TopologyConfig,
    ctrl: Controller,
    seed: u64,
    records: Vec<String>,
}

fn io_err(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::InvalidInput(format!("{}: {e}", path.display()))
}

impl Context {
    fn new(cli: &Cli) -> Result<Context> {
        let text = match &cli.topology {
            Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
            None => DEFAULT_TOPOLOGY.to_string(),
        };
        let topo = TopologyConfig::parse(&text)?;
        let settings = ControllerSettings {
            parallel_nodes: cli.parallel_nodes,
            max_wait_ticks: cli.ticks,
            ..ControllerSettings::default()
        };
        let ctrl = topo.build(cli.seed, settings)?;
        Ok(Context {
            topo,
            ctrl,
            seed: cli.seed,
            records: Vec::new(),
        })
    }

    fn record(&mut self, fields: &[(&str, String)]) {
        let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        self.records.push(line.join(" "));
    }

    fn finish(&self, cli: &Cli) -> Result<()> {
        if let Some(p) = &cli.records {
            let mut text = self.records.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(p, text).map_err(|e| io_err(p, e))?;
        }
        if let Some(p) = &cli.event_log {
            fs::write(p, self.ctrl.event_log().render()).map_err(|e| io_err(p, e))?;
        }
        Ok(())
    }

    fn pair(&self, spec: &str) -> Result<(NodeId, NodeId)> {
        let (a, b) = spec
            .split_once(',')
            .ok_or_else(|| Error::InvalidInput(format!("expected `a,b`, got `{spec}`")))?;
        Ok((self.ctrl.node(a.trim())?, self.ctrl.node(b.trim())?))
    }

    /// The path nodes and configured circuit settings for a route.
    fn route(&self, route: &Route) -> Result<(PathSpec, CircuitConfig)> {
        if let Some(l) = &route.link {
            let (a, b) = self.pair(l)?;
            return Ok((PathSpec::new(vec![a, b]), CircuitConfig::new(CircuitKind::SecureReliableDatagram)));
        }
        let decl = match &route.path {
            Some(name) => self
                .topo
                .path(name)
                .ok_or_else(|| Error::InvalidInput(format!("no path named `{name}`")))?,
            None => match self.topo.paths.first() {
                Some(p) => p,
                None => {
                    let l = self
                        .topo
                        .links
                        .first()
                        .ok_or_else(|| Error::InvalidInput("topology has no links".into()))?;
                    let spec = PathSpec::new(vec![NodeId::new(l.a.as_str())?, NodeId::new(l.b.as_str())?]);
                    return Ok((spec, CircuitConfig::new(CircuitKind::SecureReliableDatagram)));
                }
            },
        };
        Ok((self.topo.path_spec(&decl.name)?, decl.config))
    }

    fn open(&mut self, route: &Route, kind: Option<CircuitKind>) -> Result<PathHandle> {
        let (spec, mut config) = self.route(route)?;
        if let Some(k) = kind {
            config.kind = k;
        }
        self.ctrl.establish_path(&spec, config)
    }

    fn shared_random(&mut self, route: &Route, bits: u32) -> Result<SharedRandom> {
        let p = self.open(route, Some(CircuitKind::SynchronizedRandom))?;
        SharedRandom::draw(&mut self.ctrl, &p.a, &p.b, bits)
    }
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cmd_qkd(ctx: &mut Context, args: &QkdArgs, out: &mut dyn Write) -> Result<i32> {
    let id = match &args.link {
        Some(l) => {
            let (a, b) = ctx.pair(l)?;
            ctx.ctrl.link_between(&a, &b)?
        }
        None => *ctx
            .ctrl
            .link_ids()
            .first()
            .ok_or_else(|| Error::InvalidInput("topology has no links".into()))?,
    };
    if let Some(n) = args.pulses {
        let mut q = ctx.ctrl.link_spec(id)?.qkd;
        q.pulse_count = n;
        ctx.ctrl.set_qkd_params(id, q)?;
    }
    let spec = ctx.ctrl.link_spec(id)?.clone();
    let _ = writeln!(out, "link {id}: {} - {}", spec.a, spec.b);
    let _ = writeln!(
        out,
        "{:>5}  {:<22} {:>7} {:>8} {:>10} {:>9}",
        "trial", "status", "qber", "sifted", "distilled", "key_rate"
    );
    let (mut ok, mut qber_sum, mut distilled_sum) = (0usize, 0.0, 0usize);
    for t in 0..args.trials {
        let (status, qber, sifted, distilled, pulses) = match ctx.ctrl.run_qkd_session(id) {
            Ok(r) => (
                r.outcome.status.as_str().to_string(),
                r.outcome.qber_estimate,
                r.sifted_bits,
                r.outcome.distilled_bits,
                r.pulses,
            ),
            Err(e) => {
                let status = match e {
                    Error::SessionTimeout => "timeout",
                    Error::ReconciliationFailed => "reconciliation_failed",
                    _ => return Err(e),
                };
                (status.to_string(), f64::NAN, 0, 0, spec.qkd.pulse_count)
            }
        };
        if status == QkdStatus::Ok.as_str() {
            ok += 1;
        }
        if qber.is_finite() {
            qber_sum += qber;
        }
        distilled_sum += distilled;
        let rate = distilled as f64 / pulses as f64;
        let _ = writeln!(
            out,
            "{t:>5}  {status:<22} {qber:>7.4} {sifted:>8} {distilled:>10} {rate:>9.5}"
        );
        ctx.record(&[
            ("cmd", "qkd".into()),
            ("trial", t.to_string()),
            ("status", status),
            ("qber", format!("{qber:.6}")),
            ("sifted_bits", sifted.to_string()),
            ("distilled_bits", distilled.to_string()),
            ("key_rate", format!("{rate:.6}")),
        ]);
    }
    let n = args.trials.max(1) as f64;
    let _ = writeln!(
        out,
        "aggregate: ok {ok}/{} mean_qber {:.4} mean_distilled {:.1}",
        args.trials,
        qber_sum / n,
        distilled_sum as f64 / n
    );
    Ok(0)
}

fn cmd_circuit(ctx: &mut Context, args: &CircuitArgs, out: &mut dyn Write) -> Result<i32> {
    let data = fs::read(&args.input).map_err(|e| io_err(&args.input, e))?;
    let max_bytes = ctx.route(&args.route)?.1.max_datagram_bytes;
    let p = ctx.open(&args.route, args.kind)?;
    let c = &mut ctx.ctrl;
    let received = match p.kind {
        CircuitKind::SynchronizedRandom => {
            return Err(Error::WrongKind("files travel over lossy, reliable or bytestream circuits".into()))
        }
        CircuitKind::SecureReliableBytestream => {
            c.stream_write(&p.a, &data)?;
            c.stream_close(&p.a)?;
            c.stream_drain(&p.a)?;
            let mut got = c.stream_read(&p.b, usize::MAX)?;
            while !c.stream_finished(&p.b)? {
                c.pump()?;
                got.extend(c.stream_read(&p.b, usize::MAX)?);
            }
            got
        }
        kind => {
            // each datagram carries its chunk index so the file can be
            // put back in order
            let chunk = max_bytes.saturating_sub(4).max(1);
            let chunks: Vec<&[u8]> = data.chunks(chunk).collect();
            for (i, part) in chunks.iter().enumerate() {
                let mut payload = (i as u32).to_le_bytes().to_vec();
                payload.extend_from_slice(part);
                if kind == CircuitKind::SecureLossyDatagram {
                    c.send_lossy(&p.a, &payload)?;
                    c.pump()?;
                } else {
                    c.submit_reliable(&p.a, &payload)?;
                }
            }
            if kind == CircuitKind::SecureReliableDatagram {
                c.drain(&p.a)?;
            }
            let limit = c.settings().max_wait_ticks;
            c.run_until_idle(limit)?;
            let mut parts: Vec<(u32, Vec<u8>)> = c
                .recv_all(&p.b)?
                .into_iter()
                .filter(|m| m.len() >= 4)
                .map(|m| (u32::from_le_bytes(m[..4].try_into().expect("4 bytes")), m[4..].to_vec()))
                .collect();
            parts.sort_by_key(|x| x.0);
            parts.dedup_by_key(|x| x.0);
            parts.into_iter().flat_map(|x| x.1).collect()
        }
    };
    let sent = c.circuit_info(&p.a)?.stats;
    let recv = c.circuit_info(&p.b)?.stats;
    let net = c.network().stats();
    let matched = hash_hex(&received) == hash_hex(&data);
    let _ = writeln!(out, "kind: {}  hops: {}", p.kind, c.path_hops(p.path_id).map_or(1, |h| h.len()));
    let _ = writeln!(out, "bytes sent: {}  bytes received: {}", data.len(), received.len());
    let _ = writeln!(
        out,
        "datagrams sent: {}  delivered: {}  retransmitted: {}  rejected: {}  frames dropped by network: {}",
        sent.sent, recv.delivered, sent.retransmitted, recv.dropped, net.dropped
    );
    let _ = writeln!(out, "sent hash:     {}", hash_hex(&data));
    let _ = writeln!(out, "received hash: {}", hash_hex(&received));
    if matched {
        let _ = writeln!(out, "hash match");
    } else if p.kind == CircuitKind::SecureLossyDatagram {
        let _ = writeln!(out, "hash mismatch (expected: lossy circuits may drop datagrams)");
    } else {
        let _ = writeln!(out, "hash mismatch");
    }
    let relayed = c.relay_log().len();
    ctx.record(&[
        ("cmd", "circuit".into()),
        ("kind", p.kind.to_string()),
        ("bytes_sent", data.len().to_string()),
        ("bytes_received", received.len().to_string()),
        ("sent", sent.sent.to_string()),
        ("delivered", recv.delivered.to_string()),
        ("retransmitted", sent.retransmitted.to_string()),
        ("network_dropped", net.dropped.to_string()),
        ("relayed", relayed.to_string()),
        ("hash_match", matched.to_string()),
    ]);
    Ok(if matched || p.kind == CircuitKind::SecureLossyDatagram { 0 } else { 2 })
}

fn cmd_syncrand(ctx: &mut Context, args: &SyncArgs, out: &mut dyn Write) -> Result<i32> {
    let p = ctx.open(&args.route, Some(CircuitKind::SynchronizedRandom))?;
    let _ = writeln!(out, "{:>5}  {:>20}  {:>20}", "draw", p.a.local.to_string(), p.b.local.to_string());
    let mut identical = true;
    for i in 0..args.draws {
        let x = ctx.ctrl.sync_random(&p.a, args.bits)?;
        let y = ctx.ctrl.sync_random(&p.b, args.bits)?;
        identical &= x == y;
        let _ = writeln!(out, "{i:>5}  {x:>20}  {y:>20}");
        ctx.record(&[
            ("cmd", "syncrand".into()),
            ("draw", i.to_string()),
            ("a", x.to_string()),
            ("b", y.to_string()),
        ]);
        ctx.ctrl.pump()?;
    }
    let _ = writeln!(out, "sequences identical: {identical}");
    Ok(if identical { 0 } else { 2 })
}

fn partition_for(args: &McArgs, r: f64, d: usize) -> Result<Partition> {
    match args.strategy.as_str() {
        "unfolded" => split_unfolded(r, args.parts, d, args.resolution),
        "circular" if d == 1 => split_circular(r, args.parts),
        "axis" if d == 2 && args.parts == 2 => split_axis_2d(r),
        "circular" | "axis" => Err(Error::InvalidInput(format!(
            "strategy `{}` does not fit dimension {d} with {} parts",
            args.strategy, args.parts
        ))),
        other => Err(Error::InvalidInput(format!("unknown strategy `{other}`"))),
    }
}

fn cmd_montecarlo(ctx: &mut Context, args: &McArgs, out: &mut dyn Write) -> Result<i32> {
    let d = args.dim.unwrap_or(args.estimand.default_dim());
    if args.parts == 0 || args.samples < args.parts {
        return Err(Error::InvalidInput("need at least one sample per part".into()));
    }
    let shared = ctx.shared_random(&args.route, args.bits)?;
    let r = to_fraction(shared);
    let partition = partition_for(args, r, d)?;
    let f = args.estimand;
    let n = args.samples / args.parts;
    let job = McJob::new(n, ctx.seed, args.parts);
    let est = parallel_monte_carlo(&|x: &[f64]| f.eval(x), &partition, &job)?;
    let _ = writeln!(
        out,
        "estimand {f} d={d} strategy={} parts={} shared={}/2^{} r={r:.6}",
        args.strategy,
        args.parts,
        shared.value(),
        shared.k_bits()
    );
    let _ = writeln!(out, "{:>6} {:>9} {:>9} {:>12} {:>10} {:>8}", "region", "start", "measure", "mean", "std_err", "samples");
    for (re, region) in est.regions.iter().zip(partition.regions()) {
        let _ = writeln!(
            out,
            "{:>6} {:>9.6} {:>9.6} {:>12.6} {:>10.6} {:>8}",
            re.region,
            region.start(),
            region.measure(),
            re.mean,
            re.std_error,
            re.samples
        );
    }
    let exact = f.exact(d);
    let z = if est.std_error > 0.0 { (est.estimate - exact) / est.std_error } else { 0.0 };
    let _ = writeln!(out, "aggregate: {:.6} +/- {:.6} (exact {exact:.6}, z {z:.2})", est.estimate, est.std_error);
    if f == Estimand::QuarterCircle {
        let _ = writeln!(out, "4 x estimate: {:.6} +/- {:.6}", 4.0 * est.estimate, 4.0 * est.std_error);
    }
    let (single, single_se) = monte_carlo(&|x: &[f64]| f.eval(x), d, n * args.parts, rng::mix(ctx.seed, u64::MAX))?;
    let _ = writeln!(out, "unpartitioned: {single:.6} +/- {single_se:.6}");
    ctx.record(&[
        ("cmd", "montecarlo".into()),
        ("estimand", f.to_string()),
        ("r", format!("{r:.9}")),
        ("estimate", format!("{:.9}", est.estimate)),
        ("std_error", format!("{:.9}", est.std_error)),
        ("exact", format!("{exact:.9}")),
        ("unpartitioned", format!("{single:.9}")),
    ]);
    Ok(0)
}

fn cmd_search(ctx: &mut Context, args: &SearchArgs, out: &mut dyn Write) -> Result<i32> {
    if args.items == 0 {
        return Err(Error::InvalidInput("need at least one item".into()));
    }
    let target = args.target.unwrap_or((rng::mix(ctx.seed, 0x5eac) % args.items as u64) as usize);
    if target >= args.items {
        return Err(Error::InvalidInput(format!("target {target} outside 0..{}", args.items)));
    }
    let shared = ctx.shared_random(&args.route, args.bits)?;
    let found = parallel_las_vegas_search(args.items, &|i| i == target, shared, args.parts)?;
    let _ = writeln!(out, "items {} nodes {} shared={}/2^{}", args.items, args.parts, shared.value(), shared.k_bits());
    let _ = writeln!(out, "{:>5} {:>8}", "node", "probes");
    for (i, p) in found.probes_per_node.iter().enumerate() {
        let _ = writeln!(out, "{i:>5} {p:>8}");
    }
    let total: u64 = found.probes_per_node.iter().sum();
    let _ = writeln!(
        out,
        "found index {} by node {} after {} rounds ({total} probes in total)",
        found.index, found.winner, found.rounds
    );
    ctx.record(&[
        ("cmd", "search".into()),
        ("index", found.index.to_string()),
        ("winner", found.winner.to_string()),
        ("rounds", found.rounds.to_string()),
        ("total_probes", total.to_string()),
    ]);
    Ok(0)
}
