use std::fs;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::filter::LevelFilter;

use siprelay::media::MismatchPolicy;
use siprelay::nat::NatType;
use siprelay::proxy::ProxyConfig;
use siprelay::service::{self, ServiceConfig};
use siprelay::sim::{run_matrix, run_scenario, Mode, Report, Scenario};

#[derive(Parser)]
#[command(name = "siprelay", version, about = "SIP proxy with an integrated RTP relay, and a NAT traversal simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file through the simulator.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every NAT-type pairing for each mode.
    Matrix {
        #[arg(long, value_delimiter = ',', default_value = "adapted,naive")]
        modes: Vec<Mode>,
        /// Template scenario; its NAT types and mode are replaced per cell.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// RTP packets each way when no template is given.
        #[arg(long, default_value_t = 50)]
        packets: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the proxy on real sockets until killed.
    Serve {
        /// SIP listen address (TCP).
        #[arg(long, default_value = "0.0.0.0:5060")]
        listen: SocketAddrV4,
        /// Address written into rewritten SDP. Defaults to the listen address,
        /// or 127.0.0.1 when listening on all interfaces.
        #[arg(long)]
        public_ip: Option<Ipv4Addr>,
        /// Relay port range, inclusive.
        #[arg(long, default_value = "40000-40999", value_parser = port_range)]
        media_ports: (u16, u16),
        /// Follow a leg's new source address instead of dropping its packets.
        #[arg(long)]
        relatch: bool,
        #[arg(long, default_value = "info")]
        log_level: LevelFilter,
    },
}

fn port_range(s: &str) -> Result<(u16, u16), String> {
    let (lo, hi) = s.split_once('-').ok_or("expected LO-HI")?;
    let parse = |p: &str| p.trim().parse::<u16>().map_err(|e| format!("{p:?}: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn write(path: &Path, json: &str) -> Result<()> {
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn print_report(r: &Report) {
    println!("mode {} seed {} signaling {:?}", r.mode, r.seed, r.signaling);
    for n in &r.nats {
        println!("  {} behind {} ({})", n.client, n.nat_type, n.public_ip);
    }
    for c in &r.calls {
        let status = c.final_status.map_or("-".to_string(), |s| s.to_string());
        println!("  call {} {} -> {}: established {} final {status}", c.id, c.from, c.to, c.established);
    }
    for d in &r.directions {
        println!(
            "  {} {} -> {}: {}/{} delivered, {} corrupted, rtcp {}/{}",
            d.call, d.from, d.to, d.delivered, d.sent, d.corrupted, d.rtcp_delivered, d.rtcp_sent
        );
    }
    println!(
        "  sip messages {}, allocation transactions {}, pool restored {}",
        r.sip_messages, r.allocation_transactions, r.pool_restored
    );
    println!("outcome {}", serde_json::to_string(&r.outcome).unwrap_or_default().trim_matches('"'));
}

fn run(scenario: &Path, mode: Option<Mode>, seed: Option<u64>, report: Option<&Path>) -> Result<bool> {
    let mut s = load(scenario)?;
    s.mode = mode.unwrap_or(s.mode);
    s.seed = seed.unwrap_or(s.seed);
    let r = run_scenario(&s)?;
    print_report(&r);
    if let Some(path) = report {
        write(path, &r.to_json())?;
    }
    Ok(match s.expect {
        Some(want) if want != r.outcome => {
            println!("expected {}", serde_json::to_string(&want)?.trim_matches('"'));
            false
        }
        _ => true,
    })
}

fn matrix(modes: &[Mode], scenario: Option<&Path>, packets: u32, seed: Option<u64>, report: Option<&Path>) -> Result<bool> {
    if modes.is_empty() {
        bail!("no modes given");
    }
    let mut template = match scenario {
        Some(p) => load(p)?,
        None => Scenario::basic_call(NatType::FullCone, NatType::FullCone, packets),
    };
    template.seed = seed.unwrap_or(template.seed);
    let cells = run_matrix(&template, modes)?;
    for c in &cells {
        let outcome = serde_json::to_string(&c.outcome)?;
        let mark = match (c.expected, c.holds()) {
            (None, _) => "",
            (Some(_), true) => "ok",
            (Some(_), false) => "MISMATCH",
        };
        println!(
            "{:<9} {:<21} {:<21} {:<19} a->b {}/{} b->a {}/{} {mark}",
            c.mode.as_str(),
            c.nat_a.as_str(),
            c.nat_b.as_str(),
            outcome.trim_matches('"'),
            c.delivered_ab,
            c.sent_ab,
            c.delivered_ba,
            c.sent_ba
        );
    }
    if let Some(path) = report {
        write(path, &serde_json::to_string_pretty(&cells)?)?;
    }
    Ok(cells.iter().all(|c| c.holds()))
}

fn serve(listen: SocketAddrV4, public_ip: Option<Ipv4Addr>, media_ports: (u16, u16), relatch: bool, level: LevelFilter) -> Result<()> {
    tracing_subscriber::fmt().with_max_level(level).init();
    let ip = public_ip.unwrap_or(if listen.ip().is_unspecified() { Ipv4Addr::LOCALHOST } else { *listen.ip() });
    let mut proxy = ProxyConfig::new(ip);
    if listen.port() != 0 {
        proxy.sip_tcp_port = listen.port();
    }
    proxy.media_port_range = media_ports;
    if relatch {
        proxy.mismatch_policy = MismatchPolicy::Relatch;
    }
    let handle = service::spawn(ServiceConfig { listen, media_bind: *listen.ip(), proxy })?;
    println!("listening on {} (media {}-{}, SDP address {ip})", handle.sip_addr(), media_ports.0, media_ports.1);
    handle.wait();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, mode, seed, report } => run(&scenario, mode, seed, report.as_deref()),
        Command::Matrix { modes, scenario, packets, seed, report } => {
            matrix(&modes, scenario.as_deref(), packets, seed, report.as_deref())
        }
        Command::Serve { listen, public_ip, media_ports, relatch, log_level } => {
            serve(listen, public_ip, media_ports, relatch, log_level).map(|()| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
