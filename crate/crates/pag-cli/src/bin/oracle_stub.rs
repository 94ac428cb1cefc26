//! A configurable external-oracle test double speaking the line protocol:
//! requests `{"id", "x"}` in, responses `{"id", "rho", "kappa", "kind"}`
//! out. By default it echoes `rho = x[0]`, `kappa = x[1]` so tests can
//! verify request/response matching end to end; flags inject the protocol
//! failures a robust client must survive or report.

use std::io::{self, BufRead, Write};

use clap::Parser;
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "oracle-stub", about = "External robustness-oracle test double")]
struct Opts {
    /// Answer this radius instead of echoing x[0].
    #[arg(long)]
    rho: Option<f64>,
    /// Answer this confidence instead of echoing x[1].
    #[arg(long)]
    kappa: Option<f64>,
    /// Result kind to claim.
    #[arg(long, default_value = "exact")]
    kind: String,
    /// Emit one unparseable line in place of response number N (0-based).
    #[arg(long)]
    malformed_after: Option<u64>,
    /// Exit(1) abruptly once N responses have been written.
    #[arg(long)]
    crash_after: Option<u64>,
    /// Buffer this many requests and answer each batch in reverse order.
    #[arg(long, default_value_t = 1)]
    shuffle_window: usize,
    /// Sleep this long before every response.
    #[arg(long, default_value_t = 0)]
    sleep_ms: u64,
}

#[derive(Deserialize)]
struct Request {
    id: u64,
    #[serde(default)]
    x: Vec<f64>,
}

fn main() {
    let opts = Opts::parse();
    let stdin = io::stdin().lock();
    let mut stdout = io::stdout().lock();
    let mut window: Vec<Request> = Vec::new();
    let mut answered = 0_u64;

    for line in stdin.lines() {
        let line = line.expect("stdin read failed");
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = serde_json::from_str(&line).expect("malformed request");
        window.push(request);
        if window.len() >= opts.shuffle_window.max(1) {
            answer(&opts, &mut window, &mut stdout, &mut answered);
        }
    }
    answer(&opts, &mut window, &mut stdout, &mut answered);
}

fn answer(opts: &Opts, window: &mut Vec<Request>, stdout: &mut impl Write, answered: &mut u64) {
    for request in window.drain(..).rev() {
        if opts.sleep_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(opts.sleep_ms));
        }
        if opts.crash_after == Some(*answered) {
            // Abrupt death mid-stream: no farewell line, nonzero status.
            std::process::exit(1);
        }
        if opts.malformed_after == Some(*answered) {
            writeln!(stdout, "}} this line is not a protocol response {{").unwrap();
            stdout.flush().unwrap();
            *answered += 1;
            continue;
        }
        let rho = opts.rho.unwrap_or_else(|| request.x.first().copied().unwrap_or(0.0)).max(0.0);
        let kappa = opts
            .kappa
            .unwrap_or_else(|| request.x.get(1).copied().unwrap_or(0.5))
            .clamp(0.0, 1.0);
        let response = json!({
            "id": request.id,
            "rho": rho,
            "kappa": kappa,
            "kind": opts.kind,
        });
        writeln!(stdout, "{response}").unwrap();
        stdout.flush().unwrap();
        *answered += 1;
    }
}
