//! Reference external matcher. Speaks the line protocol on stdin/stdout and
//! answers each request with the builtin matcher's correspondences, so a
//! pipeline driven through it reproduces the in-process result.
//!
//! Usage: `xmreg-echo-adapter [--budget N] [--malformed-every K]`
//!
//! With `--malformed-every K`, every K-th request gets a garbage reply.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use xmreg_core::imaging::GrayImage;
use xmreg_core::matching::{builtin_match, format_match_line, DEFAULT_KEYPOINT_BUDGET};

fn parse_args() -> Result<(usize, Option<u64>), String> {
    let mut budget = DEFAULT_KEYPOINT_BUDGET;
    let mut malformed = None;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut value = |name: &str| args.next().ok_or_else(|| format!("{name} needs a value"));
        match a.as_str() {
            "--budget" => budget = value("--budget")?.parse().map_err(|e| format!("--budget: {e}"))?,
            "--malformed-every" => {
                let k: u64 = value("--malformed-every")?.parse().map_err(|e| format!("--malformed-every: {e}"))?;
                malformed = (k > 0).then_some(k);
            }
            other => return Err(format!("unknown argument '{other}'")),
        }
    }
    Ok((budget, malformed))
}

fn main() -> ExitCode {
    let (budget, malformed) = match parse_args() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("xmreg-echo-adapter: {e}");
            return ExitCode::from(1);
        }
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut served = 0u64;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [cmd, id, src, dst] = parts[..] else {
            eprintln!("xmreg-echo-adapter: bad request '{line}'");
            continue;
        };
        if cmd != "MATCH" {
            let _ = writeln!(out, "ERR {id} unknown command {cmd}");
            let _ = out.flush();
            continue;
        }
        served += 1;
        let reply = if malformed.is_some_and(|k| served % k == 0) {
            format!("BEGIN {id} 1\nnot a match line\nEND {id}\n")
        } else {
            match (GrayImage::load(src), GrayImage::load(dst)) {
                (Ok(a), Ok(b)) => {
                    let corrs = builtin_match(&a, &b, budget);
                    let mut s = format!("BEGIN {id} {}\n", corrs.len());
                    for c in &corrs {
                        s.push_str(&format_match_line(c));
                        s.push('\n');
                    }
                    s.push_str(&format!("END {id}\n"));
                    s
                }
                (Err(e), _) | (_, Err(e)) => format!("ERR {id} {e}\n"),
            }
        };
        if out.write_all(reply.as_bytes()).and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
