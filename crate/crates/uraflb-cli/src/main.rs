//! Scenario-driven CLI over the bound evaluations and the link simulator.
//!
//! Every run reads a flat `key = value` scenario file, writes one CSV to
//! `--out`, and a JSON run summary (seed, wall time, achieving parameters)
//! next to it. Identical inputs and seed produce byte-identical CSV at any
//! worker count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use uraflb::achievability::{eps_md_fa, min_eb_achievability_sweep};
use uraflb::config::parse_scenario;
use uraflb::converse::{
    converse_envelope, fano_converse, single_user_converse, single_user_converse_binom,
};
use uraflb::ka_bounds::{
    ka_error_bound, ka_error_bound_asym_n, ka_error_bound_asym_p, KaErrorQuery,
};
use uraflb::model::{energy_per_bit_db, power_from_eb_db, KaDistribution, Scenario};
use uraflb::simulator;
use uraflb::BoundReport;

/// Exit code for a bound that is infeasible at the bracket ceiling.
const EXIT_INFEASIBLE: i32 = 2;

#[derive(Parser)]
#[command(name = "uraflb", about = "Finite-blocklength URA energy-per-bit bounds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Achievability,
    Converse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Theorem {
    Single,
    Binom,
    Fano,
    Envelope,
}

#[derive(Clone, Copy, ValueEnum)]
enum AsymMode {
    P,
    N,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimWhat {
    KaEst,
    MdFa,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    PDb,
    EbDb,
    N,
    L,
    MeanKa,
}

#[derive(Subcommand)]
enum Command {
    /// Estimation-error bound P[K_a -> K'_a] at the scenario power.
    KaErrorBound {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        ka: usize,
        /// Comma-separated K'_a list, or `all` for every value != K_a.
        #[arg(long, default_value = "all")]
        ka_prime: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Large-power or large-blocklength limits of the estimation bound.
    KaErrorAsym {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        ka: usize,
        #[arg(long, value_enum)]
        mode: AsymMode,
        #[arg(long, default_value = "all")]
        ka_prime: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Misdetection / false-alarm bounds at a fixed power.
    Achievability {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario power (dB).
        #[arg(long)]
        p_db: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Converse bounds on the minimum energy-per-bit.
    Converse {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "envelope")]
        theorem: Theorem,
        #[arg(long)]
        out: PathBuf,
    },
    /// Minimum energy-per-bit from either side.
    MinEbno {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        side: Side,
        /// Decoding-radius sweep for the achievability side, e.g. `0,1,2`.
        #[arg(long, default_value = "")]
        r_sweep: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo link simulation.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "md-fa")]
        what: SimWhat,
        /// True activity count for `ka-est` runs.
        #[arg(long)]
        ka: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a command across an axis of scenario values.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        /// One of: ka-error-bound, achievability, min-ebno-achievability,
        /// min-ebno-converse.
        #[arg(long)]
        command: String,
        /// K_a / K'_a for estimation-bound sweeps.
        #[arg(long)]
        ka: Option<usize>,
        #[arg(long)]
        ka_prime: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let code = match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn configure_threads() {
    if let Ok(v) = std::env::var("URAFLB_THREADS") {
        if let Ok(k) = v.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global();
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    let spec = parse_scenario(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(spec.into_scenario(base)?)
}

fn parse_ka_primes(arg: &str, ka: usize, k: usize) -> Result<Vec<usize>> {
    if arg.trim() == "all" {
        return Ok((0..=k).filter(|&x| x != ka).collect());
    }
    arg.split(',')
        .map(|t| {
            t.trim().parse::<usize>().map_err(|e| anyhow::anyhow!("bad ka_prime `{t}`: {e}"))
        })
        .collect()
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.12e}")
    } else if x.is_infinite() && x > 0.0 {
        "inf".into()
    } else if x.is_infinite() {
        "-inf".into()
    } else {
        "nan".into()
    }
}

struct RunOutput {
    header: String,
    rows: Vec<String>,
    summary: serde_json::Value,
    infeasible: bool,
}

fn write_output(out: &Path, mut o: RunOutput, t0: Instant, cmd: &str) -> Result<i32> {
    let mut csv = String::with_capacity(64 * (o.rows.len() + 1));
    csv.push_str(&o.header);
    csv.push('\n');
    for r in &o.rows {
        csv.push_str(r);
        csv.push('\n');
    }
    std::fs::write(out, csv).with_context(|| format!("cannot write {}", out.display()))?;
    o.summary["command"] = serde_json::Value::String(cmd.into());
    o.summary["wall_time_s"] =
        serde_json::json!((t0.elapsed().as_secs_f64() * 1000.0).round() / 1000.0);
    o.summary["rows"] = serde_json::json!(o.rows.len());
    let spath = out.with_extension(match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.run.json"),
        None => "run.json".to_string(),
    });
    std::fs::write(&spath, serde_json::to_string_pretty(&o.summary)?)?;
    Ok(if o.infeasible { EXIT_INFEASIBLE } else { 0 })
}

fn bound_row_fields(r: &BoundReport) -> String {
    format!(
        "{},{},{},{},{}",
        fmt(r.value),
        fmt(r.se),
        r.trace.p_star.map_or("".into(), fmt),
        r.trace.p_prime_star.map_or("".into(), fmt),
        r.trace.r_prime_star.map_or("".into(), |v| v.to_string()),
    )
}

fn run() -> Result<i32> {
    configure_threads();
    let cli = Cli::parse();
    let t0 = Instant::now();
    match cli.command {
        Command::KaErrorBound { scenario, ka, ka_prime, out } => {
            let s = load_scenario(&scenario)?;
            let p = s.power.context("ka-error-bound needs P_db in the scenario")?;
            let primes = parse_ka_primes(&ka_prime, ka, s.k)?;
            let mc = s.mc;
            let rows: Vec<String> = primes
                .iter()
                .map(|&kp| {
                    let q = KaErrorQuery::new(ka, kp, s.k);
                    let r = ka_error_bound(&s, &q, &mc);
                    format!(
                        "{},{},{},{},{},{},{}",
                        ka,
                        kp,
                        fmt(energy_per_bit_db(s.n, p, s.j)),
                        fmt(r.value),
                        fmt(r.se),
                        r.trace.p_prime_star.map_or("".into(), fmt),
                        r.trace.ka_tilde_star.map_or("".into(), |v| v.to_string()),
                    )
                })
                .collect();
            let o = RunOutput {
                header: "ka,ka_prime,eb_db,bound,se,p_prime_star,ka_tilde_star".into(),
                rows,
                summary: serde_json::json!({"seed": mc.seed, "samples": mc.samples}),
                infeasible: false,
            };
            write_output(&out, o, t0, "ka-error-bound")
        }
        Command::KaErrorAsym { scenario, ka, mode, ka_prime, out } => {
            let s = load_scenario(&scenario)?;
            let primes = parse_ka_primes(&ka_prime, ka, s.k)?;
            let mc = s.mc;
            let rows: Vec<String> = primes
                .iter()
                .map(|&kp| {
                    let q = KaErrorQuery::new(ka, kp, s.k);
                    let (mode_s, v, se) = match mode {
                        AsymMode::P => {
                            let r = ka_error_bound_asym_p(&s, &q, &mc);
                            ("p", r.value, r.se)
                        }
                        AsymMode::N => {
                            let v = ka_error_bound_asym_n(ka, kp, (0, s.k), s.l, &s.m());
                            ("n", v, 0.0)
                        }
                    };
                    format!("{ka},{kp},{mode_s},{},{}", fmt(v), fmt(se))
                })
                .collect();
            let o = RunOutput {
                header: "ka,ka_prime,mode,bound,se".into(),
                rows,
                summary: serde_json::json!({"seed": mc.seed, "samples": mc.samples}),
                infeasible: false,
            };
            write_output(&out, o, t0, "ka-error-asym")
        }
        Command::Achievability { scenario, p_db, out } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(db) = p_db {
                s.power = Some(10f64.powf(db / 10.0));
            }
            let p = s.power.context("achievability needs P_db (scenario key or --p-db)")?;
            let mc = s.mc;
            let mut best: Option<(f64, uraflb::achievability::EpsBreakdown)> = None;
            for pp in s.p_prime_grid(p) {
                let e = eps_md_fa(&s, p, pp, &mc);
                if best.as_ref().is_none_or(|(_, b)| e.md.max(e.fa) < b.md.max(b.fa)) {
                    best = Some((pp, e));
                }
            }
            let (pp, e) = best.expect("P' grid nonempty");
            let rows = vec![format!(
                "{},{},{},{},{},{},{}",
                fmt(10.0 * p.log10()),
                fmt(pp),
                fmt(e.md),
                fmt(e.fa),
                fmt(e.md_se),
                fmt(e.fa_se),
                fmt(e.p0),
            )];
            let o = RunOutput {
                header: "p_db,p_prime,eps_md,eps_fa,md_se,fa_se,p0".into(),
                rows,
                summary: serde_json::json!({
                    "seed": mc.seed, "samples": mc.samples,
                    "capped_md": e.capped_md, "capped_fa": e.capped_fa,
                }),
                infeasible: false,
            };
            write_output(&out, o, t0, "achievability")
        }
        Command::Converse { scenario, theorem, out } => {
            let s = load_scenario(&scenario)?;
            let t = s.targets;
            let mc = s.mc;
            let (name, r) = match theorem {
                Theorem::Single => ("single", single_user_converse(&s, &t)),
                Theorem::Binom => ("binom", single_user_converse_binom(&s, &t)?),
                Theorem::Fano => ("fano", fano_converse(&s, &t, &mc)),
                Theorem::Envelope => ("envelope", converse_envelope(&s, &t, &mc)),
            };
            let infeasible = !r.feasible;
            let rows = vec![format!(
                "{},{},{},{}",
                name,
                fmt(s.ka_dist.mean()),
                bound_row_fields(&r),
                r.feasible as u8,
            )];
            let o = RunOutput {
                header: "theorem,mean_ka,eb_db,se_db,p_star,p_prime_star,r_prime_star,feasible"
                    .into(),
                rows,
                summary: serde_json::json!({
                    "seed": mc.seed, "samples": mc.samples,
                    "source": r.trace.source,
                }),
                infeasible,
            };
            write_output(&out, o, t0, "converse")
        }
        Command::MinEbno { scenario, side, r_sweep, out } => {
            let s = load_scenario(&scenario)?;
            let t = s.targets;
            let mc = s.mc;
            let r = match side {
                Side::Achievability => {
                    let sweep: Vec<usize> = if r_sweep.trim().is_empty() {
                        vec![s.r_prime]
                    } else {
                        r_sweep
                            .split(',')
                            .map(|x| x.trim().parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .context("bad --r-sweep")?
                    };
                    min_eb_achievability_sweep(&s, &t, &mc, &sweep)
                }
                Side::Converse => converse_envelope(&s, &t, &mc),
            };
            let infeasible = !r.feasible;
            let rows = vec![format!(
                "{},{},{}",
                fmt(s.ka_dist.mean()),
                bound_row_fields(&r),
                r.feasible as u8,
            )];
            let o = RunOutput {
                header: "mean_ka,eb_db,se_db,p_star,p_prime_star,r_prime_star,feasible".into(),
                rows,
                summary: serde_json::json!({
                    "seed": mc.seed, "samples": mc.samples,
                    "k_l": r.trace.k_l, "k_u": r.trace.k_u, "source": r.trace.source,
                }),
                infeasible,
            };
            write_output(&out, o, t0, "min-ebno")
        }
        Command::Simulate { scenario, trials, seed, what, ka, out } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(sd) = seed {
                s.mc.seed = sd;
            }
            let sd = s.mc.seed;
            match what {
                SimWhat::KaEst => {
                    let ka = ka.context("simulate --what ka-est needs --ka")?;
                    let freqs = simulator::empirical_ka_error(&s, ka, trials, sd);
                    let rows: Vec<String> = freqs
                        .iter()
                        .enumerate()
                        .map(|(k, (f, se))| format!("{ka},{k},{},{}", fmt(*f), fmt(*se)))
                        .collect();
                    let o = RunOutput {
                        header: "ka,ka_est,freq,se".into(),
                        rows,
                        summary: serde_json::json!({"seed": sd, "trials": trials}),
                        infeasible: false,
                    };
                    write_output(&out, o, t0, "simulate")
                }
                SimWhat::MdFa => {
                    if s.m().as_small().is_none() {
                        bail!("simulate --what md-fa needs the explicit small-M mode (J <= 16)");
                    }
                    let ((md, md_se), (fa, fa_se)) = simulator::empirical_md_fa(&s, trials, sd);
                    let rows = vec![format!(
                        "{trials},{},{},{},{}",
                        fmt(md),
                        fmt(md_se),
                        fmt(fa),
                        fmt(fa_se)
                    )];
                    let o = RunOutput {
                        header: "trials,p_md,md_se,p_fa,fa_se".into(),
                        rows,
                        summary: serde_json::json!({"seed": sd, "trials": trials}),
                        infeasible: false,
                    };
                    write_output(&out, o, t0, "simulate")
                }
            }
        }
        Command::Sweep { scenario, axis, values, command, ka, ka_prime, out } => {
            let base = load_scenario(&scenario)?;
            let vals: Vec<f64> = values
                .split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("bad value `{t}`: {e}"))
                })
                .collect::<Result<_>>()?;
            if vals.is_empty() {
                bail!("sweep needs at least one value");
            }
            let make = |v: f64| -> Result<Scenario> {
                let mut s = base.clone();
                match axis {
                    Axis::PDb => s.power = Some(10f64.powf(v / 10.0)),
                    Axis::EbDb => s.power = Some(power_from_eb_db(s.n, v, s.j)),
                    Axis::N => s.n = v as usize,
                    Axis::L => s.l = v as usize,
                    Axis::MeanKa => match s.ka_dist {
                        KaDistribution::Binomial { k, .. } => {
                            s.ka_dist = KaDistribution::Binomial { k, p: v / k as f64 };
                        }
                        KaDistribution::Fixed(_) => {
                            s.ka_dist = KaDistribution::Fixed(v.round() as usize);
                        }
                        _ => bail!("mean_ka sweeps need a binomial or fixed distribution"),
                    },
                }
                s.validate()?;
                Ok(s)
            };
            // Points evaluate on the worker pool; rows keep sweep order.
            use rayon::prelude::*;
            let scenarios: Vec<Scenario> = vals.iter().map(|&v| make(v)).collect::<Result<_>>()?;
            let mut any_infeasible = false;
            let (header, rows): (String, Vec<String>) = match command.as_str() {
                "ka-error-bound" => {
                    let ka = ka.context("sweep over ka-error-bound needs --ka")?;
                    let kp = ka_prime.context("sweep over ka-error-bound needs --ka-prime")?;
                    let rows: Vec<String> = scenarios
                        .par_iter()
                        .zip(vals.par_iter())
                        .map(|(s, &v)| {
                            let q = KaErrorQuery::new(ka, kp, s.k);
                            let r = ka_error_bound(s, &q, &s.mc);
                            format!("{},{},{}", fmt(v), fmt(r.value), fmt(r.se))
                        })
                        .collect();
                    ("axis,bound,se".into(), rows)
                }
                "achievability" => {
                    let rows: Vec<String> = scenarios
                        .par_iter()
                        .zip(vals.par_iter())
                        .map(|(s, &v)| {
                            let p = s.power.expect("sweep sets or inherits P");
                            let mut best: Option<uraflb::achievability::EpsBreakdown> = None;
                            for pp in s.p_prime_grid(p) {
                                let e = eps_md_fa(s, p, pp, &s.mc);
                                if best
                                    .as_ref()
                                    .is_none_or(|b| e.md.max(e.fa) < b.md.max(b.fa))
                                {
                                    best = Some(e);
                                }
                            }
                            let e = best.unwrap();
                            format!("{},{},{}", fmt(v), fmt(e.md), fmt(e.fa))
                        })
                        .collect();
                    ("axis,eps_md,eps_fa".into(), rows)
                }
                "min-ebno-achievability" | "min-ebno-converse" => {
                    let reports: Vec<BoundReport> = scenarios
                        .par_iter()
                        .map(|s| {
                            if command.ends_with("converse") {
                                converse_envelope(s, &s.targets, &s.mc)
                            } else {
                                min_eb_achievability_sweep(s, &s.targets, &s.mc, &[s.r_prime])
                            }
                        })
                        .collect();
                    let rows: Vec<String> = reports
                        .iter()
                        .zip(vals.iter())
                        .map(|(r, &v)| {
                            format!("{},{},{}", fmt(v), bound_row_fields(r), r.feasible as u8)
                        })
                        .collect();
                    any_infeasible = reports.iter().any(|r| !r.feasible);
                    ("axis,eb_db,se_db,p_star,p_prime_star,r_prime_star,feasible".into(), rows)
                }
                other => bail!("unknown sweep command `{other}`"),
            };
            let o = RunOutput {
                header,
                rows,
                summary: serde_json::json!({"seed": base.mc.seed, "axis_len": vals.len()}),
                infeasible: any_infeasible,
            };
            write_output(&out, o, t0, "sweep")
        }
    }
}
