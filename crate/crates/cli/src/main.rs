//! `smmf`: dataset generation, training, motion transfer and evaluation.

mod commands;
mod config;
mod manifest;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{Kind, RunConfig};
use manifest::RunManifest;

fn cli() -> Command {
    let mut cmd = Command::new("smmf")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Motion transfer by space-time feature guidance on a toy video diffusion model")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in config::commands() {
        let mut sub = Command::new(spec.name)
            .about(spec.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key=value config file"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("override one config key"),
            );
        for k in &spec.keys {
            let mut help = k.help.to_string();
            match k.default {
                None => help.push_str(" [required]"),
                Some(d) if !d.is_empty() => help.push_str(&format!(" [default: {d}]")),
                _ => {}
            }
            let value_name = match k.kind {
                Kind::Int => "N",
                Kind::Float => "X",
                Kind::Bool => "BOOL",
                Kind::Str => "NAME",
                Kind::Input | Kind::Output => "PATH",
            };
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name(value_name).help(help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd.subcommand(
        Command::new("replay")
            .about("Re-run the command recorded in a run manifest")
            .arg(Arg::new("manifest").required(true).value_name("RUN_JSON")),
    )
}

fn overrides(m: &ArgMatches, command: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| smmf_core::Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    // dedicated flags win over --set
    for k in config::find(command).expect("registered").keys {
        if let Some(v) = m.get_one::<String>(k.name) {
            out.push((k.name.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn thread_cap(reference: bool) -> Result<usize> {
    if reference {
        return Ok(1);
    }
    match std::env::var("SMMF_THREADS") {
        Ok(s) => s
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| smmf_core::Error::Config(format!("SMMF_THREADS={s:?} is not a positive integer")).into()),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn execute(cfg: RunConfig, argv: Vec<String>) -> Result<()> {
    let threads = thread_cap(cfg.bool("reference"))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let mut manifest = RunManifest::new(&cfg, argv, threads);
    let start = Instant::now();
    let outcome = pool.install(|| commands::run(&cfg))?;
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.outputs = outcome.outputs.iter().map(|p| p.display().to_string()).collect();
    manifest.results = outcome.results;
    manifest.write(&outcome.manifest)?;
    println!("{}", serde_json::to_string(&manifest.results)?);
    Ok(())
}

fn run() -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let matches = cli().try_get_matches_from(&argv)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "replay" {
        let path = PathBuf::from(sub.get_one::<String>("manifest").expect("required"));
        let m = RunManifest::read(&path)?;
        let cfg = RunConfig::resolve(&m.command, None, &m.overrides())?;
        if cfg.hash() != m.config_hash {
            return Err(smmf_core::Error::Format("run manifest config does not match its hash".into()).into());
        }
        return execute(cfg, argv);
    }
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let cfg = RunConfig::resolve(name, file.as_deref(), &overrides(sub, name)?)?;
    execute(cfg, argv)
}

/// Category and exit code of a failure.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<smmf_core::Error>() {
            let code = match e.category() {
                "config" => 3,
                "format" => 4,
                "data" => 5,
                "numeric" => 6,
                "io" => 7,
                "shape" | "usage" => 8,
                _ => 1,
            };
            return (e.category(), code);
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return ("usage", 2);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 7);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("format", 4);
        }
    }
    ("internal", 1)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                if !ce.use_stderr() {
                    // --help and --version
                    let _ = ce.print();
                    return ExitCode::SUCCESS;
                }
            }
            let (category, code) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(code)
        }
    }
}
