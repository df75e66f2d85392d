//! Command-line front end: run simulations, reproduce the published
//! operation-count tables, search gap plans and report memory footprints.
//!
//! Verbs: `run`, `tables`, `search`, `footprint`.
//! Exit codes: 0 pass, 1 mismatch, 2 configuration error.

mod config;
mod report;

use config::Config;
use hcnn::costmodel::{Arch, GapPlan, PackingStyle};
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    }
    let verb = args[0].as_str();
    let cfg = match parse_flags(verb, &args[1..]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    let result = match verb {
        "run" => report::cmd_run(&cfg),
        "tables" => report::cmd_tables(&cfg),
        "search" => report::cmd_search(&cfg),
        "footprint" => report::cmd_footprint(&cfg),
        other => Err(format!("unknown verb {other:?}")),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

const USAGE: &str = "\
usage: hcnn <verb> [flags]

verbs:
  run        simulate one network inference
  tables     reproduce the published count tables (expected vs measured)
  search     rank gap plans by the weighted rotation/bootstrap objective
  footprint  memory footprint report

common flags:
  --config FILE      flat key/value config with [sections]
  --preset NAME      resnet20 | resnet32 | resnet44 | resnet18
  --plan NAME        baseline | optimal | minrot | minboot  (or m,d/m,d/...)
  --style NAME       hybrid | baseline-mp (defaults from plan name)
  --params NAME      set_hyp | set_lc | @file
  --mode MODE        full | trace            (run)
  --seed N           weight seed             (run)
  --prcr S           PRCR segment count      (run, footprint)
  --out PATH         report destination
  --crot-weight X    search objective weight (default 15.5)
  --boot-weight X    search objective weight (default 2160)";

fn parse_flags(verb: &str, rest: &[String]) -> Result<Config, String> {
    let mut cfg = Config::default();
    let mut file_cfg: Option<Config> = None;
    let mut i = 0;
    while i < rest.len() {
        let flag = rest[i]
            .strip_prefix("--")
            .ok_or_else(|| format!("expected --flag, got {:?}", rest[i]))?;
        let value = rest
            .get(i + 1)
            .ok_or_else(|| format!("--{flag} needs a value"))?;
        if flag == "config" {
            let text =
                std::fs::read_to_string(value).map_err(|e| format!("reading {value}: {e}"))?;
            file_cfg = Some(Config::parse(&text, verb)?);
        } else {
            cfg.set(&format!("{verb}.{flag}"), value);
        }
        i += 2;
    }
    // file values fill in anything the command line did not set
    if let Some(f) = file_cfg {
        let mut merged = f;
        for key in ["preset", "plan", "style", "params", "mode", "seed", "prcr", "out",
                    "crot-weight", "boot-weight"] {
            let k = format!("{verb}.{key}");
            if let Some(v) = cfg.get(&k) {
                merged.set(&k, v);
            }
        }
        return Ok(merged);
    }
    Ok(cfg)
}

pub(crate) fn parse_arch(cfg: &Config, verb: &str) -> Result<Arch, String> {
    let name = cfg.get_or(&format!("{verb}.preset"), "resnet20");
    Arch::parse(name).ok_or_else(|| format!("unknown preset {name:?}"))
}

pub(crate) fn parse_plan(cfg: &Config, verb: &str, arch: Arch) -> Result<(GapPlan, PackingStyle), String> {
    let name = cfg.get_or(&format!("{verb}.plan"), "optimal");
    let style_default = if name == "baseline" { "baseline-mp" } else { "hybrid" };
    let style = match cfg.get_or(&format!("{verb}.style"), style_default) {
        "hybrid" => PackingStyle::Hybrid,
        "baseline-mp" | "mp" => PackingStyle::MpBaseline,
        other => return Err(format!("unknown style {other:?}")),
    };
    let plan = if name.contains('/') {
        let stages: Result<Vec<(usize, usize)>, String> = name
            .split('/')
            .map(|s| {
                let (m, d) = s
                    .split_once(',')
                    .ok_or_else(|| format!("bad stage spec {s:?}"))?;
                Ok((
                    m.trim().parse().map_err(|_| format!("bad m in {s:?}"))?,
                    d.trim().parse().map_err(|_| format!("bad d in {s:?}"))?,
                ))
            })
            .collect();
        GapPlan { stages: stages? }
    } else {
        GapPlan::named(arch, name).ok_or_else(|| format!("unknown plan {name:?} for {}", arch.name()))?
    };
    Ok((plan, style))
}

pub(crate) fn parse_params(cfg: &Config, verb: &str) -> Result<hcnn::HeParams, String> {
    match cfg.get_or(&format!("{verb}.params"), "set_hyp") {
        "set_hyp" => Ok(hcnn::HeParams::set_hyp()),
        "set_lc" => Ok(hcnn::HeParams::set_lc()),
        file if file.starts_with('@') => {
            let text = std::fs::read_to_string(&file[1..])
                .map_err(|e| format!("reading {}: {e}", &file[1..]))?;
            hcnn::HeParams::from_kv(&text).map_err(|e| e.to_string())
        }
        other => Err(format!("unknown parameter set {other:?}")),
    }
}
