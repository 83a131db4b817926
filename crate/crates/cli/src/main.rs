//! `oodprompt`: run the prompt-tuning pipeline stage by stage.
//!
//! Every subcommand accepts `--config FILE`, `--seed N`, `--out DIR`,
//! `--force`, and any number of `--key value` pairs that override keys of
//! the config document.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oodprompt::metrics::format_table;
use oodprompt::pipeline::{exit_code, Pipeline, RunConfig};
use oodprompt::Error;

#[derive(Parser, Debug)]
#[command(
    name = "oodprompt",
    version,
    about = "Label-driven prompt tuning for OOD detection on embedding banks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the toy world (or import external banks) into the output directory.
    Toygen(Common),
    /// Mine negative labels and write the label space.
    MineNeg(Common),
    /// Select per-class training features.
    Collect(Common),
    /// Fit prompt tokens and write the prompt file and loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Only compare analytic and finite-difference gradients on the first batch.
        #[arg(long)]
        gradcheck: bool,
    },
    /// Score the test banks and write a report. `--scheme none` scores the bare anchors.
    Eval(Common),
    /// Run every stage, then evaluate both the baseline and the trained prompts.
    RunAll(Common),
    /// Print the resolved config and its hash.
    ShowConfig(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Config document (JSON). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Accept artifacts produced under a different config.
    #[arg(long)]
    force: bool,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

/// `Common` after pulling the fixed flags back out of the trailing list,
/// where clap leaves them once a config override has been seen.
#[derive(Debug)]
struct Resolved {
    config: Option<PathBuf>,
    out: PathBuf,
    force: bool,
    gradcheck: bool,
    overrides: Vec<(String, String)>,
}

fn parse_overrides(common: &Common) -> Result<Resolved, Error> {
    let mut r = Resolved {
        config: common.config.clone(),
        out: common.out.clone(),
        force: common.force,
        gradcheck: false,
        overrides: Vec::new(),
    };
    let mut it = common.overrides.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, found {arg:?}")));
        };
        match key {
            "force" => {
                r.force = true;
                continue;
            }
            "gradcheck" => {
                r.gradcheck = true;
                continue;
            }
            _ => {}
        }
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => r.config = Some(PathBuf::from(value)),
            "out" => r.out = PathBuf::from(value),
            _ => r.overrides.push((key, value)),
        }
    }
    if let Some(seed) = common.seed {
        r.overrides.push(("seed".into(), seed.to_string()));
    }
    Ok(r)
}

/// Loads the config and applies overrides. The flag is set when
/// `--scheme none` was given, which selects the anchors-only evaluation.
fn resolve(common: &Common) -> Result<(RunConfig, bool, Resolved), Error> {
    let mut r = parse_overrides(common)?;
    let doc = match &r.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    let before = r.overrides.len();
    r.overrides.retain(|(k, v)| !(k == "scheme" && v == "none"));
    let baseline = r.overrides.len() != before;
    Ok((
        RunConfig::from_value_with_overrides(doc, &r.overrides)?,
        baseline,
        r,
    ))
}

fn pipeline(common: &Common) -> Result<(Pipeline, bool, bool), Error> {
    let (cfg, baseline, r) = resolve(common)?;
    Ok((
        Pipeline::new(cfg, r.out)?.force(r.force),
        baseline,
        r.gradcheck,
    ))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Toygen(c) => {
            let (p, _, _) = pipeline(&c)?;
            p.toygen()?;
            println!("toygen: wrote banks to {}", p.out_dir().display());
        }
        Command::MineNeg(c) => {
            let (p, _, _) = pipeline(&c)?;
            let mined = p.mine_neg()?;
            println!("mine-neg: {} negative labels", mined.labels.len());
            for (label, aff) in mined.labels.iter().zip(&mined.affinities) {
                println!("  {label:<24} {aff:+.4}");
            }
        }
        Command::Collect(c) => {
            let (p, _, _) = pipeline(&c)?;
            let ts = p.collect()?;
            let real = ts
                .provenance
                .iter()
                .filter(|&&x| x == oodprompt::collection::Provenance::Real)
                .count();
            println!(
                "collect: {} rows ({real} real, {} synthetic)",
                ts.len(),
                ts.len() - real
            );
        }
        Command::Train { common, gradcheck } => {
            let (p, _, late_gradcheck) = pipeline(&common)?;
            if gradcheck || late_gradcheck {
                let worst = p.gradcheck()?;
                println!("gradcheck: max relative error {worst:.3e}");
            } else {
                let out = p.train()?;
                for (e, m) in out.epoch_means.iter().enumerate() {
                    println!(
                        "epoch {:>3}  L {:.4}  L_cm {:.4}  L_cd {:.4}  L_all {:.4}",
                        e + 1,
                        m.l_plain,
                        m.l_cm,
                        m.l_cd,
                        m.l_all
                    );
                }
            }
        }
        Command::Eval(c) => {
            let (p, baseline, _) = pipeline(&c)?;
            let report = p.eval(baseline)?;
            let name = if baseline { "anchors only" } else { "trained" };
            print!("{}", format_table(&[(name, &report)]));
        }
        Command::RunAll(c) => {
            let (p, _, _) = pipeline(&c)?;
            let (baseline, trained) = p.run_all()?;
            print!(
                "{}",
                format_table(&[("anchors only", &baseline), ("trained", &trained)])
            );
        }
        Command::ShowConfig(c) => {
            let (cfg, _, _) = resolve(&c)?;
            print!("{}", cfg.to_json());
            println!("config hash: {}", cfg.hash());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
