mod commands;
mod error;
mod params;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches};

use crate::error::CliError;
use crate::params::{flag_name, read_config, read_manifest, Command, Kind, Resolved, COMMANDS, TOOL_VERSION};

fn leaf(c: Command) -> clap::Command {
    let mut cmd = clap::Command::new(*c.path().last().expect("non-empty path")).about(c.about());
    for p in c.params() {
        let mut help = p.help.to_string();
        if let Some(d) = p.default.filter(|_| p.kind != Kind::Flag) {
            help.push_str(&format!(" [default: {d}]"));
        }
        if p.required {
            help.push_str(" [required]");
        }
        let arg = Arg::new(p.key).long(flag_name(p.key)).help(help);
        cmd = cmd.arg(match p.kind {
            Kind::Flag => arg.action(ArgAction::SetTrue),
            _ => arg.value_name("VALUE").action(ArgAction::Set),
        });
    }
    cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key = value file of defaults"))
        .arg(
            Arg::new("print_config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .help("print the resolved manifest and exit"),
        )
}

fn cli() -> clap::Command {
    let mut root = clap::Command::new("songcraft")
        .version(TOOL_VERSION)
        .about("Toy speech recognizer, adversarial song crafting and detection")
        .subcommand_required(true)
        .arg_required_else_help(true);
    let mut groups: Vec<(&str, clap::Command)> = Vec::new();
    for c in COMMANDS {
        match c.path() {
            [group, _] => match groups.iter_mut().find(|(n, _)| n == group) {
                Some((_, g)) => *g = g.clone().subcommand(leaf(c)),
                None => groups.push((group, clap::Command::new(*group).subcommand_required(true).subcommand(leaf(c)))),
            },
            _ => root = root.subcommand(leaf(c)),
        }
    }
    for (_, g) in groups {
        root = root.subcommand(g);
    }
    root.subcommand(
        clap::Command::new("replay")
            .about("Re-run the command recorded in a manifest")
            .arg(Arg::new("manifest").required(true).value_name("MANIFEST"))
            .arg(Arg::new("out_dir").long("out-dir").value_name("DIR").help("write outputs here instead")),
    )
}

fn flags(c: Command, m: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for p in c.params() {
        if m.value_source(p.key) != Some(ValueSource::CommandLine) {
            continue;
        }
        let v = match p.kind {
            Kind::Flag => "true".to_string(),
            _ => m.get_one::<String>(p.key).cloned().unwrap_or_default(),
        };
        out.push((p.key.to_string(), v));
    }
    out
}

fn execute(r: &Resolved) -> Result<(), CliError> {
    let outcome = commands::run(r)?;
    if let Some(path) = r.manifest_path() {
        std::fs::write(&path, r.manifest())
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    print!("{}", outcome.stdout);
    let _ = std::io::stdout().flush();
    match outcome.failure {
        Some(msg) => Err(CliError::Operational(msg)),
        None => Ok(()),
    }
}

fn replay(m: &ArgMatches) -> Result<(), CliError> {
    let path = PathBuf::from(m.get_one::<String>("manifest").expect("required"));
    let (command, pairs) = read_manifest(&path)?;
    if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "tool_version") {
        if v != TOOL_VERSION {
            eprintln!("warning: manifest written by version {v}, running {TOOL_VERSION}");
        }
    }
    let mut r = Resolved::resolve(command, &pairs, &[])?;
    if let Some(dir) = m.get_one::<String>("out_dir") {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        r.redirect_outputs(dir)?;
    }
    execute(&r)
}

fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    let (name, mut sub) = m.subcommand().expect("subcommand required");
    if name == "replay" {
        return replay(sub);
    }
    let mut path = vec![name];
    while let Some((n, s)) = sub.subcommand() {
        path.push(n);
        sub = s;
    }
    let command = Command::from_name(&path.join(" ")).expect("clap only accepts known subcommands");
    let config = match sub.get_one::<String>("config") {
        Some(p) => read_config(Path::new(p))?,
        None => Vec::new(),
    };
    let r = Resolved::resolve(command, &config, &flags(command, sub))?;
    if sub.get_flag("print_config") {
        print!("{}", r.manifest());
        return Ok(());
    }
    execute(&r)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
