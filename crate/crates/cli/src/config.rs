//! Layered `key = value` configuration for the subcommands.
//!
//! Every subcommand owns a table of keys with defaults. Values are resolved
//! in three layers: the defaults, then the `[subcommand]` section of an
//! optional INI file (`--config`), then command-line flags. Flag names are
//! the key names (`--stage1-iters` sets `stage1-iters`). The fully resolved
//! table is written back as `<out>/config.resolved`, a valid config file
//! that reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use ini::Ini;

use crate::error::{CliError, CliResult};

/// File name of the resolved config inside the output directory.
pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyKind {
    /// `--key value`.
    Value,
    /// `--key` alone means `true`; `--key=false` is accepted.
    Switch,
    /// A path that must exist before the command starts.
    Input,
    /// A segmentor checkpoint path, or an `oracle:` spec.
    BaseModel,
    /// First positional argument.
    Positional,
}

/// One configurable key. An empty default marks the key as required.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: KeyKind,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, kind: KeyKind, help: &'static str) -> Key {
    Key {
        name,
        default,
        kind,
        help,
    }
}

/// Build the clap subcommand for a key table.
pub fn command(name: &'static str, about: &'static str, keys: &[Key]) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("INI file whose [section] supplies values; flags override it"),
    );
    for k in keys {
        let help = if k.default.is_empty() {
            format!("{} (required)", k.help)
        } else {
            format!("{} [default: {}]", k.help, k.default)
        };
        let arg = Arg::new(k.name).help(help);
        let arg = match k.kind {
            KeyKind::Positional => arg.index(1),
            KeyKind::Switch => arg
                .long(k.name)
                .num_args(0..=1)
                .require_equals(true)
                .default_missing_value("true")
                .action(ArgAction::Set),
            _ => arg.long(k.name).value_name("VALUE"),
        };
        cmd = cmd.arg(arg);
    }
    cmd
}

/// A fully resolved key table, in declaration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub section: String,
    entries: Vec<(String, String)>,
}

impl Resolved {
    /// Resolve defaults < config file < flags.
    pub fn from_matches(section: &str, keys: &[Key], matches: &ArgMatches) -> CliResult<Self> {
        let mut entries: Vec<(String, String)> =
            keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        if let Some(path) = matches.get_one::<String>("config") {
            for (k, v) in read_section(Path::new(path), section)? {
                match entries.iter_mut().find(|(name, _)| *name == k) {
                    Some(slot) => slot.1 = v,
                    None => {
                        return Err(CliError::Config(format!("{path}: unknown key {k:?} in [{section}]")));
                    }
                }
            }
        }
        for (i, k) in keys.iter().enumerate() {
            if let Some(v) = matches.get_one::<String>(k.name) {
                entries[i].1 = v.clone();
            }
        }
        let resolved = Self {
            section: section.to_string(),
            entries,
        };
        for k in keys {
            if resolved.get_str(k.name).is_empty() {
                return Err(CliError::Config(format!("no value for required key {:?}", k.name)));
            }
        }
        resolved.check_inputs(keys)?;
        Ok(resolved)
    }

    fn check_inputs(&self, keys: &[Key]) -> CliResult<()> {
        for k in keys {
            let v = self.get_str(k.name);
            let must_exist = match k.kind {
                KeyKind::Input => true,
                KeyKind::BaseModel => !v.starts_with("oracle:"),
                _ => false,
            };
            if must_exist && !Path::new(v).exists() {
                return Err(CliError::MissingFile(format!("{}: {v} does not exist", k.name)));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Raw value; panics on a key outside the table (a programming error).
    pub fn get_str(&self, name: &str) -> &str {
        self.entries
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("key {name:?} is not in the [{}] table", self.section))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> CliResult<T> {
        let raw = self.get_str(name);
        raw.parse()
            .map_err(|_| CliError::Config(format!("{name} = {raw:?} is not a valid value")))
    }

    pub fn flag(&self, name: &str) -> CliResult<bool> {
        match self.get_str(name) {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            raw => Err(CliError::Config(format!("{name} = {raw:?} is not a boolean"))),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        PathBuf::from(self.get_str(name))
    }

    /// The INI text written as `config.resolved`.
    pub fn to_ini(&self) -> String {
        let mut s = format!("[{}]\n", self.section);
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").expect("write to String");
        }
        s
    }

    /// Create `out` and write the resolved config into it.
    pub fn write(&self, out: &Path) -> CliResult<()> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Run(format!("{}: {e}", out.display())))?;
        let path = out.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_ini()).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }
}

/// `(key, value)` pairs of one section of an INI file.
fn read_section(path: &Path, section: &str) -> CliResult<Vec<(String, String)>> {
    let ini = Ini::load_from_file(path).map_err(|e| match e {
        ini::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::MissingFile(format!("config file {} does not exist", path.display()))
        }
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    if let Some(general) = ini.section(None::<String>) {
        if let Some((k, _)) = general.iter().next() {
            return Err(CliError::Config(format!(
                "{}: key {k:?} appears before any [section]",
                path.display()
            )));
        }
    }
    Ok(ini
        .section(Some(section))
        .map(|p| p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[
        key("kind", "a", KeyKind::Positional, "variant"),
        key("seed", "0", KeyKind::Value, "seed"),
        key("lr", "0.5", KeyKind::Value, "learning rate"),
        key("dump", "false", KeyKind::Switch, "dump"),
    ];

    fn resolve(args: &[&str]) -> CliResult<Resolved> {
        let m = command("demo", "demo", KEYS)
            .try_get_matches_from(std::iter::once("demo").chain(args.iter().copied()))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Resolved::from_matches("demo", KEYS, &m)
    }

    #[test]
    fn layering_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.ini");
        std::fs::write(&file, "; comment\n[other]\nzzz = 1\n[demo]\nseed = 7\nlr = 0.25\n").unwrap();
        let f = file.to_str().unwrap();
        let r = resolve(&["b", "--config", f, "--lr", "0.125", "--dump"]).unwrap();
        assert_eq!(r.get_str("kind"), "b");
        assert_eq!(r.get::<u64>("seed").unwrap(), 7);
        assert_eq!(r.get::<f64>("lr").unwrap(), 0.125);
        assert!(r.flag("dump").unwrap());

        r.write(dir.path()).unwrap();
        let again = dir.path().join(RESOLVED_NAME);
        let r2 = resolve(&["--config", again.to_str().unwrap()]).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn error_categories() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.ini");
        std::fs::write(&file, "[demo]\nnope = 1\n").unwrap();
        assert!(matches!(resolve(&["--config", file.to_str().unwrap()]), Err(CliError::Config(_))));
        std::fs::write(&file, "seed = 1\n").unwrap();
        assert!(matches!(resolve(&["--config", file.to_str().unwrap()]), Err(CliError::Config(_))));
        let missing = dir.path().join("absent.ini");
        assert!(matches!(
            resolve(&["--config", missing.to_str().unwrap()]),
            Err(CliError::MissingFile(_))
        ));
        assert!(matches!(resolve(&["--bogus", "1"]), Err(CliError::Usage(_))));
        let r = resolve(&["--seed", "x"]).unwrap();
        assert!(matches!(r.get::<u64>("seed"), Err(CliError::Config(_))));
    }
}
