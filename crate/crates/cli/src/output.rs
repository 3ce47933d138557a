//! CSV and summary writers. Floats carry 17 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// In-memory CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    body: String,
}

/// A CSV cell.
pub enum Cell {
    F(f64),
    I(usize),
    B(bool),
    S(String),
    Missing,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::I(x)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::B(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map(Cell::F).unwrap_or(Cell::Missing)
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), body: String::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        let cells: Vec<String> = row
            .into_iter()
            .map(|c| match c {
                Cell::F(x) => fmt_f64(x),
                Cell::I(i) => i.to_string(),
                Cell::B(b) => b.to_string(),
                Cell::S(s) => s,
                Cell::Missing => String::new(),
            })
            .collect();
        let _ = writeln!(self.body, "{}", cells.join(","));
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.header.join(","), self.body)
    }
}

/// Pass/fail flags and constants of one command, with the configuration echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub passed: bool,
    pub criteria: BTreeMap<String, bool>,
    pub constants: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Summary {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            passed: false,
            criteria: BTreeMap::new(),
            constants: BTreeMap::new(),
            notes: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn criterion(&mut self, name: &str, passed: bool) {
        self.criteria.insert(name.into(), passed);
    }

    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.insert(name.into(), value);
    }

    pub fn note(&mut self, name: &str, text: impl Into<String>) {
        self.notes.insert(name.into(), text.into());
    }

    /// `passed` becomes the conjunction of all criteria.
    pub fn finish(&mut self) {
        self.passed = self.criteria.values().all(|&p| p);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

/// Output directory sink.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn table(&self, name: &str, t: &Table) -> Result<(), CliError> {
        self.write(name, &t.render())
    }
}
