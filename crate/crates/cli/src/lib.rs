//! Command implementations behind the `tad` binary, usable as a library.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tad_core::qa::{QaItem, Task};
use tad_core::SceneBundle;

pub use config::RunConfig;

/// A failure reported as one JSON line: `{"error": ..., "key": ...}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    /// Config key or flag the error concerns, when there is one.
    pub key: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn new(message: impl fmt::Display) -> Self {
        Self { key: None, message: message.to_string() }
    }

    pub fn keyed(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { key: Some(key.into()), message: message.to_string() }
    }

    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("error".into(), self.message.replace('\n', " ").into());
        if let Some(k) = &self.key {
            obj.insert("key".into(), k.clone().into());
        }
        serde_json::Value::Object(obj).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with the offending key when `path` does not exist.
pub fn require_path(key: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::keyed(key, format!("path does not exist: {}", path.display())))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(key: &str, path: &Path) -> CliResult<Vec<T>> {
    require_path(key, path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::keyed(key, format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| CliError::keyed(key, format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(key: &str, path: &Path, rows: &[T]) -> CliResult<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::keyed(key, e))?);
        out.push('\n');
    }
    write_file(key, path, &out)
}

pub fn write_file(key: &str, path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::keyed(key, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::keyed(key, format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(key: &str, path: &Path) -> CliResult<T> {
    require_path(key, path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::keyed(key, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::keyed(key, format!("{}: {e}", path.display())))
}

/// `*.json` files directly inside `dir`, sorted.
pub fn json_files(key: &str, dir: &Path) -> CliResult<Vec<PathBuf>> {
    require_path(key, dir)?;
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::keyed(key, format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_bundles(key: &str, dir: &Path) -> CliResult<Vec<SceneBundle>> {
    json_files(key, dir)?.iter().map(|p| read_json(key, p)).collect()
}

/// Item filter shared by several commands.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub tasks: Option<Vec<Task>>,
    pub ego_only: bool,
    pub non_ego_only: bool,
}

impl Selection {
    pub fn parse_tasks(list: &str) -> CliResult<Vec<Task>> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<Task>().map_err(|e| CliError::keyed("tasks", e)))
            .collect()
    }

    pub fn task_list(&self) -> Vec<Task> {
        self.tasks.clone().unwrap_or_else(|| Task::ALL.to_vec())
    }

    pub fn keep(&self, item: &QaItem) -> bool {
        let ego = item.target.is_ego();
        self.tasks.as_ref().is_none_or(|t| t.contains(&item.task)) && !(self.ego_only && !ego) && !(self.non_ego_only && ego)
    }

    pub fn apply(&self, items: Vec<QaItem>) -> Vec<QaItem> {
        items.into_iter().filter(|i| self.keep(i)).collect()
    }
}
