//! Runtime environments for tool dependencies.
//!
//! Environments are keyed by the normalized, sorted dependency set, so two
//! tools that declare the same packages in any order share one environment.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A provisioned interpreter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvRef {
    /// `"base"` for the empty set, else a digest of the normalized set.
    pub key: String,
    pub python: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error("unresolvable dependency `{package}`: {detail}")]
    Unresolvable { package: String, detail: String },
    #[error("provisioning failed: {0}")]
    Failed(String),
}

pub trait Provisioner: Send + Sync {
    fn provision(&self, dependencies: &[String]) -> Result<EnvRef, ProvisionError>;
}

/// Distribution name of a requirement: lowercase, `_`/`.` folded to `-`,
/// extras and version specifiers removed.
pub fn package_name(requirement: &str) -> String {
    let end = requirement.find(|c: char| "[<>=!~; ".contains(c)).unwrap_or(requirement.len());
    requirement[..end].trim().to_ascii_lowercase().replace(['_', '.'], "-")
}

/// Normalized requirement set in sorted order.
pub fn normalized_set(dependencies: &[String]) -> BTreeSet<String> {
    dependencies
        .iter()
        .map(|d| {
            let name = package_name(d);
            let spec: String = d[d.find(|c: char| "[<>=!~;".contains(c)).unwrap_or(d.len())..].split_whitespace().collect();
            format!("{name}{spec}")
        })
        .filter(|d| !d.is_empty())
        .collect()
}

pub fn environment_key(dependencies: &[String]) -> String {
    let set = normalized_set(dependencies);
    if set.is_empty() {
        return "base".to_string();
    }
    let joined = set.into_iter().collect::<Vec<_>>().join("\n");
    hex::encode(&Sha256::digest(joined.as_bytes())[..12])
}

/// Resolves dependencies against a fixed index of packages importable from a
/// single interpreter. Every resolvable set maps to that interpreter.
#[derive(Debug, Clone)]
pub struct IndexedProvisioner {
    python: PathBuf,
    index: BTreeSet<String>,
}

impl IndexedProvisioner {
    pub fn new(python: impl Into<PathBuf>, index: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        Self { python: python.into(), index: index.into_iter().map(|p| package_name(p.as_ref())).collect() }
    }
}

impl Provisioner for IndexedProvisioner {
    fn provision(&self, dependencies: &[String]) -> Result<EnvRef, ProvisionError> {
        for dep in dependencies {
            let name = package_name(dep);
            if !self.index.contains(&name) {
                return Err(ProvisionError::Unresolvable { package: dep.clone(), detail: "not in the package index".into() });
            }
        }
        Ok(EnvRef { key: environment_key(dependencies), python: self.python.clone() })
    }
}

/// Creates one virtual environment per dependency set under `root`, layered
/// over the base interpreter's site packages, and installs the set with pip.
#[derive(Debug, Clone)]
pub struct VenvProvisioner {
    base_python: PathBuf,
    root: PathBuf,
    pip_args: Vec<String>,
}

impl VenvProvisioner {
    pub fn new(base_python: impl Into<PathBuf>, root: impl Into<PathBuf>) -> Self {
        Self { base_python: base_python.into(), root: root.into(), pip_args: Vec::new() }
    }

    /// Extra arguments for `pip install`, e.g. an index URL.
    pub fn with_pip_args(mut self, args: Vec<String>) -> Self {
        self.pip_args = args;
        self
    }

    fn run(cmd: &mut Command) -> Result<(), String> {
        let out = cmd.output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: String = stderr.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
            Err(format!("{}: {tail}", out.status))
        }
    }
}

impl Provisioner for VenvProvisioner {
    fn provision(&self, dependencies: &[String]) -> Result<EnvRef, ProvisionError> {
        let key = environment_key(dependencies);
        if key == "base" {
            return Ok(EnvRef { key, python: self.base_python.clone() });
        }
        let dir = self.root.join(&key);
        let python = dir.join("bin").join("python");
        let marker = dir.join(".complete");
        if marker.exists() {
            return Ok(EnvRef { key, python });
        }
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&self.root).map_err(|e| ProvisionError::Failed(format!("{}: {e}", self.root.display())))?;
        Self::run(Command::new(&self.base_python).args(["-m", "venv", "--system-site-packages"]).arg(&dir))
            .map_err(|e| ProvisionError::Failed(format!("venv creation: {e}")))?;
        let set: Vec<String> = normalized_set(dependencies).into_iter().collect();
        let install = Self::run(
            Command::new(&python)
                .args(["-m", "pip", "install", "--disable-pip-version-check", "--quiet"])
                .args(&self.pip_args)
                .args(&set),
        );
        if let Err(detail) = install {
            let _ = fs::remove_dir_all(&dir);
            return Err(ProvisionError::Unresolvable { package: set.join(" "), detail });
        }
        fs::write(&marker, set.join("\n")).map_err(|e| ProvisionError::Failed(e.to_string()))?;
        Ok(EnvRef { key, python })
    }
}

type Cell = Arc<OnceLock<Result<EnvRef, ProvisionError>>>;

/// Deduplicates concurrent and repeated provisioning of the same set; the
/// first caller builds, the rest wait for and share its result.
pub struct SingleFlight<P> {
    inner: P,
    cells: Mutex<HashMap<String, Cell>>,
}

impl<P: Provisioner> SingleFlight<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, cells: Mutex::new(HashMap::new()) }
    }
}

impl<P: Provisioner> Provisioner for SingleFlight<P> {
    fn provision(&self, dependencies: &[String]) -> Result<EnvRef, ProvisionError> {
        let key = environment_key(dependencies);
        let cell = self.cells.lock().expect("provision cache poisoned").entry(key).or_default().clone();
        cell.get_or_init(|| self.inner.provision(dependencies)).clone()
    }
}

/// The interpreter used when no other is configured.
pub fn default_python() -> PathBuf {
    for candidate in ["/usr/bin/python3", "/usr/local/bin/python3"] {
        if Path::new(candidate).exists() {
            return PathBuf::from(candidate);
        }
    }
    PathBuf::from("python3")
}
