//! Versioned, immutable snapshots of the global tool library.
//!
//! A snapshot is never mutated; every update returns a new snapshot. Merged
//! members are retired rather than deleted: their names stay resolvable
//! through the alias map and their records (with usage stats) are kept in
//! the retired list so per-tool accounting survives consolidation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::ToolSlot;
use crate::sandbox::{source_digest, ToolArtifact};

/// Major version written by [`RegistrySnapshot::persist`].
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthesized { step: u64, query_id: String },
    Merged { step: u64, member_names: Vec<String> },
    Imported { origin: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolStats {
    pub invocations: u64,
    pub successes: u64,
    pub tool_output_tokens: u64,
}

impl ToolStats {
    pub fn add(&mut self, other: &ToolStats) {
        self.invocations += other.invocations;
        self.successes += other.successes;
        self.tool_output_tokens += other.tool_output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub name: String,
    pub description: String,
    pub input_schema: Value,
    pub output_schema: Value,
    pub dependencies: Vec<String>,
    pub source: String,
    pub digest: String,
    pub provenance: Provenance,
    pub stats: ToolStats,
}

impl ToolRecord {
    pub fn from_artifact(artifact: &ToolArtifact, provenance: Provenance) -> Self {
        Self {
            name: artifact.name.clone(),
            description: artifact.description.clone(),
            input_schema: artifact.input_schema.clone(),
            output_schema: artifact.output_schema.clone(),
            dependencies: artifact.dependencies.clone(),
            source: artifact.source.clone(),
            digest: artifact.digest.clone(),
            provenance,
            stats: ToolStats::default(),
        }
    }

    pub fn artifact(&self) -> ToolArtifact {
        ToolArtifact {
            name: self.name.clone(),
            description: self.description.clone(),
            dependencies: self.dependencies.clone(),
            source: self.source.clone(),
            input_schema: self.input_schema.clone(),
            output_schema: self.output_schema.clone(),
            digest: self.digest.clone(),
        }
    }

    pub fn slot(&self) -> ToolSlot {
        ToolSlot::new(&self.name, &self.description, &self.input_schema)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("tool `{0}` already exists in the registry")]
    Collision(String),
    #[error("tool `{0}` appears twice in one commit")]
    DuplicateNew(String),
    #[error("alias `{from}` points to `{to}`, which is not a live tool")]
    DanglingAlias { from: String, to: String },
    #[error("unknown tool `{0}`")]
    Unknown(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt registry: {0}")]
    Corrupt(String),
    #[error("unsupported registry format version {0}")]
    Version(String),
}

/// A lookup hit. `aliased` is set when the name was retired by a merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved<'a> {
    pub record: &'a ToolRecord,
    pub aliased: bool,
}

/// Everything a barrier commit adds to the previous snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommitDelta {
    pub new_tools: Vec<ToolRecord>,
    /// Retired name to surviving name.
    pub aliases: BTreeMap<String, String>,
    /// Candidates that never entered the registry but were merged away;
    /// kept so their usage stays attributable.
    pub retired_candidates: Vec<ToolRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    step: u64,
    records: BTreeMap<String, ToolRecord>,
    alias_map: BTreeMap<String, String>,
    retired: Vec<ToolRecord>,
}

impl RegistrySnapshot {
    /// The zero-start snapshot.
    pub fn empty() -> Self {
        Self::default()
    }

    /// A step-0 snapshot from records, e.g. a seeded library.
    pub fn from_records(records: Vec<ToolRecord>) -> Result<Self, RegistryError> {
        let mut map = BTreeMap::new();
        for r in records {
            let name = r.name.clone();
            if map.insert(name.clone(), r).is_some() {
                return Err(RegistryError::DuplicateNew(name));
            }
        }
        Ok(Self { records: map, ..Self::default() })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ToolRecord> {
        self.records.values()
    }

    pub fn names(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&ToolRecord> {
        self.records.get(name)
    }

    pub fn alias_map(&self) -> &BTreeMap<String, String> {
        &self.alias_map
    }

    pub fn retired(&self) -> &[ToolRecord] {
        &self.retired
    }

    /// Listing entries in lexicographic name order.
    pub fn listing(&self) -> Vec<ToolSlot> {
        self.records.values().map(ToolRecord::slot).collect()
    }

    /// Hex SHA-256 over the serialized listing.
    pub fn listing_digest(&self) -> String {
        listing_digest(&self.listing())
    }

    /// Exact, case-sensitive lookup falling back to the alias map.
    pub fn resolve(&self, name: &str) -> Result<Resolved<'_>, RegistryError> {
        if let Some(record) = self.records.get(name) {
            return Ok(Resolved { record, aliased: false });
        }
        self.alias_map
            .get(name)
            .and_then(|target| self.records.get(target))
            .map(|record| Resolved { record, aliased: true })
            .ok_or_else(|| RegistryError::Unknown(name.to_string()))
    }

    /// Usage summed over live and retired records.
    pub fn total_stats(&self) -> ToolStats {
        let mut total = ToolStats::default();
        for r in self.records.values().chain(&self.retired) {
            total.add(&r.stats);
        }
        total
    }

    /// Same step, with per-tool usage added. Unknown names are ignored.
    pub fn with_stats_delta(&self, deltas: &BTreeMap<String, ToolStats>) -> Self {
        let mut next = self.clone();
        for (name, delta) in deltas {
            if let Some(r) = next.records.get_mut(name) {
                r.stats.add(delta);
            }
        }
        next
    }

    /// `T_t = P_t ∪ T_{t-1}` with retirement: the next snapshot at `step + 1`.
    pub fn commit_union(&self, new_tools: Vec<ToolRecord>, aliases: BTreeMap<String, String>) -> Result<Self, RegistryError> {
        self.commit(CommitDelta { new_tools, aliases, retired_candidates: Vec::new() })
    }

    pub fn commit(&self, delta: CommitDelta) -> Result<Self, RegistryError> {
        let mut seen = BTreeSet::new();
        for t in &delta.new_tools {
            if !seen.insert(t.name.as_str()) {
                return Err(RegistryError::DuplicateNew(t.name.clone()));
            }
        }
        let mut records = self.records.clone();
        let mut retired = self.retired.clone();
        for from in delta.aliases.keys() {
            if let Some(r) = records.remove(from) {
                retired.push(r);
            }
        }
        retired.extend(delta.retired_candidates);
        for t in delta.new_tools {
            if records.contains_key(&t.name) {
                return Err(RegistryError::Collision(t.name));
            }
            records.insert(t.name.clone(), t);
        }
        let mut alias_map = self.alias_map.clone();
        for (from, to) in delta.aliases {
            if !records.contains_key(&to) {
                return Err(RegistryError::DanglingAlias { from, to });
            }
            alias_map.insert(from, to);
        }
        // A live name always resolves to itself.
        alias_map.retain(|from, _| !records.contains_key(from));
        loop {
            let mut changed = false;
            let snapshot = alias_map.clone();
            for target in alias_map.values_mut() {
                if !records.contains_key(target) {
                    if let Some(next) = snapshot.get(target.as_str()) {
                        *target = next.clone();
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if let Some((from, to)) = alias_map.iter().find(|(_, to)| !records.contains_key(*to)) {
            return Err(RegistryError::DanglingAlias { from: from.clone(), to: to.clone() });
        }
        Ok(Self { step: self.step + 1, records, alias_map, retired })
    }

    /// Writes `manifest.json` plus one source file per tool under `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), RegistryError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RegistryError::Io { path, source }
        };
        if dir.exists() {
            let is_registry = dir.join("manifest.json").exists();
            let is_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_none();
            if !is_registry && !is_empty {
                return Err(RegistryError::Corrupt(format!("{} exists and is not a registry directory", dir.display())));
            }
            for sub in ["tools", "retired"] {
                let p = dir.join(sub);
                if p.exists() {
                    fs::remove_dir_all(&p).map_err(io_err(&p))?;
                }
            }
        }
        for sub in ["tools", "retired"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let mut live = Vec::new();
        for r in self.records.values() {
            let rel = format!("tools/{}.py", r.name);
            fs::write(dir.join(&rel), &r.source).map_err(io_err(&dir.join(&rel)))?;
            live.push(record_entry(r, &rel));
        }
        let mut retired = Vec::new();
        for (i, r) in self.retired.iter().enumerate() {
            let rel = format!("retired/{i:04}_{}.py", r.name);
            fs::write(dir.join(&rel), &r.source).map_err(io_err(&dir.join(&rel)))?;
            retired.push(record_entry(r, &rel));
        }
        let snapshot = json!({
            "step": self.step,
            "records": live,
            "alias_map": self.alias_map,
            "retired": retired,
        });
        let manifest = json!({
            "format_version": FORMAT_VERSION,
            "content_digest": hex::encode(Sha256::digest(snapshot.to_string().as_bytes())),
            "snapshot": snapshot,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| RegistryError::Corrupt(e.to_string()))?;
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, dir.join("manifest.json")).map_err(io_err(&dir.join("manifest.json")))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RegistryError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| RegistryError::Io { path: path.clone(), source })?;
        let manifest: Value =
            serde_json::from_str(&text).map_err(|e| RegistryError::Corrupt(format!("{}: {e}", path.display())))?;
        let version = manifest.get("format_version").and_then(Value::as_str).unwrap_or("");
        if version.split('.').next() != FORMAT_VERSION.split('.').next() {
            return Err(RegistryError::Version(version.to_string()));
        }
        let snapshot = manifest.get("snapshot").ok_or_else(|| RegistryError::Corrupt("manifest has no snapshot".into()))?;
        let expected = manifest.get("content_digest").and_then(Value::as_str).unwrap_or("");
        let actual = hex::encode(Sha256::digest(snapshot.to_string().as_bytes()));
        if expected != actual {
            return Err(RegistryError::Corrupt(format!("manifest digest mismatch: recorded {expected}, computed {actual}")));
        }
        let parsed: PersistedSnapshot =
            serde_json::from_value(snapshot.clone()).map_err(|e| RegistryError::Corrupt(e.to_string()))?;
        let mut records = BTreeMap::new();
        for entry in parsed.records {
            let r = entry.into_record(dir)?;
            records.insert(r.name.clone(), r);
        }
        let retired = parsed.retired.into_iter().map(|e| e.into_record(dir)).collect::<Result<_, _>>()?;
        Ok(Self { step: parsed.step, records, alias_map: parsed.alias_map, retired })
    }
}

pub fn listing_digest(listing: &[ToolSlot]) -> String {
    let text = serde_json::to_string(listing).expect("listing serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn record_entry(r: &ToolRecord, source_file: &str) -> Value {
    json!({
        "name": r.name,
        "description": r.description,
        "input_schema": r.input_schema,
        "output_schema": r.output_schema,
        "dependencies": r.dependencies,
        "digest": r.digest,
        "provenance": r.provenance,
        "stats": r.stats,
        "source_file": source_file,
    })
}

#[derive(Deserialize)]
struct PersistedSnapshot {
    step: u64,
    records: Vec<PersistedRecord>,
    alias_map: BTreeMap<String, String>,
    retired: Vec<PersistedRecord>,
}

#[derive(Deserialize)]
struct PersistedRecord {
    name: String,
    description: String,
    input_schema: Value,
    output_schema: Value,
    dependencies: Vec<String>,
    digest: String,
    provenance: Provenance,
    stats: ToolStats,
    source_file: String,
}

impl PersistedRecord {
    fn into_record(self, dir: &Path) -> Result<ToolRecord, RegistryError> {
        if self.source_file.contains("..") || Path::new(&self.source_file).is_absolute() {
            return Err(RegistryError::Corrupt(format!("source path `{}` escapes the registry", self.source_file)));
        }
        let path = dir.join(&self.source_file);
        let source = fs::read_to_string(&path).map_err(|source| RegistryError::Io { path: path.clone(), source })?;
        let actual = source_digest(&source);
        if actual != self.digest {
            return Err(RegistryError::Corrupt(format!(
                "digest mismatch for `{}`: recorded {}, computed {actual}",
                self.name, self.digest
            )));
        }
        Ok(ToolRecord {
            name: self.name,
            description: self.description,
            input_schema: self.input_schema,
            output_schema: self.output_schema,
            dependencies: self.dependencies,
            source,
            digest: self.digest,
            provenance: self.provenance,
            stats: self.stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str) -> ToolRecord {
        let source = format!("# {name}\n");
        ToolRecord {
            name: name.into(),
            description: format!("does {name}"),
            input_schema: json!({"type":"object","properties":{"q":{"type":"string"}}}),
            output_schema: json!({"type":"object","properties":{}}),
            dependencies: vec![],
            digest: source_digest(&source),
            source,
            provenance: Provenance::Synthesized { step: 0, query_id: "q0001".into() },
            stats: ToolStats::default(),
        }
    }

    #[test]
    fn empty_union_only_advances_step() {
        let prev = RegistrySnapshot::from_records(vec![record("a_tool")]).unwrap();
        let next = prev.commit_union(vec![], BTreeMap::new()).unwrap();
        assert_eq!(next.names(), ["a_tool"]);
        assert_eq!(next.step(), prev.step() + 1);
    }

    #[test]
    fn disjoint_union_and_collision() {
        let prev = RegistrySnapshot::from_records(vec![record("a_tool")]).unwrap();
        assert_eq!(prev.commit_union(vec![record("b_tool")], BTreeMap::new()).unwrap().names(), ["a_tool", "b_tool"]);
        let err = prev.commit_union(vec![record("a_tool")], BTreeMap::new()).unwrap_err();
        assert!(matches!(err, RegistryError::Collision(n) if n == "a_tool"));
        let err = prev.commit_union(vec![record("c_tool"), record("c_tool")], BTreeMap::new()).unwrap_err();
        assert!(matches!(err, RegistryError::DuplicateNew(_)));
    }

    #[test]
    fn listing_is_lexicographic() {
        let s = RegistrySnapshot::from_records(vec![record("web_search"), record("read_text_file")]).unwrap();
        let names: Vec<String> = s.listing().into_iter().map(|t| t.name).collect();
        assert_eq!(names, ["read_text_file", "web_search"]);
        assert!(RegistrySnapshot::empty().listing().is_empty());
    }

    #[test]
    fn resolve_is_case_sensitive_and_follows_aliases() {
        let s = RegistrySnapshot::from_records(vec![record("web_search"), record("search_web")]).unwrap();
        assert!(!s.resolve("web_search").unwrap().aliased);
        assert!(matches!(s.resolve("Web_Search"), Err(RegistryError::Unknown(_))));
        let merged = s
            .commit_union(
                vec![record("search_online")],
                BTreeMap::from([("web_search".into(), "search_online".into()), ("search_web".into(), "search_online".into())]),
            )
            .unwrap();
        let hit = merged.resolve("web_search").unwrap();
        assert!(hit.aliased);
        assert_eq!(hit.record.name, "search_online");
        assert_eq!(merged.retired().len(), 2);
        assert_eq!(merged.len(), 1);
    }

    #[test]
    fn alias_chains_are_compressed_and_self_aliases_dropped() {
        let s = RegistrySnapshot::from_records(vec![record("a_one"), record("b_two")]).unwrap();
        let s1 = s.commit_union(vec![record("c_three")], BTreeMap::from([("a_one".into(), "c_three".into())])).unwrap();
        let s2 = s1
            .commit_union(
                vec![record("b_two_v2"), record("c_three_x")],
                BTreeMap::from([("c_three".into(), "c_three_x".into())]),
            )
            .unwrap();
        assert_eq!(s2.alias_map()["a_one"], "c_three_x");
        // Master reusing a member's name: the member retires, the name stays live.
        let s3 = s2.commit_union(vec![record("b_two")], BTreeMap::from([("b_two".into(), "b_two".into())]));
        let s3 = s3.unwrap();
        assert!(!s3.alias_map().contains_key("b_two"));
        assert!(!s3.resolve("b_two").unwrap().aliased);
    }

    #[test]
    fn dangling_alias_is_rejected() {
        let s = RegistrySnapshot::from_records(vec![record("a_one")]).unwrap();
        let err = s.commit_union(vec![], BTreeMap::from([("a_one".into(), "nowhere_x".into())])).unwrap_err();
        assert!(matches!(err, RegistryError::DanglingAlias { .. }));
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = record("a_one");
        a.stats = ToolStats { invocations: 5, successes: 4, tool_output_tokens: 90 };
        let s = RegistrySnapshot::from_records(vec![a, record("b_two"), record("c_three")])
            .unwrap()
            .commit_union(vec![record("d_four")], BTreeMap::from([("b_two".into(), "d_four".into())]))
            .unwrap();
        s.persist(dir.path()).unwrap();
        let loaded = RegistrySnapshot::load(dir.path()).unwrap();
        assert_eq!(loaded, s);
        assert_eq!(serde_json::to_string(&loaded.listing()).unwrap(), serde_json::to_string(&s.listing()).unwrap());

        let empty = tempfile::tempdir().unwrap();
        RegistrySnapshot::empty().persist(empty.path()).unwrap();
        assert_eq!(RegistrySnapshot::load(empty.path()).unwrap(), RegistrySnapshot::empty());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let s = RegistrySnapshot::from_records(vec![record("a_one")]).unwrap();
        s.persist(dir.path()).unwrap();
        fs::write(dir.path().join("tools/a_one.py"), "# tampered\n").unwrap();
        let err = RegistrySnapshot::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"), "{err}");

        s.persist(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        fs::write(dir.path().join("manifest.json"), &manifest[..manifest.len() / 2]).unwrap();
        assert!(matches!(RegistrySnapshot::load(dir.path()), Err(RegistryError::Corrupt(_))));

        s.persist(dir.path()).unwrap();
        let bumped = fs::read_to_string(dir.path().join("manifest.json")).unwrap().replace("\"1.0\"", "\"2.0\"");
        fs::write(dir.path().join("manifest.json"), bumped).unwrap();
        assert!(matches!(RegistrySnapshot::load(dir.path()), Err(RegistryError::Version(_))));
    }

    #[test]
    fn persist_refuses_foreign_directories() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "keep me").unwrap();
        assert!(RegistrySnapshot::empty().persist(dir.path()).is_err());
    }
}
