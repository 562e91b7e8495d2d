//! Static validation of tool sources.
//!
//! A tool source is a Python module that declares a `__TOOL_META__` mapping,
//! `InputModel` and `OutputModel` classes and a `run` entrypoint. Validation
//! is purely textual: nothing from the source is executed on the host.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::pyliteral;
use crate::prompts::{tool_name_re, ToolRequest};
use crate::schema::property_names;

/// A validated tool: metadata, source and the I/O schemas enforced at the
/// sandbox boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolArtifact {
    pub name: String,
    pub description: String,
    pub dependencies: Vec<String>,
    pub source: String,
    pub input_schema: Value,
    pub output_schema: Value,
    /// Hex SHA-256 of `source`.
    pub digest: String,
}

pub fn source_digest(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactErrorKind {
    MissingMeta,
    MalformedMeta,
    NameMismatch,
    MissingInputModel,
    MissingOutputModel,
    MissingEntrypoint,
    SelfInstall,
    InvalidDependency,
    SchemaMismatch,
}

impl ArtifactErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactErrorKind::MissingMeta => "missing meta",
            ArtifactErrorKind::MalformedMeta => "malformed meta",
            ArtifactErrorKind::NameMismatch => "name mismatch",
            ArtifactErrorKind::MissingInputModel => "missing InputModel",
            ArtifactErrorKind::MissingOutputModel => "missing OutputModel",
            ArtifactErrorKind::MissingEntrypoint => "missing entrypoint",
            ArtifactErrorKind::SelfInstall => "self-install forbidden",
            ArtifactErrorKind::InvalidDependency => "invalid dependency",
            ArtifactErrorKind::SchemaMismatch => "schema mismatch",
        }
    }
}

impl fmt::Display for ArtifactErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {detail}")]
pub struct ArtifactError {
    pub kind: ArtifactErrorKind,
    pub detail: String,
}

impl ArtifactError {
    fn new(kind: ArtifactErrorKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

fn meta_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(&RE, r"(?m)^__TOOL_META__[ \t]*(?::[^=\n]*)?=[ \t]*")
}

fn entrypoint_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(&RE, r"(?m)^def[ \t]+run[ \t]*\(")
}

fn dependency_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(
        &RE,
        r"^[A-Za-z0-9]([A-Za-z0-9._-]*[A-Za-z0-9])?(\[[A-Za-z0-9_,.\- ]+\])?([ ]*(==|>=|<=|~=|!=|<|>)[ ]*[A-Za-z0-9.*+!]+)*$",
    )
}

/// Patterns that indicate a source installs packages at run time.
fn self_install_patterns() -> &'static [Regex] {
    static RES: OnceLock<Vec<Regex>> = OnceLock::new();
    RES.get_or_init(|| {
        [
            r#"\bpip3?\b["']?\s*,?\s*["']?install\b"#,
            r#"["']-m["']\s*,\s*["']pip["']"#,
            r"-m\s+pip\b",
            r"\bpip\s*\.\s*main\s*\(",
            r"\bpip\._internal\b",
            r"\bensurepip\b",
            r"\beasy_install\b",
            r#"\bconda\b["']?\s*,?\s*["']?install\b"#,
            r#"\buv\b["']?\s*,?\s*["']?pip\b"#,
        ]
        .iter()
        .map(|p| Regex::new(p).expect("valid regex"))
        .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolMeta {
    pub name: String,
    pub description: String,
    pub dependencies: Vec<String>,
}

/// Parses the `__TOOL_META__` literal.
pub fn parse_meta(source: &str) -> Result<ToolMeta, ArtifactError> {
    let found = meta_re()
        .find(source)
        .ok_or_else(|| ArtifactError::new(ArtifactErrorKind::MissingMeta, "no top-level `__TOOL_META__` assignment"))?;
    let value = pyliteral::parse_prefix(&source[found.end()..])
        .map_err(|e| ArtifactError::new(ArtifactErrorKind::MalformedMeta, format!("`__TOOL_META__` is not a literal: {e}")))?;
    let map = value
        .as_object()
        .ok_or_else(|| ArtifactError::new(ArtifactErrorKind::MalformedMeta, "`__TOOL_META__` must be a dict"))?;
    let text = |key: &str| -> Result<String, ArtifactError> {
        map.get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ArtifactError::new(ArtifactErrorKind::MalformedMeta, format!("`{key}` must be a string")))
    };
    let dependencies = match map.get("dependencies") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|d| {
                d.as_str().map(|s| s.trim().to_string()).ok_or_else(|| {
                    ArtifactError::new(ArtifactErrorKind::MalformedMeta, "`dependencies` must contain only strings")
                })
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(ArtifactError::new(ArtifactErrorKind::MalformedMeta, "`dependencies` must be a list")),
    };
    Ok(ToolMeta { name: text("name")?, description: text("description")?, dependencies })
}

/// One annotated field of a model class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelField {
    pub name: String,
    pub annotation: String,
    pub default: Option<String>,
}

impl ModelField {
    /// Pydantic semantics: a field without a default (or with a `Field(...)`
    /// that supplies none) is required, whatever its type.
    pub fn required(&self) -> bool {
        let Some(default) = self.default.as_deref() else { return true };
        let Some(args) = default.strip_prefix("Field(").or_else(|| default.strip_prefix("pydantic.Field(")) else {
            return false;
        };
        let args = args.trim_start();
        if args.starts_with("...") || args.starts_with(')') {
            return !args.contains("default_factory=") && !args.contains("default=");
        }
        if args.starts_with("default=") || args.starts_with("default_factory=") {
            return false;
        }
        // First positional argument is the default.
        let first = args.split([',', ')']).next().unwrap_or("").trim();
        if first.contains('=') {
            !(args.contains("default=") || args.contains("default_factory="))
        } else {
            false
        }
    }
}

fn split_top_level_eq(text: &str) -> (&str, Option<&str>) {
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    for (i, c) in text.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' => quote = Some(c),
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                '=' if depth == 0 => return (text[..i].trim(), Some(text[i + 1..].trim())),
                _ => {}
            },
        }
    }
    (text.trim(), None)
}

/// Annotated fields declared directly in the body of `class <name>(...)`.
/// Returns `None` when the class is absent.
pub fn model_fields(source: &str, class: &str) -> Option<Vec<ModelField>> {
    let header = Regex::new(&format!(r"(?m)^class[ \t]+{class}[ \t]*(\([^)]*\))?[ \t]*:[ \t]*(#.*)?$")).expect("valid regex");
    let start = header.find(source)?.end();
    let field_re = {
        static RE: OnceLock<Regex> = OnceLock::new();
        regex(&RE, r"^([A-Za-z_][A-Za-z0-9_]*)[ \t]*:[ \t]*(.+)$")
    };
    let mut indent: Option<usize> = None;
    let mut in_docstring: Option<&str> = None;
    let mut fields = Vec::new();
    for line in source[start..].lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let width = line.len() - line.trim_start().len();
        let base = *indent.get_or_insert(width);
        if width == 0 || width < base {
            break;
        }
        let body = line.trim();
        if let Some(delim) = in_docstring {
            if body.contains(delim) {
                in_docstring = None;
            }
            continue;
        }
        if width != base {
            continue;
        }
        if let Some(delim) = ["\"\"\"", "'''"].into_iter().find(|d| body.starts_with(d)) {
            if !body[3..].contains(delim) {
                in_docstring = Some(delim);
            }
            continue;
        }
        let Some(caps) = field_re.captures(body) else { continue };
        let name = caps[1].to_string();
        if name == "model_config" || name.starts_with("__") {
            continue;
        }
        let rest = caps[2].split(" #").next().unwrap_or_default();
        let (annotation, default) = split_top_level_eq(rest);
        fields.push(ModelField { name, annotation: annotation.to_string(), default: default.map(str::to_string) });
    }
    Some(fields)
}

fn strip_wrapper<'a>(text: &'a str, wrapper: &str) -> Option<&'a str> {
    text.strip_prefix(wrapper)?.strip_prefix('[')?.strip_suffix(']').map(str::trim)
}

/// JSON schema for a Python annotation. Unknown types map to `{}`.
pub fn annotation_schema(annotation: &str) -> Value {
    let a = annotation.trim();
    let a = a.strip_prefix("typing.").unwrap_or(a);
    if let Some(inner) = strip_wrapper(a, "Optional") {
        return nullable(annotation_schema(inner));
    }
    if let Some(inner) = strip_wrapper(a, "Annotated") {
        let (first, _) = inner.split_once(',').unwrap_or((inner, ""));
        return annotation_schema(first);
    }
    let parts: Vec<&str> = a.split('|').map(str::trim).collect();
    if parts.len() > 1 {
        let rest: Vec<&str> = parts.iter().copied().filter(|p| *p != "None").collect();
        if rest.len() == 1 && rest.len() < parts.len() {
            return nullable(annotation_schema(rest[0]));
        }
        return json!({});
    }
    for list in ["List", "list", "Sequence", "Tuple", "tuple", "Set", "set"] {
        if let Some(inner) = strip_wrapper(a, list) {
            let item = annotation_schema(inner.split(',').next().unwrap_or(""));
            if item.as_object().is_some_and(|o| o.is_empty()) {
                return json!({"type": "array"});
            }
            return json!({"type": "array", "items": item});
        }
    }
    if strip_wrapper(a, "Dict").is_some() || strip_wrapper(a, "dict").is_some() || strip_wrapper(a, "Mapping").is_some() {
        return json!({"type": "object"});
    }
    match a {
        "str" => json!({"type": "string"}),
        "int" => json!({"type": "integer"}),
        "float" => json!({"type": "number"}),
        "bool" => json!({"type": "boolean"}),
        "list" | "List" | "tuple" | "Tuple" | "set" => json!({"type": "array"}),
        "dict" | "Dict" => json!({"type": "object"}),
        _ => json!({}),
    }
}

fn nullable(schema: Value) -> Value {
    match schema.get("type").and_then(Value::as_str) {
        Some(t) => {
            let mut s = schema.clone();
            s["type"] = json!([t, "null"]);
            s
        }
        None => schema,
    }
}

/// Object schema derived from declared model fields.
pub fn schema_from_fields(fields: &[ModelField]) -> Value {
    let mut properties = Map::new();
    let mut required = Vec::new();
    for f in fields {
        properties.insert(f.name.clone(), annotation_schema(&f.annotation));
        if f.required() {
            required.push(Value::String(f.name.clone()));
        }
    }
    json!({"type": "object", "properties": properties, "required": required})
}

fn check_self_install(source: &str) -> Result<(), ArtifactError> {
    for pattern in self_install_patterns() {
        if let Some(m) = pattern.find(source) {
            let line = source[..m.start()].matches('\n').count() + 1;
            return Err(ArtifactError::new(
                ArtifactErrorKind::SelfInstall,
                format!("line {line}: `{}`; declare packages in `dependencies` instead", m.as_str()),
            ));
        }
    }
    Ok(())
}

struct Structure {
    meta: ToolMeta,
    input_fields: Vec<ModelField>,
    output_fields: Vec<ModelField>,
}

fn check_structure(source: &str, expected_name: Option<&str>) -> Result<Structure, ArtifactError> {
    let meta = parse_meta(source)?;
    if let Some(expected) = expected_name {
        if meta.name != expected {
            return Err(ArtifactError::new(
                ArtifactErrorKind::NameMismatch,
                format!("`__TOOL_META__['name']` is `{}`, expected `{expected}`", meta.name),
            ));
        }
    } else if !tool_name_re().is_match(&meta.name) {
        return Err(ArtifactError::new(
            ArtifactErrorKind::MalformedMeta,
            format!("name `{}` is not snake_case verb_target", meta.name),
        ));
    }
    let input_fields = model_fields(source, "InputModel")
        .ok_or_else(|| ArtifactError::new(ArtifactErrorKind::MissingInputModel, "no `class InputModel` declaration"))?;
    let output_fields = model_fields(source, "OutputModel")
        .ok_or_else(|| ArtifactError::new(ArtifactErrorKind::MissingOutputModel, "no `class OutputModel` declaration"))?;
    if !entrypoint_re().is_match(source) {
        return Err(ArtifactError::new(ArtifactErrorKind::MissingEntrypoint, "no top-level `def run(` entrypoint"));
    }
    check_self_install(source)?;
    for dep in &meta.dependencies {
        if !dependency_re().is_match(dep) {
            return Err(ArtifactError::new(ArtifactErrorKind::InvalidDependency, format!("`{dep}` is not a package requirement")));
        }
    }
    Ok(Structure { meta, input_fields, output_fields })
}

fn names(fields: &[ModelField]) -> BTreeMap<&str, &ModelField> {
    fields.iter().map(|f| (f.name.as_str(), f)).collect()
}

fn cross_check(request: &ToolRequest, s: &Structure) -> Result<(), ArtifactError> {
    let input = names(&s.input_fields);
    let requested_inputs = property_names(&request.input_schema);
    for p in &requested_inputs {
        if !input.contains_key(p.as_str()) {
            return Err(ArtifactError::new(ArtifactErrorKind::SchemaMismatch, format!("InputModel lacks requested field `{p}`")));
        }
    }
    for f in &s.input_fields {
        if f.required() && !requested_inputs.contains(&f.name) {
            return Err(ArtifactError::new(
                ArtifactErrorKind::SchemaMismatch,
                format!("InputModel requires `{}`, which the request does not declare", f.name),
            ));
        }
    }
    let output = names(&s.output_fields);
    let required_outputs = request.output_schema.get("required").and_then(Value::as_array).cloned().unwrap_or_default();
    for p in required_outputs.iter().filter_map(Value::as_str) {
        if !output.contains_key(p) {
            return Err(ArtifactError::new(ArtifactErrorKind::SchemaMismatch, format!("OutputModel lacks required field `{p}`")));
        }
    }
    Ok(())
}

/// Validates a synthesized source against the request that produced it.
/// The request's schemas are authoritative and become the artifact's schemas.
pub fn validate_artifact(source: &str, request: &ToolRequest) -> Result<ToolArtifact, ArtifactError> {
    let s = check_structure(source, Some(&request.name))?;
    cross_check(request, &s)?;
    Ok(ToolArtifact {
        name: s.meta.name,
        description: s.meta.description,
        dependencies: s.meta.dependencies,
        source: source.to_string(),
        input_schema: request.input_schema.clone(),
        output_schema: request.output_schema.clone(),
        digest: source_digest(source),
    })
}

/// Validates a source with no originating request (merged or imported
/// tools). Schemas are derived from the declared model fields.
pub fn validate_source(source: &str, expected_name: Option<&str>) -> Result<ToolArtifact, ArtifactError> {
    let s = check_structure(source, expected_name)?;
    Ok(ToolArtifact {
        input_schema: schema_from_fields(&s.input_fields),
        output_schema: schema_from_fields(&s.output_fields),
        name: s.meta.name,
        description: s.meta.description,
        dependencies: s.meta.dependencies,
        source: source.to_string(),
        digest: source_digest(source),
    })
}
