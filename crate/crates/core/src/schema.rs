//! Tool I/O schemas: shape checks for requested schemas and instance
//! validation for payloads crossing the sandbox boundary.

use serde_json::Value;

/// Accepts `{"type": "object", "properties": {...}, "required": [...]}` where
/// `required` is optional and names only declared properties.
pub fn check_object_schema(schema: &Value) -> Result<(), String> {
    let obj = schema.as_object().ok_or("must be a JSON object")?;
    if obj.get("type").and_then(Value::as_str) != Some("object") {
        return Err("must declare \"type\": \"object\"".into());
    }
    let properties = obj.get("properties").and_then(Value::as_object).ok_or("must have a `properties` map")?;
    if let Some(required) = obj.get("required") {
        let names = required.as_array().ok_or("`required` must be a list")?;
        for name in names {
            let name = name.as_str().ok_or("`required` must contain only strings")?;
            if !properties.contains_key(name) {
                return Err(format!("requires undeclared property `{name}`"));
            }
        }
    }
    if !jsonschema::meta::is_valid(schema) {
        return Err("is not a valid JSON Schema".into());
    }
    Ok(())
}

/// Names of the declared properties, in schema order.
pub fn property_names(schema: &Value) -> Vec<String> {
    schema
        .get("properties")
        .and_then(Value::as_object)
        .map(|p| p.keys().cloned().collect())
        .unwrap_or_default()
}

/// Validates `instance` against `schema`, returning every violation.
pub fn validate_instance(schema: &Value, instance: &Value) -> Result<(), Vec<String>> {
    let validator = jsonschema::validator_for(schema).map_err(|e| vec![format!("invalid schema: {e}")])?;
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| {
            let path = e.instance_path.to_string();
            if path.is_empty() {
                e.to_string()
            } else {
                format!("{path}: {e}")
            }
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
