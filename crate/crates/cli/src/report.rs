//! Test entries collected into `report.json`.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestEntry {
    pub name: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    pub parameters: Map<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TestEntry {
    pub fn new(name: &str, passed: bool) -> Self {
        Self {
            name: name.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            statistic: None,
            p_value: None,
            z: None,
            parameters: Map::new(),
            note: None,
        }
    }

    pub fn not_applicable(name: &str, reason: impl Into<String>) -> Self {
        Self {
            status: Status::NotApplicable,
            note: Some(reason.into()),
            ..Self::new(name, false)
        }
    }

    /// A test that could not produce a statistic because of a statistical anomaly.
    pub fn failed_with(name: &str, error: &qndsim::Error) -> Self {
        Self {
            note: Some(error.to_string()),
            ..Self::new(name, false)
        }
    }

    pub fn statistic(mut self, s: f64) -> Self {
        self.statistic = Some(s);
        self
    }

    pub fn p_value(mut self, p: f64) -> Self {
        self.p_value = Some(p);
        self
    }

    pub fn z(mut self, z: f64) -> Self {
        self.z = Some(z);
        self
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters.insert(key.into(), to_value(value));
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }
}

/// Serializes to JSON; non-finite floats become `null`.
pub fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub model_hash: String,
    pub config: RunConfig,
    pub tests: Vec<TestEntry>,
    pub passed: bool,
}

impl Report {
    pub fn new(model_hash: String, config: RunConfig, tests: Vec<TestEntry>) -> Self {
        let passed = !tests.iter().any(TestEntry::failed);
        Self {
            model_hash,
            config,
            tests,
            passed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_and_serialization() {
        let e = TestEntry::new("born", true).statistic(1.5).p_value(0.2).param("N", 10);
        let v = to_value(&e);
        assert_eq!(v["status"], "pass");
        assert_eq!(v["parameters"]["N"], 10);
        assert!(v.get("z").is_none());
        let na = to_value(TestEntry::not_applicable("rate", "no"));
        assert_eq!(na["status"], "not_applicable");
        assert_eq!(to_value(f64::INFINITY), Value::Null);
    }
}
