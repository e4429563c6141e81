use std::collections::BTreeMap;
use std::time::Instant;

use pglr::{IterationTrace, QualityReport};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a run, plus what it measured.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub parameters: BTreeMap<String, Value>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<IterationTrace>,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            parameters: BTreeMap::new(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: Vec::new(),
            quality: None,
            trace: None,
        }
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("parameters serialize");
        self.parameters.insert(name.to_string(), value);
    }

    pub fn input(&mut self, name: &str, path: &std::path::Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &std::path::Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    /// Runs `f`, recording its wall-clock time under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
