//! Declarative steering workflows: a flat list of steps run strictly in
//! order, stopping at the first failure.
//!
//! ```json
//! {"steps": [
//!   {"kind": "invoke", "object": "u200.microscope", "method": "start_scan",
//!    "params": {"width": 64, "height": 64, "dwell_time_us": 100}, "save_as": "scan"},
//!   {"kind": "wait_until", "object": "u200.microscope", "method": "scan_status",
//!    "expect": {"state": "Idle"}, "poll_ms": 50, "deadline_ms": 30000},
//!   {"kind": "sync", "source": "127.0.0.1:9200", "dest": "mirror"},
//!   {"kind": "assert", "dest": "mirror/${scan.scan_id}.icem"}
//! ]}
//! ```
//!
//! Strings in `params`, `source` and `dest` may reference earlier results
//! saved with `save_as`, as `${name}` or `${name.field}`.

use std::collections::HashMap;
use std::num::NonZeroU64;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use crate::client::Proxy;
use crate::datachannel::SyncClient;
use crate::registry::RegistryClient;
use crate::wire::Params;

fn default_poll_ms() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkflowStep {
    Invoke {
        object: String,
        method: String,
        #[serde(default)]
        params: Params,
        #[serde(default)]
        save_as: Option<String>,
    },
    WaitUntil {
        object: String,
        method: String,
        #[serde(default)]
        params: Params,
        expect: Value,
        #[serde(default = "default_poll_ms")]
        poll_ms: u64,
        deadline_ms: NonZeroU64,
    },
    /// Checks `expect` against a fresh call (when `method` is given) or the
    /// previous invoke result, and/or that the file `dest` exists.
    Assert {
        #[serde(default)]
        object: Option<String>,
        #[serde(default)]
        method: Option<String>,
        #[serde(default)]
        params: Params,
        #[serde(default)]
        expect: Option<Value>,
        #[serde(default)]
        dest: Option<String>,
    },
    Sync {
        source: String,
        dest: String,
    },
    Sleep {
        duration_ms: u64,
    },
}

impl WorkflowStep {
    pub fn kind(&self) -> &'static str {
        match self {
            WorkflowStep::Invoke { .. } => "invoke",
            WorkflowStep::WaitUntil { .. } => "wait_until",
            WorkflowStep::Assert { .. } => "assert",
            WorkflowStep::Sync { .. } => "sync",
            WorkflowStep::Sleep { .. } => "sleep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Workflow {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub steps: Vec<WorkflowStep>,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error("{0}")]
    Parse(String),
    #[error("step {step}: {message}")]
    Invalid { step: usize, message: String },
    #[error("reading workflow: {0}")]
    Io(#[from] std::io::Error),
}

impl Workflow {
    /// Parses a JSON document; errors carry a line number.
    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawWorkflow<'a> {
            #[serde(default)]
            name: Option<String>,
            #[serde(default, borrow)]
            steps: Vec<&'a RawValue>,
        }

        let raw: RawWorkflow = serde_json::from_str(text).map_err(|e| {
            WorkflowError::Parse(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        // steps are parsed one by one: a tagged enum loses the position of its own errors
        let mut steps = Vec::with_capacity(raw.steps.len());
        for (i, step) in raw.steps.iter().enumerate() {
            let src = step.get();
            let step = serde_json::from_str(src).map_err(|e| {
                let offset = src.as_ptr() as usize - text.as_ptr() as usize;
                let line = text[..offset].matches('\n').count() + e.line().max(1);
                WorkflowError::Parse(format!("line {line}: step {i}: {}", strip_position(&e)))
            })?;
            steps.push(step);
        }
        let wf = Workflow {
            name: raw.name,
            steps,
        };
        wf.check()?;
        Ok(wf)
    }

    /// Parses a TOML document (`[[steps]]` tables).
    pub fn from_toml(text: &str) -> Result<Self, WorkflowError> {
        let wf: Workflow = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}: ")
                })
                .unwrap_or_default();
            WorkflowError::Parse(format!("{loc}{}", e.message()))
        })?;
        wf.check()?;
        Ok(wf)
    }

    /// Reads `.toml` files as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, WorkflowError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    fn check(&self) -> Result<(), WorkflowError> {
        for (i, step) in self.steps.iter().enumerate() {
            let invalid = |m: &str| WorkflowError::Invalid {
                step: i,
                message: m.to_owned(),
            };
            match step {
                WorkflowStep::Assert {
                    object,
                    method,
                    expect,
                    dest,
                    ..
                } => {
                    if method.is_some() && object.is_none() {
                        return Err(invalid("assert with a method needs an object"));
                    }
                    if expect.is_none() && dest.is_none() {
                        return Err(invalid("assert needs `expect` or `dest`"));
                    }
                    if method.is_some() && expect.is_none() {
                        return Err(invalid("assert with a method needs `expect`"));
                    }
                }
                WorkflowStep::WaitUntil { poll_ms: 0, .. } => {
                    return Err(invalid("poll_ms must be positive"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.rfind(" at line ") {
        Some(cut) => msg[..cut].to_owned(),
        None => msg,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub kind: String,
    pub status: StepStatus,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub status: StepStatus,
    pub duration_ms: u64,
    pub steps: Vec<StepReport>,
}

impl WorkflowReport {
    pub fn is_ok(&self) -> bool {
        self.status == StepStatus::Ok
    }
}

/// True when every field of `expected` is present and equal in `actual`.
/// Objects match as subsets, recursively; numbers compare numerically.
pub fn matches_expectation(expected: &Value, actual: &Value) -> bool {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => e
            .iter()
            .all(|(k, ev)| a.get(k).is_some_and(|av| matches_expectation(ev, av))),
        (Value::Number(e), Value::Number(a)) => e.as_f64() == a.as_f64(),
        (Value::Array(e), Value::Array(a)) => {
            e.len() == a.len() && e.iter().zip(a).all(|(x, y)| matches_expectation(x, y))
        }
        (e, a) => e == a,
    }
}

/// Replaces `${name}` / `${name.field}` references using saved results.
fn substitute(text: &str, vars: &HashMap<String, Value>) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let end = tail
            .find('}')
            .ok_or_else(|| format!("unterminated reference in {text:?}"))?;
        let path = &tail[..end];
        let mut parts = path.split('.');
        let root = parts.next().unwrap_or_default();
        let mut value = vars
            .get(root)
            .ok_or_else(|| format!("unknown variable {root:?}"))?;
        for field in parts {
            value = value
                .get(field)
                .ok_or_else(|| format!("variable {path:?} has no field {field:?}"))?;
        }
        match value {
            Value::String(s) => out.push_str(s),
            other => out.push_str(&other.to_string()),
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn substitute_value(v: &Value, vars: &HashMap<String, Value>) -> Result<Value, String> {
    Ok(match v {
        Value::String(s) => Value::String(substitute(s, vars)?),
        Value::Array(a) => Value::Array(
            a.iter()
                .map(|x| substitute_value(x, vars))
                .collect::<Result<_, _>>()?,
        ),
        Value::Object(m) => Value::Object(
            m.iter()
                .map(|(k, x)| Ok((k.clone(), substitute_value(x, vars)?)))
                .collect::<Result<_, String>>()?,
        ),
        other => other.clone(),
    })
}

fn substitute_params(p: &Params, vars: &HashMap<String, Value>) -> Result<Params, String> {
    match substitute_value(&Value::Object(p.clone()), vars)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!(),
    }
}

/// Executes workflows against a registry-resolved ecosystem.
pub struct WorkflowRunner {
    registry: RegistryClient,
    principal: String,
    timeout: Duration,
    proxies: HashMap<String, Proxy>,
    vars: HashMap<String, Value>,
    last_result: Option<Value>,
}

impl WorkflowRunner {
    pub fn new(registry: RegistryClient, principal: impl Into<String>) -> Self {
        WorkflowRunner {
            registry,
            principal: principal.into(),
            timeout: crate::client::DEFAULT_TIMEOUT,
            proxies: HashMap::new(),
            vars: HashMap::new(),
            last_result: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    async fn call(&mut self, object: &str, method: &str, params: &Params) -> Result<Value, String> {
        let params = substitute_params(params, &self.vars)?;
        let proxy = self.proxies.entry(object.to_owned()).or_insert_with(|| {
            Proxy::new(self.registry.clone(), object, self.principal.clone())
                .with_timeout(self.timeout)
        });
        proxy
            .invoke(method, params)
            .await
            .map_err(|e| e.to_string())
    }

    async fn step(&mut self, step: &WorkflowStep) -> Result<Value, String> {
        match step {
            WorkflowStep::Invoke {
                object,
                method,
                params,
                save_as,
            } => {
                let v = self.call(object, method, params).await?;
                if let Some(name) = save_as {
                    self.vars.insert(name.clone(), v.clone());
                }
                self.last_result = Some(v.clone());
                Ok(v)
            }
            WorkflowStep::WaitUntil {
                object,
                method,
                params,
                expect,
                poll_ms,
                deadline_ms,
            } => {
                let deadline = Instant::now() + Duration::from_millis(deadline_ms.get());
                loop {
                    let v = self.call(object, method, params).await?;
                    if matches_expectation(expect, &v) {
                        return Ok(v);
                    }
                    if Instant::now() >= deadline {
                        return Err(format!(
                            "deadline of {deadline_ms} ms passed; last result {v}"
                        ));
                    }
                    tokio::time::sleep(Duration::from_millis(*poll_ms)).await;
                }
            }
            WorkflowStep::Assert {
                object,
                method,
                params,
                expect,
                dest,
            } => {
                let mut evidence = serde_json::Map::new();
                if let Some(expect) = expect {
                    let actual = match (object, method) {
                        (Some(o), Some(m)) => self.call(o, m, params).await?,
                        _ => self
                            .last_result
                            .clone()
                            .ok_or("assert has no preceding invoke result")?,
                    };
                    if !matches_expectation(expect, &actual) {
                        return Err(format!("expected {expect}, got {actual}"));
                    }
                    evidence.insert("actual".into(), actual);
                }
                if let Some(dest) = dest {
                    let path = substitute(dest, &self.vars)?;
                    if !Path::new(&path).is_file() {
                        return Err(format!("file {path} does not exist"));
                    }
                    evidence.insert("file".into(), Value::String(path));
                }
                Ok(Value::Object(evidence))
            }
            WorkflowStep::Sync { source, dest } => {
                let source = substitute(source, &self.vars)?;
                let dest = substitute(dest, &self.vars)?;
                let report = SyncClient::new(source, dest, self.principal.clone())
                    .sync_once()
                    .await
                    .map_err(|e| e.to_string())?;
                if !report.mismatches.is_empty() {
                    return Err(format!("digest mismatches: {:?}", report.mismatches));
                }
                Ok(serde_json::to_value(report).unwrap())
            }
            WorkflowStep::Sleep { duration_ms } => {
                tokio::time::sleep(Duration::from_millis(*duration_ms)).await;
                Ok(Value::Null)
            }
        }
    }

    pub async fn run(&mut self, workflow: &Workflow) -> WorkflowReport {
        let started = Instant::now();
        let mut steps = Vec::with_capacity(workflow.steps.len());
        let mut failed = false;
        for (index, step) in workflow.steps.iter().enumerate() {
            if failed {
                steps.push(StepReport {
                    index,
                    kind: step.kind().into(),
                    status: StepStatus::Skipped,
                    duration_ms: 0,
                    response: None,
                    error: None,
                });
                continue;
            }
            let t = Instant::now();
            let outcome = self.step(step).await;
            let duration_ms = t.elapsed().as_millis() as u64;
            let (status, response, error) = match outcome {
                Ok(v) => (StepStatus::Ok, Some(v), None),
                Err(e) => {
                    failed = true;
                    (StepStatus::Failed, None, Some(e))
                }
            };
            steps.push(StepReport {
                index,
                kind: step.kind().into(),
                status,
                duration_ms,
                response,
                error,
            });
        }
        WorkflowReport {
            status: if failed {
                StepStatus::Failed
            } else {
                StepStatus::Ok
            },
            duration_ms: started.elapsed().as_millis() as u64,
            steps,
        }
    }
}
