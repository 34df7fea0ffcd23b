//! Firewall-style access rules: ordered, first match wins, default deny.
//!
//! Rule file format, one rule per line:
//!
//! ```text
//! # action principal source channel
//! allow ops    10.0.0.0/8  control
//! deny  *      *           data
//! ```

use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Control,
    Data,
    Registry,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Control, Channel::Data, Channel::Registry];
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Control => "control",
            Channel::Data => "data",
            Channel::Registry => "registry",
        })
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "control" => Ok(Channel::Control),
            "data" => Ok(Channel::Data),
            "registry" => Ok(Channel::Registry),
            other => Err(format!("unknown channel {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrincipalPattern {
    Any,
    Exact(String),
}

impl PrincipalPattern {
    pub fn matches(&self, principal: &str) -> bool {
        match self {
            PrincipalPattern::Any => true,
            PrincipalPattern::Exact(p) => p == principal,
        }
    }
}

/// An IPv4 block. A single address is a /32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cidr {
    network: Ipv4Addr,
    prefix_len: u8,
}

impl Cidr {
    pub fn new(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, String> {
        if prefix_len > 32 {
            return Err(format!("prefix length {prefix_len} is outside 0..=32"));
        }
        let network = Ipv4Addr::from(u32::from(addr) & Self::mask(prefix_len));
        Ok(Cidr {
            network,
            prefix_len,
        })
    }

    fn mask(prefix_len: u8) -> u32 {
        if prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - prefix_len)
        }
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & Self::mask(self.prefix_len) == u32::from(self.network)
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }
}

impl FromStr for Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (addr, len) = match s.split_once('/') {
            Some((a, l)) => {
                let len: u8 = l
                    .parse()
                    .map_err(|_| format!("bad prefix length in {s:?}"))?;
                (a, len)
            }
            None => (s, 32),
        };
        let addr: Ipv4Addr = addr
            .parse()
            .map_err(|_| format!("bad IPv4 address in {s:?}"))?;
        Cidr::new(addr, len)
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourcePattern {
    Any,
    Block(Cidr),
}

impl SourcePattern {
    pub fn matches(&self, addr: Ipv4Addr) -> bool {
        match self {
            SourcePattern::Any => true,
            SourcePattern::Block(c) => c.contains(addr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub principal: PrincipalPattern,
    pub source: SourcePattern,
    pub channel: Channel,
    pub action: Decision,
}

impl PolicyRule {
    pub fn matches(&self, ctx: &AccessContext) -> bool {
        self.channel == ctx.channel
            && self.source.matches(ctx.source)
            && self.principal.matches(&ctx.principal)
    }
}

impl FromStr for PolicyRule {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [action, principal, source, channel] = fields[..] else {
            return Err(format!(
                "expected `<allow|deny> <principal|*> <addr|cidr|*> <channel>`, got {} fields",
                fields.len()
            ));
        };
        let action = match action {
            "allow" => Decision::Allow,
            "deny" => Decision::Deny,
            other => return Err(format!("unknown action {other:?}")),
        };
        let principal = match principal {
            "*" => PrincipalPattern::Any,
            p => PrincipalPattern::Exact(p.to_owned()),
        };
        let source = match source {
            "*" => SourcePattern::Any,
            s => SourcePattern::Block(s.parse()?),
        };
        Ok(PolicyRule {
            principal,
            source,
            channel: channel.parse()?,
            action,
        })
    }
}

impl fmt::Display for PolicyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let action = match self.action {
            Decision::Allow => "allow",
            Decision::Deny => "deny",
        };
        let principal = match &self.principal {
            PrincipalPattern::Any => "*",
            PrincipalPattern::Exact(p) => p,
        };
        match &self.source {
            SourcePattern::Any => write!(f, "{action} {principal} * {}", self.channel),
            SourcePattern::Block(b) => write!(f, "{action} {principal} {b} {}", self.channel),
        }
    }
}

/// Input to one policy evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessContext {
    pub principal: String,
    pub source: Ipv4Addr,
    pub channel: Channel,
}

impl AccessContext {
    pub fn new(principal: impl Into<String>, source: Ipv4Addr, channel: Channel) -> Self {
        AccessContext {
            principal: principal.into(),
            source,
            channel,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading policy file: {0}")]
    Io(#[from] std::io::Error),
}

/// Parses a whole rule file. Any bad line fails the load.
pub fn parse_rules(text: &str) -> Result<Vec<PolicyRule>, PolicyError> {
    let mut rules = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let rule = line.parse().map_err(|message| PolicyError::Parse {
            line: idx + 1,
            message,
        })?;
        rules.push(rule);
    }
    Ok(rules)
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<Vec<PolicyRule>, PolicyError> {
    parse_rules(&std::fs::read_to_string(path)?)
}

pub fn evaluate(rules: &[PolicyRule], ctx: &AccessContext) -> Decision {
    rules
        .iter()
        .find(|r| r.matches(ctx))
        .map_or(Decision::Deny, |r| r.action)
}

/// Connection-time check, before the caller's principal is known: true if
/// some principal could be allowed from `source` on `channel`.
pub fn admits_source(rules: &[PolicyRule], source: Ipv4Addr, channel: Channel) -> bool {
    for rule in rules {
        if rule.channel != channel || !rule.source.matches(source) {
            continue;
        }
        match (&rule.principal, rule.action) {
            (_, Decision::Allow) => return true,
            (PrincipalPattern::Any, Decision::Deny) => return false,
            (PrincipalPattern::Exact(_), Decision::Deny) => {}
        }
    }
    false
}

/// Shared, hot-swappable policy. `open()` admits everything and is used when a
/// daemon starts without a rule file.
#[derive(Debug, Clone)]
pub struct Policy {
    inner: Arc<RwLock<PolicyState>>,
}

#[derive(Debug)]
struct PolicyState {
    rules: Option<Arc<Vec<PolicyRule>>>,
    source: Option<std::path::PathBuf>,
}

impl Policy {
    pub fn open() -> Self {
        Self::with(None, None)
    }

    pub fn from_rules(rules: Vec<PolicyRule>) -> Self {
        Self::with(Some(Arc::new(rules)), None)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let rules = load_rules(&path)?;
        Ok(Self::with(
            Some(Arc::new(rules)),
            Some(path.as_ref().to_owned()),
        ))
    }

    fn with(rules: Option<Arc<Vec<PolicyRule>>>, source: Option<std::path::PathBuf>) -> Self {
        Policy {
            inner: Arc::new(RwLock::new(PolicyState { rules, source })),
        }
    }

    fn rules(&self) -> Option<Arc<Vec<PolicyRule>>> {
        self.inner.read().unwrap().rules.clone()
    }

    pub fn evaluate(&self, ctx: &AccessContext) -> Decision {
        match self.rules() {
            Some(rules) => evaluate(&rules, ctx),
            None => Decision::Allow,
        }
    }

    pub fn admits_source(&self, source: Ipv4Addr, channel: Channel) -> bool {
        match self.rules() {
            Some(rules) => admits_source(&rules, source, channel),
            None => true,
        }
    }

    pub fn replace(&self, rules: Vec<PolicyRule>) {
        self.inner.write().unwrap().rules = Some(Arc::new(rules));
    }

    /// Re-reads the file the policy was loaded from. A failed parse keeps the
    /// current rules. Returns the number of rules now active.
    pub fn reload(&self) -> Result<usize, PolicyError> {
        let path = self.inner.read().unwrap().source.clone();
        let Some(path) = path else {
            return Ok(self.rules().map_or(0, |r| r.len()));
        };
        let rules = load_rules(&path)?;
        let n = rules.len();
        self.replace(rules);
        Ok(n)
    }
}
