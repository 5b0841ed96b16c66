use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DENY: &str = "default-deny";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Permit,
    Deny,
}

impl Effect {
    pub fn as_str(self) -> &'static str {
        match self {
            Effect::Permit => "permit",
            Effect::Deny => "deny",
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    PushUpdate,
    PullModel,
    JoinStudy,
    ReadMetrics,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::JoinStudy, Action::PullModel, Action::PushUpdate, Action::ReadMetrics];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::PushUpdate => "push_update",
            Action::PullModel => "pull_model",
            Action::JoinStudy => "join_study",
            Action::ReadMetrics => "read_metrics",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown action {s:?}")))
    }
}

/// `"*"` matches anything, `"prefix*"` matches by prefix, anything else is exact.
pub fn pattern_matches(pattern: &str, value: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => value.starts_with(prefix),
        None => pattern == value,
    }
}

/// Inclusive round interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRange {
    pub first: u32,
    pub last: u32,
}

impl RoundRange {
    pub fn contains(&self, round: u32) -> bool {
        (self.first..=self.last).contains(&round)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    /// UTC milliseconds, inclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub not_before: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub not_after: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<RoundRange>,
}

impl Condition {
    /// Why this condition rejects the request, or `None` if it holds.
    /// A request without a round never satisfies a round range.
    fn failure(&self, req: &AccessRequest) -> Option<String> {
        if let Some(nb) = self.not_before {
            if req.timestamp < nb {
                return Some(format!("timestamp {} before not_before {nb}", req.timestamp));
            }
        }
        if let Some(na) = self.not_after {
            if req.timestamp > na {
                return Some(format!("timestamp {} after not_after {na}", req.timestamp));
            }
        }
        if let Some(range) = self.rounds {
            match req.round {
                Some(r) if range.contains(r) => {}
                Some(r) => return Some(format!("round {r} outside rounds {}-{}", range.first, range.last)),
                None => return Some(format!("request has no round; rule requires rounds {}-{}", range.first, range.last)),
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub rule_id: String,
    pub effect: Effect,
    pub subject: String,
    pub action: Action,
    pub resource: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

impl PolicyRule {
    pub fn permit(rule_id: impl Into<String>, subject: impl Into<String>, action: Action, resource: impl Into<String>) -> Self {
        Self {
            rule_id: rule_id.into(),
            effect: Effect::Permit,
            subject: subject.into(),
            action,
            resource: resource.into(),
            condition: None,
        }
    }

    pub fn with_rounds(mut self, first: u32, last: u32) -> Self {
        self.condition.get_or_insert_with(Condition::default).rounds = Some(RoundRange { first, last });
        self
    }

    fn targets(&self, req: &AccessRequest) -> bool {
        self.action == req.action && pattern_matches(&self.subject, &req.subject) && pattern_matches(&self.resource, &req.resource)
    }
}

/// Ordered rule list evaluated first-applicable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PolicySet {
    #[serde(rename = "rule")]
    rules: Vec<PolicyRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    rule: Vec<PolicyRule>,
}

impl PolicySet {
    pub fn new(rules: Vec<PolicyRule>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rules {
            if r.rule_id.is_empty() || r.rule_id == DEFAULT_DENY {
                return Err(Error::Config(format!("invalid rule id {:?}", r.rule_id)));
            }
            if !seen.insert(r.rule_id.as_str()) {
                return Err(Error::Config(format!("duplicate rule id {:?}", r.rule_id)));
            }
            if let Some(RoundRange { first, last }) = r.condition.as_ref().and_then(|c| c.rounds) {
                if first > last {
                    return Err(Error::Config(format!("rule {:?} has an empty round range {first}-{last}", r.rule_id)));
                }
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    /// Parses `[[rule]]` tables.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: PolicyFile = toml::from_str(text).map_err(|e| Error::Config(format!("policy: {e}")))?;
        Self::new(file.rule)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRequest {
    pub subject: String,
    pub action: Action,
    pub resource: String,
    pub timestamp: i64,
    pub round: Option<u32>,
}

impl AccessRequest {
    pub fn new(subject: impl Into<String>, action: Action, resource: impl Into<String>, timestamp: i64, round: Option<u32>) -> Self {
        Self { subject: subject.into(), action, resource: resource.into(), timestamp, round }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub effect: Effect,
    pub rule_id: String,
    pub timestamp: i64,
    /// For default denials: the rules that targeted the request but whose
    /// conditions failed.
    pub note: Option<String>,
}

impl Decision {
    pub fn is_permit(&self) -> bool {
        self.effect == Effect::Permit
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} by {} at {} ms", self.effect, self.rule_id, self.timestamp)?;
        if let Some(note) = &self.note {
            write!(f, " ({note})")?;
        }
        Ok(())
    }
}

/// Total and pure. The first rule whose target and condition match decides;
/// otherwise the answer is `Deny` by `default-deny`.
pub fn evaluate(request: &AccessRequest, policy: &PolicySet) -> Decision {
    let mut near_misses = Vec::new();
    for rule in &policy.rules {
        if !rule.targets(request) {
            continue;
        }
        match rule.condition.as_ref().and_then(|c| c.failure(request)) {
            None => {
                return Decision { effect: rule.effect, rule_id: rule.rule_id.clone(), timestamp: request.timestamp, note: None };
            }
            Some(why) => near_misses.push(format!("rule {}: {why}", rule.rule_id)),
        }
    }
    Decision {
        effect: Effect::Deny,
        rule_id: DEFAULT_DENY.to_string(),
        timestamp: request.timestamp,
        note: (!near_misses.is_empty()).then(|| near_misses.join("; ")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(subject: &str, action: Action, round: Option<u32>) -> AccessRequest {
        AccessRequest::new(subject, action, "study1", 1_000, round)
    }

    #[test]
    fn empty_set_denies() {
        let d = evaluate(&req("siteA", Action::PushUpdate, Some(1)), &PolicySet::empty());
        assert_eq!((d.effect, d.rule_id.as_str(), d.note.as_deref()), (Effect::Deny, DEFAULT_DENY, None));
    }

    #[test]
    fn round_window() {
        let set = PolicySet::new(vec![PolicyRule::permit("a-push", "siteA", Action::PushUpdate, "study1").with_rounds(1, 50)]).unwrap();
        let d = evaluate(&req("siteA", Action::PushUpdate, Some(50)), &set);
        assert_eq!((d.effect, d.rule_id.as_str()), (Effect::Permit, "a-push"));
        let d = evaluate(&req("siteA", Action::PushUpdate, Some(51)), &set);
        assert_eq!((d.effect, d.rule_id.as_str()), (Effect::Deny, DEFAULT_DENY));
        assert!(d.note.unwrap().contains("a-push: round 51 outside rounds 1-50"));
        let d = evaluate(&req("siteA", Action::PushUpdate, None), &set);
        assert_eq!(d.effect, Effect::Deny);
        let d = evaluate(&req("siteB", Action::PushUpdate, Some(3)), &set);
        assert_eq!(d.note, None);
    }

    #[test]
    fn first_applicable_wins() {
        let mut deny = PolicyRule::permit("block", "site*", Action::PullModel, "*");
        deny.effect = Effect::Deny;
        let set = PolicySet::new(vec![deny, PolicyRule::permit("allow", "siteA", Action::PullModel, "study1")]).unwrap();
        let d = evaluate(&req("siteA", Action::PullModel, Some(2)), &set);
        assert_eq!((d.effect, d.rule_id.as_str()), (Effect::Deny, "block"));
        let d = evaluate(&req("other", Action::PullModel, Some(2)), &set);
        assert_eq!(d.rule_id, DEFAULT_DENY);
    }

    #[test]
    fn time_window() {
        let mut rule = PolicyRule::permit("t", "*", Action::JoinStudy, "study1");
        rule.condition = Some(Condition { not_before: Some(500), not_after: Some(1_000), rounds: None });
        let set = PolicySet::new(vec![rule]).unwrap();
        assert!(evaluate(&req("x", Action::JoinStudy, None), &set).is_permit());
        let late = AccessRequest::new("x", Action::JoinStudy, "study1", 1_001, None);
        assert!(!evaluate(&late, &set).is_permit());
    }

    #[test]
    fn matcher_forms() {
        assert!(pattern_matches("*", "anything"));
        assert!(pattern_matches("site*", "siteB"));
        assert!(!pattern_matches("site*", "xsite"));
        assert!(pattern_matches("aumc", "aumc"));
        assert!(!pattern_matches("aumc", "aumc2"));
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let text = r#"
[[rule]]
rule_id = "a-push"
effect = "permit"
subject = "siteA"
action = "push_update"
resource = "study1"
condition = { rounds = { first = 1, last = 50 } }
"#;
        let set = PolicySet::from_toml_str(text).unwrap();
        assert_eq!(set.rules()[0].condition.as_ref().unwrap().rounds, Some(RoundRange { first: 1, last: 50 }));
        assert_eq!(PolicySet::from_toml_str(&set.to_toml_string().unwrap()).unwrap(), set);
        assert!(PolicySet::from_toml_str(&format!("{text}\n{text}")).is_err());
        assert!(PolicySet::from_toml_str("[[rule]]\nrule_id='x'\neffect='permit'\nsubject='a'\naction='fly'\nresource='s'\n").is_err());
        assert!(PolicySet::from_toml_str("[[rule]]\nrule_id='x'\neffect='permit'\nsubject='a'\naction='join_study'\nresource='s'\nextra=1\n").is_err());
    }
}
