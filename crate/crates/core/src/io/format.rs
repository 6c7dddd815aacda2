//! Versioned JSON documents for instances and report profiles.
//!
//! Amounts are strings on the micro grid and entities are named `m<i>` /
//! `a<i>`, listed in index order. Serialisation is canonical: pretty-printed
//! with a trailing newline, so parse followed by serialise reproduces a
//! canonical document byte for byte.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{
    AdvertiserReport, AdvertiserSpec, Backing, EntityId, EntityKind, Instance, MediatorReport, MediatorSpec,
    ReportProfile, ReportedUser, TieOrder,
};
use crate::money::Money;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("expected a {expected:?} document, found {found:?}")]
    Kind { expected: String, found: String },
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        FormatError::Syntax { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

fn field(path: impl Into<String>, message: impl Into<String>) -> FormatError {
    FormatError::Field { field: path.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediatorEntry {
    pub id: EntityId,
    pub user_costs: Vec<Money>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvertiserEntry {
    pub id: EntityId,
    pub capacity: u32,
    pub value: Money,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub schema_version: u32,
    pub kind: String,
    pub mediators: Vec<MediatorEntry>,
    pub advertisers: Vec<AdvertiserEntry>,
    #[serde(default)]
    pub tie_order: Option<Vec<EntityId>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportedMediator {
    pub id: EntityId,
    pub users: Vec<ReportedUser>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportsDoc {
    pub schema_version: u32,
    pub kind: String,
    pub mediators: Vec<ReportedMediator>,
    pub advertisers: Vec<AdvertiserEntry>,
}

const INSTANCE_KIND: &str = "instance";
const REPORTS_KIND: &str = "reports";

fn check_header(version: u32, kind: &str, expected: &str) -> Result<(), FormatError> {
    if version != SCHEMA_VERSION {
        return Err(FormatError::Version(version));
    }
    if kind != expected {
        return Err(FormatError::Kind { expected: expected.into(), found: kind.into() });
    }
    Ok(())
}

fn check_ids<'a>(ids: impl Iterator<Item = &'a EntityId>, kind: EntityKind, list: &str) -> Result<(), FormatError> {
    let mut seen = BTreeSet::new();
    for (i, id) in ids.enumerate() {
        let path = format!("{list}[{i}].id");
        if id.kind != kind {
            return Err(field(path, format!("{id} is not a {kind:?} id").to_lowercase()));
        }
        if !seen.insert(*id) {
            return Err(field(path, format!("duplicate id {id}")));
        }
        if id.index as usize != i {
            return Err(field(path, format!("expected id {}, found {id}", EntityId { kind, index: i as u32 })));
        }
    }
    Ok(())
}

impl InstanceDoc {
    pub fn from_instance(instance: &Instance) -> Self {
        InstanceDoc {
            schema_version: SCHEMA_VERSION,
            kind: INSTANCE_KIND.into(),
            mediators: instance
                .mediators()
                .iter()
                .enumerate()
                .map(|(i, m)| MediatorEntry { id: EntityId::mediator(i as u32), user_costs: m.user_costs.clone() })
                .collect(),
            advertisers: instance
                .advertisers()
                .iter()
                .enumerate()
                .map(|(i, a)| AdvertiserEntry { id: EntityId::advertiser(i as u32), capacity: a.capacity, value: a.value })
                .collect(),
            tie_order: Some(instance.tie_order().order().to_vec()),
        }
    }

    pub fn to_instance(&self) -> Result<Instance, FormatError> {
        check_header(self.schema_version, &self.kind, INSTANCE_KIND)?;
        check_ids(self.mediators.iter().map(|m| &m.id), EntityKind::Mediator, "mediators")?;
        check_ids(self.advertisers.iter().map(|a| &a.id), EntityKind::Advertiser, "advertisers")?;
        for (i, m) in self.mediators.iter().enumerate() {
            if let Some(j) = m.user_costs.iter().position(|c| c.is_negative()) {
                return Err(field(format!("mediators[{i}].user_costs[{j}]"), format!("negative cost {}", m.user_costs[j])));
            }
        }
        for (i, a) in self.advertisers.iter().enumerate() {
            if a.value.is_negative() {
                return Err(field(format!("advertisers[{i}].value"), format!("negative value {}", a.value)));
            }
            if a.capacity == 0 {
                return Err(field(format!("advertisers[{i}].capacity"), "capacity must be positive"));
            }
        }
        let order = self.tie_order.clone().ok_or_else(|| field("tie_order", "tie_order required"))?;
        let tie = TieOrder::new(order, self.mediators.len(), self.advertisers.len())
            .map_err(|e| field("tie_order", e.to_string()))?;
        Instance::new(
            self.mediators.iter().map(|m| MediatorSpec { user_costs: m.user_costs.clone() }).collect(),
            self.advertisers.iter().map(|a| AdvertiserSpec { capacity: a.capacity, value: a.value }).collect(),
            tie,
        )
        .map_err(|e| field("instance", e.to_string()))
    }
}

impl ReportsDoc {
    pub fn from_profile(profile: &ReportProfile) -> Self {
        ReportsDoc {
            schema_version: SCHEMA_VERSION,
            kind: REPORTS_KIND.into(),
            mediators: profile
                .mediators
                .iter()
                .enumerate()
                .map(|(i, m)| ReportedMediator { id: EntityId::mediator(i as u32), users: m.users.clone() })
                .collect(),
            advertisers: profile
                .advertisers
                .iter()
                .enumerate()
                .map(|(i, a)| AdvertiserEntry { id: EntityId::advertiser(i as u32), capacity: a.capacity, value: a.value })
                .collect(),
        }
    }

    pub fn to_profile(&self) -> Result<ReportProfile, FormatError> {
        check_header(self.schema_version, &self.kind, REPORTS_KIND)?;
        check_ids(self.mediators.iter().map(|m| &m.id), EntityKind::Mediator, "mediators")?;
        check_ids(self.advertisers.iter().map(|a| &a.id), EntityKind::Advertiser, "advertisers")?;
        for (i, m) in self.mediators.iter().enumerate() {
            let mut backing = BTreeSet::new();
            for (j, u) in m.users.iter().enumerate() {
                if u.cost.is_negative() {
                    return Err(field(format!("mediators[{i}].users[{j}].cost"), format!("negative cost {}", u.cost)));
                }
                if let Backing::Real(b) = u.backing {
                    if !backing.insert(b) {
                        return Err(field(format!("mediators[{i}].users[{j}].backing"), format!("user {b} backs two entries")));
                    }
                }
            }
        }
        for (i, a) in self.advertisers.iter().enumerate() {
            if a.value.is_negative() {
                return Err(field(format!("advertisers[{i}].value"), format!("negative value {}", a.value)));
            }
        }
        Ok(ReportProfile {
            mediators: self.mediators.iter().map(|m| MediatorReport { users: m.users.clone() }).collect(),
            advertisers: self
                .advertisers
                .iter()
                .map(|a| AdvertiserReport { capacity: a.capacity, value: a.value })
                .collect(),
        })
    }
}

/// Canonical text of any document: pretty JSON plus a trailing newline.
pub fn to_canonical_json<T: Serialize>(doc: &T) -> String {
    let mut text = serde_json::to_string_pretty(doc).expect("documents serialise");
    text.push('\n');
    text
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T, FormatError> {
    Ok(serde_json::from_str(text)?)
}

pub fn serialize_instance(instance: &Instance) -> String {
    to_canonical_json(&InstanceDoc::from_instance(instance))
}

pub fn parse_instance(text: &str) -> Result<Instance, FormatError> {
    from_json::<InstanceDoc>(text)?.to_instance()
}

pub fn serialize_reports(profile: &ReportProfile) -> String {
    to_canonical_json(&ReportsDoc::from_profile(profile))
}

pub fn parse_reports(text: &str) -> Result<ReportProfile, FormatError> {
    from_json::<ReportsDoc>(text)?.to_profile()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::simple_instance;

    const DOC: &str = r#"{
  "schema_version": 1,
  "kind": "instance",
  "mediators": [
    {
      "id": "m0",
      "user_costs": [
        "1",
        "2.5"
      ]
    }
  ],
  "advertisers": [
    {
      "id": "a0",
      "capacity": 2,
      "value": "7"
    }
  ],
  "tie_order": [
    "a0",
    "m0"
  ]
}
"#;

    #[test]
    fn canonical_round_trip() {
        let inst = parse_instance(DOC).unwrap();
        assert_eq!(inst.tie_order().order()[0], EntityId::advertiser(0));
        assert_eq!(inst.mediators()[0].user_costs[1], Money::from_micros(2_500_000));
        assert_eq!(serialize_instance(&inst), DOC);
    }

    #[test]
    fn missing_tie_order() {
        let doc = DOC.replace(",\n  \"tie_order\": [\n    \"a0\",\n    \"m0\"\n  ]", "");
        let err = parse_instance(&doc).unwrap_err();
        assert_eq!(err, field("tie_order", "tie_order required"));
        assert!(err.to_string().contains("tie_order required"));
    }

    #[test]
    fn sub_grid_amount_rejected_with_position() {
        let doc = DOC.replace("\"1\",", "\"1.0000001\",");
        match parse_instance(&doc).unwrap_err() {
            FormatError::Syntax { line, message, .. } => {
                // the reader stops just past the value
                assert!((8..=9).contains(&line), "{message}");
                assert!(message.contains("1.0000001"));
                assert!(message.contains("finer than the money grid"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_cost_names_field() {
        let doc = DOC.replace("\"2.5\"", "\"-2.5\"");
        let err = parse_instance(&doc).unwrap_err();
        assert_eq!(err, field("mediators[0].user_costs[1]", "negative cost -2.5"));
    }

    #[test]
    fn duplicate_and_misnumbered_ids() {
        let inst = simple_instance(&[&[1], &[2]], &[(1, 5)]);
        let text = serialize_instance(&inst).replacen("\"m1\"", "\"m0\"", 1);
        let err = parse_instance(&text).unwrap_err();
        assert!(matches!(&err, FormatError::Field { field, message } if field == "mediators[1].id" && message.contains("duplicate")));
    }

    #[test]
    fn version_and_kind_checked() {
        assert_eq!(parse_instance(&DOC.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap_err(), FormatError::Version(9));
        assert!(matches!(parse_instance(&DOC.replace("\"instance\"", "\"reports\"")), Err(FormatError::Kind { .. })));
    }

    #[test]
    fn reports_round_trip() {
        let inst = simple_instance(&[&[1, 3]], &[(2, 7)]);
        let mut profile = ReportProfile::truthful(&inst);
        profile.mediators[0].users.push(ReportedUser { cost: Money::ZERO, backing: Backing::Fabricated });
        let text = serialize_reports(&profile);
        assert_eq!(parse_reports(&text).unwrap(), profile);
        assert_eq!(serialize_reports(&parse_reports(&text).unwrap()), text);
    }
}
