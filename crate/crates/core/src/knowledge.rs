//! Background knowledge for set-ups: entity linking followed by triple
//! lookup, against live HTTP services or an offline fixture file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::JokeRecord;
use crate::{Error, Result};

/// Mentions at or below this confidence are discarded.
pub const MIN_CONFIDENCE: f64 = 0.1;
pub const DEFAULT_MAX_PER_ENTITY: usize = 10;

/// One (subject, relation, object) fact. Serialized as a three-element array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[String; 3]", into = "[String; 3]")]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), relation: relation.into(), object: object.into() }
    }

    pub fn is_complete(&self) -> bool {
        [&self.subject, &self.relation, &self.object].iter().all(|s| !s.trim().is_empty())
    }
}

impl From<[String; 3]> for Triple {
    fn from([s, r, o]: [String; 3]) -> Self {
        Self { subject: s, relation: r, object: o }
    }
}

impl From<Triple> for [String; 3] {
    fn from(t: Triple) -> Self {
        [t.subject, t.relation, t.object]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub concept_id: String,
    pub confidence: f64,
}

/// Maps text to candidate entity mentions, unfiltered.
pub trait LinkerProvider: Sync {
    fn link(&self, text: &str) -> Result<Vec<EntityMention>>;
}

/// Maps a concept to facts with that concept as subject.
pub trait TripleProvider: Sync {
    fn triples(&self, concept_id: &str, limit: usize) -> Result<Vec<Triple>>;
}

/// Mentions with confidence strictly above [`MIN_CONFIDENCE`], in order of
/// first appearance in `setup`.
pub fn link_entities(setup: &str, provider: &dyn LinkerProvider) -> Result<Vec<EntityMention>> {
    let mut mentions: Vec<(usize, EntityMention)> = provider
        .link(setup)?
        .into_iter()
        .filter(|m| m.confidence > MIN_CONFIDENCE)
        .enumerate()
        .map(|(i, m)| (setup.find(&m.surface).unwrap_or(setup.len() + i), m))
        .collect();
    mentions.sort_by_key(|(pos, _)| *pos);
    Ok(mentions.into_iter().map(|(_, m)| m).collect())
}

pub fn fetch_triples(
    mention: &EntityMention,
    provider: &dyn TripleProvider,
    max_per_entity: usize,
) -> Result<Vec<Triple>> {
    assert!(max_per_entity >= 1, "max_per_entity must be at least 1");
    let mut out = provider.triples(&mention.concept_id, max_per_entity)?;
    out.retain(Triple::is_complete);
    out.truncate(max_per_entity);
    Ok(out)
}

/// A provider failure that was absorbed while annotating.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotationIssue {
    pub record: usize,
    pub message: String,
}

/// Attaches linked triples to every record, dropping exact duplicates and
/// keeping first-seen order. Failures are reported, never fatal: a record
/// keeps whatever triples were gathered before the error.
pub fn annotate_dataset(
    records: Vec<JokeRecord>,
    linker: &dyn LinkerProvider,
    triples: &dyn TripleProvider,
    max_per_entity: usize,
    in_flight: usize,
) -> (Vec<JokeRecord>, Vec<AnnotationIssue>) {
    let annotate_one = |(idx, mut record): (usize, JokeRecord)| {
        let mut issues = Vec::new();
        let mut seen: HashSet<Triple> = record.triples.iter().cloned().collect();
        match link_entities(&record.setup, linker) {
            Ok(mentions) => {
                for m in &mentions {
                    match fetch_triples(m, triples, max_per_entity) {
                        Ok(found) => {
                            for t in found {
                                if seen.insert(t.clone()) {
                                    record.triples.push(t);
                                }
                            }
                        }
                        Err(e) => issues.push(AnnotationIssue { record: idx, message: e.to_string() }),
                    }
                }
            }
            Err(e) => issues.push(AnnotationIssue { record: idx, message: e.to_string() }),
        }
        (record, issues)
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(in_flight.max(1)).build();
    let results: Vec<(JokeRecord, Vec<AnnotationIssue>)> = match pool {
        Ok(pool) => pool.install(|| records.into_par_iter().enumerate().map(annotate_one).collect()),
        Err(_) => records.into_iter().enumerate().map(annotate_one).collect(),
    };
    let mut out = Vec::with_capacity(results.len());
    let mut issues = Vec::new();
    for (r, i) in results {
        out.push(r);
        issues.extend(i);
    }
    (out, issues)
}

/// Offline provider backed by a JSON document of the form
/// `{"mentions": {setup: [{spot, title, rho}]}, "triples": {concept: [[s, r, o]]}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureProvider {
    #[serde(default)]
    pub mentions: BTreeMap<String, Vec<LinkerAnnotation>>,
    #[serde(default)]
    pub triples: BTreeMap<String, Vec<Triple>>,
}

/// One annotation in the linker wire format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkerAnnotation {
    pub spot: String,
    pub title: String,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
}

impl From<LinkerAnnotation> for EntityMention {
    fn from(a: LinkerAnnotation) -> Self {
        EntityMention { surface: a.spot, concept_id: a.title, confidence: a.rho }
    }
}

impl FixtureProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), line: e.line(), message: e.to_string() })
    }
}

impl LinkerProvider for FixtureProvider {
    fn link(&self, text: &str) -> Result<Vec<EntityMention>> {
        Ok(self.mentions.get(text.trim()).into_iter().flatten().cloned().map(Into::into).collect())
    }
}

impl TripleProvider for FixtureProvider {
    fn triples(&self, concept_id: &str, limit: usize) -> Result<Vec<Triple>> {
        Ok(self.triples.get(concept_id).into_iter().flatten().take(limit).cloned().collect())
    }
}

/// Timeout and retry policy for remote providers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpPolicy {
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpPolicy {
    fn default() -> Self {
        Self { timeout_secs: 10.0, retries: 3, backoff_ms: 250 }
    }
}

impl HttpPolicy {
    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(self.timeout_secs)))
            .build()
            .into()
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> std::result::Result<T, String>) -> std::result::Result<T, String> {
        let mut last = String::new();
        for k in 0..=self.retries {
            match attempt() {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
            if k < self.retries {
                thread::sleep(Duration::from_millis(self.backoff_ms << k));
            }
        }
        Err(last)
    }
}

/// Entity linker over HTTP: `GET <url>?text=...` answering with an array of
/// `{spot, title, rho}` (bare, or under an `annotations` key).
pub struct HttpLinker {
    url: String,
    policy: HttpPolicy,
    agent: ureq::Agent,
}

impl HttpLinker {
    pub fn new(url: impl Into<String>, policy: HttpPolicy) -> Self {
        let agent = policy.agent();
        Self { url: url.into(), policy, agent }
    }
}

pub fn parse_linker_response(body: &Value) -> Result<Vec<EntityMention>> {
    let items = match body {
        Value::Array(items) => items,
        Value::Object(map) => match map.get("annotations") {
            Some(Value::Array(items)) => items,
            _ => return Err(Error::MalformedResponse("expected an `annotations` array".into())),
        },
        _ => return Err(Error::MalformedResponse("expected a JSON array or object".into())),
    };
    let mut annotations: Vec<LinkerAnnotation> = items
        .iter()
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::MalformedResponse(e.to_string())))
        .collect::<Result<_>>()?;
    if annotations.iter().all(|a| a.start.is_some()) {
        annotations.sort_by_key(|a| a.start);
    }
    Ok(annotations.into_iter().map(Into::into).collect())
}

impl LinkerProvider for HttpLinker {
    fn link(&self, text: &str) -> Result<Vec<EntityMention>> {
        let body: Value = self
            .policy
            .with_retries(|| {
                let resp = self.agent.get(&self.url).query("text", text).call().map_err(|e| e.to_string())?;
                resp.into_body().read_json::<Value>().map_err(|e| format!("body: {e}"))
            })
            .map_err(Error::LinkerUnavailable)?;
        parse_linker_response(&body)
    }
}

/// SPARQL-over-HTTP triple source. The query selects English relation and
/// object labels for the item behind an English Wikipedia title, plus its
/// description as a `Description` relation.
pub struct SparqlTriples {
    url: String,
    policy: HttpPolicy,
    agent: ureq::Agent,
}

impl SparqlTriples {
    pub fn new(url: impl Into<String>, policy: HttpPolicy) -> Self {
        let agent = policy.agent();
        Self { url: url.into(), policy, agent }
    }
}

pub fn concept_label(concept_id: &str) -> String {
    concept_id.replace('_', " ")
}

pub fn sparql_query(concept_id: &str, limit: usize) -> String {
    let title = concept_label(concept_id).replace('\\', "\\\\").replace('"', "\\\"");
    format!(
        r#"PREFIX schema: <http://schema.org/>
PREFIX rdfs: <http://www.w3.org/2000/01/rdf-schema#>
PREFIX wikibase: <http://wikiba.se/ontology#>
SELECT ?relLabel ?objLabel WHERE {{
  ?article schema:about ?item ;
           schema:isPartOf <https://en.wikipedia.org/> ;
           schema:name "{title}"@en .
  {{
    ?item ?p ?obj .
    ?rel wikibase:directClaim ?p .
    ?rel rdfs:label ?relLabel . FILTER(LANG(?relLabel) = "en")
    ?obj rdfs:label ?objLabel . FILTER(LANG(?objLabel) = "en")
  }} UNION {{
    ?item schema:description ?objLabel . FILTER(LANG(?objLabel) = "en")
    BIND("Description" AS ?relLabel)
  }}
}}
LIMIT {limit}"#
    )
}

pub fn parse_sparql_response(subject: &str, body: &Value) -> Result<Vec<Triple>> {
    let bindings = body
        .pointer("/results/bindings")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::MalformedResponse("missing results.bindings".into()))?;
    bindings
        .iter()
        .map(|b| {
            let get = |var: &str| {
                b.get(var)
                    .and_then(|v| v.get("value"))
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| Error::MalformedResponse(format!("binding without `{var}`")))
            };
            Ok(Triple::new(subject, get("relLabel")?, get("objLabel")?))
        })
        .collect()
}

impl TripleProvider for SparqlTriples {
    fn triples(&self, concept_id: &str, limit: usize) -> Result<Vec<Triple>> {
        let query = sparql_query(concept_id, limit);
        let body: Value = self
            .policy
            .with_retries(|| {
                let resp = self
                    .agent
                    .post(&self.url)
                    .header("Accept", "application/sparql-results+json")
                    .send_form([("query", query.as_str())])
                    .map_err(|e| e.to_string())?;
                resp.into_body().read_json::<Value>().map_err(|e| format!("body: {e}"))
            })
            .map_err(Error::EndpointUnavailable)?;
        parse_sparql_response(&concept_label(concept_id), &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn jobs_fixture() -> FixtureProvider {
        serde_json::from_value(json!({
            "mentions": {
                "Jobs founded Apple.": [
                    {"spot": "Apple", "title": "Apple_Inc.", "rho": 0.5},
                    {"spot": "Jobs", "title": "Steve_Jobs", "rho": 0.6},
                    {"spot": "founded", "title": "Founding", "rho": 0.1}
                ]
            },
            "triples": {
                "Steve_Jobs": [["Steve Jobs", "employer", "Apple Inc."], ["Steve Jobs", "occupation", "entrepreneur"]],
                "Apple_Inc.": [["Apple Inc.", "founded by", "Steve Jobs"], ["Steve Jobs", "employer", "Apple Inc."]],
                "Many": [["M", "r", "1"], ["M", "r", "2"], ["M", "r", "3"], ["M", "r", "4"], ["M", "r", "5"]]
            }
        }))
        .unwrap()
    }

    #[test]
    fn links_in_order_and_drops_threshold_boundary() {
        let f = jobs_fixture();
        let m = link_entities("Jobs founded Apple.", &f).unwrap();
        let titles: Vec<_> = m.iter().map(|m| m.concept_id.as_str()).collect();
        assert_eq!(titles, ["Steve_Jobs", "Apple_Inc."]);
        assert!(link_entities("Nothing to see here.", &f).unwrap().is_empty());
    }

    #[test]
    fn fetch_respects_the_cap() {
        let f = jobs_fixture();
        let m = EntityMention { surface: "m".into(), concept_id: "Many".into(), confidence: 0.9 };
        assert_eq!(fetch_triples(&m, &f, 1).unwrap().len(), 1);
        assert_eq!(fetch_triples(&m, &f, 10).unwrap().len(), 5);
    }

    #[test]
    fn annotate_removes_shared_triples_and_preserves_records() {
        let f = jobs_fixture();
        let recs = vec![JokeRecord::new("Jobs founded Apple.", "p"), JokeRecord::new("Plain set-up.", "q")];
        let (out, issues) = annotate_dataset(recs, &f, &f, 10, 2);
        assert!(issues.is_empty());
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[0].triples,
            vec![
                Triple::new("Steve Jobs", "employer", "Apple Inc."),
                Triple::new("Steve Jobs", "occupation", "entrepreneur"),
                Triple::new("Apple Inc.", "founded by", "Steve Jobs"),
            ]
        );
        assert!(out[1].triples.is_empty());
    }

    struct FailingTriples;
    impl TripleProvider for FailingTriples {
        fn triples(&self, concept_id: &str, _: usize) -> Result<Vec<Triple>> {
            Err(Error::EndpointUnavailable(concept_id.to_string()))
        }
    }

    #[test]
    fn provider_failures_are_absorbed_per_record() {
        let f = jobs_fixture();
        let (out, issues) = annotate_dataset(vec![JokeRecord::new("Jobs founded Apple.", "p")], &f, &FailingTriples, 10, 1);
        assert_eq!(out.len(), 1);
        assert!(out[0].triples.is_empty());
        assert_eq!(issues.len(), 2);
    }

    #[test]
    fn wire_formats_parse() {
        let body = json!({"annotations": [
            {"spot": "b", "title": "B", "rho": 0.3, "start": 9},
            {"spot": "a", "title": "A", "rho": 0.4, "start": 2}
        ]});
        let m = parse_linker_response(&body).unwrap();
        assert_eq!(m[0].concept_id, "A");
        assert!(matches!(parse_linker_response(&json!({"x": 1})), Err(Error::MalformedResponse(_))));

        let sparql = json!({"results": {"bindings": [
            {"relLabel": {"type": "literal", "value": "instance of"}, "objLabel": {"type": "literal", "value": "drug"}}
        ]}});
        assert_eq!(parse_sparql_response("Cocaine", &sparql).unwrap(), vec![Triple::new("Cocaine", "instance of", "drug")]);
        assert!(parse_sparql_response("X", &json!({"results": {}})).is_err());
        assert!(sparql_query("Donald_Trump", 10).contains("\"Donald Trump\"@en"));
    }
}
