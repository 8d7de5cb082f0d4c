//! Wire-level behaviour of the HTTP providers against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use punchline::knowledge::{HttpLinker, HttpPolicy, LinkerProvider, SparqlTriples, Triple, TripleProvider};
use punchline::Error;

#[derive(Clone, Debug)]
struct Request {
    line: String,
    headers: Vec<(String, String)>,
    body: String,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Serves the canned `(status, body)` responses in order, one per connection.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Request>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map_or(0, |(_, v)| v.parse().unwrap());
            let mut raw = vec![0u8; len];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Request { line: line.trim_end().into(), headers, body: String::from_utf8(raw).unwrap() });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn quick() -> HttpPolicy {
    HttpPolicy { timeout_secs: 5.0, retries: 2, backoff_ms: 1 }
}

#[test]
fn linker_sends_text_in_query_string_and_maps_rho() {
    let body = r#"{"annotations": [{"spot": "Jobs", "title": "Steve_Jobs", "rho": 0.42, "start": 0}]}"#;
    let (url, seen) = serve(vec![(200, body.into())]);
    let mentions = HttpLinker::new(url, quick()).link("Jobs founded Apple.").unwrap();
    assert_eq!(mentions.len(), 1);
    assert_eq!((mentions[0].surface.as_str(), mentions[0].concept_id.as_str()), ("Jobs", "Steve_Jobs"));
    assert_eq!(mentions[0].confidence, 0.42);
    let req = &seen.lock().unwrap()[0];
    assert!(req.line.starts_with("GET /endpoint?text=Jobs"), "{}", req.line);
    assert!(req.line.contains("Apple."));
}

#[test]
fn sparql_posts_a_form_query_and_reads_bindings() {
    let body = r#"{"results": {"bindings": [
        {"relLabel": {"type": "literal", "value": "position held"}, "objLabel": {"type": "literal", "value": "President of the United States"}},
        {"relLabel": {"type": "literal", "value": "Description"}, "objLabel": {"type": "literal", "value": "American politician"}}
    ]}}"#;
    let (url, seen) = serve(vec![(200, body.into())]);
    let triples = SparqlTriples::new(url, quick()).triples("Donald_Trump", 10).unwrap();
    assert_eq!(
        triples,
        [
            Triple::new("Donald Trump", "position held", "President of the United States"),
            Triple::new("Donald Trump", "Description", "American politician"),
        ]
    );
    let req = &seen.lock().unwrap()[0];
    assert!(req.line.starts_with("POST /endpoint"));
    assert_eq!(req.header("accept"), Some("application/sparql-results+json"));
    assert!(req.header("content-type").unwrap().starts_with("application/x-www-form-urlencoded"));
    assert!(req.body.starts_with("query="));
    assert!(req.body.contains("LIMIT+10"), "{}", req.body);
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = serve(vec![(503, "{}".into()), (200, "[]".into())]);
    assert!(HttpLinker::new(url, quick()).link("x").unwrap().is_empty());
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn exhausted_retries_surface_as_unavailable() {
    let (url, _) = serve(vec![(500, "{}".into()); 3]);
    assert!(matches!(HttpLinker::new(url.clone(), quick()).link("x"), Err(Error::LinkerUnavailable(_))));
    let (url, _) = serve(vec![(500, "{}".into()); 3]);
    assert!(matches!(SparqlTriples::new(url, quick()).triples("X", 1), Err(Error::EndpointUnavailable(_))));
}

#[test]
fn wrong_shapes_are_malformed() {
    let (url, _) = serve(vec![(200, r#"{"annotations": 3}"#.into())]);
    assert!(matches!(HttpLinker::new(url, quick()).link("x"), Err(Error::MalformedResponse(_))));
    let (url, _) = serve(vec![(200, r#"{"results": {"bindings": [{"relLabel": {"value": "r"}}]}}"#.into())]);
    assert!(matches!(SparqlTriples::new(url, quick()).triples("X", 1), Err(Error::MalformedResponse(_))));
}
