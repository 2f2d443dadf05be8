mod common;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use common::*;
use editsearch::document;
use editsearch::events::{fold, EventKind, EventRecord};
use editsearch::harness::bench::Harness;
use editsearch::harness::serve::{serve, RunStatus, ServeState};
use editsearch::harness::{AppConfig, RunOverrides};
use editsearch::topology::ROOT;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Server {
    base: String,
    client: Client,
    token: Option<String>,
    _dir: tempfile::TempDir,
}

fn start(token: Option<&str>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "workspace": dir.path(),
        "backends": {"mode": "sim", "sim": {"p": 1.0, "q": 0.0, "k": 2, "seed": 5}},
    });
    let app = AppConfig::from_slice(&serde_json::to_vec(&cfg).unwrap()).unwrap();
    let harness = Harness::new(app, RunOverrides::default()).unwrap();
    let state = ServeState::new(harness, token.map(str::to_string));
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            serve(listener, state).await.unwrap();
        });
    });
    Server {
        base: format!("http://{}", rx.recv().unwrap()),
        client: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
        token: token.map(str::to_string),
        _dir: dir,
    }
}

impl Server {
    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::blocking::RequestBuilder {
        let r = self.client.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    fn start_run(&self, body: Value) -> String {
        let resp = self.req(reqwest::Method::POST, "/runs").json(&body).send().unwrap();
        assert_eq!(resp.status(), StatusCode::CREATED);
        resp.json::<Value>().unwrap()["run_id"].as_str().unwrap().to_string()
    }

    fn status(&self, id: &str) -> RunStatus {
        self.req(reqwest::Method::GET, &format!("/runs/{id}")).send().unwrap().json().unwrap()
    }

    fn control(&self, id: &str, c: Value) -> StatusCode {
        self.req(reqwest::Method::POST, &format!("/runs/{id}/control"))
            .json(&c)
            .send()
            .unwrap()
            .status()
    }

    fn topology(&self, id: &str, offset: Option<usize>) -> Vec<u8> {
        let q = offset.map(|k| format!("?offset={k}")).unwrap_or_default();
        self.req(reqwest::Method::GET, &format!("/runs/{id}/topology{q}"))
            .send()
            .unwrap()
            .bytes()
            .unwrap()
            .to_vec()
    }

    fn events(&self, id: &str, offset: usize) -> Vec<u8> {
        self.req(reqwest::Method::GET, &format!("/runs/{id}/events?offset={offset}"))
            .send()
            .unwrap()
            .bytes()
            .unwrap()
            .to_vec()
    }

    /// Current topology size; zero before the first event lands.
    fn size(&self, id: &str) -> usize {
        document::from_slice(&self.topology(id, None)).map_or(0, |t| t.size())
    }

    fn wait_until(&self, id: &str, what: impl Fn(&RunStatus, usize) -> bool) {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let s = self.status(id);
            if what(&s, self.size(id)) {
                return;
            }
            assert!(Instant::now() < deadline, "timed out waiting on {id}");
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Resumes a stepped run and waits for its next state.
    fn step(&self, id: &str) {
        let before = self.size(id);
        assert_eq!(self.control(id, json!({"command": "resume"})), StatusCode::ACCEPTED);
        self.wait_until(id, |s, n| s.finished || n > before);
    }
}

fn parse_events(bytes: &[u8]) -> Vec<EventRecord> {
    bytes
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect()
}

fn sim_task(c: u32, seed: u64) -> Value {
    serde_json::to_value(task(c, seed)).unwrap()
}

#[test]
fn stream_reconnect_topology_and_images() {
    let srv = start(None);
    let id = srv.start_run(json!({"task": sim_task(3, 1), "seed": 1}));
    let all = srv.events(&id, 0);
    let status = srv.status(&id);
    assert!(status.finished);
    assert!(status.error.is_none());
    let events = parse_events(&all);
    assert_eq!(events.len(), status.events);
    assert_eq!(events.last().unwrap().kind, EventKind::Finalized);

    let lines: Vec<&[u8]> = all.split_inclusive(|b| *b == b'\n').collect();
    for k in [0, 1, 3, events.len() / 2, events.len()] {
        assert_eq!(srv.events(&id, k), lines[k..].concat(), "reconnect at {k}");
        if k > 0 {
            let expected = document::to_bytes(&fold(&events[..k]).unwrap());
            assert_eq!(srv.topology(&id, Some(k)), expected, "topology at {k}");
        }
    }

    let topo = document::from_slice(&srv.topology(&id, None)).unwrap();
    let out = &topo.state(1).unwrap().output;
    let resp = srv.req(reqwest::Method::GET, &format!("/runs/{id}/images/{}", out.id)).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "application/json");
    assert_eq!(resp.text().unwrap(), out.locator);
    let missing = srv.req(reqwest::Method::GET, &format!("/runs/{id}/images/nope")).send().unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);

    assert_eq!(srv.control(&id, json!({"command": "pause"})), StatusCode::CONFLICT);
    assert_eq!(srv.control("run-999", json!({"command": "pause"})), StatusCode::NOT_FOUND);
    let unknown = srv.req(reqwest::Method::GET, "/runs/run-999").send().unwrap();
    assert_eq!(unknown.status(), StatusCode::NOT_FOUND);
}

#[test]
fn concurrent_runs_are_independent() {
    let srv = start(None);
    let a = srv.start_run(json!({"task": sim_task(3, 7), "seed": 3}));
    let b = srv.start_run(json!({"task": sim_task(3, 7), "seed": 3}));
    assert_ne!(a, b);
    srv.events(&a, 0);
    srv.events(&b, 0);
    let shape = |id: &str| {
        let t = document::from_slice(&srv.topology(id, None)).unwrap();
        t.states
            .iter()
            .map(|s| (s.state_id, s.parent_id, s.thought.clone(), s.output.id.clone(), s.evaluation.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shape(&a), shape(&b));
}

#[test]
fn paused_run_waits_and_prune_of_parent_backtracks() {
    let srv = start(None);
    let id = srv.start_run(json!({"task": sim_task(4, 5), "seed": 5, "step": true}));
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(srv.size(&id), 0);
    assert!(!srv.status(&id).finished);

    srv.step(&id);
    assert_eq!(srv.control(&id, json!({"command": "prune", "state_id": 1})), StatusCode::ACCEPTED);
    while !srv.status(&id).finished {
        srv.step(&id);
    }
    let events = parse_events(&srv.events(&id, 0));
    let at = events
        .iter()
        .position(|e| e.kind == EventKind::Backtrack && e.payload["reason"] == "prune")
        .expect("prune backtrack");
    assert_eq!(events[at].payload["from"], 1);
    assert_eq!(events[at].payload["to"], 0);
    let next_state = events[at..].iter().find(|e| e.kind == EventKind::StateCreated).unwrap();
    assert_eq!(next_state.state_id, Some(2));
    let topo = fold(&events).unwrap();
    assert_eq!(topo.state(2).unwrap().parent_id, Some(ROOT));
}

#[test]
fn accept_ends_the_run_with_that_state() {
    let srv = start(None);
    let id = srv.start_run(json!({"task": sim_task(4, 2), "seed": 2, "start_paused": true, "step": true}));
    for _ in 0..5 {
        srv.step(&id);
    }
    assert_eq!(srv.control(&id, json!({"command": "accept", "state_id": 5})), StatusCode::ACCEPTED);
    srv.wait_until(&id, |s, _| s.finished);
    let s = srv.status(&id);
    assert_eq!(s.final_states, vec![5]);
    assert_eq!(serde_json::to_value(s.termination).unwrap(), json!("completed"));
}

#[test]
fn bearer_token_is_enforced() {
    let srv = start(Some("tok"));
    let anon = srv.client.post(format!("{}/runs", srv.base)).json(&json!({})).send().unwrap();
    assert_eq!(anon.status(), StatusCode::UNAUTHORIZED);
    let wrong = srv
        .client
        .get(format!("{}/runs/run-1", srv.base))
        .bearer_auth("nope")
        .send()
        .unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
    let id = srv.start_run(json!({"task": sim_task(2, 1)}));
    srv.events(&id, 0);
    assert!(srv.status(&id).finished);
}

#[test]
fn bad_start_requests_are_rejected() {
    let srv = start(None);
    for body in [json!({}), json!({"image": "x.png"}), json!({"task": sim_task(2, 1), "bogus": 1})] {
        let r = srv.req(reqwest::Method::POST, "/runs").json(&body).send().unwrap();
        assert!(r.status().is_client_error(), "{body}: {}", r.status());
    }
}
