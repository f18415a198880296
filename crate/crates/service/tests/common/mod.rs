#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use crate::{router, AppState, Engine, EngineOptions};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use recall_core::baselines::LeitnerModel;
use recall_core::model::StudentModel;
use recall_core::{Corpus, Flashcard};
use serde_json::Value;
use tower::ServiceExt;

/// 40 cards, `c00`..`c39`, alternating between decks `a` and `b`.
pub fn corpus() -> Corpus {
    let mut c = Corpus::new();
    for i in 0..40 {
        let deck = if i % 2 == 0 { "a" } else { "b" };
        c.insert(Flashcard::new(format!("c{i:02}"), format!("question {i}"), deck)).unwrap();
    }
    c
}

pub fn options() -> EngineOptions {
    EngineOptions {
        fsync: false,
        snapshot_every: 250,
        ..EngineOptions::default()
    }
}

pub fn engine_with(log: &Path, model: Arc<dyn StudentModel>) -> Engine {
    Engine::open(corpus(), model, log, options()).unwrap()
}

pub fn engine(log: &Path) -> Engine {
    engine_with(log, Arc::new(LeitnerModel))
}

pub struct Client {
    pub app: axum::Router,
}

impl Client {
    pub fn new(engine: Arc<Engine>, test_clock: bool) -> Self {
        Self {
            app: router(AppState { engine, test_clock }),
        }
    }

    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>, clock: Option<i64>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = clock {
            req = req.header("X-Clock-Override", t.to_string());
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        (status, value)
    }

    pub async fn get(&self, uri: &str, clock: Option<i64>) -> (StatusCode, Value) {
        self.call("GET", uri, None, clock).await
    }

    pub async fn post(&self, uri: &str, body: Value, clock: Option<i64>) -> (StatusCode, Value) {
        self.call("POST", uri, Some(body), clock).await
    }
}

pub const DAY: i64 = 86_400;

/// Drives one user through the whole protocol over HTTP with a simulated clock
/// and returns the final report payload. Pretest answers alternate three
/// correct, one wrong; daily answers are all correct; posttest answers come
/// from `post`, indexed by presentation order.
pub async fn scripted_run(client: &Client, user: &str, t0: i64, post: impl Fn(usize) -> (bool, u64)) -> Value {
    let (s, _) = client.post("/api/v1/users", serde_json::json!({ "user_id": user }), Some(t0)).await;
    assert!(s.is_success(), "create user: {s}");
    let (s, start) = client.post("/api/v1/test/start", serde_json::json!({ "user_id": user }), Some(t0)).await;
    assert_eq!(s, StatusCode::CREATED, "{start}");
    let test_set: Vec<String> = start["cards"].as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_owned()).collect();
    assert_eq!(test_set.len(), 20);

    let mut clock = t0;
    let answer = |card: String, correct: bool, ms: u64, at: i64| {
        let body = serde_json::json!({
            "user_id": user, "card_id": card, "response": correct as u8, "elapsed_ms": ms,
        });
        client.post("/api/v1/test/submit", body, Some(at))
    };
    let next_uri = format!("/api/v1/test/next?user={user}");
    let next = |at: i64| client.get(&next_uri, Some(at));

    let mut shown = Vec::new();
    for i in 0..20 {
        clock += 10;
        let (s, n) = next(clock).await;
        assert_eq!(s, StatusCode::OK, "{n}");
        assert_eq!(n["phase"]["phase"], "pretest");
        let card = n["card_id"].as_str().unwrap().to_owned();
        shown.push(card.clone());
        let (s, r) = answer(card, i % 4 != 0, 3000, clock).await;
        assert_eq!(s, StatusCode::OK, "{r}");
    }
    shown.sort();
    let mut sorted_set = test_set.clone();
    sorted_set.sort();
    assert_eq!(shown, sorted_set, "pretest shows each test card once");

    for d in 1..=5i64 {
        clock = t0 + (d - 1) * DAY + 3600;
        let mut today = Vec::new();
        for _ in 0..10 {
            clock += 10;
            let (s, n) = next(clock).await;
            assert_eq!(s, StatusCode::OK, "{n}");
            assert_eq!(n["phase"]["phase"], "daily");
            assert_eq!(n["phase"]["day"], d);
            let card = n["card_id"].as_str().unwrap().to_owned();
            assert!(test_set.contains(&card));
            assert!(!today.contains(&card), "daily review repeats {card}");
            today.push(card.clone());
            let (s, r) = answer(card, true, 2000, clock).await;
            assert_eq!(s, StatusCode::OK, "{r}");
        }
        // The next phase is not open yet on the same day.
        let (s, e) = next(clock + 10).await;
        assert_eq!(s, StatusCode::CONFLICT, "{e}");
        assert_eq!(e["error"]["code"], "phase_violation");
    }

    clock = t0 + 5 * DAY + 3600;
    for i in 0..20 {
        clock += 10;
        let (s, n) = next(clock).await;
        assert_eq!(s, StatusCode::OK, "{n}");
        assert_eq!(n["phase"]["phase"], "posttest");
        let (correct, ms) = post(i);
        let (s, r) = answer(n["card_id"].as_str().unwrap().to_owned(), correct, ms, clock).await;
        assert_eq!(s, StatusCode::OK, "{r}");
    }
    let (s, n) = next(clock + 10).await;
    assert_eq!(s, StatusCode::CONFLICT, "{n}");
    let (s, report) = client.get(&format!("/api/v1/test/report?user={user}"), Some(clock + 20)).await;
    assert_eq!(s, StatusCode::OK, "{report}");
    report["report"].clone()
}
