//! The /v1 API driven in-process through the router.

mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use common::{service, Fixture};
use http_body_util::BodyExt;
use parsons_core::telemetry::Condition;
use parsons_service::http::{router, AppState};
use parsons_service::{NewSession, ScaffoldService, SessionTicket};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Api {
    app: Router,
    service: Arc<ScaffoldService>,
}

fn api(admin: Option<&str>) -> Api {
    let Fixture { service, .. } = service();
    let service = Arc::new(service);
    let app = router(AppState {
        service: service.clone(),
        admin_token: admin.map(str::to_owned),
    });
    Api { app, service }
}

impl Api {
    async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = self.raw(method, uri, token, body).await;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    async fn raw(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        let req = match body {
            Some(v) => req
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(v.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    fn enrol(&self, student: &str, condition: Condition) -> SessionTicket {
        self.service
            .create_session(NewSession {
                student_id: student.into(),
                seed: None,
                condition: Some(condition),
            })
            .unwrap()
    }
}

fn q(ticket: &SessionTicket, pid: &str, action: &str) -> String {
    format!("/v1/sessions/{}/problems/{pid}/{action}", ticket.session_id)
}

#[tokio::test(flavor = "multi_thread")]
async fn pc_student_solves_a_puzzle_end_to_end() {
    let api = api(None);
    let t = api.enrol("pc", Condition::PC);
    let tok = Some(t.token.as_str());
    let pid = "store_totals";

    let (s, _) = api.call(Method::POST, &q(&t, pid, "open"), tok, None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, run) = api
        .call(Method::POST, &q(&t, pid, "run"), tok, Some(json!({"code": "def store_totals(inventory):\n    return {}"})))
        .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(run["all_passed"], false);

    let (s, help) = api
        .call(Method::POST, &q(&t, pid, "help"), tok, Some(json!({"code": "def store_totals(inventory):"})))
        .await;
    assert_eq!(s, StatusCode::OK, "{help}");
    assert_eq!(help["kind"], "puzzle");
    assert!(help["solution_text"].is_null());
    assert_eq!(help["puzzle"]["area"].as_array().unwrap().len(), 1);
    // The view never says which blocks are distractors.
    assert!(!help.to_string().contains("distractor"));

    let (s, err) = api.call(Method::POST, &q(&t, pid, "puzzle/copy"), tok, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "not_solved");

    for m in api.service.puzzle_solution_script(&t.session_id, pid).unwrap() {
        let (s, body) = api
            .call(Method::POST, &q(&t, pid, "puzzle/move"), tok, Some(serde_json::to_value(&m).unwrap()))
            .await;
        assert_eq!(s, StatusCode::OK, "{body}");
    }
    let (s, check) = api.call(Method::POST, &q(&t, pid, "puzzle/check"), tok, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(check["feedback"]["correct"], true);

    let (_, copy) = api.call(Method::POST, &q(&t, pid, "puzzle/copy"), tok, None).await;
    let code = copy["text"].as_str().unwrap().to_owned();
    let (s, sub) = api.call(Method::POST, &q(&t, pid, "submit"), tok, Some(json!({ "code": code }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sub["completed"], true);
    assert_eq!(sub["report"]["all_passed"], true);

    let (s, snap) = api.call(Method::GET, &format!("/v1/sessions/{}", t.session_id), tok, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(snap["problems"][pid]["completed"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn cc_student_never_receives_a_puzzle() {
    let api = api(None);
    let t = api.enrol("cc", Condition::CC);
    let tok = Some(t.token.as_str());
    for pid in ["store_totals", "get_grade"] {
        let (s, help) = api.call(Method::POST, &q(&t, pid, "help"), tok, Some(json!({"code": ""}))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(help["kind"], "full_solution");
        assert!(help["puzzle"].is_null());
        assert!(help["solution_text"].as_str().unwrap().starts_with("def "));
    }
    let (s, err) = api
        .call(Method::POST, &q(&t, "get_grade", "regenerate"), tok, Some(json!({"code": ""})))
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "wrong_condition");
    let (s, _) = api.call(Method::POST, &q(&t, "get_grade", "puzzle/check"), tok, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, copy) = api.call(Method::POST, &q(&t, "get_grade", "puzzle/copy"), tok, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(copy["text"].as_str().unwrap().contains("def get_grade"));
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_map_to_statuses() {
    let api = api(Some("admin-secret"));
    let (s, body) = api.call(Method::POST, "/v1/sessions", None, Some(json!({"student_id": "zed"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let ticket: SessionTicket = serde_json::from_value(body).unwrap();
    let tok = Some(ticket.token.as_str());

    let (s, _) = api.call(Method::POST, "/v1/sessions", None, Some(json!({"student_id": "zed"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = api.call(Method::POST, "/v1/sessions", None, Some(json!({"student_id": "  "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = api.call(Method::POST, &q(&ticket, "get_grade", "open"), None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = api.call(Method::POST, &q(&ticket, "get_grade", "open"), Some("wrong"), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, err) = api.call(Method::POST, &q(&ticket, "nope", "open"), tok, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "unknown_problem");
    let (s, _) = api.call(Method::GET, "/v1/sessions/s0000000000000000", tok, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = api.call(Method::GET, "/v1/problems/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, problems) = api.call(Method::GET, "/v1/problems", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(problems.as_array().unwrap().len(), 5);
    // Test cases are visible, reference solutions are not.
    assert!(!problems.to_string().contains("reference_solution"));
    assert!(problems[0]["tests"].as_array().is_some_and(|t| !t.is_empty()));

    let (s, _) = api.call(Method::GET, "/v1/analytics/report", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, err) = api
        .call(Method::GET, "/v1/analytics/report?metric=bogus", Some("admin-secret"), None)
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn puzzle_commands_report_engine_state() {
    let api = api(None);
    let t = api.enrol("pc2", Condition::PC);
    let tok = Some(t.token.as_str());
    let pid = "get_grade";
    let (s, _) = api.call(Method::POST, &q(&t, pid, "puzzle/help-me"), tok, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = api.call(Method::POST, &q(&t, pid, "help"), tok, Some(json!({"code": ""}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, err) = api.call(Method::POST, &q(&t, pid, "puzzle/help-me"), tok, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "too_few_attempts");
    let (s, err) = api
        .call(
            Method::POST,
            &q(&t, pid, "puzzle/move"),
            tok,
            Some(json!({"block_id": "kdeadbeef", "target": {"container": "area", "position": 0}})),
        )
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
    assert_eq!(err["error"]["code"], "unknown_block");
    for _ in 0..3 {
        api.call(Method::POST, &q(&t, pid, "puzzle/check"), tok, None).await;
    }
    let (s, adapt) = api.call(Method::POST, &q(&t, pid, "puzzle/help-me"), tok, None).await;
    assert_eq!(s, StatusCode::OK, "{adapt}");
    assert!(adapt["action"].is_object() || adapt["action"].is_string());
}

#[tokio::test(flavor = "multi_thread")]
async fn report_renders_json_and_text() {
    let api = api(None);
    for (i, cond) in [Condition::PC, Condition::PC, Condition::PC, Condition::CC, Condition::CC, Condition::CC]
        .into_iter()
        .enumerate()
    {
        let t = api.enrol(&format!("r{i}"), cond);
        api.service.open_question(&t.session_id, "get_grade").unwrap();
        api.service.save_and_run(&t.session_id, "get_grade", "").unwrap();
    }
    let (s, json) = api.call(Method::GET, "/v1/analytics/report?metric=attempts", None, None).await;
    assert_eq!(s, StatusCode::OK, "{json}");
    let lib = api.service.report("attempts".parse().unwrap()).unwrap();
    assert_eq!(json, serde_json::to_value(&lib).unwrap());
    let (s, text) = api
        .raw(Method::GET, "/v1/analytics/report?metric=attempts&format=text", None, None)
        .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(text).unwrap(), lib.render_table());
}
