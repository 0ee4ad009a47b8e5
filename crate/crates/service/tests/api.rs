mod common;

use std::time::Duration;

use axum::http::StatusCode;
use common::*;
use serde_json::json;

async fn app_with_study(async_reports: bool) -> axum::Router {
    let mut cfg = mock_config();
    cfg.server.async_reports = async_reports;
    let (app, _) = app(&cfg);
    let r = upload(&app, "s1", synthetic("ignored", 3).to_bytes().unwrap()).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.json);
    app
}

#[tokio::test]
async fn heart_question_answers_with_region_and_trace() {
    let app = app_with_study(false).await;
    let r = post_json(
        &app,
        "/v1/qa",
        json!({"study_id": "s1", "question": "Is there fluid around the heart?", "session": "s1"}),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json);
    assert_eq!(r.json["region"], "heart");
    assert!(!r.json["answer"].as_str().unwrap().is_empty());
    let trace_id = r.json["trace_id"].as_str().unwrap();
    assert_eq!(r.trace_header.as_deref(), Some(trace_id));
    assert!(r.json["trace"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(r.json["vision_tokens"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn report_for_missing_study_is_404() {
    let app = app_with_study(false).await;
    let r = post_json(&app, "/v1/report", json!({"study_id": "nope", "session": "s1"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json["error"], "StudyNotFound");
    assert_eq!(r.trace_header.as_deref(), r.json["trace_id"].as_str());

    let r = post_json(&app, "/v1/qa", json!({"study_id": "nope", "question": "Is the heart enlarged?"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn history_lists_one_record_per_episode() {
    let app = app_with_study(false).await;
    let r = get(&app, "/v1/history?session=s1").await;
    assert_eq!(r.json["records"].as_array().unwrap().len(), 0);

    let qa = post_json(
        &app,
        "/v1/qa",
        json!({"study_id": "s1", "question": "Is there any abnormality in the lung?", "session": "s1"}),
    )
    .await;
    assert_eq!(qa.status, StatusCode::OK);
    post_json(&app, "/v1/qa", json!({"study_id": "s1", "question": "Is the liver normal?", "session": "other"}))
        .await;

    let r = get(&app, "/v1/history?session=s1").await;
    assert!(r.trace_header.is_some());
    let recs = r.json["records"].as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["trace_id"], qa.json["trace_id"]);
    assert_eq!(recs[0]["kind"], "qa");

    let r = get(&app, "/v1/history?kind=report").await;
    assert_eq!(r.json["records"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn synchronous_report_lists_every_region() {
    let app = app_with_study(false).await;
    let r = post_json(&app, "/v1/report", json!({"study_id": "s1", "session": "s1"})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json);
    assert_eq!(r.json["findings"].as_array().unwrap().len(), 10);
    assert!(!r.json["report"].as_str().unwrap().is_empty());
    assert_eq!(r.trace_header.as_deref(), r.json["trace_id"].as_str());
}

#[tokio::test]
async fn async_report_returns_poll_url() {
    let app = app_with_study(true).await;
    let r = post_json(&app, "/v1/report", json!({"study_id": "s1", "session": "s1"})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let poll = r.json["poll_url"].as_str().unwrap().to_string();
    assert_eq!(r.headers.get("location").unwrap(), poll.as_str());
    assert!(r.trace_header.is_some());

    let mut done = None;
    for _ in 0..500 {
        let p = get(&app, &poll).await;
        assert_eq!(p.status, StatusCode::OK);
        if p.json["status"] != "running" {
            done = Some(p);
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let done = done.expect("job finished");
    assert_eq!(done.json["status"], "done", "{}", done.json);
    assert_eq!(done.json["result"]["findings"].as_array().unwrap().len(), 10);
    assert_eq!(done.trace_header.as_deref(), done.json["result"]["trace_id"].as_str());

    let r = post_json(&app, "/v1/report", json!({"study_id": "nope"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/v1/jobs/unknown").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn studies_upload_and_listing() {
    let (app, state) = app(&mock_config());
    let r = get(&app, "/v1/studies").await;
    assert_eq!(r.json["studies"].as_array().unwrap().len(), 0);

    let r = upload(&app, "ct-001", synthetic("x", 1).to_bytes().unwrap()).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.json["study_id"], "ct-001");
    let r = get(&app, "/v1/studies").await;
    assert_eq!(r.json["studies"].as_array().unwrap().len(), 1);
    assert!(state.engine.study("ct-001").is_ok());

    let mut bytes = synthetic("x", 1).to_bytes().unwrap();
    bytes[0] = b'X';
    let r = upload(&app, "bad", bytes).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(!r.json["message"].as_str().unwrap().is_empty());

    let r = upload(&app, "bad%20id", synthetic("x", 1).to_bytes().unwrap()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json["error"], "InvalidStudyId");
}

#[tokio::test]
async fn health_reports_counts() {
    let app = app_with_study(false).await;
    let r = get(&app, "/v1/health").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json["status"], "ok");
    assert_eq!(r.json["studies"], 1);
    assert_eq!(r.json["in_flight"], 0);
    assert!(r.trace_header.is_some());
}

#[tokio::test]
async fn malformed_requests_still_carry_trace_ids() {
    let app = app_with_study(false).await;
    let r = post_json(&app, "/v1/qa", json!({"question": "missing study id"})).await;
    assert!(r.status.is_client_error());
    assert!(r.trace_header.is_some());
    let r = get(&app, "/v1/no-such-route").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert!(r.trace_header.is_some());
}
