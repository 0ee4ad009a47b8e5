//! Kept in its own binary: the outbound counter is process-wide.

mod common;

use axum::http::StatusCode;
use clap::Parser;
use common::*;
use ctagent::cli::{execute, Cli};
use ctagent_core::backend::outbound_attempts;
use serde_json::json;

#[tokio::test]
async fn mock_service_never_touches_the_network() {
    assert_eq!(outbound_attempts(), 0);
    let (app, _) = app(&mock_config());
    assert_eq!(upload(&app, "s1", synthetic("s1", 9).to_bytes().unwrap()).await.status, StatusCode::CREATED);
    for q in ["Is there fluid around the heart?", "Is there any abnormality in the lung?", "Are the bones intact?"] {
        let r = post_json(&app, "/v1/qa", json!({"study_id": "s1", "question": q, "session": "s"})).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.json);
    }
    let r = post_json(&app, "/v1/report", json!({"study_id": "s1", "session": "s"})).await;
    assert_eq!(r.status, StatusCode::OK);
    get(&app, "/v1/history?session=s").await;
    get(&app, "/v1/health").await;
    assert_eq!(outbound_attempts(), 0);
}

#[test]
fn mock_cli_never_touches_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let study = dir.path().join("s.ctfv");
    let study = study.to_str().unwrap();
    let run = |args: &[&str]| {
        let cli = Cli::try_parse_from(std::iter::once("ctagent").chain(args.iter().copied())).unwrap();
        let mut out = Vec::new();
        execute(&cli, &mut out).unwrap();
        String::from_utf8(out).unwrap()
    };
    run(&["synth", "--seed", "2", "--out", study]);
    let answer = run(&["--mock", "qa", "--study", study, "--question", "Is there any abnormality in the lung?"]);
    assert!(!answer.trim().is_empty());
    run(&["--mock", "report", "--study", study]);
    assert_eq!(outbound_attempts(), 0);
}
