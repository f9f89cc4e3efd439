use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use serde_json::Value;
use tower::ServiceExt;

use thematic_server::{router, AppState, Config};

fn concrete(path: &str) -> String {
    path.replace("{project}", "p")
        .replace("{doc_id}", "1")
        .replace("{phase}", "themes")
        .replace("{name}", "x")
        .replace("{label}", "x")
        .replace("{filename}", "f.csv")
        .replace("{step}", "1")
        .replace("{job_id}", "00000000-0000-0000-0000-000000000000")
}

/// Every documented operation is routed: none falls through to the
/// catch-all or gets 405.
#[tokio::test]
async fn every_documented_operation_is_served() {
    let doc: Value = serde_json::from_str(thematic_server::routes::OPENAPI).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = Config {
        projects_root: dir.path().join("projects"),
        credential_store: dir.path().join("credentials.json"),
        prompt_dir: dir.path().join("prompts"),
        ..Config::default()
    };
    let app = router(AppState::from_config(&config).unwrap());
    let mut checked = 0;
    for (path, item) in doc["paths"].as_object().unwrap() {
        for method in item.as_object().unwrap().keys() {
            let uri = format!("/api/v1{}", concrete(path));
            let request = Request::builder()
                .method(Method::from_bytes(method.to_uppercase().as_bytes()).unwrap())
                .uri(&uri)
                .header("content-type", "application/json")
                .body(Body::from("{}"))
                .unwrap();
            let response = app.clone().oneshot(request).await.unwrap();
            let status = response.status();
            let body = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            assert_ne!(status, StatusCode::METHOD_NOT_ALLOWED, "{method} {uri}");
            assert_ne!(body["message"], "no such route", "{method} {uri}");
            checked += 1;
        }
    }
    assert!(checked >= 35, "{checked}");
}

#[test]
fn document_is_valid_openapi_shape() {
    let doc: Value = serde_json::from_str(thematic_server::routes::OPENAPI).unwrap();
    assert_eq!(doc["openapi"], "3.1.0");
    let schemas = doc["components"]["schemas"].as_object().unwrap();
    let text = thematic_server::routes::OPENAPI;
    for r in text.split("\"$ref\": \"#/components/schemas/").skip(1) {
        let name = &r[..r.find('"').unwrap()];
        assert!(schemas.contains_key(name), "dangling ref {name}");
    }
}
