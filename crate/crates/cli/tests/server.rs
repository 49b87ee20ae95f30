use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use petalgan::nets::build_generator;
use petalgan::serve::{ModelChoice, ModelInfo, ModelRegistry};
use petalgan::{GeneratorVariant, ImageTensor, ValueRange};
use petalgan_cli::server::{router, ApiError, AppState, ModelsResponse};
use tower::ServiceExt;

const BOUNDARY: &str = "test-boundary";

fn app(static_dir: Option<std::path::PathBuf>) -> Router {
    let mut registry = ModelRegistry::default();
    registry.insert(
        ModelInfo {
            tag: ModelChoice::TypeI,
            variant: GeneratorVariant::Baseline,
            epoch: 0,
            fingerprint: "test".into(),
        },
        build_generator(GeneratorVariant::Baseline, 3).unwrap(),
    );
    router(AppState::new(registry, 1), static_dir)
}

fn multipart(fields: &[(&str, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, value) in fields {
        let disposition = if *name == "image" {
            format!("form-data; name=\"{name}\"; filename=\"in.png\"\r\nContent-Type: image/png")
        } else {
            format!("form-data; name=\"{name}\"")
        };
        body.extend(format!("--{BOUNDARY}\r\nContent-Disposition: {disposition}\r\n\r\n").as_bytes());
        body.extend_from_slice(value);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/transfer")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    (
        status,
        ctype,
        resp.into_body().collect().await.unwrap().to_bytes().to_vec(),
    )
}

fn api_error(body: &[u8]) -> ApiError {
    serde_json::from_slice(body).unwrap()
}

fn probe_png(w: usize, h: usize) -> Vec<u8> {
    let data = (0..3 * w * h).map(|i| (i % 17) as f32 / 16.0).collect();
    ImageTensor::new(3, h, w, data, ValueRange::Raw01)
        .unwrap()
        .encode_png()
        .unwrap()
}

#[tokio::test]
async fn healthz_answers() {
    let (status, _, body) = send(app(None), Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[tokio::test]
async fn models_lists_loaded_generators_and_resolutions() {
    let (status, _, body) = send(app(None), Request::get("/api/models").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let parsed: ModelsResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(parsed.models.len(), 1);
    assert_eq!(parsed.models[0].tag, ModelChoice::TypeI);
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(json["resolutions"], serde_json::json!([256, 512]));
    assert_eq!(json["models"][0]["tag"], "type_I");
}

#[tokio::test]
async fn unsupported_resolution_is_rejected_before_inference() {
    let req = multipart(&[("image", b"not an image"), ("model", b"type_I"), ("resolution", b"300")]);
    let (status, _, body) = send(app(None), req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err = api_error(&body);
    assert_eq!(err.code, "validation_error");
    assert_eq!(err.field.as_deref(), Some("resolution"));
}

#[tokio::test]
async fn missing_field_names_the_field() {
    let req = multipart(&[("model", b"type_I"), ("resolution", b"256")]);
    let (status, _, body) = send(app(None), req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(api_error(&body).field.as_deref(), Some("image"));
}

#[tokio::test]
async fn unloaded_model_is_not_found() {
    let req = multipart(&[
        ("image", &probe_png(8, 8)),
        ("model", b"type_II"),
        ("resolution", b"256"),
    ]);
    let (status, _, body) = send(app(None), req).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(api_error(&body).code, "model_unavailable");
}

#[tokio::test]
async fn garbage_image_is_a_client_error() {
    let req = multipart(&[
        ("image", b"definitely not a png"),
        ("model", b"type_I"),
        ("resolution", b"256"),
    ]);
    let (status, _, body) = send(app(None), req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(api_error(&body).code, "invalid_image");
}

#[tokio::test]
async fn transfer_returns_png_at_target_size() {
    let req = || {
        multipart(&[
            ("image", &probe_png(48, 32)),
            ("model", b"type_I"),
            ("resolution", b"256"),
        ])
    };
    let (status, ctype, first) = send(app(None), req()).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&first));
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let img = ImageTensor::decode(&first).unwrap();
    assert_eq!((img.width(), img.height()), (384, 256));
    let (_, _, second) = send(app(None), req()).await;
    assert_eq!(first, second);
}

#[tokio::test]
async fn unknown_api_route_is_json_404() {
    let (status, _, body) = send(app(None), Request::get("/api/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(api_error(&body).code, "not_found");
}

#[tokio::test]
async fn static_dir_is_served_with_index_fallback() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>studio</html>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let root = Some(dir.path().to_path_buf());

    let (status, _, body) = send(app(root.clone()), Request::get("/app.js").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"console.log(1)");
    let (status, _, body) = send(
        app(root.clone()),
        Request::get("/gallery/3").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>studio</html>");
    // API routes still win over the static tree.
    let (status, _, _) = send(app(root), Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}
