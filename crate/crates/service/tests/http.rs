use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use http_body_util::BodyExt;
use latent_steer::trainer::Silent;
use latent_steer::*;
use latent_steer_service::*;
use serde_json::{json, Value};
use tower::ServiceExt;

fn bundle() -> ModelBundle {
    ModelBundle::toy(ToyConfig::default()).unwrap()
}

fn app_with(editor: LoadedEditor, config: ServiceConfig) -> Router {
    let model = Model::new(bundle(), editor).unwrap();
    router(AppState::new(Some(model), config))
}

fn app() -> Router {
    app_with(LoadedEditor::ToyOracle, ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, seed: u64) -> SessionView {
    let (status, v) = json_call(app, "POST", "/session", Some(json!({"source": {"seed": seed}}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn edit(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    json_call(app, "POST", &format!("/session/{id}/edit"), Some(body)).await
}

fn decode_png(b64: &str) -> Image {
    Image::from_png(&STANDARD.decode(b64).unwrap()).unwrap()
}

#[tokio::test]
async fn attributes_list_toy_names_in_order() {
    let (status, v) = json_call(&app(), "GET", "/attributes", None).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<AttributeInfo> = serde_json::from_value(v).unwrap();
    let names: Vec<&str> = list.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["background", "size", "disk"]);
    assert!(list.iter().enumerate().all(|(i, a)| a.index == i && a.latent_dim == 8 && a.num_attributes == 3));
}

#[tokio::test]
async fn without_checkpoint_everything_is_unavailable() {
    let app = router(AppState::new(None, ServiceConfig::default()));
    assert_eq!(call(&app, "GET", "/attributes", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&app, "POST", "/session", Some(json!({"source": {"seed": 1}}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn same_seed_same_original() {
    let app = app();
    let a = new_session(&app, 7).await;
    let b = new_session(&app, 7).await;
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.original, b.original);
    assert!(a.inversion_mse.is_none());
}

#[tokio::test]
async fn image_source_reports_inversion_mse() {
    let app = app();
    let target = EditSession::from_seed(&bundle(), 12).unwrap().original().to_png().unwrap();
    let (status, v) = json_call(&app, "POST", "/session", Some(json!({"source": {"image": STANDARD.encode(target)}}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let mse = v["inversion_mse"].as_f64().unwrap();
    assert!(mse <= 1e-3, "{mse}");
}

#[tokio::test]
async fn bad_bodies_and_images_are_rejected() {
    let app = app();
    for body in [json!({}), json!({"source": {"seed": -1}}), json!({"source": "seed"}), json!([1, 2])] {
        assert_eq!(call(&app, "POST", "/session", Some(body)).await.0, StatusCode::BAD_REQUEST);
    }
    let (status, _) = call(&app, "POST", "/session", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    for data in ["not base64!!".to_string(), STANDARD.encode(b"not a png")] {
        let (status, _) = call(&app, "POST", "/session", Some(json!({"source": {"image": data}}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let small = Image::filled(4, 4, 0.5).to_png().unwrap();
    let (status, _) = call(&app, "POST", "/session", Some(json!({"source": {"image": STANDARD.encode(small)}}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn empty_delta_keeps_image_and_identity_one() {
    let app = app();
    let s = new_session(&app, 3).await;
    let (status, v) = edit(&app, &s.session_id, json!({"delta": {}})).await;
    assert_eq!(status, StatusCode::OK);
    let r: EditResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.image, s.original);
    assert!((r.identity - 1.0).abs() < 1e-12);
    assert_eq!(r.attributes, s.attributes);
}

#[tokio::test]
async fn absolute_target_at_current_value_applies_nothing() {
    let app = app();
    let s = new_session(&app, 4).await;
    let body = json!({"delta": {"disk": s.attributes[2]}, "mode": "absolute-target"});
    let (status, v) = edit(&app, &s.session_id, body).await;
    assert_eq!(status, StatusCode::OK);
    let r: EditResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.applied, vec![0.0; 3]);
    assert_eq!(r.image, s.original);
}

#[tokio::test]
async fn edit_errors() {
    let app = app();
    let s = new_session(&app, 5).await;
    let unknown = uuid::Uuid::new_v4();
    for id in [unknown.to_string(), "nope".to_string()] {
        let (status, _) = edit(&app, &id, json!({"delta": {"size": 0.1}})).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(call(&app, "POST", &format!("/session/{id}/reset"), None).await.0, StatusCode::NOT_FOUND);
        assert_eq!(call(&app, "GET", &format!("/session/{id}/image"), None).await.0, StatusCode::NOT_FOUND);
    }
    let (status, v) = edit(&app, &s.session_id, json!({"delta": {"smile": 0.1}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("smile"));
    let (status, _) = edit(&app, &s.session_id, json!({"delta": {"size": "big"}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = edit(&app, &s.session_id, json!({"delta": {}, "mode": "sideways"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn clipping_is_reported_in_the_response() {
    let app = app();
    let s = new_session(&app, 6).await;
    let (_, v) = edit(&app, &s.session_id, json!({"delta": {"background": 1.0}})).await;
    let r: EditResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.requested, vec![1.0, 0.0, 0.0]);
    assert!((r.applied[0] - (1.0 - s.attributes[0])).abs() < 1e-12);
    assert!((r.clip_adjustments[0] - (r.applied[0] - 1.0)).abs() < 1e-12);
    assert!(r.attributes.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!((-1.0..=1.0).contains(&r.identity));
}

#[tokio::test]
async fn reset_restores_original_and_image_is_png() {
    let app = app();
    let s = new_session(&app, 8).await;
    let id = &s.session_id;
    let (status, v) = json_call(&app, "POST", &format!("/session/{id}/reset"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["original"].as_str().unwrap(), s.original);

    edit(&app, id, json!({"delta": {"size": 0.3}})).await;
    let (_, png) = call(&app, "GET", &format!("/session/{id}/image"), None).await;
    assert_ne!(STANDARD.encode(&png), s.original);

    let (status, v) = json_call(&app, "POST", &format!("/session/{id}/reset"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["attributes"], json!(s.attributes));
    let resp = app
        .clone()
        .oneshot(Request::get(format!("/session/{id}/image")).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    let png = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(STANDARD.encode(&png), s.original);
}

/// Two clients edit their own sessions concurrently, 50 edits each. Replaying
/// each session's applied shifts from its seed must reproduce the image the
/// service serves, bitwise.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_sessions_stay_isolated_and_replayable() {
    let app = app();
    let seeds = [21u64, 22];
    let mut sessions = Vec::new();
    for seed in seeds {
        sessions.push(new_session(&app, seed).await.session_id);
    }
    let names = ["background", "size", "disk"];
    let mut tasks = Vec::new();
    for (k, id) in sessions.iter().enumerate() {
        let app = app.clone();
        let id = id.clone();
        tasks.push(tokio::spawn(async move {
            let mut applied = Vec::new();
            for j in 0..50 {
                let v = 0.15 * if (j + k) % 2 == 0 { 1.0 } else { -1.0 };
                let body = json!({"delta": {names[(j + k) % 3]: v}});
                let (status, resp) = edit(&app, &id, body).await;
                assert_eq!(status, StatusCode::OK);
                applied.push(serde_json::from_value::<EditResponse>(resp).unwrap().applied);
                tokio::task::yield_now().await;
            }
            applied
        }));
    }
    let b = bundle();
    for ((task, id), seed) in tasks.into_iter().zip(&sessions).zip(seeds) {
        let applied = task.await.unwrap();
        let mut z = EditSession::from_seed(&b, seed).unwrap().latent().clone();
        for d in &applied {
            z = OracleEditor.edit(&z, &EditDelta::new(d.clone()).unwrap()).unwrap();
        }
        let expected = b.generator.generate(&z).unwrap().to_png().unwrap();
        let (_, served) = call(&app, "GET", &format!("/session/{id}/image"), None).await;
        assert_eq!(served, expected, "session {seed}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_on_one_session_are_queued() {
    let app = app();
    let id = new_session(&app, 30).await.session_id;
    let mut tasks = Vec::new();
    for _ in 0..16 {
        let app = app.clone();
        let id = id.clone();
        tasks.push(tokio::spawn(async move { edit(&app, &id, json!({"delta": {"size": 0.01}})).await.0 }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
}

#[tokio::test]
async fn trained_checkpoint_background_edit_lands_within_tolerance() {
    let b = bundle();
    let (t, _) = train(TrainConfig::toy(), b.clone(), TransformKind::GlobalLinear, &mut Silent).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.json");
    latent_steer::persist::Checkpoint::for_transform(&t).save(&path).unwrap();
    let model = Model::load(&path).unwrap();
    let app = router(AppState::new(Some(model), ServiceConfig::default()));

    let mut checked = 0;
    for seed in 0..40u64 {
        let s = new_session(&app, seed).await;
        let base = &s.attributes;
        // Keep the +0.3 request unclipped.
        if base[0] > 0.7 {
            continue;
        }
        let (_, v) = edit(&app, &s.session_id, json!({"delta": {"background": 0.3}})).await;
        let r: EditResponse = serde_json::from_value(v).unwrap();
        assert!((r.attributes[0] - (base[0] + 0.3)).abs() <= 0.07, "seed {seed}: base {base:?} edited {:?}", r.attributes);
        for i in 1..3 {
            assert!((r.attributes[i] - base[i]).abs() <= 0.05, "seed {seed}: base {base:?} edited {:?}", r.attributes);
        }
        let edited = decode_png(&r.image);
        assert_eq!(edited.shape(), (32, 32));
        checked += 1;
    }
    assert!(checked >= 10);
}

#[tokio::test]
async fn reject_policy_still_serves_uncontended_edits() {
    let config = ServiceConfig {
        busy: BusyPolicy::Reject,
        ..ServiceConfig::default()
    };
    let app = app_with(LoadedEditor::ToyOracle, config);
    let s = new_session(&app, 9).await;
    let (status, _) = edit(&app, &s.session_id, json!({"delta": {"size": 0.1}})).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn model_rejects_mismatched_editor() {
    let t = TransformModule::init(TransformKind::GlobalLinear, 5, 3, &mut SeededRng::new(1)).unwrap();
    assert!(Model::new(bundle(), LoadedEditor::Transform(t)).is_err());
}
