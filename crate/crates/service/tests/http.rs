mod common;

use base64::Engine as _;
use common::*;
use pavescan_service::inference::gradcam_image;
use pavescan_service::server::{AppState, ServerConfig};
use pavescan_service::{
    detect_image, ClassesResponse, DetectParams, DetectionResponse, ErrorResponse, FrameRecord, FramesResponse,
    GradcamParams, GradcamResponse, HealthResponse, SCHEMA_VERSION,
};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

const LOW: DetectParams = DetectParams { conf: 0.05, nms_iou: 0.45 };

async fn post_png(client: &reqwest::Client, addr: std::net::SocketAddr, path: &str, png: Vec<u8>) -> reqwest::Response {
    let form = Form::new().part("image", Part::bytes(png).file_name("x.png").mime_str("image/png").unwrap());
    client.post(url(addr, path)).multipart(form).send().await.unwrap()
}

async fn error_of(r: reqwest::Response) -> ErrorResponse {
    let e: ErrorResponse = r.json().await.unwrap();
    assert_eq!(e.schema_version, SCHEMA_VERSION);
    e
}

/// Sends raw bytes and returns the status code of the reply.
async fn raw_request(addr: std::net::SocketAddr, request: &[u8]) -> (u16, String) {
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(request).await.unwrap();
    let mut buf = Vec::new();
    let _ = s.read_to_end(&mut buf).await;
    let text = String::from_utf8_lossy(&buf).to_string();
    let code = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    (code, text)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_reports_loading_then_ready() {
    let state = AppState::new(ServerConfig::default());
    let addr = spawn(state.clone()).await;
    let c = reqwest::Client::new();
    let r = c.get(url(addr, "/healthz")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    let h: HealthResponse = r.json().await.unwrap();
    assert_eq!((h.schema_version, h.status.as_str(), h.model_id), (SCHEMA_VERSION, "loading", None));

    let r = c.get(url(addr, "/classes")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_of(r).await.error.kind, "not_ready");
    let r = post_png(&c, addr, "/detect", road_png(0)).await;
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);

    let m = test_model(1);
    let id = m.model_id().to_string();
    state.set_model(m);
    let r = c.get(url(addr, "/healthz")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let h: HealthResponse = r.json().await.unwrap();
    assert_eq!((h.status.as_str(), h.model_id), ("ready", Some(id)));

    let cl: ClassesResponse = c.get(url(addr, "/classes")).send().await.unwrap().json().await.unwrap();
    assert_eq!(cl.schema_version, SCHEMA_VERSION);
    let names: Vec<_> = cl.classes.iter().map(|e| (e.id, e.name.as_str())).collect();
    assert_eq!(names, [(0, "pothole"), (1, "longitudinal_crack"), (2, "alligator_crack"), (3, "raveling")]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn detect_matches_the_library_for_raw_and_multipart_uploads() {
    let m = test_model(2);
    let addr = spawn_with_model(test_model(2), ServerConfig::default()).await;
    let c = reqwest::Client::new();
    for i in 0..4 {
        let png = road_png(i);
        let want = detect_image(&m, &png, &LOW).unwrap().without_timing();
        let r = post_png(&c, addr, "/detect?conf=0.05&nms=0.45", png.clone()).await;
        assert_eq!(r.status(), StatusCode::OK);
        let got: DetectionResponse = r.json().await.unwrap();
        assert_eq!(got.without_timing(), want);
        let raw: DetectionResponse = c
            .post(url(addr, "/detect?conf=0.05"))
            .header("content-type", "image/png")
            .body(png)
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(raw.without_timing(), want);
    }
    let d: DetectionResponse = post_png(&c, addr, "/detect", road_png(0)).await.json().await.unwrap();
    assert_eq!((d.thresholds.confidence, d.thresholds.nms_iou), (0.25, 0.45));
    let d: DetectionResponse = post_png(&c, addr, "/detect?conf=1", road_png(0)).await.json().await.unwrap();
    assert!(d.detections.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_get_structured_errors() {
    let addr = spawn_with_model(test_model(1), ServerConfig::default()).await;
    let c = reqwest::Client::new();
    for q in ["conf=abc", "conf=2", "nms=-1"] {
        let r = post_png(&c, addr, &format!("/detect?{q}"), road_png(0)).await;
        assert_eq!(r.status(), StatusCode::BAD_REQUEST, "{q}");
        let e = error_of(r).await;
        assert_eq!((e.error.status, e.error.kind.as_str()), (400, "bad_request"));
    }
    let r = post_png(&c, addr, "/detect", b"not an image".to_vec()).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c.post(url(addr, "/detect")).body(Vec::<u8>::new()).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let form = Form::new().text("note", "no image here");
    let r = c.post(url(addr, "/detect")).multipart(form).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c.get(url(addr, "/nowhere")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_multipart_is_a_client_error() {
    let addr = spawn_with_model(test_model(1), ServerConfig::default()).await;
    let c = reqwest::Client::new();
    for (ct, body) in [
        ("multipart/form-data; boundary=XYZ", &b"--XYZ\r\nContent-Disposition: form-data; name=\"image\"\r\n\r\ntruncated"[..]),
        ("multipart/form-data", &b"--XYZ\r\n\r\n"[..]),
        ("multipart/form-data; boundary=XYZ", &b"garbage without any boundary"[..]),
    ] {
        for path in ["/detect", "/detect-frames", "/gradcam"] {
            let r = c.post(url(addr, path)).header("content-type", ct).body(body.to_vec()).send().await.unwrap();
            assert!(r.status().is_client_error(), "{path} {ct}: {}", r.status());
            error_of(r).await;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oversized_uploads_name_the_limit() {
    let config = ServerConfig { max_upload_bytes: 2000, ..ServerConfig::default() };
    let addr = spawn_with_model(test_model(1), config).await;
    let c = reqwest::Client::new();
    let big = vec![7u8; 5000];
    for path in ["/detect", "/detect-frames", "/gradcam"] {
        let r = c.post(url(addr, path)).header("content-type", "image/png").body(big.clone()).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::PAYLOAD_TOO_LARGE);
        let e = error_of(r).await;
        assert!(e.error.message.contains("2000"), "{}", e.error.message);
    }
    // no declared length: the limit is enforced while reading
    let mut req = format!("POST /detect HTTP/1.1\r\nhost: x\r\ntransfer-encoding: chunked\r\ncontent-type: image/png\r\nconnection: close\r\n\r\n").into_bytes();
    for _ in 0..5 {
        req.extend_from_slice(b"3e8\r\n");
        req.extend_from_slice(&[1u8; 1000]);
        req.extend_from_slice(b"\r\n");
    }
    req.extend_from_slice(b"0\r\n\r\n");
    let (code, text) = raw_request(addr, &req).await;
    assert_eq!(code, 413);
    assert!(text.contains("2000"));
}

fn tar_of(frames: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    for (name, bytes) in frames {
        let mut h = tar::Header::new_gnu();
        h.set_size(bytes.len() as u64);
        h.set_mode(0o644);
        b.append_data(&mut h, name, bytes.as_slice()).unwrap();
    }
    b.into_inner().unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frame_sequences_over_multipart_tar_and_ndjson() {
    let m = test_model(3);
    let addr = spawn_with_model(test_model(3), ServerConfig::default()).await;
    let c = reqwest::Client::new();
    let frames: Vec<(String, Vec<u8>)> = (0..4).map(|i| (format!("frame{i}.png"), road_png(i))).collect();
    let mut bad = frames.clone();
    bad[2].1 = b"corrupt".to_vec();
    let want: Vec<Option<DetectionResponse>> = bad
        .iter()
        .map(|(_, b)| detect_image(&m, b, &LOW).ok().map(|r| r.without_timing()))
        .collect();
    let check = |recs: &[FrameRecord]| {
        assert_eq!(recs.len(), 4);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!((r.index, r.name.as_str()), (i, bad[i].0.as_str()));
            assert_eq!(r.response.as_ref().map(|x| x.without_timing()), want[i]);
            assert_eq!(r.error.is_some(), i == 2);
        }
    };

    let mut form = Form::new();
    for (name, bytes) in &bad {
        form = form.part("frames", Part::bytes(bytes.clone()).file_name(name.clone()));
    }
    let r = c.post(url(addr, "/detect-frames?conf=0.05")).multipart(form).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let f: FramesResponse = r.json().await.unwrap();
    assert_eq!((f.schema_version, f.model_id.as_str()), (SCHEMA_VERSION, m.model_id()));
    check(&f.frames);

    let r = c
        .post(url(addr, "/detect-frames?conf=0.05"))
        .header("content-type", "application/x-tar")
        .body(tar_of(&bad))
        .send()
        .await
        .unwrap();
    check(&r.json::<FramesResponse>().await.unwrap().frames);

    let r = c
        .post(url(addr, "/detect-frames?conf=0.05&format=ndjson"))
        .header("content-type", "application/x-tar")
        .body(tar_of(&bad))
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["content-type"], "application/x-ndjson");
    let text = r.text().await.unwrap();
    let recs: Vec<FrameRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    check(&recs);

    let r = c.post(url(addr, "/detect-frames")).header("content-type", "application/x-tar").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert!(r.json::<FramesResponse>().await.unwrap().frames.is_empty());

    let r = c.post(url(addr, "/detect-frames?format=xml")).body(tar_of(&frames)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c.post(url(addr, "/detect-frames")).header("content-type", "text/plain").body("hi").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gradcam_returns_grid_and_overlay() {
    let m = test_model(4);
    let addr = spawn_with_model(test_model(4), ServerConfig::default()).await;
    let c = reqwest::Client::new();
    let img = road_image(5);
    let png = encode_png(&img);
    let n = detect_image(&m, &png, &LOW).unwrap().detections.len();
    assert!(n >= 2);
    let r = post_png(&c, addr, "/gradcam?conf=0.05&detection=1&alpha=0.4", png.clone()).await;
    assert_eq!(r.status(), StatusCode::OK);
    let g: GradcamResponse = r.json().await.unwrap();
    let want = gradcam_image(&m, &png, &GradcamParams { detect: LOW, detection: Some(1), layer: None, alpha: 0.4 }).unwrap();
    assert_eq!(g, want.response);
    assert_eq!(g.schema_version, SCHEMA_VERSION);
    assert_eq!((g.detection_index, g.alpha), (Some(1), 0.4));
    let overlay = base64::engine::general_purpose::STANDARD.decode(&g.overlay_png).unwrap();
    let overlay = image::load_from_memory(&overlay).unwrap().to_rgb8();
    assert_eq!(overlay, want.overlay);
    assert_eq!(overlay.dimensions(), img.dimensions());

    let r = post_png(&c, addr, &format!("/gradcam?conf=0.05&detection={n}"), png.clone()).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = post_png(&c, addr, "/gradcam?layer=nowhere", png).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert!(error_of(r).await.error.message.contains("backbone"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_equal_sequential_and_leave_weights_alone() {
    let state = AppState::with_model(ServerConfig { max_concurrent: 2, ..ServerConfig::default() }, test_model(5));
    let before = state.model().unwrap().weights_hash();
    let addr = spawn(state.clone()).await;
    let c = reqwest::Client::new();
    let pngs: Vec<Vec<u8>> = (0..8).map(road_png).collect();
    let mut sequential = Vec::new();
    for p in &pngs {
        let r: DetectionResponse = post_png(&c, addr, "/detect?conf=0.05", p.clone()).await.json().await.unwrap();
        sequential.push(r.without_timing());
    }
    let tasks: Vec<_> = pngs
        .iter()
        .cloned()
        .map(|p| {
            let c = c.clone();
            tokio::spawn(async move { post_png(&c, addr, "/detect?conf=0.05", p).await.json::<DetectionResponse>().await.unwrap() })
        })
        .collect();
    for (t, want) in tasks.into_iter().zip(&sequential) {
        assert_eq!(&t.await.unwrap().without_timing(), want);
    }
    assert_eq!(state.model().unwrap().weights_hash(), before);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn static_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let config = ServerConfig { static_dir: Some(dir.path().to_path_buf()), ..ServerConfig::default() };
    let addr = spawn_with_model(test_model(1), config).await;
    let c = reqwest::Client::new();
    let r = c.get(url(addr, "/")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.text().await.unwrap(), "<html>ui</html>");
    let r = c.get(url(addr, "/healthz")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
}
