//! HTTP bridge between an exported viewer bundle and the pose math.
//!
//! `GET /manifest` returns the bundle manifest, `GET /assets/<file>` any
//! file the manifest lists, and `POST /pose` the polygon frames of a
//! [`PoseRequest`] as a one-pose frames file.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use meshsplat::io::{frames_for_request, is_plain_relative, Bundle, PoseRequest, MANIFEST_FILE};

pub const SEQ_HEADER: &str = "x-pose-seq";

pub fn router(bundle: Arc<Bundle>) -> Router {
    Router::new()
        .route("/manifest", get(manifest))
        .route("/assets/{*file}", get(asset))
        .route("/pose", post(pose))
        .with_state(bundle)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], msg.into()).into_response()
}

fn content_type(file: &str) -> &'static str {
    if file.ends_with(".json") {
        "application/json"
    } else {
        "application/octet-stream"
    }
}

async fn read(bundle: &Bundle, file: &str) -> Response {
    match tokio::fs::read(bundle.dir.join(file)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(file))], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("{file}: {e}")),
    }
}

async fn manifest(State(bundle): State<Arc<Bundle>>) -> Response {
    read(&bundle, MANIFEST_FILE).await
}

async fn asset(State(bundle): State<Arc<Bundle>>, Path(file): Path<String>) -> Response {
    if !is_plain_relative(&file) || !bundle.manifest.files().contains(&file.as_str()) {
        return error(StatusCode::NOT_FOUND, format!("no asset '{file}' in this bundle"));
    }
    read(&bundle, &file).await
}

async fn pose(State(bundle): State<Arc<Bundle>>, body: Bytes) -> Response {
    let req: PoseRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("bad pose request: {e}")),
    };
    let seq = req.seq;
    let result = tokio::task::spawn_blocking(move || frames_for_request(&bundle.mesh, &req)).await;
    match result {
        Ok(Ok(bytes)) => {
            let mut headers = HeaderMap::new();
            headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
            if let Some(s) = seq {
                headers.insert(SEQ_HEADER, HeaderValue::from(s));
            }
            (headers, bytes).into_response()
        }
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Serves `bundle` on `addr` until the process is stopped.
pub fn serve(bundle: Bundle, addr: &str) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("serving {} on http://{}", bundle.dir.display(), listener.local_addr()?);
        axum::serve(listener, router(Arc::new(bundle))).await
    })
}
