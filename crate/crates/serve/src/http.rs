use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::service::{ApiError, Route, ServiceState, MAX_BODY_BYTES};

fn json(status: u16, body: Vec<u8>) -> Response {
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(e: ApiError) -> Response {
    json(e.status, e.body())
}

async fn dispatch(state: Arc<ServiceState>, route: Route, body: Body) -> Response {
    // One extra byte tells "exactly at the limit" from "over it".
    let bytes = match to_bytes(body, MAX_BODY_BYTES + 1).await {
        Ok(b) if b.len() <= MAX_BODY_BYTES => b,
        Ok(b) => return error(ApiError::too_large(b.len())),
        Err(_) => return error(ApiError::too_large(MAX_BODY_BYTES + 1)),
    };
    match tokio::task::spawn_blocking(move || state.handle(route, &bytes)).await {
        Ok((status, body)) => json(status, body),
        Err(e) => error(ApiError::new(500, "internal", e.to_string())),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/health", get(|State(s): State<Arc<ServiceState>>| async move { json(200, serde_json::to_vec(&s.health()).expect("serializes")) }))
        .route("/v1/segment", post(|State(s): State<Arc<ServiceState>>, body: Body| dispatch(s, Route::Segment, body)))
        .route("/v1/correct", post(|State(s): State<Arc<ServiceState>>, body: Body| dispatch(s, Route::Correct, body)))
        .method_not_allowed_fallback(|| async { error(ApiError::new(405, "method_not_allowed", "method not allowed")) })
        .fallback(|| async { error(ApiError::new(404, "not_found", "no such route")) })
        .layer(axum::extract::DefaultBodyLimit::disable())
        .with_state(state)
}

pub async fn serve(state: ServiceState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
