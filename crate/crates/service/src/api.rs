use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pilrecon_core::geometry::{GridSpec, LatitudeMode};
use pilrecon_core::raster::{decode, encode_confidence, encode_polarity, AnyRaster, RasterKind};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::error::ApiError;
use crate::state::{submit, AppState, JobInput, ReconstructOptions, Session, Shared};
use crate::ServiceConfig;

pub fn router(config: ServiceConfig) -> Router {
    let cors = match &config.cors_origin {
        Some(origin) => CorsLayer::new()
            .allow_origin(origin.parse::<HeaderValue>().expect("valid origin header"))
            .allow_methods(Any)
            .allow_headers(Any),
        None => CorsLayer::permissive(),
    };
    // multipart framing needs some room beyond the raster itself
    let body_limit = config.max_upload_bytes + 64 * 1024;
    let state: Shared = Arc::new(AppState::new(config));
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/points", post(edit_points))
        .route("/api/sessions/{id}/reconstruct", post(start_reconstruction))
        .route("/api/sessions/{id}/results/{version}", get(get_result))
        .route("/api/jobs/{id}", get(get_job))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors)
        .with_state(state)
}

fn parse_json<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn create_session(
    State(state): State<Shared>,
    mut multipart: Multipart,
) -> Result<Response, ApiError> {
    let mut raster = None;
    let mut latitude_mode = LatitudeMode::EqualAngle;
    let limit = state.config.max_upload_bytes;
    let field_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::too_large(format!("upload exceeds {limit} bytes"))
        } else {
            ApiError::bad_request(e.body_text())
        }
    };
    while let Some(field) = multipart.next_field().await.map_err(field_err)? {
        match field.name().unwrap_or("") {
            "raster" => raster = Some(field.bytes().await.map_err(field_err)?),
            "latitude_mode" => {
                latitude_mode = field
                    .text()
                    .await
                    .map_err(field_err)?
                    .trim()
                    .parse()
                    .map_err(|e: pilrecon_core::Error| ApiError::unprocessable(e.to_string()))?
            }
            other => {
                return Err(ApiError::bad_request(format!(
                    "unexpected form field '{other}'"
                )))
            }
        }
    }
    let bytes = raster.ok_or_else(|| ApiError::bad_request("missing 'raster' form field"))?;
    if bytes.len() > limit {
        return Err(ApiError::too_large(format!(
            "raster is {} bytes, limit {limit}",
            bytes.len()
        )));
    }
    let AnyRaster::Filament(mask) = decode(&bytes, RasterKind::Filament)? else {
        unreachable!("decode returns the requested kind")
    };
    let spec = GridSpec::new(mask.height(), mask.width())?.with_latitude_mode(latitude_mode);
    let session = Session::new(mask, spec);
    let id = session.id.clone();
    let body = json!({ "id": id, "height": spec.height, "width": spec.width });
    state.snapshot_session(&session, true);
    state
        .sessions
        .write()
        .unwrap()
        .insert(id, Arc::new(std::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

fn points_json(s: &Session) -> Value {
    s.points
        .iter()
        .map(|(&(row, col), &polarity)| json!({ "row": row, "col": col, "polarity": polarity }))
        .collect()
}

async fn get_session(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().unwrap();
    Ok(Json(json!({
        "id": s.id,
        "height": s.spec.height,
        "width": s.spec.width,
        "latitude_mode": s.spec.latitude_mode.to_string(),
        "filament_pixels": s.filaments.count(),
        "points_version": s.points_version,
        "points": points_json(&s),
        "versions": s.results.keys().collect::<Vec<_>>(),
        "running_job": s.running_job,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointJson {
    row: usize,
    col: usize,
    polarity: i8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoordJson {
    row: usize,
    col: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EditRequest {
    add: Vec<PointJson>,
    remove: Vec<CoordJson>,
}

/// Applies removals, then additions, all or nothing. Adding an existing
/// position replaces its polarity.
async fn edit_points(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: EditRequest = parse_json(&body)?;
    let session = state.session(&id)?;
    let mut s = session.lock().unwrap();
    let mut next = s.points.clone();
    for c in &req.remove {
        if next.remove(&(c.row, c.col)).is_none() {
            return Err(ApiError::unprocessable(format!(
                "no point at ({}, {})",
                c.row, c.col
            )));
        }
    }
    for p in &req.add {
        s.spec.check(p.row, p.col)?;
        if p.polarity != 1 && p.polarity != -1 {
            return Err(ApiError::unprocessable(format!(
                "point ({}, {}) has polarity {}, expected +1 or -1",
                p.row, p.col, p.polarity
            )));
        }
        next.insert((p.row, p.col), p.polarity);
    }
    if !req.add.is_empty() || !req.remove.is_empty() {
        s.points = next;
        s.points_version += 1;
        state.snapshot_session(&s, false);
    }
    Ok(Json(
        json!({ "version": s.points_version, "points": points_json(&s) }),
    ))
}

async fn start_reconstruction(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let options: ReconstructOptions = parse_json(&body)?;
    let (strategy, poles, config) = options.validate(state.config.max_members)?;
    let session = state.session(&id)?;
    let (session_id, job_id, input) = {
        let mut s = session.lock().unwrap();
        if let Some(job) = &s.running_job {
            return Err(ApiError::conflict(format!(
                "job {job} is still running on this session"
            )));
        }
        let warm = (options.warm_start && !s.snapshots.is_empty()).then(|| {
            (0..options.members)
                .map(|k| s.snapshots.get(k).cloned())
                .collect::<Vec<_>>()
        });
        if config.iterations == 0 && warm.as_ref().is_none_or(|w| w.iter().any(Option::is_none)) {
            return Err(ApiError::unprocessable(
                "zero iterations needs a warm start for every member",
            ));
        }
        let input = JobInput {
            filaments: s.filaments.clone(),
            spec: s.spec,
            points: s.reference_points(),
            points_version: s.points_version,
            warm,
            options,
            strategy,
            poles,
            config,
        };
        let job_id = crate::state::new_token();
        s.running_job = Some(job_id.clone());
        (s.id.clone(), job_id, input)
    };
    submit(&state, &session, session_id, job_id.clone(), input);
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

async fn get_job(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let job = state.job(&id)?;
    let j = job.lock().unwrap();
    Ok(Json(serde_json::to_value(&*j).expect("job serializes")))
}

async fn get_result(
    State(state): State<Shared>,
    Path((id, version)): Path<(String, String)>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let (number, suffix) = match version.split_once('.') {
        Some((n, s)) => (n, Some(s)),
        None => (version.as_str(), None),
    };
    let missing = || ApiError::not_found(format!("no result version '{version}'"));
    let number: u64 = number.parse().map_err(|_| missing())?;
    let session = state.session(&id)?;
    let r = session
        .lock()
        .unwrap()
        .results
        .get(&number)
        .cloned()
        .ok_or_else(missing)?;
    let pgm = |bytes: Vec<u8>| {
        ([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes).into_response()
    };
    match suffix {
        Some("conf") => return Ok(pgm(encode_confidence(&r.result.mean_map))),
        Some("bin") => return Ok(pgm(encode_polarity(&r.result.binarized))),
        Some(_) => return Err(missing()),
        None => {}
    }
    let mean = &r.result.mean_map;
    let wants_binary = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/octet-stream"));
    if wants_binary {
        // row-major little-endian f32 confidence values
        let bytes: Vec<u8> = mean
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        return Ok((
            [
                (header::CONTENT_TYPE, "application/octet-stream".to_string()),
                (
                    header::HeaderName::from_static("x-height"),
                    mean.height().to_string(),
                ),
                (
                    header::HeaderName::from_static("x-width"),
                    mean.width().to_string(),
                ),
            ],
            bytes,
        )
            .into_response());
    }
    Ok(Json(json!({
        "version": r.version,
        "points_version": r.points_version,
        "height": mean.height(),
        "width": mean.width(),
        "members": r.result.member_maps.len(),
        "strategy": r.result.strategy.to_string(),
        "options": r.options,
        "iterations_run": r.iterations_run,
        "warm_started": r.warm_started,
        "final_loss": r.final_loss,
        "seconds": r.seconds,
        "confidence": mean.data(),
        "binarized": r.result.binarized.data(),
    }))
    .into_response())
}
