//! HTTP/JSON facade over the workbench: session-scoped models,
//! interventions, ACE queries and DID runs. See `docs/api.md`.

pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use normdid::ace::{point_ranking, top_k_units, PointRanking, DEFAULT_SAMPLES, DEFAULT_TOP_N};
use normdid::config::BlueprintRef;
use normdid::did::{run_did, Heatmap};
use normdid::interventions::{InterventionSpec, Region};
use normdid::io::to_rgb8;
use normdid::segment::segment;
use normdid::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

pub use session::Session;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Session>>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn insert(&self, s: Session) -> String {
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1);
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), Arc::new(s));
        id
    }

    fn remove(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).remove(id)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
    }
    fn invalid(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }
    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "session is being modified by another request")
    }
}

impl From<normdid::Error> for ApiError {
    fn from(e: normdid::Error) -> Self {
        use normdid::Error::*;
        match e {
            Shape(_) | Argument(_) | UnknownClass(_) | Blueprint(_) | Infeasible(_) | InvalidLayer { .. } => {
                ApiError::invalid(e)
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub width: usize,
    pub height: usize,
    /// Interleaved 8-bit RGB, base64.
    pub rgb8: String,
}

impl ImagePayload {
    pub fn encode(t: &Tensor) -> Result<Self, ApiError> {
        Ok(ImagePayload { width: t.width(), height: t.height(), rgb8: STANDARD.encode(to_rgb8(t)?) })
    }

    pub fn decode(&self) -> Option<Vec<u8>> {
        STANDARD.decode(&self.rgb8).ok().filter(|b| b.len() == 3 * self.width * self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPayload {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl From<&Heatmap> for HeatmapPayload {
    fn from(h: &Heatmap) -> Self {
        HeatmapPayload { width: h.w, height: h.h, values: h.values.clone() }
    }
}

fn areas(s: &Session, image: &Tensor) -> BTreeMap<String, f64> {
    s.model.palette.names().into_iter().zip(segment(image, &s.model.palette).areas()).collect()
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", axum::routing::delete(delete))
        .route("/sessions/{id}/image", get(image))
        .route("/sessions/{id}/ace", get(ace))
        .route("/sessions/{id}/ablate", post(ablate))
        .route("/sessions/{id}/did", post(did))
        .route("/sessions/{id}/ranking", get(ranking))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/export", get(export))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app(AppState::default())).await
}

#[derive(Deserialize)]
struct CreateBody {
    blueprint: BlueprintRef,
    #[serde(default)]
    seed: u64,
    n_samples: Option<usize>,
}

async fn create(State(st): State<AppState>, Json(b): Json<CreateBody>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let n_samples = b.n_samples.unwrap_or(DEFAULT_SAMPLES);
    if n_samples == 0 {
        return Err(ApiError::invalid("n_samples must be >= 1"));
    }
    let s = blocking(move || Ok(Session::create(b.blueprint, b.seed, n_samples)?)).await?;
    let cfg = &s.model.generator.config;
    let body = json!({
        "classes": s.model.palette.names(),
        "n_units": s.model.n_units(),
        "grid": cfg.layer_resolution(cfg.analysis_layer),
        "seed": s.seed,
    });
    let id = st.insert(s);
    let mut body = body;
    body["id"] = json!(id);
    Ok((StatusCode::CREATED, Json(body)))
}

fn find(st: &AppState, id: &str) -> Result<Arc<Session>, ApiError> {
    st.session(id).ok_or_else(|| ApiError::not_found(id))
}

async fn delete(State(st): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let s = find(&st, &id)?;
    let _guard = s.try_begin_mutation().ok_or_else(ApiError::busy)?;
    st.remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn image(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let s = find(&st, &id)?;
    blocking(move || {
        let stack = s.stack();
        let img = s.render(&stack)?;
        Ok(Json(json!({ "image": ImagePayload::encode(&img)?, "areas": areas(&s, &img), "depth": stack.len() })))
    })
    .await
}

#[derive(Deserialize)]
struct AceQuery {
    class: String,
    k: Option<usize>,
}

async fn ace(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<AceQuery>) -> ApiResult<Value> {
    let s = find(&st, &id)?;
    blocking(move || {
        let t = s.table()?;
        let c = t.class_index(&q.class)?;
        let k = q.k.unwrap_or(20);
        let units: Vec<Value> = top_k_units(t, &q.class, k)?
            .into_iter()
            .map(|u| json!({ "unit": u, "delta": t.delta[u][c] }))
            .collect();
        Ok(Json(json!({ "class": q.class, "k": k, "n_samples": t.n_samples, "units": units })))
    })
    .await
}

#[derive(Deserialize)]
struct UnitsBody {
    units: Vec<usize>,
    #[serde(default)]
    region: Region,
}

fn unit_spec(s: &Session, b: UnitsBody) -> Result<InterventionSpec, ApiError> {
    let layer = s.model.analysis_layer();
    let cfg = &s.model.generator.config;
    let (h, w) = cfg.layer_resolution(layer);
    let spec = InterventionSpec::ablate(layer, b.units).with_region(b.region);
    spec.validate((s.model.n_units(), h, w))?;
    Ok(spec)
}

async fn ablate(State(st): State<AppState>, Path(id): Path<String>, Json(b): Json<UnitsBody>) -> ApiResult<Value> {
    let s = find(&st, &id)?;
    blocking(move || {
        let _guard = s.try_begin_mutation().ok_or_else(ApiError::busy)?;
        let spec = unit_spec(&s, b)?;
        let mut stack = s.stack();
        let before = areas(&s, &s.render(&stack)?);
        stack.push(spec);
        let img = s.render(&stack)?;
        let after = areas(&s, &img);
        let deltas: BTreeMap<&String, f64> = after.iter().map(|(c, a)| (c, a - before[c])).collect();
        let body = json!({
            "image": ImagePayload::encode(&img)?,
            "areas": after,
            "area_deltas": deltas,
            "depth": stack.len(),
        });
        s.set_stack(stack);
        Ok(Json(body))
    })
    .await
}

async fn did(State(st): State<AppState>, Path(id): Path<String>, Json(b): Json<UnitsBody>) -> ApiResult<Value> {
    let s = find(&st, &id)?;
    blocking(move || {
        let spec = unit_spec(&s, b)?;
        let r = run_did(&s.model.generator, &s.z, &spec)?;
        Ok(Json(json!({
            "images": {
                "y_beta_u": ImagePayload::encode(&r.y_beta_u)?,
                "y_beta_u1": ImagePayload::encode(&r.y_beta_u1)?,
                "y_beta1_u1": ImagePayload::encode(&r.y_beta1_u1)?,
                "y_beta1_u": ImagePayload::encode(&r.y_beta1_u)?,
            },
            "heatmaps": {
                "delta": HeatmapPayload::from(&r.heatmap),
                "inpaint": HeatmapPayload::from(&r.inpaint_effect),
                "ablation": HeatmapPayload::from(&r.ablation_effect),
            },
            "norms": {
                "delta_l2": r.heatmap.l2(),
                "delta_max": r.heatmap.max(),
                "inpaint_l2": r.inpaint_effect.l2(),
                "ablation_l2": r.ablation_effect.l2(),
            },
            "background_fraction": r.background.count() as f64 / (r.background.dims().0 * r.background.dims().1) as f64,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct RankingQuery {
    x: usize,
    y: usize,
    n: Option<usize>,
}

async fn ranking(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RankingQuery>,
) -> ApiResult<PointRanking> {
    let s = find(&st, &id)?;
    blocking(move || {
        let t = s.table()?;
        let stack = s.stack();
        Ok(Json(point_ranking(&s.model, t, &s.z, &stack, (q.y, q.x), q.n.unwrap_or(DEFAULT_TOP_N))?))
    })
    .await
}

async fn undo(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let s = find(&st, &id)?;
    blocking(move || {
        let _guard = s.try_begin_mutation().ok_or_else(ApiError::busy)?;
        let mut stack = s.stack();
        if stack.pop().is_none() {
            return Err(ApiError::invalid("intervention stack is empty"));
        }
        let img = s.render(&stack)?;
        let body = json!({ "image": ImagePayload::encode(&img)?, "areas": areas(&s, &img), "depth": stack.len() });
        s.set_stack(stack);
        Ok(Json(body))
    })
    .await
}

async fn export(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let s = find(&st, &id)?;
    Ok(Json(json!({
        "blueprint": s.blueprint,
        "seed": s.seed,
        "n_samples": s.n_samples,
        "stack": s.stack(),
    })))
}
