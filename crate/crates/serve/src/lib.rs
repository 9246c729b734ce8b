//! JSON API over a frozen checkpoint and its dataset.
//!
//! Routes:
//!
//! - `GET /api/model`
//! - `GET /api/samples?split=&offset=&limit=`
//! - `GET /api/predict/{id}` and `POST /api/predict/{id}` with `{"overrides": {"3": 1}}`
//! - `POST /api/sweep` with `{"ratios": [...], "strategy": "...", "seeds": [...]}`
//!
//! Every non-2xx response has an [`ApiError`] body.

mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode, Uri};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use eqcbm::config::{EvalConfig, ServeConfig};
use eqcbm::datagen::{DataBundle, Split, SyntheticDataset};
use eqcbm::eval::{intervention_sweep, Strategy, SweepResult};
use eqcbm::pipeline::ModuleCount;
use eqcbm::qcav::Overrides;
use eqcbm::{Model, PredictionRecord};

pub use error::{ApiError, ErrorCode};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;
pub const MAX_SWEEP_SEEDS: usize = 64;
pub const MAX_SWEEP_RATIOS: usize = 101;
const SWEEP_WORKERS: usize = 2;

/// The immutable snapshot every request reads from.
pub struct AppState {
    model: Model,
    data: DataBundle,
    split: Split,
    sweeps: Semaphore,
}

impl AppState {
    /// Fails if the dataset does not fit the checkpoint.
    pub fn new(model: Model, data: DataBundle, split: Split) -> eqcbm::Result<Self> {
        let c = &data.config;
        let m = model.config();
        if (c.input_dim, c.num_concepts, c.num_classes) != (m.input_dim, m.num_concepts, m.num_classes) {
            return Err(eqcbm::Error::Contract(format!(
                "dataset has input_dim {}, {} concepts, {} classes; checkpoint expects {}, {}, {}",
                c.input_dim, c.num_concepts, c.num_classes, m.input_dim, m.num_concepts, m.num_classes
            )));
        }
        Ok(Self {
            model,
            data,
            split,
            sweeps: Semaphore::new(SWEEP_WORKERS),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn served(&self) -> &SyntheticDataset {
        self.data.split(self.split)
    }

    pub fn summary(&self) -> ModelSummary {
        let m = &self.model;
        ModelSummary {
            num_concepts: m.num_concepts(),
            num_classes: m.num_classes(),
            d: m.concept_dim(),
            input_dim: m.config().input_dim,
            parameter_counts: m.parameter_counts(),
            parameter_total: m.parameter_total(),
            dataset_sizes: DatasetSizes {
                train: self.data.train.len(),
                test: self.data.test.len(),
            },
            served_split: self.split,
            concept_names: (0..m.num_concepts()).map(|k| format!("concept_{k}")).collect(),
            class_names: (0..m.num_classes()).map(|y| format!("class_{y}")).collect(),
        }
    }

    fn sample(&self, id: &str) -> Result<usize, ApiError> {
        let n = self.served().len();
        match id.parse::<usize>() {
            Ok(i) if i < n => Ok(i),
            _ => Err(ApiError::not_found(format!(
                "no sample `{id}` in the {} split ({n} samples)",
                self.split
            ))),
        }
    }

    pub fn predict(&self, id: &str, overrides: &Overrides) -> Result<PredictionRecord, ApiError> {
        let i = self.sample(id)?;
        self.model
            .intervene_predict(self.served().features(i), overrides)
            .map_err(ApiError::from_core)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub num_concepts: usize,
    pub num_classes: usize,
    pub d: usize,
    pub input_dim: usize,
    pub parameter_counts: Vec<ModuleCount>,
    pub parameter_total: usize,
    pub dataset_sizes: DatasetSizes,
    pub served_split: Split,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: usize,
    pub label: usize,
    pub concepts: Vec<u8>,
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePage {
    pub split: Split,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub samples: Vec<SampleRow>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRequest {
    ratios: Option<Vec<f64>>,
    strategy: Option<String>,
    seeds: Option<Vec<u64>>,
}

/// Builds the router. `cors_origin` is `*` or a single origin.
pub fn router(state: Arc<AppState>, cors_origin: &str) -> Result<Router, ApiError> {
    let origin = if cors_origin == "*" {
        AllowOrigin::from(Any)
    } else {
        let v = HeaderValue::from_str(cors_origin)
            .map_err(|_| ApiError::bad_request(format!("invalid CORS origin `{cors_origin}`")))?;
        AllowOrigin::exact(v)
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    Ok(Router::new()
        .route("/api/model", get(model_info))
        .route("/api/samples", get(samples))
        .route("/api/predict/{id}", get(predict).post(intervene))
        .route("/api/sweep", post(sweep))
        .fallback(no_route)
        .method_not_allowed_fallback(wrong_method)
        .layer(cors)
        .with_state(state))
}

/// Binds `cfg.host:cfg.port`, reports the bound address and serves until
/// the process ends.
pub async fn run(state: Arc<AppState>, cfg: &ServeConfig, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let app = router(state, &cfg.cors_origin).map_err(std::io::Error::other)?;
    let listener = TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
    on_ready(listener.local_addr()?);
    axum::serve(listener, app).await
}

async fn no_route(method: Method, uri: Uri) -> ApiError {
    ApiError::not_found(format!("no route for {method} {}", uri.path()))
}

async fn wrong_method(method: Method, uri: Uri) -> ApiError {
    ApiError::bad_request(format!("{method} is not allowed on {}", uri.path())).with_status(StatusCode::METHOD_NOT_ALLOWED)
}

async fn model_info(State(s): State<Arc<AppState>>) -> Json<ModelSummary> {
    Json(s.summary())
}

async fn samples(
    State(s): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<SamplePage>, ApiError> {
    if let Some(key) = q.keys().find(|k| !matches!(k.as_str(), "split" | "offset" | "limit")) {
        return Err(ApiError::bad_request(format!("unknown query parameter `{key}`")));
    }
    let split = match q.get("split") {
        None => s.split,
        Some(v) => v.parse().map_err(ApiError::from_core)?,
    };
    let number = |key: &str, default: usize| -> Result<usize, ApiError> {
        q.get(key).map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| ApiError::bad_request(format!("`{key}` must be a non-negative integer, got `{v}`")))
        })
    };
    let offset = number("offset", 0)?;
    let limit = number("limit", DEFAULT_PAGE)?;
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!("`limit` must lie in [1, {MAX_PAGE}], got {limit}")));
    }
    let ds = s.data.split(split);
    let rows = (offset.min(ds.len())..offset.saturating_add(limit).min(ds.len()))
        .map(|i| SampleRow {
            id: i,
            label: ds.label(i),
            concepts: ds.concepts(i).to_vec(),
            features: ds.features(i).to_vec(),
        })
        .collect();
    Ok(Json(SamplePage {
        split,
        total: ds.len(),
        offset,
        limit,
        samples: rows,
    }))
}

async fn predict(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<PredictionRecord>, ApiError> {
    s.predict(&id, &Overrides::new()).map(Json)
}

fn parse_body(body: &Bytes) -> Result<Value, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Value::Object(Default::default()));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body is not valid JSON: {e}")))
}

/// Parses an intervention body `{"overrides": {...}}`.
pub fn parse_overrides(body: &Value, num_concepts: usize) -> Result<Overrides, ApiError> {
    let obj = body
        .as_object()
        .ok_or_else(|| ApiError::bad_request("request body must be a JSON object"))?;
    if let Some(key) = obj.keys().find(|k| *k != "overrides") {
        return Err(ApiError::bad_request(format!("unknown field `{key}`")));
    }
    match obj.get("overrides") {
        None => Ok(Overrides::new()),
        Some(v) => Overrides::from_json(v, num_concepts).map_err(ApiError::from_core),
    }
}

async fn intervene(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<PredictionRecord>, ApiError> {
    // an unknown sample takes precedence over a bad body
    s.sample(&id)?;
    let overrides = parse_overrides(&parse_body(&body)?, s.model.num_concepts())?;
    s.predict(&id, &overrides).map(Json)
}

async fn sweep(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<SweepResult>, ApiError> {
    let req: SweepRequest = serde_json::from_value(parse_body(&body)?)
        .map_err(|e| ApiError::bad_request(format!("invalid sweep request: {e}")))?;
    let defaults = EvalConfig::default();
    let strategy: Strategy = match &req.strategy {
        None => defaults.strategy,
        Some(v) => v.parse().map_err(ApiError::from_core)?,
    };
    let ratios = req.ratios.unwrap_or(defaults.ratios);
    let seeds = req.seeds.unwrap_or(defaults.seeds);
    if ratios.len() > MAX_SWEEP_RATIOS {
        return Err(ApiError::bad_request(format!("at most {MAX_SWEEP_RATIOS} ratios per sweep")));
    }
    if seeds.len() > MAX_SWEEP_SEEDS {
        return Err(ApiError::bad_request(format!("at most {MAX_SWEEP_SEEDS} seeds per sweep")));
    }
    let _permit = s
        .sweeps
        .acquire()
        .await
        .map_err(|_| ApiError::server_error("sweep pool closed"))?;
    let state = Arc::clone(&s);
    tokio::task::spawn_blocking(move || intervention_sweep(&state.model, state.served(), &ratios, strategy, &seeds))
        .await
        .map_err(|e| ApiError::server_error(format!("sweep task failed: {e}")))?
        .map(Json)
        .map_err(ApiError::from_core)
}
