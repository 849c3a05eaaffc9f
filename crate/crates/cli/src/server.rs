//! HTTP API over a loaded checkpoint and corpus.
//!
//! Routes, all JSON unless noted:
//! - `GET /api/health`
//! - `GET /api/presets`: test-split presets, `{count, presets: [{id, name}]}`
//! - `GET /api/preset/{id}`
//! - `POST /api/interpolate` with `{a, b, method, T}`
//! - `GET /api/audio/{id}.wav`: `audio/wav`, immutable
//!
//! Audio ids encode a preset's grid indices, so audio URLs are stable and
//! the service needs no mutable state.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use spinterp::corpus::{Corpus, Split};
use spinterp::interp::{interpolate_latent, interpolate_reference, InterpSequence, Method};
use spinterp::model::SpinVae;
use spinterp::schema::{validate_preset, Preset, SynthDescriptor};
use spinterp::synth::{render, RenderConfig};
use spinterp::timbre::{feature_names, FeatureExtractor};

use crate::commands::{read_checkpoint, read_corpus, ServeArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;

pub const API_VERSION: &str = "1";
pub const MIN_STEPS: usize = 3;
pub const MAX_STEPS: usize = 33;
pub const AUDIO_CACHE_CONTROL: &str = "public, max-age=31536000, immutable";

/// Read-only snapshot shared by all requests.
pub struct AppState {
    model: SpinVae,
    corpus: Corpus,
    render: RenderConfig,
    extractor: FeatureExtractor,
    /// Record id to corpus position, test split only.
    test_items: HashMap<u64, usize>,
    test_order: Vec<usize>,
}

impl AppState {
    pub fn new(model: SpinVae, corpus: Corpus) -> CliResult<Self> {
        model.check_descriptor_hash(&corpus.descriptor_hash)?;
        let test_order = corpus.indices(Split::Test);
        let test_items = test_order.iter().map(|&i| (corpus.records[i].id, i)).collect();
        Ok(Self {
            extractor: FeatureExtractor::new(corpus.render.sample_rate),
            render: corpus.render,
            model,
            corpus,
            test_items,
            test_order,
        })
    }

    pub fn load(checkpoint: &std::path::Path, corpus: &std::path::Path) -> CliResult<Self> {
        let model = read_checkpoint(checkpoint)?;
        let corpus = read_corpus(model.descriptor(), corpus)?;
        Self::new(model, corpus)
    }

    fn descriptor(&self) -> &SynthDescriptor {
        self.model.descriptor()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/presets", get(presets))
        .route("/api/preset/{id}", get(preset))
        .route("/api/interpolate", post(interpolate))
        .route("/api/audio/{file}", get(audio))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "status": self.status.as_u16(), "code": self.code, "message": self.message }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn preset_name(desc: &SynthDescriptor, id: u64, preset: &Preset) -> String {
    format!("#{id} alg {}", preset.class(desc.algorithm_param) + 1)
}

/// Grid indices joined with `-`; categorical values are their class.
pub fn audio_id(desc: &SynthDescriptor, preset: &Preset) -> String {
    desc.params
        .iter()
        .zip(preset.values())
        .map(|(spec, &v)| match spec.grid() {
            Some(g) => g.nearest_index(v).to_string(),
            None => (v as usize).to_string(),
        })
        .collect::<Vec<_>>()
        .join("-")
}

pub fn parse_audio_id(desc: &SynthDescriptor, id: &str) -> Option<Preset> {
    let parts: Vec<&str> = id.split('-').collect();
    if parts.len() != desc.num_params() {
        return None;
    }
    let mut values = Vec::with_capacity(parts.len());
    for (spec, part) in desc.params.iter().zip(parts) {
        let i: usize = part.parse().ok()?;
        if i >= spec.cardinality() {
            return None;
        }
        values.push(match spec.grid() {
            Some(g) => g.value(i),
            None => i as f64,
        });
    }
    let preset = Preset::new(values);
    validate_preset(desc, &preset).is_empty().then_some(preset)
}

fn audio_url(desc: &SynthDescriptor, preset: &Preset) -> String {
    format!("/api/audio/{}.wav", audio_id(desc, preset))
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "api_version": API_VERSION,
        "descriptor": s.descriptor().hash_hex(),
        "latent_dim": s.model.config().latent_dim,
        "presets": s.test_order.len(),
    }))
}

#[derive(Serialize)]
struct PresetSummary {
    id: u64,
    name: String,
}

async fn presets(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<PresetSummary> = s
        .test_order
        .iter()
        .map(|&i| {
            let r = &s.corpus.records[i];
            PresetSummary {
                id: r.id,
                name: preset_name(s.descriptor(), r.id, &r.preset),
            }
        })
        .collect();
    Json(json!({ "count": list.len(), "presets": list }))
}

fn lookup(s: &AppState, id: u64) -> ApiResult<usize> {
    s.test_items
        .get(&id)
        .copied()
        .ok_or_else(|| ApiError::not_found(format!("no test-split preset with id {id}")))
}

async fn preset(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("preset id `{id}` is not an integer")))?;
    let item = lookup(&s, id)?;
    let desc = s.descriptor();
    let p = &s.corpus.records[item].preset;
    let params: Vec<serde_json::Value> = desc
        .params
        .iter()
        .zip(p.values())
        .map(|(spec, &v)| json!({ "name": spec.name, "categorical": spec.is_categorical(), "value": v }))
        .collect();
    Ok(Json(json!({
        "id": id,
        "name": preset_name(desc, id, p),
        "values": p.values(),
        "params": params,
        "audio": audio_url(desc, p),
    })))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Latent,
    Reference,
    Both,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub a: u64,
    pub b: u64,
    pub method: MethodChoice,
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    spinterp::interp::DEFAULT_STEPS
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct StepBody {
    pub t: usize,
    pub preset: Vec<f64>,
    pub audio: String,
    pub features: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SequenceBody {
    pub method: String,
    pub steps: Vec<StepBody>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct InterpolateResponse {
    pub a: u64,
    pub b: u64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub feature_names: Vec<String>,
    pub sequences: Vec<SequenceBody>,
}

fn sequence_body(s: &AppState, seq: &InterpSequence) -> ApiResult<SequenceBody> {
    let desc = s.descriptor();
    let steps = seq
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let wave = render(desc, &step.preset, &s.render).map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(StepBody {
                t: t + 1,
                preset: step.preset.values().to_vec(),
                audio: audio_url(desc, &step.preset),
                features: s.extractor.extract(&wave),
                z: step.z.clone(),
            })
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(SequenceBody {
        method: seq.method.name().to_string(),
        steps,
    })
}

pub fn run_interpolation(s: &AppState, req: &InterpolateRequest) -> ApiResult<InterpolateResponse> {
    if !(MIN_STEPS..=MAX_STEPS).contains(&req.steps) {
        return Err(ApiError::bad_request(format!(
            "T must lie in {MIN_STEPS}..={MAX_STEPS} (got {})",
            req.steps
        )));
    }
    let (ia, ib) = (lookup(s, req.a)?, lookup(s, req.b)?);
    let (pa, pb) = (&s.corpus.records[ia].preset, &s.corpus.records[ib].preset);
    let methods: &[Method] = match req.method {
        MethodChoice::Latent => &[Method::Latent],
        MethodChoice::Reference => &[Method::Reference],
        MethodChoice::Both => &[Method::Latent, Method::Reference],
    };
    let mut sequences = Vec::with_capacity(methods.len());
    for &m in methods {
        let seq = match m {
            Method::Latent => {
                let (xa, xb) = (s.corpus.spectrogram(ia), s.corpus.spectrogram(ib));
                interpolate_latent(&s.model, (pa, &xa), (pb, &xb), req.steps)
            }
            Method::Reference => interpolate_reference(s.descriptor(), pa, pb, req.steps),
        }
        .map_err(|e| ApiError::internal(e.to_string()))?;
        sequences.push(sequence_body(s, &seq)?);
    }
    Ok(InterpolateResponse {
        a: req.a,
        b: req.b,
        steps: req.steps,
        feature_names: feature_names(),
        sequences,
    })
}

async fn interpolate(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<InterpolateResponse>> {
    let req: InterpolateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    tokio::task::spawn_blocking(move || run_interpolation(&s, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
}

async fn audio(State(s): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let id = file
        .strip_suffix(".wav")
        .ok_or_else(|| ApiError::not_found(format!("`{file}` is not a .wav resource")))?
        .to_string();
    let bytes = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let desc = s.descriptor();
        let preset = parse_audio_id(desc, &id).ok_or_else(|| ApiError::bad_request(format!("malformed audio id `{id}`")))?;
        render(desc, &preset, &s.render)
            .and_then(|w| w.to_wav_bytes())
            .map_err(|e| ApiError::internal(e.to_string()))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let etag = format!("\"{}\"", crate::manifest::sha256_hex(&bytes));
    let mut resp = bytes.into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("audio/wav"));
    h.insert(header::CACHE_CONTROL, HeaderValue::from_static(AUDIO_CACHE_CONTROL));
    h.insert(header::ETAG, HeaderValue::from_str(&etag).expect("hex etag"));
    Ok(resp)
}

pub fn serve(a: &ServeArgs) -> CliResult<String> {
    let state = Arc::new(AppState::load(&a.checkpoint, &a.corpus)?);
    let mut m = ManifestBuilder::new("serve", json!({ "host": a.host, "port": a.port }), None);
    m.input(&a.checkpoint);
    m.input(&a.corpus);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid listen address {}:{}", a.host, a.port)))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Server(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Server(format!("cannot listen on {addr}: {e}")))?;
        match &a.manifest {
            Some(p) => {
                m.write(p)?;
            }
            None => eprintln!("{}", serde_json::to_string(&m.finish()?).expect("manifest serialises")),
        }
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))?;
        Ok(format!("stopped serving on {addr}"))
    })
}
