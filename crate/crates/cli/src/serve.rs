//! Read-only HTTP/JSON inference service over a trained pipeline.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use ndarray::Array2;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use sepsis_core::behavior::BehaviorNet;
use sepsis_core::c51::{atoms, N_ATOMS};
use sepsis_core::decide::{best, preference, PreferenceParams};
use sepsis_core::ensemble::Ensemble;
use sepsis_core::pipeline::Featurizer;
use sepsis_core::rl_state::feature_names;
use sepsis_core::rng::seeded;
use sepsis_core::simulator::{step, Action, PatientState, SimConfig, Trajectory, NUM_ACTIONS};

use crate::commands;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Rounds to 9 significant digits so serialized numbers are stable across
/// interfaces to about 5e-9 relative.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Applies [`sig9`] to every non-integer number in a JSON value.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(sig9(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Immutable models and cohort shared by every request.
pub struct AppState {
    pub cohort: Vec<Trajectory>,
    index: HashMap<u64, usize>,
    /// Standardized state vectors, `[patient][hour]`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub ensemble: Ensemble,
    pub behavior: BehaviorNet,
    pub simulator: SimConfig,
    pub temperature: f64,
}

impl AppState {
    pub fn new(
        cohort: Vec<Trajectory>,
        featurizer: &Featurizer,
        ensemble: Ensemble,
        behavior: BehaviorNet,
        simulator: SimConfig,
        temperature: f64,
    ) -> CliResult<Self> {
        let states = featurizer.states(&cohort)?;
        let index = cohort.iter().enumerate().map(|(i, t)| (t.patient_id, i)).collect();
        Ok(Self { cohort, index, states, ensemble, behavior, simulator, temperature })
    }

    /// Held-out cohort and every model from a pipeline output directory.
    pub fn load(config: &ExperimentConfig, root: &Path) -> CliResult<Self> {
        let cohort = commands::read_cohort(root, commands::HELD_OUT)?;
        let featurizer = commands::load_featurizer(root)?;
        let behavior = commands::load_behavior(root)?;
        let ensemble = commands::load_ensemble(root)?;
        Self::new(cohort, &featurizer, ensemble, behavior, config.simulator.clone(), config.decide.temperature)
    }

    fn patient(&self, id: u64) -> Result<&Trajectory, ApiError> {
        self.index
            .get(&id)
            .map(|&i| &self.cohort[i])
            .ok_or_else(|| ApiError::not_found(format!("unknown patient {id}")))
    }

    fn state(&self, id: u64, hour: usize) -> Result<(&Trajectory, &[f64]), ApiError> {
        let t = self.patient(id)?;
        if hour >= t.len() {
            return Err(ApiError::not_found(format!("patient {id} has no hour {hour} (stay is {} h)", t.len())));
        }
        Ok((t, &self.states[self.index[&id]][hour]))
    }

    /// Payload of `/recommend`, unrounded.
    pub fn recommend(&self, id: u64, hour: usize, beta: f64, lambda: f64) -> Result<Value, ApiError> {
        let params = PreferenceParams { beta, lambda, temperature: self.temperature };
        params.validate().map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let (_, state) = self.state(id, hour)?;
        let x =
            Array2::from_shape_vec((1, state.len()), state.to_vec()).map_err(|e| ApiError::internal(e.to_string()))?;
        let scores = preference(x.view(), &params, &self.ensemble, &self.behavior).map_err(ApiError::from)?;
        let dist = self.ensemble.value(x.view()).map_err(ApiError::from)?;
        let z = atoms();
        let actions: Vec<Value> = (0..NUM_ACTIONS)
            .map(|a| {
                let s = &scores[0][a];
                let action = Action::from_flat(a).expect("flat index below 9");
                json!({
                    "action": a,
                    "vaso": action.vaso,
                    "fluid": action.fluid,
                    "atoms": z.to_vec(),
                    "probs": dist.row(0).slice(ndarray::s![a * N_ATOMS..(a + 1) * N_ATOMS]).to_vec(),
                    "expected_q": s.expected_q,
                    "uncertainty": s.uncertainty,
                    "behavior_prob": s.behavior_prob,
                    "preference": s.preference,
                })
            })
            .collect();
        Ok(json!({
            "patient_id": id,
            "hour": hour,
            "beta": beta,
            "lambda": lambda,
            "temperature": self.temperature,
            "recommended": best(&scores[0]),
            "actions": actions,
        }))
    }

    /// One simulator step from a stored or token-supplied state.
    pub fn whatif(&self, req: &WhatIfRequest) -> Result<Value, ApiError> {
        let action = Action::from_flat(req.action)
            .map_err(|_| ApiError::unprocessable(format!("action must be a flat index 0..=8, got {}", req.action)))?;
        let state = match &req.token {
            Some(token) => decode_token(token)?,
            None => self.stored_state(req.patient_id, req.hour)?,
        };
        if state.outcome.is_some() {
            return Err(ApiError::conflict("the state is terminal and cannot be stepped".into()));
        }
        let mut rng = seeded(req.seed);
        let res = step(&state, action, &self.simulator, &mut rng).map_err(ApiError::from)?;
        Ok(json!({
            "patient_id": req.patient_id,
            "hour": res.next.hour,
            "action": req.action,
            "observation": res.next.obs,
            "reward": res.reward,
            "done": res.done,
            "outcome": res.outcome,
            "token": encode_token(&res.next)?,
        }))
    }

    fn stored_state(&self, id: u64, hour: usize) -> Result<PatientState, ApiError> {
        let (t, _) = self.state(id, hour)?;
        let record = &t.records[hour];
        if record.done {
            return Err(ApiError::conflict(format!("hour {hour} is the terminal hour of patient {id}")));
        }
        let (Some(hidden), Some(baseline)) = (record.hidden, t.baseline) else {
            return Err(ApiError::unprocessable(format!("patient {id} has no hidden state to simulate from")));
        };
        Ok(PatientState { static_: t.static_, baseline, hidden, hour: record.hour, obs: record.obs, outcome: None })
    }
}

pub fn encode_token(state: &PatientState) -> Result<String, ApiError> {
    let bytes = serde_json::to_vec(state).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(URL_SAFE_NO_PAD.encode(bytes))
}

pub fn decode_token(token: &str) -> Result<PatientState, ApiError> {
    let bytes = URL_SAFE_NO_PAD.decode(token).map_err(|e| ApiError::unprocessable(format!("malformed token: {e}")))?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::unprocessable(format!("malformed token: {e}")))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self { status: StatusCode::NOT_FOUND, message }
    }
    fn unprocessable(message: String) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message }
    }
    fn conflict(message: String) -> Self {
        Self { status: StatusCode::CONFLICT, message }
    }
    fn internal(message: String) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message }
    }
    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<sepsis_core::Error> for ApiError {
    fn from(e: sepsis_core::Error) -> Self {
        match e {
            sepsis_core::Error::Domain(_) | sepsis_core::Error::Config(_) => Self::unprocessable(e.to_string()),
            sepsis_core::Error::Contract(_) => Self::conflict(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: r.body_text() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.status.canonical_reason().unwrap_or("error"), "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

fn rounded(mut v: Value) -> Json<Value> {
    round_json(&mut v);
    Json(v)
}

type Shared = Arc<AppState>;

async fn cohort(State(app): State<Shared>) -> Json<Value> {
    let patients: Vec<Value> = app
        .cohort
        .iter()
        .map(|t| json!({ "patient_id": t.patient_id, "outcome": t.outcome, "hours": t.len(), "static": t.static_ }))
        .collect();
    rounded(json!({ "patients": patients, "features": feature_names() }))
}

async fn patient(State(app): State<Shared>, UrlPath(id): UrlPath<u64>) -> Result<Json<Value>, ApiError> {
    let t = app.patient(id)?;
    let records: Vec<Value> = t
        .records
        .iter()
        .map(|r| json!({ "hour": r.hour, "obs": r.obs, "action": r.action, "reward": r.reward, "done": r.done }))
        .collect();
    Ok(rounded(json!({
        "patient_id": t.patient_id,
        "outcome": t.outcome,
        "static": t.static_,
        "hours": t.len(),
        "has_hidden_state": t.baseline.is_some() && t.records.iter().all(|r| r.hidden.is_some()),
        "records": records,
    })))
}

async fn patient_state(
    State(app): State<Shared>,
    UrlPath((id, hour)): UrlPath<(u64, usize)>,
) -> Result<Json<Value>, ApiError> {
    let (t, state) = app.state(id, hour)?;
    let r = &t.records[hour];
    Ok(rounded(json!({
        "patient_id": id,
        "hour": hour,
        "hours_to_end": t.hours_to_end(hour),
        "features": feature_names(),
        "state": state,
        "observation": r.obs,
        "action": r.action,
        "terminal": r.done,
    })))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub patient_id: u64,
    pub hour: usize,
    pub beta: f64,
    pub lambda: f64,
}

async fn recommend(
    State(app): State<Shared>,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body?;
    Ok(rounded(app.recommend(req.patient_id, req.hour, req.beta, req.lambda)?))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub patient_id: u64,
    pub hour: usize,
    /// Flat action index `3·vaso + fluid`.
    pub action: usize,
    pub seed: u64,
    /// State returned by a previous what-if; overrides the stored hour.
    #[serde(default)]
    pub token: Option<String>,
}

async fn whatif(
    State(app): State<Shared>,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body?;
    Ok(rounded(app.whatif(&req)?))
}

pub fn router(app: Arc<AppState>, cors_origin: &str) -> CliResult<Router> {
    let origin = if cors_origin == "*" {
        AllowOrigin::any()
    } else {
        AllowOrigin::exact(
            HeaderValue::from_str(cors_origin).map_err(|e| CliError::Config(format!("serve.cors_origin: {e}")))?,
        )
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/cohort", get(cohort))
        .route("/patient/{id}", get(patient))
        .route("/patient/{id}/state/{hour}", get(patient_state))
        .route("/recommend", post(recommend))
        .route("/whatif", post(whatif))
        .layer(cors)
        .with_state(app))
}

pub fn run(config: &ExperimentConfig, root: &Path) -> CliResult<()> {
    let app = Arc::new(AppState::load(config, root)?);
    let router = router(app, &config.serve.cors_origin)?;
    let addr = format!("{}:{}", config.serve.host, config.serve.port);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("serving on http://{addr}");
        axum::serve(listener, router).await
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounds_to_nine_digits() {
        assert_eq!(sig9(0.1234567891234), 0.123456789);
        assert_eq!(sig9(-98765.432123), -98765.4321);
        assert_eq!(sig9(1e-300), 1e-300);
        assert_eq!(sig9(0.0), 0.0);
        for x in [std::f64::consts::PI, 1.0 / 3.0, 123456789012.0, -2.5e-7] {
            assert!((sig9(x) - x).abs() / x.abs() <= 5e-9);
        }
    }

    #[test]
    fn round_json_leaves_integers() {
        let mut v = json!({ "a": 7, "b": [0.12345678912345, 3], "c": { "d": 2.0f64.sqrt() } });
        round_json(&mut v);
        assert_eq!(v, json!({ "a": 7, "b": [0.123456789, 3], "c": { "d": 1.41421356 } }));
    }

    #[test]
    fn tokens_round_trip_bit_exactly() {
        let mut rng = seeded(3);
        let state = sepsis_core::simulator::admit(&mut rng, &SimConfig::default()).unwrap();
        assert_eq!(decode_token(&encode_token(&state).unwrap()).unwrap(), state);
        assert_eq!(decode_token("@@").unwrap_err().status(), StatusCode::UNPROCESSABLE_ENTITY);
    }
}
