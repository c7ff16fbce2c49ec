//! JSON/HTTP facade over the planning pipeline.
//!
//! Handlers hold no mutable state: the virtual patient, controller defaults
//! and the optional estimator checkpoint are loaded once and shared.

use std::net::SocketAddr;
use std::sync::Arc;

use aidplan::dynamics::{Meal, Trace};
use aidplan::estimator::EstimatorNetwork;
use aidplan::planner::{ControllerConfig, MealEvent, PlanMode, UsagePlan};
use aidplan::safety::{
    forward_simulate, gate, run_pipeline, with_insulin_on_board, CoefficientSource, PlanMapper,
    PlanRequest, SafetyCriterion, TracePredictor, Verdict, VirtualPatient,
};
use aidplan::stl::{ada_report, outcome_metrics, OutcomeMetrics};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub patient: VirtualPatient,
    /// CR in requests overrides the one here.
    pub controller: ControllerConfig,
    /// min
    pub horizon: f64,
    /// min
    pub past_horizon: f64,
    /// Transport limit for returned traces.
    pub max_points: usize,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            patient: VirtualPatient::default(),
            controller: ControllerConfig::default(),
            horizon: 360.0,
            past_horizon: 60.0,
            max_points: 500,
            cors_origins: vec!["http://localhost:5173".into()],
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub network: Option<EstimatorNetwork>,
}

/// Structured error body `{code, step, message}`. `step` is the pipeline
/// step index, 0 for request validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub step: u8,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, step: u8, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            step,
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", 0, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", 0, r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", 0, r.body_text())
    }
}

/// Trace for transport: time grid plus the CGM, IOB and insulin-rate channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceView {
    pub t0: f64,
    pub dt: f64,
    pub glucose: Vec<f64>,
    pub iob: Vec<f64>,
    pub u: Vec<f64>,
}

impl TraceView {
    pub fn of(trace: &Trace, max_points: usize) -> Self {
        let d = trace.downsample(max_points);
        Self {
            t0: d.t0(),
            dt: d.dt(),
            glucose: d.glucose(),
            iob: d.iob(),
            u: d.samples().iter().map(|s| s.u).collect(),
        }
    }
}

fn default_mode() -> PlanMode {
    PlanMode::Exact
}

#[derive(Debug, Clone, Deserialize)]
pub struct AdviseRequest {
    /// g
    pub carbs: f64,
    pub cr: f64,
    /// U; replaces the model's IOB estimate.
    #[serde(default)]
    pub iob: Option<f64>,
    /// Context trace ending at the meal; a resting trace when absent.
    #[serde(default)]
    pub trace: Option<Trace>,
    /// Same as `trace`, in the CSV format.
    #[serde(default)]
    pub trace_csv: Option<String>,
    /// IOB samples under the estimator protocol; needs a loaded checkpoint.
    #[serde(default)]
    pub calibration: Option<Vec<f64>>,
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
    #[serde(default)]
    pub meal_time: f64,
    #[serde(default)]
    pub horizon_min: Option<f64>,
    #[serde(default)]
    pub query: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdviseResponse {
    pub dose: f64,
    pub plan: UsagePlan,
    pub verdict: Verdict,
    pub rho: f64,
    pub first_violation: Option<f64>,
    pub feedback: Option<String>,
    pub metrics: OutcomeMetrics,
    pub predicted: TraceView,
    pub provenance: Value,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimulateRequest {
    #[serde(default)]
    pub carbs: f64,
    pub cr: f64,
    #[serde(default)]
    pub iob: f64,
    #[serde(default)]
    pub meal_time: f64,
    /// Either a full plan or a single bolus at the meal.
    #[serde(default)]
    pub plan: Option<UsagePlan>,
    #[serde(default)]
    pub dose: Option<f64>,
    #[serde(default)]
    pub horizon_min: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub trace: TraceView,
    pub metrics: OutcomeMetrics,
    pub verdict: Verdict,
    pub rho: f64,
    pub first_violation: Option<f64>,
    pub feedback: Option<String>,
    pub min_glucose: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EstimateRequest {
    #[serde(default)]
    pub trace: Option<Trace>,
    #[serde(default)]
    pub iob: Option<Vec<f64>>,
    /// Sampling period of `iob` (min); the protocol's when absent.
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MetricsQuery {
    /// Comma-separated CGM values.
    pub trace: String,
    /// min
    #[serde(default)]
    pub dt: Option<f64>,
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = if state.config.cors_origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = state
            .config
            .cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/advise", post(advise))
        .route("/v1/simulate", post(simulate))
        .route("/v1/estimate", post(estimate))
        .route("/v1/metrics", get(metrics))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": VERSION,
        "estimator_loaded": state.network.is_some(),
    }))
}

fn check_horizon(h: f64) -> Result<f64, ApiError> {
    if h.is_finite() && h > 0.0 && h <= 24.0 * 60.0 {
        Ok(h)
    } else {
        Err(ApiError::validation(format!(
            "horizon_min must lie in (0, 1440] (got {h})"
        )))
    }
}

fn controller_for(state: &AppState, cr: f64) -> Result<ControllerConfig, ApiError> {
    let c = state.config.controller.with_cr(cr);
    c.validate()
        .map_err(|e| ApiError::validation(e.to_string()))?;
    Ok(c)
}

pub fn advise_blocking(state: &AppState, body: AdviseRequest) -> Result<AdviseResponse, ApiError> {
    if body.mode == PlanMode::Faulty {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "mode_not_allowed",
            0,
            "the faulty planner is a research baseline and is not served",
        ));
    }
    let ctrl = controller_for(state, body.cr)?;
    let horizon = check_horizon(body.horizon_min.unwrap_or(state.config.horizon))?;
    let meal = MealEvent::new(body.meal_time, body.carbs)
        .map_err(|e| ApiError::validation(e.to_string()))?;
    let mut req = PlanRequest::at_rest(
        &state.config.patient,
        ctrl,
        Some(meal),
        horizon,
        state.config.past_horizon,
    )
    .map_err(|e| ApiError::validation(e.to_string()))?;
    req.query = body.query;
    req.iob_override = body.iob;
    let context = match (body.trace, body.trace_csv) {
        (Some(_), Some(_)) => {
            return Err(ApiError::validation(
                "give either trace or trace_csv, not both",
            ))
        }
        (Some(t), None) => Some(t),
        (None, Some(csv)) => Some(
            Trace::parse_csv(csv.as_bytes()).map_err(|e| ApiError::validation(e.to_string()))?,
        ),
        (None, None) => None,
    };
    if let Some(t) = context {
        req.past_horizon = req.past_horizon.min(t.span());
        req.context = t;
    }
    let source = match (&body.calibration, &state.network) {
        (Some(iob), Some(net)) => {
            let tr = Trace::from_iob(0.0, net.protocol.dt, iob)
                .map_err(|e| ApiError::validation(e.to_string()))?;
            req.calibration = Some(tr);
            CoefficientSource::Network(net)
        }
        (Some(_), None) => {
            return Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "no_checkpoint",
                1,
                "calibration given but no estimator checkpoint is loaded",
            ))
        }
        (None, _) => CoefficientSource::Fixed,
    };
    let d = run_pipeline(
        &req,
        &state.config.patient,
        source,
        TracePredictor::Local,
        PlanMapper::RuleBased(body.mode),
    )
    .map_err(|e| {
        let (status, code) = if e.step.index() == 0 {
            (StatusCode::UNPROCESSABLE_ENTITY, "validation")
        } else {
            (StatusCode::INTERNAL_SERVER_ERROR, "pipeline")
        };
        ApiError::new(status, code, e.step.index(), e.message)
    })?;
    let metrics = outcome_metrics(&d.predicted).map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "pipeline",
            5,
            e.to_string(),
        )
    })?;
    let max = state.config.max_points;
    let mut provenance = serde_json::to_value(&d.provenance).unwrap_or(Value::Null);
    if let Some(p) = provenance.as_object_mut() {
        // transport the prediction in the same reduced form as the gated trace
        p.insert(
            "prediction".into(),
            serde_json::to_value(TraceView::of(&d.provenance.prediction, max))
                .unwrap_or(Value::Null),
        );
    }
    Ok(AdviseResponse {
        dose: d.dose(),
        verdict: d.verdict,
        rho: d.robustness.rho,
        first_violation: d.first_violation,
        feedback: d.feedback.clone(),
        metrics,
        predicted: TraceView::of(&d.predicted, max),
        plan: d.plan,
        provenance,
    })
}

pub fn simulate_blocking(
    state: &AppState,
    body: SimulateRequest,
) -> Result<SimulateResponse, ApiError> {
    let ctrl = controller_for(state, body.cr)?;
    let horizon = check_horizon(body.horizon_min.unwrap_or(state.config.horizon))?;
    if !(body.iob.is_finite() && body.iob >= 0.0) {
        return Err(ApiError::validation(format!(
            "iob must be >= 0 (got {})",
            body.iob
        )));
    }
    if !(body.carbs.is_finite() && body.carbs >= 0.0) {
        return Err(ApiError::validation(format!(
            "carbs must be >= 0 (got {})",
            body.carbs
        )));
    }
    let plan = match (body.plan, body.dose) {
        (Some(_), Some(_)) => {
            return Err(ApiError::validation("give either plan or dose, not both"))
        }
        (Some(p), None) => p,
        (None, Some(d)) => UsagePlan::single_bolus(body.meal_time, d),
        (None, None) => UsagePlan::empty(),
    };
    plan.validate(horizon)
        .map_err(|e| ApiError::validation(e.to_string()))?;
    let vp = &state.config.patient;
    let plant = vp
        .plant(ctrl.cr, ctrl.basal_rate)
        .map_err(|e| ApiError::validation(e.to_string()))?;
    let start = with_insulin_on_board(
        &vp.rest_state(ctrl.basal_rate),
        &plant.coeffs,
        ctrl.basal_rate,
        body.iob,
    );
    let meals: Vec<Meal> = (body.carbs > 0.0)
        .then_some(Meal {
            time: body.meal_time,
            carbs: body.carbs,
        })
        .into_iter()
        .collect();
    let internal = |step: u8, e: &dyn std::fmt::Display| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "simulation",
            step,
            e.to_string(),
        )
    };
    let trace = forward_simulate(
        &plan,
        &plant,
        &start,
        &ctrl,
        &meals,
        horizon,
        &Default::default(),
    )
    .map_err(|e| internal(4, &e))?;
    let outcome = gate(&trace, &SafetyCriterion::default()).map_err(|e| internal(5, &e))?;
    let metrics = outcome_metrics(&trace).map_err(|e| internal(5, &e))?;
    Ok(SimulateResponse {
        metrics,
        verdict: outcome.verdict,
        rho: outcome.robustness.rho,
        first_violation: outcome.first_violation,
        feedback: outcome.feedback,
        min_glucose: trace.glucose().into_iter().fold(f64::INFINITY, f64::min),
        trace: TraceView::of(&trace, state.config.max_points),
    })
}

pub fn estimate_blocking(state: &AppState, body: EstimateRequest) -> Result<Value, ApiError> {
    let net = state.network.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no_checkpoint",
            1,
            "no estimator checkpoint is loaded",
        )
    })?;
    let trace = match (body.trace, body.iob) {
        (Some(t), None) => t,
        (None, Some(v)) => Trace::from_iob(0.0, body.dt.unwrap_or(net.protocol.dt), &v)
            .map_err(|e| ApiError::validation(e.to_string()))?,
        _ => return Err(ApiError::validation("give exactly one of trace or iob")),
    };
    let c = net.estimate_coefficients(&trace, true).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "estimate",
            1,
            e.to_string(),
        )
    })?;
    Ok(json!({ "k1": c.k1, "n": c.n, "p1": c.p1 }))
}

pub fn metrics_of(query: &MetricsQuery) -> Result<Value, ApiError> {
    let values: Result<Vec<f64>, _> = query
        .trace
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>())
        .collect();
    let values = values.map_err(|e| ApiError::validation(format!("trace: {e}")))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::validation("trace values must be finite"));
    }
    let trace = Trace::from_glucose(0.0, query.dt.unwrap_or(5.0), &values)
        .map_err(|e| ApiError::validation(e.to_string()))?;
    let m = outcome_metrics(&trace).map_err(|e| ApiError::validation(e.to_string()))?;
    let ada = ada_report(&trace, None).map_err(|e| ApiError::validation(e.to_string()))?;
    Ok(json!({
        "tir": m.tir,
        "tar": m.tar,
        "tbr": m.tbr,
        "mean_cgm": m.mean_cgm,
        "rho": ada.robustness.rho,
        "safe": ada.robustness.is_satisfied(),
    }))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            0,
            e.to_string(),
        )
    })?
}

async fn advise(
    State(state): State<Arc<AppState>>,
    body: Result<Json<AdviseRequest>, JsonRejection>,
) -> Result<Json<AdviseResponse>, ApiError> {
    let Json(body) = body?;
    blocking(move || advise_blocking(&state, body))
        .await
        .map(Json)
}

async fn simulate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SimulateRequest>, JsonRejection>,
) -> Result<Json<SimulateResponse>, ApiError> {
    let Json(body) = body?;
    blocking(move || simulate_blocking(&state, body))
        .await
        .map(Json)
}

async fn estimate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<EstimateRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) = body?;
    blocking(move || estimate_blocking(&state, body))
        .await
        .map(Json)
}

async fn metrics(
    query: Result<Query<MetricsQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let Query(q) = query?;
    metrics_of(&q).map(Json)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

pub async fn serve(state: AppState) -> Result<(), ServeError> {
    let addr = state.config.bind.clone();
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let local: Option<SocketAddr> = listener.local_addr().ok();
    log::info!("listening on {}", local.map_or(addr, |a| a.to_string()));
    axum::serve(listener, router(Arc::new(state)))
        .await
        .map_err(ServeError::Serve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_view_respects_point_limit() {
        let tr = Trace::from_glucose(0.0, 1.0, &vec![100.0; 1441]).unwrap();
        let v = TraceView::of(&tr, 500);
        assert!(v.glucose.len() <= 500);
        assert_eq!(v.glucose.len(), v.iob.len());
        assert_eq!(v.dt, 3.0);
    }

    #[test]
    fn metrics_from_query_text() {
        let q = MetricsQuery {
            trace: "100, 60,200,100".into(),
            dt: Some(5.0),
        };
        let v = metrics_of(&q).unwrap();
        assert_eq!(
            (v["tbr"].as_f64(), v["tar"].as_f64()),
            (Some(25.0), Some(25.0))
        );
        assert_eq!(v["safe"], false);
        let empty = MetricsQuery {
            trace: " , ".into(),
            dt: None,
        };
        assert_eq!(metrics_of(&empty).unwrap_err().code, "validation");
    }

    #[test]
    fn error_body_shape() {
        let e = ApiError::validation("cr must lie in [1, 50]");
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(
            v,
            json!({"code": "validation", "step": 0, "message": "cr must lie in [1, 50]"})
        );
    }
}
