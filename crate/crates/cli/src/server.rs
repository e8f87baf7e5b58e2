//! HTTP and WebSocket front end for simulation sessions.
//!
//! | route | purpose |
//! |---|---|
//! | `GET /world`, `PUT /world` | shared obstacle map as canonical JSON |
//! | `POST /session` | new session from a session config, returns `{"id": n}` |
//! | `DELETE /session/{id}` | drop a session |
//! | `GET /session/{id}/stream` | WebSocket: envelopes in, telemetry out |
//! | `GET /frames/synth` | a synthetic left/right eye pair as base64 PNG |
//!
//! Every envelope received on a stream is applied to the session against a
//! snapshot of the world taken when the message arrives, and each resulting
//! tick is sent back as one JSON text message. Unparseable messages close the
//! socket with code 1007, rejected ones with 1008; the close reason carries
//! the error text.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use gazechair_core::corpus::{GazeClass, Scenario};
use gazechair_core::safety::World2D;
use gazechair_core::session::{encode_png_b64, synth_frame, Envelope, SessionConfig, SimSession};
use gazechair_core::EyeSide;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const CLOSE_INVALID_PAYLOAD: u16 = 1007;
pub const CLOSE_POLICY: u16 = 1008;
pub const CLOSE_UNSUPPORTED: u16 = 1003;
pub const CLOSE_INTERNAL: u16 = 1011;

#[derive(Default)]
pub struct AppState {
    world: RwLock<World2D>,
    sessions: Mutex<HashMap<u64, Arc<Mutex<SimSession>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(world: World2D) -> Arc<Self> {
        Arc::new(AppState {
            world: RwLock::new(world),
            ..Default::default()
        })
    }

    fn session(&self, id: u64) -> Option<Arc<Mutex<SimSession>>> {
        self.sessions.lock().expect("session map lock").get(&id).cloned()
    }

    fn world(&self) -> World2D {
        self.world.read().expect("world lock").clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/world", get(get_world).put(put_world))
        .route("/session", axum::routing::post(create_session))
        .route("/session/{id}", axum::routing::delete(delete_session))
        .route("/session/{id}/stream", get(stream))
        .route("/frames/synth", get(synth_pair))
        .with_state(state)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

fn json_text(status: StatusCode, body: String) -> Response {
    (status, [(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn get_world(State(st): State<Arc<AppState>>) -> Response {
    match st.world().to_json() {
        Ok(text) => json_text(StatusCode::OK, text),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn put_world(State(st): State<Arc<AppState>>, body: String) -> Response {
    let world = match World2D::from_json(&body) {
        Ok(w) => w,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let text = match world.to_json() {
        Ok(t) => t,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    *st.world.write().expect("world lock") = world;
    json_text(StatusCode::OK, text)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
}

async fn create_session(State(st): State<Arc<AppState>>, body: String) -> Response {
    let config = if body.trim().is_empty() {
        Ok(SessionConfig::default())
    } else {
        SessionConfig::from_json(&body)
    };
    let built = match config {
        Ok(c) => tokio::task::spawn_blocking(move || SimSession::from_config(c)).await,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match built {
        Ok(Ok(session)) => {
            let id = st.next_id.fetch_add(1, Ordering::Relaxed) + 1;
            st.sessions.lock().expect("session map lock").insert(id, Arc::new(Mutex::new(session)));
            (StatusCode::CREATED, Json(Created { id })).into_response()
        }
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<u64>) -> Response {
    match st.sessions.lock().expect("session map lock").remove(&id) {
        Some(_) => StatusCode::NO_CONTENT.into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

async fn stream(State(st): State<Arc<AppState>>, Path(id): Path<u64>, ws: WebSocketUpgrade) -> Response {
    match st.session(id) {
        Some(session) => ws.on_upgrade(move |socket| run_socket(socket, st, id, session)),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

async fn close(socket: &mut WebSocket, code: u16, reason: impl ToString) {
    let mut reason = reason.to_string();
    // Close reasons are limited to 123 bytes.
    while reason.len() > 123 {
        reason.pop();
    }
    let _ = socket
        .send(Message::Close(Some(CloseFrame {
            code,
            reason: reason.into(),
        })))
        .await;
}

async fn run_socket(mut socket: WebSocket, st: Arc<AppState>, id: u64, session: Arc<Mutex<SimSession>>) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(_) => {
                close(&mut socket, CLOSE_UNSUPPORTED, "send JSON text messages").await;
                return;
            }
            Message::Close(_) => return,
            _ => continue,
        };
        if st.session(id).is_none() {
            close(&mut socket, 1000, "session deleted").await;
            return;
        }
        let env = match Envelope::parse(text.as_str()) {
            Ok(e) => e,
            Err(e) => {
                close(&mut socket, CLOSE_INVALID_PAYLOAD, e).await;
                return;
            }
        };
        let world = st.world();
        let s = session.clone();
        let outcome = tokio::task::spawn_blocking(move || s.lock().expect("session lock").apply(&env, &world)).await;
        match outcome {
            Ok(Ok(ticks)) => {
                for t in ticks {
                    let Ok(line) = serde_json::to_string(&t) else {
                        close(&mut socket, CLOSE_INTERNAL, "telemetry encoding failed").await;
                        return;
                    };
                    if socket.send(Message::Text(line.into())).await.is_err() {
                        return;
                    }
                }
            }
            Ok(Err(e)) => {
                close(&mut socket, CLOSE_POLICY, e).await;
                return;
            }
            Err(e) => {
                close(&mut socket, CLOSE_INTERNAL, e).await;
                return;
            }
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct SynthQuery {
    pub left: GazeClass,
    pub right: GazeClass,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_user")]
    pub user_seed: u64,
    /// Scenario directory name such as `indoor_nominal`.
    pub scenario: Option<String>,
}

fn default_user() -> u64 {
    1
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FramePair {
    pub left: String,
    pub right: String,
}

async fn synth_pair(Query(q): Query<SynthQuery>) -> Response {
    let scenario = match q.scenario.as_deref().map(Scenario::from_dir_name) {
        None => Scenario::default(),
        Some(Some(s)) => s,
        Some(None) => return error(StatusCode::BAD_REQUEST, "unknown scenario"),
    };
    let render = |class, seed, side| synth_frame(q.user_seed, scenario, class, seed, side).and_then(|f| encode_png_b64(&f));
    let pair = render(q.left, q.seed.wrapping_mul(2), EyeSide::Left).and_then(|left| {
        render(q.right, q.seed.wrapping_mul(2).wrapping_add(1), EyeSide::Right).map(|right| FramePair { left, right })
    });
    match pair {
        Ok(p) => Json(p).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// Binds `addr`, prints the bound address and serves.
pub async fn run(addr: SocketAddr, world: World2D) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    serve(listener, AppState::new(world)).await?;
    Ok(())
}
