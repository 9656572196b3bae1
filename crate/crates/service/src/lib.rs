//! Interactive render endpoint over WebSocket.
//!
//! Each connection owns a [`Session`]. Frame-producing requests
//! (`set_state`, `set_camera`, `render`) share one latest-wins slot: a newer
//! request replaces a waiting one, which is answered with `superseded`.
//! Queries are queued in order. One worker per connection renders.

pub mod protocol;
pub mod session;

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Notify};

pub use protocol::{ClientMessage, Reply, Request, ServerMessage};
pub use session::{Scene, Session, DEFAULT_SIZE};

#[derive(Clone)]
pub struct ServerState {
    pub scene: Arc<Scene>,
    pub width: usize,
    pub height: usize,
}

pub fn router(state: ServerState) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: ServerState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<ServerState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

enum Job {
    Frame(u64),
    Query(u64, String),
}

#[derive(Default)]
struct Pending {
    frame: Option<u64>,
    queries: VecDeque<(u64, String)>,
    closed: bool,
}

struct Shared {
    session: Mutex<Session>,
    pending: Mutex<Pending>,
    wake: Notify,
}

impl Shared {
    fn next_job(&self) -> Option<Job> {
        let mut p = self.pending.lock().expect("pending lock");
        if let Some((id, text)) = p.queries.pop_front() {
            return Some(Job::Query(id, text));
        }
        p.frame.take().map(Job::Frame)
    }

    /// Stores a frame request, returning the id it displaced.
    fn request_frame(&self, id: u64) -> Option<u64> {
        let displaced = self.pending.lock().expect("pending lock").frame.replace(id);
        self.wake.notify_one();
        displaced
    }
}

async fn connection(socket: WebSocket, state: ServerState) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let text = serde_json::to_string(&msg).expect("reply serialises");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    let shared = Arc::new(Shared {
        session: Mutex::new(Session::new(state.scene.clone(), state.width, state.height)),
        pending: Mutex::new(Pending::default()),
        wake: Notify::new(),
    });
    let hello = shared.session.lock().expect("session lock").hello();
    let _ = tx.send(ServerMessage::new(0, hello));

    let worker = tokio::spawn(render_worker(shared.clone(), tx.clone()));

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = tx.send(ServerMessage::error(None, "binary messages are not supported"));
                continue;
            }
            _ => continue,
        };
        let replies = match protocol::parse_client(text.as_str()) {
            Ok(m) => handle(&shared, m),
            Err((id, reason)) => vec![ServerMessage::error(id, reason)],
        };
        if replies.into_iter().any(|r| tx.send(r).is_err()) {
            break;
        }
    }

    shared.pending.lock().expect("pending lock").closed = true;
    shared.wake.notify_one();
    let _ = worker.await;
    drop(tx);
    let _ = writer.await;
}

/// Applies a request and returns the immediate replies. Rendering work is
/// handed to the worker.
fn handle(shared: &Shared, msg: ClientMessage) -> Vec<ServerMessage> {
    let id = msg.id;
    let mut out = Vec::new();
    match msg.request {
        Request::Info => return vec![ServerMessage::new(id, shared.session.lock().expect("session lock").hello())],
        Request::Query { text } => {
            if text.trim().is_empty() {
                return vec![ServerMessage::error(Some(id), "query text is empty")];
            }
            shared.pending.lock().expect("pending lock").queries.push_back((id, text));
            shared.wake.notify_one();
            return out;
        }
        Request::Render => {}
        Request::SetState { kappa } => match shared.session.lock().expect("session lock").set_state(&kappa) {
            Ok(k) => out.push(ServerMessage::new(id, Reply::StateAck { kappa: k })),
            Err(e) => return vec![ServerMessage::error(Some(id), e.to_string())],
        },
        Request::SetCamera { pose, fx, fy } => {
            if let Err(e) = shared.session.lock().expect("session lock").set_camera(&pose, fx, fy) {
                return vec![ServerMessage::error(Some(id), e.to_string())];
            }
        }
    }
    if let Some(old) = shared.request_frame(id) {
        out.push(ServerMessage::new(old, Reply::Superseded));
    }
    out
}

async fn render_worker(shared: Arc<Shared>, tx: mpsc::UnboundedSender<ServerMessage>) {
    loop {
        let Some(job) = shared.next_job() else {
            if shared.pending.lock().expect("pending lock").closed {
                return;
            }
            shared.wake.notified().await;
            continue;
        };
        // snapshot the session so intake continues while rendering
        let session = shared.session.lock().expect("session lock").clone();
        let result = tokio::task::spawn_blocking(move || match job {
            Job::Frame(id) => (id, session.render()),
            Job::Query(id, text) => (id, session.query(&text)),
        })
        .await;
        let msg = match result {
            Ok((id, Ok(reply))) => ServerMessage::new(id, reply),
            Ok((id, Err(e))) => ServerMessage::error(Some(id), e.to_string()),
            Err(e) => ServerMessage::error(None, format!("render task failed: {e}")),
        };
        if tx.send(msg).is_err() {
            return;
        }
    }
}
