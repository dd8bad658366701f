use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::Serialize;
use tiny_http::{Header, Response, Server};

/// What `/upload` answers with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UploadReply {
    /// 2xx with `{"download_url": "<base>/d/<n>"}`; other codes with an error body.
    Status(u16),
    /// 200 with a body that is not the expected JSON.
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Default)]
struct State {
    requests: Vec<RecordedRequest>,
    upload_script: VecDeque<UploadReply>,
    uploads_ok: u64,
}

/// Local HTTP double for the team webhook (`/webhook`) and the
/// distribution endpoint (`/upload`). `GET /requests` returns the log as
/// JSON. Stops when dropped.
pub struct StubServer {
    server: Arc<Server>,
    state: Arc<Mutex<State>>,
    base_url: String,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds 127.0.0.1:`port`; 0 picks a free port.
    pub fn start(port: u16) -> std::io::Result<StubServer> {
        let server = Server::http(("127.0.0.1", port)).map_err(std::io::Error::other)?;
        let addr = server.server_addr().to_ip().expect("tcp listener");
        let base_url = format!("http://{addr}");
        let server = Arc::new(server);
        let state = Arc::new(Mutex::new(State::default()));
        let thread = {
            let (server, state, base) = (server.clone(), state.clone(), base_url.clone());
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    handle(request, &state, &base);
                }
            })
        };
        Ok(StubServer { server, state, base_url, thread: Some(thread) })
    }

    pub fn url(&self) -> &str {
        &self.base_url
    }

    pub fn webhook_url(&self) -> String {
        format!("{}/webhook", self.base_url)
    }

    pub fn upload_url(&self) -> String {
        format!("{}/upload", self.base_url)
    }

    /// Queues replies for the next uploads; afterwards uploads succeed.
    pub fn script_uploads(&self, replies: impl IntoIterator<Item = UploadReply>) {
        self.state.lock().unwrap().upload_script.extend(replies);
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn requests_to(&self, path: &str) -> Vec<RecordedRequest> {
        self.requests().into_iter().filter(|r| r.path == path).collect()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").expect("static header")
}

fn handle(mut request: tiny_http::Request, state: &Mutex<State>, base: &str) {
    let mut body = Vec::new();
    let _ = request.as_reader().read_to_end(&mut body);
    let path = request.url().split('?').next().unwrap_or("").to_string();
    let method = request.method().to_string();

    if method == "GET" && path == "/requests" {
        let log = serde_json::to_string(&state.lock().unwrap().requests).unwrap_or_default();
        let _ = request.respond(Response::from_string(log).with_header(json_header()));
        return;
    }
    let recorded = RecordedRequest {
        method: method.clone(),
        path: path.clone(),
        headers: request.headers().iter().map(|h| (h.field.to_string(), h.value.to_string())).collect(),
        body,
    };
    let mut state = state.lock().unwrap();
    state.requests.push(recorded);
    let response = match path.as_str() {
        "/webhook" if method == "POST" => Response::from_string("ok").with_status_code(200),
        "/upload" if method == "POST" => match state.upload_script.pop_front().unwrap_or(UploadReply::Status(200)) {
            UploadReply::Status(code) if (200..300).contains(&code) => {
                state.uploads_ok += 1;
                let body = serde_json::json!({ "download_url": format!("{base}/d/{}", state.uploads_ok) });
                Response::from_string(body.to_string()).with_status_code(code).with_header(json_header())
            }
            UploadReply::Status(code) => {
                Response::from_string(format!("{{\"error\":\"scripted {code}\"}}")).with_status_code(code)
            }
            UploadReply::Malformed => Response::from_string("<html>not json</html>").with_status_code(200),
        },
        _ => Response::from_string("not found").with_status_code(404),
    };
    drop(state);
    let _ = request.respond(response);
}
