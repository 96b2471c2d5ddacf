#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use persona_probe::activations::remote::RemoteBackend;
use persona_probe::chat::{ChatMessage, Decoding, Role};
use persona_probe::oracle::{ToyBackend, ToyConfig};
use persona_probe::persona::http::OpenAiCompatProvider;
use persona_probe::{ActivationBackend, CompletionProvider, Intervention, TokenPolicy};
use serde_json::{json, Value};

struct Request {
    method: String,
    path: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

/// One request per connection, answered with `Connection: close`.
fn serve(handler: Arc<Handler>, log: Arc<Mutex<Vec<Value>>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let handler = handler.clone();
            let log = log.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or("").to_string();
                let path = parts.next().unwrap_or("").to_string();
                let mut headers = Vec::new();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    let (k, v) = h.split_once(':').unwrap();
                    headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
                }
                let len: usize = headers
                    .iter()
                    .find(|(k, _)| k == "content-length")
                    .map_or(0, |(_, v)| v.parse().unwrap());
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req = Request { method, path, headers, body };
                if let Ok(v) = serde_json::from_slice::<Value>(&req.body) {
                    log.lock().unwrap().push(v);
                }
                let (status, payload) = handler(&req);
                let mut out = stream;
                write!(
                    out,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
            });
        }
    });
    format!("http://{addr}")
}

fn trace_json(toy: &ToyBackend, body: &[u8]) -> String {
    let v: Value = serde_json::from_slice(body).unwrap();
    let messages: Vec<ChatMessage> = serde_json::from_value(v["messages"].clone()).unwrap();
    let ivs: Vec<Intervention> = serde_json::from_value(v["interventions"].clone()).unwrap();
    let decoding: Decoding = serde_json::from_value(v["decoding"].clone()).unwrap();
    let t = toy.trace(&messages, &ivs, &decoding).unwrap();
    json!({"text": t.text, "prompt_states": t.prompt_states, "generated_states": t.generated_states}).to_string()
}

#[test]
fn remote_backend_round_trips_a_toy_model() {
    let toy = Arc::new(ToyBackend::new(ToyConfig { d: 16, layers: 3, sigma: 0.1, ..ToyConfig::default() }).unwrap());
    let served = toy.clone();
    let handler: Arc<Handler> = Arc::new(move |req: &Request| match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/v1/info") => (
            200,
            json!({"model_id": served.model_id(), "layer_count": 3, "hidden_dim": 16, "concurrent_safe": true}).to_string(),
        ),
        ("POST", "/v1/trace") => (200, trace_json(&served, &req.body)),
        _ => (404, "{}".into()),
    });
    let base = serve(handler, Arc::default());
    let remote = RemoteBackend::connect(&format!("{base}/")).unwrap();
    assert_eq!(remote.model_id(), toy.model_id());
    assert_eq!((remote.layer_count(), remote.hidden_dim(), remote.concurrent_safe()), (3, 16, true));

    let messages = vec![ChatMessage::system("Be brief."), ChatMessage::user("I am talkative and bold.")];
    let iv = vec![Intervention { layer: 1, vector: vec![0.25; 16], policy: TokenPolicy::EveryGeneratedToken }];
    let decoding = Decoding { max_tokens: 5, ..Decoding::default() };
    let a = remote.trace(&messages, &iv, &decoding).unwrap();
    let b = toy.trace(&messages, &iv, &decoding).unwrap();
    assert_eq!(a, b);

    let bad = vec![Intervention { layer: 0, vector: vec![0.0; 3], policy: TokenPolicy::LastInputOnly }];
    assert_eq!(remote.trace(&messages, &bad, &decoding).unwrap_err().code(), "DIMENSION_MISMATCH");
}

#[test]
fn remote_backend_errors_are_backend_errors() {
    let handler: Arc<Handler> = Arc::new(|req: &Request| match req.path.as_str() {
        "/v1/info" => (200, json!({"model_id": "m", "layer_count": 1, "hidden_dim": 2}).to_string()),
        _ => (500, "{\"detail\": \"boom\"}".into()),
    });
    let remote = RemoteBackend::connect(&serve(handler, Arc::default())).unwrap();
    assert!(!remote.concurrent_safe());
    let err = remote.trace(&[ChatMessage::user("x")], &[], &Decoding::default()).unwrap_err();
    assert_eq!(err.code(), "BACKEND_ERROR");
    assert!(err.is_retryable());
    assert_eq!(RemoteBackend::connect("http://127.0.0.1:1").err().unwrap().code(), "BACKEND_ERROR");
}

#[test]
fn openai_compatible_provider_request_shape() {
    let log: Arc<Mutex<Vec<Value>>> = Arc::default();
    let auth: Arc<Mutex<Option<String>>> = Arc::default();
    let seen = auth.clone();
    let handler: Arc<Handler> = Arc::new(move |req: &Request| {
        assert_eq!((req.method.as_str(), req.path.as_str()), ("POST", "/v1/chat/completions"));
        *seen.lock().unwrap() = req.headers.iter().find(|(k, _)| k == "authorization").map(|(_, v)| v.clone());
        (200, json!({"choices": [{"message": {"role": "assistant", "content": "Agree. I like people."}}]}).to_string())
    });
    let base = serve(handler, log.clone());
    let p = OpenAiCompatProvider::new(format!("{base}/v1/"), Some("sk-test".into()), "some-model").unwrap();
    let messages = vec![ChatMessage::system("sys"), ChatMessage::user("question")];
    let decoding = Decoding { max_tokens: 64, temperature: 0.0, seed: 9 };
    assert_eq!(p.generate(&messages, &decoding).unwrap(), "Agree. I like people.");
    assert_eq!(auth.lock().unwrap().as_deref(), Some("Bearer sk-test"));
    let body = log.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "some-model");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["seed"], 9);
    assert_eq!(body["messages"][0]["role"], "system");

    // Without system-role support the system text is folded into the user turn.
    let p = p.with_system_role(false);
    p.generate(&messages, &decoding).unwrap();
    let body = log.lock().unwrap()[1].clone();
    let sent: Vec<ChatMessage> = serde_json::from_value(body["messages"].clone()).unwrap();
    assert!(sent.iter().all(|m| m.role != Role::System));
    assert!(sent[0].content.contains("sys") && sent[0].content.contains("question"));
}

#[test]
fn provider_http_errors_are_retryable() {
    let handler: Arc<Handler> = Arc::new(|_: &Request| (429, "{\"error\": \"slow down\"}".into()));
    let p = OpenAiCompatProvider::new(serve(handler, Arc::default()), None, "m").unwrap();
    let err = p.generate(&[ChatMessage::user("x")], &Decoding::default()).unwrap_err();
    assert_eq!(err.code(), "PROVIDER_ERROR");
    assert!(err.is_retryable());
    assert!(err.to_string().contains("429"));
}
