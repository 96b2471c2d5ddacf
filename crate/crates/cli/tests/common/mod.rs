#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use persona_probe::activations::{collect, default_instructions, Position};
use persona_probe::chat::Decoding;
use persona_probe::directions::{fit_all, DirectionSet, FitOptions};
use persona_probe::oracle::{ToyBackend, ToyConfig, ToyProvider};
use persona_probe::persona::{annotate_character, default_roster, AnnotateOptions, CharacterProfile};
use persona_probe::ActivationBackend;
use persona_probe_cli::service::{self, AppState, ServiceConfig};
use tokio::sync::oneshot;

pub fn corpus(n: usize) -> Vec<CharacterProfile> {
    let provider = ToyProvider::new(0);
    default_roster()
        .iter()
        .take(n)
        .map(|c| annotate_character(c, &provider, &AnnotateOptions::default()).unwrap())
        .collect()
}

pub fn fit_toy(backend: &dyn ActivationBackend, profiles: &[CharacterProfile]) -> DirectionSet {
    let decoding = Decoding {
        max_tokens: 4,
        ..Decoding::default()
    };
    let records = collect(backend, profiles, &[0, 1], default_instructions(), &decoding).unwrap();
    let opts = FitOptions {
        positions: vec![Position::LastInputToken, Position::MeanInput],
        ..FitOptions::default()
    };
    fit_all(&records, backend.model_id(), &opts).unwrap()
}

pub fn toy_with_directions(cfg: ToyConfig, n: usize) -> (Arc<ToyBackend>, Arc<DirectionSet>) {
    let backend = Arc::new(ToyBackend::new(cfg).unwrap());
    let set = fit_toy(backend.as_ref(), &corpus(n));
    (backend, Arc::new(set))
}

pub struct Server {
    pub base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub async fn start(backend: Arc<dyn ActivationBackend>, directions: Arc<DirectionSet>, cfg: ServiceConfig) -> Server {
        let state = AppState::new(backend, directions, cfg);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr: SocketAddr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(service::serve(listener, state, async {
            let _ = rx.await;
        }));
        Server {
            base: format!("http://{addr}"),
            stop: Some(tx),
            handle,
        }
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.await.unwrap().unwrap();
    }
}
