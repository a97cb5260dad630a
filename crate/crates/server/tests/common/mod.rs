#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use mimir_core::ingest::Registry;
use mimir_core::pipeline::PipelineContext;
use mimir_core::prompt::PromptTemplates;
use mimir_core::provider::CompletionProvider;
use mimir_core::roleplay::RoleCatalog;
use mimir_core::trajectory::ToolRegistry;
use mimir_server::app::{App, AppConfig};
use mimir_server::job::Job;
use mimir_server::scheduler::Scheduler;
use serde_json::Value;
use tempfile::TempDir;

pub fn registry_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../registry")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn pipeline(provider: Arc<dyn CompletionProvider>) -> PipelineContext {
    PipelineContext {
        registry: Arc::new(Registry::open(registry_dir()).expect("registry opens")),
        roles: RoleCatalog::builtin(),
        templates: PromptTemplates::default(),
        tools: ToolRegistry::builtin(),
        provider,
    }
}

pub struct TestServer {
    pub base: String,
    pub scheduler: Arc<Scheduler>,
    pub client: reqwest::Client,
    data: Option<TempDir>,
    server: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.server.abort();
    }
}

impl TestServer {
    pub async fn start(provider: Arc<dyn CompletionProvider>) -> Self {
        Self::start_with(provider, |_| {}).await
    }

    pub async fn start_with(provider: Arc<dyn CompletionProvider>, tweak: impl FnOnce(&mut AppConfig)) -> Self {
        let data = tempfile::tempdir().expect("tempdir");
        Self::start_in(data, provider, tweak).await
    }

    /// Starts a server over an existing data directory, resuming its queued jobs.
    pub async fn start_in(
        data: TempDir,
        provider: Arc<dyn CompletionProvider>,
        tweak: impl FnOnce(&mut AppConfig),
    ) -> Self {
        let mut config = AppConfig::new(data.path(), registry_dir());
        tweak(&mut config);
        let (app, recovery) = App::from_parts(config, pipeline(provider.clone()), provider).expect("app builds");
        let scheduler = Scheduler::new(Arc::new(app));
        scheduler.resume(&recovery.queued);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
        let addr = listener.local_addr().expect("local addr");
        let router = mimir_server::api::router(scheduler.clone());
        let server = tokio::spawn(async move {
            axum::serve(listener, router).await.expect("serve");
        });
        Self {
            base: format!("http://{addr}"),
            scheduler,
            client: reqwest::Client::new(),
            data: Some(data),
            server,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.client.get(self.url(path)).send().await.expect("request");
        let status = resp.status().as_u16();
        (status, resp.json().await.expect("json body"))
    }

    pub async fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let resp = self.client.post(self.url(path)).json(body).send().await.expect("request");
        let status = resp.status().as_u16();
        (status, resp.json().await.expect("json body"))
    }

    /// Submits through the API and returns the new job id.
    pub async fn submit(&self, path: &str, body: &Value) -> String {
        let (status, reply) = self.post(path, body).await;
        assert_eq!(status, 200, "submission rejected: {reply}");
        reply["id"].as_str().expect("id").to_owned()
    }

    /// Polls `GET /api/jobs/{id}` until the job is terminal.
    pub async fn finish(&self, id: &str) -> Job {
        let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
        loop {
            let (status, body) = self.get(&format!("/api/jobs/{id}")).await;
            assert_eq!(status, 200);
            let job: Job = serde_json::from_value(body).expect("job decodes");
            if job.state.is_terminal() {
                return job;
            }
            assert!(tokio::time::Instant::now() < deadline, "job {id} did not finish");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    pub fn data_dir(&self) -> &Path {
        self.data.as_ref().expect("data dir").path()
    }

    /// Stops serving and hands back the data directory.
    pub fn shutdown(mut self) -> TempDir {
        self.server.abort();
        self.data.take().expect("data dir")
    }
}

#[cfg(unix)]
pub fn write_executable(path: &Path, body: &str) {
    use std::os::unix::fs::PermissionsExt;
    std::fs::write(path, body).expect("write script");
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o755)).expect("chmod");
}
