//! HTTP annotation service: serves pairs of sampled responses to human
//! annotators and appends their choices to a preference file.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ivy_core::model::PolicyCheckpoint;
use ivy_core::reward::{load_preferences, Origin, PreferenceRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::ServeArgs;
use crate::commands::data::load_prompts;
use crate::commands::sample::{draw, encode_prompt, Sampling};
use crate::error::{CliError, CliResult};
use crate::manifest::{FileRecord, RunManifest, RunStatus};
use crate::runner::require_file;

const PLACEHOLDER_PAGE: &str = include_str!("../assets/index.html");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Done,
}

/// One pairwise comparison between two of a prompt's candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub prompt: String,
    /// Every candidate sampled for the prompt.
    pub responses: Vec<String>,
    /// Indices into `responses` of the two candidates to compare.
    pub pair: [usize; 2],
    pub status: TaskStatus,
    pub annotator: Option<String>,
}

impl AnnotationTask {
    fn asks(&self, a: usize, b: usize) -> bool {
        let [x, y] = self.pair;
        (a, b) == (x, y) || (a, b) == (y, x)
    }

    fn matches(&self, r: &PreferenceRecord) -> bool {
        let [x, y] = self.pair;
        let (p, q) = (&self.responses[x], &self.responses[y]);
        r.prompt == self.prompt && ((&r.chosen, &r.rejected) == (p, q) || (&r.chosen, &r.rejected) == (q, p))
    }
}

/// Tasks for each prompt's distinct candidates: the candidates are put in
/// a seeded random order and every adjacent pair becomes one task.
pub fn tasks_from_candidates(candidates: &[(String, Vec<String>)], seed: u64) -> Vec<AnnotationTask> {
    let mut tasks = Vec::new();
    for (pi, (prompt, responses)) in candidates.iter().enumerate() {
        if responses.len() < 2 {
            continue;
        }
        let mut order: Vec<usize> = (0..responses.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        for (j, w) in order.windows(2).enumerate() {
            tasks.push(AnnotationTask {
                id: format!("p{pi}-{j}"),
                prompt: prompt.clone(),
                responses: responses.clone(),
                pair: [w[0], w[1]],
                status: TaskStatus::Pending,
                annotator: None,
            });
        }
    }
    tasks
}

/// Samples up to `k` distinct, non-empty candidates per prompt, retrying
/// a bounded number of times. Prompts left with fewer than two are
/// skipped with a warning.
pub fn sample_candidates(
    ck: &PolicyCheckpoint,
    prompts: &[String],
    k: usize,
    s: &Sampling,
) -> CliResult<Vec<(String, Vec<String>)>> {
    let attempts = 8 * k;
    let mut out = Vec::with_capacity(prompts.len());
    for (pi, prompt) in prompts.iter().enumerate() {
        let (ids, _) = encode_prompt(ck, prompt);
        let mut seen = BTreeSet::new();
        let mut responses = Vec::new();
        for a in 0..attempts {
            if responses.len() == k {
                break;
            }
            let (text, _, _) = draw(ck, &ids, s, pi * attempts + a)?;
            if !text.trim().is_empty() && seen.insert(text.clone()) {
                responses.push(text);
            }
        }
        if responses.len() < 2 {
            log::warn!("prompt {} yielded fewer than two distinct responses; skipped", pi + 1);
        }
        out.push((prompt.clone(), responses));
    }
    Ok(out)
}

pub struct AnnotationState {
    tasks: Vec<AnnotationTask>,
    out_path: PathBuf,
    file: File,
}

pub type SharedState = Arc<Mutex<AnnotationState>>;

impl AnnotationState {
    /// Opens `out_path` for appending. Tasks already answered in an
    /// existing file are marked done, so a restarted service resumes.
    pub fn new(mut tasks: Vec<AnnotationTask>, out_path: &Path) -> CliResult<Self> {
        if out_path.is_file() {
            let existing = load_preferences(out_path)?;
            for t in tasks.iter_mut() {
                if existing.iter().any(|r| t.matches(r)) {
                    t.status = TaskStatus::Done;
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_path)
            .map_err(|e| CliError::io(out_path, e))?;
        Ok(AnnotationState { tasks, out_path: out_path.to_path_buf(), file })
    }

    pub fn shared(self) -> SharedState {
        Arc::new(Mutex::new(self))
    }

    pub fn progress(&self) -> Progress {
        Progress {
            total: self.tasks.len(),
            done: self.tasks.iter().filter(|t| t.status == TaskStatus::Done).count(),
        }
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    /// First pending task that is unassigned or already assigned to
    /// `annotator`; failing that, any pending task.
    fn next_for(&mut self, annotator: Option<&str>) -> Option<AnnotationTask> {
        let pos = self
            .tasks
            .iter()
            .position(|t| t.status == TaskStatus::Pending && (t.annotator.is_none() || t.annotator.as_deref() == annotator))
            .or_else(|| self.tasks.iter().position(|t| t.status == TaskStatus::Pending))?;
        let t = &mut self.tasks[pos];
        if t.annotator.is_none() {
            t.annotator = annotator.map(str::to_string);
        }
        Some(t.clone())
    }

    fn submit(&mut self, s: &Submission) -> Result<PreferenceRecord, (StatusCode, String)> {
        let bad = |code, m: &str| Err((code, m.to_string()));
        if s.chosen_index == s.rejected_index {
            return bad(StatusCode::BAD_REQUEST, "chosen and rejected are the same response");
        }
        if s.annotator.trim().is_empty() {
            return bad(StatusCode::BAD_REQUEST, "annotator id is empty");
        }
        let Some(task) = self.tasks.iter_mut().find(|t| t.id == s.task_id) else {
            return bad(StatusCode::NOT_FOUND, "unknown task");
        };
        if !task.asks(s.chosen_index, s.rejected_index) {
            return bad(StatusCode::BAD_REQUEST, "that pair was not asked in this task");
        }
        if task.status == TaskStatus::Done {
            return bad(StatusCode::CONFLICT, "this pair already has a recorded preference");
        }
        let record = PreferenceRecord {
            prompt: task.prompt.clone(),
            chosen: task.responses[s.chosen_index].clone(),
            rejected: task.responses[s.rejected_index].clone(),
            annotator: s.annotator.clone(),
            ts: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            origin: Origin::Ui,
        };
        let mut line = serde_json::to_string(&record).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        line.push('\n');
        // One write of the whole line, under the lock, then flushed to disk.
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", self.out_path.display())))?;
        task.status = TaskStatus::Done;
        task.annotator = Some(s.annotator.clone());
        Ok(record)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub done: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub chosen_index: usize,
    pub rejected_index: usize,
    pub annotator: String,
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Clone)]
struct AppState {
    shared: SharedState,
    static_dir: Option<Arc<PathBuf>>,
}

fn lock(s: &SharedState) -> std::sync::MutexGuard<'_, AnnotationState> {
    s.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn next_task(State(app): State<AppState>, Query(q): Query<NextQuery>) -> Response {
    match lock(&app.shared).next_for(q.annotator.as_deref().filter(|a| !a.is_empty())) {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_preference(State(app): State<AppState>, Json(s): Json<Submission>) -> Response {
    let mut st = lock(&app.shared);
    match st.submit(&s) {
        Ok(_) => Json(json!({ "recorded": true, "progress": st.progress() })).into_response(),
        Err((code, message)) => (code, Json(json!({ "error": message }))).into_response(),
    }
}

async fn progress(State(app): State<AppState>) -> Json<Progress> {
    Json(lock(&app.shared).progress())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Maps a URL path onto a file under `root`, refusing anything that could
/// leave it.
fn resolve_static(root: &Path, url: &str) -> Option<PathBuf> {
    let rel = Path::new(url.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut p = root.join(rel);
    if url.is_empty() || url.ends_with('/') || p.is_dir() {
        p = p.join("index.html");
    }
    p.is_file().then_some(p)
}

async fn serve_static(app: AppState, url: &str) -> Response {
    match &app.static_dir {
        Some(root) => match resolve_static(root, url) {
            Some(p) => match std::fs::read(&p) {
                Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&p))], bytes).into_response(),
                Err(_) => StatusCode::NOT_FOUND.into_response(),
            },
            None => StatusCode::NOT_FOUND.into_response(),
        },
        None if url.is_empty() || url == "index.html" => Html(PLACEHOLDER_PAGE).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn static_root(State(app): State<AppState>) -> Response {
    serve_static(app, "").await
}

async fn static_file(State(app): State<AppState>, UrlPath(path): UrlPath<String>) -> Response {
    serve_static(app, &path).await
}

/// Routes of the service; `static_dir` holds the built UI, otherwise a
/// placeholder page is served at `/`.
pub fn router(shared: SharedState, static_dir: Option<PathBuf>) -> Router {
    let app = AppState { shared, static_dir: static_dir.map(Arc::new) };
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/preferences", post(post_preference))
        .route("/api/progress", get(progress))
        .route("/", get(static_root))
        .route("/{*path}", get(static_file))
        .with_state(app)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct ServeConfig {
    k: usize,
    host: String,
    port: u16,
    sampling: Sampling,
    static_dir: Option<PathBuf>,
}

pub fn serve_annotate(a: &ServeArgs) -> CliResult<RunManifest> {
    let sampling = Sampling::from_args(&a.sampling)?;
    if a.k < 2 {
        return Err(CliError::Usage("--k must be at least 2 to form a pair".into()));
    }
    require_file("checkpoint", &a.ckpt)?;
    require_file("prompts", &a.prompts)?;
    if let Some(d) = &a.static_dir {
        if !d.is_dir() {
            return Err(CliError::Usage(format!("static directory {} does not exist", d.display())));
        }
    }
    let cfg = ServeConfig {
        k: a.k,
        host: a.host.clone(),
        port: a.port,
        sampling,
        static_dir: a.static_dir.clone(),
    };
    let mut manifest = RunManifest::start(
        "serve-annotate",
        serde_json::to_value(&cfg)?,
        &[("policy", a.ckpt.clone()), ("prompts", a.prompts.clone())],
    )?;

    let ck = PolicyCheckpoint::load(&a.ckpt)?;
    let prompts = load_prompts(&a.prompts)?;
    let candidates = sample_candidates(&ck, &prompts, a.k, &sampling)?;
    let tasks = tasks_from_candidates(&candidates, sampling.seed);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let state = AnnotationState::new(tasks, &a.out)?.shared();
    let mpath = manifest_path(&a.out);
    manifest.write(&mpath)?;

    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        let p = lock(&state).progress();
        println!("annotation service on http://{addr} ({} of {} tasks done)", p.done, p.total);
        axum::serve(listener, router(state.clone(), a.static_dir.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Runtime(format!("server error: {e}")))
    });

    manifest.finished_at = Some(crate::manifest::now());
    match served {
        Ok(()) => {
            manifest.outputs = vec![FileRecord::of("preferences", &a.out)?];
            manifest.status = RunStatus::Success;
        }
        Err(e) => {
            manifest.status = RunStatus::Failure;
            manifest.error = Some(e.to_string());
        }
    }
    manifest.write(&mpath)?;
    Ok(manifest)
}
