//! Review store on disk and the HTTP API in front of it.
//!
//! Store directory layout: `store.json` (whole state, atomically replaced),
//! `decisions.log` (one JSON line per decision, append-only), `images/` and
//! `raw/` PNGs referenced by the items.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use maskdiff_core::curation::{
    Candidate, CurationError, CurationState, Decision, EnqueueReport, ReviewItem, ReviewStatus,
};
use maskdiff_core::ellipse::EllipseParams;
use maskdiff_core::extraction::ExtractionResult;
use maskdiff_core::{AnnotatedPair, GrayImage, Provenance, TrimesterLabel};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io::{self, IoError};
use crate::manifest::{DatasetManifest, ManifestEntry, ManifestError};

pub const SCHEMA_VERSION: u32 = 1;
const STORE_FILE: &str = "store.json";
const LOG_FILE: &str = "decisions.log";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("store schema version {0} is not supported")]
    Schema(u32),
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    schema_version: u32,
    state: CurationState,
}

#[derive(Serialize)]
struct LogLine<'a> {
    id: &'a str,
    decision: &'a Decision,
    decided_at: u64,
    status: ReviewStatus,
}

/// One extracted sample offered for review.
#[derive(Debug, Clone)]
pub struct Submission {
    pub id: String,
    pub trimester: TrimesterLabel,
    pub image: GrayImage,
    pub extraction: ExtractionResult,
}

pub struct ReviewStore {
    dir: PathBuf,
    snapshot: RwLock<Arc<CurationState>>,
    writer: Mutex<()>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl ReviewStore {
    /// Open the store in `dir`, creating an empty one if needed.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let file = dir.join(STORE_FILE);
        let state = if file.is_file() {
            let f: StoreFile = io::read_json(&file)?;
            if f.schema_version != SCHEMA_VERSION {
                return Err(StoreError::Schema(f.schema_version));
            }
            f.state
        } else {
            CurationState::new()
        };
        let store = Self {
            dir: dir.to_path_buf(),
            snapshot: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
        };
        if !file.is_file() {
            store.persist(&store.snapshot())?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Current state; never blocks on writers beyond the pointer swap.
    pub fn snapshot(&self) -> Arc<CurationState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn persist(&self, state: &CurationState) -> Result<(), StoreError> {
        let f = StoreFile {
            schema_version: SCHEMA_VERSION,
            state: state.clone(),
        };
        io::write_json(&self.dir.join(STORE_FILE), &f)?;
        Ok(())
    }

    /// Serialized mutation: copy, change, persist, publish.
    fn mutate<T>(&self, f: impl FnOnce(&mut CurationState) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let _w = self.writer.lock().expect("writer lock");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        self.persist(&next)?;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        Ok(out)
    }

    pub fn enqueue(&self, batch: &[Submission], audit: bool) -> Result<EnqueueReport, StoreError> {
        let cands: Vec<Candidate> = batch
            .iter()
            .map(|s| Candidate {
                id: s.id.clone(),
                trimester: s.trimester,
                height: s.image.height(),
                width: s.image.width(),
                image_ref: format!("images/{}.png", s.id),
                raw_ref: format!("raw/{}.png", s.id),
                ellipse: s.extraction.ellipse,
                quality: s.extraction.quality,
                status: s.extraction.status,
            })
            .collect();
        self.mutate(|st| {
            // validate before touching the filesystem
            st.clone().enqueue(&cands, audit)?;
            for (s, c) in batch.iter().zip(&cands) {
                if !st.contains(&s.id) {
                    io::write_gray(&self.dir.join(&c.image_ref), &s.image)?;
                    io::write_gray(&self.dir.join(&c.raw_ref), &s.extraction.raw_channel)?;
                }
            }
            Ok(st.enqueue(&cands, audit)?)
        })
    }

    pub fn decide(&self, id: &str, decision: &Decision) -> Result<ReviewItem, StoreError> {
        let decision = match decision {
            Decision::AcceptWithEdit { ellipse: e } if e.a > 0.0 && e.b > 0.0 => Decision::AcceptWithEdit {
                ellipse: EllipseParams::canonical(e.cx, e.cy, e.a, e.b, e.theta),
            },
            d => d.clone(),
        };
        self.mutate(|st| {
            let at = now_ms();
            let item = st.decide(id, &decision, at)?;
            let line = serde_json::to_string(&LogLine {
                id,
                decision: &decision,
                decided_at: at,
                status: item.status,
            })
            .expect("plain data");
            let path = self.dir.join(LOG_FILE);
            let append = || -> std::io::Result<()> {
                let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
                writeln!(f, "{line}")?;
                f.sync_data()
            };
            append().map_err(|source| IoError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(item)
        })
    }

    pub fn image_path(&self, item: &ReviewItem) -> PathBuf {
        self.dir.join(&item.image_ref)
    }

    pub fn raw_path(&self, item: &ReviewItem) -> PathBuf {
        self.dir.join(&item.raw_ref)
    }

    /// Curated pairs (accepted_auto + accepted), sorted by id, masks
    /// rasterized from the stored ellipses.
    pub fn curated_pairs(&self) -> Result<Vec<AnnotatedPair>, StoreError> {
        let snap = self.snapshot();
        snap.export_selection()
            .into_iter()
            .map(|item| {
                let image = io::read_gray(&self.image_path(item))?;
                Ok(AnnotatedPair::new(
                    item.id.clone(),
                    image,
                    item.mask(),
                    item.trimester,
                    Provenance::SyntheticCurated,
                )
                .map_err(|source| IoError::Image {
                    path: self.image_path(item),
                    source,
                })?)
            })
            .collect()
    }

    /// Write the curated set next to `out` and the manifest itself to `out`.
    pub fn export(&self, out: &Path) -> Result<DatasetManifest, StoreError> {
        let pairs = self.curated_pairs()?;
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("curated".into());
        let mut entries = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let image_path = PathBuf::from(format!("{stem}_files/images/{}.png", p.id));
            let mask_path = PathBuf::from(format!("{stem}_files/masks/{}.png", p.id));
            io::write_gray(&dir.join(&image_path), &p.image)?;
            io::write_mask(&dir.join(&mask_path), &p.mask)?;
            entries.push(ManifestEntry {
                id: p.id.clone(),
                image_path,
                mask_path,
                trimester: p.trimester,
                provenance: Provenance::SyntheticCurated,
            });
        }
        let m = DatasetManifest::new(entries, 0);
        m.save(out)?;
        Ok(m)
    }
}

#[derive(Debug, Serialize)]
pub struct ItemView {
    pub id: String,
    pub trimester: TrimesterLabel,
    pub height: usize,
    pub width: usize,
    pub proposed: EllipseParams,
    pub quality: f64,
    pub status: ReviewStatus,
    pub decided_at: Option<u64>,
    pub edited_ellipse: Option<EllipseParams>,
    pub image_url: String,
    pub mask_url: String,
}

impl From<&ReviewItem> for ItemView {
    fn from(i: &ReviewItem) -> Self {
        Self {
            id: i.id.clone(),
            trimester: i.trimester,
            height: i.height,
            width: i.width,
            proposed: i.proposed,
            quality: i.quality,
            status: i.status,
            decided_at: i.decided_at,
            edited_ellipse: i.edited_ellipse,
            image_url: format!("/api/items/{}/image.png", i.id),
            mask_url: format!("/api/items/{}/mask.png", i.id),
        }
    }
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "code": self.1, "message": self.2 },
        });
        (self.0, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::Curation(CurationError::NotFound(_)) => Self(StatusCode::NOT_FOUND, "not_found", msg),
            StoreError::Curation(CurationError::AlreadyDecided(_)) => {
                Self(StatusCode::CONFLICT, "already_decided", msg)
            }
            StoreError::Curation(CurationError::InvalidEllipse(_)) => {
                Self(StatusCode::UNPROCESSABLE_ENTITY, "invalid_ellipse", msg)
            }
            StoreError::Curation(_) => Self(StatusCode::BAD_REQUEST, "invalid_request", msg),
            StoreError::Io(_) | StoreError::Manifest(_) | StoreError::Schema(_) => {
                Self(StatusCode::INTERNAL_SERVER_ERROR, "write_failure", msg)
            }
        }
    }
}

type Shared = Arc<ReviewStore>;
type ApiResult = Result<Response, ApiError>;

fn ok(mut v: serde_json::Value) -> ApiResult {
    v["schema_version"] = json!(SCHEMA_VERSION);
    Ok(Json(v).into_response())
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 500;

async fn list_items(State(s): State<Shared>, Query(q): Query<ListQuery>) -> ApiResult {
    let status = match q.status.as_deref() {
        None | Some("all") => None,
        Some(v) => Some(ReviewStatus::parse(v).ok_or_else(|| {
            ApiError(StatusCode::BAD_REQUEST, "invalid_request", format!("unknown status {v}"))
        })?),
    };
    let snap = s.snapshot();
    let all = snap.list(status);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let items: Vec<ItemView> = all.iter().skip(q.offset).take(limit).map(|i| ItemView::from(*i)).collect();
    let [pending, accepted, rejected] = snap.counts();
    ok(json!({
        "total": all.len(),
        "offset": q.offset,
        "limit": limit,
        "items": items,
        "counts": { "pending": pending, "accepted": accepted, "rejected": rejected,
                    "accepted_auto": snap.auto_accepted.len() },
    }))
}

fn find(s: &ReviewStore, id: &str) -> Result<ReviewItem, ApiError> {
    s.snapshot()
        .get(id)
        .cloned()
        .ok_or_else(|| StoreError::from(CurationError::NotFound(id.into())).into())
}

async fn get_item(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let item = find(&s, &id)?;
    ok(json!({ "item": ItemView::from(&item) }))
}

fn png(path: PathBuf) -> ApiResult {
    let bytes = std::fs::read(&path).map_err(|e| {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, "unreadable_file", format!("{}: {e}", path.display()))
    })?;
    let mut r = bytes.into_response();
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    r.headers_mut().insert("x-schema-version", HeaderValue::from(SCHEMA_VERSION));
    Ok(r)
}

async fn get_image(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let item = find(&s, &id)?;
    png(s.image_path(&item))
}

async fn get_mask(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let item = find(&s, &id)?;
    png(s.raw_path(&item))
}

async fn post_decision(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<Decision>, axum::extract::rejection::JsonRejection>,
) -> ApiResult {
    let Json(decision) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))?;
    let item = tokio::task::spawn_blocking(move || s.decide(&id, &decision))
        .await
        .expect("decision task")?;
    ok(json!({ "item": ItemView::from(&item) }))
}

#[derive(Debug, Deserialize)]
struct ExportRequest {
    out: PathBuf,
}

async fn post_export(State(s): State<Shared>, Json(req): Json<ExportRequest>) -> ApiResult {
    let out = req.out.clone();
    let m = tokio::task::spawn_blocking(move || s.export(&out)).await.expect("export task")?;
    ok(json!({ "count": m.entries.len(), "manifest": req.out, "ids": m.ids() }))
}

pub fn router(store: Arc<ReviewStore>) -> Router {
    Router::new()
        .route("/api/items", get(list_items))
        .route("/api/items/{id}", get(get_item))
        .route("/api/items/{id}/image.png", get(get_image))
        .route("/api/items/{id}/mask.png", get(get_mask))
        .route("/api/items/{id}/decision", post(post_decision))
        .route("/api/export", post(post_export))
        .with_state(store)
}

pub async fn serve(listener: tokio::net::TcpListener, store: Arc<ReviewStore>) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskdiff_core::extraction::ExtractionStatus;
    use maskdiff_core::image::compose_tri_channel;
    use maskdiff_core::phantom::{generate_phantom, PhantomSpec};

    pub(crate) fn submission(i: usize, status: ExtractionStatus) -> Submission {
        let p = generate_phantom(&PhantomSpec::random(TrimesterLabel::Second, 32, i as u64)).unwrap();
        let tri = compose_tri_channel(&p.image, &p.mask).unwrap();
        let mut extraction = maskdiff_core::extraction::extract(&tri, &Default::default());
        extraction.status = status;
        Submission {
            id: format!("syn-{i:03}"),
            trimester: p.trimester,
            image: p.image,
            extraction,
        }
    }

    #[test]
    fn store_persists_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let s = ReviewStore::open(dir.path()).unwrap();
        let batch: Vec<_> = (0..3).map(|i| submission(i, ExtractionStatus::NeedsReview)).collect();
        assert_eq!(s.enqueue(&batch, false).unwrap().added, 3);
        assert_eq!(s.enqueue(&batch, false).unwrap().duplicates, 3);
        s.decide("syn-000", &Decision::Accept).unwrap();
        s.decide("syn-001", &Decision::Reject).unwrap();
        drop(s);
        let s = ReviewStore::open(dir.path()).unwrap();
        assert_eq!(s.snapshot().counts(), [1, 1, 1]);
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.lines().next().unwrap().contains("\"action\":\"accept\""));
    }

    #[test]
    fn rejected_auto_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = ReviewStore::open(dir.path()).unwrap();
        let batch = [submission(0, ExtractionStatus::NeedsReview), submission(1, ExtractionStatus::RejectedAuto)];
        assert!(matches!(
            s.enqueue(&batch, false),
            Err(StoreError::Curation(CurationError::InvalidStatus { .. }))
        ));
        assert!(!dir.path().join("images").exists());
    }

    #[test]
    fn export_writes_manifest_of_accepted_only() {
        let dir = tempfile::tempdir().unwrap();
        let s = ReviewStore::open(&dir.path().join("store")).unwrap();
        let mut batch: Vec<_> = (0..6).map(|i| submission(i, ExtractionStatus::NeedsReview)).collect();
        batch.push(submission(9, ExtractionStatus::AcceptedAuto));
        s.enqueue(&batch, false).unwrap();
        s.decide("syn-001", &Decision::Accept).unwrap();
        s.decide("syn-002", &Decision::Reject).unwrap();
        let out = dir.path().join("out/curated.json");
        let m = s.export(&out).unwrap();
        assert_eq!(m.ids(), ["syn-001", "syn-009"]);
        let pairs = crate::manifest::load_pairs(&out, None).unwrap();
        assert!(pairs.iter().all(|p| p.provenance == Provenance::SyntheticCurated));
        let item = s.snapshot().get("syn-001").unwrap().clone();
        assert_eq!(pairs[0].mask, item.mask());
    }
}
