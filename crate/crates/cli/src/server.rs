//! HTTP service over a directory of decompositions.
//!
//! Every subdirectory (and the directory itself) holding a `manifest.json`
//! is loaded once at startup; the directory is treated as read-only while
//! serving. Rendering is pure, so requests share state without locks.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;

use crate::commands::{relight_png, render_with};
use crate::error::{io_err, CliError, Result};
use crate::light::{FieldError, RelightRequest};
use crate::manifest::{LoadedDecomposition, MANIFEST_FILE};
use crate::png;

/// Decompositions by id, each with its served `recon.png` bytes.
#[derive(Debug, Default)]
pub struct Catalog {
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug)]
struct Entry {
    loaded: LoadedDecomposition,
    recon: Vec<u8>,
}

impl Catalog {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut dirs = vec![dir.to_path_buf()];
        let mut subdirs: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        dirs.extend(subdirs);
        let mut catalog = Self::default();
        for d in dirs.iter().filter(|d| d.join(MANIFEST_FILE).is_file()) {
            let loaded = LoadedDecomposition::load(d)?;
            let recon = match &loaded.manifest.files.recon_png {
                Some(p) => {
                    let path = d.join(p);
                    std::fs::read(&path).map_err(io_err(&path))?
                }
                None => relight_png(&loaded.decomposition, &loaded.render_config(), None)?,
            };
            let id = loaded.manifest.id.clone();
            log::info!("serving {id} from {}", d.display());
            if catalog
                .entries
                .insert(id.clone(), Entry { loaded, recon })
                .is_some()
            {
                return Err(CliError::Invalid(format!(
                    "duplicate decomposition id {id:?}"
                )));
            }
        }
        Ok(catalog)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

pub fn router(catalog: Arc<Catalog>) -> Router {
    Router::new()
        .route("/api/decompositions", get(list))
        .route("/api/decompositions/{id}", get(manifest))
        .route("/api/decompositions/{id}/image/{kind}", get(image))
        .route("/api/decompositions/{id}/relight", post(relight))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "no such endpoint", None) })
        .with_state(catalog)
}

fn error(status: StatusCode, msg: &str, field: Option<&str>) -> Response {
    (status, axum::Json(json!({ "error": msg, "field": field }))).into_response()
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

fn not_found(id: &str) -> Response {
    error(
        StatusCode::NOT_FOUND,
        &format!("unknown decomposition {id:?}"),
        None,
    )
}

async fn list(State(catalog): State<Arc<Catalog>>) -> Response {
    axum::Json(catalog.ids()).into_response()
}

async fn manifest(State(catalog): State<Arc<Catalog>>, UrlPath(id): UrlPath<String>) -> Response {
    match catalog.entries.get(&id) {
        Some(e) => axum::Json(&e.loaded.manifest).into_response(),
        None => not_found(&id),
    }
}

/// Run CPU-bound rendering off the async workers.
async fn blocking<F>(catalog: Arc<Catalog>, id: String, f: F) -> Response
where
    F: FnOnce(&Entry) -> Result<Vec<u8>> + Send + 'static,
{
    let job = tokio::task::spawn_blocking(move || catalog.entries.get(&id).map(f));
    match job.await {
        Ok(Some(Ok(bytes))) => png_response(bytes),
        Ok(Some(Err(e))) => error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string(), None),
        Ok(None) => not_found("?"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string(), None),
    }
}

async fn image(
    State(catalog): State<Arc<Catalog>>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
) -> Response {
    if !catalog.entries.contains_key(&id) {
        return not_found(&id);
    }
    let job = match kind.as_str() {
        "albedo" | "normals" | "diffuse" | "specular" | "recon" => kind,
        other => {
            return error(
                StatusCode::NOT_FOUND,
                &format!(
                    "unknown image {other:?}; expected albedo, normals, diffuse, specular or recon"
                ),
                None,
            )
        }
    };
    blocking(catalog, id, move |e| {
        let dec = &e.loaded.decomposition;
        Ok(match job.as_str() {
            "albedo" => png::encode_image(&dec.material.albedo),
            "normals" => png::encode_normals(&dec.normals),
            "recon" => e.recon.clone(),
            kind => {
                let r = render_with(dec, &e.loaded.render_config(), None)?;
                png::encode_scalar(if kind == "diffuse" {
                    &r.diffuse
                } else {
                    &r.specular
                })
            }
        })
    })
    .await
}

async fn relight(
    State(catalog): State<Arc<Catalog>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Response {
    let Some(entry) = catalog.entries.get(&id) else {
        return not_found(&id);
    };
    let cfg = entry.loaded.render_config();
    let ov = match RelightRequest::from_json(&body).and_then(|r| r.validate(&cfg)) {
        Ok(ov) => ov,
        Err(FieldError { field, error: msg }) => {
            return error(StatusCode::BAD_REQUEST, &msg, Some(&field))
        }
    };
    blocking(catalog, id, move |e| {
        relight_png(
            &e.loaded.decomposition,
            &e.loaded.render_config(),
            Some(&ov),
        )
    })
    .await
}

/// Bind first so a taken port fails before anything is served.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Invalid(format!("cannot listen on {addr}: {e}")))
}

pub async fn serve(listener: tokio::net::TcpListener, catalog: Catalog) -> Result<()> {
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    log::info!(
        "listening on http://{addr} with {} decomposition(s)",
        catalog.entries.len()
    );
    axum::serve(listener, router(Arc::new(catalog)))
        .await
        .map_err(|e| CliError::Invalid(format!("server error: {e}")))
}
