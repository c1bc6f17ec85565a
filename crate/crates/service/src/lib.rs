//! HTTP/JSON service over a loaded scene, model and ground-truth dataset.
//!
//! All state is read-only except the store of generated views, which each
//! inverse query replaces. Request and response types are public so clients
//! and tests can share them.

mod api;
mod error;
mod state;

use std::net::SocketAddr;

pub use api::*;
pub use error::ApiError;
pub use state::{GreenPoint, ServiceConfig, ServiceState, Workspace};

/// Serves on an already bound listener until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: ServiceState) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(addr) = addr {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
}
