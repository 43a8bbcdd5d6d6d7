//! HTTP front of the aero service.
//!
//! Two listeners: the `/v1` JSON API and the collection server. Download links in
//! version metadata point at the second one, so object bytes never pass through the API.

pub mod api;
pub mod config;
pub mod error;
pub mod objects;

use std::net::SocketAddr;
use std::sync::Arc;

use aero_core::Aero;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use config::{ConfigError, GatewayConfig};
pub use error::ErrorBody;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("API and collection server must listen on different addresses")]
    SameAddress,
    #[error(transparent)]
    Service(#[from] aero_core::AeroError),
}

/// A running gateway. Dropping it leaves the servers running; call [`shutdown`](Self::shutdown).
pub struct Gateway {
    pub aero: Arc<Aero>,
    pub api_addr: SocketAddr,
    pub collection_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })
}

impl Gateway {
    /// Opens the service and starts both listeners and the timer loop.
    /// Port 0 picks a free port; the bound addresses are reported back.
    pub async fn start(config: &GatewayConfig) -> Result<Self, ServeError> {
        if config.bind == config.collection_bind && config.bind.port() != 0 {
            return Err(ServeError::SameAddress);
        }
        let aero = Aero::open(config.service_config())?;
        Self::serve(aero, config).await
    }

    /// Like [`start`](Self::start) with an already opened service.
    pub async fn serve(aero: Arc<Aero>, config: &GatewayConfig) -> Result<Self, ServeError> {
        let api = bind(config.bind).await?;
        let col = bind(config.collection_bind).await?;
        let api_addr = api.local_addr().map_err(|source| ServeError::Bind { addr: config.bind, source })?;
        let collection_addr = col
            .local_addr()
            .map_err(|source| ServeError::Bind { addr: config.collection_bind, source })?;
        let base = config
            .collection_url
            .clone()
            .unwrap_or_else(|| format!("http://{collection_addr}"));
        aero.set_collection_base_url(&base)?;

        let api_app = api::router(aero.clone(), config.max_upload_bytes);
        let col_app = objects::router(aero.clone());
        let tasks = vec![
            tokio::spawn(async move {
                if let Err(e) = axum::serve(api, api_app).await {
                    tracing::error!("api server stopped: {e}");
                }
            }),
            tokio::spawn(async move {
                if let Err(e) = axum::serve(col, col_app).await {
                    tracing::error!("collection server stopped: {e}");
                }
            }),
            aero.start(),
        ];
        tracing::info!(%api_addr, %collection_addr, "aero listening");
        Ok(Self {
            aero,
            api_addr,
            collection_addr,
            tasks,
        })
    }

    pub fn api_url(&self) -> String {
        format!("http://{}", self.api_addr)
    }

    /// Waits until a server task ends (normally never).
    pub async fn wait(mut self) {
        if let Some(t) = self.tasks.first_mut() {
            let _ = t.await;
        }
        self.shutdown();
    }

    pub fn shutdown(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}
