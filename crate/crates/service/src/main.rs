use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use periph_service::{router, AppState, Config, DEFAULT_MAX_DIMENSION, DEFAULT_MAX_UPLOAD_BYTES};
use tracing_subscriber::EnvFilter;

/// Serves foveation grids over HTTP.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, env = "PERIPH_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Concurrent tile computations; defaults to the number of CPUs.
    #[arg(long, env = "PERIPH_WORKERS")]
    workers: Option<usize>,
    /// FGN checkpoint; without one only the blur backend is offered.
    #[arg(long, env = "PERIPH_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "PERIPH_STORAGE_DIR", default_value = "periph-store")]
    storage_dir: PathBuf,
    #[arg(long, env = "PERIPH_MAX_UPLOAD_BYTES", default_value_t = DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
    #[arg(long, env = "PERIPH_MAX_DIMENSION", default_value_t = DEFAULT_MAX_DIMENSION)]
    max_dimension: usize,
    /// Use the per-pixel reference blur instead of the layered approximation.
    #[arg(long)]
    exact_blur: bool,
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info,tower_http=debug")))
        .init();
    let args = Args::parse();
    let mut config = Config::new(&args.storage_dir);
    if let Some(w) = args.workers {
        config.workers = w;
    }
    config.checkpoint = args.checkpoint;
    config.max_upload_bytes = args.max_upload_bytes;
    config.max_dimension = args.max_dimension;
    if args.exact_blur {
        config.blur_layer_step = None;
    }
    tracing::info!(?config, "starting");

    let state = match AppState::open(config) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!(error = %e, "startup failed");
            std::process::exit(1);
        }
    };
    let resumed = state.resume();
    if resumed > 0 {
        tracing::info!(resumed, "resumed pending jobs");
    }
    let listener = match tokio::net::TcpListener::bind(args.listen).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!(addr = %args.listen, error = %e, "bind failed");
            std::process::exit(1);
        }
    };
    tracing::info!(addr = %args.listen, "listening");
    if let Err(e) = axum::serve(listener, router(state)).await {
        tracing::error!(error = %e, "server error");
        std::process::exit(1);
    }
}
