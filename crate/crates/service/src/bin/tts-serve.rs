use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use tts_service::{router, AppState, ServiceConfig, DEFAULT_REPLICAS};

/// Serve predictions with keypoint-guided channel selection over HTTP.
#[derive(Debug, Parser)]
#[command(name = "tts-serve", version)]
struct Args {
    /// Model checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory containing metadata.csv and images/.
    #[arg(long)]
    corpus: PathBuf,
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Include ground-truth labels in /api/images.
    #[arg(long)]
    study_mode: bool,
    /// Annotation store [default: <corpus>/annotations.json].
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REPLICAS)]
    tta_replicas: usize,
    /// Recompute feature maps on every request.
    #[arg(long)]
    no_cache: bool,
    /// Listen on all interfaces instead of localhost.
    #[arg(long)]
    public: bool,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = ServiceConfig::new(args.checkpoint, args.corpus);
    cfg.annotations = args.annotations;
    cfg.study_mode = args.study_mode;
    cfg.tta_replicas = args.tta_replicas;
    cfg.cache_features = !args.no_cache;

    let state = AppState::load(&cfg)?;
    log::info!(
        "loaded {} images, model {:?}",
        state.corpus_len(),
        state.model().metadata()
    );
    let host = if args.public { Ipv4Addr::UNSPECIFIED } else { Ipv4Addr::LOCALHOST };
    let listener = tokio::net::TcpListener::bind(SocketAddr::from((host, args.port))).await?;
    // Tests and scripts read this line to find the bound port.
    println!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
