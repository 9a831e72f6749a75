use std::net::SocketAddr;
use std::sync::Arc;

use clap::Parser;
use consist_service::{router, AppState};

#[derive(Parser)]
#[command(name = "consist-server", about = "Serve the consist generation API")]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8787")]
    addr: SocketAddr,
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(args.addr)
        .await
        .unwrap_or_else(|e| panic!("cannot bind {}: {e}", args.addr));
    tracing::info!("listening on {}", listener.local_addr().expect("bound"));
    axum::serve(listener, router(Arc::new(AppState::default())))
        .await
        .expect("server failed");
}
