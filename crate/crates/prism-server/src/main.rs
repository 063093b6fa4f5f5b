use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;

/// Estimation service: Shapley-based probability reconstruction over HTTP.
#[derive(Parser)]
#[command(name = "prism-server", version)]
struct Args {
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1:8391")]
    addr: SocketAddr,

    /// Directory for run artifacts.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    prism_server::serve(args.addr, args.runs_dir).await
}
