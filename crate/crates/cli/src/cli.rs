//! Command-line definition and dispatch.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{
    cmd_estimate, cmd_eval, cmd_fit, cmd_relight, cmd_render, EstimateArgs, EvalArgs, FitArgs,
    RenderArgs,
};
use crate::error::{CliError, Result};
use crate::server;

#[derive(Parser, Debug)]
#[command(
    name = "derender",
    version,
    about = "Single-image de-rendering: estimate, fit, render, relight, evaluate, serve"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Coarse albedo, normals and light from an image plus coarse geometry.
    Estimate(EstimateArgs),
    /// Render a decomposition, by default under its own light.
    Render(RenderArgs),
    /// Render a decomposition under a new light.
    Relight(RenderArgs),
    /// Fit a full decomposition starting from an estimate.
    Fit(FitArgs),
    /// Compare predicted and ground-truth albedo and normals.
    Eval(EvalArgs),
    /// Serve a directory of decompositions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Clone, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(a) => cmd_estimate(&a).map(drop),
        Command::Render(a) => cmd_render(&a),
        Command::Relight(a) => cmd_relight(&a),
        Command::Fit(a) => cmd_fit(&a).map(drop),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serialises")
            );
            Ok(())
        }
        Command::Serve(a) => {
            let catalog = server::Catalog::load(&a.dir)?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Invalid(format!("cannot start runtime: {e}")))?;
            rt.block_on(async {
                let listener = server::bind(SocketAddr::new(a.host, a.port)).await?;
                server::serve(listener, catalog).await
            })
        }
    }
}
