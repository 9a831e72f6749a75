//! `consist`: identity/frame generation, diagnostics, and self checks over
//! the consist service. Without `--server` it hosts the service in-process
//! on an ephemeral port, so the binary is self-contained.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 dump-format errors,
//! 4 self-check property failures, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consist_api::{
    b64, AccuracyRequest, CacheRef, FrameRequest, GroundTruthWire, IdentityRequest, RingsRequest,
    SelfcheckRequest,
};
use consist_client::{Client, ClientError};
use consist_core::error::ErrorClass;
use consist_core::{cctf, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_PROPERTY: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(name = "consist", about = "Consistent two-pass generation on a toy DiT", version)]
struct Cli {
    /// Base URL of a running consist service; spawns one in-process when
    /// absent.
    #[arg(long, global = true)]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunOverrides {
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (the CCTF_OUT environment variable wins over this).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Total Euler steps.
    #[arg(long)]
    steps: Option<usize>,

    /// Step whose activations feed matching and mask extraction.
    #[arg(long)]
    extract_step: Option<usize>,

    /// Last step with mechanisms active (0 disables the window).
    #[arg(long)]
    apply_until: Option<usize>,

    /// Merge coefficient at step 1.
    #[arg(long)]
    alpha_start: Option<f64>,

    /// Append identity background keys/values.
    #[arg(long)]
    keep_background: Option<bool>,

    /// Disable a mechanism (repeatable): pta, merge, masking.
    #[arg(long = "disable", value_name = "MECH")]
    disable: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the identity pass; writes latent, cache, mask, and attention dumps.
    Identity {
        /// Run configuration file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Probe and generate one frame against an identity cache.
    Frame {
        #[arg(long)]
        config: PathBuf,
        /// Identity cache dump from `consist identity`.
        #[arg(long)]
        cache: PathBuf,
        /// Which frame_prompt from the config to render.
        #[arg(long)]
        frame_index: usize,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Diagnostics tables (printed to stdout as CSV).
    Diagnose {
        #[command(subcommand)]
        what: Diagnose,
    },
    /// Run the oracle/property suite; nonzero exit on any failure.
    Selfcheck {
        /// Deliberate mutation for testing the suite (skip-reencode).
        #[arg(long = "mutate", value_name = "NAME")]
        mutations: Vec<String>,
    },
}

#[derive(Subcommand)]
enum Diagnose {
    /// Attention mass per concentric ring around a query token.
    Rings {
        /// CCTF dump holding the attention matrix (e.g. identity_attn.cctf).
        #[arg(long)]
        input: PathBuf,
        /// Entry name inside the dump.
        #[arg(long, default_value = "attn_i2i")]
        entry: String,
        #[arg(long)]
        query_index: usize,
        #[arg(long, default_value_t = 8)]
        rings: usize,
        /// Grid extents when the dump has no meta entry.
        #[arg(long)]
        grid_h: Option<usize>,
        #[arg(long)]
        grid_w: Option<usize>,
    },
    /// Matching MSE and mask IoU per probed step.
    Accuracy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Probe with this frame prompt; identity prompt when absent.
        #[arg(long)]
        frame_index: Option<usize>,
        /// Steps to probe: "2,5,9" or "1-20".
        #[arg(long, default_value = "1-20")]
        at_steps: String,
        /// Optional ground-truth dump with `map` and `mask` entries.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunOverrides,
    },
}

struct CliFailure {
    code: u8,
    message: String,
}

impl CliFailure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliFailure {
            code,
            message: message.into(),
        }
    }
}

impl From<ClientError> for CliFailure {
    fn from(e: ClientError) -> Self {
        let code = match e.class() {
            "config" => EXIT_CONFIG,
            "format" => EXIT_FORMAT,
            _ => EXIT_OTHER,
        };
        CliFailure::new(code, e.to_string())
    }
}

impl From<consist_core::Error> for CliFailure {
    fn from(e: consist_core::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Format => EXIT_FORMAT,
            ErrorClass::Internal => EXIT_OTHER,
        };
        CliFailure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliFailure {
    fn from(e: std::io::Error) -> Self {
        CliFailure::new(EXIT_OTHER, e.to_string())
    }
}

fn load_config(path: &Path, overrides: &RunOverrides) -> Result<RunConfig, CliFailure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliFailure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = overrides.steps {
        cfg.sampler.n_steps = steps;
    }
    if let Some(s) = overrides.extract_step {
        cfg.sampler.extract_step = s;
    }
    if let Some(s) = overrides.apply_until {
        cfg.sampler.apply_until_step = s;
    }
    if let Some(a) = overrides.alpha_start {
        cfg.sampler.alpha_start = a;
    }
    if let Some(k) = overrides.keep_background {
        cfg.sampler.keep_background = k;
    }
    for mech in &overrides.disable {
        match mech.as_str() {
            "pta" => cfg.sampler.pta_enabled = false,
            "merge" => cfg.sampler.merge_enabled = false,
            "masking" => cfg.sampler.masking_enabled = false,
            other => {
                return Err(CliFailure::new(
                    EXIT_CONFIG,
                    format!("--disable takes pta, merge, or masking; got {other:?}"),
                ))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// CCTF_OUT beats --out beats the config file's out_dir.
fn resolve_out_dir(cfg: &RunConfig, overrides: &RunOverrides) -> Result<PathBuf, CliFailure> {
    let dir = if let Ok(env_dir) = std::env::var("CCTF_OUT") {
        PathBuf::from(env_dir)
    } else if let Some(dir) = &overrides.out {
        dir.clone()
    } else if let Some(dir) = &cfg.out_dir {
        PathBuf::from(dir)
    } else {
        PathBuf::from(".")
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_artifact(dir: &Path, name: &str, b64_payload: &str) -> Result<(), CliFailure> {
    let bytes = b64::decode(b64_payload).map_err(|e| CliFailure::new(EXIT_OTHER, e))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_steps(spec: &str) -> Result<Vec<usize>, CliFailure> {
    let bad = |s: &str| CliFailure::new(EXIT_CONFIG, format!("bad step spec {s:?}"));
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once('-') {
        let lo: usize = a.trim().parse().map_err(|_| bad(spec))?;
        let hi: usize = b.trim().parse().map_err(|_| bad(spec))?;
        if lo == 0 || hi < lo {
            return Err(bad(spec));
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad(spec)))
        .collect()
}

fn read_ground_truth(path: &Path) -> Result<GroundTruthWire, CliFailure> {
    let entries = cctf::read_dump(path)?;
    let map_tensor = cctf::find(&entries, "map")?
        .as_tensor()
        .ok_or_else(|| CliFailure::new(EXIT_FORMAT, "ground-truth map must be a tensor"))?;
    let mask = cctf::find(&entries, "mask")?
        .as_mask()
        .ok_or_else(|| CliFailure::new(EXIT_FORMAT, "ground-truth mask must be a mask grid"))?;
    Ok(GroundTruthWire {
        map: map_tensor.data().iter().map(|&v| v as usize).collect(),
        mask_bits: mask.bits().to_vec(),
    })
}

async fn connect(server: &Option<String>) -> Result<Client, CliFailure> {
    let base = match server {
        Some(url) => url.clone(),
        None => {
            let addr = consist_service::serve(([127, 0, 0, 1], 0).into())
                .await
                .map_err(|e| CliFailure::new(EXIT_OTHER, format!("cannot start service: {e}")))?;
            format!("http://{addr}")
        }
    };
    let client = Client::new(&base);
    client.health().await?;
    Ok(client)
}

async fn run(cli: Cli) -> Result<u8, CliFailure> {
    let client = connect(&cli.server).await?;
    match cli.command {
        Command::Identity { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let out_dir = resolve_out_dir(&cfg, &overrides)?;
            let resp = client
                .identity(&IdentityRequest { config: cfg })
                .await?;
            write_artifact(&out_dir, "identity_latent.cctf", &resp.latent_cctf_b64)?;
            write_artifact(&out_dir, "identity_cache.cctf", &resp.cache_cctf_b64)?;
            write_artifact(&out_dir, "identity_mask.cctf", &resp.mask_cctf_b64)?;
            write_artifact(&out_dir, "identity_attn.cctf", &resp.attn_cctf_b64)?;
            println!(
                "identity pass done: {} cache entries, foreground fraction {}",
                resp.report.cache_entries, resp.report.fg_fraction
            );
            Ok(0)
        }
        Command::Frame {
            config,
            cache,
            frame_index,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let out_dir = resolve_out_dir(&cfg, &overrides)?;
            let cache_bytes = std::fs::read(&cache).map_err(|e| {
                CliFailure::new(EXIT_CONFIG, format!("cannot read {}: {e}", cache.display()))
            })?;
            let resp = client
                .frame(&FrameRequest {
                    config: cfg,
                    frame_index,
                    cache: CacheRef::CctfB64(b64::encode(&cache_bytes)),
                })
                .await?;
            let stem = format!("frame_{frame_index:03}");
            write_artifact(&out_dir, &format!("{stem}_latent.cctf"), &resp.latent_cctf_b64)?;
            write_artifact(&out_dir, &format!("{stem}_match.cctf"), &resp.match_cctf_b64)?;
            write_artifact(&out_dir, &format!("{stem}_mask.cctf"), &resp.mask_cctf_b64)?;
            let report_path = out_dir.join(format!("{stem}_report.csv"));
            std::fs::write(&report_path, &resp.report_csv)?;
            println!("wrote {}", report_path.display());
            println!(
                "frame {frame_index} done: foreground fraction {}, mean match confidence {}",
                resp.report.fg_fraction, resp.report.mean_s_conf
            );
            Ok(0)
        }
        Command::Diagnose { what } => match what {
            Diagnose::Rings {
                input,
                entry,
                query_index,
                rings,
                grid_h,
                grid_w,
            } => {
                let bytes = std::fs::read(&input).map_err(|e| {
                    CliFailure::new(EXIT_CONFIG, format!("cannot read {}: {e}", input.display()))
                })?;
                let grid = match (grid_h, grid_w) {
                    (Some(h), Some(w)) => Some((h, w)),
                    (None, None) => None,
                    _ => {
                        return Err(CliFailure::new(
                            EXIT_CONFIG,
                            "--grid-h and --grid-w go together",
                        ))
                    }
                };
                let resp = client
                    .diagnose_rings(&RingsRequest {
                        cctf_b64: b64::encode(&bytes),
                        entry: Some(entry),
                        query_index,
                        n_rings: rings,
                        grid,
                    })
                    .await?;
                print!("{}", resp.csv);
                Ok(0)
            }
            Diagnose::Accuracy {
                config,
                cache,
                frame_index,
                at_steps,
                gt,
                overrides,
            } => {
                let cfg = load_config(&config, &overrides)?;
                let cache_bytes = std::fs::read(&cache).map_err(|e| {
                    CliFailure::new(EXIT_CONFIG, format!("cannot read {}: {e}", cache.display()))
                })?;
                let ground_truth = gt.as_deref().map(read_ground_truth).transpose()?;
                let resp = client
                    .diagnose_accuracy(&AccuracyRequest {
                        config: cfg,
                        cache: CacheRef::CctfB64(b64::encode(&cache_bytes)),
                        frame_index,
                        steps: parse_steps(&at_steps)?,
                        ground_truth,
                    })
                    .await?;
                print!("{}", resp.csv);
                Ok(0)
            }
        },
        Command::Selfcheck { mutations } => {
            let resp = client.selfcheck(&SelfcheckRequest { mutations }).await?;
            for r in &resp.results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} - {}", r.name, r.detail);
            }
            let failed = resp.results.iter().filter(|r| !r.passed).count();
            if resp.passed {
                println!("selfcheck: all {} properties passed", resp.results.len());
                Ok(0)
            } else {
                println!(
                    "selfcheck: {failed} of {} properties FAILED",
                    resp.results.len()
                );
                Ok(EXIT_PROPERTY)
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).await {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
