use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use enclaved::attestation::{
    verify_signature_chain, AttestationDocument, TrustAnchor, TRUST_ROOT_ENV,
};
use enclaved::tooling::{self, Scenario};

#[derive(Parser)]
#[command(
    name = "enclaved",
    version,
    about = "Simulated enclave deployment and verification tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the image ID and PCRs of a source tree.
    ImageId { path: PathBuf },
    /// Check that an enclave runs the code at --code.
    Verify {
        #[arg(long)]
        code: PathBuf,
        /// e.g. https://enclave.example.com:8443
        #[arg(long)]
        enclave: String,
        /// PEM trust root; defaults to $ENCLAVED_TRUST_ROOT.
        #[arg(long)]
        trust_root: Option<PathBuf>,
        /// Also write the received document here (`.attdoc` is appended if
        /// the path has no extension).
        #[arg(long)]
        save_doc: Option<PathBuf>,
    },
    /// Print the fields of a saved attestation document.
    Inspect {
        document: PathBuf,
        /// Also check the signature chain against this PEM root.
        #[arg(long)]
        trust_root: Option<PathBuf>,
    },
    /// Load-test the hello-world route.
    Bench {
        #[arg(long, default_value = "full")]
        scenario: Scenario,
        #[arg(long, default_value_t = 30)]
        duration: u64,
        #[arg(long, default_value_t = 32)]
        concurrency: usize,
    },
    /// Start a simulated enclave and its proxies from a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::ImageId { path } => {
            let id = tooling::compute_image_id(&path)?;
            let pcrs = id.pcrs();
            println!("image-id {id}");
            for (i, r) in pcrs.registers().iter().enumerate() {
                println!("pcr{i} {}", hex::encode(r));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            code,
            enclave,
            trust_root,
            save_doc,
        } => {
            let anchor = load_anchor(trust_root)?;
            let result = tooling::challenge_enclave(&code, &enclave, &anchor).await;
            let result = match result {
                Ok((report, raw)) => {
                    if let Some(mut path) = save_doc {
                        if path.extension().is_none() {
                            path.set_extension(tooling::ATTDOC_EXTENSION);
                        }
                        std::fs::write(&path, raw)
                            .with_context(|| format!("writing {}", path.display()))?;
                    }
                    print!("{}", tooling::render_report(&report));
                    Ok(report)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Err(e)
                }
            };
            Ok(ExitCode::from(tooling::exit_code(&result) as u8))
        }
        Command::Inspect {
            document,
            trust_root,
        } => {
            let raw = std::fs::read(&document)
                .with_context(|| format!("reading {}", document.display()))?;
            let doc = AttestationDocument::from_bytes(&raw)?;
            let p = &doc.payload;
            println!("module_id {}", p.module_id);
            println!("timestamp {}", p.timestamp);
            for (i, r) in p.pcrs.registers().iter().enumerate() {
                println!("pcr{i} {}", hex::encode(r));
            }
            let opt = |v: Option<&[u8]>| v.map(hex::encode).unwrap_or_else(|| "-".into());
            println!("nonce {}", opt(doc.nonce().map(|n| &n.as_bytes()[..])));
            println!("user_data {}", opt(doc.user_data()));
            println!("public_key {}", opt(doc.public_key()));
            if trust_root.is_none() {
                return Ok(ExitCode::SUCCESS);
            }
            let anchor = load_anchor(trust_root)?;
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)?
                .as_millis() as u64;
            let ok = verify_signature_chain(&doc, &anchor, now);
            println!("signature {}", if ok { "valid" } else { "INVALID" });
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Bench {
            scenario,
            duration,
            concurrency,
        } => {
            let stats =
                tooling::run_bench(scenario, Duration::from_secs(duration), concurrency).await?;
            println!("scenario {scenario}, concurrency {concurrency}");
            println!("{stats}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config } => {
            let cfg = tooling::RunConfig::from_file(&config)?;
            let d = tooling::start(&cfg).await?;
            println!("listening on {}", d.ingress);
            println!("certificate fingerprint {}", hex::encode(d.fingerprint));
            println!("trust root:\n{}", d.trust_root_pem);
            tokio::signal::ctrl_c().await?;
            d.stop(Duration::from_secs(5)).await;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_anchor(path: Option<PathBuf>) -> anyhow::Result<TrustAnchor> {
    Ok(match path {
        Some(p) => TrustAnchor::from_pem_file(&p)
            .with_context(|| format!("loading trust root {}", p.display()))?,
        None => TrustAnchor::from_env()?
            .with_context(|| format!("no --trust-root given and {TRUST_ROOT_ENV} unset"))?,
    })
}
