//! `freecustom` command-line front end.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 input or config error,
//! 3 runtime error.

mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use freecustom::concepts::{copy_paste_context, synth_scene, SceneSpec};
use freecustom::io::{read_mask_png, read_rgb_png, write_heatmap_png, write_mask_png, write_rgb_png};
use freecustom::numerics::{write_fct, PrngStream};
use freecustom::pipeline::{inspect_attention, write_run, Pipeline, RunConfig, RESULT_FILE};
use freecustom::Error;

#[derive(Parser)]
#[command(name = "freecustom", version, about = "Multi-concept composition with a toy latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a composition from a JSON config and write its run directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated MRSA block indices; an empty string disables MRSA.
        #[arg(long)]
        psi: Option<String>,
        #[arg(long)]
        mask_mode: Option<String>,
    },
    /// Paste a masked concept onto a base image.
    MakeContext {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        base_mask: PathBuf,
        #[arg(long)]
        concept: PathBuf,
        #[arg(long)]
        concept_mask: PathBuf,
        /// Shift `x,y` in pixels applied to the concept.
        #[arg(long, allow_hyphen_values = true)]
        offset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the multi-attention map of one query from a run's captures.
    InspectAttn {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        step: usize,
        /// Query position `row,col` on the layer's grid.
        #[arg(long)]
        query: String,
        /// Output directory; defaults to `<run>/inspect`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic scene and its ground-truth masks.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Weight container to check instead of freshly seeded weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            psi,
            mask_mode,
        } => generate(&config, out, seed, psi, mask_mode),
        Command::MakeContext {
            base,
            base_mask,
            concept,
            concept_mask,
            offset,
            out,
        } => make_context(&base, &base_mask, &concept, &concept_mask, &offset, &out),
        Command::InspectAttn {
            run,
            layer,
            step,
            query,
            out,
        } => inspect_attn(&run, layer, step, &query, out),
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Selftest { weights } => {
            return if selftest::run(weights.as_deref()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn parse_pair<T: std::str::FromStr>(text: &str, what: &str) -> Result<(T, T), Error> {
    let bad = || Error::Input(format!("{what} {text:?} is not of the form a,b"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_psi(text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("--psi entry {s:?} is not a block index")))
        })
        .collect()
}

fn generate(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    psi: Option<String>,
    mask_mode: Option<String>,
) -> Result<(), Error> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(psi) = psi {
        config.psi = parse_psi(&psi)?;
    }
    if let Some(mode) = mask_mode {
        config.mask_mode = mode;
    }
    let out = out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no --out given and the config has no output_dir".into()))?;
    let start = Instant::now();
    let pipeline = Pipeline::from_config(&config)?;
    let output = pipeline.run()?;
    let manifest = write_run(&out, &config, &output)?;
    let t = output.diagnostics.timings;
    println!(
        "wrote {} ({} files)",
        out.join(RESULT_FILE).display(),
        manifest.outputs.len()
    );
    println!(
        "timings: harvest {:.2} s, compose {:.2} s, decode {:.3} s, total {:.2} s",
        t.harvest.as_secs_f64(),
        t.compose.as_secs_f64(),
        t.decode.as_secs_f64(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn make_context(
    base: &Path,
    base_mask: &Path,
    concept: &Path,
    concept_mask: &Path,
    offset: &str,
    out: &Path,
) -> Result<(), Error> {
    let offset = parse_pair::<i64>(offset, "--offset")?;
    let (image, mask) = copy_paste_context(
        &read_rgb_png(base)?,
        &read_mask_png(base_mask)?,
        &read_rgb_png(concept)?,
        &read_mask_png(concept_mask)?,
        offset,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_rgb_png(&out.join("context.png"), &image)?;
    write_mask_png(&out.join("context_mask.png"), &mask)?;
    println!("wrote {}", out.join("context.png").display());
    Ok(())
}

fn inspect_attn(run: &Path, layer: usize, step: usize, query: &str, out: Option<PathBuf>) -> Result<(), Error> {
    let (r, c) = parse_pair::<usize>(query, "--query")?;
    let map = inspect_attention(run, layer, step, (r, c))?;
    let out = out.unwrap_or_else(|| run.join("inspect"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let stem = out.join(format!("attn_l{layer}_s{step}_q{r}_{c}"));
    write_heatmap_png(&stem.with_extension("png"), &map)?;
    write_fct(&stem.with_extension("fct"), &map)?;
    println!(
        "wrote {} ({}x{})",
        stem.with_extension("png").display(),
        map.dims()[0],
        map.dims()[1]
    );
    Ok(())
}

fn synth(spec_path: &Path, seed: u64, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: SceneSpec =
        serde_json::from_str(&text).map_err(|e| Error::Spec(format!("{}: {e}", spec_path.display())))?;
    let scene = synth_scene(&spec, PrngStream::new(seed, 0))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_rgb_png(&out.join("image.png"), &scene.image)?;
    for (name, mask) in &scene.masks {
        write_mask_png(&out.join(format!("mask_{name}.png")), mask)?;
    }
    println!("wrote {} and {} masks", out.join("image.png").display(), scene.masks.len());
    Ok(())
}
