use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use clora_core::composition::{CompositionSpec, LoraId};
use clora_core::pipeline::bench::{run_benchmark, BenchOptions, Manifest};
use clora_core::pipeline::eval::{evaluate, extractor_by_name};
use clora_core::pipeline::{
    generate, make_backend, reference_images, regenerate, resolve_adapters, Generation, Method, RunMetadata,
    RunOptions,
};

#[derive(Parser)]
#[command(name = "clora", version, about = "Training-free composition of multiple LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one image from a composition spec.
    Compose(ComposeArgs),
    /// Run a benchmark manifest over seeds and methods.
    Bench(BenchArgs),
    /// Score an image against single-adapter references.
    Eval(EvalArgs),
    /// Rerun a generation from its metadata file.
    Regenerate(RegenerateArgs),
}

#[derive(Args)]
struct ComposeArgs {
    /// Composition spec (TOML).
    spec: PathBuf,
    #[arg(long, default_value = "clora")]
    method: Method,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "toy")]
    backend: String,
    /// InfoNCE temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Mask threshold as a fraction of the map maximum.
    #[arg(long)]
    mask_tau: Option<f64>,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    no_masking: bool,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
    /// Comma-separated step indices, e.g. `0,10,20`.
    #[arg(long, value_delimiter = ',')]
    refine_steps: Option<Vec<usize>>,
    /// Write per-step token maps and group IoU as JSON lines.
    #[arg(long)]
    debug_attn: Option<PathBuf>,
    /// Write per-step mask PNGs into this directory.
    #[arg(long)]
    debug_masks: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Output file stem; defaults to `<method>_seed<seed>`.
    #[arg(long)]
    name: Option<String>,
    /// Also score the result with this feature extractor.
    #[arg(long)]
    extractor: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark manifest (TOML).
    manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
    /// Feature extractor for identity scores; omit to skip scoring.
    #[arg(long)]
    extractor: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Image to score (PNG).
    image: PathBuf,
    /// Spec whose adapters generate the references.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Reference image as `lora=path`; repeatable. Replaces generated references.
    #[arg(long = "ref", value_parser = parse_reference)]
    references: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long, default_value = "toy")]
    extractor: String,
}

#[derive(Args)]
struct RegenerateArgs {
    /// Metadata JSON written next to a generated image.
    metadata: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    name: Option<String>,
    /// Directory that relative adapter paths resolve against; defaults to
    /// the metadata file's directory.
    #[arg(long)]
    base_dir: Option<PathBuf>,
}

fn parse_reference(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or_else(|| format!("expected `lora=path`, got `{s}`"))?;
    if id.is_empty() || path.is_empty() {
        return Err(format!("expected `lora=path`, got `{s}`"));
    }
    Ok((id.to_string(), PathBuf::from(path)))
}

fn load_spec(path: &Path) -> Result<CompositionSpec> {
    CompositionSpec::from_path(path).with_context(|| format!("reading spec {}", path.display()))
}

fn apply_overrides(spec: &mut CompositionSpec, args: &ComposeArgs) {
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let g = &mut spec.guidance_config;
    if let Some(t) = args.tau {
        g.temperature = t;
    }
    if let Some(a) = args.alpha0 {
        g.step_scale = a;
    }
    if let Some(n) = args.inner_iters {
        g.inner_iterations = n;
    }
    if let Some(c) = args.cutoff {
        g.cutoff_step = c;
    }
    if let Some(r) = &args.refine_steps {
        g.refinement_steps = r.iter().copied().collect::<BTreeSet<_>>();
    }
    if args.no_guidance {
        g.enabled = false;
    }
    if let Some(t) = args.mask_tau {
        spec.mask_config.threshold = t;
    }
    if args.no_masking {
        spec.mask_config.enabled = false;
    }
}

fn write_generation(g: &Generation, out: &Path, name: Option<&str>) -> Result<()> {
    let stem = name
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}_seed{}", g.metadata.method, g.metadata.seed));
    let (png, json) = g.save(out, &stem)?;
    println!("{}", png.display());
    println!("{}", json.display());
    if let Some(iou) = g.metadata.mean_inter_group_iou() {
        info!("mean inter-group IoU {iou:.4}");
    }
    Ok(())
}

fn compose(args: ComposeArgs) -> Result<()> {
    let mut spec = load_spec(&args.spec)?;
    apply_overrides(&mut spec, &args);
    spec.guidance_config.validate(Some(args.steps))?;
    spec.mask_config.validate()?;
    let extractor = args.extractor.as_deref().map(extractor_by_name).transpose()?;
    let mut backend = make_backend(&args.backend, args.steps)?;
    let base_dir = args.spec.parent();
    let (adapters, info) = resolve_adapters(&spec, base_dir, Some(&backend))?;
    let opts = RunOptions {
        debug_attn: args.debug_attn.clone(),
        debug_masks: args.debug_masks.clone(),
        bypass_guidance: false,
    };
    let g = generate(&mut backend, &spec, args.method, &adapters, &info, &opts)?;
    write_generation(&g, &args.out, args.name.as_deref())?;
    if let Some(extractor) = extractor {
        let refs = reference_images(&mut backend, &spec, &adapters)?
            .into_iter()
            .map(|(id, img)| (id, vec![img]))
            .collect::<Vec<_>>();
        let report = evaluate(&g.image, &refs, extractor.as_ref())?;
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let manifest =
        Manifest::from_path(&args.manifest).with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let extractor = args.extractor.as_deref().map(extractor_by_name).transpose()?;
    // fail early rather than once per cell
    make_backend(&args.backend, args.steps)?;
    let opts = BenchOptions {
        backend: args.backend,
        steps: args.steps,
        out_dir: args.out.clone(),
    };
    let report = run_benchmark(&manifest, &opts, extractor.as_deref())?;
    print!("{}", report.table_csv());
    println!("{}", args.out.join("table.csv").display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let extractor = extractor_by_name(&args.extractor)?;
    let image = image::open(&args.image)
        .with_context(|| format!("reading image {}", args.image.display()))?
        .to_luma8();
    let refs = if !args.references.is_empty() {
        let mut refs: Vec<(LoraId, Vec<image::GrayImage>)> = Vec::new();
        for (id, path) in &args.references {
            let img = image::open(path)
                .with_context(|| format!("reading reference {}", path.display()))?
                .to_luma8();
            match refs.iter_mut().find(|(r, _)| r.as_str() == id) {
                Some((_, v)) => v.push(img),
                None => refs.push((LoraId::new(id.as_str()), vec![img])),
            }
        }
        refs
    } else if let Some(spec_path) = &args.spec {
        let spec = load_spec(spec_path)?;
        let mut backend = make_backend(&args.backend, args.steps)?;
        let (adapters, _) = resolve_adapters(&spec, spec_path.parent(), Some(&backend))?;
        reference_images(&mut backend, &spec, &adapters)?
            .into_iter()
            .map(|(id, img)| (id, vec![img]))
            .collect()
    } else {
        bail!("eval needs --spec or at least one --ref");
    };
    let report = evaluate(&image, &refs, extractor.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn regen(args: RegenerateArgs) -> Result<()> {
    let metadata = RunMetadata::from_path(&args.metadata)
        .with_context(|| format!("reading metadata {}", args.metadata.display()))?;
    let base_dir = args.base_dir.as_deref().or(args.metadata.parent());
    let g = regenerate(&metadata, base_dir)?;
    write_generation(&g, &args.out, args.name.as_deref())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Compose(a) => compose(a),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
        Command::Regenerate(a) => regen(a),
    }
}
