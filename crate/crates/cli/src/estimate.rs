use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use probelight_core::inpaint::BallRecord;
use probelight_core::io::{read_image_auto, write_image_auto};
use probelight_core::pipelines::{expected_nfe, format_ev, NfeReport};
use probelight_core::{run_pipeline, EstimateResult, PipelineConfig, PipelineKind, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{EstimateArgs, ReplayArgs};
use crate::denoiser_spec::DenoiserSpec;
use crate::failure::{io_at, CliResult, Failure};

pub const MANIFEST_FORMAT: &str = "probelight-run";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NFE_FILE: &str = "nfe.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    fn of(path: &Path) -> CliResult<Self> {
        let path = fs::canonicalize(path).map_err(io_at(path))?;
        let sha256 = sha256_file(&path)?;
        Ok(Self { path, sha256 })
    }

    fn verify(&self, what: &str) -> CliResult {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            return Err(Failure::config(format!(
                "{what} {} changed since the run (sha256 {now}, recorded {})",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run bit for bit. Contains no timestamps
/// or output locations, so two runs of the same command write equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input: FileRef,
    /// `None` when the run used a flat depth map.
    pub depth: Option<FileRef>,
    pub denoiser_files: Vec<FileRef>,
    pub config: PipelineConfig,
    pub expected_nfe: u64,
    pub nfe: NfeReport,
    pub balls: Vec<BallRecord>,
    /// File name to sha256 of every artifact in the run directory.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeFile {
    pub pipeline: PipelineKind,
    pub expected_total: u64,
    #[serde(flatten)]
    pub report: NfeReport,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(sha256_bytes(&fs::read(path).map_err(io_at(path))?))
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

/// Config file values, overridden by flags that were actually typed.
fn merged_config(args: &EstimateArgs, m: &ArgMatches) -> CliResult<PipelineConfig> {
    let (mut cfg, file_has_seed) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_at(path))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let has_seed = value.get("seed").is_some();
            let cfg: PipelineConfig = serde_json::from_value(value)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            (cfg, has_seed)
        }
        None => (PipelineConfig::default(), false),
    };
    let p = &args.pipeline;
    macro_rules! overlay {
        ($($id:literal => $field:ident),* $(,)?) => {
            $(if args.config.is_none() || explicit(m, $id) {
                cfg.$field = p.$field.clone();
            })*
        };
    }
    if args.config.is_none() || explicit(m, "pipeline") {
        cfg.kind = p.pipeline;
    }
    overlay!(
        "evs" => evs, "n" => n, "k" => k, "eta" => eta, "steps" => steps, "threshold" => threshold,
        "guidance" => guidance, "lora_scale" => lora_scale, "ball_diameter" => ball_diameter,
        "ball_crop" => ball_crop, "env_height" => env_height, "ev_min" => ev_min, "gamma" => gamma,
        "reuse_threshold_eps" => reuse_threshold_eps, "impute_level" => impute_level,
        "closer" => closer, "parallel_evs" => parallel_evs,
    );
    // flag, then config file, then PROBELIGHT_SEED, then the default
    if explicit(m, "seed") || !file_has_seed {
        cfg.seed = args.seed;
    }
    if let Some(d) = &args.denoiser {
        cfg.denoiser = Some(d.clone());
    }
    Ok(cfg)
}

fn load_input(path: &Path) -> CliResult<Tensor> {
    Ok(read_image_auto(path)?)
}

fn load_depth(path: &Path, image: &Tensor) -> CliResult<Tensor> {
    let d = read_image_auto(path)?;
    let d = if d.channels() == 1 { d } else { d.channel(0)? };
    if (d.height(), d.width()) != (image.height(), image.width()) {
        return Err(Failure::config(format!(
            "{}: depth is {}x{} but the input is {}x{}",
            path.display(),
            d.height(),
            d.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(d)
}

fn flat_depth(image: &Tensor) -> Tensor {
    Tensor::full([1, image.height(), image.width()], 1.0)
}

/// A fully resolved run: what `estimate` builds from flags and `replay`
/// builds from a manifest.
struct RunPlan {
    input: FileRef,
    depth: Option<FileRef>,
    spec: DenoiserSpec,
    config: PipelineConfig,
}

fn execute(plan: &RunPlan, out_dir: &Path) -> CliResult<Manifest> {
    let image = load_input(&plan.input.path)?;
    let depth = match &plan.depth {
        Some(d) => load_depth(&d.path, &image)?,
        None => flat_depth(&image),
    };
    plan.config.validate()?;
    let sched = plan.config.schedule_config().build()?;
    let denoiser = plan.spec.build(&image, plan.config.gamma, &sched)?;
    let result = run_pipeline(&plan.config, &image, Some(&depth), denoiser.as_ref())?;
    let expected = expected_nfe(&plan.config, &sched)?;
    let outputs = write_artifacts(&result, &plan.config, expected, out_dir)?;
    let denoiser_files = plan
        .spec
        .files()
        .iter()
        .map(|p| FileRef::of(p))
        .collect::<CliResult<_>>()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        input: plan.input.clone(),
        depth: plan.depth.clone(),
        denoiser_files,
        config: plan.config.clone(),
        expected_nfe: expected,
        nfe: result.nfe.clone(),
        balls: result.records.clone(),
        outputs,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, to_json(&manifest)?).map_err(io_at(&path))?;
    print_summary(&plan.config, &result, expected, out_dir);
    Ok(manifest)
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::config(e.to_string()))
}

fn write_artifacts(
    res: &EstimateResult,
    cfg: &PipelineConfig,
    expected: u64,
    dir: &Path,
) -> CliResult<BTreeMap<String, String>> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut images: Vec<(String, &Tensor)> = vec![
        ("envmap.pfm".into(), res.env_map.radiance()),
        ("envmap.hdr".into(), res.env_map.radiance()),
        ("hdr_ball.pfm".into(), &res.hdr_ball),
        ("depth_cond.pfm".into(), &res.depth_condition),
        ("mask.png".into(), &res.mask),
    ];
    for out in &res.per_ev {
        let ev = format_ev(out.ev);
        images.push((format!("ev_{ev}.png"), &out.image));
        images.push((format!("ball_ev_{ev}.png"), &out.ball));
    }
    let mut sums = BTreeMap::new();
    for (name, t) in images {
        let path = dir.join(&name);
        let t = if t.channels() == 1 {
            t.repeat_channels(3)?
        } else {
            t.clone()
        };
        write_image_auto(&t, &path)?;
        sums.insert(name, sha256_file(&path)?);
    }
    let nfe = NfeFile {
        pipeline: cfg.kind,
        expected_total: expected,
        report: res.nfe.clone(),
    };
    let text = to_json(&nfe)?;
    let path = dir.join(NFE_FILE);
    fs::write(&path, &text).map_err(io_at(&path))?;
    sums.insert(NFE_FILE.into(), sha256_bytes(text.as_bytes()));
    Ok(sums)
}

fn print_summary(cfg: &PipelineConfig, res: &EstimateResult, expected: u64, dir: &Path) {
    let per_lora: Vec<String> = res
        .nfe
        .per_lora
        .iter()
        .map(|(k, v)| format!("{k} {v}"))
        .collect();
    println!(
        "{}: {} denoiser calls ({}), expected {expected}",
        cfg.kind,
        res.nfe.total,
        per_lora.join(", ")
    );
    println!("wrote {}", dir.display());
}

pub fn cmd_estimate(args: &EstimateArgs, m: &ArgMatches) -> CliResult {
    let config = merged_config(args, m)?;
    let spec_text = config.denoiser.clone().ok_or_else(|| {
        Failure::config("no denoiser given (use --denoiser or set it in --config)")
    })?;
    let spec = spec_text.parse::<DenoiserSpec>()?.resolved()?;
    let depth = match (&args.depth, args.flat_depth) {
        (Some(p), _) => Some(FileRef::of(p)?),
        (None, true) => None,
        (None, false) => {
            return Err(Failure::config(
                "a depth map is required: pass --depth PATH or --flat-depth",
            ))
        }
    };
    let plan = RunPlan {
        input: FileRef::of(&args.input)?,
        depth,
        config: PipelineConfig {
            denoiser: Some(spec.to_spec_string()),
            ..config
        },
        spec,
    };
    execute(&plan, &args.output)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> CliResult<Manifest> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(Failure::config(format!(
            "{}: unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

pub fn cmd_replay(args: &ReplayArgs) -> CliResult {
    let recorded = read_manifest(&args.manifest)?;
    let spec: DenoiserSpec = recorded
        .config
        .denoiser
        .as_deref()
        .ok_or_else(|| Failure::config("manifest names no denoiser"))?
        .parse()?;
    recorded.input.verify("input")?;
    if let Some(d) = &recorded.depth {
        d.verify("depth map")?;
    }
    for f in &recorded.denoiser_files {
        f.verify("denoiser file")?;
    }
    let out_dir = match &args.output {
        Some(d) => d.clone(),
        None => args
            .manifest
            .parent()
            .map(|p| p.join("replay"))
            .unwrap_or_else(|| PathBuf::from("replay")),
    };
    let plan = RunPlan {
        input: recorded.input.clone(),
        depth: recorded.depth.clone(),
        spec,
        config: recorded.config.clone(),
    };
    let replayed = execute(&plan, &out_dir)?;

    let mut differing = Vec::new();
    for (name, sum) in &recorded.outputs {
        match replayed.outputs.get(name) {
            Some(s) if s == sum => {}
            Some(_) => differing.push(format!("{name} differs")),
            None => differing.push(format!("{name} was not produced")),
        }
    }
    for name in replayed
        .outputs
        .keys()
        .filter(|n| !recorded.outputs.contains_key(*n))
    {
        differing.push(format!("{name} is new"));
    }
    if differing.is_empty() {
        println!(
            "replay matches all {} recorded artifacts",
            recorded.outputs.len()
        );
        return Ok(());
    }
    let msg = format!("replay differs from the manifest: {}", differing.join("; "));
    if args.check {
        return Err(Failure::mismatch(msg));
    }
    eprintln!("warning: {msg}");
    Ok(())
}
