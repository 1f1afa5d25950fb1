use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use probelight_core::denoiser::{
    seeded_lobe_denoiser, Endpoint, ExposureOracle, LinearLoraDenoiser, LoraStackConfig,
    RemoteDenoiser,
};
use probelight_core::io::read_image_auto;
use probelight_core::{Denoiser, NoiseSchedule, Tensor};

use crate::failure::{io_at, CliResult, Failure};

/// A denoiser selected by a URI-like string.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    /// Exposure-aware oracle pulling every ball toward the target image.
    ToyOracle(PathBuf),
    /// Oracle whose target is jittered per run seed.
    ToyLobe(PathBuf, f32),
    /// Linear denoiser built from a LoRA stack config.
    ToyLinear(PathBuf),
    Remote(Endpoint),
}

impl FromStr for DenoiserSpec {
    type Err = Failure;

    fn from_str(s: &str) -> CliResult<Self> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| Failure::config(format!("denoiser {s:?} has no scheme")))?;
        let nonempty = |p: &str| {
            if p.is_empty() {
                Err(Failure::config(format!("denoiser {s:?} needs a path")))
            } else {
                Ok(PathBuf::from(p))
            }
        };
        match scheme {
            "toy-oracle" => Ok(Self::ToyOracle(nonempty(rest)?)),
            "toy-linear" => Ok(Self::ToyLinear(nonempty(rest)?)),
            "toy-lobe" => {
                let (path, sigma) = rest.rsplit_once(':').ok_or_else(|| {
                    Failure::config(format!("{s:?}: expected toy-lobe:PATH:SIGMA"))
                })?;
                let sigma: f32 = sigma
                    .parse()
                    .map_err(|_| Failure::config(format!("{s:?}: bad sigma {sigma:?}")))?;
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Failure::config(format!(
                        "{s:?}: sigma must be non-negative"
                    )));
                }
                Ok(Self::ToyLobe(nonempty(path)?, sigma))
            }
            "remote" => Ok(Self::Remote(rest.parse()?)),
            other => Err(Failure::config(format!(
                "unknown denoiser scheme {other:?} (toy-oracle, toy-lobe, toy-linear, remote)"
            ))),
        }
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(p).map_err(io_at(p))
}

impl DenoiserSpec {
    /// The same spec with file paths made absolute, so a manifest can be
    /// replayed from any working directory.
    pub fn resolved(&self) -> CliResult<Self> {
        Ok(match self {
            Self::ToyOracle(p) => Self::ToyOracle(absolute(p)?),
            Self::ToyLobe(p, s) => Self::ToyLobe(absolute(p)?, *s),
            Self::ToyLinear(p) => Self::ToyLinear(absolute(p)?),
            Self::Remote(e) => Self::Remote(e.clone()),
        })
    }

    pub fn files(&self) -> Vec<&Path> {
        match self {
            Self::ToyOracle(p) | Self::ToyLobe(p, _) | Self::ToyLinear(p) => vec![p.as_path()],
            Self::Remote(_) => Vec::new(),
        }
    }

    pub fn to_spec_string(&self) -> String {
        match self {
            Self::ToyOracle(p) => format!("toy-oracle:{}", p.display()),
            Self::ToyLobe(p, s) => format!("toy-lobe:{}:{s}", p.display()),
            Self::ToyLinear(p) => format!("toy-linear:{}", p.display()),
            Self::Remote(Endpoint::Tcp(addr)) => format!("remote:{addr}"),
            Self::Remote(Endpoint::Stdio(cmd)) => format!("remote:stdio:{cmd}"),
        }
    }

    /// Builds the denoiser for latents shaped like `image`.
    pub fn build(
        &self,
        image: &Tensor,
        gamma: f64,
        sched: &NoiseSchedule,
    ) -> CliResult<Box<dyn Denoiser>> {
        let target = |p: &Path| -> CliResult<Tensor> {
            let t = read_image_auto(p)?;
            if t.shape() != image.shape() {
                return Err(Failure::config(format!(
                    "{}: target is {:?} but the input is {:?}",
                    p.display(),
                    t.shape(),
                    image.shape()
                )));
            }
            Ok(t)
        };
        Ok(match self {
            Self::ToyOracle(p) => Box::new(ExposureOracle::new(target(p)?, gamma, sched)?),
            Self::ToyLobe(p, sigma) => Box::new(seeded_lobe_denoiser(target(p)?, *sigma, sched)?),
            Self::ToyLinear(p) => {
                let text = fs::read_to_string(p).map_err(io_at(p))?;
                let cfg: LoraStackConfig = serde_json::from_str(&text)
                    .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
                let stack = cfg.build()?;
                if stack.w_base().ncols() != image.len() {
                    return Err(Failure::config(format!(
                        "{}: weight matrix is {}x{} but latents have {} values",
                        p.display(),
                        stack.w_base().nrows(),
                        stack.w_base().ncols(),
                        image.len()
                    )));
                }
                Box::new(LinearLoraDenoiser::new(stack)?)
            }
            Self::Remote(ep) => Box::new(RemoteDenoiser::connect(ep.clone())?),
        })
    }
}
