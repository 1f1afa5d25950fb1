use std::path::PathBuf;

use probelight_core::eval::{evaluate, EvalOptions, Protocol};
use probelight_core::hdr::{merge_ldrs, tonemap, DEFAULT_GAMMA};
use probelight_core::io::{read_image_auto, write_image_auto};
use probelight_core::probe::{ball_to_envmap, crop_pano, render_sphere, render_sphere_array};
use probelight_core::{CropSpec, EnvMap, ExposureBracket, SphereMaterial, ToneMap};

use crate::args::{
    CropArgs, EvaluateArgs, MaterialArg, ProtocolArg, RenderArgs, TonemapArgs, UnwrapArgs,
};
use crate::failure::{CliResult, Failure};

#[derive(Debug, PartialEq)]
pub struct MergeArgs {
    pub inputs: Vec<(f64, PathBuf)>,
    pub output: PathBuf,
    pub gamma: f64,
}

/// Parses `--ev<VALUE> PATH` pairs plus `-o PATH` and `--gamma G`.
pub fn parse_merge_args(args: &[String]) -> CliResult<MergeArgs> {
    let mut inputs = Vec::new();
    let mut output = None;
    let mut gamma = DEFAULT_GAMMA;
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| Failure::config(format!("{flag} needs a value")))
        };
        match flag.as_str() {
            "-o" | "--output" => output = Some(PathBuf::from(value()?)),
            "--gamma" => {
                let v = value()?;
                gamma = v
                    .parse()
                    .map_err(|_| Failure::config(format!("bad gamma {v:?}")))?;
            }
            f => {
                let ev = f
                    .strip_prefix("--ev")
                    .ok_or_else(|| Failure::config(format!("unexpected argument {f:?}")))?;
                let ev: f64 = ev
                    .trim_start_matches('=')
                    .parse()
                    .map_err(|_| Failure::config(format!("bad exposure in {f:?}")))?;
                inputs.push((ev, PathBuf::from(value()?)));
            }
        }
    }
    let output = output.ok_or_else(|| Failure::config("merge-hdr needs -o OUTPUT"))?;
    if inputs.is_empty() {
        return Err(Failure::config("merge-hdr needs at least --ev0 PATH"));
    }
    inputs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(MergeArgs {
        inputs,
        output,
        gamma,
    })
}

pub fn cmd_merge(args: &[String]) -> CliResult {
    let m = parse_merge_args(args)?;
    let images = m
        .inputs
        .iter()
        .map(|(_, p)| read_image_auto(p))
        .collect::<Result<Vec<_>, _>>()?;
    let evs = m.inputs.iter().map(|(ev, _)| *ev).collect();
    let hdr = merge_ldrs(&ExposureBracket::new(images, evs)?, m.gamma)?;
    write_image_auto(&hdr, &m.output)?;
    println!("wrote {}", m.output.display());
    Ok(())
}

pub fn cmd_tonemap(a: &TonemapArgs) -> CliResult {
    let hdr = read_image_auto(&a.input)?;
    let params = ToneMap {
        ev: a.ev,
        gamma: a.gamma,
        percentile: a.percentile,
        target: a.target,
    };
    write_image_auto(&tonemap(&hdr, &params)?, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

pub fn cmd_unwrap(a: &UnwrapArgs) -> CliResult {
    let ball = read_image_auto(&a.input)?;
    if ball.height() != ball.width() {
        return Err(Failure::config(format!(
            "{}: ball image must be square, got {}x{}",
            a.input.display(),
            ball.height(),
            ball.width()
        )));
    }
    let env = ball_to_envmap(&ball, a.size)?;
    write_image_auto(env.radiance(), &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn load_env(path: &std::path::Path) -> CliResult<EnvMap> {
    let t = read_image_auto(path)?;
    EnvMap::new(t).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn cmd_render(a: &RenderArgs) -> CliResult {
    let env = load_env(&a.input)?;
    let img = match a.material {
        MaterialArg::Mirror => render_sphere(&env, &SphereMaterial::mirror(), a.size)?,
        MaterialArg::Matte => render_sphere(&env, &SphereMaterial::matte_silver(), a.size)?,
        MaterialArg::Diffuse => render_sphere(&env, &SphereMaterial::gray_diffuse(), a.size)?,
        MaterialArg::Array => render_sphere_array(&env, a.array_grid, a.array_size)?,
    };
    write_image_auto(&img, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

pub fn cmd_crop(a: &CropArgs) -> CliResult {
    let env = load_env(&a.input)?;
    let spec = CropSpec {
        fov_v: a.fov,
        azimuth: a.az,
        elevation: a.el,
        out_size: a.size,
    };
    write_image_auto(&crop_pano(&env, &spec)?, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let opts = EvalOptions {
        protocol: match a.protocol {
            ProtocolArg::ThreeSpheres => Protocol::ThreeSpheres,
            ProtocolArg::SphereArray => Protocol::SphereArray,
        },
        sphere_size: a.sphere_size,
        array_grid: a.array_grid,
        array_size: a.array_size,
        rotate_deg: a.rotate,
        mask_black: a.mask_black,
    };
    let report = evaluate(&a.pred, &a.gt, &opts)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(crate::failure::io_at(parent))?;
    }
    let csv = report.write(&a.out)?;
    for g in &report.aggregates {
        println!(
            "{:<8} n={:<4} si-RMSE {:.5}  angular {:.3} deg  normalized RMSE {:.5}",
            g.material, g.count, g.si_rmse, g.angular_deg, g.norm_rmse
        );
    }
    println!("wrote {}, {}", a.out.display(), csv.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn merge_args_are_sorted_by_exposure() {
        let m = parse_merge_args(&strings(&[
            "--ev-5", "c.png", "--ev0", "a.png", "--ev-2.5", "b.png", "-o", "x.pfm",
        ]))
        .unwrap();
        assert_eq!(
            m.inputs,
            vec![
                (0.0, "a.png".into()),
                (-2.5, "b.png".into()),
                (-5.0, "c.png".into())
            ]
        );
        assert_eq!(m.output, PathBuf::from("x.pfm"));
        assert_eq!(m.gamma, DEFAULT_GAMMA);
    }

    #[test]
    fn merge_args_errors() {
        assert!(parse_merge_args(&strings(&["--ev0", "a.png"])).is_err());
        assert!(parse_merge_args(&strings(&["-o", "x.pfm"])).is_err());
        assert!(parse_merge_args(&strings(&["--evx", "a.png", "-o", "x.pfm"])).is_err());
        assert!(parse_merge_args(&strings(&["--ev0"])).is_err());
        assert!(parse_merge_args(&strings(&["--bogus", "1", "-o", "x.pfm"])).is_err());
        let m = parse_merge_args(&strings(&[
            "--ev0", "a.png", "--gamma", "2.2", "-o", "x.pfm",
        ]))
        .unwrap();
        assert_eq!(m.gamma, 2.2);
    }
}
