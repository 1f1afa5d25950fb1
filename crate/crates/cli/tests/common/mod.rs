#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probelight_core::io::write_image_auto;
use probelight_core::{SeededRng, Tensor};

pub fn probelight() -> Command {
    Command::new(env!("CARGO_BIN_EXE_probelight"))
}

pub fn run(args: &[&str]) -> Output {
    probelight()
        .args(args)
        .env_remove("PROBELIGHT_SEED")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn random_image(seed: u64, size: usize) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn([3, size, size], |_, _, _| rng.next_uniform() as f32)
}

pub fn smooth_image(size: usize) -> Tensor {
    let s = size as f32;
    Tensor::from_fn([3, size, size], |c, y, x| {
        0.2 + 0.6 * ((x as f32 / s) * (0.5 + 0.25 * c as f32) + 0.3 * (y as f32 / s)).fract()
    })
}

/// Writes an input image and a target image, returning their paths.
pub fn toy_inputs(dir: &Path, size: usize) -> (PathBuf, PathBuf) {
    let input = dir.join("in.png");
    let target = dir.join("target.png");
    write_image_auto(&random_image(11, size), &input).unwrap();
    write_image_auto(&smooth_image(size), &target).unwrap();
    (input, target)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small but complete turbo-swap run arguments.
pub fn estimate_args<'a>(
    input: &'a str,
    target: &'a str,
    out: &'a str,
    seed: &'a str,
) -> Vec<String> {
    [
        "estimate",
        input,
        "--flat-depth",
        "--denoiser",
        &format!("toy-lobe:{target}:0.2"),
        "--ball-diameter",
        "16",
        "--ball-crop",
        "16",
        "--env-height",
        "8",
        "--n",
        "3",
        "--steps",
        "10",
        "--seed",
        seed,
        "-o",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn run_strings(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

/// Every file in a directory tree, keyed by relative path.
pub fn dir_contents(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}
