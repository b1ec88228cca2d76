//! Flat `key=value` run configuration with a typed key schema per command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use smmf_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    /// Input file or directory; hashed into the run manifest.
    Input,
    /// Output file or directory.
    Output,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    /// `None` marks a required key; `Some("")` an optional one.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: Option<&'static str>, help: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
        help,
    }
}

use Kind::*;

const REFERENCE: Key = key(
    "reference",
    Bool,
    Some("false"),
    "single-threaded reference mode",
);

const GUIDANCE: &[Key] = &[
    key("xi", Int, Some("4"), "low-frequency pooling factor"),
    key("steps", Int, Some("50"), "denoising steps"),
    key("window", Int, Some("20"), "guided denoising steps"),
    key("opt-steps", Int, Some(""), "inner optimization steps per guided step"),
    key("lr", Float, Some(""), "inner learning rate (start of the decay when lr-end is set)"),
    key("lr-end", Float, Some(""), "final inner learning rate of a linear decay"),
    key("preset", Str, Some("default"), "default | decay"),
    key("cfg-scale", Float, Some("10"), "classifier-free guidance scale"),
    key("loss", Str, Some("pairwise_smm"), "pairwise_smm | smm_recon | full_feature_recon"),
    key("inversion-steps", Int, Some("1000"), "DDIM inversion steps of the source"),
    key("lf-init", Bool, Some("true"), "low-frequency initialization from the inverted noise"),
    key("gen-features", Str, Some("prompt"), "prompt | null, condition of the generated features"),
    key("inversion-prompt", Str, Some("null"), "prompt | null, condition of the source inversion"),
];

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: Vec<Key>,
}

pub fn commands() -> Vec<CommandSpec> {
    let mut v = vec![
        CommandSpec {
            name: "synthgen",
            about: "Generate a synthetic moving-shape dataset",
            keys: vec![
                key("out", Output, None, "dataset directory"),
                key("n", Int, Some("90"), "number of videos"),
                key("seed", Int, Some("0"), "random seed"),
                key("mix", Str, Some("square=1,circle=1,triangle=1"), "relative class weights"),
                key("val-every", Int, Some("10"), "every n-th video is held out (0: none)"),
                key("frames", Int, Some("8"), "frames per video"),
                key("height", Int, Some("32"), "frame height"),
                key("width", Int, Some("32"), "frame width"),
                key("force", Bool, Some("false"), "write into a non-empty directory"),
            ],
        },
        CommandSpec {
            name: "train",
            about: "Train the denoiser on a dataset",
            keys: vec![
                key("data", Input, None, "dataset directory"),
                key("out", Output, None, "checkpoint path"),
                key("steps", Int, Some("2000"), "optimizer steps"),
                key("batch", Int, Some("4"), "clips per step"),
                key("lr", Float, Some("0.002"), "peak learning rate"),
                key("warmup", Int, Some("100"), "linear warmup steps"),
                key("lr-floor", Float, Some("0.05"), "final learning rate as a fraction of lr"),
                key("cond-dropout", Float, Some("0.1"), "probability of the NULL condition"),
                key("grad-clip", Float, Some("1.0"), "global gradient norm clip (0: off)"),
                key("ema-decay", Float, Some("0.999"), "weight average decay (0: off)"),
                key("augment", Bool, Some("true"), "random flips and time reversal"),
                key("velocity-head", Bool, Some("true"), "read the output as velocity and train on its MSE (false: plain eps-head)"),
                key("base-width", Int, Some("16"), "channels of the first UNet stage"),
                key("diffusion-steps", Int, Some("1000"), "noise schedule length T"),
                key("seed", Int, Some("0"), "random seed"),
                key("log-every", Int, Some("10"), "loss log interval"),
            ],
        },
        CommandSpec {
            name: "sample",
            about: "Sample a video from a class",
            keys: vec![
                key("ckpt", Input, None, "denoiser checkpoint"),
                key("class", Str, None, "class name or index, or null"),
                key("out", Output, None, "output .vten"),
                key("seed", Int, Some("0"), "noise seed"),
                key("steps", Int, Some("50"), "DDIM steps"),
                key("cfg-scale", Float, Some("10"), "classifier-free guidance scale"),
            ],
        },
        CommandSpec {
            name: "invert",
            about: "DDIM-invert a video to noise, optionally reconstructing it",
            keys: vec![
                key("ckpt", Input, None, "denoiser checkpoint"),
                key("video", Input, None, "input .vten"),
                key("out", Output, None, "output latent (.lten)"),
                key("class", Str, Some("null"), "inversion condition"),
                key("steps", Int, Some("50"), "inversion steps"),
                key("recon", Output, Some(""), "also sample back and write this .vten"),
            ],
        },
        CommandSpec {
            name: "feature-invert",
            about: "Reconstruct a video from its space-time features",
            keys: vec![
                key("ckpt", Input, None, "denoiser checkpoint"),
                key("video", Input, None, "source .vten"),
                key("out", Output, None, "output directory"),
                key("class", Str, Some("null"), "generation condition"),
                key("source-class", Str, Some(""), "source class (used when inversion-prompt=prompt)"),
                key("seed", Int, Some("0"), "noise seed"),
            ],
        },
        CommandSpec {
            name: "transfer",
            about: "Transfer the motion of a source video to a target class",
            keys: vec![
                key("ckpt", Input, None, "denoiser checkpoint"),
                key("video", Input, None, "source .vten"),
                key("class", Str, None, "target class"),
                key("out", Output, None, "output directory"),
                key("source-class", Str, Some(""), "source class (used when inversion-prompt=prompt)"),
                key("tracks", Input, Some(""), "source tracklets (default: track the source)"),
                key("probe", Input, Some(""), "probe for edit fidelity"),
                key("variant", Str, Some("full"), "full | random_init | no_opt | full_feature | sdedit"),
                key("strength", Float, Some("0.75"), "sdedit noise strength"),
                key("seed", Int, Some("0"), "noise seed"),
                key("points", Int, Some("16"), "tracked points"),
                key("seeding", Str, Some("foreground"), "foreground | uniform"),
                key("scale", Int, Some("4"), "PNG/GIF upscale factor"),
                key("fps", Int, Some("8"), "GIF frame rate"),
            ],
        },
        CommandSpec {
            name: "track",
            about: "Track points through a video by block matching",
            keys: vec![
                key("video", Input, None, "input .vten"),
                key("out", Output, None, "tracklet JSON"),
                key("points", Int, Some("16"), "number of points"),
                key("patch", Int, Some("5"), "odd patch side"),
                key("radius", Int, Some("3"), "search radius"),
                key("seeding", Str, Some("foreground"), "foreground | uniform"),
                key("fg-threshold", Float, Some("0.2"), "foreground colour distance"),
                key("seed", Int, Some("0"), "seed for uniform seeding"),
            ],
        },
        CommandSpec {
            name: "score",
            about: "Motion-fidelity score of two tracklet sets",
            keys: vec![
                key("src", Input, None, "source tracklets"),
                key("gen", Input, None, "generated tracklets"),
                key("out", Output, None, "report JSON"),
                key("probe", Input, Some(""), "probe for edit fidelity"),
                key("video", Input, Some(""), "generated .vten for edit fidelity"),
                key("class", Str, Some(""), "target class for edit fidelity"),
            ],
        },
        CommandSpec {
            name: "probe",
            about: "Train or evaluate the shape-class probe",
            keys: vec![
                key("action", Str, Some("train"), "train | eval"),
                key("data", Input, None, "dataset directory"),
                key("out", Output, None, "probe file (train) or report JSON (eval)"),
                key("probe", Input, Some(""), "probe file to evaluate"),
                key("width", Int, Some("8"), "channels of the first layer"),
                key("steps", Int, Some("1500"), "optimizer steps"),
                key("batch", Int, Some("32"), "frames per step"),
                key("lr", Float, Some("0.003"), "learning rate"),
                key("noise", Float, Some("0.15"), "largest augmentation noise"),
                key("seed", Int, Some("0"), "random seed"),
            ],
        },
        CommandSpec {
            name: "render",
            about: "Render a .vten as PNG frames and an animated GIF",
            keys: vec![
                key("video", Input, None, "input .vten"),
                key("out", Output, None, "output directory"),
                key("scale", Int, Some("4"), "upscale factor"),
                key("fps", Int, Some("8"), "GIF frame rate"),
            ],
        },
    ];
    for c in &mut v {
        match c.name {
            "transfer" => c.keys.extend_from_slice(GUIDANCE),
            "feature-invert" => {
                c.keys.extend_from_slice(GUIDANCE);
                for k in &mut c.keys {
                    match k.name {
                        "window" => k.default = Some("50"),
                        "inversion-steps" => k.default = Some("50"),
                        "lf-init" => k.default = Some("false"),
                        "loss" => k.default = Some("full_feature_recon"),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
        c.keys.push(REFERENCE);
    }
    v
}

pub fn find(name: &str) -> Option<CommandSpec> {
    commands().into_iter().find(|c| c.name == name)
}

fn config_err(msg: String) -> Error {
    Error::Config(msg)
}

/// Parses `key=value` lines; `#` starts a comment. Underscores in keys read as dashes.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key=value", i + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Effective configuration of one command run, validated against its schema.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
    keys: Vec<Key>,
}

impl RunConfig {
    /// Resolves defaults, then `file`, then `overrides` (later wins), and type-checks every value.
    pub fn resolve(command: &str, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Error> {
        let spec = find(command).ok_or_else(|| config_err(format!("unknown command {command:?}")))?;
        let mut pairs = Vec::new();
        if let Some(p) = file {
            let text = fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
            pairs.extend(parse_lines(&text)?);
        }
        pairs.extend(overrides.iter().map(|(k, v)| (k.replace('_', "-"), v.clone())));
        let mut values = BTreeMap::new();
        for k in &spec.keys {
            if let Some(d) = k.default {
                values.insert(k.name.to_string(), d.to_string());
            }
        }
        for (k, v) in pairs {
            if !spec.keys.iter().any(|s| s.name == k) {
                return Err(config_err(format!("unknown key {k:?} for {command}")));
            }
            values.insert(k, v);
        }
        let cfg = Self {
            command: command.to_string(),
            values,
            keys: spec.keys,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Error> {
        for k in &self.keys {
            let Some(v) = self.values.get(k.name) else {
                return Err(config_err(format!("missing required key {:?}", k.name)));
            };
            if v.is_empty() {
                continue;
            }
            let ok = match k.kind {
                Int => v.parse::<u64>().is_ok(),
                Float => v.parse::<f64>().is_ok_and(f64::is_finite),
                Bool => v.parse::<bool>().is_ok(),
                Str | Input | Output => true,
            };
            if !ok {
                return Err(config_err(format!("key {:?}: cannot read {v:?} as {:?}", k.name, k.kind)));
            }
        }
        Ok(())
    }

    fn raw(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, name: &str) -> bool {
        !self.raw(name).is_empty()
    }

    pub fn str(&self, name: &str) -> Option<&str> {
        Some(self.raw(name)).filter(|s| !s.is_empty())
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.str(name).map(PathBuf::from)
    }

    pub fn req_path(&self, name: &str) -> Result<PathBuf, Error> {
        self.path(name).ok_or_else(|| config_err(format!("{name} is required")))
    }

    pub fn usize(&self, name: &str) -> Option<usize> {
        self.str(name).map(|v| v.parse().expect("validated"))
    }

    pub fn u64(&self, name: &str) -> Option<u64> {
        self.str(name).map(|v| v.parse().expect("validated"))
    }

    pub fn f64(&self, name: &str) -> Option<f64> {
        self.str(name).map(|v| v.parse().expect("validated"))
    }

    pub fn bool(&self, name: &str) -> bool {
        self.str(name).is_some_and(|v| v.parse().expect("validated"))
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        self.keys.iter().filter(|k| k.kind == Input).filter_map(|k| self.path(k.name)).collect()
    }

    /// Sorted `key=value` lines; reading them back reproduces this configuration.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(format!("{}\n{}", self.command, self.to_text()).as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_then_overrides() {
        let c = RunConfig::resolve("sample", None, &set(&[("ckpt", "m.smmf"), ("class", "circle"), ("out", "o.vten"), ("seed", "7")]))
            .unwrap();
        assert_eq!(c.u64("seed"), Some(7));
        assert_eq!(c.usize("steps"), Some(50));
    }

    #[test]
    fn rejects_bad_values() {
        let base = [("ckpt", "m"), ("class", "circle"), ("out", "o")];
        let mut bad = set(&base);
        bad.push(("steps".into(), "fifty".into()));
        assert!(matches!(RunConfig::resolve("sample", None, &bad), Err(Error::Config(_))));
        let mut unknown = set(&base);
        unknown.push(("colour".into(), "red".into()));
        assert!(RunConfig::resolve("sample", None, &unknown).is_err());
        assert!(RunConfig::resolve("sample", None, &set(&[("ckpt", "m")])).is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::resolve("track", None, &set(&[("video", "v.vten"), ("out", "t.json")])).unwrap();
        let back = RunConfig::resolve("track", None, &parse_lines(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back.values, c.values);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn config_file_comments_and_underscores() {
        let p = parse_lines("# run\nfg_threshold = 0.3 # brighter\n\n").unwrap();
        assert_eq!(p, vec![("fg-threshold".to_string(), "0.3".to_string())]);
        assert!(parse_lines("nonsense").is_err());
    }
}
