//! Layered settings: flag > config file > `BEVLOC_SEED` > built-in default.
//!
//! Every subcommand has a settings struct whose kebab-case serde names
//! match its long flags. Config files are flat JSON objects using the same
//! names; keys the subcommand does not know are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable that supplies a default `seed`.
pub const SEED_ENV: &str = "BEVLOC_SEED";

/// Merges the layers into a settings value.
///
/// `flags` must serialize to an object holding only the flags that were
/// given on the command line.
pub fn resolve<S>(
    command: &str,
    flags: &impl Serialize,
    config: Option<&Path>,
    env_seed: Option<&str>,
) -> Result<S, CliError>
where
    S: Serialize + DeserializeOwned + Default,
{
    let mut merged = as_object(serde_json::to_value(S::default()).expect("settings serialize"));
    if let Some(raw) = env_seed {
        if merged.contains_key("seed") {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned 64-bit integer")))?;
            merged.insert("seed".into(), Value::from(seed));
        }
    }
    if let Some(path) = config {
        for (key, value) in read_config(path)? {
            if !merged.contains_key(&key) {
                let mut known: Vec<&String> = merged.keys().collect();
                known.sort();
                return Err(CliError::Usage(format!(
                    "unknown key {key:?} in config file {} for `{command}`; known keys: {}",
                    path.display(),
                    known.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            merged.insert(key, value);
        }
    }
    for (key, value) in as_object(serde_json::to_value(flags).expect("flags serialize")) {
        merged.insert(key, value);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("invalid setting for `{command}`: {e}")))
}

fn as_object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        other => panic!("settings must serialize to an object, got {other}"),
    }
}

fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Usage(format!(
            "config file {} must hold a flat JSON object",
            path.display()
        ))),
        Err(e) => Err(CliError::Usage(format!(
            "config file {} is not valid JSON: {e}",
            path.display()
        ))),
    }
}

/// Fails with a usage error naming the flag when a required path is unset.
pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| {
        CliError::Usage(format!(
            "missing --{flag} (set it on the command line or as \"{flag}\" in the config file)"
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenWorldSettings {
    pub seed: u64,
    pub extent: f64,
    pub block_density: f64,
    pub pole_density: f64,
    pub out: PathBuf,
}

impl Default for GenWorldSettings {
    fn default() -> Self {
        let p = bevloc::synthworld::WorldParams::default();
        GenWorldSettings {
            seed: 0,
            extent: p.extent,
            block_density: p.block_density,
            pole_density: p.pole_density,
            out: PathBuf::from("world.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenDataSettings {
    /// Existing `world.json`; when unset a world is generated from `world-seed`.
    pub world: Option<PathBuf>,
    pub world_seed: u64,
    pub extent: f64,
    pub out: PathBuf,
    pub frames: usize,
    pub speed: f64,
    pub reverse: bool,
    pub weave: f64,
    pub beams: usize,
    pub max_range: f64,
    pub range_noise_std: f64,
    pub dropout_prob: f64,
    pub seed: u64,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let t = bevloc::synthworld::TrajectoryParams::default();
        let s = bevloc::synthworld::ScanConfig::default();
        GenDataSettings {
            world: None,
            world_seed: 0,
            extent: bevloc::synthworld::WorldParams::default().extent,
            out: PathBuf::from("dataset"),
            frames: t.frames,
            speed: t.speed,
            reverse: t.reverse,
            weave: t.weave,
            beams: s.beams,
            max_range: s.max_range,
            range_noise_std: s.range_noise_std,
            dropout_prob: s.dropout_prob,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct MakeBevSettings {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub half_window: f64,
    pub grid_resolution: f64,
    pub density_clamp: u32,
    pub output_side: usize,
    pub png: bool,
}

impl Default for MakeBevSettings {
    fn default() -> Self {
        let b = bevloc::bev::BevConfig::default();
        MakeBevSettings {
            data: None,
            out: PathBuf::from("bev"),
            half_window: b.half_window,
            grid_resolution: b.grid_resolution,
            density_clamp: b.density_clamp,
            output_side: b.output_side,
            png: false,
        }
    }
}

/// Base model and schedule for `train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size architecture and the published training schedule.
    Full,
    /// Scaled-down model and schedule that train on a CPU in minutes.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub preset: Preset,
    /// JSON model description replacing the preset architecture.
    pub model_config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub peak_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub tuple_spacing: Option<usize>,
    pub anchor_stride: Option<usize>,
    pub augment_prob: Option<f64>,
    pub offset_std: Option<f64>,
    pub seed: u64,
    pub diagnostic: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            data: None,
            out: PathBuf::from("model.bvdl"),
            preset: Preset::Full,
            model_config: None,
            epochs: None,
            batch_size: None,
            warmup_epochs: None,
            peak_lr: None,
            weight_decay: None,
            tuple_spacing: None,
            anchor_stride: None,
            augment_prob: None,
            offset_std: None,
            seed: 0,
            diagnostic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub steps: usize,
    pub sr_trans: f64,
    pub sr_yaw: f64,
    pub seed: u64,
    /// Defaults to the spacing recorded in the checkpoint.
    pub tuple_spacing: Option<usize>,
    pub out: PathBuf,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            checkpoint: None,
            data: None,
            steps: 10,
            sr_trans: 2.0,
            sr_yaw: 5.0,
            seed: 0,
            tuple_spacing: None,
            out: PathBuf::from("eval"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FigureFormat {
    Svg,
    Png,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PlotSettings {
    /// `per_frame.csv` written by `eval`.
    pub per_frame: Option<PathBuf>,
    pub out: PathBuf,
    /// Upper end of the yaw heatmap color scale, degrees.
    pub yaw_cap: f64,
    pub format: FigureFormat,
}

impl Default for PlotSettings {
    fn default() -> Self {
        PlotSettings {
            per_frame: None,
            out: PathBuf::from("plots"),
            yaw_cap: 5.0,
            format: FigureFormat::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
#[derive(Default)]
pub struct SelftestSettings {
    pub seed: u64,
    /// Run every check at acceptance size instead of the quick variant.
    pub full: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[derive(Serialize, Default)]
    #[serde(rename_all = "kebab-case")]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        extent: Option<f64>,
    }

    fn config_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn precedence_matrix() {
        let cfg = config_file(r#"{"seed": 20, "extent": 80}"#);
        // (flag, config, env) → expected seed
        for flag in [None, Some(30)] {
            for use_cfg in [false, true] {
                for env in [None, Some("10")] {
                    let want = match (flag, use_cfg, env) {
                        (Some(f), _, _) => f,
                        (None, true, _) => 20,
                        (None, false, Some(_)) => 10,
                        (None, false, None) => 0,
                    };
                    let flags = Flags {
                        seed: flag,
                        extent: None,
                    };
                    let s: GenWorldSettings = resolve("gen-world", &flags, use_cfg.then_some(cfg.path()), env).unwrap();
                    assert_eq!(s.seed, want, "flag {flag:?} config {use_cfg} env {env:?}");
                    assert_eq!(s.extent, if use_cfg { 80.0 } else { 100.0 });
                }
            }
        }
    }

    #[test]
    fn flag_beats_config_for_every_key() {
        let cfg = config_file(r#"{"extent": 80}"#);
        let flags = Flags {
            seed: None,
            extent: Some(60.0),
        };
        let s: GenWorldSettings = resolve("gen-world", &flags, Some(cfg.path()), None).unwrap();
        assert_eq!(s.extent, 60.0);
    }

    #[test]
    fn rejections_are_usage_errors() {
        let flags = Flags::default();
        let unknown = config_file(r#"{"sed": 1}"#);
        let e = resolve::<GenWorldSettings>("gen-world", &flags, Some(unknown.path()), None).unwrap_err();
        assert!(matches!(&e, CliError::Usage(m) if m.contains("\"sed\"") && m.contains("seed")));
        let not_object = config_file("[1, 2]");
        assert!(matches!(
            resolve::<GenWorldSettings>("gen-world", &flags, Some(not_object.path()), None),
            Err(CliError::Usage(_))
        ));
        let wrong_type = config_file(r#"{"seed": "x"}"#);
        assert!(matches!(
            resolve::<GenWorldSettings>("gen-world", &flags, Some(wrong_type.path()), None),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            resolve::<GenWorldSettings>("gen-world", &flags, None, Some("-3")),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            resolve::<GenWorldSettings>("gen-world", &flags, Some(Path::new("/no/such/file.json")), None),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn env_seed_ignored_without_seed_key() {
        let s: PlotSettings = resolve("plot", &Flags::default(), None, Some("not a number")).unwrap();
        assert_eq!(s, PlotSettings::default());
    }
}
