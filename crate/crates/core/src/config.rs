//! Experiment configuration: a line-oriented `key = value` format with
//! `[run <name>]` and `[sweep <name>]` section headers.
//!
//! `#` starts a comment. Inside a `[sweep]` section the axes `schedule`,
//! `stages`, `tau`, `b_micro`, `alpha`, `seed`, and `noise_sigma` may hold
//! comma lists; the section expands to the Cartesian product, one run per
//! point, named `<section>-<axis><value>-...`. All other keys take a
//! single value (`stage_dims` and `lr_decay_epochs` are comma lists by
//! nature, not sweep axes).
//!
//! Keys and defaults:
//!
//! ```text
//! schedule        = async            # nopipe | sync | async
//! stages          = 3                # M; ignored if stage_dims given
//! hidden_dim      = <data_d>         # width used to derive stage_dims
//! stage_dims      = 16,16,16,2       # [d_in, d_1, ..., d_M]
//! activation      = tanh             # identity | tanh | leaky_smooth:<slope>
//! loss            = (by data)        # mse | softmax_ce
//! tau             = inf              # device constant; inf = digital
//! saturation_limit = 0.9
//! saturation_policy = warn           # warn | abort
//! alpha           = 0.1
//! epochs          = 10               # or: updates = <n> (not both)
//! b_mini          = 128
//! b_micro         = 16
//! noise_sigma     = 0
//! seed            = 0
//! eval_every      = 50
//! eval_batch      = 256
//! lr_decay_epochs =                  # e.g. 100,200
//! amp_u           = 0.1
//! data            = teacher          # teacher | mixture | csv:<path>
//! data_n          = 2048
//! data_d          = 16
//! data_classes    = 2                # mixture only
//! teacher_stages  = 2                # teacher only
//! normalize       = true             # csv only
//! target_loss     =                  # optional, for speedup tables
//! target_accuracy =                  # optional
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::device::{DeviceConfig, SaturationPolicy};
use crate::error::{Error, Result};
use crate::model::{ActivationKind, LossKind};
use crate::schedule::ScheduleKind;
use crate::train::{RunConfig, RunLength};

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Teacher { n: usize, d: usize, stages: usize },
    Mixture { n: usize, d: usize, classes: usize },
    Csv { path: PathBuf, normalize: bool },
}

/// One fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run: RunConfig,
    pub data: DataSource,
    pub target_loss: Option<f64>,
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NamedRun {
    pub name: String,
    pub spec: RunSpec,
    /// Sweep section this run was expanded from, if any.
    pub from_sweep: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    pub runs: Vec<NamedRun>,
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.schedule == other.schedule
            && self.stage_dims == other.stage_dims
            && self.activation == other.activation
            && self.loss == other.loss
            && self.device.inv_tau() == other.device.inv_tau()
            && self.device.saturation_limit == other.device.saturation_limit
            && self.device.policy == other.device.policy
            && self.alpha == other.alpha
            && self.length == other.length
            && self.b_mini == other.b_mini
            && self.b_micro == other.b_micro
            && self.noise_sigma == other.noise_sigma
            && self.seed == other.seed
            && self.eval_every == other.eval_every
            && self.eval_batch == other.eval_batch
            && self.lr_decay_epochs == other.lr_decay_epochs
            && self.amp_u == other.amp_u
    }
}

const SWEEP_AXES: [&str; 7] = [
    "schedule",
    "stages",
    "tau",
    "b_micro",
    "alpha",
    "seed",
    "noise_sigma",
];

const KNOWN_KEYS: [&str; 24] = [
    "schedule",
    "stages",
    "hidden_dim",
    "stage_dims",
    "activation",
    "loss",
    "tau",
    "saturation_limit",
    "saturation_policy",
    "alpha",
    "epochs",
    "updates",
    "b_mini",
    "b_micro",
    "noise_sigma",
    "seed",
    "eval_every",
    "eval_batch",
    "lr_decay_epochs",
    "amp_u",
    "data",
    "data_n",
    "data_d",
    "data_classes",
];
const KNOWN_KEYS_EXTRA: [&str; 4] = ["teacher_stages", "normalize", "target_loss", "target_accuracy"];

fn known_key(key: &str) -> bool {
    KNOWN_KEYS.contains(&key) || KNOWN_KEYS_EXTRA.contains(&key)
}

#[derive(Debug)]
struct Section {
    kind: SectionKind,
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum SectionKind {
    Run,
    Sweep,
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let sections = split_sections(text)?;
    if sections.is_empty() {
        return Err(Error::config("config has no [run] or [sweep] sections"));
    }
    let mut runs = Vec::new();
    for section in &sections {
        match section.kind {
            SectionKind::Run => {
                let map = single_value_map(section)?;
                let spec = build_spec(&map, section)?;
                runs.push(NamedRun {
                    name: section.name.clone(),
                    spec,
                    from_sweep: None,
                });
            }
            SectionKind::Sweep => {
                for (suffix, map) in expand_sweep(section)? {
                    let spec = build_spec(&map, section)?;
                    let name = if suffix.is_empty() {
                        section.name.clone()
                    } else {
                        format!("{}-{}", section.name, suffix)
                    };
                    runs.push(NamedRun {
                        name,
                        spec,
                        from_sweep: Some(section.name.clone()),
                    });
                }
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for r in &runs {
        if !seen.insert(r.name.clone()) {
            return Err(Error::config(format!("duplicate run name '{}'", r.name)));
        }
    }
    Ok(ExperimentConfig { runs })
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {line_no}: unterminated section header")))?
                .trim();
            let (kind, name) = match inner.split_once(char::is_whitespace) {
                Some(("run", rest)) => (SectionKind::Run, rest.trim()),
                Some(("sweep", rest)) => (SectionKind::Sweep, rest.trim()),
                _ => {
                    return Err(Error::config(format!(
                        "line {line_no}: section must be '[run <name>]' or '[sweep <name>]'"
                    )))
                }
            };
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::config(format!(
                    "line {line_no}: section name must be a single word"
                )));
            }
            sections.push(Section {
                kind,
                name: name.to_string(),
                line: line_no,
                entries: Vec::new(),
            });
        } else if let Some((key, value)) = line.split_once('=') {
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {line_no}: empty key")));
            }
            if !known_key(&key) {
                return Err(Error::config(format!("line {line_no}: unknown key '{key}'")));
            }
            let section = sections.last_mut().ok_or_else(|| {
                Error::config(format!("line {line_no}: key '{key}' outside any section"))
            })?;
            if value.is_empty() {
                continue; // blank value = use default
            }
            section.entries.push((key, value, line_no));
        } else {
            return Err(Error::config(format!(
                "line {line_no}: expected 'key = value' or a section header"
            )));
        }
    }
    Ok(sections)
}

type KeyMap = HashMap<String, (String, usize)>;

fn single_value_map(section: &Section) -> Result<KeyMap> {
    let mut map = KeyMap::new();
    for (key, value, line) in &section.entries {
        if map.insert(key.clone(), (value.clone(), *line)).is_some() {
            return Err(Error::config(format!(
                "line {line}: key '{key}' set twice in section '{}'",
                section.name
            )));
        }
    }
    Ok(map)
}

fn expand_sweep(section: &Section) -> Result<Vec<(String, KeyMap)>> {
    let base = single_value_map(section)?;
    let mut axes: Vec<(&str, Vec<String>)> = Vec::new();
    for axis in SWEEP_AXES {
        if let Some((value, _)) = base.get(axis) {
            let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
            if values.len() > 1 {
                axes.push((axis, values));
            }
        }
    }
    let mut expansions = vec![(String::new(), base)];
    for (axis, values) in axes {
        let mut next = Vec::with_capacity(expansions.len() * values.len());
        for (suffix, map) in &expansions {
            for v in &values {
                let mut m = map.clone();
                let line = m.get(axis).map(|(_, l)| *l).unwrap_or(section.line);
                m.insert(axis.to_string(), (v.clone(), line));
                let mut s = suffix.clone();
                if !s.is_empty() {
                    s.push('-');
                }
                let _ = write!(s, "{axis}{v}");
                next.push((s, m));
            }
        }
        expansions = next;
    }
    Ok(expansions)
}

fn get_parsed<T: std::str::FromStr>(map: &KeyMap, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some((value, line)) => value.parse().map_err(|_| {
            Error::config(format!("line {line}: key '{key}': invalid value '{value}'"))
        }),
    }
}

fn get_list(map: &KeyMap, key: &str) -> Result<Option<Vec<usize>>> {
    match map.get(key) {
        None => Ok(None),
        Some((value, line)) => value
            .split(',')
            .map(|v| {
                v.trim().parse().map_err(|_| {
                    Error::config(format!("line {line}: key '{key}': invalid entry '{v}'"))
                })
            })
            .collect::<Result<Vec<usize>>>()
            .map(Some),
    }
}

fn build_spec(map: &KeyMap, section: &Section) -> Result<RunSpec> {
    // Data source first: it fixes the in/out dimensions.
    let data = match map.get("data").map(|(v, l)| (v.as_str(), *l)) {
        None | Some(("teacher", _)) => DataSource::Teacher {
            n: get_parsed(map, "data_n", 2048)?,
            d: get_parsed(map, "data_d", 16)?,
            stages: get_parsed(map, "teacher_stages", 2)?,
        },
        Some(("mixture", _)) => DataSource::Mixture {
            n: get_parsed(map, "data_n", 2048)?,
            d: get_parsed(map, "data_d", 16)?,
            classes: get_parsed(map, "data_classes", 2)?,
        },
        Some((v, line)) => match v.strip_prefix("csv:") {
            Some(path) if !path.trim().is_empty() => DataSource::Csv {
                path: PathBuf::from(path.trim()),
                normalize: get_parsed(map, "normalize", true)?,
            },
            _ => {
                return Err(Error::config(format!(
                    "line {line}: key 'data': expected teacher | mixture | csv:<path>, got '{v}'"
                )))
            }
        },
    };

    let io_dims = match &data {
        DataSource::Teacher { d, .. } => Some((*d, 1)),
        DataSource::Mixture { d, classes, .. } => Some((*d, *classes)),
        DataSource::Csv { .. } => None,
    };

    let stage_dims = match get_list(map, "stage_dims")? {
        Some(dims) => {
            if dims.len() < 2 {
                return Err(Error::config(
                    "key 'stage_dims': needs at least [d_in, d_out]".to_string(),
                ));
            }
            if let Some((_, line)) = map.get("stages") {
                let m: usize = get_parsed(map, "stages", 0)?;
                if m != dims.len() - 1 {
                    return Err(Error::config(format!(
                        "line {line}: key 'stages' ({m}) inconsistent with stage_dims ({} stages)",
                        dims.len() - 1
                    )));
                }
            }
            if let Some((d_in, d_out)) = io_dims {
                if dims[0] != d_in || *dims.last().unwrap() != d_out {
                    return Err(Error::config(format!(
                        "key 'stage_dims': {:?} does not match data dims in={d_in}, out={d_out}",
                        dims
                    )));
                }
            }
            dims
        }
        None => {
            let (d_in, d_out) = io_dims.ok_or_else(|| {
                Error::config(format!(
                    "section '{}': csv data requires explicit stage_dims",
                    section.name
                ))
            })?;
            let m: usize = get_parsed(map, "stages", 3)?;
            if m < 1 {
                return Err(Error::config("key 'stages': must be >= 1".to_string()));
            }
            let hidden: usize = get_parsed(map, "hidden_dim", d_in)?;
            let mut dims = vec![d_in];
            dims.extend(std::iter::repeat(hidden).take(m - 1));
            dims.push(d_out);
            dims
        }
    };

    let schedule = match map.get("schedule").map(|(v, l)| (v.as_str(), *l)) {
        None | Some(("async", _)) => ScheduleKind::Asynchronous,
        Some(("sync", _)) => ScheduleKind::Synchronous,
        Some(("nopipe", _)) => ScheduleKind::NoPipeline,
        Some((v, line)) => {
            return Err(Error::config(format!(
                "line {line}: key 'schedule': expected nopipe | sync | async, got '{v}'"
            )))
        }
    };

    let activation = match map.get("activation").map(|(v, l)| (v.as_str(), *l)) {
        None | Some(("tanh", _)) => ActivationKind::Tanh,
        Some(("identity", _)) => ActivationKind::Identity,
        Some((v, line)) => match v.strip_prefix("leaky_smooth:") {
            Some(s) => {
                let slope: f64 = s.trim().parse().map_err(|_| {
                    Error::config(format!("line {line}: key 'activation': bad slope '{s}'"))
                })?;
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::config(format!(
                        "line {line}: key 'activation': slope must be in (0,1), got {slope}"
                    )));
                }
                ActivationKind::LeakySmooth { slope }
            }
            None => {
                return Err(Error::config(format!(
                    "line {line}: key 'activation': expected identity | tanh | leaky_smooth:<slope>, got '{v}'"
                )))
            }
        },
    };

    let loss = match map.get("loss").map(|(v, l)| (v.as_str(), *l)) {
        None => match &data {
            DataSource::Mixture { .. } => LossKind::SoftmaxCrossEntropy,
            _ => LossKind::Mse,
        },
        Some(("mse", _)) => LossKind::Mse,
        Some(("softmax_ce", _)) => LossKind::SoftmaxCrossEntropy,
        Some((v, line)) => {
            return Err(Error::config(format!(
                "line {line}: key 'loss': expected mse | softmax_ce, got '{v}'"
            )))
        }
    };

    let device = match map.get("tau").map(|(v, l)| (v.as_str(), *l)) {
        None | Some(("inf", _)) | Some(("digital", _)) => DeviceConfig::digital(),
        Some((v, line)) => {
            let tau: f64 = v.parse().map_err(|_| {
                Error::config(format!("line {line}: key 'tau': invalid value '{v}'"))
            })?;
            DeviceConfig::analog(tau)
                .map_err(|e| Error::config(format!("line {line}: key 'tau': {e}")))?
        }
    };
    let policy = match map.get("saturation_policy").map(|(v, l)| (v.as_str(), *l)) {
        None | Some(("warn", _)) => SaturationPolicy::Warn,
        Some(("abort", _)) => SaturationPolicy::Abort,
        Some((v, line)) => {
            return Err(Error::config(format!(
                "line {line}: key 'saturation_policy': expected warn | abort, got '{v}'"
            )))
        }
    };
    let limit: f64 = get_parsed(map, "saturation_limit", 0.9)?;
    let device = device
        .with_saturation(limit, policy)
        .map_err(|e| Error::config(format!("key 'saturation_limit': {e}")))?;

    let length = match (map.get("epochs"), map.get("updates")) {
        (Some(_), Some((_, line))) => {
            return Err(Error::config(format!(
                "line {line}: keys 'epochs' and 'updates' are mutually exclusive"
            )))
        }
        (None, Some(_)) => RunLength::Updates(get_parsed(map, "updates", 0usize)?),
        (Some(_), None) => RunLength::Epochs(get_parsed(map, "epochs", 0usize)?),
        (None, None) => RunLength::Epochs(10),
    };
    match length {
        RunLength::Updates(0) | RunLength::Epochs(0) => {
            return Err(Error::config("run length must be positive"));
        }
        _ => {}
    }

    let b_mini: usize = get_parsed(map, "b_mini", 128)?;
    let b_micro: usize = get_parsed(map, "b_micro", 16)?;
    if b_micro == 0 || b_mini == 0 || b_mini % b_micro != 0 {
        return Err(Error::config(format!(
            "B_mini ({b_mini}) not divisible by B_micro ({b_micro})"
        )));
    }

    let run = RunConfig {
        schedule,
        stage_dims,
        activation,
        loss,
        device,
        alpha: get_parsed(map, "alpha", 0.1)?,
        length,
        b_mini,
        b_micro,
        noise_sigma: get_parsed(map, "noise_sigma", 0.0)?,
        seed: get_parsed(map, "seed", 0u64)?,
        eval_every: get_parsed(map, "eval_every", 50)?,
        eval_batch: get_parsed(map, "eval_batch", 256)?,
        lr_decay_epochs: get_list(map, "lr_decay_epochs")?.unwrap_or_default(),
        amp_u: get_parsed(map, "amp_u", 0.1)?,
        record_trajectory: false,
    };
    if !(run.alpha.is_finite() && run.alpha >= 0.0) {
        return Err(Error::config("key 'alpha': must be >= 0".to_string()));
    }
    if !(run.amp_u.is_finite() && run.amp_u >= 0.0) {
        return Err(Error::config("key 'amp_u': must be >= 0".to_string()));
    }

    Ok(RunSpec {
        run,
        data,
        target_loss: match map.get("target_loss") {
            None => None,
            Some(_) => Some(get_parsed(map, "target_loss", 0.0)?),
        },
        target_accuracy: match map.get("target_accuracy") {
            None => None,
            Some(_) => Some(get_parsed(map, "target_accuracy", 0.0)?),
        },
    })
}

/// Render a config back to text, one `[run]` section per resolved run.
/// Parsing the output yields the same runs.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    for named in &cfg.runs {
        let spec = &named.spec;
        let run = &spec.run;
        let _ = writeln!(out, "[run {}]", named.name);
        let _ = writeln!(out, "schedule = {}", run.schedule.name());
        let dims: Vec<String> = run.stage_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "stage_dims = {}", dims.join(","));
        let _ = match run.activation {
            ActivationKind::Identity => writeln!(out, "activation = identity"),
            ActivationKind::Tanh => writeln!(out, "activation = tanh"),
            ActivationKind::LeakySmooth { slope } => {
                writeln!(out, "activation = leaky_smooth:{slope}")
            }
        };
        let _ = writeln!(
            out,
            "loss = {}",
            match run.loss {
                LossKind::Mse => "mse",
                LossKind::SoftmaxCrossEntropy => "softmax_ce",
            }
        );
        let _ = if run.device.is_digital() {
            writeln!(out, "tau = inf")
        } else {
            writeln!(out, "tau = {}", run.device.tau())
        };
        let _ = writeln!(out, "saturation_limit = {}", run.device.saturation_limit);
        let _ = writeln!(
            out,
            "saturation_policy = {}",
            match run.device.policy {
                SaturationPolicy::Warn => "warn",
                SaturationPolicy::Abort => "abort",
            }
        );
        let _ = writeln!(out, "alpha = {}", run.alpha);
        let _ = match run.length {
            RunLength::Updates(u) => writeln!(out, "updates = {u}"),
            RunLength::Epochs(e) => writeln!(out, "epochs = {e}"),
        };
        let _ = writeln!(out, "b_mini = {}", run.b_mini);
        let _ = writeln!(out, "b_micro = {}", run.b_micro);
        let _ = writeln!(out, "noise_sigma = {}", run.noise_sigma);
        let _ = writeln!(out, "seed = {}", run.seed);
        let _ = writeln!(out, "eval_every = {}", run.eval_every);
        let _ = writeln!(out, "eval_batch = {}", run.eval_batch);
        if !run.lr_decay_epochs.is_empty() {
            let es: Vec<String> = run.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
            let _ = writeln!(out, "lr_decay_epochs = {}", es.join(","));
        }
        let _ = writeln!(out, "amp_u = {}", run.amp_u);
        let _ = match &spec.data {
            DataSource::Teacher { n, d, stages } => {
                writeln!(
                    out,
                    "data = teacher\ndata_n = {n}\ndata_d = {d}\nteacher_stages = {stages}"
                )
            }
            DataSource::Mixture { n, d, classes } => {
                writeln!(
                    out,
                    "data = mixture\ndata_n = {n}\ndata_d = {d}\ndata_classes = {classes}"
                )
            }
            DataSource::Csv { path, normalize } => {
                writeln!(out, "data = csv:{}\nnormalize = {normalize}", path.display())
            }
        };
        if let Some(t) = spec.target_loss {
            let _ = writeln!(out, "target_loss = {t}");
        }
        if let Some(t) = spec.target_accuracy {
            let _ = writeln!(out, "target_accuracy = {t}");
        }
        let _ = writeln!(out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_run_gets_defaults() {
        let cfg = parse_config_str(
            "[run baseline]\nschedule = async\nstages = 3\ndata = teacher\n",
        )
        .unwrap();
        assert_eq!(cfg.runs.len(), 1);
        let spec = &cfg.runs[0].spec;
        assert_eq!(spec.run.schedule, ScheduleKind::Asynchronous);
        assert_eq!(spec.run.alpha, 0.1);
        assert_eq!(spec.run.seed, 0);
        assert_eq!(spec.run.eval_every, 50);
        assert_eq!(spec.run.stage_dims, vec![16, 16, 16, 1]);
        assert_eq!(spec.run.loss, LossKind::Mse);
        assert!(spec.run.device.is_digital());
    }

    #[test]
    fn mixture_defaults_to_softmax() {
        let cfg = parse_config_str("[run c]\ndata = mixture\nstages = 2\n").unwrap();
        let spec = &cfg.runs[0].spec;
        assert_eq!(spec.run.loss, LossKind::SoftmaxCrossEntropy);
        assert_eq!(*spec.run.stage_dims.last().unwrap(), 2);
    }

    #[test]
    fn rejects_indivisible_batches() {
        let err = parse_config_str("[run x]\nb_mini = 10\nb_micro = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn rejects_unknown_key_naming_it() {
        let err = parse_config_str("[run x]\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn sweep_expansion_over_tau() {
        let cfg = parse_config_str(
            "[sweep taus]\nschedule = sync\nstages = 2\ntau = 3,10,inf\nseed = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.runs.len(), 3);
        let names: Vec<&str> = cfg.runs.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, vec!["taus-tau3", "taus-tau10", "taus-tauinf"]);
        assert!((cfg.runs[0].spec.run.device.tau() - 3.0).abs() < 1e-12);
        assert!(cfg.runs[2].spec.run.device.is_digital());
        assert!(cfg.runs.iter().all(|r| r.from_sweep.as_deref() == Some("taus")));
    }

    #[test]
    fn sweep_cartesian_product() {
        let cfg = parse_config_str(
            "[sweep grid]\nschedule = nopipe,sync,async\nseed = 0,1\nstages = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.runs.len(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = parse_config_str("[run a]\nstages = 1\n[run a]\nstages = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn round_trip_is_semantically_idempotent() {
        let text = "
[run one]
schedule = sync
stage_dims = 16,8,2
data = mixture
data_n = 512
tau = 7.5
alpha = 0.05
epochs = 3
lr_decay_epochs = 2
target_loss = 0.4

[sweep grid]
schedule = nopipe,async
stages = 2
data = teacher
updates = 40
";
        let cfg = parse_config_str(text).unwrap();
        let cfg2 = parse_config_str(&serialize_config(&cfg)).unwrap();
        assert_eq!(cfg.runs.len(), cfg2.runs.len());
        for (a, b) in cfg.runs.iter().zip(&cfg2.runs) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.spec, b.spec);
        }
    }

    #[test]
    fn csv_requires_stage_dims() {
        let err = parse_config_str("[run c]\ndata = csv:foo.csv\n").unwrap_err().to_string();
        assert!(err.contains("stage_dims"), "{err}");
        let ok = parse_config_str("[run c]\ndata = csv:foo.csv\nstage_dims = 4,3,2\n");
        assert!(ok.is_ok());
    }

    #[test]
    fn epochs_and_updates_exclusive() {
        let err = parse_config_str("[run x]\nepochs = 2\nupdates = 10\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("mutually exclusive"), "{err}");
    }
}
