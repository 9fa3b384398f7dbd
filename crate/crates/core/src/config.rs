//! Run configuration: a TOML file with `[run]`, `[data]`, `[loss]`,
//! `[prediction]`, `[network]` and `[output]` sections. Keys left out are
//! filled from a preset chosen by the dataset and hidden model.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::cue::{generate_cue_dataset, CueTaskSpec};
use crate::data::idx::load_pixel_sequences;
use crate::data::{split_dataset, Dataset};
use crate::error::{HyprError, Result};
use crate::network::{Dist, LayerSpec, NetworkConfig};
use crate::neuron::{ModelKind, Surrogate};
use crate::scalar::Precision;
use crate::training::fit::FitConfig;
use crate::training::loss::{LossKind, LossSpec, PredictionMode};
use crate::training::optim::{AdamConfig, Schedule};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seed: Option<u64>,
    precision: Option<Precision>,
    model: Option<ModelKind>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lambda: Option<usize>,
    lr: Option<f64>,
    schedule: Option<Schedule>,
    /// Global-norm clipping threshold; 0 disables clipping.
    clip: Option<f64>,
    stop_at_train_acc: Option<f64>,
    record_timing: Option<bool>,
    workers: Option<usize>,
    adam: Option<AdamConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DataKind {
    Cue,
    Idx,
    File,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    kind: DataKind,
    // cue
    n_samples: Option<usize>,
    t_pat: Option<usize>,
    t_delay: Option<usize>,
    p_active: Option<f64>,
    seed: Option<u64>,
    // idx
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    limit: Option<usize>,
    // file
    path: Option<PathBuf>,
    split: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossSection {
    kind: Option<LossKind>,
    t0: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionSection {
    mode: Option<PredictionMode>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadoutSection {
    #[serde(default)]
    init: Option<crate::network::LayerInit>,
    #[serde(default)]
    constants: Option<crate::neuron::ModelConstants>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkSection {
    hidden: Option<Vec<LayerSpec>>,
    readout: Option<ReadoutSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    metrics: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    run: RunSection,
    data: DataSection,
    #[serde(default)]
    loss: LossSection,
    #[serde(default)]
    prediction: PredictionSection,
    #[serde(default)]
    network: NetworkSection,
    #[serde(default)]
    output: OutputSection,
}

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Cue(CueTaskSpec),
    /// IDX image/label pairs read as pixel sequences.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
        limit: Option<usize>,
    },
    /// A dataset container written by `gen`.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub workers: Option<usize>,
    pub fit: FitConfig,
    pub hidden: Vec<LayerSpec>,
    pub readout: LayerSpec,
    pub data: DataSource,
    pub split: Vec<f64>,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Take the first supervised step from the dataset rather than `fit.loss.t0`.
    pub t0_from_data: bool,
}

/// Defaults for one dataset/model pairing.
#[derive(Clone, Debug)]
pub struct Preset {
    pub lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub lambda: usize,
    pub prediction: PredictionMode,
    pub t0: Option<usize>,
    pub hidden: Vec<LayerSpec>,
    pub readout_tau: Dist,
}

fn layer(kind: ModelKind, m: usize, surrogate: Surrogate) -> LayerSpec {
    let mut l = LayerSpec::new(kind, m, true);
    l.constants.surrogate = surrogate;
    l
}

/// Hyperparameters from the published tables, with the approximate-gradient
/// learning rates where they differ. Widths of the cue preset are reduced
/// to desk scale.
pub fn preset(data_is_cue: bool, model: ModelKind) -> Result<Preset> {
    let p = match (data_is_cue, model) {
        (true, ModelKind::Brf) => {
            let mut h = layer(ModelKind::Brf, 64, Surrogate::Slayer { alpha: 1.0, c: 0.2 });
            h.init.omega = Dist::Uniform([0.01, 10.0]);
            h.init.b_offset = Dist::Uniform([1e-9, 1e-4]);
            Preset {
                lr: 0.01,
                schedule: Schedule::Constant,
                epochs: 200,
                batch_size: 128,
                clip: Some(10.0),
                lambda: 110,
                prediction: PredictionMode::MeanOverSequence,
                t0: None,
                hidden: vec![h],
                readout_tau: Dist::Uniform([15.0, 25.0]),
            }
        }
        (false, ModelKind::Brf) => {
            let mut h = layer(ModelKind::Brf, 256, Surrogate::double_gaussian());
            h.init.omega = Dist::Uniform([15.0, 50.0]);
            h.init.b_offset = Dist::Uniform([0.1, 1.0]);
            Preset {
                lr: 0.01,
                schedule: Schedule::Linear,
                epochs: 300,
                batch_size: 256,
                clip: Some(1.0),
                lambda: 112,
                prediction: PredictionMode::MeanOverSequence,
                t0: Some(500),
                hidden: vec![h],
                readout_tau: Dist::Uniform([15.0, 25.0]),
            }
        }
        (false, ModelKind::Seadlif) => {
            let h = layer(ModelKind::Seadlif, 360, Surrogate::slayer());
            Preset {
                lr: 0.001,
                schedule: Schedule::Constant,
                epochs: 300,
                batch_size: 512,
                clip: Some(10.0),
                lambda: 112,
                prediction: PredictionMode::SumOfSoftmax,
                t0: Some(500),
                hidden: vec![h.clone(), h],
                readout_tau: Dist::Const(15.0),
            }
        }
        (false, ModelKind::Alif) => {
            let mut h = layer(ModelKind::Alif, 256, Surrogate::slayer());
            h.init.tau_u = Dist::Normal([20.0, 5.0]);
            h.init.tau_a = Dist::Normal([200.0, 25.0]);
            Preset {
                lr: 0.003,
                schedule: Schedule::Constant,
                epochs: 300,
                batch_size: 256,
                clip: Some(10.0),
                lambda: 112,
                prediction: PredictionMode::SumOfSoftmax,
                t0: Some(0),
                hidden: vec![h.clone(), h],
                readout_tau: Dist::Const(20.0),
            }
        }
        (cue, m) => {
            return Err(HyprError::config(format!(
                "no preset for model {m} on the {} data; set [network] and [run] explicitly",
                if cue { "cue" } else { "pixel" }
            )))
        }
    };
    Ok(p)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

/// Parses and validates a configuration. Relative paths are kept as
/// written; [`load_config`] resolves them against the file's directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| HyprError::ConfigLine {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        msg: e.message().trim().to_string(),
    })?;
    resolve(file, text)
}

fn field_line(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.starts_with(key) && l[key.len()..].trim_start().starts_with('=')
        })
        .map_or(0, |i| i + 1)
}

fn resolve(f: ConfigFile, text: &str) -> Result<RunConfig> {
    let bad = |key: &str, msg: String| HyprError::ConfigLine {
        line: field_line(text, key),
        msg,
    };
    let r = &f.run;
    let d = &f.data;
    let seed = r.seed.unwrap_or(0);
    let is_cue = matches!(d.kind, DataKind::Cue);
    let model = r
        .model
        .or_else(|| {
            f.network
                .hidden
                .as_ref()
                .and_then(|h| h.first())
                .map(|l| l.kind)
        })
        .unwrap_or(ModelKind::Brf);
    let cue_like = is_cue || matches!(d.kind, DataKind::File);
    // With explicit hidden layers only the run-level values come from the
    // preset, so any model may borrow the BRF table.
    let preset = match (preset(cue_like, model), &f.network.hidden) {
        (Ok(p), _) => p,
        (Err(_), Some(_)) => preset(cue_like, ModelKind::Brf)?,
        (Err(e), None) => return Err(bad("model", e.to_string())),
    };

    let data = match d.kind {
        DataKind::Cue => {
            let spec = CueTaskSpec {
                n_samples: d.n_samples.unwrap_or(256),
                t_pat: d.t_pat.unwrap_or(20),
                t_delay: d.t_delay.unwrap_or(200),
                p_active: d.p_active.unwrap_or(0.5),
                seed: d.seed.unwrap_or(seed),
            };
            spec.validate().map_err(|e| bad("kind", e.to_string()))?;
            DataSource::Cue(spec)
        }
        DataKind::Idx => {
            let images = d
                .images
                .clone()
                .ok_or_else(|| bad("kind", "idx data needs `images`".into()))?;
            let labels = d
                .labels
                .clone()
                .ok_or_else(|| bad("kind", "idx data needs `labels`".into()))?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Some((i.clone(), l.clone())),
                (None, None) => None,
                _ => {
                    return Err(bad(
                        "test_images",
                        "give both `test_images` and `test_labels`".into(),
                    ))
                }
            };
            DataSource::Idx {
                images,
                labels,
                test,
                limit: d.limit,
            }
        }
        DataKind::File => DataSource::File(
            d.path
                .clone()
                .ok_or_else(|| bad("kind", "file data needs `path`".into()))?,
        ),
    };
    let split = d.split.clone().unwrap_or_else(|| match data {
        DataSource::Idx { test: Some(_), .. } => vec![0.9, 0.1],
        DataSource::Idx { test: None, .. } => vec![0.8, 0.1, 0.1],
        _ => vec![0.8, 0.1, 0.1],
    });
    if split.len() < 2
        || split.len() > 3
        || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        || split.iter().any(|f| *f < 0.0)
    {
        return Err(bad(
            "split",
            "split needs 2 or 3 non-negative fractions summing to 1".into(),
        ));
    }

    let t0 = match (f.loss.t0, &data) {
        (Some(t), _) => t,
        (None, DataSource::Cue(spec)) => spec.recall_start(),
        (None, _) => preset.t0.unwrap_or(0),
    };
    let lambda = r.lambda.unwrap_or(preset.lambda);
    if lambda == 0 {
        return Err(bad("lambda", "lambda must be at least 1".into()));
    }
    let clip = match r.clip {
        Some(0.0) => None,
        Some(c) if c > 0.0 => Some(c),
        Some(c) => {
            return Err(bad(
                "clip",
                format!("clip must be positive or 0 to disable, got {c}"),
            ))
        }
        None => preset.clip,
    };
    let fit = FitConfig {
        epochs: r.epochs.unwrap_or(preset.epochs),
        batch_size: r.batch_size.unwrap_or(preset.batch_size),
        lambda,
        lr: r.lr.unwrap_or(preset.lr),
        schedule: r.schedule.unwrap_or(preset.schedule),
        clip,
        adam: r.adam.unwrap_or_default(),
        seed,
        loss: LossSpec::new(f.loss.kind.unwrap_or_default(), t0),
        prediction: f.prediction.mode.unwrap_or(preset.prediction),
        stop_at_train_acc: r.stop_at_train_acc,
        record_timing: r.record_timing.unwrap_or(false),
        fault: Default::default(),
    };
    fit.validate().map_err(|e| bad("epochs", e.to_string()))?;
    if r.workers == Some(0) {
        return Err(bad("workers", "workers must be at least 1".into()));
    }

    let hidden = f.network.hidden.clone().unwrap_or(preset.hidden);
    let mut readout = LayerSpec::new(ModelKind::Li, 0, false);
    readout.init.tau_out = preset.readout_tau;
    if let Some(ro) = &f.network.readout {
        if let Some(i) = &ro.init {
            readout.init = i.clone();
        }
        if let Some(c) = &ro.constants {
            readout.constants = c.clone();
        }
    }
    // Topology is checked with a placeholder width until the data is known.
    NetworkConfig {
        d_in: 1,
        hidden: hidden.clone(),
        readout: LayerSpec {
            m: 1,
            ..readout.clone()
        },
    }
    .validate()
    .map_err(|e| bad("kind", e.to_string()))?;

    Ok(RunConfig {
        seed,
        precision: r.precision.unwrap_or(Precision::F64),
        workers: r.workers,
        fit,
        hidden,
        readout,
        data,
        split,
        metrics: f.output.metrics.clone(),
        checkpoint: f.output.checkpoint.clone(),
        t0_from_data: f.loss.t0.is_none() && matches!(d.kind, DataKind::File),
    })
}

/// Reads a configuration file, resolving relative paths against its
/// directory and checking that every referenced input file exists.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HyprError::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    match &mut cfg.data {
        DataSource::Idx {
            images,
            labels,
            test,
            ..
        } => {
            fix(images);
            fix(labels);
            if let Some((i, l)) = test {
                fix(i);
                fix(l);
            }
        }
        DataSource::File(p) => fix(p),
        DataSource::Cue(_) => {}
    }
    if let Some(p) = &mut cfg.metrics {
        fix(p);
    }
    if let Some(p) = &mut cfg.checkpoint {
        fix(p);
    }
    for p in cfg.input_files() {
        if !p.exists() {
            return Err(HyprError::io(
                p,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "referenced data file does not exist",
                ),
            ));
        }
    }
    Ok(cfg)
}

/// Train, validation and (optional) test sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset<f64>,
    pub valid: Dataset<f64>,
    pub test: Option<Dataset<f64>>,
}

impl RunConfig {
    pub fn input_files(&self) -> Vec<&Path> {
        match &self.data {
            DataSource::Idx {
                images,
                labels,
                test,
                ..
            } => {
                let mut v = vec![images.as_path(), labels.as_path()];
                if let Some((i, l)) = test {
                    v.push(i);
                    v.push(l);
                }
                v
            }
            DataSource::File(p) => vec![p.as_path()],
            DataSource::Cue(_) => Vec::new(),
        }
    }

    /// Loads or generates the data and splits it.
    pub fn load_data(&self) -> Result<Splits> {
        let (all, test) = match &self.data {
            DataSource::Cue(spec) => (generate_cue_dataset(spec)?, None),
            DataSource::Idx {
                images,
                labels,
                test,
                limit,
            } => {
                let t = match test {
                    Some((i, l)) => Some(load_pixel_sequences(i, l, None)?),
                    None => None,
                };
                (load_pixel_sequences(images, labels, *limit)?, t)
            }
            DataSource::File(p) => (crate::container::load_dataset(p)?, None),
        };
        all.validate()?;
        let mut parts = split_dataset(&all, &self.split, self.seed)?.into_iter();
        let train = parts.next().expect("split");
        let valid = parts.next().expect("split");
        let test = parts.next().or(test);
        Ok(Splits { train, valid, test })
    }

    /// Training settings with the supervised window taken from `data` when
    /// the configuration leaves it open.
    pub fn fit_for<T: crate::scalar::Scalar>(&self, data: &Dataset<T>) -> FitConfig {
        let mut fit = self.fit.clone();
        if self.t0_from_data {
            fit.loss.t0 = data.t0.unwrap_or(0);
        }
        fit
    }

    /// Replaces the run seed. Generated data follows unless the
    /// configuration pinned its own seed.
    pub fn reseed(&mut self, seed: u64) {
        if let DataSource::Cue(spec) = &mut self.data {
            if spec.seed == self.seed {
                spec.seed = seed;
            }
        }
        self.seed = seed;
        self.fit.seed = seed;
    }

    /// Network topology for data with `d` channels and `n_classes` classes.
    pub fn network_config(&self, d: usize, n_classes: usize) -> NetworkConfig {
        NetworkConfig {
            d_in: d,
            hidden: self.hidden.clone(),
            readout: LayerSpec {
                m: n_classes,
                ..self.readout.clone()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nkind = \"cue\"\n";

    #[test]
    fn minimal_config_uses_the_preset() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.fit.lr, 0.01);
        assert_eq!(c.fit.batch_size, 128);
        assert_eq!(c.fit.clip, Some(10.0));
        assert_eq!(c.fit.lambda, 110);
        assert_eq!(c.fit.loss.t0, 220);
        assert_eq!(c.hidden.len(), 1);
        assert_eq!(c.hidden[0].kind, ModelKind::Brf);
        assert_eq!(
            c.hidden[0].constants.surrogate,
            Surrogate::Slayer { alpha: 1.0, c: 0.2 }
        );
        assert_eq!(c.split, vec![0.8, 0.1, 0.1]);
        assert_eq!(c.precision, Precision::F64);
    }

    #[test]
    fn pixel_presets_follow_the_model() {
        let base = "[data]\nkind = \"idx\"\nimages = \"a\"\nlabels = \"b\"\n";
        let c = parse_config(&format!("[run]\nmodel = \"alif\"\n{base}")).unwrap();
        assert_eq!((c.fit.lr, c.hidden.len(), c.fit.loss.t0), (0.003, 2, 0));
        let c = parse_config(&format!("[run]\nmodel = \"brf\"\n{base}")).unwrap();
        assert_eq!(
            (c.fit.schedule, c.fit.clip, c.fit.loss.t0),
            (Schedule::Linear, Some(1.0), 500)
        );
    }

    #[test]
    fn explicit_values_win() {
        let text = r#"
[run]
seed = 4
lr = 0.05
clip = 0
lambda = 7
precision = "f32"

[data]
kind = "cue"
t_delay = 10
split = [0.5, 0.5]

[loss]
t0 = 3

[[network.hidden]]
kind = "alif"
m = 5
recurrent = false

[network.hidden.init]
tau_a = { const = 100.0 }
"#;
        let c = parse_config(text).unwrap();
        assert_eq!(
            (c.seed, c.fit.lr, c.fit.clip, c.fit.lambda),
            (4, 0.05, None, 7)
        );
        assert_eq!(c.fit.loss.t0, 3);
        assert_eq!(c.hidden[0].init.tau_a, Dist::Const(100.0));
        assert_eq!(c.precision, Precision::F32);
        let DataSource::Cue(spec) = c.data else {
            panic!()
        };
        assert_eq!((spec.t_delay, spec.seed), (10, 4));
    }

    #[test]
    fn reseed_follows_unpinned_data() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.reseed(9);
        assert_eq!((c.seed, c.fit.seed), (9, 9));
        assert!(matches!(
            c.data,
            DataSource::Cue(CueTaskSpec { seed: 9, .. })
        ));
        let mut c = parse_config("[data]\nkind = \"cue\"\nseed = 3\n").unwrap();
        c.reseed(9);
        assert!(matches!(
            c.data,
            DataSource::Cue(CueTaskSpec { seed: 3, .. })
        ));
    }

    fn line_err(text: &str) -> (usize, String) {
        match parse_config(text).unwrap_err() {
            HyprError::ConfigLine { line, msg } => (line, msg),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn errors_name_the_line() {
        let (line, _) = line_err("[data]\nkind = \"cue\"\n[run]\nlambda = 0\n");
        assert_eq!(line, 4);
        let (line, msg) = line_err("[data]\nkind = \"cue\"\n[run]\nfoo = 1\n");
        assert_eq!(line, 4);
        assert!(msg.contains("foo"), "{msg}");
        let (line, _) = line_err("[data]\nkind = \"cue\"\nkind = \"cue\"\n");
        assert_eq!(line, 3);
        let (line, _) = line_err("[data]\nkind = \"cue\"\n[run]\nepochs = \"ten\"\n");
        assert_eq!(line, 4);
        assert!(parse_config("[run]\nseed = 1\n").is_err());
    }

    #[test]
    fn missing_input_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[data]\nkind = \"file\"\npath = \"nope.bin\"\n").unwrap();
        let e = load_config(&p).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("nope.bin"));
    }

    #[test]
    fn cue_data_splits() {
        let c = parse_config("[data]\nkind = \"cue\"\nt_delay = 5\n").unwrap();
        let s = c.load_data().unwrap();
        assert_eq!(
            (s.train.len(), s.valid.len(), s.test.as_ref().unwrap().len()),
            (204, 25, 27)
        );
        let net = c.network_config(s.train.d, s.train.n_classes);
        assert_eq!(net.readout.m, 2);
    }
}
