//! End-to-end training from a [`RunConfig`]: data, network, epoch loop,
//! metrics lines and the best checkpoint.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::save_checkpoint;
use crate::error::{HyprError, Result};
use crate::network::Network;
use crate::scalar::{Precision, Scalar};
use crate::training::fit::{evaluate_samples, fit};

/// Final line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
    pub final_train_acc: f64,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
}

fn line<W: Write, S: Serialize>(out: &mut W, v: &S) -> Result<()> {
    let mut s = serde_json::to_string(v).map_err(|e| HyprError::config(e.to_string()))?;
    s.push('\n');
    out.write_all(s.as_bytes())
        .map_err(|e| HyprError::io(std::path::Path::new("<metrics>"), e))
}

fn typed<T: Scalar, W: Write>(cfg: &RunConfig, metrics: &mut W) -> Result<RunSummary> {
    let splits = cfg.load_data()?;
    let train = splits.train.cast::<T>();
    let valid = splits.valid.cast::<T>();
    let fit_cfg = cfg.fit_for(&train);
    let mut net: Network<T> =
        Network::init(&cfg.network_config(train.d, train.n_classes), cfg.seed)?;
    let res = fit(&mut net, &train.samples, &valid.samples, &fit_cfg, |m| {
        line(metrics, m)
    })?;
    let (test_loss, test_acc) = match &splits.test {
        Some(t) if !t.is_empty() => {
            let t = t.cast::<T>();
            let (l, a) = evaluate_samples(
                &res.best,
                &t.samples,
                &fit_cfg.loss,
                fit_cfg.prediction,
                fit_cfg.lambda,
            )?;
            (Some(l), Some(a))
        }
        _ => (None, None),
    };
    if let Some(p) = &cfg.checkpoint {
        save_checkpoint(p, &res.best, Some(&res.adam))?;
    }
    let summary = RunSummary {
        epochs_run: res.history.len(),
        best_epoch: res.best_epoch,
        best_valid_acc: res.best_acc,
        final_train_acc: res.history.last().map_or(0.0, |m| m.train_acc),
        test_acc,
        test_loss,
    };
    line(metrics, &summary)?;
    Ok(summary)
}

/// Trains as configured, writing one JSON line per epoch and a final
/// [`RunSummary`] line to `metrics`.
pub fn train_run<W: Write>(cfg: &RunConfig, metrics: &mut W) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => typed::<f32, W>(cfg, metrics),
        Precision::F64 => typed::<f64, W>(cfg, metrics),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::container::load_checkpoint;

    const CFG: &str = r#"
[run]
epochs = 2
lambda = 8
batch_size = 4

[data]
kind = "cue"
n_samples = 16
t_delay = 5

[[network.hidden]]
kind = "alif"
m = 6
"#;

    #[test]
    fn metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(CFG).unwrap();
        cfg.checkpoint = Some(dir.path().join("best.ckpt"));
        let mut out = Vec::new();
        let s = train_run(&cfg, &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(s.epochs_run, 2);
        assert!(s.test_acc.is_some());
        let ck = load_checkpoint::<f64>(cfg.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.net.layers[0].m, 6);

        let mut again = Vec::new();
        train_run(&cfg, &mut again).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn single_precision_run() {
        let mut cfg = parse_config(CFG).unwrap();
        cfg.precision = Precision::F32;
        let mut out = Vec::new();
        assert_eq!(train_run(&cfg, &mut out).unwrap().epochs_run, 2);
    }
}
