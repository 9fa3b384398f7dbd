//! Delayed cue-recall task: a class cue on channels 0–4 (A) or 5–9 (B),
//! a silent delay, then a recall cue on channels 10–14. The label is
//! supervised during recall only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{HyprError, Result};
use crate::training::loss::Target;

pub const CUE_CHANNELS: usize = 15;
const GROUP: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CueTaskSpec {
    pub n_samples: usize,
    pub t_pat: usize,
    pub t_delay: usize,
    pub p_active: f64,
    pub seed: u64,
}

impl Default for CueTaskSpec {
    fn default() -> Self {
        CueTaskSpec {
            n_samples: 256,
            t_pat: 20,
            t_delay: 200,
            p_active: 0.5,
            seed: 0,
        }
    }
}

impl CueTaskSpec {
    pub fn t_len(&self) -> usize {
        2 * self.t_pat + self.t_delay
    }

    /// First recall step; the loss and prediction start here.
    pub fn recall_start(&self) -> usize {
        self.t_pat + self.t_delay
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.t_pat == 0 {
            return Err(HyprError::config(
                "cue task needs at least one sample and a pattern of at least one step",
            ));
        }
        if !(0.0..=1.0).contains(&self.p_active) {
            return Err(HyprError::config("cue p_active must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generates the dataset. Classes are exactly balanced (an odd count gives
/// class A the extra sample) and the sample order is shuffled.
pub fn generate_cue_dataset(spec: &CueTaskSpec) -> Result<Dataset<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<usize> = (0..spec.n_samples)
        .map(|n| (n >= spec.n_samples.div_ceil(2)) as usize)
        .collect();
    classes.shuffle(&mut rng);
    let t_len = spec.t_len();
    let recall = spec.recall_start();
    let samples = classes
        .into_iter()
        .map(|c| {
            let mut x = vec![0.0; t_len * CUE_CHANNELS];
            let mut fill = |t0: usize, ch0: usize, rng: &mut ChaCha8Rng| {
                for t in t0..t0 + spec.t_pat {
                    for ch in ch0..ch0 + GROUP {
                        if rng.gen_bool(spec.p_active) {
                            x[t * CUE_CHANNELS + ch] = 1.0;
                        }
                    }
                }
            };
            fill(0, c * GROUP, &mut rng);
            fill(recall, 2 * GROUP, &mut rng);
            Sample {
                x,
                t_len,
                target: Target::Class(c),
            }
        })
        .collect();
    Ok(Dataset {
        name: "cue".into(),
        d: CUE_CHANNELS,
        n_classes: 2,
        t0: Some(recall),
        samples,
    })
}
