//! Training loop for the per-pixel labeling net: cycle through a scene
//! source, sample pixel pairs, take one SGD step on the variational loss per
//! scene, and log a loss trace.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{foreground_mask, resize_nearest, GroundTruthMap, ImageGrid};
use crate::losses::{total_loss_with_terms, LossConfig};
use crate::net::{self, Checkpoint, NetConfig, OptState, ParamSet};
use crate::sampling::{sample_pairs, SamplerConfig};
use crate::seedmix::mix64;

/// Anything that can hand out (image, ground truth) scenes by index.
pub trait SceneSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn scene(&self, index: usize) -> Result<(ImageGrid, GroundTruthMap)>;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptHyper {
    fn default() -> Self {
        OptHyper { learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Seeds the per-step pair sampling; net initialization has its own seed
    /// inside `net`.
    pub master_seed: u64,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub opt: OptHyper,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            master_seed: 0,
            net: NetConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            opt: OptHyper::default(),
            checkpoint_interval: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("training requires at least one step"));
        }
        if self.log_interval == 0 {
            return Err(Error::domain("log interval must be at least 1"));
        }
        self.net.validate_predictor()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        Ok(())
    }
}

/// One logged step of the loss trace (per-term values before the update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub binary: f64,
    pub pi: f64,
    pub ms: f64,
    pub quant: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub opt: OptState,
    pub trace: Vec<TraceRow>,
    pub steps_run: usize,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,binary,pi,ms,quant,total\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            row.step, row.binary, row.pi, row.ms, row.quant, row.total
        ));
    }
    out
}

/// Run the full training loop.  When `out_dir` is given, checkpoints and the
/// trace CSV are written there.
pub fn train(
    tc: &TrainConfig,
    source: &dyn SceneSource,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if source.is_empty() {
        return Err(Error::empty_domain("scene source has no scenes"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let factor = tc.net.downsample_factor()?;

    let mut params = net::init(&tc.net)?;
    let mut opt =
        OptState::new(&params, tc.opt.learning_rate, tc.opt.momentum, tc.opt.weight_decay)?;
    let mut trace = Vec::new();

    for step in 0..tc.steps {
        let (image, gt) = source.scene(step % source.len())?;
        if image.channels() != tc.net.input_channels {
            return Err(Error::dimension(format!(
                "scene has {} channels but the net expects {}",
                image.channels(),
                tc.net.input_channels
            )));
        }
        let gt_small = resize_nearest(&gt, factor)?;

        let (f, tape) = net::forward(&params, &image)?;
        let mut sampler = tc.sampler.clone();
        sampler.seed = mix64(tc.master_seed, step as u64);
        let pairs = if foreground_mask(&gt_small).count() == 0 {
            // all-background scene: the pairwise term has nothing to compare
            crate::sampling::PairList { pairs: Vec::new() }
        } else {
            sample_pairs(&gt_small, &sampler)?
        };

        let (lvg, terms) = total_loss_with_terms(&f, &gt_small, &pairs, &tc.loss)?;
        for (name, v) in [
            ("binary", terms.binary),
            ("pairwise", terms.pi),
            ("smoothness", terms.ms),
            ("quantization", terms.quant),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "{name} loss became non-finite at step {step}"
                )));
            }
        }

        if step % tc.log_interval == 0 || step + 1 == tc.steps {
            trace.push(TraceRow {
                step,
                binary: terms.binary,
                pi: terms.pi,
                ms: terms.ms,
                quant: terms.quant,
                total: terms.total,
            });
        }

        let grads = net::backward(&params, &tape, &lvg.grad)?;
        net::sgd_step(&mut params, &grads, &mut opt)?;

        if let Some(dir) = out_dir {
            let due = tc.checkpoint_interval > 0 && (step + 1) % tc.checkpoint_interval == 0;
            if due && step + 1 != tc.steps {
                let ckpt = Checkpoint {
                    params: params.clone(),
                    opt: opt.clone(),
                    step: (step + 1) as u64,
                };
                net::write_checkpoint(&dir.join(format!("ckpt_step_{:06}.ckpt", step + 1)), &ckpt)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        let ckpt =
            Checkpoint { params: params.clone(), opt: opt.clone(), step: tc.steps as u64 };
        net::write_checkpoint(&dir.join("checkpoint.ckpt"), &ckpt)?;
        fs::write(dir.join("trace.csv"), trace_to_csv(&trace))?;
    }
    Ok(TrainOutcome { params, opt, trace, steps_run: tc.steps })
}
