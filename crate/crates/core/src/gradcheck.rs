//! Central finite-difference check of the full model's parameter
//! gradients at 64-bit precision.
//!
//! A coordinate whose difference quotient changes between step `h` and
//! `h/2` has a ReLU or max-pool switch inside the probe interval. Such
//! coordinates are skipped and counted rather than compared.

use rand::seq::index::sample;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::landmark::{LandmarkFrame, NUM_LANDMARKS};
use crate::layers::Mode;
use crate::model::{ModelParams, Network};
use crate::tensor::Tensor;
use crate::training::derived_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates probed per parameter tensor; `None` probes all of them.
    pub per_tensor: Option<usize>,
    pub batch: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            per_tensor: Some(2),
            batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    /// Coordinates skipped because a kink lay inside the probe interval.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// True when the loss has a slope discontinuity inside `[x - h, x + h]`.
///
/// A smooth loss gives equal central quotients at `h` and `h/2`, and its
/// second difference at `h` is twice that at `h/2`. A kink at `x` itself
/// breaks the second relation, a kink elsewhere in the interval the first.
pub fn kinked(f0: f64, (fm, fp): (f64, f64), (fm2, fp2): (f64, f64), h: f64, floor: f64) -> bool {
    let central = (fp - fm) / (2.0 * h);
    let central_half = (fp2 - fm2) / h;
    let s1 = (fp + fm - 2.0 * f0) / h;
    let s2 = (fp2 + fm2 - 2.0 * f0) / (h / 2.0);
    let scale = central.abs().max(floor);
    (central - central_half).abs() > 1e-5 * scale || (s1 - 2.0 * s2).abs() > 1e-5 * scale
}

/// Random clip batch with landmark tracks scattered over the frame.
pub fn random_inputs(config: &ModelConfig, batch: usize, seed: u64) -> Result<(Tensor<f64>, Vec<Vec<LandmarkFrame>>, Vec<usize>)> {
    let mut rng = derived_rng(&[seed, 0x6763]);
    let (t, h, w, c) = (config.frames, config.height, config.width, config.channels);
    let data = (0..batch * t * h * w * c).map(|_| rng.random::<f64>()).collect();
    let clips = Tensor::new(&[batch, t, h, w, c], data)?;
    let landmarks = (0..batch)
        .map(|_| {
            (0..t)
                .map(|_| {
                    let pts = (0..NUM_LANDMARKS)
                        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
                        .collect();
                    LandmarkFrame::new(pts, (h, w))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..batch).map(|_| rng.random_range(0..config.num_classes)).collect();
    Ok((clips, landmarks, labels))
}

/// Checks every parameter tensor of `config`'s network on random inputs
/// drawn from `seed`. Dropout masks are held fixed across evaluations.
pub fn check_model(config: &ModelConfig, seed: u64, opts: &GradCheckConfig) -> Result<GradCheckReport> {
    let net = Network::new(config.clone())?;
    let mut params: ModelParams<f64> = net.init_params(seed);
    let (clips, landmarks, labels) = random_inputs(config, opts.batch.max(1), seed)?;
    let refs: Vec<&[LandmarkFrame]> = landmarks.iter().map(Vec::as_slice).collect();
    let dropout_rng = || derived_rng(&[seed, 0x6472]);
    let loss = |p: &ModelParams<f64>| net.loss(p, &clips, &labels, &refs, Mode::Train, &mut dropout_rng());
    let (f0, _, analytic) = net.loss_and_grads(&params, &clips, &labels, &refs, Mode::Train, &mut dropout_rng())?;

    let mut pick = derived_rng(&[seed, 0x7069]);
    let names: Vec<String> = params.as_map().keys().cloned().collect();
    let mut report = GradCheckReport::default();
    let h = opts.step;
    for name in names {
        let n = params.get(&name).expect("own key").numel();
        let coords: Vec<usize> = match opts.per_tensor {
            Some(m) if m < n => sample(&mut pick, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = params.get(&name).expect("own key").data()[i];
            let mut eval = |dx: f64| -> Result<f64> {
                params.as_map_mut().get_mut(&name).expect("own key").data_mut()[i] = x0 + dx;
                loss(&params)
            };
            let (fp, fm) = (eval(h)?, eval(-h)?);
            let (fp2, fm2) = (eval(h / 2.0)?, eval(-h / 2.0)?);
            params.as_map_mut().get_mut(&name).expect("own key").data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            if kinked(f0, (fm, fp), (fm2, fp2), h, opts.floor) {
                report.skipped += 1;
                continue;
            }
            let a = analytic[&name].data()[i];
            report.checks.push(CoordCheck {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric, opts.floor),
            });
        }
    }
    Ok(report)
}
