//! Finite-difference verification of every analytic gradient in the crate.
//!
//! All checks run in `f64` with central differences (`eps = 1e-5`). The
//! reported error for a check is the largest per-coordinate relative error
//! `|a - n| / max(|a|, |n|, 1e-5)` over the probed coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::WindowSpec;
use crate::error::Result;
use crate::model::{Arch, Model, ModelConfig};
use crate::nn::{flatten, ConvEncoder, Linear, Lstm, LstmState, MemoryBlock, ParamTensor, Skip, WindowedDeconv};
use crate::train::{l1_loss, multi_domain_loss, sd_sdr_loss, si_snr_loss, LossValue, Stems};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for the spectral-magnitude loss term.
pub const SPECTRAL_TOLERANCE: f64 = 1e-3;
/// Gradient magnitude below which errors are measured absolutely: central
/// differences of an O(1) loss carry ~1e-10 of rounding noise at `EPS`.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares `analytic` against central differences of `f` around `x0`,
/// probing `coords` (all coordinates when `None`).
pub fn compare<F: Fn(&[f64]) -> f64>(
    name: &str,
    seed: u64,
    tolerance: f64,
    x0: &[f64],
    analytic: &[f64],
    coords: Option<Vec<usize>>,
    f: F,
) -> GradCheck {
    assert_eq!(x0.len(), analytic.len());
    let coords = coords.unwrap_or_else(|| (0..x0.len()).collect());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for &i in &coords {
        x[i] = x0[i] + EPS;
        let up = f(&x);
        x[i] = x0[i] - EPS;
        let down = f(&x);
        x[i] = x0[i];
        let numeric = (up - down) / (2.0 * EPS);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    GradCheck {
        name: name.to_string(),
        seed,
        coordinates: coords.len(),
        max_rel_err: worst,
        tolerance,
    }
}

fn gather(ts: &[&ParamTensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.values.iter().copied()).collect()
}

fn gather_grads(ts: &[&ParamTensor<f64>]) -> Vec<f64> {
    ts.iter()
        .flat_map(|t| match &t.grad {
            Some(g) => g.clone(),
            None => vec![0.0; t.len()],
        })
        .collect()
}

fn scatter(ts: Vec<&mut ParamTensor<f64>>, x: &[f64]) {
    let mut off = 0;
    for t in ts {
        let n = t.len();
        t.values.copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn seq(rng: &mut ChaCha8Rng, steps: usize, n: usize) -> Vec<Vec<f64>> {
    (0..steps).map(|_| uniform(rng, n)).collect()
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat(x: &[f64], n: usize) -> Vec<Vec<f64>> {
    x.chunks(n).map(<[f64]>::to_vec).collect()
}

/// `L = <c, W x + b>` over weights, bias and input.
pub fn check_linear(seed: u64, input: usize, output: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Linear::<f64>::new("lin", input, output, &mut rng);
    let x = uniform(&mut rng, input);
    let c = uniform(&mut rng, output);
    let mut gx = vec![0.0; input];
    layer.backward(&x, &c, Some(&mut gx))?;
    let mut x0 = gather(&layer.params());
    let np = x0.len();
    x0.extend(&x);
    let mut analytic = gather_grads(&layer.params());
    analytic.extend(&gx);
    let base = layer.clone();
    Ok(compare(&format!("linear {input}x{output}"), seed, TOLERANCE, &x0, &analytic, None, |v| {
        let mut l = base.clone();
        scatter(l.params_mut(), &v[..np]);
        dotp(&c, &l.apply(&v[np..]).unwrap())
    }))
}

/// BPTT through a sequence: `L = sum_t <c_t, h_t>`.
pub fn check_lstm(seed: u64, input: usize, hidden: usize, steps: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lstm = Lstm::<f64>::new("lstm", input, hidden, &mut rng);
    let xs = seq(&mut rng, steps, input);
    let cs = seq(&mut rng, steps, hidden);
    let init = LstmState::zeros(hidden);
    let (_, tape) = lstm.forward_seq(&xs, &init)?;
    let dxs = lstm.backward_seq(&tape, &cs)?;
    let mut x0 = gather(&lstm.params());
    let np = x0.len();
    x0.extend(flat(&xs));
    let mut analytic = gather_grads(&lstm.params());
    analytic.extend(flat(&dxs));
    let base = lstm.clone();
    Ok(compare(
        &format!("lstm {hidden} units x {steps} steps"),
        seed,
        TOLERANCE,
        &x0,
        &analytic,
        None,
        |v| {
            let mut l = base.clone();
            scatter(l.params_mut(), &v[..np]);
            let (ys, _) = l.forward_seq(&unflat(&v[np..], input), &init).unwrap();
            ys.iter().zip(&cs).map(|(y, c)| dotp(y, c)).sum()
        },
    ))
}

/// Encoder -> windowed deconv: `L = <c, deconv(relu(conv(x)))>`.
pub fn check_conv_deconv(seed: u64, basis: usize, window: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hann = crate::dsp::make_window::<f64>(&WindowSpec::new(window, window / 2)?)?;
    let mut enc = ConvEncoder::<f64>::new("enc", basis, 2, window, &mut rng);
    let mut dec = WindowedDeconv::<f64>::new("dec", basis, 2, &hann, &mut rng);
    let frame = seq(&mut rng, 2, window);
    let c = seq(&mut rng, 2, window);
    let x = flatten(&frame);
    let y = enc.encode_flat(&x)?;
    let mut gl = vec![0.0; basis];
    dec.backward(&y, &c, &mut gl)?;
    let mut gx = vec![0.0; x.len()];
    enc.backward(&x, &y, &gl, Some(&mut gx))?;
    let mut x0 = gather(&enc.params());
    let ne = x0.len();
    x0.extend(gather(&dec.params()));
    let nd = x0.len();
    x0.extend(&x);
    let mut analytic = gather_grads(&enc.params());
    analytic.extend(gather_grads(&dec.params()));
    analytic.extend(&gx);
    let (be, bd) = (enc.clone(), dec.clone());
    Ok(compare("conv encoder + windowed deconv", seed, TOLERANCE, &x0, &analytic, None, |v| {
        let (mut e, mut d) = (be.clone(), bd.clone());
        scatter(e.params_mut(), &v[..ne]);
        scatter(d.params_mut(), &v[ne..nd]);
        let lat = e.encode_flat(&v[nd..]).unwrap();
        let out = d.contribution(&lat).unwrap();
        out.iter().zip(&c).map(|(o, c)| dotp(o, c)).sum()
    }))
}

/// Memory block over a sequence, including the skip path.
pub fn check_memory_block(seed: u64, layers: usize, projection: bool, skip: Skip) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, hidden, steps) = (3, 4, 4);
    let out = if projection { Some(input) } else { None };
    let width = out.unwrap_or(hidden);
    let skip_width = if skip == Skip::Identity { input } else { width };
    let mut block = MemoryBlock::<f64>::new("mem", input, hidden, layers, out, skip, &mut rng);
    if skip == Skip::Identity {
        // identity skip needs matching widths
        assert_eq!(input, width, "identity skip requires a projection back to the input width");
    }
    let xs = seq(&mut rng, steps, input);
    let encs = seq(&mut rng, steps, skip_width);
    let cs = seq(&mut rng, steps, width);
    let enc_arg = (skip == Skip::Encoded).then_some(encs.as_slice());
    let (_, tape) = block.forward_seq(&xs, enc_arg)?;
    let (dxs, denc) = block.backward_seq(&tape, &cs)?;
    let mut x0 = gather(&block.params());
    let np = x0.len();
    x0.extend(flat(&xs));
    let nx = x0.len();
    let mut analytic = gather_grads(&block.params());
    analytic.extend(flat(&dxs));
    if skip == Skip::Encoded {
        x0.extend(flat(&encs));
        analytic.extend(flat(&denc.unwrap_or_default()));
    }
    let base = block.clone();
    let name = format!("memory block ({layers} lstm, {skip:?} skip{})", if projection { ", proj" } else { "" });
    Ok(compare(&name, seed, TOLERANCE, &x0, &analytic, None, |v| {
        let mut b = base.clone();
        scatter(b.params_mut(), &v[..np]);
        let xs = unflat(&v[np..nx], input);
        let encs = unflat(&v[nx..], skip_width);
        let enc_arg = (skip == Skip::Encoded).then_some(encs.as_slice());
        let (ys, _) = b.forward_seq(&xs, enc_arg).unwrap();
        ys.iter().zip(&cs).map(|(y, c)| dotp(y, c)).sum()
    }))
}

/// Whole toy model through `forward_train`/`backward_train`, all parameters.
pub fn check_model(seed: u64, arch: Arch) -> Result<GradCheck> {
    let cfg = ModelConfig::toy(arch);
    let mut model = Model::<f64>::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = 5 * cfg.hop - 3;
    let input = seq(&mut rng, cfg.channels, len);
    let c: Stems<f64> = (0..cfg.stems).map(|_| seq(&mut rng, cfg.channels, len)).collect();
    let (_, tape) = model.forward_train(&input)?;
    model.zero_grad();
    model.backward_train(&tape, &c)?;
    let x0 = gather(&model.params());
    let analytic = gather_grads(&model.params());
    let base = model.clone();
    Ok(compare(&format!("model {}", arch.name()), seed, TOLERANCE, &x0, &analytic, None, |v| {
        let mut m = base.clone();
        scatter(m.params_mut(), v);
        let (y, _) = m.forward_train(&input).unwrap();
        y.iter()
            .flatten()
            .zip(c.iter().flatten())
            .map(|(a, b)| dotp(a, b))
            .sum()
    }))
}

type LossFn = fn(&[Vec<Vec<f64>>], &[Vec<Vec<f64>>]) -> Result<LossValue<f64>>;

fn check_loss_with(
    name: &str,
    seed: u64,
    tolerance: f64,
    len: usize,
    probes: Option<usize>,
    loss: &dyn Fn(&[Vec<Vec<f64>>], &[Vec<Vec<f64>>]) -> Result<LossValue<f64>>,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference: Stems<f64> = (0..4).map(|_| seq(&mut rng, 2, len)).collect();
    let est: Stems<f64> = (0..4).map(|_| seq(&mut rng, 2, len)).collect();
    let lv = loss(&est, &reference)?;
    let x0: Vec<f64> = est.iter().flatten().flatten().copied().collect();
    let analytic: Vec<f64> = lv.grad.iter().flatten().flatten().copied().collect();
    let coords = probes.map(|n| sample(&mut rng, x0.len(), n.min(x0.len())).into_vec());
    let rebuild = |v: &[f64]| -> Stems<f64> { v.chunks(2 * len).map(|s| unflat(s, len)).collect() };
    Ok(compare(name, seed, tolerance, &x0, &analytic, coords, |v| {
        loss(&rebuild(v), &reference).unwrap().value
    }))
}

pub fn check_loss(seed: u64, name: &str, loss: LossFn) -> Result<GradCheck> {
    check_loss_with(name, seed, TOLERANCE, 24, None, &loss)
}

/// Multi-domain loss at the default 1024/512 STFT on 2048-sample stems,
/// probing a random subset of coordinates.
pub fn check_multi_domain(seed: u64, probes: usize) -> Result<GradCheck> {
    let spec = WindowSpec::default();
    check_loss_with(
        "multi-domain loss (alpha 0.5)",
        seed,
        SPECTRAL_TOLERANCE,
        2048,
        Some(probes),
        &|e, r| multi_domain_loss(e, r, 0.5, &spec),
    )
}

/// Every layer type and every loss for one seed.
pub fn run_seed(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = vec![
        check_linear(seed, 2, 2)?,
        check_linear(seed, 5, 3)?,
        check_lstm(seed, 4, 3, 5)?,
        check_conv_deconv(seed, 5, 8)?,
        check_memory_block(seed, 2, false, Skip::None)?,
        check_memory_block(seed, 1, true, Skip::Identity)?,
        check_memory_block(seed, 2, true, Skip::Encoded)?,
        check_memory_block(seed, 1, false, Skip::Encoded)?,
    ];
    for arch in [Arch::HsTasnet, Arch::HsTasnetSmall, Arch::Tasnet] {
        out.push(check_model(seed, arch)?);
    }
    out.push(check_loss(seed, "l1 loss", l1_loss)?);
    out.push(check_loss(seed, "si-snr loss", si_snr_loss)?);
    out.push(check_loss(seed, "sd-sdr loss", sd_sdr_loss)?);
    out.push(check_multi_domain(seed, 48)?);
    Ok(out)
}

/// The full suite over `seeds` consecutive seeds starting at `seed`.
pub fn run_suite(seed: u64, seeds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for s in seed..seed + seeds {
        out.extend(run_seed(s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let r = compare("x^2", 0, TOLERANCE, &[1.5], &[2.0], None, |v| v[0] * v[0]);
        assert!(!r.passed());
        let r = compare("x^2", 0, TOLERANCE, &[1.5], &[3.0], None, |v| v[0] * v[0]);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn linear_two_by_two() {
        let r = check_linear(1, 2, 2).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates, 2 * 2 + 2 + 2);
    }
}
