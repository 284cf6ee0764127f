//! Independent reference implementations, written without reusing the code
//! they check. Used by the test suites and by `selfcheck`.

use lococontrast_nn::{Grads, ParamSet};
use rand::Rng;

use crate::cropper;
use crate::dataset::{Dataset, Split, SynthConfig};
use crate::encoders::{
    build_models, BackboneKind, CellIndex, CropEncoder, ModelConfig, PyramidEncoder, PyramidGrid,
};
use crate::error::Result;
use crate::evalkit::{ContainmentMode, LocalizationRecord};
use crate::loss::{multi_level_ntxent, LossConfig, PairBatch};
use crate::pairing::{assemble_pair_batch, PreparedExample};
use crate::seeding;

/// Textbook NT-Xent over `2N` views: view `k` and view `(k + N) mod 2N` are
/// a positive pair, every other view is a negative. Rows are log-softmaxed
/// over the similarity matrix with the diagonal masked out. With
/// `symmetric == false` only the first `N` rows are averaged.
pub fn simclr_ntxent(
    first: &[Vec<f64>],
    second: &[Vec<f64>],
    temperature: f64,
    symmetric: bool,
) -> f64 {
    let n = first.len();
    let views: Vec<&Vec<f64>> = first.iter().chain(second).collect();
    let m = 2 * n;
    let sim = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut logits = vec![vec![f64::NEG_INFINITY; m]; m];
    for r in 0..m {
        for c in 0..m {
            if r != c {
                logits[r][c] = sim(views[r], views[c]) / temperature;
            }
        }
    }
    let rows = if symmetric { m } else { n };
    let mut total = 0.0;
    for (r, row) in logits.iter().enumerate().take(rows) {
        let label = (r + n) % m;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / rows as f64
}

/// Unit vector with uniform direction.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random batch: `n` pairs, `0..=max_anchors` anchors per image.
pub fn random_pair_batch<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    max_anchors: usize,
    dim: usize,
) -> PairBatch {
    let mut b = PairBatch {
        dim,
        ..Default::default()
    };
    for _ in 0..n {
        b.crops.push(random_unit(rng, dim));
        b.positives.push(random_unit(rng, dim));
        let a = rng.gen_range(0..=max_anchors);
        b.anchors
            .push((0..a).map(|_| random_unit(rng, dim)).collect());
    }
    b
}

/// Nearest cell center by exhaustive scan; ties to the first cell in
/// row-major order.
pub fn nearest_center_scan(grid: &PyramidGrid, level: usize, (x, y): (f64, f64)) -> CellIndex {
    let lg = grid.level(level);
    let s = lg.stride as f64;
    let mut best = (f64::INFINITY, CellIndex::new(level, 0, 0));
    for r in 0..lg.rows {
        for c in 0..lg.cols {
            let dx = (c as f64 + 0.5) * s - x;
            let dy = (r as f64 + 0.5) * s - y;
            let d = dx * dx + dy * dy;
            if d < best.0 {
                best = (d, CellIndex::new(level, r, c));
            }
        }
    }
    best.1
}

/// Integer-only containment: centers compare in doubled coordinates.
fn contained(
    cell: CellIndex,
    stride: usize,
    crop: &cropper::CropSpec,
    mode: ContainmentMode,
) -> bool {
    let (c, r, s) = (cell.col, cell.row, stride);
    match mode {
        ContainmentMode::Center => {
            let (cx2, cy2) = ((2 * c + 1) * s, (2 * r + 1) * s);
            2 * crop.a <= cx2
                && cx2 <= 2 * (crop.a + crop.w)
                && 2 * crop.b <= cy2
                && cy2 <= 2 * (crop.b + crop.h)
        }
        ContainmentMode::FullCell => {
            crop.a <= c * s
                && (c + 1) * s <= crop.a + crop.w
                && crop.b <= r * s
                && (r + 1) * s <= crop.b + crop.h
        }
    }
}

/// Per level `(SGI, RIGI)` counted with plain loops.
pub fn count_localized(
    records: &[LocalizationRecord],
    mode: ContainmentMode,
) -> Vec<(usize, usize)> {
    let levels = records.first().map_or(0, |r| r.levels.len());
    let mut out = vec![(0, 0); levels];
    for rec in records {
        for (l, o) in rec.levels.iter().enumerate() {
            if contained(o.argmax, o.stride, &rec.crop, mode) {
                out[l].0 += 1;
            }
            if contained(o.random, o.stride, &rec.crop, mode) {
                out[l].1 += 1;
            }
        }
    }
    out
}

/// Exact probability that a uniformly random in-content cell of the given
/// stride is localized in a crop drawn by the crop sampler, by enumerating
/// every admissible side and placement.
pub fn riga_expectation(width: usize, height: usize, stride: usize, mode: ContainmentMode) -> f64 {
    let longest = width.max(height) as f64;
    let lo = (0.1 * longest).ceil() as usize;
    let hi = ((0.25 * longest).floor() as usize).max(lo);
    let cells = |extent: usize| ((2 * extent + stride - 1) / (2 * stride)).max(1);
    let (cols, rows) = (cells(width), cells(height));
    // Fraction of (placement, cell) pairs along one axis that are contained.
    let axis = |extent: usize, n: usize, side: usize| -> f64 {
        let mut hits = 0usize;
        for a in 0..=extent - side {
            for k in 0..n {
                let ok = match mode {
                    ContainmentMode::Center => {
                        2 * a <= (2 * k + 1) * stride && (2 * k + 1) * stride <= 2 * (a + side)
                    }
                    ContainmentMode::FullCell => a <= k * stride && (k + 1) * stride <= a + side,
                };
                hits += ok as usize;
            }
        }
        hits as f64 / ((extent - side + 1) * n) as f64
    };
    let mut total = 0.0;
    for s in lo..=hi {
        let side = s.min(width.min(height));
        total += axis(width, cols, side) * axis(height, rows, side);
    }
    total / (hi - lo + 1) as f64
}

/// Result of one finite-difference probe run.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

fn grad_check_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneKind::Tiny,
        embed_dim: 8,
        projection_hidden: 8,
        fpn_channels: 4,
        tiny_width: 4,
        ..Default::default()
    }
}

/// Compares backprop gradients of the multi-level loss, taken through both
/// encoders in f64, with central differences on `probes_per_encoder` randomly
/// chosen weights of each encoder.
///
/// Biases start at zero, which puts every ReLU fed by an all-zero window
/// exactly on its kink; they are jittered first so the check runs at a point
/// where the loss is differentiable.
pub fn encoder_gradient_check(trial: u64, probes_per_encoder: usize) -> Result<GradCheck> {
    let cfg = grad_check_config();
    let (mut crop, mut pyramid) = build_models::<f64>(&cfg, seeding::derive_seed(&[trial, 1]))?;
    let mut jitter = seeding::stream(&[trial, 4]);
    for p in crop.params.iter_mut().chain(pyramid.params.iter_mut()) {
        if p.name.ends_with(".bias") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = jitter.gen_range(-0.05..0.05));
        }
    }
    let synth = SynthConfig {
        image_size: 64,
        seed: trial,
        ..Default::default()
    };
    let data = Dataset::synthetic(&synth, 2, Split::Train);
    let mut rngs: Vec<_> = (0..2).map(|i| seeding::stream(&[trial, 2, i])).collect();
    let examples = (0..2)
        .map(|i| PreparedExample::new(&data.load(i)?, &mut rngs[i]))
        .collect::<Result<Vec<_>>>()?;
    let levels: Vec<usize> = (0..cfg.pyramid_levels).collect();
    let loss_cfg = LossConfig {
        temperature: 0.5,
        ..Default::default()
    };

    let loss_of = |c: &CropEncoder<f64>, p: &PyramidEncoder<f64>| -> Result<f64> {
        let mut r = rngs.clone();
        let fb = assemble_pair_batch(&examples, c, p, &levels, 3, &mut r)?;
        Ok(multi_level_ntxent(&fb.pairs, &loss_cfg)?.0)
    };

    let mut crop_grads = crop.params.zero_grads();
    let mut pyramid_grads = pyramid.params.zero_grads();
    {
        let mut r = rngs.clone();
        let fb = assemble_pair_batch(&examples, &crop, &pyramid, &levels, 3, &mut r)?;
        let (_, grads) = multi_level_ntxent(&fb.pairs, &loss_cfg)?;
        fb.backward(&grads, &mut crop_grads, &mut pyramid_grads);
    }

    let mut pick = seeding::stream(&[trial, 3]);
    let mut worst = (0.0f64, String::new());
    let mut probes = 0;
    let eps = 1e-7;
    for which in 0..2 {
        for _ in 0..probes_per_encoder {
            let (set, grads): (&ParamSet<f64>, &Grads<f64>) = if which == 0 {
                (&crop.params, &crop_grads)
            } else {
                (&pyramid.params, &pyramid_grads)
            };
            let pid = pick.gen_range(0..set.len());
            let idx = pick.gen_range(0..set.iter().nth(pid).unwrap().value.len());
            let name = set.iter().nth(pid).unwrap().name.clone();
            let analytic = grads.iter().nth(pid).unwrap().data()[idx];

            let eval_at = |delta: f64| -> Result<f64> {
                let (mut c, mut p) = (crop.clone(), pyramid.clone());
                let target = if which == 0 {
                    &mut c.params
                } else {
                    &mut p.params
                };
                let value = &mut target.iter_mut().nth(pid).unwrap().value.data_mut()[idx];
                *value += delta;
                loss_of(&c, &p)
            };
            let numeric = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel >= worst.0 {
                worst = (
                    rel,
                    format!("{name}[{idx}]: analytic {analytic:.6e}, numeric {numeric:.6e}"),
                );
            }
            probes += 1;
        }
    }
    Ok(GradCheck {
        probes,
        max_rel_err: worst.0,
        worst: worst.1,
    })
}
