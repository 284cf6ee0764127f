//! Quick oracle suites behind the `selfcheck` command.

use std::time::Instant;

use rand::Rng;

use crate::cropper;
use crate::encoders::{grid_geometry, CellIndex};
use crate::evalkit::{score_localization, ContainmentMode, LevelOutcome, LocalizationRecord};
use crate::loss::{anchor_ntxent, reference_ntxent, AnchorScope, LossConfig, PairBatch};
use crate::oracle;
use crate::pairing::select_positive;
use crate::seeding;

const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn loss_vs_reference() -> Result<String, String> {
    let mut rng = seeding::stream(&[0x10]);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.gen_range(1..=8);
        let batch = oracle::random_pair_batch(&mut rng, n, 16, 16);
        let cfg = LossConfig {
            temperature: [0.1, 0.5, 1.0][trial % 3],
            include_symmetric: trial % 2 == 1,
            anchor_scope: if trial % 4 < 2 {
                AnchorScope::OwnImage
            } else {
                AnchorScope::AllImages
            },
        };
        let a = anchor_ntxent(&batch, &cfg).map_err(|e| e.to_string())?;
        let b = reference_ntxent(&batch, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    if worst < 1e-6 {
        Ok(format!("100 batches, max |diff| {worst:.2e}"))
    } else {
        Err(format!("max |diff| {worst:.2e} exceeds 1e-6"))
    }
}

fn reduction_without_anchors() -> Result<String, String> {
    let mut rng = seeding::stream(&[0x11]);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.gen_range(1..=8);
        let mut batch = oracle::random_pair_batch(&mut rng, n, 0, 16);
        batch.anchors.iter_mut().for_each(Vec::clear);
        let tau = [0.1, 0.5, 1.0][trial % 3];
        for symmetric in [false, true] {
            let cfg = LossConfig {
                temperature: tau,
                include_symmetric: symmetric,
                ..Default::default()
            };
            let a = anchor_ntxent(&batch, &cfg).map_err(|e| e.to_string())?;
            let b = oracle::simclr_ntxent(&batch.crops, &batch.positives, tau, symmetric);
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("200 comparisons, max |diff| {worst:.2e}"))
    } else {
        Err(format!("max |diff| {worst:.2e} exceeds 1e-6"))
    }
}

fn hand_cases() -> Result<String, String> {
    let cfg = LossConfig {
        temperature: 1.0,
        ..Default::default()
    };
    let z = vec![1.0, 0.0];
    let degenerate = PairBatch {
        dim: 2,
        crops: vec![z.clone()],
        positives: vec![z.clone()],
        anchors: vec![vec![]],
    };
    let d = anchor_ntxent(&degenerate, &cfg).map_err(|e| e.to_string())?;
    let with_anchor = PairBatch {
        anchors: vec![vec![vec![0.0, 1.0]]],
        ..degenerate
    };
    let h = anchor_ntxent(&with_anchor, &cfg).map_err(|e| e.to_string())?;
    let want = (1.0 + (-1.0f64).exp()).ln();
    if d == 0.0 && (h - want).abs() < 1e-6 {
        Ok(format!("degenerate {d}, orthogonal anchor {h:.6}"))
    } else {
        Err(format!(
            "degenerate {d} (want 0), orthogonal anchor {h} (want {want})"
        ))
    }
}

fn positive_selection() -> Result<String, String> {
    let mut rng = seeding::stream(&[0x12]);
    for case in 0..1000 {
        let (w, h) = (rng.gen_range(1..=700), rng.gen_range(1..=700));
        let grid = grid_geometry(w, h, &STRIDES);
        let level = rng.gen_range(0..STRIDES.len());
        let p = (rng.gen_range(0.0..=w as f64), rng.gen_range(0.0..=h as f64));
        let got = select_positive(&grid, level, p);
        let want = oracle::nearest_center_scan(&grid, level, p);
        if got != want {
            return Err(format!(
                "case {case}: {w}x{h} level {level} point {p:?}: {got:?} vs {want:?}"
            ));
        }
    }
    Ok("1000 random cases".into())
}

fn crop_sampler() -> Result<String, String> {
    let mut rng = seeding::stream(&[0x13]);
    for draw in 0..10_000 {
        let (w, h) = (rng.gen_range(10..=800), rng.gen_range(10..=800));
        let c = cropper::sample_crop(w, h, &mut rng).map_err(|e| e.to_string())?;
        let longest = w.max(h) as f64;
        let side_ok = c.w == c.h
            && ((c.w as f64 >= (0.1 * longest).ceil() && c.w as f64 <= 0.25 * longest)
                || c.w == w.min(h));
        if !side_ok || !c.fits_in(w, h) {
            return Err(format!("draw {draw}: {c:?} in {w}x{h}"));
        }
    }
    Ok("10000 draws, 0 violations".into())
}

fn grid_dims() -> Result<String, String> {
    let mut rng = seeding::stream(&[0x14]);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..=2000), rng.gen_range(1..=2000));
        let g = grid_geometry(w, h, &STRIDES);
        for (l, &s) in STRIDES.iter().enumerate() {
            let lg = g.level(l);
            if (lg.rows, lg.cols) != (h.div_ceil(s), w.div_ceil(s)) || lg.stride != s {
                return Err(format!("{w}x{h} level {l}: {lg:?}"));
            }
        }
    }
    Ok("50 random sizes".into())
}

fn metrics_vs_scalar_loop() -> Result<String, String> {
    let mut rng = seeding::stream(&[0x15]);
    let records: Vec<LocalizationRecord> = (0..300)
        .map(|i| {
            let crop = cropper::sample_crop(256, 256, &mut rng).unwrap();
            let levels = STRIDES
                .iter()
                .enumerate()
                .map(|(l, &s)| {
                    let n = 256 / s;
                    let mut cell = || CellIndex::new(l, rng.gen_range(0..n), rng.gen_range(0..n));
                    LevelOutcome {
                        level: l,
                        stride: s,
                        argmax: cell(),
                        random: cell(),
                    }
                })
                .collect();
            LocalizationRecord {
                image_id: format!("r{i}"),
                crop,
                levels,
            }
        })
        .collect();
    for mode in [ContainmentMode::Center, ContainmentMode::FullCell] {
        let report = score_localization(&records, mode, 0);
        let counts = oracle::count_localized(&records, mode);
        for (l, (sgi, rigi)) in report.levels.iter().zip(counts) {
            if (l.sgi, l.rigi) != (sgi, rigi)
                || l.sga != sgi as f64 / 300.0
                || l.riga != rigi as f64 / 300.0
            {
                return Err(format!(
                    "{mode} level {}: {:?} vs ({sgi}, {rigi})",
                    l.level,
                    (l.sgi, l.rigi)
                ));
            }
        }
    }
    Ok("300 records, both modes".into())
}

fn gradients() -> Result<String, String> {
    let mut worst = 0.0f64;
    for trial in 0..2 {
        let g = oracle::encoder_gradient_check(trial, 6).map_err(|e| e.to_string())?;
        if g.max_rel_err >= 1e-3 {
            return Err(format!(
                "trial {trial}: rel err {:.2e} at {}",
                g.max_rel_err, g.worst
            ));
        }
        worst = worst.max(g.max_rel_err);
    }
    Ok(format!("2 trials, max rel err {worst:.2e}"))
}

type Suite = (&'static str, fn() -> Result<String, String>);

const SUITES: [Suite; 8] = [
    ("loss-vs-reference", loss_vs_reference),
    ("loss-reduces-to-ntxent", reduction_without_anchors),
    ("loss-hand-cases", hand_cases),
    ("pairing-positive-vs-scan", positive_selection),
    ("crop-sampler-invariants", crop_sampler),
    ("grid-dims", grid_dims),
    ("metrics-vs-scalar-loop", metrics_vs_scalar_loop),
    ("encoder-gradients", gradients),
];

/// Runs every suite; each returns pass/fail with a one-line detail.
pub fn run_selfcheck() -> Vec<Check> {
    SUITES.iter().map(|&(name, f)| check(name, f)).collect()
}

/// Runs a single suite by name.
pub fn run_selfcheck_named(name: &str) -> Option<Check> {
    SUITES
        .iter()
        .find(|s| s.0 == name)
        .map(|&(name, f)| check(name, f))
}
