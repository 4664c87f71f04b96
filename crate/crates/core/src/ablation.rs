//! The four-way module ablation: baseline, +PFMG, +SCG, full.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::detect::model::{Detector, ModelConfig};
use crate::detect::predict::predict_all;
use crate::detect::synth::{generate, Scene};
use crate::detect::train::train;
use crate::error::Result;
use crate::eval::{map50, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Pfmg,
    Scg,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Pfmg, Variant::Scg, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Pfmg => "+pfmg",
            Variant::Scg => "+scg",
            Variant::Full => "full",
        }
    }

    /// `(enable_scg, enable_pfmg_gate)`.
    pub fn switches(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Pfmg => (false, true),
            Variant::Scg => (true, false),
            Variant::Full => (true, true),
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        (c.enable_scg, c.enable_pfmg_gate) = self.switches();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub map50: f64,
    pub params: usize,
}

pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(image, s)| {
            s.objects.iter().map(move |o| GroundTruth {
                image,
                class_id: o.class_id,
                bbox: o.bbox,
            })
        })
        .collect()
}

/// Trains one variant on `train_set` and scores it on `test_set`.
pub fn run_variant(cfg: &RunConfig, variant: Variant, train_set: &[Scene], test_set: &[Scene]) -> Result<AblationRow> {
    let c = variant.apply(cfg);
    let det = Detector::new(ModelConfig {
        pyramid: c.pyramid_config(),
        num_classes: c.synth.num_classes,
    })?;
    let mut ps = det.init_params(c.seed)?;
    train(&det, &mut ps, train_set, &c.train)?;
    let dets = predict_all(&det, &ps, test_set, c.score_threshold, c.nms_iou, c.train.batch_size)?;
    let report = map50(&dets, &ground_truth(test_set), c.synth.num_classes)?;
    Ok(AblationRow {
        variant,
        seed: c.seed,
        map50: report.map50,
        params: ps.count(),
    })
}

/// Fresh train and test scenes for `seed`: the first `ablate_train_count`
/// scenes of the seeded stream train, the next `ablate_test_count` test.
pub fn synth_splits(cfg: &RunConfig, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let c = cfg.with_seed(seed);
    let mut scenes = generate(&c.synth, c.ablate_train_count + c.ablate_test_count)?;
    let test = scenes.split_off(c.ablate_train_count);
    Ok((scenes, test))
}

/// All variants for every seed in `cfg.ablate_seeds`. `data` supplies the
/// splits for a seed; `done` sees each row as it finishes.
pub fn ablate<F, D>(cfg: &RunConfig, mut data: F, mut done: D) -> Result<Vec<AblationRow>>
where
    F: FnMut(u64) -> Result<(Vec<Scene>, Vec<Scene>)>,
    D: FnMut(&AblationRow),
{
    let mut rows = Vec::new();
    for &seed in &cfg.ablate_seeds {
        let (tr, te) = data(seed)?;
        let c = cfg.with_seed(seed);
        for v in Variant::ALL {
            let row = run_variant(&c, v, &tr, &te)?;
            done(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Seed-averaged table, one row per variant, in baseline, +pfmg, +scg,
/// full order.
pub fn summary(rows: &[AblationRow]) -> Vec<AblationRow> {
    Variant::ALL
        .iter()
        .filter_map(|&v| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let first = of.first()?;
            Some(AblationRow {
                variant: v,
                seed: first.seed,
                map50: of.iter().map(|r| r.map50).sum::<f64>() / of.len() as f64,
                params: first.params,
            })
        })
        .collect()
}

/// Whether one seed's rows satisfy `baseline < {+pfmg, +scg} < full` with
/// at least `margin` between full and baseline.
pub fn ordered(rows: &[AblationRow], seed: u64, margin: f64) -> bool {
    let get = |v: Variant| rows.iter().find(|r| r.seed == seed && r.variant == v).map(|r| r.map50);
    let (Some(b), Some(p), Some(s), Some(f)) = (
        get(Variant::Baseline),
        get(Variant::Pfmg),
        get(Variant::Scg),
        get(Variant::Full),
    ) else {
        return false;
    };
    b < p && b < s && p < f && s < f && f - b >= margin
}

pub fn table(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,map50,params\n");
    for r in summary(rows) {
        writeln!(out, "{},{:.4},{}", r.variant.name(), r.map50, r.params).unwrap();
    }
    out
}

pub fn per_seed_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("seed,config,map50,params\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{}", r.seed, r.variant.name(), r.map50, r.params).unwrap();
    }
    out
}
