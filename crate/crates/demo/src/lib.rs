//! Browser bindings for the demo page. Each export returns a JSON string;
//! the plain functions underneath are usable (and tested) natively.
//!
//! Nothing here reads the clock, so the explorer reports multiply-add counts
//! instead of timings.

use std::cell::RefCell;

use cascade_core::bench::{evaluate, truncation_curve};
use cascade_core::cascade::{learn_thresholds, make_stage_plan, vr_schedule, CascadeModel, PairSample};
use cascade_core::synth::{build_fixture, generate, mine_genuine_pairs, Fixture, FixtureConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct PlanView {
    d: usize,
    sn: usize,
    boundaries: Vec<usize>,
    /// Features added by each stage.
    widths: Vec<usize>,
}

pub fn plan_view(d: usize, sn: usize) -> Result<String, String> {
    let plan = make_stage_plan(d, sn).map_err(|e| e.to_string())?;
    let mut prev = 0;
    let widths = plan
        .boundaries()
        .iter()
        .map(|&b| {
            let w = b - prev;
            prev = b;
            w
        })
        .collect();
    json(&PlanView {
        d,
        sn,
        boundaries: plan.boundaries().to_vec(),
        widths,
    })
}

/// Demo-sized version of the evaluation setup.
fn demo_config(seed: u64, distractors: usize) -> FixtureConfig {
    FixtureConfig {
        probe_ids: 200,
        distractors,
        seed,
        ..FixtureConfig::small()
    }
}

struct Prepared {
    key: (u64, usize),
    fixture: Fixture,
    pairs: Vec<PairSample>,
}

thread_local! {
    static CACHE: RefCell<Option<Prepared>> = const { RefCell::new(None) };
}

/// Builds (or reuses) the fixture for `seed` and `distractors`, then runs `f`.
fn with_fixture<T>(
    seed: u64,
    distractors: usize,
    f: impl FnOnce(&Prepared) -> Result<T, String>,
) -> Result<T, String> {
    CACHE.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().map(|p| p.key) != Some((seed, distractors)) {
            let cfg = demo_config(seed, distractors);
            let fixture = build_fixture(&cfg).map_err(|e| e.to_string())?;
            let held = generate(&cfg.threshold_config()).map_err(|e| e.to_string())?;
            let pairs =
                mine_genuine_pairs(&held, &fixture.projection, usize::MAX).map_err(|e| e.to_string())?;
            *slot = Some(Prepared {
                key: (seed, distractors),
                fixture,
                pairs,
            });
        }
        f(slot.as_ref().expect("filled above"))
    })
}

#[derive(Serialize)]
struct ExplorerView {
    vr_base: f64,
    boundaries: Vec<usize>,
    thresholds: Vec<f64>,
    target_vrs: Vec<f64>,
    threshold_pairs: usize,
    gallery_size: usize,
    probe_count: usize,
    /// Comparisons rejected at each stage, then the survivors.
    histogram: Vec<u64>,
    terminated_within_2: f64,
    work_speedup: f64,
    rank1_linear: f64,
    rank1_cascade: f64,
    disagreements: usize,
}

pub fn explorer_view(vr_base: f64, seed: u64, distractors: usize) -> Result<String, String> {
    with_fixture(seed, distractors, |p| {
        let f = &p.fixture;
        let plan = f.model.plan().clone();
        let sn = plan.stage_count();
        let model: CascadeModel = learn_thresholds(&p.pairs, &plan, &vr_schedule(vr_base, sn))
            .map_err(|e| e.to_string())?;
        let e = evaluate(&f.gallery, &f.probes, &model, 1).map_err(|e| e.to_string())?;
        let mut histogram = e.stage_histogram.clone();
        histogram.push(e.survivors);
        json(&ExplorerView {
            vr_base,
            boundaries: plan.boundaries().to_vec(),
            thresholds: model.thresholds().to_vec(),
            target_vrs: model.target_vrs().to_vec(),
            threshold_pairs: p.pairs.len(),
            gallery_size: e.gallery_size,
            probe_count: e.probe_count,
            histogram,
            terminated_within_2: e.terminated_within(2),
            work_speedup: e.work_speedup(),
            rank1_linear: e.rank1_linear,
            rank1_cascade: e.rank1_cascade,
            disagreements: e.disagreements(),
        })
    })
}

#[derive(Serialize)]
struct CurvePoint {
    stages_kept: usize,
    dim: usize,
    rank1: f64,
}

pub fn truncation_view(seed: u64, distractors: usize) -> Result<String, String> {
    with_fixture(seed, distractors, |p| {
        let f = &p.fixture;
        let curve = truncation_curve(&f.gallery, &f.probes, &f.model).map_err(|e| e.to_string())?;
        json(
            &curve
                .iter()
                .map(|c| CurvePoint {
                    stages_kept: c.stages_kept,
                    dim: c.dim,
                    rank1: c.rank1,
                })
                .collect::<Vec<_>>(),
        )
    })
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Stage boundaries and widths for `d` features in `sn` stages.
#[wasm_bindgen]
pub fn stage_plan(d: usize, sn: usize) -> Result<String, JsError> {
    plan_view(d, sn).map_err(|e| JsError::new(&e))
}

/// Learns thresholds for `vr_base` and reports where comparisons stop.
#[wasm_bindgen]
pub fn explore(vr_base: f64, seed: u32, distractors: usize) -> Result<String, JsError> {
    explorer_view(vr_base, seed.into(), distractors).map_err(|e| JsError::new(&e))
}

/// Rank-1 against the number of stages kept.
#[wasm_bindgen]
pub fn truncation(seed: u32, distractors: usize) -> Result<String, JsError> {
    truncation_view(seed.into(), distractors).map_err(|e| JsError::new(&e))
}
