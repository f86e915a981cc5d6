//! Nested-stage cascade over unit-length feature templates.
//!
//! A template is split into nested prefixes ("stages"), coarse to fine. Matching
//! accumulates the inner product one prefix at a time and stops as soon as the
//! running score drops below the stage threshold. Thresholds are learned from
//! genuine pairs so that each stage keeps a target fraction of them.

use std::cmp::Ordering;

use crate::error::{check_dim, Error, Result};

/// Stage count used when nothing else is configured.
pub const DEFAULT_STAGE_COUNT: usize = 7;
/// Per-stage verification rates default to `DEFAULT_VR_BASE^(k+1)`.
pub const DEFAULT_VR_BASE: f64 = 0.999;
/// Allowed deviation of a template's L2 norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Threshold used by pass-through models. Partial inner products of unit
/// vectors never go below -1.
pub const DISABLED_THRESHOLD: f64 = -2.0;

/// A unit-length feature vector with an identity label.
///
/// Features are stored in single precision; every score computed from them is
/// accumulated in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    id: String,
    features: Vec<f32>,
}

impl Template {
    /// Wraps already-normalized features, checking the unit-norm invariant.
    pub fn new(id: impl Into<String>, features: Vec<f32>) -> Result<Self> {
        check_features(&features)?;
        let norm = l2_norm(&features);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NormViolation { index: 0, norm });
        }
        Ok(Self::from_parts(id.into(), features))
    }

    /// Normalizes `raw` to unit length and stores it.
    pub fn from_raw(id: impl Into<String>, raw: &[f64]) -> Result<Self> {
        let unit = normalize(raw)?;
        Ok(Self::from_parts(id.into(), unit.iter().map(|&v| v as f32).collect()))
    }

    pub(crate) fn from_parts(id: String, features: Vec<f32>) -> Self {
        Self { id, features }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

fn check_features(features: &[f32]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("template has no features".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("template has non-finite features".into()));
    }
    Ok(())
}

/// L2 norm of a single-precision vector, accumulated in double precision.
pub fn l2_norm(x: &[f32]) -> f64 {
    x.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Scales `x` to unit L2 length.
pub fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Normalization("non-finite entry".into()));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Normalization("zero vector".into()));
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

#[inline(always)]
fn accumulate(x: &[f32], y: &[f32], init: f64) -> f64 {
    let mut s = init;
    for (&a, &b) in x.iter().zip(y) {
        s += f64::from(a) * f64::from(b);
    }
    s
}

/// Plain left-to-right inner product in double precision. This is the linear
/// scan kernel; the cascade uses the exact same accumulation order.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f64 {
    accumulate(x, y, 0.0)
}

/// Cosine similarity of two unit-length templates.
pub fn cosine(x: &[f32], y: &[f32]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    Ok(dot(x, y))
}

/// Element-wise product of two unit templates. The entries sum to their cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub values: Vec<f64>,
    pub genuine: bool,
}

impl PairSample {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn build_pair_sample(x: &[f32], y: &[f32], genuine: bool) -> Result<PairSample> {
    check_dim(x.len(), y.len())?;
    let values = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .collect();
    Ok(PairSample { values, genuine })
}

/// Cumulative dimension counts of the nested stages, in evaluation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    boundaries: Vec<usize>,
}

impl StagePlan {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        match boundaries.first() {
            None => return Err(Error::InvalidPlan("no stages".into())),
            Some(0) => return Err(Error::InvalidPlan("first stage is empty".into())),
            Some(_) => {}
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPlan(format!(
                "boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn stage_count(&self) -> usize {
        self.boundaries.len()
    }

    /// Total template dimension, the last boundary.
    pub fn dim(&self) -> usize {
        *self.boundaries.last().expect("plan has at least one stage")
    }
}

/// Halving geometry: stage `k` covers the first `floor(d / 2^(sn-1-k))` dims.
pub fn make_stage_plan(d: usize, sn: usize) -> Result<StagePlan> {
    if sn == 0 {
        return Err(Error::InvalidPlan("stage count must be at least 1".into()));
    }
    if sn - 1 >= usize::BITS as usize || d >> (sn - 1) == 0 {
        return Err(Error::InvalidPlan(format!(
            "dimension {d} is too small for {sn} halving stages"
        )));
    }
    StagePlan::new((0..sn).map(|k| d >> (sn - 1 - k)).collect())
}

/// `base^(k+1)` for `k = 0..sn`.
pub fn vr_schedule(base: f64, sn: usize) -> Vec<f64> {
    (1..=sn as i32).map(|k| base.powi(k)).collect()
}

/// A stage plan with one rejection threshold per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    plan: StagePlan,
    thresholds: Vec<f64>,
    target_vrs: Vec<f64>,
    train_count: usize,
}

impl CascadeModel {
    pub fn new(
        plan: StagePlan,
        thresholds: Vec<f64>,
        target_vrs: Vec<f64>,
        train_count: usize,
    ) -> Result<Self> {
        let sn = plan.stage_count();
        if thresholds.len() != sn || target_vrs.len() != sn {
            return Err(Error::InvalidArgument(format!(
                "{sn} stages but {} thresholds and {} target rates",
                thresholds.len(),
                target_vrs.len()
            )));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("thresholds must be finite".into()));
        }
        check_vrs(&target_vrs)?;
        Ok(Self {
            plan,
            thresholds,
            target_vrs,
            train_count,
        })
    }

    /// A model that never rejects: matching degenerates to a linear scan.
    pub fn pass_through(plan: StagePlan) -> Self {
        let sn = plan.stage_count();
        Self {
            plan,
            thresholds: vec![DISABLED_THRESHOLD; sn],
            target_vrs: vec![1.0; sn],
            train_count: 0,
        }
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn target_vrs(&self) -> &[f64] {
        &self.target_vrs
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    pub fn dim(&self) -> usize {
        self.plan.dim()
    }

    pub fn stage_count(&self) -> usize {
        self.plan.stage_count()
    }

    /// Runs the stage tests on a precomputed pair sample. Scores are the same
    /// partial sums `cascade_match` would produce for the source templates.
    pub fn evaluate_pair(&self, pair: &PairSample) -> Result<MatchResult> {
        check_dim(self.dim(), pair.dim())?;
        let mut s = 0.0;
        let mut start = 0;
        for (k, (&end, &t)) in self.plan.boundaries.iter().zip(&self.thresholds).enumerate() {
            s = pair.values[start..end].iter().fold(s, |acc, v| acc + v);
            start = end;
            if s < t {
                return Ok(MatchResult::rejected_at(s, k));
            }
        }
        Ok(MatchResult::survived(s, self.stage_count()))
    }
}

fn check_vrs(vrs: &[f64]) -> Result<()> {
    match vrs.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        Some(v) => Err(Error::InvalidArgument(format!(
            "verification rate {v} outside (0, 1]"
        ))),
        None => Ok(()),
    }
}

/// Learns one threshold per stage from genuine pairs.
///
/// Every stage uses all positives. For stage `k` the threshold is the `q`-th
/// largest cumulative score with `q = ceil(v[k] * n)`, so at least a `v[k]`
/// fraction of the training positives satisfy `score >= t[k]`.
pub fn learn_thresholds(
    positives: &[PairSample],
    plan: &StagePlan,
    target_vrs: &[f64],
) -> Result<CascadeModel> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("no positive samples".into()));
    }
    if target_vrs.len() != plan.stage_count() {
        return Err(Error::InvalidArgument(format!(
            "{} target rates for {} stages",
            target_vrs.len(),
            plan.stage_count()
        )));
    }
    check_vrs(target_vrs)?;
    for p in positives {
        check_dim(plan.dim(), p.dim())?;
        if !p.genuine {
            return Err(Error::InvalidArgument(
                "threshold learning takes genuine pairs only".into(),
            ));
        }
    }

    let n = positives.len();
    let mut cumulative = vec![0.0f64; n];
    let mut scratch = vec![0.0f64; n];
    let mut thresholds = Vec::with_capacity(plan.stage_count());
    let mut i = 0;
    for (&end, &vr) in plan.boundaries().iter().zip(target_vrs) {
        while i < end {
            for (s, p) in cumulative.iter_mut().zip(positives) {
                *s += p.values[i];
            }
            i += 1;
        }
        let q = required_passers(vr, n);
        scratch.copy_from_slice(&cumulative);
        let (_, qth, _) = scratch.select_nth_unstable_by(q - 1, |a, b| b.total_cmp(a));
        thresholds.push(*qth);
    }
    CascadeModel::new(plan.clone(), thresholds, target_vrs.to_vec(), n)
}

/// `ceil(vr * n)`, clamped to `1..=n`. The small slack keeps products such as
/// `0.999 * 1000` from rounding up past an exact integer.
pub(crate) fn required_passers(vr: f64, n: usize) -> usize {
    let q = (vr * n as f64 - 1e-9).ceil();
    (q.max(1.0) as usize).min(n)
}

/// Outcome of one cascaded comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    /// Full cosine if every stage passed, otherwise the partial score at the
    /// rejecting stage.
    pub score: f64,
    pub stages_passed: usize,
    pub rejected_at: Option<usize>,
}

impl MatchResult {
    fn rejected_at(score: f64, stage: usize) -> Self {
        Self {
            score,
            stages_passed: stage,
            rejected_at: Some(stage),
        }
    }

    fn survived(score: f64, sn: usize) -> Self {
        Self {
            score,
            stages_passed: sn,
            rejected_at: None,
        }
    }

    pub fn rejected(&self) -> bool {
        self.rejected_at.is_some()
    }

    /// Multiply-adds this comparison needed under `plan`.
    pub fn work(&self, plan: &StagePlan) -> usize {
        match self.rejected_at {
            Some(k) => plan.boundaries()[k],
            None => plan.dim(),
        }
    }
}

/// Ranking order for cascade results: more stages passed first, then higher
/// score. Returns `Ordering::Less` when `a` ranks ahead of `b`.
pub fn rank_order(a: &MatchResult, b: &MatchResult) -> Ordering {
    b.stages_passed
        .cmp(&a.stages_passed)
        .then_with(|| b.score.total_cmp(&a.score))
}

/// Multiply-add tally for instrumented matching.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct WorkCounter {
    pub multiply_adds: u64,
}

#[inline(always)]
fn run_cascade<const COUNT: bool>(
    x: &[f32],
    y: &[f32],
    model: &CascadeModel,
    counter: &mut WorkCounter,
) -> MatchResult {
    let mut s = 0.0;
    let mut start = 0;
    for (k, (&end, &t)) in model.plan.boundaries.iter().zip(&model.thresholds).enumerate() {
        s = accumulate(&x[start..end], &y[start..end], s);
        if COUNT {
            counter.multiply_adds += (end - start) as u64;
        }
        start = end;
        if s < t {
            return MatchResult::rejected_at(s, k);
        }
    }
    MatchResult::survived(s, model.stage_count())
}

fn check_pair(x: &[f32], y: &[f32], model: &CascadeModel) -> Result<()> {
    check_dim(model.dim(), x.len())?;
    check_dim(model.dim(), y.len())
}

/// Early-exit matching of two unit templates.
pub fn cascade_match(x: &[f32], y: &[f32], model: &CascadeModel) -> Result<MatchResult> {
    check_pair(x, y, model)?;
    Ok(run_cascade::<false>(x, y, model, &mut WorkCounter::default()))
}

/// Same as [`cascade_match`], also counting every multiply-add performed.
pub fn cascade_match_counted(
    x: &[f32],
    y: &[f32],
    model: &CascadeModel,
    counter: &mut WorkCounter,
) -> Result<MatchResult> {
    check_pair(x, y, model)?;
    Ok(run_cascade::<true>(x, y, model, counter))
}

/// A ranked gallery entry from cascaded identification.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub id: String,
    pub result: MatchResult,
}

/// A ranked gallery entry from a full linear scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Keeps the best `k` entries seen so far, best first. Entries are offered in
/// gallery order and only displace strictly worse ones, so ties keep the
/// earlier gallery index ahead.
struct TopK<T> {
    k: usize,
    items: Vec<(usize, T)>,
}

impl<T: Copy> TopK<T> {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, index: usize, value: T, order: impl Fn(&T, &T) -> Ordering) {
        if self.items.len() == self.k {
            match self.items.last() {
                Some((_, worst)) if order(&value, worst) == Ordering::Less => {}
                _ => return,
            }
        }
        let pos = self
            .items
            .iter()
            .position(|(_, v)| order(&value, v) == Ordering::Less)
            .unwrap_or(self.items.len());
        self.items.insert(pos, (index, value));
        self.items.truncate(self.k);
    }
}

fn check_gallery(probe: &Template, gallery: &[Template], dim: usize, top_k: usize) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be positive".into()));
    }
    check_dim(dim, probe.dim())?;
    gallery.iter().try_for_each(|g| check_dim(dim, g.dim()))
}

/// Ranks the gallery against `probe` with cascaded matching and returns the
/// best `top_k` entries.
pub fn identify(
    probe: &Template,
    gallery: &[Template],
    model: &CascadeModel,
    top_k: usize,
) -> Result<Vec<Candidate>> {
    check_gallery(probe, gallery, model.dim(), top_k)?;
    let mut best = TopK::new(top_k);
    let mut unused = WorkCounter::default();
    for (i, g) in gallery.iter().enumerate() {
        let r = run_cascade::<false>(probe.features(), g.features(), model, &mut unused);
        best.offer(i, r, rank_order);
    }
    Ok(best
        .items
        .into_iter()
        .map(|(index, result)| Candidate {
            index,
            id: gallery[index].id.clone(),
            result,
        })
        .collect())
}

/// Instrumented [`identify`]: also records every result's stage outcome in
/// `stage_counts` (index `k` counts rejections at stage `k`, index `sn`
/// counts survivors) and every multiply-add in `counter`.
pub fn identify_counted(
    probe: &Template,
    gallery: &[Template],
    model: &CascadeModel,
    top_k: usize,
    stage_counts: &mut [u64],
    counter: &mut WorkCounter,
) -> Result<Vec<Candidate>> {
    check_gallery(probe, gallery, model.dim(), top_k)?;
    if stage_counts.len() != model.stage_count() + 1 {
        return Err(Error::InvalidArgument(format!(
            "stage histogram needs {} slots",
            model.stage_count() + 1
        )));
    }
    let mut best = TopK::new(top_k);
    for (i, g) in gallery.iter().enumerate() {
        let r = run_cascade::<true>(probe.features(), g.features(), model, counter);
        stage_counts[r.stages_passed] += 1;
        best.offer(i, r, rank_order);
    }
    Ok(best
        .items
        .into_iter()
        .map(|(index, result)| Candidate {
            index,
            id: gallery[index].id.clone(),
            result,
        })
        .collect())
}

/// Exhaustive full-cosine ranking, the baseline the cascade is measured
/// against.
pub fn linear_scan(probe: &Template, gallery: &[Template], top_k: usize) -> Result<Vec<Hit>> {
    check_gallery(probe, gallery, probe.dim(), top_k)?;
    let mut best = TopK::new(top_k);
    for (i, g) in gallery.iter().enumerate() {
        best.offer(i, dot(probe.features(), g.features()), |a: &f64, b: &f64| {
            b.total_cmp(a)
        });
    }
    Ok(best
        .items
        .into_iter()
        .map(|(index, score)| Hit {
            index,
            id: gallery[index].id.clone(),
            score,
        })
        .collect())
}

/// Drops the trailing stages, keeping the first `keep_stages`.
pub fn truncate_model(model: &CascadeModel, keep_stages: usize) -> Result<CascadeModel> {
    let sn = model.stage_count();
    if keep_stages == 0 || keep_stages > sn {
        return Err(Error::InvalidArgument(format!(
            "keep_stages must be in 1..={sn}, got {keep_stages}"
        )));
    }
    CascadeModel::new(
        StagePlan::new(model.plan.boundaries[..keep_stages].to_vec())?,
        model.thresholds[..keep_stages].to_vec(),
        model.target_vrs[..keep_stages].to_vec(),
        model.train_count,
    )
}

/// Keeps the first `dim` features and re-normalizes them to unit length.
pub fn truncate_template(t: &Template, dim: usize) -> Result<Template> {
    if dim == 0 || dim > t.dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot truncate a {}-dim template to {dim}",
            t.dim()
        )));
    }
    if dim == t.dim() {
        return Ok(t.clone());
    }
    let prefix: Vec<f64> = t.features[..dim].iter().map(|&v| f64::from(v)).collect();
    Template::from_raw(t.id.clone(), &prefix)
}
