//! First-order Takagi–Sugeno ANFIS with Gaussian memberships.
//!
//! Rules come from subtractive clustering of the (normalised) inputs, so the
//! rule count follows the data rather than a full grid over four inputs.
//! Training alternates a recursive least-squares solve for the consequents
//! with a gradient step on the membership centres and widths.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adapt::{Knob, KnobBounds, MinMax, OperatingCondition, ParameterAdapter};
use crate::error::{Error, Result};
use crate::mpc::MpcParams;
use crate::nn::{fit_input_scaling, split_indices, usable_records};
use crate::pso::TuningRecord;

pub const N_IN: usize = 4;
/// Consequent coefficients per rule: one per input plus a constant.
pub const N_CONSEQ: usize = N_IN + 1;
/// Below this total firing strength the rule weights fall back to uniform.
pub const MIN_STRENGTH: f64 = 1e-12;
pub const SIGMA_FLOOR: f64 = 1e-3;
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub centers: [f64; N_IN],
    pub sigmas: [f64; N_IN],
    /// `p1..p4` then the constant term.
    pub consequent: [f64; N_CONSEQ],
}

impl Rule {
    pub fn membership(&self, j: usize, x: f64) -> f64 {
        let d = x - self.centers[j];
        (-d * d / (2.0 * self.sigmas[j] * self.sigmas[j])).exp()
    }

    pub fn strength(&self, x: &[f64; N_IN]) -> f64 {
        (0..N_IN).map(|j| self.membership(j, x[j])).product()
    }

    pub fn output(&self, x: &[f64; N_IN]) -> f64 {
        self.consequent[N_IN] + self.consequent[..N_IN].iter().zip(x).map(|(p, v)| p * v).sum::<f64>()
    }
}

/// Intermediate values of one forward pass, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnfisTrace {
    /// Layer 1, `[rule][input]`.
    pub memberships: Vec<[f64; N_IN]>,
    /// Layer 2.
    pub strengths: Vec<f64>,
    /// Layer 3.
    pub normalized: Vec<f64>,
    /// Rule polynomials `f_i(x)`.
    pub rule_outputs: Vec<f64>,
    /// Layer 4, `normalized[i] * rule_outputs[i]`.
    pub weighted: Vec<f64>,
    /// Layer 5.
    pub output: f64,
    /// Set when the input fired no rule and uniform weights were used.
    pub uniform_fallback: bool,
}

/// Rule base on normalised inputs; knob-level scaling lives in [`AnfisModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleBase {
    pub rules: Vec<Rule>,
}

impl RuleBase {
    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::Empty("rule base"));
        }
        for r in &self.rules {
            if r.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::invalid("anfis.sigma", "every width must be finite and > 0"));
            }
            if r.centers.iter().chain(&r.consequent).any(|v| !v.is_finite()) {
                return Err(Error::invalid("anfis.rule", "non-finite centre or coefficient"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64; N_IN]) -> AnfisTrace {
        let memberships: Vec<[f64; N_IN]> = self
            .rules
            .iter()
            .map(|r| std::array::from_fn(|j| r.membership(j, x[j])))
            .collect();
        let strengths: Vec<f64> = memberships.iter().map(|m| m.iter().product()).collect();
        let total: f64 = strengths.iter().sum();
        let uniform_fallback = !(total >= MIN_STRENGTH);
        let normalized: Vec<f64> = if uniform_fallback {
            vec![1.0 / self.rules.len() as f64; self.rules.len()]
        } else {
            strengths.iter().map(|w| w / total).collect()
        };
        let rule_outputs: Vec<f64> = self.rules.iter().map(|r| r.output(x)).collect();
        let weighted: Vec<f64> = normalized.iter().zip(&rule_outputs).map(|(w, f)| w * f).collect();
        let output = weighted.iter().sum();
        AnfisTrace {
            memberships,
            strengths,
            normalized,
            rule_outputs,
            weighted,
            output,
            uniform_fallback,
        }
    }

    pub fn eval(&self, x: &[f64; N_IN]) -> f64 {
        self.forward(x).output
    }

    pub fn mse(&self, xs: &[[f64; N_IN]], ts: &[f64]) -> f64 {
        let n = xs.len().max(1) as f64;
        xs.iter().zip(ts).map(|(x, t)| (self.eval(x) - t).powi(2)).sum::<f64>() / n
    }

    /// Regressor row of the consequent least-squares problem.
    fn consequent_row(&self, x: &[f64; N_IN]) -> Vec<f64> {
        let tr = self.forward(x);
        let mut row = Vec::with_capacity(self.rules.len() * N_CONSEQ);
        for wb in tr.normalized {
            row.extend(x.iter().map(|v| wb * v));
            row.push(wb);
        }
        row
    }

    /// Least-squares design matrix over a batch, row-major.
    pub fn design_matrix(&self, xs: &[[f64; N_IN]]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.consequent_row(x)).collect()
    }

    fn set_consequents(&mut self, theta: &[f64]) {
        for (rule, chunk) in self.rules.iter_mut().zip(theta.chunks(N_CONSEQ)) {
            rule.consequent.copy_from_slice(chunk);
        }
    }

    /// Solves the consequents with premises frozen.
    ///
    /// Recursive least squares over the batch from `θ = 0`, `P = p0·I` with
    /// forgetting factor `λ` ends at the minimiser of
    /// `Σ_k λ^(N-k) (t_k − a_kᵀθ)² + λ^N/p0 ‖θ‖²`; that closed form is
    /// solved directly here.
    pub fn fit_consequents(&mut self, xs: &[[f64; N_IN]], ts: &[f64], forgetting: f64, p0: f64) -> Result<()> {
        let n = self.rules.len() * N_CONSEQ;
        let mut ata = DMatrix::<f64>::zeros(n, n);
        let mut aty = DVector::<f64>::zeros(n);
        let len = xs.len() as i32;
        for (k, (x, &t)) in xs.iter().zip(ts).enumerate() {
            let a = DVector::from_vec(self.consequent_row(x));
            let wk = forgetting.powi(len - 1 - k as i32);
            ata.syger(wk, &a, &a, 1.0);
            aty.axpy(wk * t, &a, 1.0);
        }
        ata.fill_upper_triangle_with_lower_triangle();
        let prior = forgetting.powi(len) / p0;
        for i in 0..n {
            ata[(i, i)] += prior;
        }
        let theta = ata
            .cholesky()
            .ok_or_else(|| Error::Numeric("RLS information matrix is not positive definite".into()))?
            .solve(&aty);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("RLS estimate became non-finite".into()));
        }
        self.set_consequents(theta.as_slice());
        Ok(())
    }

    /// MSE and its gradient with respect to every `(c, σ)`, laid out as
    /// `[rule][input]` for centres and widths.
    pub fn premise_gradient(&self, xs: &[[f64; N_IN]], ts: &[f64]) -> (f64, Vec<[f64; N_IN]>, Vec<[f64; N_IN]>) {
        let r = self.rules.len();
        let mut gc = vec![[0.0; N_IN]; r];
        let mut gs = vec![[0.0; N_IN]; r];
        let n = xs.len().max(1) as f64;
        let mut loss = 0.0;
        for (x, &t) in xs.iter().zip(ts) {
            let tr = self.forward(x);
            let e = tr.output - t;
            loss += e * e;
            if tr.uniform_fallback {
                continue;
            }
            let total: f64 = tr.strengths.iter().sum();
            for (i, rule) in self.rules.iter().enumerate() {
                // d out / d w_i, times d w_i / d(c, σ)
                let d_w = 2.0 * e / n * (tr.rule_outputs[i] - tr.output) / total * tr.strengths[i];
                for j in 0..N_IN {
                    let d = x[j] - rule.centers[j];
                    let s2 = rule.sigmas[j] * rule.sigmas[j];
                    gc[i][j] += d_w * d / s2;
                    gs[i][j] += d_w * d * d / (s2 * rule.sigmas[j]);
                }
            }
        }
        (loss / n, gc, gs)
    }

    fn premise_step(&mut self, gc: &[[f64; N_IN]], gs: &[[f64; N_IN]], lr: f64) {
        for ((rule, c), s) in self.rules.iter_mut().zip(gc).zip(gs) {
            for j in 0..N_IN {
                rule.centers[j] -= lr * c[j];
                rule.sigmas[j] = (rule.sigmas[j] - lr * s[j]).max(SIGMA_FLOOR);
            }
        }
    }
}

/// Subtractive clustering of points in the unit cube. Returns the chosen
/// centres in selection order.
pub fn subtractive_clustering(points: &[[f64; N_IN]], radius: f64) -> Result<Vec<[f64; N_IN]>> {
    if points.is_empty() {
        return Err(Error::Empty("clustering input"));
    }
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(Error::invalid("anfis.radius", format!("must lie in (0, 1], got {radius}")));
    }
    let dist2 = |a: &[f64; N_IN], b: &[f64; N_IN]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let alpha = 4.0 / (radius * radius);
    let beta = 4.0 / (1.5 * radius).powi(2);
    let mut potential: Vec<f64> = points
        .iter()
        .map(|p| points.iter().map(|q| (-alpha * dist2(p, q)).exp()).sum())
        .collect();
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
    };
    let (first_idx, first) = argmax(&potential);
    let mut centres = Vec::new();
    let (mut idx, mut pk) = (first_idx, first);
    loop {
        let c = points[idx];
        centres.push(c);
        for (pot, q) in potential.iter_mut().zip(points) {
            *pot -= pk * (-beta * dist2(&c, q)).exp();
        }
        (idx, pk) = argmax(&potential);
        if !(pk >= 0.15 * first) {
            break;
        }
    }
    if centres.len() == 1 && points.iter().all(|p| p == &points[0]) && points.len() > 1 {
        log::warn!("all clustering inputs coincide; using a single rule");
    }
    Ok(centres)
}

/// One rule per cluster centre with width `radius/√8` and zero consequents.
pub fn init_rule_base(points: &[[f64; N_IN]], radius: f64) -> Result<RuleBase> {
    let sigma = radius / 8f64.sqrt();
    let rules = subtractive_clustering(points, radius)?
        .into_iter()
        .map(|c| Rule {
            centers: c,
            sigmas: [sigma; N_IN],
            consequent: [0.0; N_CONSEQ],
        })
        .collect();
    Ok(RuleBase { rules })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridTrainConfig {
    pub epochs: usize,
    pub premise_learning_rate: f64,
    pub forgetting: f64,
    pub radius: f64,
    /// Initial RLS covariance scale.
    pub rls_p0: f64,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for HybridTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            premise_learning_rate: 0.01,
            forgetting: 1.0,
            radius: 0.5,
            rls_p0: 1e6,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl HybridTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("anfis.epochs", "must be >= 1"));
        }
        crate::error::ensure_positive("anfis.premise_learning_rate", self.premise_learning_rate)?;
        crate::error::ensure_positive("anfis.rls_p0", self.rls_p0)?;
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::invalid("anfis.forgetting", format!("must lie in (0, 1], got {}", self.forgetting)));
        }
        if !(self.radius > 0.0 && self.radius <= 1.0) {
            return Err(Error::invalid("anfis.radius", format!("must lie in (0, 1], got {}", self.radius)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::invalid("anfis.holdout", format!("must lie in [0, 1), got {}", self.holdout)));
        }
        Ok(())
    }
}

/// Training MSE around the two halves of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub before_rls: f64,
    pub after_rls: f64,
    pub after_premise: f64,
}

/// Hybrid training on normalised data. Each epoch re-solves the
/// consequents, then takes one gradient step on the premises; a last
/// consequent solve follows the final epoch.
pub fn train_hybrid(rb: &mut RuleBase, xs: &[[f64; N_IN]], ts: &[f64], cfg: &HybridTrainConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    rb.validate()?;
    if xs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if xs.len() != ts.len() {
        return Err(Error::Dimension(format!("{} inputs vs {} targets", xs.len(), ts.len())));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let before_rls = rb.mse(xs, ts);
        rb.fit_consequents(xs, ts, cfg.forgetting, cfg.rls_p0).map_err(|e| Error::Training {
            epoch,
            reason: e.to_string(),
        })?;
        let (after_rls, gc, gs) = rb.premise_gradient(xs, ts);
        rb.premise_step(&gc, &gs, cfg.premise_learning_rate);
        let after_premise = rb.mse(xs, ts);
        if !after_premise.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("loss is {after_premise}"),
            });
        }
        history.push(EpochLoss {
            before_rls,
            after_rls,
            after_premise,
        });
    }
    rb.fit_consequents(xs, ts, cfg.forgetting, cfg.rls_p0).map_err(|e| Error::Training {
        epoch: cfg.epochs,
        reason: e.to_string(),
    })?;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnfisMeta {
    pub seed: u64,
    pub epochs: usize,
    pub radius: f64,
    pub premise_learning_rate: f64,
    pub train_rows: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub validation_mse: Option<f64>,
    pub loss_curve: Vec<EpochLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnfisModel {
    pub knob: Knob,
    pub rule_base: RuleBase,
    pub inputs: [MinMax; N_IN],
    pub output: MinMax,
    pub meta: AnfisMeta,
}

impl AnfisModel {
    pub fn normalize_input(&self, cond: &OperatingCondition) -> [f64; N_IN] {
        let raw = cond.to_array();
        std::array::from_fn(|i| self.inputs[i].normalize(raw[i]))
    }

    pub fn predict(&self, cond: &OperatingCondition) -> f64 {
        self.output.denormalize(self.rule_base.eval(&self.normalize_input(cond)))
    }

    pub fn rule_count(&self) -> usize {
        self.rule_base.rules.len()
    }
}

pub fn train_model(knob: Knob, records: &[TuningRecord], cfg: &HybridTrainConfig) -> Result<AnfisModel> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let rows = usable_records(records);
    if rows.is_empty() {
        return Err(Error::Empty("dataset has no usable rows"));
    }
    let inputs = fit_input_scaling(&rows);
    let output = MinMax::fit(rows.iter().map(|r| knob.of(&r.optimal)));
    let xs: Vec<[f64; N_IN]> = rows
        .iter()
        .map(|r| {
            let a = r.condition.to_array();
            std::array::from_fn(|i| inputs[i].normalize(a[i]))
        })
        .collect();
    let ts: Vec<f64> = rows.iter().map(|r| output.normalize(knob.of(&r.optimal))).collect();
    let (train, hold) = split_indices(rows.len(), cfg.holdout, cfg.seed);
    let (tx, tt): (Vec<_>, Vec<_>) = train.iter().map(|&i| (xs[i], ts[i])).unzip();
    let (hx, ht): (Vec<_>, Vec<_>) = hold.iter().map(|&i| (xs[i], ts[i])).unzip();

    let mut rb = init_rule_base(&tx, cfg.radius)?;
    let initial_loss = rb.mse(&tx, &tt);
    let loss_curve = train_hybrid(&mut rb, &tx, &tt, cfg)?;
    let meta = AnfisMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        radius: cfg.radius,
        premise_learning_rate: cfg.premise_learning_rate,
        train_rows: tx.len(),
        initial_loss,
        final_loss: rb.mse(&tx, &tt),
        validation_mse: (!hx.is_empty()).then(|| rb.mse(&hx, &ht)),
        loss_curve,
    };
    log::info!(
        "anfis {knob}: {} rules, loss {:.3e} -> {:.3e}, validation {:?}, {:.1}s",
        rb.rules.len(),
        meta.initial_loss,
        meta.final_loss,
        meta.validation_mse,
        start.elapsed().as_secs_f64()
    );
    Ok(AnfisModel {
        knob,
        rule_base: rb,
        inputs,
        output,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnfisAdapter {
    pub models: [AnfisModel; 4],
    pub bounds: KnobBounds,
}

impl AnfisAdapter {
    pub fn train(records: &[TuningRecord], cfg: &HybridTrainConfig, bounds: KnobBounds) -> Result<Self> {
        let [np, nc, q, r] = Knob::ALL.map(|k| train_model(k, records, cfg));
        Ok(Self {
            models: [np?, nc?, q?, r?],
            bounds,
        })
    }

    pub fn raw_prediction(&self, cond: &OperatingCondition) -> [f64; 4] {
        std::array::from_fn(|i| self.models[i].predict(cond))
    }

    pub fn rule_counts(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.models[i].rule_count())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AnfisFile {
            format: FORMAT.into(),
            version: MODEL_VERSION,
            bounds: self.bounds,
            models: self.models.to_vec(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: AnfisFile = serde_json::from_str(s)?;
        if f.format != FORMAT || f.version != MODEL_VERSION {
            return Err(Error::invalid(
                "model",
                format!("expected {FORMAT} v{MODEL_VERSION}, found {} v{}", f.format, f.version),
            ));
        }
        f.bounds.validate()?;
        for (knob, m) in Knob::ALL.iter().zip(&f.models) {
            if m.knob != *knob {
                return Err(Error::invalid("model", format!("model order: expected {knob}, found {}", m.knob)));
            }
            m.rule_base.validate()?;
        }
        let models: [AnfisModel; 4] = f
            .models
            .try_into()
            .map_err(|v: Vec<AnfisModel>| Error::Dimension(format!("expected 4 models, found {}", v.len())))?;
        Ok(Self { models, bounds: f.bounds })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl ParameterAdapter for AnfisAdapter {
    fn adapt(&self, cond: &OperatingCondition) -> MpcParams {
        self.bounds.snap(self.raw_prediction(cond))
    }

    fn name(&self) -> &str {
        "anfis"
    }
}

const FORMAT: &str = "anfis-adapter";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnfisFile {
    format: String,
    version: u32,
    bounds: KnobBounds,
    models: Vec<AnfisModel>,
}
