//! Feedforward 4-16-8-1 regressors, one per MPC knob, trained with
//! full-batch gradient descent with momentum.
//!
//! Hidden layers use the logistic sigmoid and the output a ReLU. Inputs and
//! targets are min-max scaled to `[0, 1]` with ranges stored in the model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{Knob, KnobBounds, MinMax, OperatingCondition, ParameterAdapter};
use crate::error::{Error, Result};
use crate::mpc::MpcParams;
use crate::pso::TuningRecord;

pub const N_IN: usize = 4;
pub const N_H1: usize = 16;
pub const N_H2: usize = 8;
/// Scalar weights in one network, biases included.
pub const N_PARAMS: usize = N_H1 * (N_IN + 1) + N_H2 * (N_H1 + 1) + N_H2 + 1;

/// File format version written into model JSON.
pub const MODEL_VERSION: u32 = 1;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Raw network weights. Each row ends with the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: [[f64; N_IN + 1]; N_H1],
    pub w2: [[f64; N_H1 + 1]; N_H2],
    pub w3: [f64; N_H2 + 1],
}

struct Trace {
    h1: [f64; N_H1],
    h2: [f64; N_H2],
    z3: f64,
}

impl Mlp {
    pub fn zeros() -> Self {
        Self {
            w1: [[0.0; N_IN + 1]; N_H1],
            w2: [[0.0; N_H1 + 1]; N_H2],
            w3: [0.0; N_H2 + 1],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn xavier(rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros();
        let lim = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (l1, l2, l3) = (lim(N_IN, N_H1), lim(N_H1, N_H2), lim(N_H2, 1));
        for row in &mut net.w1 {
            for w in &mut row[..N_IN] {
                *w = rng.random_range(-l1..=l1);
            }
        }
        for row in &mut net.w2 {
            for w in &mut row[..N_H1] {
                *w = rng.random_range(-l2..=l2);
            }
        }
        for w in &mut net.w3[..N_H2] {
            *w = rng.random_range(-l3..=l3);
        }
        net
    }

    fn trace(&self, x: &[f64; N_IN]) -> Trace {
        let mut h1 = [0.0; N_H1];
        for (h, row) in h1.iter_mut().zip(&self.w1) {
            let z = row[N_IN] + row[..N_IN].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *h = sigmoid(z);
        }
        let mut h2 = [0.0; N_H2];
        for (h, row) in h2.iter_mut().zip(&self.w2) {
            let z = row[N_H1] + row[..N_H1].iter().zip(&h1).map(|(w, v)| w * v).sum::<f64>();
            *h = sigmoid(z);
        }
        let z3 = self.w3[N_H2] + self.w3[..N_H2].iter().zip(&h2).map(|(w, v)| w * v).sum::<f64>();
        Trace { h1, h2, z3 }
    }

    /// Output for an already normalised input; never negative.
    pub fn forward(&self, x: &[f64; N_IN]) -> f64 {
        self.trace(x).z3.max(0.0)
    }

    /// d(output)/d(input) at a normalised input.
    pub fn input_jacobian(&self, x: &[f64; N_IN]) -> [f64; N_IN] {
        let t = self.trace(x);
        let mut out = [0.0; N_IN];
        if t.z3 <= 0.0 {
            return out;
        }
        let mut d1 = [0.0; N_H1];
        for (j, row) in self.w2.iter().enumerate() {
            let d2 = self.w3[j] * t.h2[j] * (1.0 - t.h2[j]);
            for (k, d) in d1.iter_mut().enumerate() {
                *d += d2 * row[k];
            }
        }
        for (k, row) in self.w1.iter().enumerate() {
            let d = d1[k] * t.h1[k] * (1.0 - t.h1[k]);
            for (o, w) in out.iter_mut().zip(&row[..N_IN]) {
                *o += d * w;
            }
        }
        out
    }

    /// Mean squared error over the batch and its gradient.
    pub fn loss_and_gradient(&self, xs: &[[f64; N_IN]], ts: &[f64]) -> (f64, Mlp) {
        let mut g = Mlp::zeros();
        let n = xs.len().max(1) as f64;
        let mut loss = 0.0;
        for (x, &t) in xs.iter().zip(ts) {
            let tr = self.trace(x);
            let e = tr.z3.max(0.0) - t;
            loss += e * e;
            if tr.z3 <= 0.0 {
                continue;
            }
            let d3 = 2.0 * e / n;
            for (gw, h) in g.w3.iter_mut().zip(&tr.h2) {
                *gw += d3 * h;
            }
            g.w3[N_H2] += d3;
            let mut dh1 = [0.0; N_H1];
            for j in 0..N_H2 {
                let d2 = d3 * self.w3[j] * tr.h2[j] * (1.0 - tr.h2[j]);
                let (grow, wrow) = (&mut g.w2[j], &self.w2[j]);
                for k in 0..N_H1 {
                    grow[k] += d2 * tr.h1[k];
                    dh1[k] += d2 * wrow[k];
                }
                grow[N_H1] += d2;
            }
            for k in 0..N_H1 {
                let d1 = dh1[k] * tr.h1[k] * (1.0 - tr.h1[k]);
                let grow = &mut g.w1[k];
                for i in 0..N_IN {
                    grow[i] += d1 * x[i];
                }
                grow[N_IN] += d1;
            }
        }
        (loss / n, g)
    }

    pub fn mse(&self, xs: &[[f64; N_IN]], ts: &[f64]) -> f64 {
        let n = xs.len().max(1) as f64;
        xs.iter().zip(ts).map(|(x, t)| (self.forward(x) - t).powi(2)).sum::<f64>() / n
    }

    /// Weights in row-major order: `w1`, `w2`, then `w3`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAMS);
        self.w1.iter().for_each(|r| v.extend_from_slice(r));
        self.w2.iter().for_each(|r| v.extend_from_slice(r));
        v.extend_from_slice(&self.w3);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != N_PARAMS {
            return Err(Error::Dimension(format!("expected {N_PARAMS} weights, got {}", v.len())));
        }
        let mut net = Self::zeros();
        let mut it = v.iter().copied();
        for w in net.w1.iter_mut().flatten().chain(net.w2.iter_mut().flatten()).chain(net.w3.iter_mut()) {
            *w = it.next().unwrap_or_default();
        }
        Ok(net)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1.iter_mut().flatten().chain(self.w2.iter_mut().flatten()).chain(self.w3.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().flatten().chain(self.w2.iter().flatten()).chain(self.w3.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of rows held out for the validation MSE.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 0.05,
            momentum: 0.9,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("nn.epochs", "must be >= 1"));
        }
        crate::error::ensure_positive("nn.learning_rate", self.learning_rate)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("nn.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::invalid("nn.holdout", format!("must lie in [0, 1), got {}", self.holdout)));
        }
        Ok(())
    }
}

/// Full-batch gradient descent with momentum on normalised data. Returns
/// the loss seen at the start of every epoch.
pub fn train_mlp(net: &mut Mlp, xs: &[[f64; N_IN]], ts: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if xs.len() != ts.len() {
        return Err(Error::Dimension(format!("{} inputs vs {} targets", xs.len(), ts.len())));
    }
    let mut velocity = Mlp::zeros();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = net.loss_and_gradient(xs, ts);
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("loss is {loss}"),
            });
        }
        history.push(loss);
        for ((w, v), g) in net.params_mut().zip(velocity.params_mut()).zip(grad.params()) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *w += *v;
        }
    }
    if !net.is_finite() {
        return Err(Error::Training {
            epoch: cfg.epochs,
            reason: "weights became non-finite".into(),
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub train_rows: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Normalised MSE on the held-out rows, if any were held out.
    pub validation_mse: Option<f64>,
    /// Training MSE before each epoch.
    pub loss_curve: Vec<f64>,
}

/// One trained regressor with its scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    pub knob: Knob,
    pub net: Mlp,
    pub inputs: [MinMax; N_IN],
    pub output: MinMax,
    pub meta: TrainingMeta,
}

impl MlpNetwork {
    pub fn normalize_input(&self, cond: &OperatingCondition) -> [f64; N_IN] {
        let raw = cond.to_array();
        std::array::from_fn(|i| self.inputs[i].normalize(raw[i]))
    }

    /// Prediction in knob units.
    pub fn predict(&self, cond: &OperatingCondition) -> f64 {
        self.output.denormalize(self.net.forward(&self.normalize_input(cond)))
    }
}

/// Rows usable for training: finite MSE and a finite condition.
pub fn usable_records(records: &[TuningRecord]) -> Vec<&TuningRecord> {
    records
        .iter()
        .filter(|r| r.achieved_mse.is_finite() && r.condition.to_array().iter().all(|v| v.is_finite()))
        .collect()
}

/// Deterministic split into (train, holdout) index sets.
pub fn split_indices(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_F42D_4C95_7F2D);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_hold = ((n as f64) * holdout).floor() as usize;
    let n_hold = n_hold.min(n.saturating_sub(1));
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

/// Scales the four inputs of `records` with ranges fitted on them.
pub fn fit_input_scaling(records: &[&TuningRecord]) -> [MinMax; N_IN] {
    std::array::from_fn(|i| MinMax::fit(records.iter().map(|r| r.condition.to_array()[i])))
}

pub fn train_network(knob: Knob, records: &[TuningRecord], cfg: &TrainConfig) -> Result<MlpNetwork> {
    cfg.validate()?;
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
    let pick = |ids: &[usize]| -> (Vec<[f64; N_IN]>, Vec<f64>) { (ids.iter().map(|&i| xs[i]).collect(), ids.iter().map(|&i| ts[i]).collect()) };
    let (tx, tt) = pick(&train);
    let (hx, ht) = pick(&hold);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(knob.index() as u64));
    let mut net = Mlp::xavier(&mut rng);
    // centre the output pre-activation on the mean target so the ReLU
    // starts out active
    let mean_t = tt.iter().sum::<f64>() / tt.len() as f64;
    let mean_z = tx.iter().map(|x| net.trace(x).z3).sum::<f64>() / tx.len() as f64;
    net.w3[N_H2] = mean_t - mean_z;
    let history = train_mlp(&mut net, &tx, &tt, cfg)?;
    let meta = TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        train_rows: tx.len(),
        initial_loss: history[0],
        final_loss: net.mse(&tx, &tt),
        validation_mse: (!hx.is_empty()).then(|| net.mse(&hx, &ht)),
        loss_curve: history,
    };
    log::info!(
        "nn {knob}: loss {:.3e} -> {:.3e}, validation {:?}",
        meta.initial_loss,
        meta.final_loss,
        meta.validation_mse
    );
    Ok(MlpNetwork {
        knob,
        net,
        inputs,
        output,
        meta,
    })
}

/// Four regressors mapping operating conditions to MPC knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct NnAdapter {
    /// Indexed by [`Knob::index`].
    pub nets: [MlpNetwork; 4],
    pub bounds: KnobBounds,
}

impl NnAdapter {
    pub fn train(records: &[TuningRecord], cfg: &TrainConfig, bounds: KnobBounds) -> Result<Self> {
        let [np, nc, q, r] = Knob::ALL.map(|k| train_network(k, records, cfg));
        Ok(Self {
            nets: [np?, nc?, q?, r?],
            bounds,
        })
    }

    pub fn raw_prediction(&self, cond: &OperatingCondition) -> [f64; 4] {
        std::array::from_fn(|i| self.nets[i].predict(cond))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NnFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<NnFile>(s)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl ParameterAdapter for NnAdapter {
    fn adapt(&self, cond: &OperatingCondition) -> MpcParams {
        self.bounds.snap(self.raw_prediction(cond))
    }

    fn name(&self) -> &str {
        "nn"
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NnFile {
    format: String,
    version: u32,
    bounds: KnobBounds,
    networks: Vec<NetFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    knob: Knob,
    /// `[rows, cols]` of each weight matrix, bias column included.
    shapes: Vec<[usize; 2]>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    w3: Vec<f64>,
    input_ranges: Vec<MinMax>,
    output_range: MinMax,
    meta: TrainingMeta,
}

const SHAPES: [[usize; 2]; 3] = [[N_H1, N_IN + 1], [N_H2, N_H1 + 1], [1, N_H2 + 1]];

impl From<&NnAdapter> for NnFile {
    fn from(a: &NnAdapter) -> Self {
        let networks = a
            .nets
            .iter()
            .map(|n| {
                let flat = n.net.to_flat();
                let (s1, s2) = (N_H1 * (N_IN + 1), N_H2 * (N_H1 + 1));
                NetFile {
                    knob: n.knob,
                    shapes: SHAPES.to_vec(),
                    w1: flat[..s1].to_vec(),
                    w2: flat[s1..s1 + s2].to_vec(),
                    w3: flat[s1 + s2..].to_vec(),
                    input_ranges: n.inputs.to_vec(),
                    output_range: n.output,
                    meta: n.meta.clone(),
                }
            })
            .collect();
        NnFile {
            format: "mlp-adapter".into(),
            version: MODEL_VERSION,
            bounds: a.bounds,
            networks,
        }
    }
}

impl TryFrom<NnFile> for NnAdapter {
    type Error = Error;

    fn try_from(f: NnFile) -> Result<Self> {
        if f.format != "mlp-adapter" || f.version != MODEL_VERSION {
            return Err(Error::invalid(
                "model",
                format!("expected mlp-adapter v{MODEL_VERSION}, found {} v{}", f.format, f.version),
            ));
        }
        f.bounds.validate()?;
        if f.networks.len() != 4 {
            return Err(Error::Dimension(format!("expected 4 networks, found {}", f.networks.len())));
        }
        let mut nets = Vec::with_capacity(4);
        for (knob, n) in Knob::ALL.into_iter().zip(f.networks) {
            if n.knob != knob {
                return Err(Error::invalid("model", format!("network order: expected {knob}, found {}", n.knob)));
            }
            if n.shapes != SHAPES {
                return Err(Error::Dimension(format!("{knob}: unexpected layer shapes {:?}", n.shapes)));
            }
            let flat: Vec<f64> = n.w1.into_iter().chain(n.w2).chain(n.w3).collect();
            let net = Mlp::from_flat(&flat)?;
            if !net.is_finite() {
                return Err(Error::Numeric(format!("{knob}: non-finite weights")));
            }
            let inputs: [MinMax; N_IN] = n
                .input_ranges
                .try_into()
                .map_err(|_| Error::Dimension(format!("{knob}: expected {N_IN} input ranges")))?;
            nets.push(MlpNetwork {
                knob,
                net,
                inputs,
                output: n.output_range,
                meta: n.meta,
            });
        }
        let nets: [MlpNetwork; 4] = nets.try_into().expect("four networks checked above");
        Ok(Self { nets, bounds: f.bounds })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_net(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::xavier(&mut rng);
        for w in net.params_mut() {
            *w += rng.random_range(-0.5..0.5);
        }
        // keep the output unit active
        net.w3[N_H2] = 1.0;
        net
    }

    fn random_batch(seed: u64, n: usize) -> (Vec<[f64; N_IN]>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let ts = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (xs, ts)
    }

    #[test]
    fn zero_network_outputs_zero() {
        assert_eq!(Mlp::zeros().forward(&[0.3, 0.1, 0.9, 0.5]), 0.0);
        let mut net = random_net(3);
        net.w3 = [0.0; N_H2 + 1];
        for x in [[0.0; 4], [1.0; 4], [0.2, 0.7, 0.1, 0.9]] {
            assert_eq!(net.forward(&x), 0.0);
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let net = random_net(11);
        let x = [0.3, 0.6, 0.2, 0.8];
        let jac = net.input_jacobian(&x);
        let h = 1e-6;
        for i in 0..N_IN {
            let (mut xp, mut xm) = (x, x);
            xp[i] += h;
            xm[i] -= h;
            let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * h);
            assert!((fd - jac[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "input {i}: {fd} vs {}", jac[i]);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let net = random_net(5);
        let (xs, ts) = random_batch(6, 20);
        let (_, grad) = net.loss_and_gradient(&xs, &ts);
        let g = grad.to_flat();
        let w = net.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // every layer plus random picks
        let mut picks = vec![0, N_IN, 80, 80 + N_H1, N_PARAMS - 1, N_PARAMS - 2];
        picks.extend((0..10).map(|_| rng.random_range(0..N_PARAMS)));
        let h = 1e-5;
        for &i in &picks {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let lp = Mlp::from_flat(&wp).unwrap().mse(&xs, &ts);
            let lm = Mlp::from_flat(&wm).unwrap().mse(&xs, &ts);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "weight {i}: fd {fd} analytic {}", g[i]);
        }
    }

    /// Textbook per-layer backprop with plain gradient descent, written
    /// independently of the production code.
    fn plain_gd_reference(net: &Mlp, xs: &[[f64; N_IN]], ts: &[f64], lr: f64, epochs: usize) -> Mlp {
        let mut w1: Vec<Vec<f64>> = net.w1.iter().map(|r| r.to_vec()).collect();
        let mut w2: Vec<Vec<f64>> = net.w2.iter().map(|r| r.to_vec()).collect();
        let mut w3: Vec<f64> = net.w3.to_vec();
        let n = xs.len() as f64;
        for _ in 0..epochs {
            let mut g1 = vec![vec![0.0; N_IN + 1]; N_H1];
            let mut g2 = vec![vec![0.0; N_H1 + 1]; N_H2];
            let mut g3 = vec![0.0; N_H2 + 1];
            for (x, t) in xs.iter().zip(ts) {
                let a0: Vec<f64> = x.iter().copied().chain([1.0]).collect();
                let a1: Vec<f64> = w1
                    .iter()
                    .map(|r| 1.0 / (1.0 + (-r.iter().zip(&a0).map(|(w, a)| w * a).sum::<f64>()).exp()))
                    .chain([1.0])
                    .collect();
                let a2: Vec<f64> = w2
                    .iter()
                    .map(|r| 1.0 / (1.0 + (-r.iter().zip(&a1).map(|(w, a)| w * a).sum::<f64>()).exp()))
                    .chain([1.0])
                    .collect();
                let z3: f64 = w3.iter().zip(&a2).map(|(w, a)| w * a).sum();
                if z3 <= 0.0 {
                    continue;
                }
                let delta3 = 2.0 * (z3 - t) / n;
                let delta2: Vec<f64> = (0..N_H2).map(|j| delta3 * w3[j] * a2[j] * (1.0 - a2[j])).collect();
                let delta1: Vec<f64> = (0..N_H1)
                    .map(|k| (0..N_H2).map(|j| delta2[j] * w2[j][k]).sum::<f64>() * a1[k] * (1.0 - a1[k]))
                    .collect();
                for (g, a) in g3.iter_mut().zip(&a2) {
                    *g += delta3 * a;
                }
                for (j, row) in g2.iter_mut().enumerate() {
                    for (g, a) in row.iter_mut().zip(&a1) {
                        *g += delta2[j] * a;
                    }
                }
                for (k, row) in g1.iter_mut().enumerate() {
                    for (g, a) in row.iter_mut().zip(&a0) {
                        *g += delta1[k] * a;
                    }
                }
            }
            for (w, g) in w3.iter_mut().zip(&g3) {
                *w -= lr * g;
            }
            for (r, gr) in w2.iter_mut().zip(&g2) {
                for (w, g) in r.iter_mut().zip(gr) {
                    *w -= lr * g;
                }
            }
            for (r, gr) in w1.iter_mut().zip(&g1) {
                for (w, g) in r.iter_mut().zip(gr) {
                    *w -= lr * g;
                }
            }
        }
        let flat: Vec<f64> = w1.into_iter().flatten().chain(w2.into_iter().flatten()).chain(w3).collect();
        Mlp::from_flat(&flat).unwrap()
    }

    #[test]
    fn zero_momentum_matches_plain_gradient_descent() {
        let start = random_net(21);
        let (xs, ts) = random_batch(22, 30);
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.5,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut net = start.clone();
        train_mlp(&mut net, &xs, &ts, &cfg).unwrap();
        let reference = plain_gd_reference(&start, &xs, &ts, 0.5, 10);
        for (a, b) in net.to_flat().iter().zip(reference.to_flat()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_dataset_is_learned() {
        let mut net = random_net(2);
        let xs = vec![[0.4, 0.2, 0.7, 0.1]; 16];
        let ts = vec![0.6; 16];
        let hist = train_mlp(&mut net, &xs, &ts, &TrainConfig::default()).unwrap();
        assert!(net.mse(&xs, &ts) < 1e-6, "{}", net.mse(&xs, &ts));
        assert!(hist.last().unwrap() < &hist[0]);
    }

    #[test]
    fn divergence_names_epoch() {
        let mut net = random_net(2);
        let (xs, ts) = random_batch(3, 8);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        let err = train_mlp(&mut net, &xs, &ts, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 9);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 9), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.5, 0).0, vec![0]);
    }

    fn toy_records() -> Vec<TuningRecord> {
        let mut out = Vec::new();
        for i in 0..6 {
            for j in 0..4 {
                let vx = 3.0 + 4.0 * i as f64;
                let mu = 0.5 + 0.1 * j as f64;
                out.push(TuningRecord {
                    condition: OperatingCondition { vx, wind: 0.0, mu, y_ref: 1.0 },
                    optimal: MpcParams {
                        np: 20 + i * 5,
                        nc: 3 + j,
                        q: 1.0 + vx,
                        r: 0.01 * (1.0 + mu),
                    },
                    achieved_mse: 0.1,
                });
            }
        }
        out.push(TuningRecord {
            condition: OperatingCondition { vx: 10.0, wind: 0.0, mu: 0.7, y_ref: 1.0 },
            optimal: MpcParams::default(),
            achieved_mse: f64::INFINITY,
        });
        out
    }

    #[test]
    fn adapter_json_roundtrip_is_exact() {
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let adapter = NnAdapter::train(&toy_records(), &cfg, KnobBounds::default()).unwrap();
        assert_eq!(adapter.nets[0].meta.train_rows, 22);
        let back = NnAdapter::from_json(&adapter.to_json().unwrap()).unwrap();
        assert_eq!(back, adapter);
        let cond = OperatingCondition { vx: 12.0, wind: 3.0, mu: 0.6, y_ref: -2.0 };
        assert_eq!(back.adapt(&cond), adapter.adapt(&cond));
    }

    #[test]
    fn corrupt_model_file_rejected() {
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let adapter = NnAdapter::train(&toy_records(), &cfg, KnobBounds::default()).unwrap();
        let json = adapter.to_json().unwrap();
        assert!(NnAdapter::from_json(&json.replace("\"version\": 1", "\"version\": 9")).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["networks"][1]["w2"].as_array_mut().unwrap().pop();
        assert!(NnAdapter::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn training_reduces_loss_on_structured_data() {
        let recs = toy_records();
        let net = train_network(Knob::Q, &recs, &TrainConfig { holdout: 0.0, ..TrainConfig::default() }).unwrap();
        assert!(net.meta.final_loss < 0.5 * net.meta.initial_loss, "{:?}", net.meta);
    }

    proptest! {
        #[test]
        fn adapted_knobs_are_always_valid(vx in -100.0f64..100.0, wind in -100.0f64..100.0, mu in -2.0f64..2.0, y in -50.0f64..50.0, seed in 0u64..4) {
            let cfg = TrainConfig { epochs: 3, seed, ..TrainConfig::default() };
            let adapter = NnAdapter::train(&toy_records(), &cfg, KnobBounds::default()).unwrap();
            let p = adapter.adapt(&OperatingCondition { vx, wind, mu, y_ref: y });
            prop_assert!(p.validate().is_ok());
            prop_assert!(p.nc >= 2 && p.nc <= p.np && p.q > 0.0 && p.r > 0.0);
        }

        #[test]
        fn forward_is_deterministic_and_non_negative(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
            let net = random_net(1);
            let x = [a, b, c, d];
            let y = net.forward(&x);
            prop_assert!(y >= 0.0);
            prop_assert_eq!(y.to_bits(), net.forward(&x).to_bits());
        }
    }
}
