//! Training loop, metrics, the covariate ablation and the timing harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::experiment::{Dataset, ExperimentConfig};
use crate::models::{Architecture, Model};
use crate::nn::optim::{clip_grad_norm, Adam};
use crate::nn::Tensor;

/// Mean normalized batch loss above which training is declared divergent:
/// an RMS error of 100 training standard deviations.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Random subset drawn afresh each epoch; all samples when unset.
    pub samples_per_epoch: Option<usize>,
    /// Evenly strided subset of the validation tail; all when unset.
    pub validation_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            patience: 4,
            validation_fraction: 0.1,
            seed: 0,
            clip_norm: 1.0,
            samples_per_epoch: None,
            validation_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.patience > 0
            && self.clip_norm > 0.0
            && self.validation_fraction > 0.0
            && self.validation_fraction < 0.5
            && self.samples_per_epoch != Some(0)
            && self.validation_samples != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean normalized MSE over the epoch's samples.
    pub train_loss: f64,
    /// Feet; absent when the training set is too small to hold out a tail.
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based; 0 when nothing was trained).
    pub best_epoch: usize,
    #[serde(skip)]
    pub train_seconds: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits the chronological training set into a fitting head and a
/// validation tail, dropping head samples whose targets reach the tail.
pub fn validation_split(samples: &[WindowedSample], fraction: f64) -> (Vec<&WindowedSample>, Vec<&WindowedSample>) {
    let n_val = (fraction * samples.len() as f64 + 1e-9).floor() as usize;
    if n_val == 0 || n_val >= samples.len() {
        return (samples.iter().collect(), Vec::new());
    }
    let (head, tail) = samples.split_at(samples.len() - n_val);
    let first = tail[0].anchor_index + 1;
    let fit: Vec<_> = head.iter().filter(|s| s.anchor_index + s.k() < first).collect();
    if fit.is_empty() {
        return (samples.iter().collect(), Vec::new());
    }
    (fit, tail.iter().collect())
}

fn strided<T: Copy>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if c < items.len() => (0..c).map(|i| items[i * items.len() / c]).collect(),
        _ => items.to_vec(),
    }
}

/// Fits `model` to `samples` (raw, chronological) by minibatch Adam on the
/// normalized MSE, keeping the parameters with the best validation MAE.
pub fn train(model: &mut Model, samples: &[WindowedSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let started = Instant::now();
    if model.params().is_empty() {
        return Ok(TrainOutcome {
            history: Vec::new(),
            best_epoch: 0,
            train_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let (fit, val) = validation_split(samples, cfg.validation_fraction);
    let val: Vec<WindowedSample> = strided(&val, cfg.validation_samples).into_iter().cloned().collect();
    let prepared: Vec<WindowedSample> = fit.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::nn::ModelParams)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let take = cfg.samples_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut total = 0.0;
        for batch in order[..take].chunks(cfg.batch_size) {
            model.params_mut().zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let loss = model.accumulate_gradients(&prepared[i], mix(cfg.seed, epoch as u64, i as u64 + 1))?;
                batch_loss += loss;
            }
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() || mean > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    epoch,
                    lr: cfg.learning_rate,
                    loss: mean,
                });
            }
            model.params_mut().scale_grads(1.0 / batch.len() as f64);
            clip_grad_norm(model.params_mut(), cfg.clip_norm);
            adam.step(model.params_mut());
            if !model.params().all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    lr: cfg.learning_rate,
                    loss: f64::NAN,
                });
            }
            total += batch_loss;
        }
        let train_loss = total / take as f64;

        let val_mae = if val.is_empty() {
            None
        } else {
            match evaluate(model, &val) {
                Ok(m) => Some(m.mae),
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        lr: cfg.learning_rate,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            }
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
        });
        if let Some(mae) = val_mae {
            if best.as_ref().is_none_or(|(b, _, _)| mae < *b) {
                best = Some((mae, epoch, model.params().clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => history.len(),
    };
    model.params_mut().zero_grad();
    Ok(TrainOutcome {
        history,
        best_epoch,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Error summary in feet, averaged over samples, horizon steps and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Per horizon step, averaged over samples and targets.
    pub per_step_mae: Vec<f64>,
    pub per_step_rmse: Vec<f64>,
}

/// MAE and RMSE of `predictions` against `truth`, both lists of `k×M`.
pub fn metrics(predictions: &[Tensor], truth: &[Tensor]) -> Result<Metrics> {
    let first = truth.first().ok_or(Error::EmptyTestSet)?;
    if predictions.len() != truth.len() {
        return Err(Error::Shape {
            op: "metrics (sample count)",
            lhs: vec![predictions.len()],
            rhs: vec![truth.len()],
        });
    }
    let [k, m] = first.shape();
    let mut abs = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for (p, y) in predictions.iter().zip(truth) {
        if p.shape() != [k, m] || y.shape() != [k, m] {
            return Err(Error::Shape {
                op: "metrics",
                lhs: p.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        for j in 0..k {
            for (a, b) in p.row(j).iter().zip(y.row(j)) {
                let e = a - b;
                abs[j] += e.abs();
                sq[j] += e * e;
            }
        }
    }
    let per_step = (truth.len() * m) as f64;
    let total = per_step * k as f64;
    Ok(Metrics {
        mae: abs.iter().sum::<f64>() / total,
        rmse: (sq.iter().sum::<f64>() / total).sqrt(),
        per_step_mae: abs.iter().map(|a| a / per_step).collect(),
        per_step_rmse: sq.iter().map(|s| (s / per_step).sqrt()).collect(),
    })
}

pub fn evaluate(model: &Model, test: &[WindowedSample]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let preds: Vec<Tensor> = model.predict(test)?.into_iter().map(|f| f.y_hat).collect();
    let truth: Vec<Tensor> = test.iter().map(|s| s.y_true.clone()).collect();
    metrics(&preds, &truth)
}

/// With or without future predicted covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    WithFpc,
    WithoutFpc,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::WithFpc, Arm::WithoutFpc];

    pub fn name(self) -> &'static str {
        match self {
            Arm::WithFpc => "with-fpc",
            Arm::WithoutFpc => "without-fpc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::BOTH.into_iter().find(|a| a.name() == s)
    }

    pub fn uses_future_covariates(self) -> bool {
        self == Arm::WithFpc
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: Architecture,
    pub arm: Arm,
    pub metrics: Metrics,
    pub train_s: Option<f64>,
    pub predict_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl EvalReport {
    /// Rows in a stable order: architecture, then arm.
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by_key(|r| (r.model, r.arm));
        self
    }

    pub fn row(&self, model: Architecture, arm: Arm) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.arm == arm)
    }

    /// Asserts `0 ≤ MAE ≤ RMSE` on every row.
    pub fn check_invariants(&self) -> Result<()> {
        for r in &self.rows {
            let (mae, rmse) = (r.metrics.mae, r.metrics.rmse);
            // equal up to rounding when all errors have the same magnitude
            if !(mae >= 0.0 && mae <= rmse * (1.0 + 1e-12)) {
                return Err(Error::NonFinite(format!(
                    "report row {}/{} violates 0 <= MAE <= RMSE ({mae}, {rmse})",
                    r.model, r.arm
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,arm,mae_ft,rmse_ft,train_s,predict_s\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model,
                r.arm,
                r.metrics.mae,
                r.metrics.rmse,
                opt(r.train_s),
                opt(r.predict_s)
            );
        }
        out
    }

    pub fn per_step_csv(&self) -> String {
        let mut out = String::from("model,arm,step,mae_ft,rmse_ft\n");
        for r in &self.rows {
            for (j, (a, s)) in r.metrics.per_step_mae.iter().zip(&r.metrics.per_step_rmse).enumerate() {
                let _ = writeln!(out, "{},{},{},{a},{s}", r.model, r.arm, j + 1);
            }
        }
        out
    }

    /// Aligned text: errors as MAE/RMSE × with/without F.P.C., then timings
    /// with training in minutes and prediction in seconds.
    pub fn to_table(&self) -> String {
        let mut models: Vec<Architecture> = self.rows.iter().map(|r| r.model).collect();
        models.sort();
        models.dedup();
        let cell = |m: Architecture, a: Arm, f: fn(&Metrics) -> f64| {
            self.row(m, a)
                .map_or("-".to_string(), |r| format!("{:.3}", f(&r.metrics)))
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Average {}-hour prediction errors on the test set (ft)",
            self.horizon()
        );
        let _ = writeln!(out, "{:<14}{:>24}{:>24}", "", "MAE", "RMSE");
        let _ = writeln!(
            out,
            "{:<14}{:>12}{:>12}{:>12}{:>12}",
            "Model", "w/ F.P.C.", "w/o F.P.C.", "w/ F.P.C.", "w/o F.P.C."
        );
        for &m in &models {
            let label = if m == Architecture::Persistence {
                "persistence*"
            } else {
                m.name()
            };
            let _ = writeln!(
                out,
                "{:<14}{:>12}{:>12}{:>12}{:>12}",
                label,
                cell(m, Arm::WithFpc, |x| x.mae),
                cell(m, Arm::WithoutFpc, |x| x.mae),
                cell(m, Arm::WithFpc, |x| x.rmse),
                cell(m, Arm::WithoutFpc, |x| x.rmse),
            );
        }
        let _ = writeln!(out, "* non-learned reference: repeats the last observed level");
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<14}{:<14}{:>14}{:>14}",
            "Model", "Arm", "Train (min)", "Predict (s)"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14}{:<14}{:>14}{:>14}",
                r.model.name(),
                r.arm.name(),
                r.train_s.map_or("-".into(), |s| format!("{:.2}", s / 60.0)),
                r.predict_s.map_or("-".into(), |s| format!("{s:.3}")),
            );
        }
        out
    }

    fn horizon(&self) -> usize {
        self.rows.first().map_or(0, |r| r.metrics.per_step_mae.len())
    }
}

/// Median wall-clock seconds of `runs` full predictions over `test`.
pub fn time_prediction(model: &Model, test: &[WindowedSample], runs: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        let out = model.predict(test)?;
        std::hint::black_box(out);
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub const TIMING_RUNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub model: Architecture,
    pub arm: Arm,
    pub train_s: f64,
    pub predict_s: f64,
}

/// One trained (architecture, arm) pair.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub arm: Arm,
    pub model: Model,
    pub outcome: TrainOutcome,
}

/// Builds and trains one (architecture, arm) pair of an experiment.
pub fn train_arm(cfg: &ExperimentConfig, data: &Dataset, arch: Architecture, arm: Arm) -> Result<TrainedModel> {
    let mut model = Model::new(
        cfg.model_config(arch, arm),
        &data.graph,
        data.layout.clone(),
        data.scaler.clone(),
    )?;
    let outcome = train(&mut model, &data.train, &cfg.train)?;
    Ok(TrainedModel { arm, model, outcome })
}

/// Train time and median full-test-set prediction time per model.
pub fn time_models(models: &[TrainedModel], test: &[WindowedSample]) -> Result<Vec<Timing>> {
    models
        .iter()
        .map(|t| {
            Ok(Timing {
                model: t.model.architecture(),
                arm: t.arm,
                train_s: t.outcome.train_seconds,
                predict_s: time_prediction(&t.model, test, TIMING_RUNS)?,
            })
        })
        .collect()
}

/// Evaluates trained models on `test` and attaches timings when given.
pub fn report(models: &[TrainedModel], test: &[WindowedSample], timings: &[Timing]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(models.len());
    for t in models {
        let arch = t.model.architecture();
        let timing = timings.iter().find(|x| x.model == arch && x.arm == t.arm);
        rows.push(ReportRow {
            model: arch,
            arm: t.arm,
            metrics: evaluate(&t.model, test)?,
            train_s: timing.map(|x| x.train_s),
            predict_s: timing.map(|x| x.predict_s),
        });
    }
    let report = EvalReport { rows }.sorted();
    report.check_invariants()?;
    Ok(report)
}

/// Every configured architecture in every configured arm, trained under
/// identical seeds and data, evaluated and timed.
pub struct AblationRun {
    pub report: EvalReport,
    pub models: Vec<TrainedModel>,
}

pub fn run_ablation(cfg: &ExperimentConfig, data: &Dataset) -> Result<AblationRun> {
    let mut models = Vec::new();
    for &arch in &cfg.models {
        for &arm in &cfg.arms {
            models.push(train_arm(cfg, data, arch, arm)?);
        }
    }
    let timings = time_models(&models, &data.test)?;
    let report = report(&models, &data.test, &timings)?;
    Ok(AblationRun { report, models })
}
