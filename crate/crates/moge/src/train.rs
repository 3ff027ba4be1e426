//! Training and evaluation driver.
//!
//! A run directory holds `config.json`, `metrics.csv` (one row per
//! iteration), `epochs.csv` (one row per epoch) and
//! `checkpoints/epoch_NNN.moge`. Given the same configuration and data the
//! directory contents are bitwise reproducible regardless of the rayon pool
//! size: shuffling uses named substreams and every reduction runs in a fixed
//! order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::analysis::{expert_usage_stats, UsageStats};
use crate::config::RunConfig;
use crate::data::{batch_iterator, ImageDataset};
use crate::group_reg::GaussianFilter;
use crate::model::checkpoint::save_checkpoint;
use crate::model::loss::argmax;
use crate::model::{forward_batch, loss_and_grad, AdamW, LossBreakdown, LossWeights, ModelParams, RegSpec};
use crate::router::{RouterConfig, RoutingDecision};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "iteration,epoch,lr,sigma,task,load_balance,reg,lambda,lb_weight,total,batch_acc";
pub const EPOCHS_HEADER: &str = "epoch,iterations,train_loss,train_acc,test_acc,active_experts,usage_entropy";

const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub sigma: f64,
    pub loss: LossBreakdown,
    pub batch_acc: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration, self.epoch, self.lr, self.sigma, l.task, l.load_balance, l.reg, l.lambda, l.lb_weight, l.total, self.batch_acc
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iterations: u64,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy on the epoch's batches, measured before each update.
    pub train_acc: f64,
    pub test_acc: f64,
    pub active_experts: usize,
    pub usage_entropy: f64,
}

impl EpochRecord {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.iterations, self.train_loss, self.train_acc, self.test_acc, self.active_experts, self.usage_entropy
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ModelParams,
    pub router: RouterConfig,
    pub epochs: Vec<EpochRecord>,
    pub iterations: u64,
    pub checkpoints: Vec<(usize, PathBuf)>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub usage: UsageStats,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}.moge"))
}

/// Top-1 accuracy and expert usage over a dataset.
pub fn evaluate(model: &ModelParams, router: &RouterConfig, ds: &ImageDataset) -> Result<Evaluation> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    let mut decisions: Vec<RoutingDecision> = Vec::with_capacity(ds.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = ds.gather(chunk);
        let fwd = forward_batch(model, router, &x)?;
        correct += labels
            .iter()
            .enumerate()
            .filter(|(t, &l)| argmax(fwd.logits.row(*t)) == l as usize)
            .count();
        decisions.extend(fwd.decisions);
    }
    Ok(Evaluation {
        correct,
        total: ds.len(),
        usage: expert_usage_stats(&decisions, model.n_experts()),
    })
}

/// Runs `f` on a dedicated rayon pool of `threads` workers.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Trains from scratch and writes the run directory `out`.
///
/// `on_epoch` sees every epoch record as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &ImageDataset,
    test_set: &ImageDataset,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if train_set.pixels() != test_set.pixels() {
        return Err(Error::shape("train and test images differ in size"));
    }
    let router = cfg.router()?;
    let classes = crate::data::NUM_CLASSES;
    let dims = cfg.dims(train_set.pixels(), classes);
    let mut model = ModelParams::init_with_std(dims, cfg.n_experts, cfg.activation()?, cfg.init_std, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer(), &model);

    let iters_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let schedule = cfg.sigma_plan()?.schedule(iters_per_epoch * cfg.epochs as u64)?;
    let weights = LossWeights { lambda: cfg.lambda, lb_weight: cfg.lb_weight };
    let snapshots = cfg.snapshots();

    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut epochs_csv = BufWriter::new(File::create(out.join("epochs.csv"))?);
    writeln!(epochs_csv, "{EPOCHS_HEADER}")?;

    let mut iteration = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=cfg.epochs {
        let batches = batch_iterator(train_set.len(), cfg.batch_size, cfg.seed, epoch, cfg.shuffle)?;
        let (mut loss_sum, mut seen, mut hits) = (0.0, 0usize, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let sigma = schedule.sigma_at(iteration);
            let reg = RegSpec { filter: GaussianFilter::new(cfg.filter_size, sigma)?, eps: cfg.eps };
            let (x, labels) = train_set.gather(idx);
            let reg = (cfg.lambda > 0.0).then_some(&reg);
            let (loss, grads, correct) = loss_and_grad(&model, &router, &x, &labels, weights, reg)?;
            if !loss.total.is_finite() {
                return Err(Error::config(format!("loss diverged at iteration {}", iteration + 1)));
            }
            let progress = (epoch - 1) as f64 + bi as f64 / batches.len() as f64;
            let lr = opt.step(&mut model, &grads, progress);
            iteration += 1;
            loss_sum += loss.total * idx.len() as f64;
            seen += idx.len();
            hits += correct;
            let row = MetricsRow { iteration, epoch, lr, sigma, loss, batch_acc: correct as f64 / idx.len() as f64 };
            writeln!(metrics, "{}", row.to_csv())?;
        }
        metrics.flush()?;

        let eval = evaluate(&model, &router, test_set)?;
        let record = EpochRecord {
            epoch,
            iterations: iteration,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            test_acc: eval.accuracy(),
            active_experts: eval.usage.active(),
            usage_entropy: eval.usage.normalized_entropy,
        };
        writeln!(epochs_csv, "{}", record.to_csv())?;
        epochs_csv.flush()?;
        on_epoch(&record);
        records.push(record);

        if snapshots.contains(&epoch) {
            let path = checkpoint_path(out, epoch);
            save_checkpoint(&path, &model, &router)?;
            checkpoints.push((epoch, path));
        }
    }
    Ok(TrainReport { model, router, epochs: records, iterations: iteration, checkpoints })
}

fn parse_rows<T>(text: &str, header: &str, parse: impl Fn(&[&str]) -> Option<T>) -> Result<Vec<T>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::shape(format!("expected header {header:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            parse(&f).ok_or_else(|| Error::shape(format!("malformed row {l:?}")))
        })
        .collect()
}

/// Parses `metrics.csv`, rejecting rows whose iteration does not increase.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let rows = parse_rows(text, METRICS_HEADER, |f| {
        let [it, ep, lr, sigma, task, lb, reg, lambda, lbw, total, acc] = f else { return None };
        let r = |s: &str| s.parse::<f64>().ok();
        Some(MetricsRow {
            iteration: it.parse().ok()?,
            epoch: ep.parse().ok()?,
            lr: r(lr)?,
            sigma: r(sigma)?,
            loss: LossBreakdown {
                task: r(task)?,
                load_balance: r(lb)?,
                reg: r(reg)?,
                lambda: r(lambda)?,
                lb_weight: r(lbw)?,
                total: r(total)?,
            },
            batch_acc: r(acc)?,
        })
    })?;
    if rows.windows(2).any(|w| w[1].iteration <= w[0].iteration) {
        return Err(Error::shape("metrics iterations not strictly increasing"));
    }
    Ok(rows)
}

pub fn parse_epochs_csv(text: &str) -> Result<Vec<EpochRecord>> {
    parse_rows(text, EPOCHS_HEADER, |f| {
        let [ep, it, loss, tr, te, active, ent] = f else { return None };
        Some(EpochRecord {
            epoch: ep.parse().ok()?,
            iterations: it.parse().ok()?,
            train_loss: loss.parse().ok()?,
            train_acc: tr.parse().ok()?,
            test_acc: te.parse().ok()?,
            active_experts: active.parse().ok()?,
            usage_entropy: ent.parse().ok()?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toy_data(n: usize, seed: u64) -> ImageDataset {
        let mut rng = Rng::new(seed);
        let side = 6;
        let mut images = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.below(10) as u8;
            for p in 0..side * side {
                let signal = if p % 10 == label as usize { 0.8 } else { 0.1 };
                images.push((signal + 0.1 * rng.uniform()).min(1.0));
            }
            labels.push(label);
        }
        ImageDataset::new(side, side, images, labels).unwrap()
    }

    fn toy_config(out: &Path) -> RunConfig {
        RunConfig {
            n_experts: 16,
            hidden: 8,
            epochs: 3,
            batch_size: 32,
            warmup_epochs: 1.0,
            base_lr: 5e-3,
            out_dir: out.to_path_buf(),
            epoch_snapshots: Some(vec![1]),
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let (tr, te) = (toy_data(200, 1), toy_data(50, 2));
        let mut seen = 0;
        let report = train(&cfg, &tr, &te, dir.path(), |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(report.iterations, 3 * 7);
        assert_eq!(report.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 3]);
        let metrics = parse_metrics_csv(&std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
        assert_eq!(metrics.len(), 21);
        assert!(metrics.iter().all(|m| (m.loss.total - (m.loss.task + m.loss.lambda * m.loss.reg)).abs() < 1e-12));
        let epochs = parse_epochs_csv(&std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap()).unwrap();
        assert_eq!(epochs, report.epochs);
        assert!(checkpoint_path(dir.path(), 3).exists());
    }

    #[test]
    fn learns_an_easy_task() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { epochs: 40, ..toy_config(dir.path()) };
        let report = train(&cfg, &toy_data(400, 1), &toy_data(100, 2), dir.path(), |_| {}).unwrap();
        assert!(report.epochs.last().unwrap().test_acc > 0.9, "{:?}", report.epochs.last());
    }

    #[test]
    fn pool_size_does_not_change_results() {
        let run = |threads| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = toy_config(dir.path());
            with_threads(Some(threads), || train(&cfg, &toy_data(200, 1), &toy_data(50, 2), dir.path(), |_| {}))
                .unwrap()
                .unwrap();
            let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
            (read("metrics.csv"), read("epochs.csv"), read("checkpoints/epoch_003.moge"))
        };
        assert!(run(1) == run(4));
    }

    #[test]
    fn metrics_must_increase() {
        let text = format!("{METRICS_HEADER}\n2,1,0,2,1,0,0,0,0,1,0\n1,1,0,2,1,0,0,0,0,1,0\n");
        assert!(parse_metrics_csv(&text).is_err());
    }
}
