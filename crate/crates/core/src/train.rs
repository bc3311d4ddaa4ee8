//! Optimization loop: Adam with cosine decay and norm clipping, CSV loss log,
//! periodic validation, and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::FsenetConfig;
use crate::data::{BatchPolicy, Batch, Prefetcher, SampleSource};
use crate::error::{Error, Result};
use crate::loss::fsenet_loss;
use crate::metrics::rmse;
use crate::model::Fsenet;
use crate::nn::{to_f32_grid, ParameterStore};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,loss,l1,ssim_term,lr,sec_per_step";
pub const LOSS_LOG: &str = "loss.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// Cosine decay from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam with `(0.9, 0.999)` moments. Parameters and moments are stored on the
/// `f32` grid so a checkpoint captures the exact optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParameterStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.tensor_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = to_f32_grid(self.beta1 * m[i] + (1.0 - self.beta1) * g[i]);
                v[i] = to_f32_grid(self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i]);
                let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = to_f32_grid(p[i] - step);
            }
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim_term: f64,
    pub lr: f64,
    pub sec_per_step: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.l1, self.ssim_term, self.lr, self.sec_per_step
        )
    }
}

/// Network plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Fsenet,
    pub adam: Adam,
}

fn moment_name(kind: &str, name: &str) -> String {
    format!("adam.{kind}.{name}")
}

impl Trainer {
    pub fn new(net: Fsenet) -> Self {
        let adam = Adam::new(&net.params);
        Trainer { net, adam }
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    pub fn config(&self) -> &FsenetConfig {
        &self.net.config
    }

    /// Parameters, optimizer moments and progress.
    pub fn checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.step = self.adam.t;
        let mut ck = Checkpoint::from_model(&self.net, meta);
        let names: Vec<String> = self.net.params.iter().map(|(n, _)| n.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            ck.tensors.push((moment_name("m", name), self.adam.m[k].clone()));
            ck.tensors.push((moment_name("v", name), self.adam.v[k].clone()));
        }
        ck
    }

    /// Restore from a checkpoint; missing moments are treated as a fresh optimizer.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let net = ck.to_model()?;
        let mut adam = Adam::new(&net.params);
        let mut has_moments = false;
        for (k, (name, t)) in net.params.iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[k]), ("v", &mut adam.v[k])] {
                if let Some(stored) = ck.get(&moment_name(kind, name)) {
                    if stored.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor {} has shape {:?}, expected {:?}",
                            moment_name(kind, name),
                            stored.shape(),
                            t.shape()
                        )));
                    }
                    *slot = stored.clone();
                    has_moments = true;
                }
            }
        }
        if has_moments {
            adam.t = ck.meta.step;
        }
        Ok(Trainer { net, adam })
    }

    /// One optimizer update on `batch`, using the schedule position of the
    /// current step count.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let cfg = &self.net.config;
        let step = self.adam.t;
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        let g = Graph::new();
        let p = crate::nn::Bound::new(&g, &self.net.params);
        let x = g.constant(batch.input.clone());
        let pred = self.net.forward_var(&p, &x)?;
        let parts = fsenet_loss(&pred, &batch.target, cfg.lambda_ssim)?;
        let loss = parts.total.value().item();
        let non_finite = || Error::NonFiniteLoss {
            step,
            indices: batch.indices(),
        };
        if !loss.is_finite() {
            return Err(non_finite());
        }
        let grads = g.backward(&parts.total);
        let mut gs = p.gradients(&grads);
        drop(grads);
        drop(p);
        let norm = clip_grad_norm(&mut gs, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(non_finite());
        }
        self.adam.update(&mut self.net.params, &gs, lr);
        Ok(StepRecord {
            step,
            loss,
            l1: parts.l1,
            ssim_term: parts.ssim_term,
            lr,
            sec_per_step: 0.0,
        })
    }
}

/// Mean RMSE (0-255) of the model on centre crops of at most `crop` pixels.
pub fn validation_rmse(net: &Fsenet, source: &dyn SampleSource, crop: usize) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..source.len() {
        let s = source.load(i)?;
        let (h, w) = (s.shadow.height(), s.shadow.width());
        let (ch, cw) = (h.min(crop), w.min(crop));
        let (top, left) = ((h - ch) / 2, (w - cw) / 2);
        let input = s.shadow.crop(top, left, ch, cw)?;
        let target = s.target.crop(top, left, ch, cw)?;
        total += rmse(&net.forward(&input)?, &target)?;
    }
    Ok(total / source.len() as f64)
}

/// Where a run writes and where it may resume from.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps even if the schedule is longer.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub best_val_rmse: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_log: PathBuf,
}

/// Keep the header and the rows of steps before `start`.
fn prepare_log(path: &Path, start: u64) -> Result<std::fs::File> {
    let mut kept = vec![CSV_HEADER.to_string()];
    if start > 0 && path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if matches!(step, Some(s) if s < start) {
                kept.push(line.to_string());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", kept.join("\n")).map_err(|e| Error::io(path, e))?;
    Ok(f)
}

fn dump_failure(out_dir: &Path, err: &Error, source: &dyn SampleSource) {
    if let Error::NonFiniteLoss { step, indices } = err {
        let names: Vec<String> = indices.iter().map(|&i| source.name(i)).collect();
        let body = serde_json::json!({ "step": step, "indices": indices, "names": names });
        let path = out_dir.join(format!("nonfinite_step{step}.json"));
        if let Err(e) = std::fs::write(&path, body.to_string()) {
            log::error!("could not write {}: {e}", path.display());
        } else {
            log::error!("non-finite loss, batch written to {}", path.display());
        }
    }
}

/// Run (or resume) training, writing `loss.csv`, `last.ckpt` and `best.ckpt`
/// into `opts.out_dir`.
pub fn train(
    config: FsenetConfig,
    train_set: Arc<dyn SampleSource>,
    val_set: Option<Arc<dyn SampleSource>>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (mut trainer, mut meta) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            // schedule and data settings may change on resume, the architecture may not
            let mut cfg = config.clone();
            cfg.seed = ck.config.seed;
            if Fsenet::new(cfg.clone())?.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).ne(
                t.net.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())),
            ) {
                return Err(Error::Checkpoint("checkpoint architecture differs from the configuration".into()));
            }
            t.net.config = cfg;
            (t, ck.meta)
        }
        None => (Trainer::new(Fsenet::new(config.clone())?), CheckpointMeta::default()),
    };
    let cfg = trainer.net.config.clone();
    let start = trainer.step_count();
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let log_path = out.join(LOSS_LOG);
    let mut log_file = prepare_log(&log_path, start)?;
    let last_path = out.join(LAST_CKPT);
    let best_path = out.join(BEST_CKPT);
    let policy = BatchPolicy::from_config(&cfg);
    let epoch_len = train_set.len().div_ceil(cfg.batch_size).max(1) as u64;
    let mut loader = Prefetcher::spawn(train_set.clone(), policy, start, end, cfg.prefetch);
    let mut last_loss = None;
    log::info!(
        "training {} parameters, steps {start}..{end}",
        trainer.net.parameter_count()
    );
    for step in start..end {
        let batch = loader.next_batch()?;
        let t0 = Instant::now();
        let mut rec = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                dump_failure(out, &e, train_set.as_ref());
                return Err(e);
            }
        };
        if !cfg.deterministic {
            rec.sec_per_step = t0.elapsed().as_secs_f64();
        }
        writeln!(log_file, "{}", rec.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        last_loss = Some(rec.loss);
        let done = step + 1;
        meta.epoch = done / epoch_len;
        if let Some(val) = &val_set {
            if (cfg.val_every > 0 && done % cfg.val_every == 0) || done == end {
                let r = validation_rmse(&trainer.net, val.as_ref(), cfg.crop_size)?;
                meta.last_val_rmse = Some(r);
                log::info!("step {done}: validation rmse {r:.4}");
                if meta.best_val_rmse.is_none_or(|b| r < b) {
                    meta.best_val_rmse = Some(r);
                    trainer.checkpoint(meta.clone()).save(&best_path)?;
                }
            }
        }
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == end {
            trainer.checkpoint(meta.clone()).save(&last_path)?;
        }
        if done % 50 == 0 {
            log::info!("step {done}: loss {:.6}", rec.loss);
        }
    }
    if start >= end {
        trainer.checkpoint(meta.clone()).save(&last_path)?;
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainSummary {
        steps: trainer.step_count(),
        last_loss,
        best_val_rmse: meta.best_val_rmse,
        last_checkpoint: last_path,
        best_checkpoint: best_path.exists().then_some(best_path),
        loss_log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_shadow, training_batch, InMemory, SampleTriplet};
    use crate::image::Image;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> FsenetConfig {
        let mut cfg = FsenetConfig::toy();
        cfg.trm_dilations = vec![1, 2];
        cfg.spp_grids = vec![1, 2];
        cfg.crop_size = 32;
        cfg.batch_size = 2;
        cfg.steps = 6;
        cfg.val_every = 3;
        cfg.checkpoint_every = 2;
        cfg.lr = 1e-3;
        cfg
    }

    fn pairs(count: usize, side: usize) -> InMemory {
        InMemory(
            (0..count)
                .map(|i| {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i as u64);
                    let t = Image::from_fn(side, side, 3, |_, _, _| rng.gen_range(0.5..1.0));
                    let m = Image::from_fn(side, side, 1, |_, x, _| if x < side / 2 { 1.0 } else { 0.0 });
                    let s = synthesize_shadow(&t, &m, 0.5).unwrap();
                    (format!("p{i}"), SampleTriplet::new(s, t, Some(m)).unwrap())
                })
                .collect(),
        )
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-6), 2e-4);
        assert!((cosine_lr(100, 100, 2e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 2e-4, 1e-6) - (2e-4 + 1e-6) / 2.0).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 2e-4, 1e-6);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]), Tensor::new(&[1], vec![0.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::new(&[1], vec![0.5])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParameterStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0])).unwrap();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Tensor::new(&[2], vec![0.5, -2.0])], 0.125);
        // the bias-corrected first step has magnitude lr per coordinate
        let w = store.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] - 0.875).abs() < 1e-6);
        assert!((w[1] + 0.875).abs() < 1e-6);
        assert!(w.iter().chain(adam.m[0].data()).chain(adam.v[0].data()).all(|v| to_f32_grid(*v) == *v));
    }

    #[test]
    fn single_pair_loss_drops() {
        let mut cfg = tiny_config();
        cfg.batch_size = 1;
        cfg.synth_prob = 0.0;
        cfg.steps = 60;
        cfg.lr = 2e-3;
        let src = pairs(1, 32);
        let policy = BatchPolicy {
            flip: false,
            ..BatchPolicy::from_config(&cfg)
        };
        let mut tr = Trainer::new(Fsenet::new(cfg).unwrap());
        let batch = training_batch(&src, &policy, 0).unwrap();
        let first = tr.train_step(&batch).unwrap().loss;
        let mut last = first;
        for _ in 1..60 {
            last = tr.train_step(&batch).unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_restores_optimizer() {
        let cfg = tiny_config();
        let src = pairs(2, 32);
        let policy = BatchPolicy::from_config(&cfg);
        let mut a = Trainer::new(Fsenet::new(cfg).unwrap());
        a.train_step(&training_batch(&src, &policy, 0).unwrap()).unwrap();
        let bytes = a.checkpoint(CheckpointMeta::default()).encode().unwrap();
        let mut b = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(b.adam, a.adam);
        let batch = training_batch(&src, &policy, 1).unwrap();
        assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let cfg = tiny_config();
        let src: Arc<dyn SampleSource> = Arc::new(pairs(3, 40));
        let val: Arc<dyn SampleSource> = Arc::new(pairs(1, 40));
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str, stop: Option<u64>, resume: Option<PathBuf>| {
            let opts = TrainOptions {
                out_dir: dir.path().join(name),
                resume,
                stop_at: stop,
            };
            train(cfg.clone(), src.clone(), Some(val.clone()), &opts).unwrap()
        };
        let a = run("a", None, None);
        let b = run("b", None, None);
        let csv_a = std::fs::read_to_string(&a.loss_log).unwrap();
        assert_eq!(csv_a, std::fs::read_to_string(&b.loss_log).unwrap());
        assert_eq!(csv_a.lines().count(), 7);
        assert_eq!(std::fs::read(&a.last_checkpoint).unwrap(), std::fs::read(&b.last_checkpoint).unwrap());
        assert!(a.best_checkpoint.is_some());

        run("c", Some(4), None);
        let resumed = run("c", None, Some(dir.path().join("c").join(LAST_CKPT)));
        assert_eq!(resumed.steps, 6);
        assert_eq!(std::fs::read_to_string(&resumed.loss_log).unwrap(), csv_a);
        assert_eq!(std::fs::read(&resumed.last_checkpoint).unwrap(), std::fs::read(&a.last_checkpoint).unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let cfg = tiny_config();
        let mut bad = pairs(2, 32);
        bad.0[0].1.shadow = bad.0[0].1.shadow.map(|_| f64::NAN);
        let mut cfg2 = cfg.clone();
        cfg2.synth_prob = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let err = train(cfg2, Arc::new(bad), None, &opts).unwrap_err();
        let Error::NonFiniteLoss { step, indices } = err else {
            panic!("unexpected error {err}");
        };
        assert!(indices.contains(&0));
        assert!(dir.path().join(format!("nonfinite_step{step}.json")).exists());
    }
}
