//! Warm-up, partitioned training epochs and per-epoch repartitioning.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::{Indicator, Mode, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{detection_metrics, evaluate};
use crate::losses::{clean_align_loss, gaze_loss, noisy_align_loss, total_loss, LossBreakdown};
use crate::manifold::{
    affinity_cross_graph, affinity_square, affinity_square_graph, l1_indicator, partition,
    score_dataset, PartitionState,
};
use crate::model::{ModelState, PrototypeBank};
use crate::optim::Adam;

const PROTOTYPE_SEED_SALT: u64 = 0x5EE7_0001;

/// Derives an independent stream per (seed, epoch).
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mix = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mix)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub epoch: usize,
    pub iteration: usize,
    pub losses: LossBreakdown,
}

/// Summary row written after every main-loop epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_eta_clean: Option<f64>,
    pub mean_eta_noisy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auroc: Option<f64>,
    pub source_val_error: Option<f64>,
    pub target_error: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub iterations: Vec<IterationLog>,
    pub epochs: Vec<EpochMetrics>,
    /// Initial partition followed by one entry per main-loop epoch.
    pub partitions: Vec<PartitionState>,
    /// Number of end-of-epoch repartitions.
    pub repartitions: usize,
}

/// Optional held-out sets scored after every epoch.
#[derive(Clone, Copy, Default)]
pub struct EvalSets<'a> {
    pub source_val: Option<&'a Dataset>,
    pub target: Option<&'a Dataset>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub bank: PrototypeBank,
    pub opt: Adam,
    /// Global epoch counter, warm-up included.
    pub epoch: usize,
}

/// Trained state returned by [`Trainer::fit`].
pub struct FitResult {
    pub model: ModelState,
    pub bank: PrototypeBank,
    pub partition: Option<PartitionState>,
    pub history: History,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelState::init(cfg.model, cfg.init_seed);
        let bank = PrototypeBank::random(
            cfg.k,
            cfg.model.proj,
            cfg.alpha,
            cfg.tau,
            cfg.init_seed ^ PROTOTYPE_SEED_SALT,
        )?;
        let opt = Adam::new(&model.params());
        Ok(Self {
            cfg,
            model,
            bank,
            opt,
            epoch: 0,
        })
    }

    /// Rebuilds a trainer around saved state with a fresh optimizer.
    pub fn from_state(cfg: TrainConfig, model: ModelState, bank: PrototypeBank) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(&model.params());
        Ok(Self {
            cfg,
            model,
            bank,
            opt,
            epoch: 0,
        })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if data.input_dim() != self.cfg.model.input {
            return Err(Error::InvalidShape(format!(
                "dataset has {} inputs, model expects {}",
                data.input_dim(),
                self.cfg.model.input
            )));
        }
        Ok(())
    }

    fn apply_grads(&mut self, g: &Graph, vars: &crate::model::ModelVars) -> Result<()> {
        let grads = vars.grads(g);
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            return Err(Error::NumericFailure(format!("non-finite gradient for parameter {i}")));
        }
        let lr = self.cfg.learning_rate;
        self.opt.step(&mut self.model.params_mut(), &grads, lr)?;
        if !self.model.is_finite() {
            return Err(Error::NumericFailure("parameters became non-finite".into()));
        }
        Ok(())
    }

    /// One iteration over a batch without partitioning: gaze loss on every
    /// sample, an optional EMA step and optional clean alignment over the batch.
    fn unpartitioned_step(
        &mut self,
        data: &Dataset,
        batch: &[usize],
        ema: bool,
        align: bool,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);
        let x = g.constant(data.inputs(batch)?);
        let f = vars.feature_extract(&mut g, x)?;
        let pred = vars.regress(&mut g, f)?;
        let y = g.constant(data.observed(batch)?);
        let l_gaze = gaze_loss(&mut g, pred, y)?;
        let z = if ema || align {
            let z = vars.project(&mut g, f)?;
            let z_val = g.value(z).clone();
            let r = self.bank.assign(&z_val)?;
            self.bank.ema_update(&z_val, &r)?;
            Some(z)
        } else {
            None
        };
        let (root, l_clean) = if let (true, Some(z)) = (align, z) {
            let p = self.bank.embed_graph(&mut g, z)?;
            let a_m = affinity_square_graph(&mut g, p)?;
            let a_g = g.constant(affinity_square(&data.observed_vectors(batch)?)?);
            let l_clean = clean_align_loss(&mut g, a_g, a_m)?;
            (total_loss(&mut g, l_gaze, l_clean, None, self.cfg.lambda)?, g.value(l_clean).item()?)
        } else {
            (l_gaze, 0.0)
        };
        let losses = LossBreakdown::new(g.value(l_gaze).item()?, l_clean, 0.0, self.cfg.lambda);
        if !losses.is_finite() {
            return Err(Error::NumericFailure(format!("loss diverged: {losses:?}")));
        }
        g.backward(root)?;
        self.apply_grads(&g, &vars)?;
        Ok(losses)
    }

    fn unpartitioned_epoch(
        &mut self,
        data: &Dataset,
        ema: bool,
        align: bool,
        history: &mut History,
    ) -> Result<()> {
        let mut idx = data.all_indices();
        idx.shuffle(&mut epoch_rng(self.cfg.shuffle_seed, self.epoch));
        let bs = self.cfg.batch_clean.min(idx.len());
        if bs < 2 {
            return Err(Error::InvalidArgument("need at least 2 samples per batch".into()));
        }
        for (it, batch) in idx.chunks_exact(bs).enumerate() {
            let losses = self.unpartitioned_step(data, batch, ema, align)?;
            history.iterations.push(IterationLog {
                epoch: self.epoch,
                iteration: it,
                losses,
            });
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs `warmup_epochs` epochs over the whole dataset without partitioning.
    pub fn warmup(&mut self, data: &Dataset, history: &mut History) -> Result<()> {
        self.check_data(data)?;
        let seetn = self.cfg.mode == Mode::Seetn;
        let align = seetn && self.cfg.warmup_uses_align;
        for _ in 0..self.cfg.warmup_epochs {
            self.unpartitioned_epoch(data, seetn, align, history)?;
        }
        Ok(())
    }

    /// Ranks every sample with the configured indicator using the current model.
    pub fn score(&self, data: &Dataset) -> Result<Vec<f64>> {
        match self.cfg.indicator {
            Indicator::Eta => score_dataset(
                data,
                &self.model,
                &self.bank,
                self.cfg.scoring_batch(),
                epoch_seed(self.cfg.data_seed, self.epoch),
                self.cfg.include_diag_in_eta,
            ),
            Indicator::L1 => l1_indicator(data, &self.model),
        }
    }

    /// Scores and splits the dataset.
    pub fn repartition(&self, data: &Dataset) -> Result<PartitionState> {
        partition(&self.score(data)?, self.cfg.t_percent, self.epoch)
    }

    fn partitioned_step(&mut self, data: &Dataset, clean: &[usize], noisy: &[usize]) -> Result<LossBreakdown> {
        let cfg = &self.cfg;
        let (lambda, detach) = (cfg.lambda, cfg.detach_teacher);
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);

        let xc = g.constant(data.inputs(clean)?);
        let fc = vars.feature_extract(&mut g, xc)?;
        let pred = vars.regress(&mut g, fc)?;
        let zc = vars.project(&mut g, fc)?;

        // prototypes move toward clean embeddings only
        let zc_val = g.value(zc).clone();
        let r = self.bank.assign(&zc_val)?;
        self.bank.ema_update(&zc_val, &r)?;

        let pc = self.bank.embed_graph(&mut g, zc)?;
        let a_m = affinity_square_graph(&mut g, pc)?;
        let a_g = g.constant(affinity_square(&data.observed_vectors(clean)?)?);
        let y = g.constant(data.observed(clean)?);
        let l_gaze = gaze_loss(&mut g, pred, y)?;
        let l_clean = clean_align_loss(&mut g, a_g, a_m)?;

        let l_noisy = if noisy.is_empty() {
            None
        } else {
            let xn = g.constant(data.inputs(noisy)?);
            let fnoisy = vars.feature_extract(&mut g, xn)?;
            let zn = vars.project(&mut g, fnoisy)?;
            let pn = self.bank.embed_graph(&mut g, zn)?;
            let a_m_cross = affinity_cross_graph(&mut g, pn, pc)?;
            let a_f = affinity_cross_graph(&mut g, fnoisy, fc)?;
            Some(noisy_align_loss(&mut g, a_f, a_m_cross, detach)?)
        };
        let root = total_loss(&mut g, l_gaze, l_clean, l_noisy, lambda)?;
        let losses = LossBreakdown::new(
            g.value(l_gaze).item()?,
            g.value(l_clean).item()?,
            match l_noisy {
                Some(v) => g.value(v).item()?,
                None => 0.0,
            },
            lambda,
        );
        if !losses.is_finite() {
            return Err(Error::NumericFailure(format!("loss diverged: {losses:?}")));
        }
        g.backward(root)?;
        self.apply_grads(&g, &vars)?;
        Ok(losses)
    }

    /// One pass over the clean subset, pairing each clean batch with a noisy
    /// batch drawn cyclically from the noisy subset.
    pub fn train_epoch(&mut self, data: &Dataset, part: &PartitionState, history: &mut History) -> Result<()> {
        if part.clean_indices.is_empty() {
            return Err(Error::InvalidState("clean subset is empty".into()));
        }
        let mut rng = epoch_rng(self.cfg.shuffle_seed, self.epoch);
        let mut clean = part.clean_indices.clone();
        clean.shuffle(&mut rng);
        let bc = self.cfg.batch_clean.min(clean.len());
        if bc < 2 {
            return Err(Error::InvalidState("clean subset has fewer than 2 samples".into()));
        }
        let bn = self.cfg.noisy_batch().min(part.noisy_indices.len());
        let mut noisy = part.noisy_indices.clone();
        noisy.shuffle(&mut rng);
        let mut cursor = 0;

        for (it, batch) in clean.chunks_exact(bc).enumerate() {
            let mut nb = Vec::with_capacity(bn);
            while nb.len() < bn {
                if cursor == noisy.len() {
                    noisy.shuffle(&mut rng);
                    cursor = 0;
                }
                nb.push(noisy[cursor]);
                cursor += 1;
            }
            let losses = self.partitioned_step(data, batch, &nb)?;
            history.iterations.push(IterationLog {
                epoch: self.epoch,
                iteration: it,
                losses,
            });
        }
        self.epoch += 1;
        Ok(())
    }

    fn epoch_metrics(&self, data: &Dataset, part: Option<&PartitionState>, sets: EvalSets) -> Result<EpochMetrics> {
        let mut m = EpochMetrics {
            epoch: self.epoch - 1,
            mean_eta_clean: None,
            mean_eta_noisy: None,
            precision: None,
            recall: None,
            auroc: None,
            source_val_error: None,
            target_error: None,
        };
        if let Some(p) = part {
            let mean = |idx: &[usize]| {
                (!idx.is_empty()).then(|| idx.iter().map(|&i| p.eta[i]).sum::<f64>() / idx.len() as f64)
            };
            m.mean_eta_clean = mean(&p.clean_indices);
            m.mean_eta_noisy = mean(&p.noisy_indices);
            let mask = data.noise_mask();
            if mask.iter().any(|&b| b) && mask.iter().any(|&b| !b) {
                let d = detection_metrics(&p.eta, &mask, p.t_percent)?;
                m.precision = Some(d.precision);
                m.recall = Some(d.recall);
                m.auroc = Some(d.auroc);
            }
        }
        if let Some(v) = sets.source_val {
            m.source_val_error = Some(evaluate(&self.model, v)?.mean_angular_error_deg);
        }
        if let Some(t) = sets.target {
            m.target_error = Some(evaluate(&self.model, t)?.mean_angular_error_deg);
        }
        Ok(m)
    }

    /// Warm-up, initial partition, then `max_epochs` rounds of training and
    /// repartitioning. `on_epoch` runs after each main-loop epoch.
    pub fn fit_with<F>(mut self, data: &Dataset, sets: EvalSets, mut on_epoch: F) -> Result<FitResult>
    where
        F: FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    {
        self.check_data(data)?;
        let mut history = History::default();
        self.warmup(data, &mut history)?;

        if self.cfg.mode == Mode::Baseline {
            for _ in 0..self.cfg.max_epochs {
                self.unpartitioned_epoch(data, false, false, &mut history)?;
                let m = self.epoch_metrics(data, None, sets)?;
                on_epoch(&self, &m)?;
                history.epochs.push(m);
            }
            return Ok(FitResult {
                model: self.model,
                bank: self.bank,
                partition: None,
                history,
            });
        }

        let mut part = self.repartition(data)?;
        history.partitions.push(part.clone());
        for _ in 0..self.cfg.max_epochs {
            self.train_epoch(data, &part, &mut history)?;
            part = self.repartition(data)?;
            history.repartitions += 1;
            history.partitions.push(part.clone());
            let m = self.epoch_metrics(data, Some(&part), sets)?;
            on_epoch(&self, &m)?;
            history.epochs.push(m);
        }
        Ok(FitResult {
            model: self.model,
            bank: self.bank,
            partition: Some(part),
            history,
        })
    }

    pub fn fit(self, data: &Dataset, sets: EvalSets) -> Result<FitResult> {
        self.fit_with(data, sets, |_, _| Ok(()))
    }
}

/// Convenience wrapper: fresh trainer from `cfg`, then [`Trainer::fit`].
pub fn fit(data: &Dataset, cfg: &TrainConfig, sets: EvalSets) -> Result<FitResult> {
    Trainer::new(cfg.clone())?.fit(data, sets)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl History {
    pub fn training_log_csv(&self) -> String {
        let mut out = String::from("epoch,iteration,l_gaze,l_align_clean,l_align_noisy,l_total\n");
        for r in &self.iterations {
            let l = &r.losses;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.iteration, l.l_gaze, l.l_align_clean, l.l_align_noisy, l.l_total
            )
            .unwrap();
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "epoch,mean_eta_clean,mean_eta_noisy,precision,recall,auroc,source_val_error,target_error\n",
        );
        for m in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                m.epoch,
                opt(m.mean_eta_clean),
                opt(m.mean_eta_noisy),
                opt(m.precision),
                opt(m.recall),
                opt(m.auroc),
                opt(m.source_val_error),
                opt(m.target_error)
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels;
    use crate::data::{DomainSpec, GenerateConfig};
    use crate::model::ModelDims;

    fn small_data(n: usize, noise: f64) -> Dataset {
        let gen = GenerateConfig {
            source: DomainSpec {
                n_samples: n,
                ..GenerateConfig::default().source
            },
            noise_ratio: noise,
            ..GenerateConfig::default()
        };
        let cfg = gen.domain_config(&gen.source);
        let d = crate::data::generate_domain(&cfg).unwrap();
        crate::data::inject_label_noise(d, noise, 60.0, 5).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k: 4,
            t_percent: 20.0,
            batch_clean: 16,
            learning_rate: 1e-3,
            warmup_epochs: 2,
            max_epochs: 2,
            model: ModelDims {
                hidden: 16,
                feature: 8,
                proj_hidden: 8,
                proj: 4,
                ..ModelDims::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_warmup_leaves_model_untouched() {
        let data = small_data(40, 0.2);
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..small_cfg()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let before = (t.model.clone(), t.bank.clone());
        let mut h = History::default();
        t.warmup(&data, &mut h).unwrap();
        assert_eq!((t.model, t.bank), before);
        assert!(h.iterations.is_empty());
    }

    #[test]
    fn warmup_reduces_gaze_loss() {
        let data = small_data(160, 0.0);
        let cfg = TrainConfig {
            warmup_epochs: 15,
            ..small_cfg()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let mut h = History::default();
        t.warmup(&data, &mut h).unwrap();
        let mean = |e: usize| {
            let v: Vec<f64> = h.iterations.iter().filter(|l| l.epoch == e).map(|l| l.losses.l_gaze).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(14) < 0.8 * mean(0), "{} vs {}", mean(14), mean(0));
        assert_eq!(t.epoch, 15);
    }

    #[test]
    fn iterations_per_epoch_follow_clean_subset() {
        let data = small_data(100, 0.2);
        let cfg = small_cfg();
        let res = fit(&data, &cfg, EvalSets::default()).unwrap();
        // warm-up sees all 100 samples, main epochs see the 80 clean ones
        for e in 0..4 {
            let n = res.history.iterations.iter().filter(|l| l.epoch == e).count();
            let want = if e < 2 { 100 / 16 } else { 80 / 16 };
            assert_eq!(n, want, "epoch {e}");
        }
        assert_eq!(res.history.repartitions, cfg.max_epochs);
        assert_eq!(res.history.partitions.len(), cfg.max_epochs + 1);
        assert_eq!(res.history.epochs.len(), cfg.max_epochs);
        for p in &res.history.partitions {
            p.check().unwrap();
            assert_eq!(p.noisy_indices.len(), 20);
        }
        let norms = kernels::row_norms(&res.bank.mu, "mu").unwrap();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-9));
    }

    #[test]
    fn total_loss_matches_components() {
        let data = small_data(64, 0.2);
        for lambda in [0.0, 0.1] {
            let cfg = TrainConfig { lambda, ..small_cfg() };
            let res = fit(&data, &cfg, EvalSets::default()).unwrap();
            for l in &res.history.iterations {
                let want = l.losses.l_gaze + l.losses.l_align_clean + lambda * l.losses.l_align_noisy;
                assert!((l.losses.l_total - want).abs() < 1e-12);
            }
        }
        let cfg = TrainConfig {
            t_percent: 0.0,
            ..small_cfg()
        };
        let res = fit(&data, &cfg, EvalSets::default()).unwrap();
        assert!(res.history.iterations.iter().all(|l| l.losses.l_align_noisy == 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small_data(64, 0.2);
        let a = fit(&data, &small_cfg(), EvalSets::default()).unwrap();
        let b = fit(&data, &small_cfg(), EvalSets::default()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.history.training_log_csv(), b.history.training_log_csv());
        assert_eq!(a.history.metrics_csv(), b.history.metrics_csv());
        let c = fit(
            &data,
            &TrainConfig {
                shuffle_seed: 99,
                ..small_cfg()
            },
            EvalSets::default(),
        )
        .unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn baseline_never_touches_prototypes() {
        let data = small_data(64, 0.2);
        let cfg = TrainConfig {
            mode: Mode::Baseline,
            ..small_cfg()
        };
        let start = Trainer::new(cfg.clone()).unwrap().bank;
        let res = fit(&data, &cfg, EvalSets::default()).unwrap();
        assert_eq!(res.bank, start);
        assert!(res.partition.is_none());
        assert_eq!(res.history.epochs.len(), cfg.max_epochs);
        assert!(res.history.iterations.iter().all(|l| l.losses.l_align_clean == 0.0));
    }

    #[test]
    fn empty_clean_subset_is_an_error() {
        let data = small_data(4, 0.0);
        let mut t = Trainer::new(small_cfg()).unwrap();
        let part = partition(&[0.0; 4], 99.0, 0).unwrap();
        assert!(part.clean_indices.is_empty());
        let err = t.train_epoch(&data, &part, &mut History::default());
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = small_data(20, 0.0);
        let cfg = TrainConfig {
            model: ModelDims {
                input: 5,
                ..small_cfg().model
            },
            ..small_cfg()
        };
        assert!(matches!(fit(&data, &cfg, EvalSets::default()), Err(Error::InvalidShape(_))));
    }

    /// Gradient of the noisy alignment term alone, split per parameter.
    fn noisy_term_grads(detach: bool) -> Vec<(String, f64)> {
        let data = small_data(12, 0.0);
        let t = Trainer::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let vars = t.model.bind(&mut g, true);
        let clean: Vec<usize> = (0..6).collect();
        let noisy: Vec<usize> = (6..10).collect();
        let xc = g.constant(data.inputs(&clean).unwrap());
        let xn = g.constant(data.inputs(&noisy).unwrap());
        let fc = vars.feature_extract(&mut g, xc).unwrap();
        let fnz = vars.feature_extract(&mut g, xn).unwrap();
        let zc = vars.project(&mut g, fc).unwrap();
        let zn = vars.project(&mut g, fnz).unwrap();
        let pc = t.bank.embed_graph(&mut g, zc).unwrap();
        let pn = t.bank.embed_graph(&mut g, zn).unwrap();
        let a_m = affinity_cross_graph(&mut g, pn, pc).unwrap();
        let a_f = affinity_cross_graph(&mut g, fnz, fc).unwrap();
        let l = noisy_align_loss(&mut g, a_f, a_m, detach).unwrap();
        g.backward(l).unwrap();
        t.model
            .param_names()
            .into_iter()
            .zip(vars.grads(&g))
            .map(|(n, gr)| (n, gr.values().iter().map(|v| v.abs()).fold(0.0, f64::max)))
            .collect()
    }

    #[test]
    fn detached_teacher_blocks_projection_gradient() {
        for (name, mag) in noisy_term_grads(true) {
            if name.starts_with("projection") || name.starts_with("regressor") {
                assert_eq!(mag, 0.0, "{name}");
            } else {
                assert!(mag > 0.0, "{name}");
            }
        }
        let open = noisy_term_grads(false);
        assert!(open.iter().any(|(n, m)| n.starts_with("projection") && *m > 0.0));
    }
}
