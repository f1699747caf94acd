//! Training phases: attention pretraining, discriminator warmup, the
//! alternating adversarial schedule, and the finetuning baselines.
//!
//! One [`Trainer`] value owns the recognizer parameters (`enc.*` + `dec.*`,
//! "the generator"), the discriminator parameters (`mcd.*`), one optimizer
//! per side, the run RNG, and the metrics log. Every phase is a
//! deterministic function of (datasets, config, seed): batches come from
//! epoch-shuffled index streams driven by the run RNG, and the only other
//! random choice, pair subsampling, runs on a sub-generator seeded by a
//! single draw from the run RNG so that its data-dependent consumption
//! cannot shift the main stream.
//!
//! Freezing discipline: discriminator steps see generator features through
//! detached constants and step only `mcd.*`; recognizer steps score
//! confusion through a detached discriminator and step only the generator.
//! Both directions are asserted every step by hashing the frozen side.

use rand::RngCore;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{CharFeature, Config, ConfigError};
use crate::data::Sample;
use crate::decoder::{decode_greedy, decode_label, init_decoder};
use crate::encoder::{encode, image_tensor, init_encoder};
use crate::mcd::{discriminator_loss, generator_confusion_loss, init_mcd};
use crate::optim::{optimizer_from_kind, AdaDelta, Adam, OptimError, Optimizer};
use crate::pairs::{extract_char_features, sample_pairs, subsample_balanced, PairBatch};
use crate::params::ParamSet;
use crate::rng::{restore_state, save_state, seeded, uniform, Rng, RngStateError};
use crate::scalar::{lit, wide, Scalar};
use crate::tensor::{add_all, backward, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{what} dataset is empty")]
    Empty { what: &'static str },
    #[error("frozen {side} parameters changed during a {phase} step")]
    FreezeViolation {
        side: &'static str,
        phase: &'static str,
    },
    #[error("checkpoint holds no optimizer of kind {0}")]
    UnknownOptimizer(u8),
    #[error("checkpoint stores {got} optimizer blocks, expected {want}")]
    OptimizerCount { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rng(#[from] RngStateError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Finetuning baselines: target-only batches, or mixed batches at the
/// configured source:target ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    TargetOnly,
    SourcePlusTarget,
}

/// Split a mixed batch so roughly `ratio` source samples accompany each
/// target sample: 63 at ratio 20 gives 60 source + 3 target.
pub fn mixed_batch_sizes(batch: usize, ratio: usize) -> (usize, usize) {
    let target = (batch / (ratio + 1)).max(1);
    (batch - target, target)
}

/// One metrics line; `value` renders via `{:?}` so equal runs produce
/// byte-equal logs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub step: u64,
    pub phase: &'static str,
    pub loss_name: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub lines: Vec<MetricLine>,
}

impl MetricsLog {
    pub fn push(&mut self, step: u64, phase: &'static str, loss_name: &'static str, value: f64) {
        self.lines.push(MetricLine {
            step,
            phase,
            loss_name,
            value,
        });
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:?}\n",
                l.step, l.phase, l.loss_name, l.value
            ));
        }
        out
    }

    /// Lines whose loss name is in `keep`, rendered as TSV.
    pub fn filtered_tsv(&self, keep: &[&str]) -> String {
        let mut out = String::new();
        for l in &self.lines {
            if keep.contains(&l.loss_name) {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{:?}\n",
                    l.step, l.phase, l.loss_name, l.value
                ));
            }
        }
        out
    }
}

/// Epoch-shuffled index stream: every permutation pass visits each sample
/// once, reshuffling with the run RNG whenever the pass is exhausted.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(len: usize) -> BatchStream {
        BatchStream {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next_batch(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let len = self.order.len();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.pos == len {
                for i in 0..len.saturating_sub(1) {
                    let j = i + (uniform(rng, 0.0, (len - i) as f64) as usize).min(len - i - 1);
                    self.order.swap(i, j);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub struct Trainer<F: Scalar> {
    pub cfg: Config,
    /// Encoder + decoder parameters (the recognizer / generator side).
    pub gen: ParamSet<F>,
    /// Discriminator parameters.
    pub mcd: ParamSet<F>,
    gen_opt: Box<dyn Optimizer<F>>,
    mcd_opt: Box<dyn Optimizer<F>>,
    pub rng: Rng,
    pub log: MetricsLog,
    pub step: u64,
}

impl<F: Scalar> Trainer<F> {
    /// Fresh parameters from the config seed. Attention pretraining starts
    /// on AdaDelta; call [`Trainer::begin_adam_phase`] before adaptation or
    /// finetuning.
    pub fn new(cfg: Config) -> Result<Trainer<F>, TrainError> {
        cfg.validate()?;
        let mut rng = seeded(cfg.train.seed);
        let mut gen = ParamSet::new();
        init_encoder(&cfg.model, &mut gen, &mut rng);
        init_decoder(&cfg.model, &mut gen, &mut rng);
        let mut mcd = ParamSet::new();
        init_mcd(&cfg.model, cfg.train.feature, &mut mcd, &mut rng);
        let lr = lit::<F>(cfg.train.lr);
        Ok(Trainer {
            cfg,
            gen,
            mcd,
            gen_opt: Box::new(AdaDelta::new()),
            mcd_opt: Box::new(Adam::new(lr)),
            rng,
            log: MetricsLog::default(),
            step: 0,
        })
    }

    /// Swap the recognizer onto a fresh Adam optimizer. The pretraining
    /// optimizer's accumulators are tuned to the pretraining objective, so
    /// adaptation and finetuning start clean.
    pub fn begin_adam_phase(&mut self) {
        self.gen_opt = Box::new(Adam::new(lit::<F>(self.cfg.train.lr)));
    }

    fn log_maybe(&mut self, phase: &'static str, loss_name: &'static str, value: f64) {
        if self.step.is_multiple_of(self.cfg.train.log_every as u64) {
            self.log.push(self.step, phase, loss_name, value);
        }
    }

    /// Mean teacher-forced recognition loss over the given samples,
    /// built against `params` (live or detached).
    fn att_loss_over(
        &self,
        params: &ParamSet<F>,
        samples: &[&Sample],
    ) -> Result<Tensor<F>, TrainError> {
        let mut losses = Vec::with_capacity(samples.len());
        for s in samples {
            let (_, loss) =
                extract_char_features(&self.cfg.model, params, s, CharFeature::Context)?;
            losses.push(loss);
        }
        Ok(add_all(&losses)?.scale(lit(1.0 / samples.len() as f64)))
    }

    /// Pretrain the recognizer on teacher-forced recognition loss over
    /// shuffled source mini-batches.
    pub fn pretrain_attention(
        &mut self,
        source: &[Sample],
        steps: usize,
    ) -> Result<(), TrainError> {
        if source.is_empty() {
            return Err(TrainError::Empty { what: "source" });
        }
        let batch = self.cfg.train.batch_size.min(source.len());
        let mut stream = BatchStream::new(source.len());
        for _ in 0..steps {
            let idx = stream.next_batch(batch, &mut self.rng);
            let picked: Vec<&Sample> = idx.iter().map(|&i| &source[i]).collect();
            let loss = self.att_loss_over(&self.gen, &picked)?;
            self.gen.zero_grads();
            backward(&loss)?;
            self.gen_opt.step(&self.gen)?;
            self.step += 1;
            self.log_maybe("pretrain_att", "att", wide(loss.item()));
        }
        Ok(())
    }

    /// Draw one adversarial mini-batch: source indices, target indices, and
    /// the seed for the pair-subsampling generator. Exactly
    /// `2 * batch + 1` values leave the run RNG no matter what the data
    /// contains (modulo epoch reshuffles, which depend only on set sizes).
    fn draw_round(
        &mut self,
        src_stream: &mut BatchStream,
        tgt_stream: &mut BatchStream,
        batch: usize,
    ) -> (Vec<usize>, Vec<usize>, u64) {
        let src = src_stream.next_batch(batch, &mut self.rng);
        let tgt = tgt_stream.next_batch(batch, &mut self.rng);
        let sub_seed = self.rng.next_u64();
        (src, tgt, sub_seed)
    }

    /// Build the merged, balanced pair batch for one step.
    fn build_pairs(
        &self,
        params: &ParamSet<F>,
        source: &[Sample],
        target: &[Sample],
        src_idx: &[usize],
        tgt_idx: &[usize],
        sub_seed: u64,
    ) -> Result<PairBatch<F>, TrainError> {
        let mut merged = PairBatch::default();
        for (&si, &ti) in src_idx.iter().zip(tgt_idx) {
            let (sf, _) = extract_char_features(
                &self.cfg.model,
                params,
                &source[si],
                self.cfg.train.feature,
            )?;
            let (tf, _) = extract_char_features(
                &self.cfg.model,
                params,
                &target[ti],
                self.cfg.train.feature,
            )?;
            merged.extend(sample_pairs(&sf, &tf));
        }
        let mut sub_rng = seeded(sub_seed);
        Ok(subsample_balanced(
            merged,
            self.cfg.train.pairs_per_group,
            &mut sub_rng,
        ))
    }

    /// One discriminator update on frozen generator features.
    fn discriminator_step(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        src_stream: &mut BatchStream,
        tgt_stream: &mut BatchStream,
        phase: &'static str,
    ) -> Result<(), TrainError> {
        let batch = self
            .cfg
            .train
            .batch_size
            .min(source.len())
            .min(target.len());
        let (src_idx, tgt_idx, sub_seed) = self.draw_round(src_stream, tgt_stream, batch);
        let frozen_gen = self.gen.detached();
        let gen_hash = self.gen.content_hash();
        let pairs = self.build_pairs(&frozen_gen, source, target, &src_idx, &tgt_idx, sub_seed)?;
        let loss = discriminator_loss(&self.mcd, &pairs)?;
        self.mcd.zero_grads();
        backward(&loss)?;
        self.mcd_opt.step(&self.mcd)?;
        if self.gen.content_hash() != gen_hash {
            return Err(TrainError::FreezeViolation {
                side: "recognizer",
                phase: "discriminator",
            });
        }
        self.step += 1;
        self.log_maybe(phase, "disc", wide(loss.item()));
        Ok(())
    }

    /// One recognizer update: recognition loss over the union of the source
    /// and target batches, plus the weighted confusion term unless it is
    /// disabled or weighted to exactly zero (in either case the term
    /// contributes nothing to any gradient, so it is skipped outright and
    /// the run stays bit-comparable to attention-only training).
    fn generator_step(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        src_stream: &mut BatchStream,
        tgt_stream: &mut BatchStream,
    ) -> Result<(), TrainError> {
        let batch = self
            .cfg
            .train
            .batch_size
            .min(source.len())
            .min(target.len());
        let (src_idx, tgt_idx, sub_seed) = self.draw_round(src_stream, tgt_stream, batch);
        let mcd_hash = self.mcd.content_hash();

        let union: Vec<&Sample> = src_idx
            .iter()
            .map(|&i| &source[i])
            .chain(tgt_idx.iter().map(|&i| &target[i]))
            .collect();
        let att = self.att_loss_over(&self.gen, &union)?;

        let gamma = self.cfg.train.gamma;
        let confusion = if self.cfg.train.att_only || gamma == 0.0 {
            None
        } else {
            let frozen_mcd = self.mcd.detached();
            let pairs =
                self.build_pairs(&self.gen, source, target, &src_idx, &tgt_idx, sub_seed)?;
            Some(generator_confusion_loss(&frozen_mcd, &pairs)?)
        };
        let total = match &confusion {
            Some(conf) => conf.scale(lit(gamma)).add(&att)?,
            None => att.clone(),
        };

        self.gen.zero_grads();
        backward(&total)?;
        self.gen_opt.step(&self.gen)?;
        if self.mcd.content_hash() != mcd_hash {
            return Err(TrainError::FreezeViolation {
                side: "discriminator",
                phase: "recognizer",
            });
        }
        self.step += 1;
        self.log_maybe("adversarial_g", "att", wide(att.item()));
        if let Some(conf) = confusion {
            self.log_maybe("adversarial_g", "conf", wide(conf.item()));
        }
        Ok(())
    }

    /// Warm up the discriminator on frozen recognizer features.
    pub fn pretrain_mcd(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        steps: usize,
    ) -> Result<(), TrainError> {
        if source.is_empty() {
            return Err(TrainError::Empty { what: "source" });
        }
        if target.is_empty() {
            return Err(TrainError::Empty { what: "target" });
        }
        let mut src_stream = BatchStream::new(source.len());
        let mut tgt_stream = BatchStream::new(target.len());
        for _ in 0..steps {
            self.discriminator_step(
                source,
                target,
                &mut src_stream,
                &mut tgt_stream,
                "pretrain_mcd",
            )?;
        }
        Ok(())
    }

    /// The alternating schedule: each round runs `d_steps` discriminator
    /// updates then `g_steps` recognizer updates.
    pub fn adversarial_rounds(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        rounds: usize,
    ) -> Result<(), TrainError> {
        if source.is_empty() {
            return Err(TrainError::Empty { what: "source" });
        }
        if target.is_empty() {
            return Err(TrainError::Empty { what: "target" });
        }
        let mut src_stream = BatchStream::new(source.len());
        let mut tgt_stream = BatchStream::new(target.len());
        for _ in 0..rounds {
            for _ in 0..self.cfg.train.d_steps {
                self.discriminator_step(
                    source,
                    target,
                    &mut src_stream,
                    &mut tgt_stream,
                    "adversarial_d",
                )?;
            }
            for _ in 0..self.cfg.train.g_steps {
                self.generator_step(source, target, &mut src_stream, &mut tgt_stream)?;
            }
        }
        Ok(())
    }

    /// Finetune the recognizer on target-only or ratio-mixed batches.
    pub fn finetune(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        mode: FinetuneMode,
        steps: usize,
    ) -> Result<(), TrainError> {
        if target.is_empty() {
            return Err(TrainError::Empty { what: "target" });
        }
        if mode == FinetuneMode::SourcePlusTarget && source.is_empty() {
            return Err(TrainError::Empty { what: "source" });
        }
        let (n_src, n_tgt, phase) = match mode {
            FinetuneMode::TargetOnly => (0, self.cfg.train.batch_size, "finetune_t"),
            FinetuneMode::SourcePlusTarget => {
                let (s, t) = mixed_batch_sizes(
                    self.cfg.train.batch_size,
                    self.cfg.train.source_target_ratio,
                );
                (s, t, "finetune_st")
            }
        };
        let mut src_stream = BatchStream::new(source.len());
        let mut tgt_stream = BatchStream::new(target.len());
        for _ in 0..steps {
            let mut picked: Vec<&Sample> = Vec::with_capacity(n_src + n_tgt);
            if n_src > 0 {
                for i in src_stream.next_batch(n_src, &mut self.rng) {
                    picked.push(&source[i]);
                }
            }
            for i in tgt_stream.next_batch(n_tgt, &mut self.rng) {
                picked.push(&target[i]);
            }
            let loss = self.att_loss_over(&self.gen, &picked)?;
            self.gen.zero_grads();
            backward(&loss)?;
            self.gen_opt.step(&self.gen)?;
            self.step += 1;
            self.log_maybe(phase, "att", wide(loss.item()));
        }
        Ok(())
    }

    /// Greedy-decode one sample with the current recognizer.
    pub fn predict(&self, sample: &Sample) -> Result<String, TrainError> {
        let features = encode(&self.cfg.model, &self.gen, &image_tensor(&sample.image))?;
        let out = decode_greedy(
            &self.cfg.model,
            &self.gen,
            &features,
            self.cfg.model.max_len,
        )?;
        Ok(decode_label(&self.cfg.model, &out.indices))
    }

    /// Everything needed to resume bit-exactly.
    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            params: self.gen.merged(&self.mcd).to_raw(),
            optimizers: vec![self.gen_opt.state(), self.mcd_opt.state()],
            step: self.step,
            rng_state: save_state(&self.rng),
            config_text: self.cfg.render(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Trainer<F>, TrainError> {
        let cfg = Config::parse(&ckpt.config_text)?;
        cfg.validate()?;
        let all = ParamSet::from_raw(&ckpt.params);
        let mcd = all.subset("mcd.");
        let mut gen = ParamSet::new();
        for (name, t) in all.iter() {
            if !name.starts_with("mcd.") {
                gen.insert(name, t.clone());
            }
        }
        if ckpt.optimizers.len() != 2 {
            return Err(TrainError::OptimizerCount {
                got: ckpt.optimizers.len(),
                want: 2,
            });
        }
        let lr = lit::<F>(cfg.train.lr);
        let mut opts = Vec::with_capacity(2);
        for state in &ckpt.optimizers {
            let mut opt = optimizer_from_kind(state.kind, lr)
                .ok_or(TrainError::UnknownOptimizer(state.kind))?;
            opt.load_state(state.clone())?;
            opts.push(opt);
        }
        let mcd_opt = opts.pop().expect("two optimizers");
        let gen_opt = opts.pop().expect("two optimizers");
        let rng = restore_state(&ckpt.rng_state)?;
        Ok(Trainer {
            cfg,
            gen,
            mcd,
            gen_opt,
            mcd_opt,
            rng,
            log: MetricsLog::default(),
            step: ckpt.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DomainSpec, GenSpec};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.feature_dim = 8;
        cfg.model.decoder_hidden = 16;
        cfg.model.attention_hidden = 8;
        cfg.model.embed_dim = 4;
        cfg.model.conv1_channels = 2;
        cfg.model.conv2_channels = 4;
        cfg.model.mcd_hidden = 16;
        cfg.model.max_len = 3;
        cfg.train.batch_size = 4;
        cfg.train.pairs_per_group = 8;
        cfg
    }

    fn tiny_data(cfg: &Config, seed: u64, count: usize, domain: DomainSpec) -> Vec<Sample> {
        generate_dataset(&GenSpec {
            domain_name: "toy".into(),
            alphabet: cfg.model.alphabet.clone(),
            height: cfg.model.height,
            glyph_width: cfg.model.glyph_width,
            min_len: 1,
            max_len: cfg.model.max_len,
            count,
            seed,
            domain,
            threads: 1,
        })
        .unwrap()
        .samples
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let cfg = tiny_config();
        let source = tiny_data(&cfg, 1, 4, DomainSpec::clean());
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let before = tr.gen.content_hash();
        tr.pretrain_attention(&source, 0).unwrap();
        assert_eq!(tr.gen.content_hash(), before);
        assert_eq!(tr.step, 0);
        assert!(tr.log.lines.is_empty());
    }

    #[test]
    fn pretraining_overfits_one_sample() {
        let mut cfg = tiny_config();
        cfg.train.batch_size = 1;
        let source = tiny_data(&cfg, 2, 1, DomainSpec::clean());
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        tr.pretrain_attention(&source, 200).unwrap();
        let last = tr.log.lines.last().unwrap();
        assert!(last.value < 0.01, "final loss {}", last.value);
        assert_eq!(tr.predict(&source[0]).unwrap(), source[0].label);
    }

    #[test]
    fn equal_seeds_give_identical_logs_and_params() {
        let cfg = tiny_config();
        let source = tiny_data(&cfg, 3, 6, DomainSpec::clean());
        let mut a = Trainer::<f64>::new(cfg.clone()).unwrap();
        let mut b = Trainer::<f64>::new(cfg).unwrap();
        a.pretrain_attention(&source, 5).unwrap();
        b.pretrain_attention(&source, 5).unwrap();
        assert_eq!(a.log.to_tsv(), b.log.to_tsv());
        assert_eq!(a.gen.content_hash(), b.gen.content_hash());
        assert_eq!(a.log.lines.len(), 5);
    }

    #[test]
    fn mcd_warmup_freezes_recognizer_and_beats_chance() {
        let cfg = tiny_config();
        let source = tiny_data(&cfg, 4, 6, DomainSpec::clean());
        let target = tiny_data(
            &cfg,
            5,
            4,
            DomainSpec {
                invert: true,
                ..DomainSpec::clean()
            },
        );
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let gen_hash = tr.gen.content_hash();
        tr.pretrain_mcd(&source, &target, 30).unwrap();
        assert_eq!(
            tr.gen.content_hash(),
            gen_hash,
            "recognizer must stay frozen"
        );
        let last = tr.log.lines.last().unwrap();
        assert_eq!(last.loss_name, "disc");
        assert!(
            last.value < 4.0f64.ln(),
            "warmed-up discriminator should beat chance: {}",
            last.value
        );
        assert!(matches!(
            tr.pretrain_mcd(&source, &[], 1),
            Err(TrainError::Empty { what: "target" })
        ));
    }

    #[test]
    fn adversarial_rounds_respect_freeze_contracts() {
        let cfg = tiny_config();
        let source = tiny_data(&cfg, 6, 6, DomainSpec::clean());
        let target = tiny_data(
            &cfg,
            7,
            4,
            DomainSpec {
                invert: true,
                ..DomainSpec::clean()
            },
        );
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        tr.begin_adam_phase();
        tr.adversarial_rounds(&source, &target, 3).unwrap();
        assert_eq!(tr.step, 6);
        let names: Vec<&str> = tr.log.lines.iter().map(|l| l.loss_name).collect();
        assert_eq!(
            names,
            ["disc", "att", "conf", "disc", "att", "conf", "disc", "att", "conf"]
        );
    }

    #[test]
    fn gamma_zero_matches_att_only_run_exactly() {
        let base = tiny_config();
        let source = tiny_data(&base, 8, 6, DomainSpec::clean());
        let target = tiny_data(
            &base,
            9,
            4,
            DomainSpec {
                invert: true,
                ..DomainSpec::clean()
            },
        );

        let mut zero = base.clone();
        zero.train.gamma = 0.0;
        let mut a = Trainer::<f64>::new(zero).unwrap();
        a.begin_adam_phase();
        a.adversarial_rounds(&source, &target, 3).unwrap();

        let mut only = base.clone();
        only.train.att_only = true;
        let mut b = Trainer::<f64>::new(only).unwrap();
        b.begin_adam_phase();
        b.adversarial_rounds(&source, &target, 3).unwrap();

        assert_eq!(a.gen.content_hash(), b.gen.content_hash());
        assert_eq!(a.mcd.content_hash(), b.mcd.content_hash());
        assert_eq!(
            a.log.filtered_tsv(&["att", "disc"]),
            b.log.filtered_tsv(&["att", "disc"])
        );
        assert!(a.log.lines.iter().all(|l| l.loss_name != "conf"));
    }

    #[test]
    fn mixed_batches_compose_at_the_documented_ratio() {
        assert_eq!(mixed_batch_sizes(63, 20), (60, 3));
        assert_eq!(mixed_batch_sizes(64, 20), (61, 3));
        assert_eq!(mixed_batch_sizes(10, 20), (9, 1));
    }

    #[test]
    fn finetune_target_only_overfits_one_sample() {
        let mut cfg = tiny_config();
        cfg.train.batch_size = 1;
        let source = tiny_data(&cfg, 10, 2, DomainSpec::clean());
        let target = tiny_data(
            &cfg,
            11,
            1,
            DomainSpec {
                invert: true,
                ..DomainSpec::clean()
            },
        );
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        tr.pretrain_attention(&source, 20).unwrap();
        tr.begin_adam_phase();
        tr.finetune(&source, &target, FinetuneMode::TargetOnly, 250)
            .unwrap();
        assert_eq!(tr.predict(&target[0]).unwrap(), target[0].label);
        assert!(matches!(
            tr.finetune(&source, &[], FinetuneMode::TargetOnly, 1),
            Err(TrainError::Empty { what: "target" })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_transparent_mid_training() {
        let cfg = tiny_config();
        let source = tiny_data(&cfg, 12, 6, DomainSpec::clean());
        let target = tiny_data(
            &cfg,
            13,
            4,
            DomainSpec {
                invert: true,
                ..DomainSpec::clean()
            },
        );

        let mut a = Trainer::<f64>::new(cfg).unwrap();
        a.begin_adam_phase();
        a.adversarial_rounds(&source, &target, 2).unwrap();
        let ckpt = a.to_checkpoint();
        a.adversarial_rounds(&source, &target, 2).unwrap();

        let mut b = Trainer::<f64>::from_checkpoint(&ckpt).unwrap();
        b.adversarial_rounds(&source, &target, 2).unwrap();

        assert_eq!(a.gen.content_hash(), b.gen.content_hash());
        assert_eq!(a.mcd.content_hash(), b.mcd.content_hash());
        let a_tail: Vec<&MetricLine> = a.log.lines.iter().skip(6).collect();
        let b_tail: Vec<&MetricLine> = b.log.lines.iter().collect();
        assert_eq!(a_tail, b_tail);
    }
}
