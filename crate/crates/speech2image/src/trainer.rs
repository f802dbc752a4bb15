//! Two-phase training orchestration.
//!
//! Phase 1 (`pretrain`): the speech encoder and image projection head learn
//! the joint embedding space with the matching loss, and the evaluation
//! classifier learns the corpus labels. Phase 2 (`GanTrainer`): alternating
//! 1:1 discriminator/generator steps with distinct Adam learning rates
//! (two-timescale rule), hinge objectives, the gradient penalty on real
//! matched pairs, and the matching loss on generated images.
//!
//! Everything is a pure function of (seed, config, dataset): batch order,
//! latent draws, and initialization come from forked deterministic streams,
//! and the full state round-trips through checkpoints bit-exactly.

use crate::checkpoint::Checkpoint;
use crate::data::{epoch_batches, load_batch, Batch, Manifest, Split};
#[cfg(test)]
use crate::fusion::FuseMode;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::extractor::{cross_entropy, Classifier, ImageHead};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{damsm_global_loss, hinge_d_loss, hinge_g_loss, magp_penalty, LossWeights};
use crate::nn::{zero_grads, Adam, Mode, Module};
use crate::rng::Rng;
use crate::speech::{SpeechEncoder, SpeechEncoderConfig};
use crate::tensor::{no_grad, Tensor};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    /// Learning rate for the pretraining-phase classifier.
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: u64,
    pub pretrain_steps: u64,
    pub seed: u64,
    /// 0 disables periodic in-training evaluation records.
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_classifier: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            batch: 16,
            steps: 5000,
            pretrain_steps: 1000,
            seed: 7,
            eval_every: 0,
            checkpoint_every: 1000,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch must be >= 2 (mismatch pairing and the matching loss need it), got {}",
                self.batch
            )));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 || self.lr_classifier <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

/// Per-step loss components, in log order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub d_adv: f64,
    pub magp: f64,
    pub g_adv: f64,
    pub damsm: f64,
}

impl StepRecord {
    /// One machine-parseable log line.
    pub fn log_line(&self) -> String {
        format!(
            "step={} d_adv={:.6} magp={:.6} g_adv={:.6} damsm={:.6}",
            self.step, self.d_adv, self.magp, self.g_adv, self.damsm
        )
    }
}

pub struct PretrainOutcome {
    pub encoder: SpeechEncoder<f32>,
    pub head: ImageHead<f32>,
    pub classifier: Classifier<f32>,
    /// Held-out matched-minus-mismatched mean cosine similarity.
    pub cosine_gap: f64,
    /// Set when the dataset has one class: the matching loss is still
    /// defined, but the gap is not meaningful.
    pub degenerate_single_class: bool,
}

fn mean_cosine(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| (*p as f64) * (*q as f64)).sum();
        let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        if nx > 0.0 && ny > 0.0 {
            acc += dot / (nx * ny);
        }
    }
    acc / a.len() as f64
}

/// Train the speech encoder + image head with the matching loss and the
/// evaluation classifier with cross-entropy, then measure the held-out
/// matched-vs-mismatched cosine gap.
pub fn pretrain(
    manifest: &Manifest,
    cfg: &TrainConfig,
    enc_cfg: SpeechEncoderConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let n_classes = manifest.n_classes();
    let degenerate = n_classes < 2;

    let mut init = Rng::seed_from(cfg.seed);
    let mut enc_rng = init.fork(1);
    let mut head_rng = init.fork(2);
    let mut clf_rng = init.fork(3);
    let encoder = SpeechEncoder::<f32>::new(&mut enc_rng, enc_cfg)?;
    let head = ImageHead::<f32>::new(&mut head_rng, enc_cfg.embed_dim);
    let classifier = Classifier::<f32>::new(&mut clf_rng, n_classes.max(2));

    let enc_params: Vec<Tensor<f32>> = encoder.params().into_iter().map(|(_, t)| t).collect();
    let head_params: Vec<Tensor<f32>> = head.params().into_iter().map(|(_, t)| t).collect();
    let clf_params: Vec<Tensor<f32>> = classifier.params().into_iter().map(|(_, t)| t).collect();
    let mut joint: Vec<Tensor<f32>> = enc_params.iter().chain(&head_params).cloned().collect();
    let mut opt_joint = Adam::new(&joint, cfg.lr_g, cfg.beta1, cfg.beta2);
    let mut opt_clf = Adam::new(&clf_params, cfg.lr_classifier, cfg.beta1, cfg.beta2);

    let mut epoch = 0u64;
    let mut plan = epoch_batches(manifest, Split::Train, cfg.batch, cfg.seed, epoch)?;
    let mut cursor = 0usize;
    for _ in 0..cfg.pretrain_steps {
        if cursor >= plan.len() {
            epoch += 1;
            plan = epoch_batches(manifest, Split::Train, cfg.batch, cfg.seed, epoch)?;
            cursor = 0;
        }
        let batch = load_batch(manifest, &plan[cursor])?;
        cursor += 1;

        let sp = encoder.forward(&batch.frames, Mode::Train)?;
        let ie = head.forward(&batch.images)?;
        let match_loss = damsm_global_loss(&ie, &sp, cfg.loss.gamma_damsm)?;
        if !match_loss.all_finite() {
            return Err(Error::Numeric("non-finite matching loss in pretraining".into()));
        }
        zero_grads(&joint);
        let refs: Vec<&Tensor<f32>> = joint.iter().collect();
        match_loss.backward_wrt(&refs)?;
        opt_joint.step(&joint);

        let (logits, _) = classifier.forward(&batch.images)?;
        let ce = cross_entropy(&logits, &batch.class_ids);
        zero_grads(&clf_params);
        let refs: Vec<&Tensor<f32>> = clf_params.iter().collect();
        ce.backward_wrt(&refs)?;
        opt_clf.step(&clf_params);
    }
    joint.clear();

    // Held-out gap: matched cosine minus shifted-pair cosine.
    let test_idx = manifest.split_indices(Split::Test);
    let eval_idx = if test_idx.is_empty() {
        manifest.split_indices(Split::Train)
    } else {
        test_idx
    };
    let mut sp_all: Vec<Vec<f32>> = Vec::new();
    let mut im_all: Vec<Vec<f32>> = Vec::new();
    for chunk in eval_idx.chunks(cfg.batch.max(2)) {
        let b = load_batch(manifest, chunk)?;
        let (sp, ie) = no_grad(|| -> Result<_> {
            Ok((
                encoder.forward(&b.frames, Mode::Eval)?,
                head.forward(&b.images)?,
            ))
        })?;
        let d = enc_cfg.embed_dim;
        let (spv, iev) = (sp.to_vec(), ie.to_vec());
        for i in 0..chunk.len() {
            sp_all.push(spv[i * d..(i + 1) * d].to_vec());
            im_all.push(iev[i * d..(i + 1) * d].to_vec());
        }
    }
    let matched = mean_cosine(&im_all, &sp_all);
    let shifted: Vec<Vec<f32>> = (0..sp_all.len())
        .map(|i| sp_all[(i + 1) % sp_all.len()].clone())
        .collect();
    let mismatched = mean_cosine(&im_all, &shifted);

    Ok(PretrainOutcome {
        encoder,
        head,
        classifier,
        cosine_gap: matched - mismatched,
        degenerate_single_class: degenerate,
    })
}

/// Speech rows shifted by one within the batch: index i takes row i+1 mod n,
/// so every pair is mismatched whenever the batch holds distinct captions.
pub fn mismatch_shift(s: &Tensor<f32>) -> Tensor<f32> {
    let (n, d) = (s.shape()[0], s.shape()[1]);
    let v = s.to_vec();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let j = (i + 1) % n;
        out.extend_from_slice(&v[j * d..(j + 1) * d]);
    }
    Tensor::from_vec(out, &[n, d])
}

pub struct GanTrainer {
    pub cfg: TrainConfig,
    pub gen: Generator<f32>,
    pub disc: Discriminator<f32>,
    pub encoder: SpeechEncoder<f32>,
    pub head: ImageHead<f32>,
    gen_params: Vec<(String, Tensor<f32>)>,
    disc_params: Vec<(String, Tensor<f32>)>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    pub step: u64,
    rng: Rng,
    /// Per-manifest-record speech embeddings from the frozen encoder.
    emb_cache: Vec<Vec<f32>>,
    batches_per_epoch: usize,
    plan_epoch: u64,
    plan: Vec<Vec<usize>>,
}

impl GanTrainer {
    /// Build a fresh trainer around frozen encoders.
    pub fn new(
        manifest: &Manifest,
        cfg: TrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        encoder: SpeechEncoder<f32>,
        head: ImageHead<f32>,
    ) -> Result<GanTrainer> {
        cfg.validate()?;
        gen_cfg.validate()?;
        disc_cfg.validate()?;
        if gen_cfg.embed_dim != encoder.cfg.embed_dim || disc_cfg.embed_dim != encoder.cfg.embed_dim
        {
            return Err(Error::Config(format!(
                "embedding widths disagree: encoder {}, generator {}, discriminator {}",
                encoder.cfg.embed_dim, gen_cfg.embed_dim, disc_cfg.embed_dim
            )));
        }
        let mut init = Rng::seed_from(cfg.seed);
        let mut gen_rng = init.fork(10);
        let mut disc_rng = init.fork(11);
        let train_rng = init.fork(12);
        let gen = Generator::<f32>::new(&mut gen_rng, gen_cfg)?;
        let disc = Discriminator::<f32>::new(&mut disc_rng, disc_cfg)?;

        let gen_params = {
            let mut p = gen.params();
            p.extend(gen.buffers().into_iter().map(|(n, t)| (format!("buf.{n}"), t)));
            p
        };
        let trainable_g: Vec<(String, Tensor<f32>)> =
            gen.params().into_iter().map(|(n, t)| (format!("gen.{n}"), t)).collect();
        let trainable_d: Vec<(String, Tensor<f32>)> =
            disc.params().into_iter().map(|(n, t)| (format!("disc.{n}"), t)).collect();
        drop(gen_params);

        let opt_g = Adam::new(
            &trainable_g.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
            cfg.lr_g,
            cfg.beta1,
            cfg.beta2,
        );
        let opt_d = Adam::new(
            &trainable_d.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
            cfg.lr_d,
            cfg.beta1,
            cfg.beta2,
        );

        let emb_cache = embed_all(manifest, &encoder, cfg.batch)?;
        let plan = epoch_batches(manifest, Split::Train, cfg.batch, cfg.seed, 0)?;
        Ok(GanTrainer {
            cfg,
            gen,
            disc,
            encoder,
            head,
            gen_params: trainable_g,
            disc_params: trainable_d,
            opt_g,
            opt_d,
            step: 0,
            rng: train_rng,
            emb_cache,
            batches_per_epoch: plan.len(),
            plan_epoch: 0,
            plan,
        })
    }

    pub fn lr_ratio(&self) -> f64 {
        self.opt_d.lr / self.opt_g.lr
    }

    /// Speech embedding rows for a set of manifest records.
    pub fn embeddings_for(&self, record_indices: &[usize]) -> Tensor<f32> {
        let d = self.encoder.cfg.embed_dim;
        let mut data = Vec::with_capacity(record_indices.len() * d);
        for &i in record_indices {
            data.extend_from_slice(&self.emb_cache[i]);
        }
        Tensor::from_vec(data, &[record_indices.len(), d])
    }

    fn batch_for_step(&mut self, manifest: &Manifest, step: u64) -> Result<Vec<usize>> {
        let epoch = step / self.batches_per_epoch as u64;
        let idx = (step % self.batches_per_epoch as u64) as usize;
        if epoch != self.plan_epoch {
            self.plan = epoch_batches(manifest, Split::Train, self.cfg.batch, self.cfg.seed, epoch)?;
            self.plan_epoch = epoch;
        }
        Ok(self.plan[idx].clone())
    }

    /// One alternating D/G update on the next scheduled batch.
    pub fn step_next(&mut self, manifest: &Manifest) -> Result<StepRecord> {
        let indices = self.batch_for_step(manifest, self.step)?;
        let batch = load_batch(manifest, &indices)?;
        self.train_step(&batch)
    }

    /// One alternating D/G update on an explicit batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let n = batch.record_indices.len();
        let z_dim = self.gen.cfg.z_dim;
        let s_plain = self.embeddings_for(&batch.record_indices);

        // --- discriminator substep ---
        let x_real = batch.images.detach().requires_grad();
        let s_real = s_plain.detach().requires_grad();
        let z1 = Tensor::<f32>::randn(&mut self.rng, &[n, z_dim]);
        let x_fake = no_grad(|| self.gen.forward(&z1, &s_plain, Mode::Train))?;

        let feat_real = self.disc.encode_image(&x_real)?;
        let d_real = self.disc.score_features(&feat_real, &s_real)?;
        let d_fake = self.disc.forward(&x_fake, &s_plain)?;
        let s_mis = mismatch_shift(&s_plain);
        let d_mis = self.disc.score_features(&feat_real, &s_mis)?;

        let l_adv = hinge_d_loss(&d_real, &d_fake, &d_mis);
        let l_magp = magp_penalty(&d_real, &x_real, &s_real, &self.cfg.loss)?;
        let l_d = l_adv.add(&l_magp);
        self.check_finite("discriminator", &[("d_adv", &l_adv), ("magp", &l_magp)])?;

        let d_tensors: Vec<&Tensor<f32>> = self.disc_params.iter().map(|(_, t)| t).collect();
        zero_grads(&self.disc_params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
        l_d.backward_wrt(&d_tensors)?;
        self.opt_d
            .step(&self.disc_params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());

        // --- generator substep ---
        let z2 = Tensor::<f32>::randn(&mut self.rng, &[n, z_dim]);
        let x_hat = self.gen.forward(&z2, &s_plain, Mode::Train)?;
        let d_fake2 = self.disc.forward(&x_hat, &s_plain)?;
        let l_g_adv = hinge_g_loss(&d_fake2);
        let img_emb = self.head.forward(&x_hat)?;
        let l_damsm = damsm_global_loss(&img_emb, &s_plain, self.cfg.loss.gamma_damsm)?;
        let l_g = l_g_adv.add(&l_damsm.mul_scalar(self.cfg.loss.lambda_damsm as f32));
        self.check_finite("generator", &[("g_adv", &l_g_adv), ("damsm", &l_damsm)])?;

        let g_tensors: Vec<&Tensor<f32>> = self.gen_params.iter().map(|(_, t)| t).collect();
        zero_grads(&self.gen_params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
        l_g.backward_wrt(&g_tensors)?;
        self.opt_g
            .step(&self.gen_params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());

        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            d_adv: l_adv.item() as f64,
            magp: l_magp.item() as f64,
            g_adv: l_g_adv.item() as f64,
            damsm: l_damsm.item() as f64,
        })
    }

    fn check_finite(&self, phase: &str, components: &[(&str, &Tensor<f32>)]) -> Result<()> {
        if components.iter().all(|(_, t)| t.all_finite()) {
            return Ok(());
        }
        let mut report = format!(
            "non-finite loss in the {phase} substep at step {}:",
            self.step
        );
        for (name, t) in components {
            report.push_str(&format!(" {name}={:?}", t.to_vec()));
        }
        let gnorm = |params: &[(String, Tensor<f32>)]| -> f64 {
            params
                .iter()
                .map(|(_, p)| {
                    p.with_grad(|g| {
                        g.map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                            .unwrap_or(0.0)
                    })
                })
                .sum::<f64>()
                .sqrt()
        };
        report.push_str(&format!(
            " |grad_g|={:.3e} |grad_d|={:.3e}",
            gnorm(&self.gen_params),
            gnorm(&self.disc_params)
        ));
        Err(Error::Numeric(report))
    }

    /// Full training state: parameters, buffers, both optimizers, the RNG
    /// stream, and the step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("gan-trainer");
        for (name, t) in &self.gen_params {
            ck.insert_tensor(name, t);
        }
        for (name, t) in &self.disc_params {
            ck.insert_tensor(name, t);
        }
        for (name, t) in self.gen.buffers() {
            ck.insert_tensor(&format!("gen_buf.{name}"), &t);
        }
        for (name, t) in self.encoder.params() {
            ck.insert_tensor(&format!("enc.{name}"), &t);
        }
        for (name, t) in self.encoder.buffers() {
            ck.insert_tensor(&format!("enc_buf.{name}"), &t);
        }
        for (name, t) in self.head.params() {
            ck.insert_tensor(&format!("head.{name}"), &t);
        }
        let put_opt = |ck: &mut Checkpoint, tag: &str, opt: &Adam<f32>, params: &[(String, Tensor<f32>)]| {
            let (t, m, v) = opt.state();
            ck.insert_u64s(&format!("state.{tag}.t"), vec![t]);
            for ((name, p), (mi, vi)) in params.iter().zip(m.iter().zip(v)) {
                let shape = p.shape();
                ck.insert(
                    &format!("state.{tag}.m.{name}"),
                    crate::checkpoint::Record::F32 {
                        shape: shape.to_vec(),
                        data: mi.clone(),
                    },
                );
                ck.insert(
                    &format!("state.{tag}.v.{name}"),
                    crate::checkpoint::Record::F32 {
                        shape: shape.to_vec(),
                        data: vi.clone(),
                    },
                );
            }
        };
        put_opt(&mut ck, "opt_g", &self.opt_g, &self.gen_params);
        put_opt(&mut ck, "opt_d", &self.opt_d, &self.disc_params);
        ck.insert_u64s("state.step", vec![self.step]);
        ck.insert_u64s("state.rng", self.rng.state().to_vec());
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restore a trainer from a checkpoint. Model/config shapes must match;
    /// mismatches are refused with a full diff.
    pub fn resume(
        manifest: &Manifest,
        cfg: TrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        enc_cfg: SpeechEncoderConfig,
        ck: &Checkpoint,
    ) -> Result<GanTrainer> {
        // Fresh skeleton with the same init streams, then overwrite.
        let mut enc_seed = Rng::seed_from(cfg.seed);
        let mut enc_rng = enc_seed.fork(1);
        let mut head_rng = enc_seed.fork(2);
        let encoder = SpeechEncoder::<f32>::new(&mut enc_rng, enc_cfg)?;
        let head = ImageHead::<f32>::new(&mut head_rng, enc_cfg.embed_dim);
        let mut trainer = GanTrainer::new(manifest, cfg, gen_cfg, disc_cfg, encoder, head)?;
        trainer.load_state(ck)?;
        // The cache was built from freshly-initialized encoder weights;
        // rebuild it from the restored ones.
        trainer.emb_cache = embed_all(manifest, &trainer.encoder, trainer.cfg.batch)?;
        Ok(trainer)
    }

    /// Overwrite parameters, optimizer state, RNG, and step counter from a
    /// checkpoint.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for (name, t) in self.gen_params.iter().chain(&self.disc_params) {
            expected.push((name.clone(), t.shape().to_vec()));
        }
        for (name, t) in self.gen.buffers() {
            expected.push((format!("gen_buf.{name}"), t.shape().to_vec()));
        }
        for (name, t) in self.encoder.params() {
            expected.push((format!("enc.{name}"), t.shape().to_vec()));
        }
        for (name, t) in self.encoder.buffers() {
            expected.push((format!("enc_buf.{name}"), t.shape().to_vec()));
        }
        for (name, t) in self.head.params() {
            expected.push((format!("head.{name}"), t.shape().to_vec()));
        }
        let diffs = ck.diff_against(&expected);
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match the configured models:\n  {}",
                diffs.join("\n  ")
            )));
        }
        for (name, t) in &self.gen_params {
            ck.load_into(name, t)?;
        }
        for (name, t) in &self.disc_params {
            ck.load_into(name, t)?;
        }
        for (name, t) in self.gen.buffers() {
            ck.load_into(&format!("gen_buf.{name}"), &t)?;
        }
        for (name, t) in self.encoder.params() {
            ck.load_into(&format!("enc.{name}"), &t)?;
        }
        for (name, t) in self.encoder.buffers() {
            ck.load_into(&format!("enc_buf.{name}"), &t)?;
        }
        for (name, t) in self.head.params() {
            ck.load_into(&format!("head.{name}"), &t)?;
        }
        let grab_opt = |tag: &str, params: &[(String, Tensor<f32>)]| -> Result<(u64, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
            let t = ck.get_u64s(&format!("state.{tag}.t"))?[0];
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, _) in params {
                for (dst, kind) in [(&mut m, "m"), (&mut v, "v")] {
                    match ck.get(&format!("state.{tag}.{kind}.{name}")) {
                        Some(crate::checkpoint::Record::F32 { data, .. }) => dst.push(data.clone()),
                        _ => {
                            return Err(Error::Checkpoint(format!(
                                "missing optimizer moment state.{tag}.{kind}.{name}"
                            )))
                        }
                    }
                }
            }
            Ok((t, m, v))
        };
        let (t, m, v) = grab_opt("opt_g", &self.gen_params)?;
        self.opt_g.restore(t, m, v);
        let (t, m, v) = grab_opt("opt_d", &self.disc_params)?;
        self.opt_d.restore(t, m, v);
        self.step = ck.get_u64s("state.step")?[0];
        let rs = ck.get_u64s("state.rng")?;
        if rs.len() != 4 {
            return Err(Error::Checkpoint("bad rng state length".into()));
        }
        self.rng = Rng::from_state([rs[0], rs[1], rs[2], rs[3]]);
        Ok(())
    }
}

/// Embed every manifest record's caption with the (frozen) encoder.
fn embed_all(
    manifest: &Manifest,
    encoder: &SpeechEncoder<f32>,
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let d = encoder.cfg.embed_dim;
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let mut out = vec![Vec::new(); all.len()];
    for chunk in all.chunks(batch.max(2)) {
        let b = load_batch(manifest, chunk)?;
        let emb = no_grad(|| encoder.forward(&b.frames, Mode::Eval))?;
        let v = emb.to_vec();
        for (k, &i) in chunk.iter().enumerate() {
            out[i] = v[k * d..(k + 1) * d].to_vec();
        }
    }
    Ok(out)
}
