//! Operator entry points behind the CLI subcommands: corpus synthesis,
//! encoder pretraining, adversarial training, sample generation, and
//! evaluation. Each writes its artifacts plus a resolved-config snapshot
//! under the configured output directory and is idempotent for a fixed
//! (config, seed).

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{epoch_batches, load_batch, pngio, synth::synth_corpus, Manifest, Split};
use crate::error::{Error, Result};
use crate::extractor::{params_checksum, Classifier, ImageHead};
use crate::generator::Generator;
use crate::metrics::{
    fid, gaussian_stats, inception_score, recall_at_k, retrieval_map, FeatureExtractor,
};
use crate::nn::{Mode, Module};
use crate::rng::Rng;
use crate::speech::SpeechEncoder;
use crate::tensor::{no_grad, Tensor};
use crate::trainer::{pretrain, GanTrainer, StepRecord};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const ENCODERS_CKPT: &str = "encoders.ckpt";
pub const TRAIN_CKPT: &str = "train_final.ckpt";
pub const METRICS_LOG: &str = "metrics.log";

/// Synthesize the corpus into `paths.corpus_dir`.
pub fn cmd_synth_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.corpus_dir.clone();
    synth_corpus(&cfg.corpus, &dir)?;
    cfg.write_snapshot(&dir)?;
    Ok(dir.join("manifest.tsv"))
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.corpus_dir.join("manifest.tsv")
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let p = manifest_path(cfg);
    if !p.exists() {
        return Err(Error::Data(format!(
            "no corpus manifest at {} (run synth-data first)",
            p.display()
        )));
    }
    Manifest::load(&p)
}

/// Pretrain encoders + classifier and write `encoders.ckpt`.
/// Returns (checkpoint path, held-out cosine gap, degenerate-class warning).
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(PathBuf, f64, bool)> {
    let manifest = load_manifest(cfg)?;
    let outcome = pretrain(&manifest, &cfg.train, cfg.speech)?;

    let mut ck = Checkpoint::new("encoders");
    for (name, t) in outcome.encoder.params() {
        ck.insert_tensor(&format!("enc.{name}"), &t);
    }
    for (name, t) in outcome.encoder.buffers() {
        ck.insert_tensor(&format!("enc_buf.{name}"), &t);
    }
    for (name, t) in outcome.head.params() {
        ck.insert_tensor(&format!("head.{name}"), &t);
    }
    for (name, t) in outcome.classifier.params() {
        ck.insert_tensor(&format!("clf.{name}"), &t);
    }
    ck.insert_u64s("state.n_classes", vec![outcome.classifier.n_classes as u64]);
    let dir = &cfg.paths.checkpoint_dir;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(ENCODERS_CKPT);
    ck.save(&path)?;
    cfg.write_snapshot(dir)?;
    Ok((path, outcome.cosine_gap, outcome.degenerate_single_class))
}

/// Rebuild encoder + head + classifier from `encoders.ckpt`.
pub fn load_encoders(
    cfg: &RunConfig,
    n_classes: usize,
) -> Result<(SpeechEncoder<f32>, ImageHead<f32>, Classifier<f32>)> {
    let path = cfg.paths.checkpoint_dir.join(ENCODERS_CKPT);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing encoder checkpoint {} (run pretrain first)",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let stored_classes = ck.get_u64s("state.n_classes")?[0] as usize;
    if stored_classes != n_classes.max(2) {
        return Err(Error::Checkpoint(format!(
            "classifier was pretrained for {stored_classes} classes, corpus has {n_classes}"
        )));
    }
    let seed = cfg.train.seed;
    let mut init = Rng::seed_from(seed);
    let mut enc_rng = init.fork(1);
    let mut head_rng = init.fork(2);
    let mut clf_rng = init.fork(3);
    let encoder = SpeechEncoder::<f32>::new(&mut enc_rng, cfg.speech)?;
    let head = ImageHead::<f32>::new(&mut head_rng, cfg.speech.embed_dim);
    let classifier = Classifier::<f32>::new(&mut clf_rng, stored_classes);
    for (name, t) in encoder.params() {
        ck.load_into(&format!("enc.{name}"), &t)?;
    }
    for (name, t) in encoder.buffers() {
        ck.load_into(&format!("enc_buf.{name}"), &t)?;
    }
    for (name, t) in head.params() {
        ck.load_into(&format!("head.{name}"), &t)?;
    }
    for (name, t) in classifier.params() {
        ck.load_into(&format!("clf.{name}"), &t)?;
    }
    Ok((encoder, head, classifier))
}

/// Build a trainer: fresh from pretrained encoders, or resumed from a
/// training checkpoint.
pub fn build_trainer(cfg: &RunConfig, resume: Option<&Path>) -> Result<GanTrainer> {
    let manifest = load_manifest(cfg)?;
    match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            GanTrainer::resume(
                &manifest,
                cfg.train,
                cfg.generator,
                cfg.discriminator.clone(),
                cfg.speech,
                &ck,
            )
        }
        None => {
            let n_classes = manifest.n_classes();
            let (encoder, head, _clf) = load_encoders(cfg, n_classes)?;
            GanTrainer::new(
                &manifest,
                cfg.train,
                cfg.generator,
                cfg.discriminator.clone(),
                encoder,
                head,
            )
        }
    }
}

/// Adversarial training to `cfg.train.steps`, appending one loss record per
/// step to the metrics log and checkpointing periodically. Returns the
/// final checkpoint path and the collected records.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(PathBuf, Vec<StepRecord>)> {
    let manifest = load_manifest(cfg)?;
    let mut trainer = build_trainer(cfg, resume)?;
    let dir = cfg.paths.checkpoint_dir.clone();
    std::fs::create_dir_all(&dir)?;
    cfg.write_snapshot(&dir)?;
    let log_path = dir.join(METRICS_LOG);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let n_classes = manifest.n_classes();
    let eval_assets = if cfg.train.eval_every > 0 {
        let (_, head, clf) = load_encoders(cfg, n_classes)?;
        Some((head, clf))
    } else {
        None
    };
    let mut records = Vec::new();
    while trainer.step < cfg.train.steps {
        let rec = trainer.step_next(&manifest)?;
        writeln!(log, "{}", rec.log_line())?;
        if cfg.train.checkpoint_every > 0 && rec.step % cfg.train.checkpoint_every == 0 {
            trainer.save(&dir.join(format!("train_step{:07}.ckpt", rec.step)))?;
        }
        if let Some((head, clf)) = &eval_assets {
            if rec.step % cfg.train.eval_every == 0 {
                let report = evaluate_generator(
                    &EvalJob {
                        manifest: &manifest,
                        trainer: &trainer,
                        head,
                        classifier: clf,
                        samples_per_caption: 1,
                        is_splits: 1,
                        recall_k: cfg.eval.recall_k,
                        want_is: false,
                        want_fid: true,
                        want_map: true,
                        want_recall: false,
                        seed: cfg.train.seed,
                        max_captions: Some(128),
                    },
                    cfg.hash(),
                )?;
                std::fs::create_dir_all(&cfg.paths.report_dir)?;
                std::fs::write(
                    cfg.paths.report_dir.join(format!("eval_step{:07}.txt", rec.step)),
                    report.render(),
                )?;
            }
        }
        records.push(rec);
    }
    let final_path = dir.join(TRAIN_CKPT);
    trainer.save(&final_path)?;
    Ok((final_path, records))
}

/// Deterministic latent draws for generation: one stream per run seed.
fn draw_latents(rng: &mut Rng, n: usize, z_dim: usize) -> Vec<Tensor<f32>> {
    (0..n).map(|_| Tensor::randn(rng, &[1, z_dim])).collect()
}

/// Generate samples for the first `grid_captions` test captions: individual
/// PNGs, a contact sheet, a z log, and optional raw sidecars.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg)?;
    let trainer = build_trainer(cfg, Some(checkpoint))?;
    let gen = &trainer.gen;
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;

    let test = manifest.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let captions: Vec<usize> = test
        .iter()
        .copied()
        .take(cfg.eval.grid_captions)
        .collect();
    let n_samples = cfg.eval.grid_samples;
    let seed = cfg.seed.unwrap_or(cfg.train.seed);
    let mut rng = Rng::seed_from(seed ^ 0x67656e65726174); // independent stream per command

    let mut written = Vec::new();
    let mut tiles = Vec::new();
    let mut zlog = String::new();
    for (ci, &rec_idx) in captions.iter().enumerate() {
        let s = trainer.embeddings_for(&[rec_idx]);
        for k in 0..n_samples {
            let z = draw_latents(&mut rng, 1, gen.cfg.z_dim).remove(0);
            let img = no_grad(|| gen.forward(&z, &s, Mode::Eval))?;
            let r = gen.cfg.out_res;
            let single = img.reshape(&[3, r, r]);
            let png_path = out_dir.join(format!("gen_c{ci:03}_s{k:02}.png"));
            pngio::write_rgb(&png_path, r, r, &pngio::tensor_to_rgb(&single))?;
            if cfg.eval.raw_sidecar {
                let raw: Vec<u8> = single
                    .to_vec()
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                std::fs::write(png_path.with_extension("f32"), raw)?;
            }
            zlog.push_str(&format!(
                "caption={} sample={k} z={:?}\n",
                manifest.records[rec_idx].caption_id,
                z.to_vec()
            ));
            tiles.push(single);
            written.push(png_path);
        }
    }
    let (w, h, sheet) = pngio::tile_sheet(&tiles, n_samples.max(4).min(tiles.len()));
    let sheet_path = out_dir.join("sheet.png");
    pngio::write_rgb(&sheet_path, w, h, &sheet)?;
    written.push(sheet_path);
    std::fs::write(out_dir.join("z_log.txt"), zlog)?;
    Ok(written)
}

/// One evaluation report over the test split.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    pub fid: Option<f64>,
    pub map: Option<f64>,
    pub recall: Option<f64>,
    pub recall_k: usize,
    pub n_generated: usize,
    pub extractor_checksum: u64,
    pub config_hash: u64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n_generated={}\n", self.n_generated));
        if let (Some(m), Some(s)) = (self.is_mean, self.is_std) {
            out.push_str(&format!("is_mean={m:.6}\nis_std={s:.6}\n"));
        }
        if let Some(f) = self.fid {
            out.push_str(&format!("fid={f:.6}\n"));
        }
        if let Some(m) = self.map {
            out.push_str(&format!("map={m:.6}\n"));
        }
        if let Some(r) = self.recall {
            out.push_str(&format!("recall_at_{}={r:.6}\n", self.recall_k));
        }
        out.push_str(&format!(
            "extractor_checksum={:016x}\nconfig_hash={:016x}\n",
            self.extractor_checksum, self.config_hash
        ));
        out
    }
}

/// Generate images for every test caption and compute the configured
/// metrics against the real test split.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalReport> {
    let manifest = load_manifest(cfg)?;
    let wants = |m: &str| cfg.eval.metrics.iter().any(|x| x == m);
    let trainer = build_trainer(cfg, Some(checkpoint))?;
    let n_classes = manifest.n_classes();
    let (_enc, head, classifier) = load_encoders(cfg, n_classes)?;

    let test = manifest.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;

    let seed = cfg.seed.unwrap_or(cfg.train.seed);
    let report = evaluate_generator(
        &EvalJob {
            manifest: &manifest,
            trainer: &trainer,
            head: &head,
            classifier: &classifier,
            samples_per_caption: cfg.eval.samples_per_caption,
            is_splits: cfg.eval.is_splits,
            recall_k: cfg.eval.recall_k,
            want_is: wants("is"),
            want_fid: wants("fid"),
            want_map: wants("map"),
            want_recall: wants("recall"),
            seed,
            max_captions: None,
        },
        cfg.hash(),
    )?;
    std::fs::write(out_dir.join("evaluation.txt"), report.render())?;
    Ok(report)
}

pub struct EvalJob<'a> {
    pub manifest: &'a Manifest,
    pub trainer: &'a GanTrainer,
    pub head: &'a ImageHead<f32>,
    pub classifier: &'a Classifier<f32>,
    pub samples_per_caption: usize,
    pub is_splits: usize,
    pub recall_k: usize,
    pub want_is: bool,
    pub want_fid: bool,
    pub want_map: bool,
    pub want_recall: bool,
    pub seed: u64,
    /// Cap on test captions used (periodic in-training evaluations).
    pub max_captions: Option<usize>,
}

/// The metric pipeline shared by `cmd_evaluate` and the acceptance run.
///
/// Retrieval protocol: generated images (embedded by the projection head)
/// are queries against the real test gallery with class-match relevance;
/// recall ranks generated images for each speech query, the ground truth
/// being the sample generated from that caption.
pub fn evaluate_generator(job: &EvalJob<'_>, config_hash: u64) -> Result<EvalReport> {
    let manifest = job.manifest;
    let gen: &Generator<f32> = &job.trainer.gen;
    let mut test = manifest.split_indices(Split::Test);
    if let Some(cap) = job.max_captions {
        test.truncate(cap);
    }
    let mut rng = Rng::seed_from(job.seed ^ 0x6576616c75617465);

    // Generate in caption order; batch for throughput.
    let mut gen_images: Vec<Tensor<f32>> = Vec::new();
    let mut gen_labels: Vec<usize> = Vec::new();
    let mut query_records: Vec<usize> = Vec::new();
    for chunk in test.chunks(32) {
        for _ in 0..job.samples_per_caption {
            let s = job.trainer.embeddings_for(chunk);
            let z = Tensor::<f32>::randn(&mut rng, &[chunk.len(), gen.cfg.z_dim]);
            let imgs = no_grad(|| gen.forward(&z, &s, Mode::Eval))?;
            let r = gen.cfg.out_res;
            for (k, &rec) in chunk.iter().enumerate() {
                gen_images.push(imgs.narrow(0, k, 1).reshape(&[3, r, r]));
                gen_labels.push(manifest.records[rec].class_id);
                query_records.push(rec);
            }
        }
    }
    let n_generated = gen_images.len();

    // Extract classifier probabilities/features for generated images.
    let mut probs: Vec<Vec<f64>> = Vec::new();
    let mut gen_feats: Vec<Vec<f64>> = Vec::new();
    let mut gen_head_emb: Vec<Vec<f64>> = Vec::new();
    for chunk in gen_images.chunks(64) {
        let r = gen.cfg.out_res;
        let mut data = Vec::with_capacity(chunk.len() * 3 * r * r);
        for img in chunk {
            data.extend_from_slice(&img.to_vec());
        }
        let batch = Tensor::from_vec(data, &[chunk.len(), 3, r, r]);
        if job.want_is || job.want_fid {
            let (p, f) = job.classifier.extract(&batch)?;
            probs.extend(p);
            gen_feats.extend(f);
        }
        if job.want_map || job.want_recall {
            let emb = no_grad(|| job.head.forward(&batch))?;
            let d = job.head.embed_dim;
            let v = emb.to_vec();
            for i in 0..chunk.len() {
                gen_head_emb.push(v[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect());
            }
        }
    }

    let mut report = EvalReport {
        n_generated,
        extractor_checksum: job.classifier.checksum(),
        config_hash,
        recall_k: job.recall_k,
        ..EvalReport::default()
    };

    if job.want_is {
        let splits = if job.is_splits > 0 {
            job.is_splits
        } else if n_generated >= 1000 {
            10
        } else {
            1
        };
        let (m, s) = inception_score(&probs, splits)?;
        report.is_mean = Some(m);
        report.is_std = Some(s);
    }

    if job.want_fid || job.want_map || job.want_recall {
        // Real test images, loaded once.
        let mut real_feats: Vec<Vec<f64>> = Vec::new();
        let mut real_head_emb: Vec<Vec<f64>> = Vec::new();
        let mut real_labels: Vec<usize> = Vec::new();
        for chunk in test.chunks(64) {
            let b = load_batch(manifest, chunk)?;
            if job.want_fid {
                let (_, f) = job.classifier.extract(&b.images)?;
                real_feats.extend(f);
            }
            if job.want_map {
                let emb = no_grad(|| job.head.forward(&b.images))?;
                let d = job.head.embed_dim;
                let v = emb.to_vec();
                for i in 0..chunk.len() {
                    real_head_emb
                        .push(v[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect());
                }
            }
            real_labels.extend(b.class_ids);
        }
        if job.want_fid {
            let a = gaussian_stats(&gen_feats)?;
            let b = gaussian_stats(&real_feats)?;
            report.fid = Some(fid(&a, &b)?);
        }
        if job.want_map {
            report.map = Some(retrieval_map(
                &gen_head_emb,
                &gen_labels,
                &real_head_emb,
                &real_labels,
            )?);
        }
        if job.want_recall {
            // Speech queries against the generated gallery; truth = the
            // sample generated from that caption (first sample).
            let d = job.trainer.encoder.cfg.embed_dim;
            let mut sp: Vec<Vec<f64>> = Vec::new();
            let mut truth: Vec<usize> = Vec::new();
            for (qi, &rec) in test.iter().enumerate() {
                let e = job.trainer.embeddings_for(&[rec]);
                sp.push(e.to_vec()[..d].iter().map(|&x| x as f64).collect());
                truth.push(qi); // first samples_per_caption block is caption-ordered
            }
            let (r, k_eff) = recall_at_k(&sp, &gen_head_emb, &truth, job.recall_k)?;
            report.recall = Some(r);
            report.recall_k = k_eff;
        }
    }
    Ok(report)
}

/// FID between two halves of the real test split: a sampling-noise floor.
pub fn real_vs_real_fid(cfg: &RunConfig) -> Result<f64> {
    let manifest = load_manifest(cfg)?;
    let n_classes = manifest.n_classes();
    let (_, _, classifier) = load_encoders(cfg, n_classes)?;
    let test = manifest.split_indices(Split::Test);
    if test.len() < 8 {
        return Err(Error::DegenerateBatch("test split too small".into()));
    }
    let mut feats: Vec<Vec<f64>> = Vec::new();
    for chunk in test.chunks(64) {
        let b = load_batch(&manifest, chunk)?;
        let (_, f) = classifier.extract(&b.images)?;
        feats.extend(f);
    }
    let (a, b) = feats.split_at(feats.len() / 2);
    Ok(fid(&gaussian_stats(a)?, &gaussian_stats(b)?)?)
}

/// Convenience: embeddings + labels of all real test images via the head.
pub fn test_gallery(
    cfg: &RunConfig,
    manifest: &Manifest,
    head: &ImageHead<f32>,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let test = manifest.split_indices(Split::Test);
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for chunk in test.chunks(64) {
        let b = load_batch(manifest, chunk)?;
        let emb = no_grad(|| head.forward(&b.images))?;
        let d = head.embed_dim;
        let v = emb.to_vec();
        for i in 0..chunk.len() {
            embs.push(v[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect());
        }
        labels.extend(b.class_ids);
    }
    let _ = cfg;
    Ok((embs, labels))
}

/// Class prior of the test split: the probability that a uniformly random
/// gallery item shares a random query's class, sum over classes of p_c^2.
/// A random ranking's expected AP sits at this level, so it is the floor a
/// semantics-carrying retrieval must clear.
pub fn class_prior(manifest: &Manifest) -> f64 {
    let test = manifest.split(Split::Test);
    let n_classes = manifest.n_classes().max(1);
    let mut counts = vec![0usize; n_classes];
    for r in &test {
        counts[r.class_id] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * p
        })
        .sum()
}

/// Build the deterministic first batch of an epoch, for probes and smoke
/// tests.
pub fn first_batch(cfg: &RunConfig, manifest: &Manifest) -> Result<crate::data::Batch> {
    let plan = epoch_batches(manifest, Split::Train, cfg.train.batch, cfg.train.seed, 0)?;
    load_batch(manifest, &plan[0])
}

/// Stable fingerprint for any parameter list (re-exported convenience).
pub fn weights_checksum<M: Module<f32>>(m: &M) -> u64 {
    params_checksum(&m.params())
}
