//! The six subcommands: dataset generation, training, prediction,
//! evaluation, cost analysis, and gradient verification.

use std::io::Write;
use std::path::{Path, PathBuf};

use svphw_core::data::{
    export_strip, generate_sequence, read_manifest, read_sequence, write_manifest, write_sequence, Sequence,
};
use svphw_core::error::{Error, Result};
use svphw_core::flops::count_model;
use svphw_core::metrics::{mse, psnr, ssim, MetricReport, MetricRow};
use svphw_core::model::{stack_batch, Model, RolloutMode};
use svphw_core::optim::Adam;
use svphw_core::params::ParameterStore;
use svphw_core::rng::{key_str, CounterRng};
use svphw_core::scalar::Scalar;
use svphw_core::tensor::Tensor;
use svphw_core::verify::run_full_suite;

use crate::config::RunConfig;

/// Shared command context resolved from flags.
pub struct Ctx {
    pub config: RunConfig,
    pub force: bool,
    pub threads: usize,
    pub fp64: bool,
}

impl Ctx {
    fn out_dir(&self) -> PathBuf {
        self.config.path_of("out_dir")
    }

    fn checkpoint_path(&self) -> PathBuf {
        let p = self.config.path_of("checkpoint");
        if p.is_absolute() {
            p
        } else {
            self.out_dir().join(p)
        }
    }
}

fn run_threaded<T: Send>(threads: usize, jobs: Vec<impl FnOnce() -> Result<T> + Send>) -> Result<Vec<T>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = jobs.iter().map(|_| None).collect();
    let indexed: Vec<(usize, _)> = jobs.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(indexed);
    let slot_refs = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                match job {
                    Some((i, f)) => {
                        let r = f();
                        slot_refs.lock().expect("slot lock")[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("job ran")).collect()
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let world = ctx.config.world_config()?;
    let dir = ctx.config.path_of("dataset_dir");
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !ctx.force {
        return Err(Error::InvalidArgument(format!(
            "dataset dir {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    let n_train = ctx.config.usize_of("n_train")?;
    let n_val = ctx.config.usize_of("n_val")?;
    let n_test = ctx.config.usize_of("n_test")?;
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be >= 1".into()));
    }
    std::fs::create_dir_all(&dir)?;
    ctx.config.echo_resolved(&dir)?;

    let mut entries: Vec<(String, String, u64)> = Vec::new();
    for (split_idx, (split, count)) in [("train", n_train), ("val", n_val), ("test", n_test)].iter().enumerate() {
        for i in 0..*count {
            let sequence_seed = ((split_idx as u64) << 32) | i as u64;
            entries.push((split.to_string(), format!("{split}_{i:04}.seq"), sequence_seed));
        }
    }
    let jobs: Vec<_> = entries
        .iter()
        .map(|(_, name, seq_seed)| {
            let world = world.clone();
            let path = dir.join(name);
            let seq_seed = *seq_seed;
            move || -> Result<()> {
                let seq = generate_sequence(&world, seq_seed)?;
                write_sequence(&seq, &path)
            }
        })
        .collect();
    run_threaded(ctx.threads, jobs)?;
    let manifest: Vec<(String, String)> = entries.into_iter().map(|(s, n, _)| (s, n)).collect();
    write_manifest(&dir, &manifest)?;
    println!("wrote {} sequences to {}", manifest.len(), dir.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn load_split(dir: &Path, split: &str) -> Result<Vec<Sequence>> {
    let entries = read_manifest(dir)?;
    let mut out = Vec::new();
    for (s, name) in entries {
        if s == split {
            out.push(read_sequence(&dir.join(name))?);
        }
    }
    Ok(out)
}

fn frames_for<S: Scalar>(seqs: &[Sequence], picks: &[(usize, usize)], need: usize) -> Result<Vec<Tensor<S>>> {
    (0..need)
        .map(|t| {
            let per: Vec<Tensor<S>> = picks.iter().map(|&(s, o)| seqs[s].frame(o + t).cast::<S>()).collect();
            stack_batch(&per)
        })
        .collect()
}

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    if ctx.fp64 {
        cmd_train_typed::<f64>(ctx)
    } else {
        cmd_train_typed::<f32>(ctx)
    }
}

fn cmd_train_typed<S: Scalar>(ctx: &Ctx) -> Result<()> {
    let model_cfg = ctx.config.model_config()?;
    let dataset = ctx.config.path_of("dataset_dir");
    let train_seqs = load_split(&dataset, "train")?;
    if train_seqs.is_empty() {
        return Err(Error::InvalidArgument(format!("no train split in {}", dataset.display())));
    }
    let need = model_cfg.cond_frames + model_cfg.pred_frames;
    for (i, s) in train_seqs.iter().enumerate() {
        if s.len() < need {
            return Err(Error::InvalidArgument(format!(
                "train sequence {i} has {} frames, training window needs {need}",
                s.len()
            )));
        }
    }
    let out = ctx.out_dir();
    ctx.config.echo_resolved(&out)?;
    let ckpt = ctx.checkpoint_path();
    let ckpt_every = ctx.config.usize_of("ckpt_every")?.max(1);
    let steps = model_cfg.train_steps;
    let seed = model_cfg.seed;
    let max_start = train_seqs.iter().map(|s| s.len()).min().expect("non-empty") - need;

    let mut model = Model::<S>::new(model_cfg.clone())?;
    let mut opt = Adam::new(model_cfg.learning_rate);
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("loss.log"))?);

    model.params.save(&ckpt)?;
    for step in 0..steps {
        let mut rng = CounterRng::keyed(&[seed, key_str("batch"), step as u64]);
        let picks: Vec<(usize, usize)> = (0..model_cfg.batch_size)
            .map(|_| (rng.below(train_seqs.len()), rng.below(max_start + 1)))
            .collect();
        let frames = frames_for::<S>(&train_seqs, &picks, need)?;
        let noise_seed = CounterRng::keyed(&[seed, key_str("train-noise"), step as u64]).next_u64();
        // a NaN loss aborts before the checkpoint is overwritten, so the
        // last scheduled save is what remains on disk
        let b = model.train_step(&frames, &mut opt, noise_seed)?;
        writeln!(
            log,
            "{step}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            b.recon_p, b.recon_fw, b.recon_bw, b.recon_fused, b.kl_p, b.kl_fw, b.kl_bw, b.total
        )?;
        if (step + 1) % ckpt_every == 0 {
            log.flush()?;
            model.params.save(&ckpt)?;
        }
    }
    log.flush()?;
    model.params.save(&ckpt)?;
    println!("trained {steps} steps; checkpoint at {}", ckpt.display());
    Ok(())
}

// ── predict ─────────────────────────────────────────────────────────

pub fn cmd_predict(ctx: &Ctx) -> Result<()> {
    if ctx.fp64 {
        cmd_predict_typed::<f64>(ctx)
    } else {
        cmd_predict_typed::<f32>(ctx)
    }
}

fn load_model<S: Scalar>(ctx: &Ctx) -> Result<Model<S>> {
    let model_cfg = ctx.config.model_config()?;
    let params = ParameterStore::<S>::load(&ctx.checkpoint_path())?;
    Model::from_parts(model_cfg, params)
}

fn to_chw<S: Scalar>(frame: &Tensor<S>) -> Result<Tensor<f32>> {
    // [1,C,H,W] -> [C,H,W]
    let (c, h, w) = (frame.dim(1), frame.dim(2), frame.dim(3));
    frame.cast::<f32>().reshaped(&[c, h, w])
}

fn cmd_predict_typed<S: Scalar>(ctx: &Ctx) -> Result<()> {
    let model = load_model::<S>(ctx)?;
    let cfg = &model.cfg;
    let horizon = ctx.config.usize_of("eval_pred_frames")?;
    let n_samples = ctx.config.usize_of("n_samples")?.max(1);
    let n_seqs = ctx.config.usize_of("n_predict_sequences")?.max(1);
    let test = load_split(&ctx.config.path_of("dataset_dir"), "test")?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test split to predict from".into()));
    }
    let out = ctx.out_dir();
    ctx.config.echo_resolved(&out)?;

    for (i, seq) in test.iter().take(n_seqs).enumerate() {
        if seq.len() < cfg.cond_frames {
            return Err(Error::InvalidArgument(format!(
                "test sequence {i} shorter than the conditioning window"
            )));
        }
        let cond: Vec<Tensor<S>> = (0..cfg.cond_frames)
            .map(|t| stack_batch(&[seq.frame(t).cast::<S>()]))
            .collect::<Result<Vec<_>>>()?;
        for sample in 0..n_samples {
            let (pred, _) = model.rollout(&cond, horizon, RolloutMode::InferPrior, cfg.seed + sample as u64)?;
            let mut tiles: Vec<Tensor<f32>> = Vec::with_capacity(cfg.cond_frames + horizon);
            for f in &cond {
                tiles.push(to_chw(f)?);
            }
            for f in &pred {
                tiles.push(to_chw(f)?);
            }
            export_strip(&tiles, &out.join(format!("predict_seq{i:02}_sample{sample:02}.pgm")))?;

            let (c, h, w) = (cfg.frame_channels, cfg.frame_h, cfg.frame_w);
            let mut data = Vec::with_capacity(tiles.len() * c * h * w);
            for t in &tiles {
                data.extend_from_slice(t.data());
            }
            let frames = Tensor::new(vec![tiles.len(), c, h, w], data)?;
            let out_seq = Sequence { frames, seed: cfg.seed + sample as u64, config_hash: seq.config_hash };
            write_sequence(&out_seq, &out.join(format!("predict_seq{i:02}_sample{sample:02}.seq")))?;
        }
    }
    println!("wrote predictions for {} sequences to {}", n_seqs.min(test.len()), out.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

pub fn cmd_eval(ctx: &Ctx) -> Result<()> {
    if ctx.fp64 {
        cmd_eval_typed::<f64>(ctx)
    } else {
        cmd_eval_typed::<f32>(ctx)
    }
}

fn cmd_eval_typed<S: Scalar>(ctx: &Ctx) -> Result<()> {
    let model = load_model::<S>(ctx)?;
    let cfg = model.cfg.clone();
    let horizon = ctx.config.usize_of("eval_pred_frames")?;
    let n_samples = ctx.config.usize_of("n_samples")?.max(1);
    let n_seqs = ctx.config.usize_of("n_eval_sequences")?.max(1);
    let test = load_split(&ctx.config.path_of("dataset_dir"), "test")?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test split to evaluate".into()));
    }
    let out = ctx.out_dir();
    ctx.config.echo_resolved(&out)?;

    let eval_seqs: Vec<&Sequence> = test.iter().take(n_seqs).collect();
    for (i, seq) in eval_seqs.iter().enumerate() {
        if seq.len() < cfg.cond_frames + horizon {
            return Err(Error::InvalidArgument(format!(
                "test sequence {i} has {} frames, evaluation needs {}",
                seq.len(),
                cfg.cond_frames + horizon
            )));
        }
    }

    let model_ref = &model;
    let cfg_ref = &cfg;
    let jobs: Vec<_> = eval_seqs
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let seq: Sequence = (*seq).clone();
            move || -> Result<Vec<MetricRow>> {
                let cond: Vec<Tensor<S>> = (0..cfg_ref.cond_frames)
                    .map(|t| stack_batch(&[seq.frame(t).cast::<S>()]))
                    .collect::<Result<Vec<_>>>()?;
                let mut rows = Vec::new();
                for sample in 0..n_samples {
                    let (pred, _) =
                        model_ref.rollout(&cond, horizon, RolloutMode::InferPrior, cfg_ref.seed + sample as u64)?;
                    for (t, p) in pred.iter().enumerate() {
                        let gt = seq.frame(cfg_ref.cond_frames + t);
                        let pf = to_chw(p)?;
                        rows.push(MetricRow {
                            sequence: i,
                            sample,
                            step: t,
                            psnr: psnr(&pf, &gt)?,
                            ssim: ssim(&pf, &gt)?,
                            mse: mse(&pf, &gt)?,
                        });
                    }
                }
                Ok(rows)
            }
        })
        .collect();
    let mut report = MetricReport::default();
    for rows in run_threaded(ctx.threads, jobs)? {
        for r in rows {
            report.push(r);
        }
    }

    std::fs::write(out.join("eval_rows.tsv"), report.to_tsv())?;
    let mut per_step = String::from("step\tpsnr\tssim\n");
    for (s, p, q) in report.per_step() {
        per_step.push_str(&format!("{s}\t{p}\t{q}\n"));
    }
    std::fs::write(out.join("eval_per_step.tsv"), per_step)?;
    std::fs::write(out.join("eval_summary.txt"), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

// ── flops ───────────────────────────────────────────────────────────

pub fn cmd_flops(ctx: &Ctx) -> Result<()> {
    let model_cfg = ctx.config.model_config()?;
    let report = count_model(&model_cfg)?;
    let out = ctx.out_dir();
    ctx.config.echo_resolved(&out)?;
    std::fs::write(out.join("flops_report.tsv"), report.to_tsv())?;
    std::fs::write(out.join("flops_summary.txt"), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Runs every verification suite. Returns whether everything passed.
pub fn cmd_gradcheck(ctx: &Ctx) -> Result<bool> {
    let seed = ctx.config.u64_of("seed")?;
    let out = ctx.out_dir();
    ctx.config.echo_resolved(&out)?;
    let (results, e2e) = run_full_suite(seed)?;
    let mut text = String::new();
    let mut all_ok = true;
    for r in &results {
        let ok = r.passed();
        all_ok &= ok;
        let line = format!(
            "[{}] {}: max relative error {:.3e} (tolerance {:.0e})",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance
        );
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    let small_ok = e2e.max_abs_error_small < 1e-5;
    all_ok &= small_ok;
    let line = format!(
        "[{}] end_to_end/near-zero-gradients: {} elements at |analytic| < 1e-3 agree within {:.3e} (absolute, tolerance 1e-5); {} informative elements checked",
        if small_ok { "PASS" } else { "FAIL" },
        e2e.absolute_checked,
        e2e.max_abs_error_small,
        e2e.relative_checked
    );
    println!("{line}");
    text.push_str(&line);
    text.push('\n');
    std::fs::write(out.join("gradcheck_report.txt"), text)?;
    Ok(all_ok)
}
