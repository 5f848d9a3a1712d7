//! Two-stage training orchestration.
//!
//! Stage 1 trains the cross-domain image translators and their patch
//! discriminators. Stage 2 freezes them, precomputes the synthesized
//! counterpart of every training slice, and trains the segmentation backbone
//! plus the alignment discriminators: per iteration the backbone updates
//! first (supervised terms, output consistency, and the consistency terms
//! through frozen discriminators), then the discriminators update on
//! detached features and attention maps. A source-only baseline trains the
//! backbone on labeled source slices alone.
//!
//! All randomness flows from `cfg.seed` through named sub-streams, so fixed
//! seeds give identical loss trajectories in single-threaded runs.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::Serialize;

use crate::checkpoint::{checkpoint_of, Checkpoint};
use crate::data::{collect_slices, CaseRecord, Modality, SliceBank};
use crate::domain::{LabelMask, LabelScheme, LossReport, Slice2D, Stage, TrainConfig};
use crate::error::{BiglError, Result};
use crate::gtl::{
    self, adversarial_from_logits, neg_mean_log_prob, output_consistency_node, require_frozen,
    AlignmentDiscriminator, AlignmentDomain, AlignmentLevel,
};
use crate::nn::optim::{Adam, SgdMomentum};
use crate::nn::params::ParamSet;
use crate::nn::{Scalar, Tape, Var};
use crate::segnet::{segmentation_loss, SegNet};
use crate::synthesis::{
    generate, generator_objective, Generator, ImageDiscriminator, SynDirection,
};

/// Polynomial learning-rate decay: `base * (1 - iter/max_iter)^power`.
/// Exactly `base` at iteration 0 and exactly 0 at `max_iter`.
pub fn poly_lr(iter: u64, max_iter: u64, base: f64, power: f64) -> Result<f64> {
    assert!(max_iter > 0, "poly_lr requires max_iter > 0");
    if iter > max_iter {
        return Err(BiglError::ScheduleExhausted { iter, max: max_iter });
    }
    if iter == max_iter {
        return Ok(0.0);
    }
    let frac = 1.0 - iter as f64 / max_iter as f64;
    Ok(base * frac.powf(power))
}

/// Labeled source slices and unlabeled target slices for training.
pub struct TrainData {
    pub source: SliceBank,
    pub target: SliceBank,
}

/// Build training banks from the training split: modality A with labels,
/// modality B without.
pub fn load_train_data(
    cases: &[CaseRecord],
    scheme: LabelScheme,
    image_size: (usize, usize),
) -> Result<TrainData> {
    Ok(TrainData {
        source: collect_slices(cases, Modality::A, true, scheme, image_size)?,
        target: collect_slices(cases, Modality::B, false, scheme, image_size)?,
    })
}

/// Translators and image discriminators of stage 1.
pub struct SynthesisNets {
    pub g_s2t: Generator<f32>,
    pub g_t2s: Generator<f32>,
    pub d_s: ImageDiscriminator<f32>,
    pub d_t: ImageDiscriminator<f32>,
}

impl SynthesisNets {
    pub fn init(cfg: &TrainConfig) -> Self {
        use crate::domain::Domain;
        SynthesisNets {
            g_s2t: Generator::init(
                SynDirection::SToT,
                cfg.gen_width,
                &mut crate::rng::stream(cfg.seed, "init-gen-s2t", 0),
            ),
            g_t2s: Generator::init(
                SynDirection::TToS,
                cfg.gen_width,
                &mut crate::rng::stream(cfg.seed, "init-gen-t2s", 0),
            ),
            d_s: ImageDiscriminator::init(
                Domain::Source,
                cfg.disc_width,
                &mut crate::rng::stream(cfg.seed, "init-disc-img-s", 0),
            ),
            d_t: ImageDiscriminator::init(
                Domain::Target,
                cfg.disc_width,
                &mut crate::rng::stream(cfg.seed, "init-disc-img-t", 0),
            ),
        }
    }

    /// Content digests in canonical net order (used for freeze checks).
    pub fn digests(&self) -> [String; 4] {
        [
            self.g_s2t.params.digest(),
            self.g_t2s.params.digest(),
            self.d_s.params.digest(),
            self.d_t.params.digest(),
        ]
    }
}

/// What one training invocation did.
pub struct StageOutcome {
    /// Reports of the iterations run by this call (empty when the stage was
    /// already complete).
    pub reports: Vec<LossReport>,
    /// Total iterations accumulated by the stage, including resumed ones.
    pub iterations_total: u64,
    /// Epoch the run started from (0 for a fresh run).
    pub resumed_from_epoch: u32,
    /// Checkpoint files written or confirmed by this call.
    pub checkpoint_paths: Vec<PathBuf>,
}

pub struct Stage1Run {
    pub nets: SynthesisNets,
    pub outcome: StageOutcome,
}

const STAGE1_NETS: [&str; 4] = ["gen_s2t", "gen_t2s", "disc_img_s", "disc_img_t"];

fn ckpt_path(dir: &Path, net: &str, epoch: u32) -> PathBuf {
    dir.join(format!("{net}_{epoch}.ckpt"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| BiglError::CheckpointWriteError(format!("{}: {e}", dir.display())))
}

/// Derive an independent 64-bit sub-seed from the root seed and a label.
fn subseed(root: u64, label: &str) -> u64 {
    use rand::Rng;
    crate::rng::stream(root, label, 0).gen()
}

/// Latest epoch `<= up_to` for which every named checkpoint exists.
fn find_resume_epoch(dir: &Path, names: &[&str], up_to: u32) -> Option<u32> {
    (0..=up_to)
        .rev()
        .find(|&e| names.iter().all(|n| ckpt_path(dir, n, e).is_file()))
}

fn check_hash(c: &Checkpoint, cfg_hash: &str, what: &str) -> Result<()> {
    if c.config_hash != cfg_hash {
        return Err(BiglError::IngestError(format!(
            "{what}: checkpoint was produced by a different configuration \
             (hash {} vs {})",
            c.config_hash, cfg_hash
        )));
    }
    Ok(())
}

fn save_adam_net(
    dir: &Path,
    name: &str,
    kind: &str,
    tag: &str,
    iteration: u64,
    epoch: u32,
    cfg_hash: &str,
    params: &ParamSet<f32>,
    opt: &Adam<f32>,
) -> Result<PathBuf> {
    let mut c = checkpoint_of(kind, tag, iteration, epoch as u64, cfg_hash, params);
    let (t, m, v) = opt.state();
    c.push_opt_buffers("m", m);
    c.push_opt_buffers("v", v);
    c.push_scalar("opt.t", t as f64);
    let path = ckpt_path(dir, name, epoch);
    c.save(&path)?;
    Ok(path)
}

fn load_adam_net(path: &Path, params: &mut ParamSet<f32>, opt: &mut Adam<f32>) -> Result<Checkpoint> {
    let c = Checkpoint::load(path)?;
    c.restore_params(params, "")?;
    let m: Vec<ArrayD<f32>> = c.opt_buffers("m")?;
    let v: Vec<ArrayD<f32>> = c.opt_buffers("v")?;
    if !m.is_empty() {
        let t = c.scalar("opt.t").unwrap_or(0.0) as u64;
        opt.set_state(t, m, v);
    }
    Ok(c)
}

fn save_sgd_net(
    dir: &Path,
    name: &str,
    kind: &str,
    iteration: u64,
    epoch: u32,
    cfg_hash: &str,
    params: &ParamSet<f32>,
    opt: &SgdMomentum<f32>,
) -> Result<PathBuf> {
    let mut c = checkpoint_of(kind, "main", iteration, epoch as u64, cfg_hash, params);
    c.push_opt_buffers("velocity", opt.velocity());
    let path = ckpt_path(dir, name, epoch);
    c.save(&path)?;
    Ok(path)
}

fn load_sgd_net(
    path: &Path,
    params: &mut ParamSet<f32>,
    opt: &mut SgdMomentum<f32>,
) -> Result<Checkpoint> {
    let c = Checkpoint::load(path)?;
    c.restore_params(params, "")?;
    let v: Vec<ArrayD<f32>> = c.opt_buffers("velocity")?;
    if !v.is_empty() {
        opt.set_velocity(v);
    }
    Ok(c)
}

/// Append-only structured training log: one JSON object per iteration.
struct TrainLog {
    writer: std::io::BufWriter<std::fs::File>,
}

#[derive(Serialize)]
struct IterRecord<'a> {
    lr: f64,
    #[serde(flatten)]
    report: &'a LossReport,
}

impl TrainLog {
    fn open(dir: &Path) -> Result<TrainLog> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("train_log.jsonl"))
            .map_err(|e| BiglError::CheckpointWriteError(format!("train log: {e}")))?;
        Ok(TrainLog { writer: std::io::BufWriter::new(file) })
    }

    fn record(&mut self, lr: f64, report: &LossReport) -> Result<()> {
        let line = serde_json::to_string(&IterRecord { lr, report })
            .expect("loss report serializes");
        writeln!(self.writer, "{line}")
            .map_err(|e| BiglError::CheckpointWriteError(format!("train log: {e}")))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| BiglError::CheckpointWriteError(format!("train log: {e}")))
    }
}

/// Error out before an optimizer step would propagate a non-finite value.
fn check_report_finite(report: &LossReport) -> Result<()> {
    for (name, v) in report.components() {
        if !v.is_finite() {
            return Err(BiglError::NonFiniteLoss { iter: report.iteration, component: name.into() });
        }
    }
    if !report.total.is_finite() {
        return Err(BiglError::NonFiniteLoss { iter: report.iteration, component: "total".into() });
    }
    Ok(())
}

/// Stack slice images (z-scored view) into an [N, 1, H, W] batch.
fn batch_pixels(slices: &[&Slice2D]) -> ArrayD<f32> {
    let (h, w) = (slices[0].pixels.nrows(), slices[0].pixels.ncols());
    ArrayD::from_shape_fn(IxDyn(&[slices.len(), 1, h, w]), |ix| {
        slices[ix[0]].pixels[[ix[2], ix[3]]]
    })
}

/// Stack slice images (unit view, affinely mapped to [-1, 1]) into an
/// [N, 1, H, W] batch for the synthesis networks.
fn batch_affine(slices: &[&Slice2D]) -> ArrayD<f32> {
    let (h, w) = (slices[0].unit.nrows(), slices[0].unit.ncols());
    ArrayD::from_shape_fn(IxDyn(&[slices.len(), 1, h, w]), |ix| {
        2.0 * slices[ix[0]].unit[[ix[2], ix[3]]] - 1.0
    })
}

fn batch_labels(masks: &[&LabelMask]) -> Array3<u8> {
    let (h, w) = masks[0].classes.dim();
    Array3::from_shape_fn((masks.len(), h, w), |(n, i, j)| masks[n].classes[[i, j]])
}

fn gather<'a>(bank: &'a SliceBank, order: &[usize], from: usize, n: usize) -> Vec<&'a Slice2D> {
    order[from..from + n].iter().map(|&i| &bank.slices[i].0).collect()
}

struct SynOptimizers {
    g_s2t: Adam<f32>,
    g_t2s: Adam<f32>,
    d_s: Adam<f32>,
    d_t: Adam<f32>,
}

impl SynOptimizers {
    fn new() -> Self {
        // translation-GAN convention: low first-moment decay
        let mk = || Adam::new(0.5, 0.999, 1e-8);
        SynOptimizers { g_s2t: mk(), g_t2s: mk(), d_s: mk(), d_t: mk() }
    }
}

/// Train the synthesis module. Resumes from the latest complete checkpoint
/// set in `out/stage1` when one exists; a completed stage is a no-op.
pub fn train_stage1(cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<Stage1Run> {
    let dir = out.join("stage1");
    ensure_dir(&dir)?;
    let cfg_hash = cfg.content_hash();
    let mut nets = SynthesisNets::init(cfg);
    let mut opts = SynOptimizers::new();

    let mut start_epoch = 0u32;
    if let Some(e) = find_resume_epoch(&dir, &STAGE1_NETS, cfg.epochs) {
        let loads: [(&str, &mut ParamSet<f32>, &mut Adam<f32>); 4] = [
            ("gen_s2t", &mut nets.g_s2t.params, &mut opts.g_s2t),
            ("gen_t2s", &mut nets.g_t2s.params, &mut opts.g_t2s),
            ("disc_img_s", &mut nets.d_s.params, &mut opts.d_s),
            ("disc_img_t", &mut nets.d_t.params, &mut opts.d_t),
        ];
        for (name, params, opt) in loads {
            let c = load_adam_net(&ckpt_path(&dir, name, e), params, opt)?;
            check_hash(&c, &cfg_hash, &format!("stage-1 resume of {name}"))?;
        }
        start_epoch = e;
    }

    let bs = cfg.batch_size;
    let bpe = (data.source.len().min(data.target.len()) / bs) as u64;
    if cfg.epochs > 0 && bpe == 0 {
        return Err(BiglError::EmptyEpoch);
    }
    let seed_s = subseed(cfg.seed, "order-source");
    let seed_t = subseed(cfg.seed, "order-target");

    let mut log = TrainLog::open(&dir)?;
    let mut reports = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let os = data.source.epoch_order(seed_s, epoch as u64);
        let ot = data.target.epoch_order(seed_t, epoch as u64);
        for b in 0..bpe as usize {
            let iteration = epoch as u64 * bpe + b as u64;
            let xs = gather(&data.source, &os, b * bs, bs);
            let xt = gather(&data.target, &ot, b * bs, bs);
            let report = stage1_step(cfg, &mut nets, &mut opts, &xs, &xt, iteration)?;
            log.record(cfg.syn_lr, &report)?;
            reports.push(report);
        }
        log.flush()?;
        let done = epoch + 1;
        if done % cfg.snapshot_every == 0 && done != cfg.epochs {
            save_stage1(&dir, &nets, &opts, done as u64 * bpe, done, &cfg_hash)?;
        }
    }
    let iterations_total = cfg.epochs as u64 * bpe;
    let checkpoint_paths =
        save_stage1(&dir, &nets, &opts, iterations_total, cfg.epochs, &cfg_hash)?;
    Ok(Stage1Run {
        nets,
        outcome: StageOutcome {
            reports,
            iterations_total,
            resumed_from_epoch: start_epoch,
            checkpoint_paths,
        },
    })
}

fn save_stage1(
    dir: &Path,
    nets: &SynthesisNets,
    opts: &SynOptimizers,
    iteration: u64,
    epoch: u32,
    cfg_hash: &str,
) -> Result<Vec<PathBuf>> {
    Ok(vec![
        save_adam_net(dir, "gen_s2t", "generator", "s_to_t", iteration, epoch, cfg_hash, &nets.g_s2t.params, &opts.g_s2t)?,
        save_adam_net(dir, "gen_t2s", "generator", "t_to_s", iteration, epoch, cfg_hash, &nets.g_t2s.params, &opts.g_t2s)?,
        save_adam_net(dir, "disc_img_s", "image_disc", "s", iteration, epoch, cfg_hash, &nets.d_s.params, &opts.d_s)?,
        save_adam_net(dir, "disc_img_t", "image_disc", "t", iteration, epoch, cfg_hash, &nets.d_t.params, &opts.d_t)?,
    ])
}

/// One stage-1 iteration: generator update (both directions jointly), then
/// discriminator update on the detached pre-update synthesized batches.
fn stage1_step(
    cfg: &TrainConfig,
    nets: &mut SynthesisNets,
    opts: &mut SynOptimizers,
    xs: &[&Slice2D],
    xt: &[&Slice2D],
    iteration: u64,
) -> Result<LossReport> {
    let lr = cfg.syn_lr as f32;

    // generator pass
    let mut tape = Tape::<f32>::new();
    let bg_s2t = nets.g_s2t.bind(&mut tape, true);
    let bg_t2s = nets.g_t2s.bind(&mut tape, true);
    let bd_s = nets.d_s.bind(&mut tape, false);
    let bd_t = nets.d_t.bind(&mut tape, false);
    let xs_in = tape.constant(batch_affine(xs));
    let xt_in = tape.constant(batch_affine(xt));
    let syn_t = nets.g_s2t.forward(&mut tape, &bg_s2t, xs_in);
    let syn_s = nets.g_t2s.forward(&mut tape, &bg_t2s, xt_in);
    let logits_on_syn_t = nets.d_t.forward(&mut tape, &bd_t, syn_t);
    let logits_on_syn_s = nets.d_s.forward(&mut tape, &bd_s, syn_s);
    let loss_s2t = if cfg.cycle_reconstruction {
        let back = nets.g_t2s.forward(&mut tape, &bg_t2s, syn_t);
        generator_objective(&mut tape, logits_on_syn_t, xs_in, back, cfg.lambda_rec)
    } else {
        generator_objective(&mut tape, logits_on_syn_t, xt_in, syn_t, cfg.lambda_rec)
    };
    let loss_t2s = if cfg.cycle_reconstruction {
        let back = nets.g_s2t.forward(&mut tape, &bg_s2t, syn_s);
        generator_objective(&mut tape, logits_on_syn_s, xt_in, back, cfg.lambda_rec)
    } else {
        generator_objective(&mut tape, logits_on_syn_s, xs_in, syn_s, cfg.lambda_rec)
    };
    let gen_node = tape.add(loss_s2t, loss_t2s);
    let gen_value = tape.scalar(gen_node).to_f64();
    let syn_t_val = tape.value(syn_t).clone();
    let syn_s_val = tape.value(syn_s).clone();
    if !gen_value.is_finite() {
        return Err(BiglError::NonFiniteLoss { iter: iteration, component: "gen_syn".into() });
    }
    let grads = tape.backward(gen_node);
    let g = nets.g_s2t.params.collect_grads(&bg_s2t, &grads);
    opts.g_s2t.step(&mut nets.g_s2t.params, &g, lr);
    let g = nets.g_t2s.params.collect_grads(&bg_t2s, &grads);
    opts.g_t2s.step(&mut nets.g_t2s.params, &g, lr);
    drop(tape);

    // discriminator pass on detached synthesized batches
    let mut tape = Tape::<f32>::new();
    let bd_s = nets.d_s.bind(&mut tape, true);
    let bd_t = nets.d_t.bind(&mut tape, true);
    let real_s = tape.constant(batch_affine(xs));
    let real_t = tape.constant(batch_affine(xt));
    let fake_s = tape.constant(syn_s_val);
    let fake_t = tape.constant(syn_t_val);
    let rl_t = nets.d_t.forward(&mut tape, &bd_t, real_t);
    let fl_t = nets.d_t.forward(&mut tape, &bd_t, fake_t);
    let rl_s = nets.d_s.forward(&mut tape, &bd_s, real_s);
    let fl_s = nets.d_s.forward(&mut tape, &bd_s, fake_s);
    let d_t_loss = crate::synthesis::discriminator_objective(&mut tape, rl_t, fl_t);
    let d_s_loss = crate::synthesis::discriminator_objective(&mut tape, rl_s, fl_s);
    let disc_node = tape.add(d_t_loss, d_s_loss);
    let disc_value = tape.scalar(disc_node).to_f64();
    if !disc_value.is_finite() {
        return Err(BiglError::NonFiniteLoss { iter: iteration, component: "disc_syn".into() });
    }
    let grads = tape.backward(disc_node);
    let g = nets.d_s.params.collect_grads(&bd_s, &grads);
    opts.d_s.step(&mut nets.d_s.params, &g, lr);
    let g = nets.d_t.params.collect_grads(&bd_t, &grads);
    opts.d_t.step(&mut nets.d_t.params, &g, lr);

    let mut report = LossReport {
        iteration,
        gen_syn: Some(gen_value),
        disc_syn: Some(disc_value),
        ..LossReport::default()
    };
    report.total = gtl::total_loss(&report, cfg, Stage::One)?;
    check_report_finite(&report)?;
    Ok(report)
}

/// Load the latest complete stage-1 checkpoint set from a directory.
/// Configuration hashes are not compared: the consuming stage legitimately
/// runs under a different configuration (epoch counts differ); parameter
/// shapes still must match the widths in `cfg`.
pub fn load_synthesis(dir: &Path, cfg: &TrainConfig) -> Result<SynthesisNets> {
    let mut best: Option<u32> = None;
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir).map_err(BiglError::Io)? {
            let name = entry.map_err(BiglError::Io)?.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix("gen_s2t_").and_then(|r| r.strip_suffix(".ckpt"))
            {
                if let Ok(e) = rest.parse::<u32>() {
                    if STAGE1_NETS.iter().all(|n| ckpt_path(dir, n, e).is_file())
                        && best.map_or(true, |b| e > b)
                    {
                        best = Some(e);
                    }
                }
            }
        }
    }
    let Some(epoch) = best else {
        return Err(BiglError::IngestError(format!(
            "no complete stage-1 checkpoint set found in {}",
            dir.display()
        )));
    };
    let mut nets = SynthesisNets::init(cfg);
    for (name, params) in [
        ("gen_s2t", &mut nets.g_s2t.params),
        ("gen_t2s", &mut nets.g_t2s.params),
        ("disc_img_s", &mut nets.d_s.params),
        ("disc_img_t", &mut nets.d_t.params),
    ] {
        let c = Checkpoint::load(&ckpt_path(dir, name, epoch))?;
        c.restore_params(params, "")?;
    }
    Ok(nets)
}

/// Segmentation backbone and the alignment discriminators of stage 2, with
/// disabled alignment levels left uninstantiated.
pub struct Stage2Nets {
    pub segnet: SegNet<f32>,
    pub disc_feat: Option<(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>)>,
    pub disc_pos: Option<(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>)>,
    pub disc_cha: Option<(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>)>,
}

impl Stage2Nets {
    pub fn init(cfg: &TrainConfig) -> Self {
        let segnet = SegNet::init(
            cfg.num_classes,
            cfg.base_width,
            cfg.image_size,
            &mut crate::rng::stream(cfg.seed, "init-segnet", 0),
        );
        let pair = |level: AlignmentLevel, in_ch: usize, label: &str| {
            (
                AlignmentDiscriminator::init(
                    level,
                    AlignmentDomain::Source,
                    in_ch,
                    cfg.disc_width,
                    &mut crate::rng::stream(cfg.seed, &format!("init-disc-{label}-s"), 0),
                ),
                AlignmentDiscriminator::init(
                    level,
                    AlignmentDomain::Target,
                    in_ch,
                    cfg.disc_width,
                    &mut crate::rng::stream(cfg.seed, &format!("init-disc-{label}-t"), 0),
                ),
            )
        };
        let feat_ch = segnet.bottleneck_channels();
        Stage2Nets {
            disc_feat: cfg
                .use_feature_alignment
                .then(|| pair(AlignmentLevel::Feature, feat_ch, "feat")),
            disc_pos: cfg
                .use_attention_alignment
                .then(|| pair(AlignmentLevel::AttPosition, 1, "att-pos")),
            disc_cha: cfg
                .use_attention_alignment
                .then(|| pair(AlignmentLevel::AttChannel, 1, "att-cha")),
            segnet,
        }
    }

    /// Checkpoint base names for the instantiated networks.
    fn net_names(cfg: &TrainConfig) -> Vec<&'static str> {
        let mut names = vec!["segnet"];
        if cfg.use_feature_alignment {
            names.extend(["disc_feat_s", "disc_feat_t"]);
        }
        if cfg.use_attention_alignment {
            names.extend(["disc_att_pos_s", "disc_att_pos_t", "disc_att_cha_s", "disc_att_cha_t"]);
        }
        names
    }
}

struct Stage2Opts {
    backbone: SgdMomentum<f32>,
    feat: Option<(Adam<f32>, Adam<f32>)>,
    pos: Option<(Adam<f32>, Adam<f32>)>,
    cha: Option<(Adam<f32>, Adam<f32>)>,
}

impl Stage2Opts {
    fn new(cfg: &TrainConfig) -> Self {
        let mk = || (Adam::new(0.9, 0.999, 1e-8), Adam::new(0.9, 0.999, 1e-8));
        Stage2Opts {
            backbone: SgdMomentum::new(cfg.momentum),
            feat: cfg.use_feature_alignment.then(mk),
            pos: cfg.use_attention_alignment.then(mk),
            cha: cfg.use_attention_alignment.then(mk),
        }
    }
}

pub struct Stage2Run {
    pub nets: Stage2Nets,
    pub outcome: StageOutcome,
}

/// Error unless the frozen synthesis parameters still hash to their
/// stage-2-entry digests.
pub fn verify_frozen(before: &[String; 4], nets: &SynthesisNets, context: &str) -> Result<()> {
    if nets.digests() != *before {
        return Err(BiglError::FrozenContractViolation(format!(
            "synthesis parameters changed during {context}"
        )));
    }
    Ok(())
}

/// Stacked per-stream values detached from the backbone tape for the
/// discriminator updates.
struct DetachedStreams {
    feat: Option<[ArrayD<f32>; 4]>,
    pos: Option<[ArrayD<f32>; 4]>,
    cha: Option<[ArrayD<f32>; 4]>,
}

/// Train the segmentation backbone and alignment discriminators with the
/// synthesis networks frozen. Resumes like stage 1; the frozen parameters
/// are digest-checked every epoch.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &TrainData,
    syn: &SynthesisNets,
    out: &Path,
) -> Result<Stage2Run> {
    let dir = out.join("stage2");
    ensure_dir(&dir)?;
    let cfg_hash = cfg.content_hash();
    let frozen_digests = syn.digests();

    // synthesis is frozen, so every synthesized counterpart is precomputed
    let src_syn: Vec<Slice2D> = data
        .source
        .slices
        .iter()
        .map(|(s, _)| generate(&syn.g_s2t, s))
        .collect::<Result<_>>()?;
    let tgt_syn: Vec<Slice2D> = data
        .target
        .slices
        .iter()
        .map(|(s, _)| generate(&syn.g_t2s, s))
        .collect::<Result<_>>()?;

    let mut nets = Stage2Nets::init(cfg);
    let mut opts = Stage2Opts::new(cfg);
    let names = Stage2Nets::net_names(cfg);

    let mut start_epoch = 0u32;
    if let Some(e) = find_resume_epoch(&dir, &names, cfg.epochs) {
        let c = load_sgd_net(
            &ckpt_path(&dir, "segnet", e),
            &mut nets.segnet.params,
            &mut opts.backbone,
        )?;
        check_hash(&c, &cfg_hash, "stage-2 resume of segnet")?;
        let load_pair = |label: &str,
                             pair: &mut Option<(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>)>,
                             po: &mut Option<(Adam<f32>, Adam<f32>)>|
         -> Result<()> {
            if let (Some((ds, dt)), Some((os, ot))) = (pair.as_mut(), po.as_mut()) {
                let c = load_adam_net(&ckpt_path(&dir, &format!("{label}_s"), e), &mut ds.params, os)?;
                check_hash(&c, &cfg_hash, &format!("stage-2 resume of {label}_s"))?;
                let c = load_adam_net(&ckpt_path(&dir, &format!("{label}_t"), e), &mut dt.params, ot)?;
                check_hash(&c, &cfg_hash, &format!("stage-2 resume of {label}_t"))?;
            }
            Ok(())
        };
        load_pair("disc_feat", &mut nets.disc_feat, &mut opts.feat)?;
        load_pair("disc_att_pos", &mut nets.disc_pos, &mut opts.pos)?;
        load_pair("disc_att_cha", &mut nets.disc_cha, &mut opts.cha)?;
        start_epoch = e;
    }

    let bs = cfg.batch_size;
    let bpe = (data.source.len().min(data.target.len()) / bs) as u64;
    if cfg.epochs > 0 && bpe == 0 {
        return Err(BiglError::EmptyEpoch);
    }
    let max_iter = cfg.epochs as u64 * bpe;
    let seed_s = subseed(cfg.seed, "order-source");
    let seed_t = subseed(cfg.seed, "order-target");

    let mut log = TrainLog::open(&dir)?;
    let mut reports = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let os = data.source.epoch_order(seed_s, epoch as u64);
        let ot = data.target.epoch_order(seed_t, epoch as u64);
        for b in 0..bpe as usize {
            let iteration = epoch as u64 * bpe + b as u64;
            let lr = poly_lr(iteration, max_iter, cfg.base_lr, cfg.lr_power)?;
            let xs = gather(&data.source, &os, b * bs, bs);
            let ys: Vec<&LabelMask> = os[b * bs..(b + 1) * bs]
                .iter()
                .map(|&i| {
                    data.source.slices[i].1.as_ref().ok_or_else(|| {
                        BiglError::IngestError("stage 2 requires a labeled source bank".into())
                    })
                })
                .collect::<Result<_>>()?;
            let x_s2t: Vec<&Slice2D> = os[b * bs..(b + 1) * bs].iter().map(|&i| &src_syn[i]).collect();
            let xt = gather(&data.target, &ot, b * bs, bs);
            let x_t2s: Vec<&Slice2D> = ot[b * bs..(b + 1) * bs].iter().map(|&i| &tgt_syn[i]).collect();
            let report = stage2_step(
                cfg, &mut nets, &mut opts, &xs, &ys, &x_s2t, &xt, &x_t2s, iteration, lr,
            )?;
            log.record(lr, &report)?;
            reports.push(report);
        }
        log.flush()?;
        verify_frozen(&frozen_digests, syn, format!("stage-2 epoch {epoch}").as_str())?;
        let done = epoch + 1;
        if done % cfg.snapshot_every == 0 && done != cfg.epochs {
            save_stage2(&dir, cfg, &nets, &opts, done as u64 * bpe, done, &cfg_hash)?;
        }
    }
    let iterations_total = max_iter;
    let checkpoint_paths =
        save_stage2(&dir, cfg, &nets, &opts, iterations_total, cfg.epochs, &cfg_hash)?;
    Ok(Stage2Run {
        nets,
        outcome: StageOutcome {
            reports,
            iterations_total,
            resumed_from_epoch: start_epoch,
            checkpoint_paths,
        },
    })
}

fn save_stage2(
    dir: &Path,
    _cfg: &TrainConfig,
    nets: &Stage2Nets,
    opts: &Stage2Opts,
    iteration: u64,
    epoch: u32,
    cfg_hash: &str,
) -> Result<Vec<PathBuf>> {
    let mut paths = vec![save_sgd_net(
        dir,
        "segnet",
        "segnet",
        iteration,
        epoch,
        cfg_hash,
        &nets.segnet.params,
        &opts.backbone,
    )?];
    let mut save_pair = |label: &str,
                         pair: &Option<(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>)>,
                         po: &Option<(Adam<f32>, Adam<f32>)>|
     -> Result<()> {
        if let (Some((ds, dt)), Some((os, ot))) = (pair.as_ref(), po.as_ref()) {
            paths.push(save_adam_net(
                dir, &format!("{label}_s"), "disc", &format!("{}_{}", ds.level.tag(), ds.domain.tag()),
                iteration, epoch, cfg_hash, &ds.params, os,
            )?);
            paths.push(save_adam_net(
                dir, &format!("{label}_t"), "disc", &format!("{}_{}", dt.level.tag(), dt.domain.tag()),
                iteration, epoch, cfg_hash, &dt.params, ot,
            )?);
        }
        Ok(())
    };
    save_pair("disc_feat", &nets.disc_feat, &opts.feat)?;
    save_pair("disc_att_pos", &nets.disc_pos, &opts.pos)?;
    save_pair("disc_att_cha", &nets.disc_cha, &opts.cha)?;
    Ok(paths)
}

/// One stage-2 iteration: backbone step against previous-iteration
/// discriminators, then discriminator steps on detached stream values.
#[allow(clippy::too_many_arguments)]
fn stage2_step(
    cfg: &TrainConfig,
    nets: &mut Stage2Nets,
    opts: &mut Stage2Opts,
    xs: &[&Slice2D],
    ys: &[&LabelMask],
    x_s2t: &[&Slice2D],
    xt: &[&Slice2D],
    x_t2s: &[&Slice2D],
    iteration: u64,
    lr: f64,
) -> Result<LossReport> {
    let mut report = LossReport { iteration, ..LossReport::default() };

    // ---- backbone update --------------------------------------------------
    let mut tape = Tape::<f32>::new();
    let sb = nets.segnet.bind(&mut tape, true);
    let fwd = |tape: &mut Tape<f32>, batch: &[&Slice2D]| {
        let x = tape.constant(batch_pixels(batch));
        nets.segnet.forward(tape, &sb, x, true)
    };
    let f_s = fwd(&mut tape, xs);
    let f_s2t = fwd(&mut tape, x_s2t);
    let f_t = fwd(&mut tape, xt);
    let f_t2s = fwd(&mut tape, x_t2s);

    let labels = batch_labels(ys);
    let seg_s = segmentation_loss(&mut tape, f_s.logits, &labels)?;
    let seg_syn = segmentation_loss(&mut tape, f_s2t.logits, &labels)?;
    report.seg_s = Some(tape.scalar(seg_s) as f64);
    report.seg_syn_s = Some(tape.scalar(seg_syn) as f64);
    let mut objective = tape.add(seg_s, seg_syn);

    if cfg.use_output_consistency {
        let p_t = tape.softmax(f_t.logits, 1);
        let p_t2s = tape.softmax(f_t2s.logits, 1);
        let out_node = output_consistency_node(&mut tape, p_t, p_t2s)?;
        report.output_consis = Some(tape.scalar(out_node) as f64);
        let w = tape.scale(out_node, cfg.lambda_out);
        objective = tape.add(objective, w);
    }

    if let Some((ds, dt)) = nets.disc_feat.as_ref() {
        let bs_ = ds.bind(&mut tape, false);
        let bt_ = dt.bind(&mut tape, false);
        require_frozen(&tape, &bs_, "feature consistency")?;
        require_frozen(&tape, &bt_, "feature consistency")?;
        let l_cross = ds.forward(&mut tape, &bs_, f_t2s.feat)?;
        let l_own = dt.forward(&mut tape, &bt_, f_t.feat)?;
        let a = neg_mean_log_prob(&mut tape, l_cross);
        let b = neg_mean_log_prob(&mut tape, l_own);
        let node = tape.add(a, b);
        report.feat_consis = Some(tape.scalar(node) as f64);
        let w = tape.scale(node, cfg.lambda_feat);
        objective = tape.add(objective, w);
    }

    // attention maps as single-channel images
    let lift = |tape: &mut Tape<f32>, v: Var| {
        let shape = tape.value(v).shape().to_vec();
        tape.reshape(v, &[shape[0], 1, shape[1], shape[2]])
    };
    let att = |f: &crate::segnet::SegForward| f.attention.expect("attention enabled");
    if nets.disc_pos.is_some() || nets.disc_cha.is_some() {
        let (pos_t, cha_t) = att(&f_t);
        let (pos_t2s, cha_t2s) = att(&f_t2s);
        let consis = |tape: &mut Tape<f32>,
                          pair: &(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>),
                          cross: Var,
                          own: Var|
         -> Result<Var> {
            let (ds, dt) = pair;
            let bs_ = ds.bind(tape, false);
            let bt_ = dt.bind(tape, false);
            require_frozen(tape, &bs_, "attention consistency")?;
            require_frozen(tape, &bt_, "attention consistency")?;
            let l_cross = ds.forward(tape, &bs_, cross)?;
            let l_own = dt.forward(tape, &bt_, own)?;
            let a = neg_mean_log_prob(tape, l_cross);
            let b = neg_mean_log_prob(tape, l_own);
            Ok(tape.add(a, b))
        };
        if let Some(pair) = nets.disc_pos.as_ref() {
            let cross = lift(&mut tape, pos_t2s);
            let own = lift(&mut tape, pos_t);
            let node = consis(&mut tape, pair, cross, own)?;
            report.att_consis_pos = Some(tape.scalar(node) as f64);
            let w = tape.scale(node, cfg.lambda_att_pos);
            objective = tape.add(objective, w);
        }
        if let Some(pair) = nets.disc_cha.as_ref() {
            let cross = lift(&mut tape, cha_t2s);
            let own = lift(&mut tape, cha_t);
            let node = consis(&mut tape, pair, cross, own)?;
            report.att_consis_cha = Some(tape.scalar(node) as f64);
            let w = tape.scale(node, cfg.lambda_att_cha);
            objective = tape.add(objective, w);
        }
    }

    let backbone_value = tape.scalar(objective) as f64;
    if !backbone_value.is_finite() {
        return Err(BiglError::NonFiniteLoss { iter: iteration, component: "backbone".into() });
    }

    // detach stream values needed by the discriminator updates
    let streams = [&f_s, &f_s2t, &f_t, &f_t2s];
    let detached = DetachedStreams {
        feat: nets
            .disc_feat
            .as_ref()
            .map(|_| streams.map(|f| tape.value(f.feat).clone())),
        pos: nets
            .disc_pos
            .as_ref()
            .map(|_| streams.map(|f| tape.value(att(f).0).clone().insert_axis(Axis(1)))),
        cha: nets
            .disc_cha
            .as_ref()
            .map(|_| streams.map(|f| tape.value(att(f).1).clone().insert_axis(Axis(1)))),
    };

    let grads = tape.backward(objective);
    let g = nets.segnet.params.collect_grads(&sb, &grads);
    opts.backbone.step(&mut nets.segnet.params, &g, lr as f32);
    drop(tape);

    // ---- discriminator updates -------------------------------------------
    let disc_lr = cfg.disc_lr as f32;
    let update_level = |pair: &mut Option<(AlignmentDiscriminator<f32>, AlignmentDiscriminator<f32>)>,
                            po: &mut Option<(Adam<f32>, Adam<f32>)>,
                            streams: &Option<[ArrayD<f32>; 4]>,
                            name: &str|
     -> Result<Option<(f64, f64)>> {
        let (Some((ds, dt)), Some((os, ot)), Some([v_s, v_s2t, v_t, v_t2s])) =
            (pair.as_mut(), po.as_mut(), streams.as_ref())
        else {
            return Ok(None);
        };
        let mut tape = Tape::<f32>::new();
        let bs_ = ds.bind(&mut tape, true);
        let bt_ = dt.bind(&mut tape, true);
        let own_s = tape.constant(v_s.clone());
        let cross_s = tape.constant(v_t2s.clone());
        let own_t = tape.constant(v_s2t.clone());
        let cross_t = tape.constant(v_t.clone());
        let lo_s = ds.forward(&mut tape, &bs_, own_s)?;
        let lc_s = ds.forward(&mut tape, &bs_, cross_s)?;
        let lo_t = dt.forward(&mut tape, &bt_, own_t)?;
        let lc_t = dt.forward(&mut tape, &bt_, cross_t)?;
        let adv_s = adversarial_from_logits(&mut tape, lo_s, lc_s);
        let adv_t = adversarial_from_logits(&mut tape, lo_t, lc_t);
        let vs = tape.scalar(adv_s) as f64;
        let vt = tape.scalar(adv_t) as f64;
        if !vs.is_finite() || !vt.is_finite() {
            return Err(BiglError::NonFiniteLoss { iter: iteration, component: name.into() });
        }
        let sum = tape.add(adv_s, adv_t);
        let grads = tape.backward(sum);
        let g = ds.params.collect_grads(&bs_, &grads);
        os.step(&mut ds.params, &g, disc_lr);
        let g = dt.params.collect_grads(&bt_, &grads);
        ot.step(&mut dt.params, &g, disc_lr);
        Ok(Some((vs, vt)))
    };
    if let Some((s, t)) = update_level(&mut nets.disc_feat, &mut opts.feat, &detached.feat, "adv_feat")? {
        report.adv_feat_s = Some(s);
        report.adv_feat_t = Some(t);
    }
    let att_adv = [
        update_level(&mut nets.disc_pos, &mut opts.pos, &detached.pos, "adv_att_pos")?,
        update_level(&mut nets.disc_cha, &mut opts.cha, &detached.cha, "adv_att_cha")?,
    ];
    if let [Some((ps, pt)), Some((cs, ct))] = att_adv {
        // one attention-level adversarial pair reported over both map kinds
        report.adv_att_s = Some(ps + cs);
        report.adv_att_t = Some(pt + ct);
    }

    report.total = gtl::total_loss(&report, cfg, Stage::Two)?;
    check_report_finite(&report)?;
    Ok(report)
}

/// Train the backbone on labeled source slices only (the lower-bound
/// baseline): no synthesis, no alignment, same schedule as stage 2.
pub fn source_only_baseline(cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<Stage2Run> {
    let dir = out.join("source_only");
    ensure_dir(&dir)?;
    let cfg_hash = cfg.content_hash();
    let mut segnet = SegNet::init(
        cfg.num_classes,
        cfg.base_width,
        cfg.image_size,
        &mut crate::rng::stream(cfg.seed, "init-segnet", 0),
    );
    let mut sgd = SgdMomentum::new(cfg.momentum);

    let mut start_epoch = 0u32;
    if let Some(e) = find_resume_epoch(&dir, &["segnet"], cfg.epochs) {
        let c = load_sgd_net(&ckpt_path(&dir, "segnet", e), &mut segnet.params, &mut sgd)?;
        check_hash(&c, &cfg_hash, "source-only resume of segnet")?;
        start_epoch = e;
    }

    let bs = cfg.batch_size;
    let bpe = (data.source.len() / bs) as u64;
    if cfg.epochs > 0 && bpe == 0 {
        return Err(BiglError::EmptyEpoch);
    }
    let max_iter = cfg.epochs as u64 * bpe;
    let seed_s = subseed(cfg.seed, "order-source");

    let mut log = TrainLog::open(&dir)?;
    let mut reports = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let os = data.source.epoch_order(seed_s, epoch as u64);
        for b in 0..bpe as usize {
            let iteration = epoch as u64 * bpe + b as u64;
            let lr = poly_lr(iteration, max_iter, cfg.base_lr, cfg.lr_power)?;
            let xs = gather(&data.source, &os, b * bs, bs);
            let ys: Vec<&LabelMask> = os[b * bs..(b + 1) * bs]
                .iter()
                .map(|&i| {
                    data.source.slices[i].1.as_ref().ok_or_else(|| {
                        BiglError::IngestError("source-only training requires labels".into())
                    })
                })
                .collect::<Result<_>>()?;

            let mut tape = Tape::<f32>::new();
            let sb = segnet.bind(&mut tape, true);
            let x = tape.constant(batch_pixels(&xs));
            let f = segnet.forward(&mut tape, &sb, x, true);
            let labels = batch_labels(&ys);
            let loss = segmentation_loss(&mut tape, f.logits, &labels)?;
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(BiglError::NonFiniteLoss { iter: iteration, component: "seg_s".into() });
            }
            let grads = tape.backward(loss);
            let g = segnet.params.collect_grads(&sb, &grads);
            sgd.step(&mut segnet.params, &g, lr as f32);

            // the supervised term alone is the whole objective here
            let report = LossReport {
                iteration,
                seg_s: Some(value),
                total: value,
                ..LossReport::default()
            };
            log.record(lr, &report)?;
            reports.push(report);
        }
        log.flush()?;
        let done = epoch + 1;
        if done % cfg.snapshot_every == 0 && done != cfg.epochs {
            save_sgd_net(&dir, "segnet", "segnet", done as u64 * bpe, done, &cfg_hash, &segnet.params, &sgd)?;
        }
    }
    let iterations_total = max_iter;
    let final_path = save_sgd_net(
        &dir, "segnet", "segnet", iterations_total, cfg.epochs, &cfg_hash, &segnet.params, &sgd,
    )?;
    Ok(Stage2Run {
        nets: Stage2Nets { segnet, disc_feat: None, disc_pos: None, disc_cha: None },
        outcome: StageOutcome {
            reports,
            iterations_total,
            resumed_from_epoch: start_epoch,
            checkpoint_paths: vec![final_path],
        },
    })
}

/// Load a trained backbone from a checkpoint written by stage 2 or the
/// source-only baseline.
pub fn load_segnet(path: &Path, cfg: &TrainConfig) -> Result<SegNet<f32>> {
    let mut segnet = SegNet::init(
        cfg.num_classes,
        cfg.base_width,
        cfg.image_size,
        &mut crate::rng::stream(cfg.seed, "init-segnet", 0),
    );
    let c = Checkpoint::load(path)?;
    c.restore_params(&mut segnet.params, "")?;
    Ok(segnet)
}

/// Latest segnet checkpoint in a stage directory.
pub fn latest_segnet_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<u32> = None;
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir).map_err(BiglError::Io)? {
            let name = entry.map_err(BiglError::Io)?.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix("segnet_").and_then(|r| r.strip_suffix(".ckpt")) {
                if let Ok(e) = rest.parse::<u32>() {
                    if best.map_or(true, |b| e > b) {
                        best = Some(e);
                    }
                }
            }
        }
    }
    best.map(|e| ckpt_path(dir, "segnet", e)).ok_or_else(|| {
        BiglError::IngestError(format!("no segnet checkpoint found in {}", dir.display()))
    })
}
