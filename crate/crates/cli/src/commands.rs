use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hdformer::attention::{AttentionDump, AttentionKind};
use hdformer::dataio::{
    load_sequence, save_sequence, sliding_window_infer, synth_dataset, Normalizer, PoseSequence,
    SynthSpec, WindowedDataset,
};
use hdformer::metrics::{EvalReport, Scores};
use hdformer::network::{build_model, load_checkpoint, HDFormer};
use hdformer::numerics::Tensor;
use hdformer::skeleton::{build_skeleton, TopologySpec};
use hdformer::training::{train, TrainSetup};

use crate::config::{DataSource, RunConfig, SequencePair};
use crate::{AttnArgs, EvalArgs, InferArgs, Protocol, SynthArgs, TrainArgs, ValidateArgs};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

type Pairs = Vec<(PoseSequence, PoseSequence)>;

fn load_pairs(pairs: &[SequencePair]) -> Result<Pairs> {
    pairs
        .iter()
        .map(|p| {
            let x = load_sequence(&p.input)?;
            let y = load_sequence(&p.target)?;
            x.expect_channels(2)
                .with_context(|| p.input.display().to_string())?;
            y.expect_channels(3)
                .with_context(|| p.target.display().to_string())?;
            ensure!(
                x.frames() == y.frames() && x.joints() == y.joints(),
                "{} and {} differ in length or joint count",
                p.input.display(),
                p.target.display()
            );
            Ok((x, y))
        })
        .collect()
}

fn normalize_pairs(norm: &Normalizer, pairs: &Pairs) -> Pairs {
    pairs
        .iter()
        .map(|(x, y)| (norm.normalize(x).0, norm.normalize(y).0))
        .collect()
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(args.config.as_deref(), &args.set)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let graph = cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)
        .with_context(|| format!("writing {}", out.display()))?;

    let (train_pairs, val_pairs) = match cfg.data.source {
        DataSource::Synth => {
            let train = synth_dataset(&graph, &cfg.data.synth, cfg.data.synth_train, cfg.seed)?;
            let val = synth_dataset(
                &graph,
                &cfg.data.synth,
                cfg.data.synth_val,
                cfg.seed.wrapping_add(1_000_003),
            )?;
            (train, val)
        }
        DataSource::Files => (load_pairs(&cfg.data.train)?, load_pairs(&cfg.data.val)?),
    };
    let inputs: Vec<&PoseSequence> = train_pairs.iter().map(|p| &p.0).collect();
    let targets: Vec<&PoseSequence> = train_pairs.iter().map(|p| &p.1).collect();
    let norm = Normalizer::fit(&inputs, &targets, graph.root())?;
    let (frames, stride) = (cfg.model.frames, cfg.data.train_stride.expect("resolved"));
    let train_ds =
        WindowedDataset::from_pairs(&normalize_pairs(&norm, &train_pairs), frames, stride)?;
    ensure!(
        !train_ds.is_empty(),
        "no training windows: every sequence is shorter than {frames} frames"
    );
    let val_ds = if val_pairs.is_empty() {
        None
    } else {
        Some(WindowedDataset::from_pairs(
            &normalize_pairs(&norm, &val_pairs),
            frames,
            stride,
        )?)
        .filter(|d| !d.is_empty())
    };

    let mut model = build_model(&cfg.model, &graph, cfg.seed)?;
    log::info!(
        "{} parameters, {} training windows, {} validation windows",
        model.param_count(),
        train_ds.len(),
        val_ds.as_ref().map_or(0, WindowedDataset::len)
    );
    let setup = TrainSetup {
        seed: cfg.seed,
        log_path: Some(out.join("train.jsonl")),
        checkpoint_dir: Some(out.clone()),
        extra: serde_json::json!({ "normalizer": norm }),
        target_scale: Some(norm.scale_3d),
    };
    let report = train(&mut model, &train_ds, val_ds.as_ref(), &cfg.train, &setup)?;
    let last = report.epochs.last().context("no epoch completed")?;
    println!(
        "trained {} steps over {} epochs; final loss {:.6}{}",
        last.steps,
        report.epochs.len(),
        last.loss,
        last.val_mpjpe
            .map_or(String::new(), |v| format!("; validation MPJPE {v:.2} mm"))
    );
    println!("outputs in {}", out.display());
    Ok(())
}

/// A trained model and the normaliser it was trained with.
pub struct Loaded {
    pub model: HDFormer,
    pub norm: Normalizer,
}

pub fn load_model(path: &Path) -> Result<Loaded> {
    let ckpt =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (model, extra) = ckpt.into_model()?;
    let norm = match extra.get("normalizer") {
        Some(v) => serde_json::from_value(v.clone()).context("checkpoint normaliser")?,
        None => Normalizer::identity(model.graph().root()),
    };
    Ok(Loaded { model, norm })
}

fn load_input(path: &Path, model: &HDFormer) -> Result<PoseSequence> {
    let seq = load_sequence(path)?;
    seq.expect_channels(2)
        .with_context(|| path.display().to_string())?;
    ensure!(
        seq.joints() == model.config().joints,
        "{} has {} joints but the model expects {}",
        path.display(),
        seq.joints(),
        model.config().joints
    );
    Ok(seq)
}

impl Loaded {
    /// Root-relative 3D prediction for a whole sequence, in input units.
    pub fn predict_sequence(
        &self,
        seq2d: &PoseSequence,
        step: usize,
        stitch: hdformer::dataio::Stitch,
    ) -> Result<PoseSequence> {
        let (x, _) = self.norm.normalize(seq2d);
        let y = sliding_window_infer(&self.model, &x, step, stitch)?;
        Ok(self.norm.denormalize(&y, None))
    }
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    ensure!(
        args.input.len() == args.target.len(),
        "got {} --input files but {} --target files",
        args.input.len(),
        args.target.len()
    );
    ensure!(
        !args.input.is_empty(),
        "nothing to evaluate; pass --input and --target"
    );
    ensure!(
        args.action.is_empty() || args.action.len() == args.input.len(),
        "--action must be given once per --input or not at all"
    );
    let loaded = load_model(&args.checkpoint)?;
    let root = loaded.model.graph().root();
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (i, (input, target)) in args.input.iter().zip(&args.target).enumerate() {
        let seq2d = load_input(input, &loaded.model)?;
        let gt = load_sequence(target)?;
        gt.expect_channels(3)
            .with_context(|| target.display().to_string())?;
        ensure!(
            gt.frames() == seq2d.frames() && gt.joints() == seq2d.joints(),
            "{} and {} differ in length or joint count",
            input.display(),
            target.display()
        );
        let pred = loaded.predict_sequence(&seq2d, args.step, args.stitch.into())?;
        let (gt_rel, _) = Normalizer::identity(root).normalize(&gt);
        let action = args.action.get(i).cloned().unwrap_or_else(|| "all".into());
        let entry = grouped.entry(action).or_default();
        entry.0.extend_from_slice(pred.data());
        entry.1.extend_from_slice(gt_rel.data());
        entry.2 += gt.frames();
    }
    let joints = loaded.model.config().joints;
    let actions = grouped
        .into_iter()
        .map(|(name, (p, g, frames))| {
            Ok((
                name,
                Tensor::new(vec![frames, joints, 3], p)?,
                Tensor::new(vec![frames, joints, 3], g)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = hdformer::metrics::EvalConfig {
        pck_threshold: args.pck_threshold,
        ..Default::default()
    };
    let report = EvalReport::from_actions(&actions, &cfg)?;
    print!("{}", format_report(&report, args.protocol));
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn format_report(report: &EvalReport, protocol: Protocol) -> String {
    let (header, cell): (String, fn(&Scores) -> String) = match protocol {
        Protocol::Mpjpe => (format!("{:>10}", "mpjpe"), |s| format!("{:>10.3}", s.mpjpe)),
        Protocol::PMpjpe => (format!("{:>10}", "p-mpjpe"), |s| {
            format!("{:>10.3}", s.p_mpjpe)
        }),
        Protocol::PckAuc => (format!("{:>8} {:>8}", "pck", "auc"), |s| {
            format!("{:>8.2} {:>8.2}", s.pck, s.auc)
        }),
    };
    let mut out = format!("{:<20} {header} {:>8}\n", "action", "frames");
    let rows = report
        .per_action
        .iter()
        .map(|(k, s)| (k.as_str(), s))
        .chain([
            ("overall", &report.overall),
            ("action mean", &report.action_mean),
        ]);
    for (name, s) in rows {
        out.push_str(&format!("{name:<20} {} {:>8}\n", cell(s), s.samples));
    }
    out
}

pub fn infer_cmd(args: &InferArgs) -> Result<()> {
    let loaded = load_model(&args.checkpoint)?;
    let seq2d = load_input(&args.input, &loaded.model)?;
    let pred = loaded.predict_sequence(&seq2d, args.step, args.stitch.into())?;
    save_sequence(&args.output, &pred)?;
    println!(
        "wrote {} frames to {}",
        pred.frames(),
        args.output.display()
    );
    Ok(())
}

pub fn attn_cmd(args: &AttnArgs) -> Result<()> {
    let loaded = load_model(&args.checkpoint)?;
    let seq2d = load_input(&args.input, &loaded.model)?;
    let frames = loaded.model.config().frames;
    ensure!(
        args.start + frames <= seq2d.frames(),
        "{} has {} frames but a {frames}-frame window starting at {} is needed; pad the sequence or lower --start",
        args.input.display(),
        seq2d.frames(),
        args.start
    );
    let (x, _) = loaded.norm.normalize(&seq2d);
    let window = x.window(args.start, frames)?;
    let window = window.reshape(vec![1, frames, seq2d.joints(), 2])?;
    let inf = loaded.model.infer(&window, true)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let legend: Vec<String> = loaded
        .model
        .hyperbones()
        .map(|ix| ix.hyperbones().iter().map(ToString::to_string).collect())
        .unwrap_or_default();
    let legend_path = args.out_dir.join("hyperbones.txt");
    let text: String = legend
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{i}\t{h}\n"))
        .collect();
    fs::write(&legend_path, text).with_context(|| format!("writing {}", legend_path.display()))?;
    for (i, map) in inf.attention.iter().enumerate() {
        let dump = AttentionDump {
            maps: vec![map.clone()],
            legend: if map.kind == AttentionKind::HighOrder {
                legend.clone()
            } else {
                Vec::new()
            },
        };
        dump.write(args.out_dir.join(format!(
            "{i:02}_{}.attn",
            map.block.replace(['/', '.'], "_")
        )))?;
    }
    println!(
        "wrote {} attention maps and {} hyperbones to {}",
        inf.attention.len(),
        legend.len(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let spec_topo = TopologySpec::resolve(&args.topology)?;
    let graph = build_skeleton(&spec_topo)?;
    let spec = SynthSpec {
        frames: args.frames,
        fps: args.fps,
        noise: args.noise,
        ..SynthSpec::default()
    };
    let pairs = synth_dataset(&graph, &spec, args.count, args.seed)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for (i, (x, y)) in pairs.iter().enumerate() {
        save_sequence(args.out_dir.join(format!("seq{i:03}_2d.pose")), x)?;
        save_sequence(args.out_dir.join(format!("seq{i:03}_3d.pose")), y)?;
    }
    println!(
        "wrote {} sequence pairs to {}",
        pairs.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn first_line(path: &Path) -> Result<String> {
    let mut line = Vec::new();
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(file).read_until(b'\n', &mut line)?;
    Ok(String::from_utf8_lossy(&line).trim_end().to_string())
}

fn describe(path: &Path) -> Result<String> {
    let head = first_line(path)?;
    if head.starts_with("HDFPOSE") {
        let s = load_sequence(path)?;
        return Ok(format!(
            "pose sequence, topology {}, {} frames x {} joints x {} channels at {} fps",
            s.topology,
            s.frames(),
            s.joints(),
            s.channels(),
            s.fps
        ));
    }
    if head.starts_with("HDFCKPT") {
        let loaded = load_model(path)?;
        let m = &loaded.model;
        return Ok(format!(
            "checkpoint, topology {}, {} frames, {} parameters, step {}",
            m.graph().name(),
            m.config().frames,
            m.param_count(),
            m.state.step
        ));
    }
    if head.starts_with("HDFATTN") {
        let dump = AttentionDump::read(path)?;
        for m in &dump.maps {
            for r in 0..m.rows {
                let s: f64 = m.row(r).iter().sum();
                ensure!(
                    (s - 1.0).abs() <= 1e-9,
                    "block {} row {r} sums to {s}",
                    m.block
                );
            }
        }
        return Ok(format!(
            "attention dump, {} maps, {} hyperbones",
            dump.maps.len(),
            dump.legend.len()
        ));
    }
    if path.extension().is_some_and(|e| e == "toml") {
        let cfg = RunConfig::resolve(Some(path), &[])?;
        let graph = cfg.validate()?;
        let model = build_model(&cfg.model, &graph, cfg.seed)?;
        return Ok(format!(
            "run configuration, topology {}, {} frames, {} parameters",
            cfg.topology,
            cfg.model.frames,
            model.param_count()
        ));
    }
    let spec = TopologySpec::load(path)?;
    let graph = build_skeleton(&spec)?;
    Ok(format!(
        "topology {}, {} joints rooted at {}",
        graph.name(),
        graph.joint_count(),
        graph.root()
    ))
}

pub fn validate_cmd(args: &ValidateArgs) -> Result<()> {
    let mut failed: Vec<&PathBuf> = Vec::new();
    for path in &args.files {
        match describe(path) {
            Ok(summary) => println!("ok   {}: {summary}", path.display()),
            Err(e) => {
                println!("FAIL {}: {e:#}", path.display());
                failed.push(path);
            }
        }
    }
    if !failed.is_empty() {
        bail!(
            "{} of {} files failed validation",
            failed.len(),
            args.files.len()
        );
    }
    Ok(())
}
