//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

// negated comparisons below also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hdformer::attention::{
    AttentionKind, BlockConfig, FirstOrderBlock, HeadFusion, HighOrderAttention, HighOrderBlock,
};
use hdformer::dataio::{
    displacement_scale, load_sequence, save_sequence, sliding_window_infer, synth_dataset,
    Normalizer, PoseSequence, Stitch, SynthSpec, WindowPredictor, WindowedDataset,
};
use hdformer::encoding::{encode_one, EncoderMode, HyperboneEncoder};
use hdformer::layers::Ctx;
use hdformer::metrics::{auc, default_auc_thresholds, mpjpe, p_mpjpe, pck};
use hdformer::network::{
    build_model, configure_stage_placement, load_checkpoint, save_checkpoint, HDFormer,
    HDFormerConfig, MergeFusion, Stage, DOWN_STRIDE,
};
use hdformer::numerics::gradcheck::{central_difference, check_params, max_relative_error};
use hdformer::numerics::{Activation, Bindings, ParamStore, Tape, Tensor, Var};
use hdformer::skeleton::{build_skeleton, HyperboneIndex, OrderCap, SkeletonGraph, TopologySpec};
use hdformer::training::{
    evaluate_mpjpe, motion_loss, mpjpe_loss, total_loss, train, LossConfig, OptimizerConfig,
    TrainConfig, TrainSetup,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, Box<dyn std::error::Error>>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*).into());
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn graph(spec: TopologySpec) -> SkeletonGraph {
    build_skeleton(&spec).expect("builtin topology")
}

fn frozen<T>(store: &ParamStore, seed: u64, f: impl FnOnce(&mut Ctx) -> T) -> T {
    let mut tape = Tape::new();
    let vars = store.bind_frozen(&mut tape);
    let mut r = rng(seed);
    let mut cx = Ctx {
        tape: &mut tape,
        vars: &vars,
        train: false,
        rng: &mut r,
        recorder: None,
    };
    f(&mut cx)
}

// ---- 1 ---------------------------------------------------------------------

/// Relative error between tape and central-difference gradients of
/// `sum(build(inputs) * R)` for random inputs and a fixed random `R`.
fn op_error(
    shapes: &[&[usize]],
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> hdformer::Result<Var>,
) -> Result<f64, Box<dyn std::error::Error>> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::randn(s.to_vec(), &mut r))
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |flat: &[f64]| -> hdformer::Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let mut off = 0;
        let mut vars = Vec::new();
        for x in &inputs {
            let n = x.numel();
            let t = Tensor::new(x.shape().to_vec(), flat[off..off + n].to_vec())?;
            vars.push(tape.param(&t));
            off += n;
        }
        let out = build(&mut tape, &vars)?;
        let w = tape.constant(Tensor::randn(
            tape.shape(out).to_vec(),
            &mut rng(seed ^ 0x5eed),
        ));
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(&flat)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inputs)
        .flat_map(|(v, x)| grads.get(*v).map_or(vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();
    let numeric = central_difference(
        |x| {
            let (tape, _, loss) = eval(x).expect("same shapes as the analytic pass");
            tape.value(loss).data()[0]
        },
        &flat,
        1e-6,
    );
    Ok(max_relative_error(&analytic, &numeric))
}

fn model_loss(
    model: &HDFormer,
    tape: &mut Tape,
    vars: &Bindings,
    x: &Tensor,
    r: &Tensor,
) -> hdformer::Result<Var> {
    let mut dr = rng(0);
    let mut cx = Ctx {
        tape,
        vars,
        train: false,
        rng: &mut dr,
        recorder: None,
    };
    let xv = cx.tape.constant(x.clone());
    let y = model.forward(&mut cx, xv)?;
    let rv = cx.tape.constant(r.clone());
    let y = cx.tape.mul(y, rv)?;
    Ok(cx.tape.sum(y))
}

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> hdformer::Result<Var>>;
    let ops: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        (
            "add",
            vec![vec![2, 3, 4], vec![4]],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![vec![2, 3, 4], vec![3, 4]],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![vec![2, 3, 4], vec![2, 3, 4]],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let five = t.constant(Tensor::full(vec![3, 4], 5.0));
                let d = t.add(v[1], five)?;
                t.div(v[0], d)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
        ),
        (
            "gelu",
            vec![vec![4, 5]],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Gelu))),
        ),
        (
            "relu",
            vec![vec![4, 5]],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Relu))),
        ),
        (
            "matmul",
            vec![vec![2, 3, 4], vec![4, 5]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "batched matmul",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "linear",
            vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        ),
        (
            "permute",
            vec![vec![2, 3, 4]],
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        (
            "transpose",
            vec![vec![2, 3, 4]],
            Box::new(|t, v| t.transpose_last(v[0])),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(|t, v| t.softmax_lastdim(v[0])),
        ),
        (
            "layer_norm",
            vec![vec![2, 3, 6], vec![6], vec![6]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "sum_axis",
            vec![vec![2, 3, 4]],
            Box::new(|t, v| t.sum_axis(v[0], 1)),
        ),
        (
            "concat",
            vec![vec![2, 3, 2], vec![2, 1, 2]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        (
            "index_select",
            vec![vec![2, 4, 3]],
            Box::new(|t, v| t.index_select(v[0], 1, &[3, 0, 3, 1])),
        ),
        (
            "narrow",
            vec![vec![2, 6, 3]],
            Box::new(|t, v| t.narrow(v[0], 1, 2, 3)),
        ),
        (
            "norm",
            vec![vec![4, 3]],
            Box::new(|t, v| Ok(t.norm_lastdim(v[0]))),
        ),
        (
            "temporal_conv",
            vec![vec![1, 8, 3, 2], vec![5, 2, 4], vec![4]],
            Box::new(|t, v| t.temporal_conv(v[0], v[1], Some(v[2]), 1)),
        ),
        (
            "strided temporal_conv",
            vec![vec![2, 8, 3, 2], vec![5, 2, 3]],
            Box::new(|t, v| t.temporal_conv(v[0], v[1], None, 2)),
        ),
        (
            "upsample",
            vec![vec![1, 4, 3, 2]],
            Box::new(|t, v| t.temporal_upsample(v[0], 8)),
        ),
        (
            "uneven upsample",
            vec![vec![1, 3, 2, 2]],
            Box::new(|t, v| t.temporal_upsample(v[0], 7)),
        ),
        (
            "dropout",
            vec![vec![4, 6]],
            Box::new(|t, v| t.dropout(v[0], 0.4, true, &mut rng(3))),
        ),
        (
            "mpjpe_loss",
            vec![vec![2, 4, 3, 3], vec![2, 4, 3, 3]],
            Box::new(|t, v| mpjpe_loss(t, v[0], v[1])),
        ),
        (
            "motion_loss",
            vec![vec![2, 5, 3, 3], vec![2, 5, 3, 3]],
            Box::new(|t, v| motion_loss(t, v[0], v[1], &[1, 2])),
        ),
        (
            "total_loss",
            vec![vec![1, 5, 3, 3], vec![1, 5, 3, 3]],
            Box::new(|t, v| Ok(total_loss(t, v[0], v[1], &LossConfig::default())?.total)),
        ),
    ];
    let mut worst = (0.0f64, String::new());
    for (i, (name, shapes, build)) in ops.iter().enumerate() {
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let e = op_error(&shapes, 100 + i as u64, build)?;
        ensure!(e < 1e-4, "{name}: relative error {e:.2e}");
        if e >= worst.0 {
            worst = (e, name.to_string());
        }
    }

    // blocks with every encoder mode
    let g = graph(TopologySpec::micro5());
    let index = g.enumerate_hyperbones(4)?;
    let cfg = BlockConfig {
        heads: 2,
        dropout: 0.0,
        ..BlockConfig::default()
    };
    let x = Tensor::randn(vec![1, 2, 5, 4], &mut rng(7));
    for mode in EncoderMode::ALL {
        let mut store = ParamStore::new();
        let block = HighOrderBlock::new(
            &mut store,
            "hob",
            4,
            g.adjacency(),
            None,
            mode,
            &index,
            &cfg,
            &mut rng(8),
        )?;
        for p in store.iter_mut().filter(|p| p.name.ends_with("psi")) {
            p.tensor =
                Tensor::randn(p.tensor.shape().to_vec(), &mut rng(9)).with_requires_grad(true);
        }
        let report = check_params(
            &store,
            |tape, vars| {
                let mut dr = rng(0);
                let mut cx = Ctx {
                    tape,
                    vars,
                    train: false,
                    rng: &mut dr,
                    recorder: None,
                };
                let xv = cx.tape.constant(x.clone());
                let y = block.forward(&mut cx, xv, &index)?;
                let r = cx
                    .tape
                    .constant(Tensor::randn(vec![1, 2, 5, 4], &mut rng(10)));
                let y = cx.tape.mul(y, r)?;
                Ok(cx.tape.sum(y))
            },
            Some(3),
            1e-6,
        )?;
        ensure!(
            report.max_error < 1e-4,
            "high-order block ({mode:?}): {report:?}"
        );
        if report.max_error >= worst.0 {
            worst = (report.max_error, format!("{mode:?} block"));
        }
    }

    // end-to-end micro model
    let cfg = HDFormerConfig::micro();
    ensure!(
        cfg.frames == 8 && cfg.joints == 5 && cfg.depth == 1,
        "micro config drifted"
    );
    let model = build_model(&cfg, &g, 11)?;
    let x = Tensor::randn(vec![1, 8, 5, 2], &mut rng(12));
    let r = Tensor::randn(vec![1, 8, 5, 3], &mut rng(13));
    let report = check_params(
        model.params(),
        |tape, vars| model_loss(&model, tape, vars, &x, &r),
        Some(4),
        1e-5,
    )?;
    ensure!(
        report.max_error < 1e-4,
        "micro model parameters: {report:?}"
    );
    let input_grad = {
        let mut tape = Tape::new();
        let vars = model.params().bind_frozen(&mut tape);
        let mut dr = rng(0);
        let mut cx = Ctx {
            tape: &mut tape,
            vars: &vars,
            train: false,
            rng: &mut dr,
            recorder: None,
        };
        let xv = cx.tape.param(&x);
        let y = model.forward(&mut cx, xv)?;
        let rv = cx.tape.constant(r.clone());
        let y = cx.tape.mul(y, rv)?;
        let l = cx.tape.sum(y);
        tape.backward(l)?
            .get(xv)
            .map(<[f64]>::to_vec)
            .ok_or("input received no gradient")?
    };
    let numeric = central_difference(
        |d| {
            let xt = Tensor::new(x.shape().to_vec(), d.to_vec()).expect("same shape");
            let mut tape = Tape::new();
            let vars = model.params().bind_frozen(&mut tape);
            let l = model_loss(&model, &mut tape, &vars, &xt, &r).expect("forward");
            tape.value(l).data()[0]
        },
        x.data(),
        1e-5,
    );
    let input_err = max_relative_error(&input_grad, &numeric);
    ensure!(
        input_err < 1e-4,
        "micro model input gradient: {input_err:.2e}"
    );

    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "suite took {elapsed:?}");
    Ok(format!(
        "{} ops, 5 encoder blocks, micro model ({} probes, worst {:.1e}); worst op {} {:.1e}; input {:.1e}; {:.1}s",
        ops.len(),
        report.probed,
        report.max_error,
        worst.1,
        worst.0,
        input_err,
        elapsed.as_secs_f64()
    ))
}

// ---- 2 ---------------------------------------------------------------------

fn random_tree(r: &mut ChaCha8Rng, n: usize) -> TopologySpec {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    let edges = (1..n)
        .map(|i| (order[r.random_range(0..i)], order[i]))
        .collect();
    TopologySpec {
        name: "random".into(),
        joints: n,
        root: order[0],
        edges,
        labels: Vec::new(),
    }
}

/// Every ordered pair whose first joint is an ancestor of the second, found
/// by walking parent links from the edge list.
fn brute_force_hyperbones(spec: &TopologySpec, max_order: usize) -> Vec<Vec<usize>> {
    let mut parent = vec![None; spec.joints];
    for &(p, c) in &spec.edges {
        parent[c] = Some(p);
    }
    let mut out = Vec::new();
    for a in 0..spec.joints {
        for b in 0..spec.joints {
            if a == b {
                continue;
            }
            let mut path = vec![b];
            let mut cur = b;
            while let Some(p) = parent[cur] {
                path.push(p);
                if p == a {
                    break;
                }
                cur = p;
            }
            if *path.last().unwrap() == a && path.len() <= max_order {
                path.reverse();
                out.push(path);
            }
        }
    }
    out.sort_by_key(|p| (p.len(), p[0], *p.last().unwrap()));
    out
}

fn hyperbone_oracle() -> Outcome {
    let mut r = rng(2024);
    let mut total = 0;
    for trial in 0..200 {
        let n = r.random_range(1..=10);
        let max_order = r.random_range(2..=5);
        let spec = random_tree(&mut r, n);
        let g = build_skeleton(&spec)?;
        let index = g.enumerate_hyperbones(max_order)?;
        let found: Vec<Vec<usize>> = index
            .hyperbones()
            .iter()
            .map(|h| h.path().to_vec())
            .collect();
        let expected = brute_force_hyperbones(&spec, max_order);
        ensure!(
            found == expected,
            "trial {trial}: {n} joints, max order {max_order}: {found:?} != {expected:?}"
        );
        total += found.len();
    }
    Ok(format!(
        "200 random trees, {total} hyperbones, identical sets and order"
    ))
}

// ---- 3 ---------------------------------------------------------------------

struct Encoder {
    store: ParamStore,
    enc: HyperboneEncoder,
    index: HyperboneIndex,
    channels: usize,
}

impl Encoder {
    fn new(mode: EncoderMode, channels: usize, seed: u64) -> Self {
        let g = graph(TopologySpec::h36m());
        let index = g
            .enumerate_hyperbones(OrderCap::SpdEdges(4).max_order_joints())
            .expect("order 5");
        let mut store = ParamStore::new();
        let enc = HyperboneEncoder::new(&mut store, "enc", mode, channels, &index, &mut rng(seed));
        for p in store.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.tensor = Tensor::randn(p.tensor.shape().to_vec(), &mut rng(seed + 1))
                .with_requires_grad(true);
        }
        Self {
            store,
            enc,
            index,
            channels,
        }
    }

    /// Rows `[M, C]` from joint features `z: [J, C]` via the tape path.
    fn encode(&self, z: &Tensor) -> Tensor {
        let j = z.shape()[0];
        frozen(&self.store, 0, |cx| {
            let zv = cx
                .tape
                .constant(z.clone().reshape(vec![1, 1, j, self.channels]).unwrap());
            let h = self.enc.encode_all(cx, zv, &self.index).unwrap().h;
            cx.tape
                .value(h)
                .clone()
                .reshape(vec![self.index.len(), self.channels])
                .unwrap()
        })
    }

    fn row<'a>(&self, t: &'a Tensor, m: usize) -> &'a [f64] {
        &t.data()[m * self.channels..(m + 1) * self.channels]
    }

    fn max_row_diff(&self, a: &Tensor, b: &Tensor, rows: impl Iterator<Item = usize>) -> f64 {
        rows.map(|m| {
            self.row(a, m)
                .iter()
                .zip(self.row(b, m))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
    }
}

fn joint_features(r: &mut ChaCha8Rng, c: usize) -> Tensor {
    Tensor::randn(vec![17, c], r)
}

fn set_row(z: &mut Tensor, j: usize, values: &[f64]) {
    let c = values.len();
    z.data_mut()[j * c..(j + 1) * c].copy_from_slice(values);
}

fn encoder_algebra() -> Outcome {
    let mut r = rng(33);
    let mut reference_err = 0.0f64;
    let mut nontrivial = 0;
    for trial in 0..50u64 {
        let c = r.random_range(2..=6);

        // subtraction: rows depend only on the endpoints
        let e = Encoder::new(EncoderMode::Subtraction, c, trial);
        let z = joint_features(&mut r, c);
        let base = e.encode(&z);
        let moved: Vec<usize> = (0..17).filter(|_| r.random_bool(0.4)).collect();
        let mut z2 = z.clone();
        for &j in &moved {
            let noise: Vec<f64> = (0..c).map(|_| r.random_range(-5.0..5.0)).collect();
            set_row(&mut z2, j, &noise);
        }
        let out = e.encode(&z2);
        let fixed: Vec<usize> = e
            .index
            .hyperbones()
            .iter()
            .enumerate()
            .filter(|(_, h)| !moved.contains(&h.start()) && !moved.contains(&h.end()))
            .map(|(m, _)| m)
            .collect();
        nontrivial += fixed
            .iter()
            .filter(|&&m| {
                e.index.hyperbones()[m]
                    .path()
                    .iter()
                    .any(|j| moved.contains(j))
            })
            .count();
        let d = e.max_row_diff(&base, &out, fixed.into_iter());
        ensure!(
            d <= 1e-12,
            "subtraction trial {trial}: interior joints changed a row by {d:e}"
        );

        // summation: permuting features along a path leaves its row unchanged
        let e = Encoder::new(EncoderMode::Summation, c, 100 + trial);
        let z = joint_features(&mut r, c);
        let base = e.encode(&z);
        let long: Vec<usize> = (0..e.index.len())
            .filter(|&m| e.index.hyperbones()[m].order() >= 3)
            .collect();
        let m = *long.choose(&mut r).unwrap();
        let path = e.index.hyperbones()[m].path().to_vec();
        let mut perm = path.clone();
        perm.shuffle(&mut r);
        let mut z2 = z.clone();
        for (&dst, &src) in path.iter().zip(&perm) {
            let row = z.data()[src * c..(src + 1) * c].to_vec();
            set_row(&mut z2, dst, &row);
        }
        let d = e.max_row_diff(&base, &e.encode(&z2), std::iter::once(m));
        ensure!(
            d <= 1e-12,
            "summation trial {trial}: permutation changed row {m} by {d:e}"
        );

        // sub-concat: a common offset on every joint cancels
        let e = Encoder::new(EncoderMode::SubConcat, c, 200 + trial);
        let z = joint_features(&mut r, c);
        let base = e.encode(&z);
        let offset: Vec<f64> = (0..c).map(|_| r.random_range(-10.0..10.0)).collect();
        let shifted = Tensor::new(
            z.shape().to_vec(),
            z.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + offset[i % c])
                .collect(),
        )?;
        let d = e.max_row_diff(&base, &e.encode(&shifted), 0..e.index.len());
        ensure!(
            d <= 1e-12,
            "sub-concat trial {trial}: offset changed rows by {d:e}"
        );

        // multiplication: a zero factor zeroes every path through its joint
        let mut e = Encoder::new(EncoderMode::Multiplication, c, 300 + trial);
        for p in e.store.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.tensor.data_mut().fill(0.0);
        }
        let mut z = joint_features(&mut r, c);
        let j0 = r.random_range(0..17);
        set_row(&mut z, j0, &vec![0.0; c]);
        let out = e.encode(&z);
        for (m, h) in e.index.hyperbones().iter().enumerate() {
            let max = e.row(&out, m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if h.path().contains(&j0) {
                ensure!(
                    max <= 1e-12,
                    "multiplication trial {trial}: row {m} through joint {j0} is {max:e}"
                );
            }
        }

        // the tape path agrees with the single-hyperbone reference
        for mode in EncoderMode::ALL {
            let e = Encoder::new(mode, c, 400 + trial);
            let z = joint_features(&mut r, c);
            let out = e.encode(&z);
            let w = e.enc.weights(&e.store);
            for (m, h) in e.index.hyperbones().iter().enumerate() {
                let want = encode_one(mode, &z, h, &w)?;
                for (a, b) in e.row(&out, m).iter().zip(&want) {
                    reference_err = reference_err.max((a - b).abs());
                }
            }
        }
    }
    ensure!(
        nontrivial > 0,
        "no subtraction trial perturbed an interior joint"
    );
    ensure!(
        reference_err <= 1e-12,
        "tape encoder differs from reference by {reference_err:e}"
    );
    Ok(format!(
        "50 inputs per property on the 44 order<=5 hyperbones; {nontrivial} rows with moved interior joints; reference gap {reference_err:.1e}"
    ))
}

// ---- 4 ---------------------------------------------------------------------

fn attention_contracts() -> Outcome {
    let h36m = graph(TopologySpec::h36m());
    let mut worst_row = 0.0f64;
    let mut shapes = BTreeMap::new();
    for (n, expected_m) in [(2, 16), (3, 29), (4, 39), (5, 44)] {
        let cfg = configure_stage_placement(
            &HDFormerConfig {
                frames: 8,
                channels: vec![8, 8],
                merge_channels: 8,
                depth: 1,
                order_cap: OrderCap::OrderJoints(n),
                block: BlockConfig {
                    heads: 2,
                    ..BlockConfig::default()
                },
                ..HDFormerConfig::desk()
            },
            &[Stage::All],
        )?;
        let model = build_model(&cfg, &h36m, n as u64)?;
        let x = Tensor::randn(vec![2, 8, 17, 2], &mut rng(40 + n as u64));
        let inf = model.infer(&x, true)?;
        ensure!(
            inf.attention.len() == model.attention_map_count(),
            "recorded {} maps",
            inf.attention.len()
        );
        for map in &inf.attention {
            let cols = match map.kind {
                AttentionKind::FirstOrder => 17,
                AttentionKind::HighOrder => expected_m,
            };
            ensure!(
                map.rows == 17 && map.cols == cols && map.data.len() == 17 * cols,
                "{} ({}) is {}x{}, expected 17x{cols}",
                map.block,
                map.kind,
                map.rows,
                map.cols
            );
            for r in 0..map.rows {
                let s: f64 = map.row(r).iter().sum();
                worst_row = worst_row.max((s - 1.0).abs());
            }
            if map.kind == AttentionKind::HighOrder {
                shapes.insert(expected_m, map.cols);
            }
        }
    }
    ensure!(
        worst_row <= 1e-9,
        "a softmax row deviates from 1 by {worst_row:e}"
    );

    // sum fusion against concat fusion with stacked identity output
    let micro = graph(TopologySpec::micro5());
    let (c, heads) = (6, 3);
    let cfg = BlockConfig {
        heads,
        fusion: HeadFusion::Concat,
        dropout: 0.0,
        ..BlockConfig::default()
    };
    let mut store = ParamStore::new();
    let mut foa = FirstOrderBlock::new(
        &mut store,
        "foa",
        c,
        micro.adjacency(),
        None,
        &cfg,
        &mut rng(50),
    )?;
    let mut hoa = HighOrderAttention::new(&mut store, "hoa", c, &cfg, &mut rng(51));
    for out in [foa.attention.output.clone(), hoa.attention.output.clone()] {
        let out = out.ok_or("concat fusion built no output map")?;
        let w = store.get_mut(out.weight);
        w.data_mut().fill(0.0);
        for h in 0..heads {
            for k in 0..c {
                w.data_mut()[(h * c + k) * c + k] = 1.0;
            }
        }
        store
            .get_mut(out.bias.ok_or("output map has no bias")?)
            .data_mut()
            .fill(0.0);
    }
    let mut gap = 0.0f64;
    let mut r = rng(52);
    for _ in 0..20 {
        let z = Tensor::randn(vec![2, 3, 5, c], &mut r);
        let hb = Tensor::randn(vec![2, 3, 7, c], &mut r);
        let run = |foa: &FirstOrderBlock, hoa: &HighOrderAttention| {
            frozen(&store, 0, |cx| {
                let zv = cx.tape.constant(z.clone());
                let hv = cx.tape.constant(hb.clone());
                let a = foa.attend(cx, zv).unwrap();
                let b = hoa.attend(cx, zv, hv).unwrap();
                (cx.tape.value(a).clone(), cx.tape.value(b).clone())
            })
        };
        let concat = run(&foa, &hoa);
        foa.attention.fusion = HeadFusion::Sum;
        hoa.attention.fusion = HeadFusion::Sum;
        let sum = run(&foa, &hoa);
        foa.attention.fusion = HeadFusion::Concat;
        hoa.attention.fusion = HeadFusion::Concat;
        gap = gap
            .max(concat.0.max_abs_diff(&sum.0))
            .max(concat.1.max_abs_diff(&sum.1));
    }
    ensure!(
        gap <= 1e-12,
        "sum and identity-concat fusion differ by {gap:e}"
    );
    Ok(format!(
        "row sums within {worst_row:.1e}; cross maps 17xM for M in {:?}; fusion gap {gap:.1e}",
        shapes.keys().collect::<Vec<_>>()
    ))
}

// ---- 5 ---------------------------------------------------------------------

fn expected_ladder(frames: usize, depth: usize) -> Vec<usize> {
    let down: Vec<usize> = (0..=depth)
        .map(|d| frames / DOWN_STRIDE.pow(d as u32))
        .collect();
    let up = down.iter().rev().skip(1).copied();
    down.iter().copied().chain(up).collect()
}

fn shape_pipeline() -> Outcome {
    let cfg = HDFormerConfig {
        channels: vec![8, 8, 8],
        merge_channels: 8,
        block: BlockConfig {
            heads: 1,
            ..BlockConfig::default()
        },
        ..HDFormerConfig::paper()
    };
    ensure!(
        cfg.kernel == 5 && DOWN_STRIDE == 2,
        "kernel {} stride {DOWN_STRIDE}",
        cfg.kernel
    );
    let model = build_model(&cfg, &graph(TopologySpec::h36m()), 0)?;
    let conv = model
        .params()
        .by_name("down0.conv.weight")
        .ok_or("no down0 convolution")?;
    ensure!(
        conv.shape()[0] == 5,
        "convolution kernel shape {:?}",
        conv.shape()
    );
    let inf = model.infer(&Tensor::randn(vec![2, 96, 17, 2], &mut rng(60)), false)?;
    ensure!(
        inf.ladder == [96, 48, 24, 48, 96],
        "ladder {:?}",
        inf.ladder
    );
    ensure!(
        inf.output.shape() == [2, 96, 17, 3],
        "output {:?}",
        inf.output.shape()
    );

    let mut r = rng(61);
    let topologies = [
        TopologySpec::micro5(),
        TopologySpec::h36m(),
        TopologySpec::mpi_inf_3dhp(),
    ];
    for trial in 0..20 {
        let spec = topologies.choose(&mut r).unwrap().clone();
        let depth = r.random_range(1..=3);
        let frames = DOWN_STRIDE.pow(depth as u32) * r.random_range(1..=4);
        let channels: Vec<usize> = (0..=depth).map(|_| 2 * r.random_range(1..=4)).collect();
        let stages: Vec<Stage> = [Stage::Down, Stage::Up, Stage::Merge]
            .into_iter()
            .filter(|_| r.random_bool(0.5))
            .collect();
        let base = HDFormerConfig {
            frames,
            joints: spec.joints,
            depth,
            channels,
            merge_channels: 2 * r.random_range(1..=4),
            down_blocks: r.random_range(0..=1),
            up_blocks: r.random_range(0..=1),
            merge_blocks: r.random_range(1..=2),
            order_cap: OrderCap::OrderJoints(r.random_range(2..=4)),
            encoder: *EncoderMode::ALL.choose(&mut r).unwrap(),
            merge_fusion: if r.random_bool(0.5) {
                MergeFusion::Sum
            } else {
                MergeFusion::Concat
            },
            block: BlockConfig {
                heads: r.random_range(1..=2),
                ..BlockConfig::default()
            },
            ..HDFormerConfig::paper()
        };
        let cfg = configure_stage_placement(&base, &stages)?;
        let model = build_model(&cfg, &build_skeleton(&spec)?, trial)?;
        let b = r.random_range(1..=2);
        let inf = model.infer(
            &Tensor::randn(vec![b, frames, spec.joints, 2], &mut r),
            false,
        )?;
        let want = expected_ladder(frames, depth);
        ensure!(
            inf.ladder == want,
            "config {trial}: ladder {:?} != {want:?}",
            inf.ladder
        );
        ensure!(
            inf.output.shape() == [b, frames, spec.joints, 3],
            "config {trial}: output {:?}",
            inf.output.shape()
        );
    }
    Ok(
        "96->48->24->48->96 with output [B, 96, 17, 3]; 20 random configs conserve the ladder"
            .into(),
    )
}

// ---- 6 ---------------------------------------------------------------------

struct Corpus {
    graph: SkeletonGraph,
    windows: WindowedDataset,
    scale_3d: f64,
}

fn micro_corpus(
    sequences: usize,
    frames: usize,
    seed: u64,
) -> Result<Corpus, Box<dyn std::error::Error>> {
    let graph = graph(TopologySpec::micro5());
    let spec = SynthSpec {
        frames,
        ..SynthSpec::default()
    };
    let pairs = synth_dataset(&graph, &spec, sequences, seed)?;
    let inputs: Vec<&PoseSequence> = pairs.iter().map(|p| &p.0).collect();
    let targets: Vec<&PoseSequence> = pairs.iter().map(|p| &p.1).collect();
    let norm = Normalizer::fit(&inputs, &targets, graph.root())?;
    let normed: Vec<_> = pairs
        .iter()
        .map(|(a, b)| (norm.normalize(a).0, norm.normalize(b).0))
        .collect();
    let t = HDFormerConfig::micro().frames;
    let windows = WindowedDataset::from_pairs(&normed, t, t / 2)?;
    Ok(Corpus {
        graph,
        windows,
        scale_3d: displacement_scale(&targets, 0)?,
    })
}

fn overfit_config(steps: u64, batch: usize, windows: usize) -> TrainConfig {
    let epochs = (steps as usize).div_ceil(windows.div_ceil(batch));
    let mut milestones: Vec<usize> = [epochs * 6 / 10, epochs * 85 / 100]
        .into_iter()
        .filter(|&m| m > 0)
        .collect();
    milestones.dedup();
    TrainConfig {
        max_steps: Some(steps),
        optimizer: OptimizerConfig {
            epochs,
            milestones,
            batch_size: batch,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_overfit() -> Outcome {
    let started = Instant::now();
    let corpus = micro_corpus(32, 16, 7)?;
    let cfg = overfit_config(2000, 8, corpus.windows.len());
    let run = || -> Result<(f64, Vec<u64>), Box<dyn std::error::Error>> {
        let mut model = build_model(&HDFormerConfig::micro(), &corpus.graph, 1)?;
        let report = train(
            &mut model,
            &corpus.windows,
            None,
            &cfg,
            &TrainSetup {
                seed: 1,
                ..TrainSetup::default()
            },
        )?;
        let err = evaluate_mpjpe(&model, &corpus.windows, 16)? * corpus.scale_3d;
        Ok((
            err,
            report.step_losses.iter().map(|v| v.to_bits()).collect(),
        ))
    };
    let (err, losses) = run()?;
    let (err2, losses2) = run()?;
    let threshold = 0.05 * corpus.scale_3d;
    ensure!(losses.len() <= 2000, "{} steps", losses.len());
    ensure!(
        losses == losses2 && err.to_bits() == err2.to_bits(),
        "same seed gave different runs"
    );
    ensure!(
        err < threshold,
        "training MPJPE {err:.2} mm >= {threshold:.2} mm"
    );
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "{} windows, {} steps: MPJPE {err:.2} mm < {threshold:.2} mm (5% of {:.1} mm); repeat bit-identical; {:.0}s for two runs",
        corpus.windows.len(),
        losses.len(),
        corpus.scale_3d,
        elapsed.as_secs_f64()
    ))
}

// ---- 7 ---------------------------------------------------------------------

fn ablation_smoke() -> Outcome {
    let corpus = micro_corpus(2, 16, 70)?;
    let base = HDFormerConfig::micro();
    let mut variants: Vec<(String, HDFormerConfig)> = Vec::new();
    for stage in [Stage::Merge, Stage::Down, Stage::Up, Stage::All] {
        variants.push((
            format!("placement {stage:?}"),
            configure_stage_placement(&base, &[stage])?,
        ));
    }
    for mode in EncoderMode::ALL {
        variants.push((
            format!("encoder {mode:?}"),
            HDFormerConfig {
                encoder: mode,
                ..base.clone()
            },
        ));
    }
    let mut no_psi = base.clone();
    no_psi.block.use_psi = false;
    variants.push(("psi off".into(), no_psi));
    variants.push((
        "positional encoding".into(),
        HDFormerConfig {
            positional_encoding: true,
            ..base.clone()
        },
    ));
    let mut concat = base.clone();
    concat.block.fusion = HeadFusion::Concat;
    variants.push(("concat head fusion".into(), concat));
    variants.push((
        "concat merge fusion".into(),
        HDFormerConfig {
            merge_fusion: MergeFusion::Concat,
            ..base.clone()
        },
    ));
    let cfg = TrainConfig {
        max_steps: Some(1),
        ..overfit_config(1, 4, corpus.windows.len())
    };
    for (name, mcfg) in &variants {
        let mut model = build_model(mcfg, &corpus.graph, 3)?;
        let before = model.params().clone();
        let report = train(
            &mut model,
            &corpus.windows,
            None,
            &cfg,
            &TrainSetup::default(),
        )?;
        ensure!(
            report.step_losses.len() == 1,
            "{name}: {} steps",
            report.step_losses.len()
        );
        ensure!(
            model.params() != &before,
            "{name}: train step left weights unchanged"
        );
        let err = evaluate_mpjpe(&model, &corpus.windows, 16)?;
        ensure!(err.is_finite(), "{name}: eval gave {err}");
    }
    Ok(format!(
        "{} variants built, stepped and evaluated",
        variants.len()
    ))
}

// ---- 8 ---------------------------------------------------------------------

fn metric_suite() -> Outcome {
    let mut r = rng(80);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let gt = Tensor::randn(vec![1, 17, 3], &mut r);
        let gt = Tensor::new(
            gt.shape().to_vec(),
            gt.data().iter().map(|v| v * 200.0).collect(),
        )?;
        let axis: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rot = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(nalgebra::Vector3::new(
                axis[0] / norm,
                axis[1] / norm,
                axis[2] / norm,
            )),
            r.random_range(-3.1..3.1),
        );
        let s = r.random_range(0.1..10.0);
        let t = nalgebra::Vector3::new(
            r.random_range(-1e3..1e3),
            r.random_range(-1e3..1e3),
            r.random_range(-1e3..1e3),
        );
        let moved: Vec<f64> = gt
            .data()
            .chunks_exact(3)
            .flat_map(|p| {
                let v = s * (rot * nalgebra::Vector3::new(p[0], p[1], p[2])) + t;
                [v.x, v.y, v.z]
            })
            .collect();
        worst = worst.max(p_mpjpe(&Tensor::new(gt.shape().to_vec(), moved)?, &gt)?);
    }
    ensure!(worst <= 1e-9, "similarity copy scored {worst:e}");
    for seed in 0..100 {
        let pred = Tensor::randn(vec![1, 17, 3], &mut rng(1000 + seed));
        let gt = Tensor::randn(vec![1, 17, 3], &mut rng(5000 + seed));
        let (a, b) = (p_mpjpe(&pred, &gt)?, mpjpe(&pred, &gt)?);
        ensure!(a <= b + 1e-9, "pair {seed}: p_mpjpe {a} > mpjpe {b}");
    }
    let gt = Tensor::zeros(vec![2, 17, 3]);
    let far = Tensor::full(vec![2, 17, 3], 100.0);
    let grid = default_auc_thresholds();
    ensure!(grid.len() == 31 && grid[30] == 150.0, "AUC grid {grid:?}");
    ensure!(pck(&gt, &gt, 150.0)? == 100.0, "PCK of exact poses");
    ensure!(pck(&far, &gt, 150.0)? == 0.0, "PCK of distant poses");
    ensure!(auc(&gt, &gt, &grid)? == 100.0, "AUC of exact poses");
    ensure!(auc(&far, &gt, &grid)? == 0.0, "AUC of distant poses");
    Ok(format!(
        "similarity copies within {worst:.1e}; 100 random pairs bounded; PCK/AUC 0 and 100 exact"
    ))
}

// ---- 9 ---------------------------------------------------------------------

struct Constant {
    frames: usize,
    value: Vec<f64>,
}

impl WindowPredictor for Constant {
    fn window_len(&self) -> usize {
        self.frames
    }

    fn predict_windows(&self, x: &Tensor) -> hdformer::Result<Tensor> {
        let s = x.shape();
        let data = (0..s[0] * s[1])
            .flat_map(|_| self.value.iter().copied())
            .collect();
        Tensor::new(vec![s[0], s[1], s[2], 3], data)
    }
}

fn stitching() -> Outcome {
    let g = graph(TopologySpec::micro5());
    let model = build_model(&HDFormerConfig::micro(), &g, 90)?;
    let constant = Constant {
        frames: 8,
        value: (0..15).map(|i| 0.1 * i as f64 - 0.37).collect(),
    };
    let mut r = rng(91);
    let mut lengths = Vec::new();
    for _ in 0..50 {
        let len = r.random_range(8..=140);
        lengths.push(len);
        let seq = PoseSequence::new(
            "micro5",
            50.0,
            len,
            5,
            2,
            Tensor::randn(vec![len * 10], &mut r).into_data(),
        )?;
        let out = sliding_window_infer(&model, &seq, 5, Stitch::Mean)?;
        ensure!(
            out.frames() == len && out.channels() == 3 && out.joints() == 5,
            "length {len} gave {} frames",
            out.frames()
        );
        ensure!(
            out.data().iter().all(|v| v.is_finite()),
            "length {len}: non-finite output"
        );
        let flat = sliding_window_infer(&constant, &seq, 5, Stitch::Mean)?;
        for t in 0..len {
            for j in 0..5 {
                let want = &constant.value[j * 3..j * 3 + 3];
                ensure!(
                    flat.point(t, j) == want,
                    "length {len}: frame {t} joint {j} is {:?}",
                    flat.point(t, j)
                );
            }
        }
    }
    let short = PoseSequence::new("micro5", 50.0, 7, 5, 2, vec![0.0; 70])?;
    ensure!(
        sliding_window_infer(&model, &short, 5, Stitch::Mean).is_err(),
        "short sequence accepted"
    );
    lengths.sort_unstable();
    Ok(format!(
        "50 lengths in {}..={} preserved; constant model reproduced exactly",
        lengths[0], lengths[49]
    ))
}

// ---- 10 --------------------------------------------------------------------

fn strip_wall_time(log: &str) -> Result<Vec<serde_json::Value>, Box<dyn std::error::Error>> {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l)?;
            v.as_object_mut()
                .ok_or("log line is not an object")?
                .remove("wall_time");
            Ok(v)
        })
        .collect()
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir()?;
    let corpus = micro_corpus(4, 16, 100)?;
    let cfg = HDFormerConfig {
        positional_encoding: true,
        ..HDFormerConfig::micro()
    };
    let model = build_model(&cfg, &corpus.graph, 101)?;
    let path = dir.path().join("model.ckpt");
    let extra = serde_json::json!({"note": "round trip"});
    save_checkpoint(&path, &model, &extra)?;
    let (loaded, extra2) = load_checkpoint(&path)?.into_model()?;
    ensure!(extra2 == extra, "checkpoint metadata changed");
    ensure!(
        loaded.config() == model.config(),
        "checkpoint config changed"
    );
    let same = model
        .params()
        .iter()
        .zip(loaded.params().iter())
        .all(|(a, b)| {
            a.name == b.name
                && a.tensor.shape() == b.tensor.shape()
                && a.tensor
                    .data()
                    .iter()
                    .zip(b.tensor.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ensure!(
        same && model.params().len() == loaded.params().len(),
        "checkpoint weights changed"
    );

    let mut data = Tensor::randn(vec![11 * 5 * 3], &mut rng(102)).into_data();
    data[..4].copy_from_slice(&[-0.0, f64::MIN_POSITIVE / 8.0, 1e300, -std::f64::consts::PI]);
    let seq = PoseSequence::new("micro5", 29.97, 11, 5, 3, data)?;
    let pose_path = dir.path().join("seq.pose");
    save_sequence(&pose_path, &seq)?;
    let back = load_sequence(&pose_path)?;
    let bits = |s: &PoseSequence| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(
        bits(&back) == bits(&seq)
            && back.fps.to_bits() == seq.fps.to_bits()
            && back.topology == seq.topology,
        "pose file changed on round trip"
    );

    let run = |name: &str| -> Result<(Vec<u64>, String), Box<dyn std::error::Error>> {
        let mut m = build_model(&HDFormerConfig::micro(), &corpus.graph, 103)?;
        let log = dir.path().join(name);
        let report = train(
            &mut m,
            &corpus.windows,
            Some(&corpus.windows),
            &overfit_config(12, 4, corpus.windows.len()),
            &TrainSetup {
                seed: 104,
                log_path: Some(log.clone()),
                ..TrainSetup::default()
            },
        )?;
        Ok((
            report.step_losses.iter().map(|v| v.to_bits()).collect(),
            std::fs::read_to_string(log)?,
        ))
    };
    let (a, log_a) = run("a.jsonl")?;
    let (b, log_b) = run("b.jsonl")?;
    ensure!(a == b, "step losses differ between same-seed runs");
    ensure!(
        strip_wall_time(&log_a)? == strip_wall_time(&log_b)?,
        "epoch logs differ beyond wall time"
    );
    Ok(format!(
        "checkpoint ({} tensors) and pose file bit-exact; {} step losses and {} epoch records identical",
        model.params().len(),
        a.len(),
        log_a.lines().count()
    ))
}

// ---- 11 --------------------------------------------------------------------

fn parameter_count() -> Outcome {
    let cfg = HDFormerConfig::paper();
    let model = build_model(&cfg, &graph(TopologySpec::h36m()), 0)?;
    let n = model.param_count();
    let target = 3.7e6;
    let rel = (n as f64 - target) / target;
    ensure!(
        rel.abs() <= 0.15,
        "{n} parameters is {:+.1}% from 3.7M",
        100.0 * rel
    );
    Ok(format!(
        "{n} parameters ({:+.1}% of 3.7M) with channels {:?}, merge {}",
        100.0 * rel,
        cfg.channels,
        cfg.merge_channels
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient integrity", gradient_integrity),
        ("hyperbone oracle", hyperbone_oracle),
        ("encoder algebra", encoder_algebra),
        ("attention contracts", attention_contracts),
        ("shape pipeline", shape_pipeline),
        ("tiny overfit", tiny_overfit),
        ("ablation smoke", ablation_smoke),
        ("metrics", metric_suite),
        ("stitching", stitching),
        ("serialization", serialization),
        ("parameter count", parameter_count),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}").into())
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {e}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
