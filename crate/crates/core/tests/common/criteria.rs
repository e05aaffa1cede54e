//! One function per acceptance criterion. Each returns a short summary on
//! success and a description of the first violation on failure.

use std::cell::RefCell;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use unetformer::attention::{
    cross_window_interaction, window_partition, window_reverse, AttentionConfig,
    GlobalLocalAttention, Gltb, LocalBranch, WindowAttention,
};
use unetformer::cli::config::RunConfig;
use unetformer::cli::{Checkpoint, Trainer};
use unetformer::data::tile::{tile_tensor, untile_tensor};
use unetformer::data::{synth_generate, AugmentOps, SynthSpec};
use unetformer::gradcheck::{check_inputs, check_params, random_readout};
use unetformer::network::{
    count_params, estimate_macs, weighted_fuse, Model, ModelConfig, RefinementHead,
};
use unetformer::nn::{Builder, Ctx, Mode};
use unetformer::objective::{cross_entropy, dice_loss, total_loss, ConfusionMatrix, LossConfig};
use unetformer::optim::cosine_lr;
use unetformer::rng::SeedTree;
use unetformer::tensor::{Conv2dSpec, ParamId, ParamKind, PoolAxis};
use unetformer::{Graph, ParamStore, Tensor, Var};

use super::{
    brute_force_tally, dense_window_attention, max_abs_diff, naive_conv2d, rand_tensor, rng,
};

pub type Outcome = Result<String, String>;

fn fail<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

// 1 -------------------------------------------------------------------------

pub const TARGET_PARAMS: f64 = 11.7e6;
pub const TARGET_GMACS_512: f64 = 11.7;
pub const TARGET_GMACS_1024: f64 = 46.9;

pub fn param_count() -> Outcome {
    let n = count_params(&ModelConfig::full(8)).map_err(fail("count_params"))? as f64;
    let rel = (n - TARGET_PARAMS).abs() / TARGET_PARAMS;
    if rel <= 0.10 {
        Ok(format!(
            "{n} parameters ({:+.1}% from 11.7M)",
            100.0 * (n - TARGET_PARAMS) / TARGET_PARAMS
        ))
    } else {
        Err(format!(
            "{n} parameters is {:.1}% away from 11.7M",
            rel * 100.0
        ))
    }
}

// 2 -------------------------------------------------------------------------

pub fn complexity() -> Outcome {
    let cfg = ModelConfig::full(8);
    let g512 = estimate_macs(&cfg, 512, 512).map_err(fail("512"))?;
    let g1024 = estimate_macs(&cfg, 1024, 1024).map_err(fail("1024"))?;
    let ratio = g1024 / g512;
    let within = |v: f64, target: f64| (v - target).abs() <= 0.15 * target;
    if !within(g512, TARGET_GMACS_512) {
        return Err(format!("{g512:.3} GMACs at 512² is outside 11.7 ± 15%"));
    }
    if !within(g1024, TARGET_GMACS_1024) {
        return Err(format!("{g1024:.3} GMACs at 1024² is outside 46.9 ± 15%"));
    }
    if (ratio - 4.0).abs() > 0.05 {
        return Err(format!("1024²/512² ratio {ratio:.4} is not 4.00 ± 0.05"));
    }
    Ok(format!(
        "{g512:.3} G @512², {g1024:.3} G @1024², ratio {ratio:.4}"
    ))
}

// 3 -------------------------------------------------------------------------

pub const GRAD_SEEDS: u64 = 5;
pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

type OpFn = dyn Fn(&Graph<f64>, &[Var<f64>]) -> unetformer::Result<Var<f64>>;

/// Inputs are drawn per seed from `[lo, hi)`; the op output is reduced to a
/// scalar with fixed random weights.
struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, f64, f64)>,
    f: Box<OpFn>,
}

fn case(
    name: &'static str,
    inputs: &[(&[usize], f64, f64)],
    f: impl Fn(&Graph<f64>, &[Var<f64>]) -> unetformer::Result<Var<f64>> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: inputs
            .iter()
            .map(|(s, lo, hi)| (s.to_vec(), *lo, *hi))
            .collect(),
        f: Box::new(f),
    }
}

fn op_cases() -> Vec<OpCase> {
    const S: f64 = 1.0;
    let idx = Rc::new(vec![3usize, 0, 5, 5, 1, 2]);
    vec![
        case(
            "conv2d grouped strided",
            &[
                (&[2, 4, 6, 7], -S, S),
                (&[6, 2, 3, 3], -S, S),
                (&[6], -S, S),
            ],
            |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), Conv2dSpec::new(2, 1, 2)),
        ),
        case(
            "conv2d pointwise",
            &[(&[1, 3, 4, 4], -S, S), (&[5, 3, 1, 1], -S, S)],
            |g, v| g.conv2d(&v[0], &v[1], None, Conv2dSpec::default()),
        ),
        case(
            "batchnorm train",
            &[(&[3, 2, 3, 3], -S, S), (&[2], 0.5, 1.5), (&[2], -S, S)],
            |g, v| {
                let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::ones(&[2]));
                g.batchnorm2d(&v[0], &v[1], &v[2], &mut rm, &mut rv, true, 0.1, 1e-5)
            },
        ),
        case(
            "batchnorm eval",
            &[(&[2, 2, 3, 3], -S, S), (&[2], 0.5, 1.5), (&[2], -S, S)],
            |g, v| {
                let mut rm = Tensor::from_vec(&[2], vec![0.2, -0.1]).unwrap();
                let mut rv = Tensor::from_vec(&[2], vec![0.7, 1.3]).unwrap();
                g.batchnorm2d(&v[0], &v[1], &v[2], &mut rm, &mut rv, false, 0.1, 1e-5)
            },
        ),
        case("max_pool2d", &[(&[1, 2, 6, 6], -S, S)], |g, v| {
            g.max_pool2d(&v[0], 3, 2, 1)
        }),
        case(
            "strip pool horizontal",
            &[(&[1, 2, 5, 6], -S, S)],
            |g, v| g.strip_avg_pool(&v[0], PoolAxis::Horizontal, 3),
        ),
        case(
            "strip pool vertical even",
            &[(&[1, 2, 7, 4], -S, S)],
            |g, v| g.strip_avg_pool(&v[0], PoolAxis::Vertical, 4),
        ),
        case("bilinear upsample", &[(&[1, 2, 3, 4], -S, S)], |g, v| {
            g.bilinear_upsample(&v[0], 2)
        }),
        case(
            "add broadcast",
            &[(&[2, 3, 4], -S, S), (&[1, 3, 1], -S, S)],
            |g, v| g.add(&v[0], &v[1]),
        ),
        case(
            "sub broadcast",
            &[(&[2, 3, 4], -S, S), (&[2, 1, 4], -S, S)],
            |g, v| g.sub(&v[0], &v[1]),
        ),
        case(
            "mul broadcast",
            &[(&[2, 3, 4], -S, S), (&[3, 1], -S, S)],
            |g, v| g.mul(&v[0], &v[1]),
        ),
        case(
            "div broadcast",
            &[(&[2, 3, 4], -S, S), (&[1, 3, 1], 0.5, 2.0)],
            |g, v| g.div(&v[0], &v[1]),
        ),
        case("add_scalar", &[(&[3, 4], -S, S)], |g, v| {
            g.add_scalar(&v[0], 0.3)
        }),
        case("mul_scalar", &[(&[3, 4], -S, S)], |g, v| {
            g.mul_scalar(&v[0], -1.7)
        }),
        case("neg", &[(&[3, 4], -S, S)], |g, v| g.neg(&v[0])),
        case("relu", &[(&[4, 5], -S, S)], |g, v| g.relu(&v[0])),
        case("relu6", &[(&[4, 5], -3.0, 9.0)], |g, v| g.relu6(&v[0])),
        case("sigmoid", &[(&[4, 5], -3.0, 3.0)], |g, v| g.sigmoid(&v[0])),
        case("exp", &[(&[4, 5], -2.0, 2.0)], |g, v| g.exp(&v[0])),
        case("ln", &[(&[4, 5], 0.2, 3.0)], |g, v| g.ln(&v[0])),
        case(
            "matmul batched",
            &[(&[2, 3, 4], -S, S), (&[2, 4, 5], -S, S)],
            |g, v| g.matmul(&v[0], &v[1]),
        ),
        case("softmax", &[(&[2, 4, 3], -2.0, 2.0)], |g, v| {
            g.softmax(&v[0], 1)
        }),
        case("log_softmax", &[(&[2, 4, 3], -2.0, 2.0)], |g, v| {
            g.log_softmax(&v[0], 1)
        }),
        case("sum_all", &[(&[2, 3, 4], -S, S)], |g, v| g.sum_all(&v[0])),
        case("mean_all", &[(&[2, 3, 4], -S, S)], |g, v| g.mean_all(&v[0])),
        case("sum_axis", &[(&[2, 3, 4], -S, S)], |g, v| {
            g.sum_axis(&v[0], 1)
        }),
        case("mean_axis", &[(&[2, 3, 4], -S, S)], |g, v| {
            g.mean_axis(&v[0], 2)
        }),
        case("global_avg_pool", &[(&[2, 3, 4, 5], -S, S)], |g, v| {
            g.global_avg_pool(&v[0])
        }),
        case("reshape", &[(&[2, 3, 4], -S, S)], |g, v| {
            g.reshape(&v[0], &[4, 6])
        }),
        case("permute", &[(&[2, 3, 4], -S, S)], |g, v| {
            g.permute(&v[0], &[2, 0, 1])
        }),
        case(
            "concat",
            &[(&[2, 3, 4], -S, S), (&[2, 2, 4], -S, S)],
            |g, v| g.concat(&[&v[0], &v[1]], 1),
        ),
        case("narrow", &[(&[2, 5, 3], -S, S)], |g, v| {
            g.narrow(&v[0], 1, 1, 3)
        }),
        case("gather", &[(&[2, 3], -S, S)], move |g, v| {
            g.gather(&v[0], Rc::clone(&idx), &[2, 3])
        }),
        case("pad", &[(&[2, 3, 4], -S, S)], |g, v| g.pad(&v[0], 2, 1, 2)),
        case("pad_to", &[(&[1, 2, 3, 3], -S, S)], |g, v| {
            g.pad_to(&v[0], 5, 4)
        }),
        case("crop_to", &[(&[1, 2, 5, 4], -S, S)], |g, v| {
            g.crop_to(&v[0], 3, 3)
        }),
        case("window partition", &[(&[1, 2, 5, 7], -S, S)], |g, v| {
            Ok(window_partition(g, &v[0], 3)?.0)
        }),
        case("window reverse", &[(&[6, 2, 3, 3], -S, S)], |g, v| {
            let probe = g.constant(Tensor::zeros(&[1, 2, 5, 7]));
            let (_, grid) = window_partition(g, &probe, 3)?;
            window_reverse(g, &v[0], &grid)
        }),
        case(
            "weighted fuse",
            &[
                (&[1, 2, 3, 3], -S, S),
                (&[1, 2, 3, 3], -S, S),
                (&[1, 1, 1, 1], 0.1, 0.9),
            ],
            |g, v| weighted_fuse(g, &v[0], &v[1], &v[2]),
        ),
        case("cross entropy", &[(&[2, 3, 2, 2], -2.0, 2.0)], |g, v| {
            cross_entropy(
                g,
                &v[0],
                &[0, 1, 2, 255, 2, 2, 0, 1],
                &LossConfig::default(),
            )
        }),
        case("dice", &[(&[2, 3, 2, 2], -2.0, 2.0)], |g, v| {
            let p = g.softmax(&v[0], 1)?;
            dice_loss(g, &p, &[0, 1, 2, 255, 2, 2, 0, 1], &LossConfig::default())
        }),
        case(
            "total loss",
            &[(&[1, 3, 2, 2], -2.0, 2.0), (&[1, 3, 2, 2], -2.0, 2.0)],
            |g, v| Ok(total_loss(g, &v[0], Some(&v[1]), &[0, 1, 2, 1], &LossConfig::default())?.0),
        ),
    ]
}

/// Worst relative error of `f` over the seeds.
fn check_op(c: &OpCase) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let inputs: Vec<Tensor<f64>> = c
            .inputs
            .iter()
            .map(|(s, lo, hi)| rand_tensor(&mut r, s, *lo, *hi))
            .collect();
        let f = &c.f;
        let report = check_inputs(
            &inputs,
            |g, v| {
                let out = f(g, v)?;
                random_readout(g, &out, &mut rng(1000 + seed))
            },
            FD_STEP,
            None,
            &mut r,
        )
        .map_err(|e| format!("{} seed {seed}: {e}", c.name))?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

type BlockForward<'a> = dyn Fn(&mut Ctx<'_, f64>, &[Var<f64>]) -> unetformer::Result<Var<f64>> + 'a;

/// Checks parameter and input gradients of a parameterised block. `limit`
/// caps the coordinates perturbed per tensor.
fn check_block(
    name: &str,
    seed: u64,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    forward: &BlockForward<'_>,
    limit: Option<usize>,
) -> Result<f64, String> {
    let trainable: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    let mut r = rng(7000 + seed);
    let mut store = store;
    let params = if trainable.is_empty() {
        0.0
    } else {
        check_params(
            &mut store,
            &trainable,
            |g, s| {
                let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let mut ctx = Ctx::new(g, s, Mode::Train);
                let out = forward(&mut ctx, &vars)?;
                random_readout(g, &out, &mut rng(2000 + seed))
            },
            FD_STEP,
            limit,
            &mut r,
        )
        .map_err(|e| format!("{name} params seed {seed}: {e}"))?
        .max_rel_err
    };
    let cell = RefCell::new(store);
    let ins = check_inputs(
        &inputs,
        |g, v| {
            let mut s = cell.borrow_mut();
            let mut ctx = Ctx::new(g, &mut s, Mode::Train);
            let out = forward(&mut ctx, v)?;
            random_readout(g, &out, &mut rng(2000 + seed))
        },
        FD_STEP,
        limit,
        &mut r,
    )
    .map_err(|e| format!("{name} inputs seed {seed}: {e}"))?;
    Ok(params.max(ins.max_rel_err))
}

fn build<M>(
    seed: u64,
    f: impl FnOnce(&mut Builder<'_, f64>) -> unetformer::Result<M>,
) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = SeedTree::new(seed).stream("block");
    let m = f(&mut Builder::new(&mut store, &mut r)).expect("block builds");
    (m, store)
}

fn attn_cfg(c: usize, w: usize, heads: usize) -> AttentionConfig {
    AttentionConfig {
        channels: c,
        window_size: w,
        num_heads: heads,
        ..AttentionConfig::default()
    }
}

fn block_cases(seed: u64) -> Result<Vec<(String, f64)>, String> {
    let mut out = Vec::new();
    let mut r = rng(500 + seed);

    let (m, store) = build(seed, |b| LocalBranch::new(b, "local", 4));
    let x = rand_tensor(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    out.push((
        "local branch".into(),
        check_block(
            "local branch",
            seed,
            store,
            vec![x],
            &|c, v| m.forward(c, &v[0]),
            None,
        )?,
    ));

    for rel in [false, true] {
        let cfg = AttentionConfig {
            relative_position_bias: rel,
            ..attn_cfg(4, 2, 2)
        };
        let (m, store) = build(seed, |b| WindowAttention::new(b, "mhsa", cfg));
        let x = rand_tensor(&mut r, &[1, 4, 4, 5], -1.0, 1.0);
        let name = if rel {
            "window MHSA + rel bias"
        } else {
            "window MHSA"
        };
        out.push((
            name.into(),
            check_block(
                name,
                seed,
                store,
                vec![x],
                &|c, v| m.forward(c, &v[0]),
                None,
            )?,
        ));
    }

    for identity in [false, true] {
        let cfg = AttentionConfig {
            include_identity_term: identity,
            ..attn_cfg(2, 3, 1)
        };
        let name = if identity {
            "interaction + identity"
        } else {
            "interaction"
        };
        let x = rand_tensor(&mut r, &[1, 2, 6, 7], -1.0, 1.0);
        out.push((
            name.into(),
            check_block(
                name,
                seed,
                ParamStore::new(),
                vec![x],
                &move |c, v| cross_window_interaction(c.graph, &v[0], &cfg),
                None,
            )?,
        ));
    }

    let (m, store) = build(seed, |b| {
        GlobalLocalAttention::new(b, "gla", attn_cfg(4, 2, 2))
    });
    let x = rand_tensor(&mut r, &[2, 4, 4, 4], -1.0, 1.0);
    out.push((
        "global-local attention".into(),
        check_block(
            "gla",
            seed,
            store,
            vec![x],
            &|c, v| m.forward(c, &v[0]),
            Some(12),
        )?,
    ));

    let (m, store) = build(seed, |b| Gltb::new(b, "gltb", attn_cfg(8, 2, 2)));
    let x = rand_tensor(&mut r, &[2, 8, 4, 4], -1.0, 1.0);
    out.push((
        "GLTB".into(),
        check_block(
            "GLTB",
            seed,
            store,
            vec![x],
            &|c, v| m.forward(c, &v[0]),
            Some(12),
        )?,
    ));

    let (m, store) = build(seed, |b| RefinementHead::new(b, "frh", 8, 3, true));
    let p1 = rand_tensor(&mut r, &[2, 8, 4, 4], -1.0, 1.0);
    let d2 = rand_tensor(&mut r, &[2, 8, 2, 2], -1.0, 1.0);
    out.push((
        "FRH".into(),
        check_block(
            "FRH",
            seed,
            store,
            vec![p1, d2],
            &|c, v| m.forward(c, &v[0], &v[1]),
            Some(12),
        )?,
    ));
    Ok(out)
}

/// Train-mode total loss (with the auxiliary head) of the tiny network on a
/// `[2, 3, 64, 64]` batch. At 32×32 the deepest stage is 1×1 and batch
/// normalization over two values makes finite differences ill-conditioned.
fn full_model_case(seed: u64) -> Result<f64, String> {
    let model = Model::<f64>::new(ModelConfig::tiny(3), &SeedTree::new(seed))
        .map_err(fail("tiny model"))?;
    let mut r = rng(900 + seed);
    let x = rand_tensor(&mut r, &[2, 3, 64, 64], 0.0, 1.0);
    let target: Vec<u8> = rand_tensor(&mut r, &[2 * 64 * 64], 0.0, 3.0)
        .data()
        .iter()
        .map(|v| *v as u8)
        .collect();
    let net = model.net.clone();
    let loss_cfg = LossConfig::default();
    let forward = move |ctx: &mut Ctx<'_, f64>, v: &[Var<f64>]| -> unetformer::Result<Var<f64>> {
        let out = net.forward(ctx, &v[0])?;
        Ok(total_loss(ctx.graph, &out.logits, out.aux.as_ref(), &target, &loss_cfg)?.0)
    };
    // The loss is already a scalar; undo the readout by checking it directly.
    let trainable: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    let mut store = model.store;
    let mut pick = rng(8000 + seed);
    let params = check_params(
        &mut store,
        &trainable,
        |g, s| {
            let xv = g.constant(x.clone());
            let mut ctx = Ctx::new(g, s, Mode::Train);
            forward(&mut ctx, &[xv])
        },
        FD_STEP,
        Some(2),
        &mut pick,
    )
    .map_err(|e| format!("tiny model params seed {seed}: {e}"))?;
    let cell = RefCell::new(store);
    let ins = check_inputs(
        std::slice::from_ref(&x),
        |g, v| {
            let mut s = cell.borrow_mut();
            let mut ctx = Ctx::new(g, &mut s, Mode::Train);
            forward(&mut ctx, v)
        },
        FD_STEP,
        Some(24),
        &mut pick,
    )
    .map_err(|e| format!("tiny model input seed {seed}: {e}"))?;
    Ok(params.max_rel_err.max(ins.max_rel_err))
}

pub fn gradient_suite() -> Outcome {
    let mut worst = ("", 0.0f64);
    let mut checked = 0;
    let mut record = |name: String, err: f64| -> Result<(), String> {
        checked += 1;
        if err.is_nan() || err >= GRAD_TOL {
            return Err(format!("{name}: relative error {err:.3e} >= {GRAD_TOL:e}"));
        }
        if err > worst.1 {
            worst = (Box::leak(name.into_boxed_str()), err);
        }
        Ok(())
    };
    for c in op_cases() {
        let err = check_op(&c)?;
        record(c.name.to_string(), err)?;
    }
    for seed in 0..GRAD_SEEDS {
        for (name, err) in block_cases(seed)? {
            record(format!("{name} seed {seed}"), err)?;
        }
        record(format!("tiny model seed {seed}"), full_model_case(seed)?)?;
    }
    Ok(format!(
        "{checked} checks over {GRAD_SEEDS} seeds, worst {:.2e} ({})",
        worst.1, worst.0
    ))
}

// 4 -------------------------------------------------------------------------

pub fn oracle_equivalence() -> Outcome {
    let conv = conv_vs_naive()?;
    let attn = attention_vs_dense()?;
    metrics_vs_tally()?;
    Ok(format!(
        "conv max diff {conv:.1e}, window MHSA max diff {attn:.1e}, 1000 metric cases exact"
    ))
}

/// Seed, input shape, weight shape, stride, padding, bias.
type ConvCase = (usize, [usize; 4], [usize; 4], usize, usize, bool);

pub fn conv_vs_naive() -> Result<f64, String> {
    let cases: [ConvCase; 6] = [
        (0, [2, 3, 7, 6], [4, 3, 3, 3], 1, 1, true),
        (1, [1, 4, 9, 9], [6, 2, 3, 3], 2, 1, false),
        (2, [1, 6, 5, 8], [6, 1, 3, 3], 1, 1, true),
        (3, [2, 3, 11, 10], [5, 3, 7, 7], 2, 3, false),
        (4, [1, 5, 4, 4], [7, 5, 1, 1], 1, 0, true),
        (5, [1, 2, 10, 7], [4, 2, 2, 2], 2, 0, true),
    ];
    let mut worst = 0.0f64;
    for (seed, xs, ws, stride, pad, bias) in cases {
        let groups = xs[1] / ws[1];
        let mut r = rng(300 + seed as u64);
        let x = rand_tensor(&mut r, &xs, -1.0, 1.0);
        let w = rand_tensor(&mut r, &ws, -1.0, 1.0);
        let b = rand_tensor(&mut r, &[ws[0]], -1.0, 1.0);
        let g = Graph::no_grad();
        let bv = g.constant(b.clone());
        let got = g
            .conv2d(
                &g.constant(x.clone()),
                &g.constant(w.clone()),
                bias.then_some(&bv),
                Conv2dSpec::new(stride, pad, groups),
            )
            .map_err(fail("conv2d"))?;
        let want = naive_conv2d(&x, &w, bias.then_some(&b), stride, pad, groups);
        if got.shape() != want.shape() {
            return Err(format!(
                "conv case {seed}: shape {:?} vs oracle {:?}",
                got.shape(),
                want.shape()
            ));
        }
        let d = max_abs_diff(got.value().data(), want.data());
        if d.is_nan() || d >= 1e-6 {
            return Err(format!("conv case {seed}: max diff {d:e}"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

pub fn attention_vs_dense() -> Result<f64, String> {
    let cases = [
        ([2, 8, 8, 8], 4, 2, false),
        ([1, 8, 6, 10], 4, 4, false),
        ([1, 6, 7, 5], 3, 3, true),
        ([2, 8, 8, 8], 4, 2, true),
    ];
    let mut worst = 0.0f64;
    for (i, (shape, w, heads, rel)) in cases.into_iter().enumerate() {
        let cfg = AttentionConfig {
            relative_position_bias: rel,
            ..attn_cfg(shape[1], w, heads)
        };
        let (m, mut store) = build(40 + i as u64, |b| WindowAttention::new(b, "mhsa", cfg));
        if let Some(id) = m.rel_bias {
            // widen the learned table so the bias visibly matters
            let t = rand_tensor(&mut rng(60 + i as u64), store.value(id).shape(), -1.0, 1.0);
            *store.value_mut(id) = t;
        }
        let x = rand_tensor(&mut rng(50 + i as u64), &shape, -1.0, 1.0);
        let g = Graph::no_grad();
        let mut ctx = Ctx::new(&g, &mut store, Mode::Eval);
        let got = m
            .forward(&mut ctx, &g.constant(x.clone()))
            .map_err(fail("window attention"))?;
        let table = m.rel_bias.map(|id| store.value(id).clone());
        let want = dense_window_attention(&x, store.value(m.qkv.weight), heads, w, table.as_ref());
        let d = max_abs_diff(got.value().data(), want.data());
        if d.is_nan() || d >= 1e-5 {
            return Err(format!("attention case {i}: max diff {d:e}"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

pub fn metrics_vs_tally() -> Result<(), String> {
    let mut r = rng(77);
    let mut all_pred = Vec::new();
    let mut all_ref = Vec::new();
    let mut merged = ConfusionMatrix::new(6);
    for case in 0..1000 {
        let k = 2 + case % 5;
        let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
            rand_tensor(r, &[64], 0.0, k as f64)
                .data()
                .iter()
                .map(|v| *v as u8)
                .collect()
        };
        let (pred, reference) = (draw(&mut r), draw(&mut r));
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &reference, None)
            .map_err(fail("accumulate"))?;
        let got = cm.compute().map_err(fail("compute"))?;
        let want = brute_force_tally(&pred, &reference, k);
        if (got.oa, &got.f1, &got.iou, got.mean_f1, got.miou)
            != (want.oa, &want.f1, &want.iou, want.mean_f1, want.miou)
        {
            return Err(format!(
                "metrics case {case} (K={k}) differ: {got:?} vs {want:?}"
            ));
        }
        merged
            .accumulate(&pred, &reference, None)
            .map_err(fail("accumulate"))?;
        all_pred.extend(pred);
        all_ref.extend(reference);
    }
    let got = merged.compute().map_err(fail("compute"))?;
    let want = brute_force_tally(&all_pred, &all_ref, 6);
    if (got.oa, &got.f1, &got.iou, got.mean_f1, got.miou)
        != (want.oa, &want.f1, &want.iou, want.mean_f1, want.miou)
    {
        return Err("accumulated metrics differ from the pooled tally".into());
    }
    Ok(())
}

// 5 -------------------------------------------------------------------------

pub fn closed_forms() -> Outcome {
    let g = Graph::<f64>::no_grad();
    let cfg = LossConfig::default();
    for k in [2usize, 5, 8] {
        let logits = g.constant(Tensor::full(&[2, k, 3, 3], 0.37));
        let target: Vec<u8> = (0..18).map(|i| (i % k) as u8).collect();
        let ce = cross_entropy(&g, &logits, &target, &cfg)
            .map_err(fail("ce"))?
            .value()
            .item();
        if (ce - (k as f64).ln()).abs() >= 1e-6 {
            return Err(format!("uniform CE with K={k} is {ce}, expected ln K"));
        }
    }
    let probs = g.constant(Tensor::full(&[1, 2, 1, 3], 0.5));
    let dice = dice_loss(&g, &probs, &[0, 0, 0], &cfg)
        .map_err(fail("dice"))?
        .value()
        .item();
    if (dice - 1.0 / 3.0).abs() >= 1e-6 {
        return Err(format!("hand dice case is {dice}, expected 1/3"));
    }
    let mut r = rng(5);
    let logits = g.constant(rand_tensor(&mut r, &[2, 4, 3, 3], -2.0, 2.0));
    let aux = g.constant(rand_tensor(&mut r, &[2, 4, 3, 3], -2.0, 2.0));
    let target: Vec<u8> = (0..18).map(|i| (i * 7 % 4) as u8).collect();
    let (total, report) =
        total_loss(&g, &logits, Some(&aux), &target, &cfg).map_err(fail("total"))?;
    let ce = cross_entropy(&g, &logits, &target, &cfg)
        .map_err(fail("ce"))?
        .value()
        .item();
    let probs = g.softmax(&logits, 1).map_err(fail("softmax"))?;
    let dice = dice_loss(&g, &probs, &target, &cfg)
        .map_err(fail("dice"))?
        .value()
        .item();
    let aux_ce = cross_entropy(&g, &aux, &target, &cfg)
        .map_err(fail("aux"))?
        .value()
        .item();
    let expected = (ce + dice) + 0.4 * aux_ce;
    if total.value().item() != expected
        || report.total != expected
        || report.principal != ce + dice
        || report.aux != aux_ce
    {
        return Err(format!(
            "total {} != ce + dice + 0.4·aux = {expected}",
            total.value().item()
        ));
    }
    let (base, steps) = (6e-4, 1234);
    let start = cosine_lr(0, steps, base).map_err(fail("lr"))?;
    let end = cosine_lr(steps, steps, base).map_err(fail("lr"))?;
    let mid = cosine_lr(steps / 2, steps, base).map_err(fail("lr"))?;
    if start != base || end != 0.0 || (mid - base / 2.0).abs() > 1e-18 {
        return Err(format!(
            "cosine lr endpoints {start}, {end}, midpoint {mid}"
        ));
    }
    Ok(format!(
        "ln K, dice 1/3, total identity exact, lr {start} → {end}"
    ))
}

// 6 -------------------------------------------------------------------------

pub fn structural_identities() -> Outcome {
    let mut r = rng(6);
    for mode in [Mode::Train, Mode::Eval] {
        let (block, mut store) = build(6, |b| Gltb::new(b, "gltb", attn_cfg(8, 4, 2)));
        block.zero_residual_projections(&mut store);
        let x = rand_tensor(&mut r, &[2, 8, 9, 7], -1.0, 1.0);
        let g = Graph::no_grad();
        let mut ctx = Ctx::new(&g, &mut store, mode);
        let y = block
            .forward(&mut ctx, &g.constant(x.clone()))
            .map_err(fail("gltb"))?;
        if y.value() != &x {
            return Err(format!(
                "zero-projection GLTB is not the identity in {mode:?} mode"
            ));
        }
    }
    let g = Graph::<f64>::no_grad();
    let rf = g.constant(rand_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0));
    let glf = g.constant(rand_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0));
    for (a, want) in [(1.0, &rf), (0.0, &glf)] {
        let got = weighted_fuse(&g, &rf, &glf, &g.constant(Tensor::full(&[1, 1, 1, 1], a)))
            .map_err(fail("fuse"))?;
        if got.value() != want.value() {
            return Err(format!("fusion at alpha = {a} is not exact"));
        }
    }
    for (shape, w) in [([2, 3, 8, 8], 4), ([1, 2, 7, 10], 3), ([1, 1, 5, 5], 8)] {
        let x = g.constant(rand_tensor(&mut r, &shape, -1.0, 1.0));
        let (win, grid) = window_partition(&g, &x, w).map_err(fail("partition"))?;
        let back = window_reverse(&g, &win, &grid).map_err(fail("reverse"))?;
        if back.value() != x.value() {
            return Err(format!(
                "partition/reverse of {shape:?} with w={w} is not exact"
            ));
        }
    }
    for (h, w, t) in [(40, 70, 32), (64, 64, 32), (33, 95, 64)] {
        let x: Tensor<f32> = unetformer::rng::uniform(&mut r, &[3, h, w], 0.0, 1.0);
        let (tiles, layout) = tile_tensor(&x, t, 0.0).map_err(fail("tile"))?;
        let back = untile_tensor(&tiles, &layout).map_err(fail("untile"))?;
        if back != x {
            return Err(format!("tile/untile of {h}x{w} with tile {t} is not exact"));
        }
    }
    checkpoint_round_trip()?;
    Ok(
        "GLTB identity, fusion endpoints, partition and tiling round trips, checkpoint bytes"
            .into(),
    )
}

fn checkpoint_round_trip() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(fail("tempdir"))?;
    let mut cfg = small_run(1, 4);
    cfg.data.synth.count = 4;
    let mut trainer = Trainer::new(cfg).map_err(fail("trainer"))?;
    trainer.step().map_err(fail("step"))?;
    let ck = trainer.checkpoint();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).map_err(fail("save"))?;
    let loaded = Checkpoint::load(&a).map_err(fail("load"))?;
    loaded.save(&b).map_err(fail("save"))?;
    let (ba, bb) = (
        fs::read(&a).map_err(fail("read"))?,
        fs::read(&b).map_err(fail("read"))?,
    );
    if ba != bb || loaded != ck {
        return Err("checkpoint save → load → save is not byte-identical".into());
    }
    Ok(())
}

// 7 -------------------------------------------------------------------------

/// Output change in window (0, 1) after perturbing every pixel of window
/// (0, 0), for the window-context path and for the whole attention module
/// (eval mode, columns beyond the reach of the local convolutions).
pub fn propagation(interaction: bool) -> Result<(f64, f64), String> {
    let w = 8;
    let cfg = AttentionConfig {
        cross_window_interaction: interaction,
        ..attn_cfg(8, w, 2)
    };
    let (gla, mut store) = build(70, |b| GlobalLocalAttention::new(b, "gla", cfg));
    let mut r = rng(71);
    let x = rand_tensor(&mut r, &[1, 8, 16, 24], -1.0, 1.0);
    let mut y = x.clone();
    for c in 0..8 {
        for i in 0..w {
            for j in 0..w {
                let v = y.at(&[0, c, i, j]);
                y.set(&[0, c, i, j], v + 0.5 + 0.1 * (i + j) as f64);
            }
        }
    }
    let g = Graph::no_grad();
    let context = |t: &Tensor<f64>,
                   store: &mut ParamStore<f64>|
     -> unetformer::Result<(Tensor<f64>, Tensor<f64>)> {
        let mut ctx = Ctx::new(&g, store, Mode::Eval);
        let v = g.constant(t.clone());
        let wc = gla.global.forward(&mut ctx, &v)?;
        let mixed = cross_window_interaction(&g, &wc, &cfg)?;
        let full = gla.forward(&mut ctx, &v)?;
        Ok((mixed.into_tensor(), full.into_tensor()))
    };
    let (m0, f0) = context(&x, &mut store).map_err(fail("forward"))?;
    let (m1, f1) = context(&y, &mut store).map_err(fail("forward"))?;
    let delta = |a: &Tensor<f64>, b: &Tensor<f64>, x_from: usize| {
        let mut d = 0.0f64;
        for c in 0..8 {
            for i in 0..w {
                for j in x_from..2 * w {
                    d = d.max((a.at(&[0, c, i, j]) - b.at(&[0, c, i, j])).abs());
                }
            }
        }
        d
    };
    // local 3×3 conv then depthwise 3×3 reach two columns past the window
    Ok((delta(&m0, &m1, w), delta(&f0, &f1, w + 2)))
}

pub fn cross_window() -> Outcome {
    let (on_ctx, on_full) = propagation(true)?;
    let (off_ctx, off_full) = propagation(false)?;
    if !(on_ctx > 0.0 && on_full > 0.0) {
        return Err(format!(
            "interaction on: neighbour change {on_ctx:e} / {on_full:e}, expected > 0"
        ));
    }
    if off_ctx != 0.0 || off_full != 0.0 {
        return Err(format!(
            "interaction off: neighbour change {off_ctx:e} / {off_full:e}, expected 0"
        ));
    }
    Ok(format!(
        "on: Δ {on_ctx:.2e} (context) {on_full:.2e} (module); off: exactly 0"
    ))
}

// 8 -------------------------------------------------------------------------

/// Tiny preset on `count` synthetic 64×64 scenes, no augmentation.
pub fn small_run(epochs: u64, batch: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synth = SynthSpec::default();
    cfg.data.augment = AugmentOps::none();
    cfg.schedule.epochs = epochs;
    cfg.schedule.batch_size = batch;
    cfg
}

pub const OVERFIT_STEPS: u64 = 500;
pub const OVERFIT_MIOU: f64 = 0.95;

/// Step totals from a `train_log.jsonl`.
pub fn logged_losses(path: &Path) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(fail("log"))?;
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).map_err(fail("log line")))
        .filter(|v| v.as_ref().map_or(true, |v| v["kind"] == "step"))
        .map(|v| {
            v.and_then(|v| {
                v["total"]
                    .as_f64()
                    .ok_or_else(|| "step without total".to_string())
            })
        })
        .collect()
}

/// Means of consecutive 10-step windows.
pub fn smoothed(losses: &[f64]) -> Vec<f64> {
    losses
        .chunks_exact(10)
        .map(|c| c.iter().sum::<f64>() / 10.0)
        .collect()
}

pub fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail("tempdir"))?;
    let mut cfg = small_run(OVERFIT_STEPS, 8);
    cfg.schedule.eval_every = OVERFIT_STEPS;
    let mut trainer = Trainer::new(cfg).map_err(fail("trainer"))?;
    if trainer.total_steps() > OVERFIT_STEPS {
        return Err(format!("schedule has {} steps", trainer.total_steps()));
    }
    let records = trainer.run(dir.path(), None).map_err(fail("train"))?;
    let miou = records
        .last()
        .and_then(|r| r.metrics.as_ref())
        .and_then(|m| m.miou)
        .ok_or("no final metrics")?;
    let losses = logged_losses(&dir.path().join("train_log.jsonl"))?;
    let early = smoothed(&losses[..50]);
    if let Some(i) = early.windows(2).position(|p| p[1] >= p[0]) {
        return Err(format!(
            "smoothed loss rose between windows {i} and {}: {early:?}",
            i + 1
        ));
    }
    if miou < OVERFIT_MIOU {
        return Err(format!(
            "train mIoU {miou:.4} after {} steps is below {OVERFIT_MIOU}",
            losses.len()
        ));
    }
    Ok(format!(
        "train mIoU {miou:.4} after {} steps; smoothed early loss {early:.3?}",
        losses.len()
    ))
}

// 9 -------------------------------------------------------------------------

pub struct Variant {
    pub interaction: bool,
    pub frh: bool,
    pub params: u64,
}

/// Builds and trains one step for every toggle combination; returns the
/// full-preset parameter count of each.
pub fn ablation_variants() -> Result<Vec<Variant>, String> {
    let mut out = Vec::new();
    for interaction in [false, true] {
        for frh in [false, true] {
            let toggle = |mut m: ModelConfig| {
                m.attention.cross_window_interaction = interaction;
                m.use_frh = frh;
                m
            };
            let mut cfg = small_run(1, 2);
            cfg.model = toggle(ModelConfig::tiny(5));
            cfg.data.synth.count = 2;
            let mut trainer = Trainer::new(cfg).map_err(fail("variant trainer"))?;
            let step = trainer.step().map_err(fail("variant step"))?;
            if !step.loss.total.is_finite() {
                return Err(format!(
                    "variant interaction={interaction} frh={frh}: non-finite loss"
                ));
            }
            let full = toggle(ModelConfig::full(8));
            let params = count_params(&full).map_err(fail("count"))?;
            let built = Model::<f32>::new(full, &SeedTree::new(0)).map_err(fail("build"))?;
            if built.store.num_trainable() as u64 != params {
                return Err(format!(
                    "analytic count {params} != built {}",
                    built.store.num_trainable()
                ));
            }
            out.push(Variant {
                interaction,
                frh,
                params,
            });
        }
    }
    Ok(out)
}

pub fn ablation() -> Outcome {
    let v = ablation_variants()?;
    let p = |i: bool, f: bool| {
        v.iter()
            .find(|x| x.interaction == i && x.frh == f)
            .map(|x| x.params)
            .expect("variant")
    };
    let table = format!(
        "base {} | +interaction {} | +FRH {} | both {}",
        p(false, false),
        p(true, false),
        p(false, true),
        p(true, true)
    );
    let mut broken = Vec::new();
    for (lo, hi, what) in [
        ((false, false), (true, false), "interaction over base"),
        ((false, true), (true, true), "interaction over FRH"),
        ((false, false), (false, true), "FRH over base"),
        ((true, false), (true, true), "FRH over interaction"),
    ] {
        if p(hi.0, hi.1) <= p(lo.0, lo.1) {
            broken.push(what);
        }
    }
    if broken.is_empty() {
        Ok(table)
    } else {
        Err(format!(
            "all four variants train, but counts are not strictly ordered ({}): {table}",
            broken.join(", ")
        ))
    }
}

// 10 ------------------------------------------------------------------------

pub fn determinism() -> Outcome {
    let mut cfg = small_run(3, 4);
    cfg.data.augment = AugmentOps::default();
    cfg.seed = 11;
    let probe = synth_generate(&SynthSpec {
        seed: 99,
        count: 1,
        ..SynthSpec::default()
    })
    .map_err(fail("probe"))?;
    let image = probe[0]
        .image
        .clone()
        .reshaped(&[1, 3, 64, 64])
        .map_err(fail("probe"))?;
    let mut artifacts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(fail("tempdir"))?;
        let mut trainer = Trainer::new(cfg.clone()).map_err(fail("trainer"))?;
        trainer.run(dir.path(), None).map_err(fail("train"))?;
        let logits = trainer.model.predict(&image).map_err(fail("predict"))?;
        let read = |name: &str| fs::read(dir.path().join(name)).map_err(fail("read"));
        artifacts.push((
            read("train_log.jsonl")?,
            read("last.ckpt")?,
            read("best.ckpt")?,
            logits,
        ));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for (same, what) in [
        (a.0 == b.0, "train_log.jsonl"),
        (a.1 == b.1, "last.ckpt"),
        (a.2 == b.2, "best.ckpt"),
        (bits(&a.3) == bits(&b.3), "logits"),
    ] {
        if !same {
            return Err(format!(
                "{what} differs between two runs with the same seed"
            ));
        }
    }
    Ok(format!(
        "log ({} bytes), checkpoints ({} bytes) and logits bit-identical",
        a.0.len(),
        a.1.len()
    ))
}

// ---------------------------------------------------------------------------

pub type Criterion = (u32, &'static str, fn() -> Outcome);

pub const ALL: [Criterion; 10] = [
    (1, "parameter count", param_count),
    (2, "complexity", complexity),
    (3, "gradient suite", gradient_suite),
    (4, "oracle equivalence", oracle_equivalence),
    (5, "closed forms", closed_forms),
    (6, "structural identities", structural_identities),
    (7, "cross-window propagation", cross_window),
    (8, "end-to-end overfit", overfit),
    (9, "ablation toggles", ablation),
    (10, "determinism", determinism),
];
