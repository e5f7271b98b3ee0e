//! The full gradient-check suite: every primitive layer, every network
//! block, and the whole training graph of a small network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{mul, sum, Tape, Var};
use crate::data::generate_phantom;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::loss::{dice_loss, focal_loss, hybrid_loss, LossConfig};
use crate::model::blocks::{Block, Context, Forward, Fusion, GeLayer, Head, Shallow, Stem};
use crate::model::{count_parameters, Csdn, ForwardOptions, NetworkConfig, ParamKind, ParameterStore};
use crate::nn::{
    batchnorm2d, concat_channels, conv2d, depthwise_conv2d, global_avg_pool, pixel_shuffle, pixel_unshuffle, pool2d,
    prelu, resize, sigmoid, BatchNormConfig, ConvSpec, NormMode, PoolKind, PoolSpec, ResizeMode, RunningStats,
};
use crate::tensor::Tensor;

use super::{numeric_gradient, scale_floor, score, GradCheckReport, DEFAULT_STEP};

/// The full loss sums thousands of pixels, so a 1e-6 step leaves rounding
/// noise near 1e-4 relative, while 1e-4 steps across activation kinks.
/// Every parameter is differenced, the input only on a lattice.
const END_TO_END_PROBE: Probe = Probe { step: 1e-5, input_stride: 8 };

/// Largest network the end-to-end check accepts.
pub const MAX_SUITE_PARAMS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub tol: f64,
    /// Input side for the end-to-end check.
    pub size: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { tol: 1e-4, size: 64, seed: 0 }
    }
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element carries a
/// distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(tape.shape(y).dims(), &mut rng);
    let rv = tape.constant(r);
    let p = mul(tape, y, rv)?;
    sum(tape, p)
}

/// Checks the gradient of `f` with respect to each of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut sides = Vec::with_capacity(vars.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape())).into_vec();
        let numeric = numeric_gradient(
            analytic.len(),
            |i, delta| {
                let orig = probe[k].data()[i];
                probe[k].data_mut()[i] = orig + delta;
                let mut t = Tape::inference();
                let vs: Vec<Var> = probe.iter().map(|p| t.constant(p.clone())).collect();
                let out = f(&mut t, &vs).map(|o| t.value(o).data()[0]);
                probe[k].data_mut()[i] = orig;
                out
            },
            DEFAULT_STEP,
        )?;
        sides.push((analytic, numeric));
    }
    let floor = scale_floor(sides.iter().map(|(a, n)| (a.as_slice(), n.as_slice())));
    sides
        .iter()
        .map(|(a, n)| score(a, n, floor, tol))
        .reduce(GradCheckReport::merge)
        .ok_or_else(|| Error::invalid("no inputs to check"))
}

/// Finite-difference settings for [`check_store`].
#[derive(Clone, Copy, Debug)]
struct Probe {
    step: f64,
    /// Only every `input_stride`-th input element is differenced.
    input_stride: usize,
}

impl Probe {
    const FULL: Probe = Probe { step: DEFAULT_STEP, input_stride: 1 };
}

/// Gradient check over every learnable tensor of `store` and the input `x`,
/// grouping results by `group(name)`. `eval` builds the scalar output.
fn check_store<F>(
    store: &mut ParameterStore<f64>,
    x: &Tensor<f64>,
    eval: F,
    group: impl Fn(&str) -> String,
    tol: f64,
    probe: Probe,
) -> Result<Vec<CheckResult>>
where
    F: Fn(&ParameterStore<f64>, &mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = eval(store, &mut tape, xv)?;
    let grads = tape.backward(out)?;
    let input_grad = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let named = grads.into_named();

    let value_at = |store: &ParameterStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let xv = t.constant(x.clone());
        let o = eval(store, &mut t, xv)?;
        Ok(t.value(o).data()[0])
    };

    let mut sides: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let names: Vec<String> = store.learnable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = store.get(&name)?.shape();
        let analytic = named.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(shape)).into_vec();
        let numeric = numeric_gradient(
            analytic.len(),
            |i, delta| {
                let orig = store.get(&name)?.data()[i];
                store.get_mut(&name)?.data_mut()[i] = orig + delta;
                let v = value_at(store, x);
                store.get_mut(&name)?.data_mut()[i] = orig;
                v
            },
            probe.step,
        )?;
        sides.push((group(&name), analytic, numeric));
    }
    let picked: Vec<usize> = (0..input_grad.len()).step_by(probe.input_stride.max(1)).collect();
    let mut moved = x.clone();
    let numeric = numeric_gradient(
        picked.len(),
        |k, delta| {
            let i = picked[k];
            let orig = moved.data()[i];
            moved.data_mut()[i] = orig + delta;
            let v = value_at(store, &moved);
            moved.data_mut()[i] = orig;
            v
        },
        probe.step,
    )?;
    let analytic = picked.iter().map(|&i| input_grad.data()[i]).collect();
    sides.push(("input".to_string(), analytic, numeric));

    let floor = scale_floor(sides.iter().map(|(_, a, n)| (a.as_slice(), n.as_slice())));
    let mut groups: Vec<CheckResult> = Vec::new();
    for (name, a, n) in &sides {
        let r = score(a, n, floor, tol);
        match groups.iter_mut().find(|g| &g.name == name) {
            Some(g) => g.report = g.report.clone().merge(r),
            None => groups.push(CheckResult { name: name.clone(), report: r }),
        }
    }
    Ok(groups)
}

/// Moves every learnable non-kernel tensor off its initial constant so the
/// check does not sit at a special point (unit gammas, zero biases).
fn jitter(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, e) in store.iter_mut() {
        if e.kind.learnable() && e.kind != ParamKind::ConvWeight {
            for v in e.value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
}

fn layer_checks(tol: f64, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        let report = check_inputs(&inputs, f, tol)?;
        out.push(CheckResult { name: name.to_string(), report });
        Ok(())
    };
    let seed = 11;

    let spec = ConvSpec::k3(3, 4, 1).with_bias();
    run("conv3x3", vec![random([2, 3, 6, 6], rng), random([4, 3, 3, 3], rng), random([1, 4, 1, 1], rng)], &|t, v| {
        let y = conv2d(t, v[0], v[1], Some(v[2]), &spec)?;
        project(t, y, seed)
    })?;
    let spec_s2 = ConvSpec::k3(3, 4, 2);
    run("conv3x3_stride2", vec![random([2, 3, 7, 7], rng), random([4, 3, 3, 3], rng)], &|t, v| {
        let y = conv2d(t, v[0], v[1], None, &spec_s2)?;
        project(t, y, seed)
    })?;
    let spec_1 = ConvSpec::k1(5, 3).with_bias();
    run("conv1x1", vec![random([2, 5, 4, 4], rng), random([3, 5, 1, 1], rng), random([1, 3, 1, 1], rng)], &|t, v| {
        let y = conv2d(t, v[0], v[1], Some(v[2]), &spec_1)?;
        project(t, y, seed)
    })?;
    for stride in [1, 2] {
        let dw = ConvSpec::depthwise(4, 3, stride, 1);
        run(&format!("depthwise3x3_stride{}", stride), vec![random([2, 4, 6, 6], rng), random([4, 1, 3, 3], rng)], &|t, v| {
            let y = depthwise_conv2d(t, v[0], v[1], None, &dw)?;
            project(t, y, seed)
        })?;
    }
    let gamma = Tensor::from_fn([1, 3, 1, 1], |_, c, _, _| 1.0 + 0.2 * c as f64);
    for (name, mode) in [("batchnorm_train", NormMode::Train), ("batchnorm_eval", NormMode::Eval)] {
        let stats = RunningStats { mean: random([1, 3, 1, 1], rng), var: Tensor::full([1, 3, 1, 1], 1.5) };
        run(name, vec![random([2, 3, 4, 4], rng), gamma.clone(), random([1, 3, 1, 1], rng)], &|t, v| {
            let (y, _) = batchnorm2d(t, v[0], v[1], v[2], &stats, mode, BatchNormConfig::default())?;
            project(t, y, seed)
        })?;
    }
    run("prelu", vec![random([2, 3, 4, 4], rng), Tensor::full([1, 3, 1, 1], 0.25)], &|t, v| {
        let y = prelu(t, v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("sigmoid", vec![random([2, 3, 4, 4], rng).map(|v| 3.0 * v)], &|t, v| {
        let y = sigmoid(t, v[0])?;
        project(t, y, seed)
    })?;
    for (name, kind) in [("maxpool3x3_stride2", PoolKind::Max), ("avgpool3x3_stride2", PoolKind::Avg)] {
        run(name, vec![random([2, 3, 7, 7], rng)], &|t, v| {
            let y = pool2d(t, v[0], PoolSpec::new(kind, 3, 2, 1))?;
            project(t, y, seed)
        })?;
    }
    run("global_avg_pool", vec![random([2, 3, 5, 4], rng)], &|t, v| {
        let y = global_avg_pool(t, v[0])?;
        project(t, y, seed)
    })?;
    for (name, mode, h, w) in [
        ("resize_bilinear_up", ResizeMode::Bilinear, 9, 7),
        ("resize_bilinear_down", ResizeMode::Bilinear, 3, 2),
        ("resize_bicubic_down", ResizeMode::Bicubic, 3, 3),
    ] {
        run(name, vec![random([1, 2, 6, 6], rng)], &|t, v| {
            let y = resize(t, v[0], h, w, mode)?;
            project(t, y, seed)
        })?;
    }
    run("pixel_unshuffle", vec![random([1, 2, 4, 6], rng)], &|t, v| {
        let y = pixel_unshuffle(t, v[0], 2)?;
        project(t, y, seed)
    })?;
    run("pixel_shuffle", vec![random([1, 8, 2, 3], rng)], &|t, v| {
        let y = pixel_shuffle(t, v[0], 2)?;
        project(t, y, seed)
    })?;
    run("concat", vec![random([2, 2, 3, 3], rng), random([2, 3, 3, 3], rng)], &|t, v| {
        let y = concat_channels(t, &[v[0], v[1]])?;
        project(t, y, seed)
    })?;

    let labels = LabelMap::new(2, 3, 3, (0..18).map(|_| rng.random_range(0..3u8)).collect())?;
    let cfg = LossConfig { focal_alpha: Some(vec![0.2, 0.3, 0.5]), ..LossConfig::default() };
    run("focal_loss", vec![random([2, 3, 3, 3], rng).map(|v| 2.0 * v)], &|t, v| focal_loss(t, v[0], &labels, &cfg))?;
    run("dice_loss", vec![random([2, 3, 3, 3], rng).map(|v| 2.0 * v)], &|t, v| dice_loss(t, v[0], &labels, &cfg))?;
    let aux_cfg = LossConfig::default();
    run("hybrid_loss", vec![random([2, 3, 3, 3], rng), random([2, 3, 3, 3], rng)], &|t, v| {
        hybrid_loss(t, v[0], &[v[1]], &labels, &aux_cfg)
    })?;
    Ok(out)
}

fn block_check(
    name: &str,
    block: &impl Block,
    x: Tensor<f64>,
    f: impl Fn(&mut Forward<'_, f64>, Var) -> Result<Var>,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let mut store = ParameterStore::new();
    block.declare(&mut store, rng)?;
    jitter(&mut store, rng);
    let opts = ForwardOptions::train();
    let groups = check_store(
        &mut store,
        &x,
        |s, tape, xv| {
            let mut fw = Forward::new(tape, s, opts);
            let y = f(&mut fw, xv)?;
            project(fw.tape, y, 3)
        },
        |_| name.to_string(),
        tol,
        Probe::FULL,
    )?;
    let report = groups.into_iter().map(|g| g.report).reduce(GradCheckReport::merge).expect("input group always present");
    Ok(CheckResult { name: name.to_string(), report })
}

fn block_checks(cfg: &NetworkConfig, tol: f64, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let c = cfg.downsampled_channels();
    let (sc, gc, e) = (cfg.shallow_channels, cfg.ge_stage_channels, cfg.ge_expansion);
    let mut out = Vec::new();

    // Large enough that the last stage still has several values per channel.
    let shallow = Shallow::new(c, sc);
    let x = random([2, c, 16, 16], rng);
    out.push(block_check("block.shallow", &shallow, x, |f, x| shallow.forward(f, x), tol, rng)?);

    let stem = Stem::new(c, cfg.stem_channels);
    let x = random([2, c, 8, 8], rng);
    out.push(block_check("block.stem", &stem, x, |f, x| stem.forward(f, x), tol, rng)?);

    let ge1 = GeLayer::stride1("ge", gc[0], e);
    let x = random([2, gc[0], 4, 4], rng);
    out.push(block_check("block.ge_stride1", &ge1, x, |f, x| ge1.forward(f, x), tol, rng)?);

    let ge2 = GeLayer::stride2("ge", gc[0], gc[1], e);
    let x = random([2, gc[0], 4, 4], rng);
    out.push(block_check("block.ge_stride2", &ge2, x, |f, x| ge2.forward(f, x), tol, rng)?);

    let ctx = Context::new(gc[2]);
    let x = random([2, gc[2], 2, 2], rng);
    out.push(block_check("block.context", &ctx, x, |f, x| ctx.forward(f, x), tol, rng)?);

    // The fusion block takes two inputs; the semantic map is a fixed
    // constant here and the detail map is checked.
    let fc = cfg.fusion_channels;
    let fusion = Fusion::new(fc);
    let semantic = random([2, fc, 1, 1], rng);
    let x = random([2, fc, 4, 4], rng);
    out.push(block_check(
        "block.fusion",
        &fusion,
        x,
        |f, x| {
            let s = f.tape.constant(semantic.clone());
            fusion.forward(f, x, s)
        },
        tol,
        rng,
    )?);

    let head = Head::main(fc, cfg.head_channels, cfg.num_classes);
    let x = random([2, fc, 4, 4], rng);
    out.push(block_check("block.head", &head, x, |f, x| head.forward(f, x, 16, 16), tol, rng)?);
    Ok(out)
}

/// Parameter group of a stored tensor: `deep.<part>` for the semantic
/// stream, the first path component otherwise.
fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or(name);
    match (first, parts.next()) {
        ("deep", Some(second)) => format!("network.deep.{}", second),
        _ => format!("network.{}", first),
    }
}

/// End-to-end check of the training graph (main and auxiliary heads, hybrid
/// loss) at `1 × frames × size × size`. Batch norm uses running statistics:
/// with one image the deepest maps have a single value per channel.
pub fn end_to_end(cfg: &NetworkConfig, opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    check_size(cfg)?;
    cfg.check_input(opts.size, opts.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = Csdn::<f64>::new(cfg.clone(), opts.seed)?;
    jitter(net.params_mut(), &mut rng);
    let sample = generate_phantom(opts.seed, opts.size)?;
    let frames: Tensor<f64> = sample.frames.cast();
    let labels = sample.label;
    let loss_cfg = LossConfig::default();
    let fwd = ForwardOptions { aux_heads: true, bn_batch_stats: false };
    let arch_cfg = net.config().clone();
    let mut store = net.params().clone();
    check_store(
        &mut store,
        &frames,
        |s, tape, x| {
            let model = Csdn::from_parts(arch_cfg.clone(), s.clone())?;
            let (out, _) = model.forward(tape, x, fwd)?;
            hybrid_loss(tape, out.main, &out.aux, &labels, &loss_cfg)
        },
        group_of,
        opts.tol,
        END_TO_END_PROBE,
    )
}

fn check_size(cfg: &NetworkConfig) -> Result<()> {
    let params = count_parameters(cfg)?;
    if params > MAX_SUITE_PARAMS {
        return Err(Error::invalid(format!(
            "gradient check needs a network with at most {} parameters; this config has {}",
            MAX_SUITE_PARAMS, params
        )));
    }
    Ok(())
}

/// Every primitive layer and every block of `cfg`, without the end-to-end
/// graph.
pub fn component_checks(cfg: &NetworkConfig, opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    check_size(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut all = layer_checks(opts.tol, &mut rng)?;
    all.extend(block_checks(cfg, opts.tol, &mut rng)?);
    Ok(all)
}

/// Layers, blocks, then the end-to-end graph. `progress` sees each result
/// as it completes.
pub fn run_suite(cfg: &NetworkConfig, opts: &SuiteOptions, mut progress: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut all = component_checks(cfg, opts)?;
    all.iter().for_each(&mut progress);
    for r in end_to_end(cfg, opts)? {
        progress(&r);
        all.push(r);
    }
    Ok(all)
}
