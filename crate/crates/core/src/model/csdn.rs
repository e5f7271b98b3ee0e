use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::{ConvSpec, RunningStats};
use crate::tensor::{Scalar, Tensor};

use super::blocks::{downsample, Block, Context, Forward, ForwardOptions, Fusion, GeLayer, Head, Shallow, Stem, Unit};
use super::config::NetworkConfig;
use super::params::ParameterStore;

/// Every block of the network, in forward order.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub shallow: Shallow,
    pub stem: Stem,
    /// GE stages 3, 4 and 5; the first layer of each is strided.
    pub stages: Vec<Vec<GeLayer>>,
    pub context: Context,
    /// 1×1 conv + BN bringing each stream to the fusion width when needed.
    pub detail_proj: Option<Unit>,
    pub semantic_proj: Option<Unit>,
    pub fusion: Fusion,
    pub head: Head,
    /// One head per deep tap: stem, stage 3, stage 4, stage 5.
    pub aux: Vec<Head>,
}

impl Architecture {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.downsampled_channels();
        let e = cfg.ge_expansion;
        let mut stages = Vec::with_capacity(3);
        let mut cin = cfg.stem_channels;
        for (s, (&c, &layers)) in cfg.ge_stage_channels.iter().zip(&cfg.ge_layers).enumerate() {
            let prefix = format!("deep.stage{}", s + 3);
            let mut stage = vec![GeLayer::stride2(&format!("{}.ge0", prefix), cin, c, e)];
            for l in 1..layers {
                stage.push(GeLayer::stride1(&format!("{}.ge{}", prefix, l), c, e));
            }
            stages.push(stage);
            cin = c;
        }
        let f = cfg.fusion_channels;
        let proj = |name: &str, c: usize| (c != f).then(|| Unit::conv_bn(name, ConvSpec::k1(c, f)));
        let tap_channels = [cfg.stem_channels, cfg.ge_stage_channels[0], cfg.ge_stage_channels[1], cfg.ge_stage_channels[2]];
        Ok(Architecture {
            shallow: Shallow::new(c0, cfg.shallow_channels),
            stem: Stem::new(c0, cfg.stem_channels),
            stages,
            context: Context::new(cin),
            detail_proj: proj("fusion.detail_proj", cfg.shallow_channels[2]),
            semantic_proj: proj("fusion.semantic_proj", cin),
            fusion: Fusion::new(f),
            head: Head::main(f, cfg.head_channels, cfg.num_classes),
            aux: tap_channels.iter().enumerate().map(|(i, &c)| Head::aux(i, c, cfg.aux_channels, cfg.num_classes)).collect(),
        })
    }

    pub fn units(&self) -> Vec<&Unit> {
        let mut u = self.shallow.units();
        u.extend(self.stem.units());
        for layer in self.stages.iter().flatten() {
            u.extend(layer.units());
        }
        u.extend(self.context.units());
        u.extend(self.detail_proj.iter());
        u.extend(self.semantic_proj.iter());
        u.extend(self.fusion.units());
        u.extend(self.head.units());
        for h in &self.aux {
            u.extend(h.units());
        }
        u
    }

    pub fn num_params(&self) -> usize {
        self.units().iter().map(|u| u.num_params()).sum()
    }
}

/// Learnable scalars of a network built from `cfg`, auxiliary heads included.
pub fn count_parameters(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Architecture::new(cfg)?.num_params())
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub downsampled: Var,
    pub detail: Var,
    /// Stem, stage 3, stage 4 and stage 5 outputs.
    pub taps: Vec<Var>,
    pub semantic: Var,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct CsdnOutput {
    /// Logits at input resolution.
    pub main: Var,
    /// Deep-supervision logits at input resolution; empty unless requested.
    pub aux: Vec<Var>,
    pub trace: Trace,
}

/// Running-statistics updates from a train-mode pass, keyed by BN prefix.
pub type BnUpdates<T> = Vec<(String, RunningStats<T>)>;

/// The two-stream segmentation network with its parameters.
#[derive(Clone, Debug)]
pub struct Csdn<T: Scalar> {
    config: NetworkConfig,
    arch: Architecture,
    params: ParameterStore<T>,
}

impl<T: Scalar> Csdn<T> {
    /// Freshly initialized network; identical seeds give identical weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for u in arch.units() {
            u.declare(&mut params, &mut rng)?;
        }
        Ok(Csdn { config, arch, params })
    }

    /// Network with the given parameters, which must match `config` exactly.
    pub fn from_parts(config: NetworkConfig, params: ParameterStore<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_learnable()
    }

    pub fn cast<U: Scalar>(&self) -> Csdn<U> {
        Csdn { config: self.config.clone(), arch: self.arch.clone(), params: self.params.cast() }
    }

    /// Records the network on `tape`. `x` is `(n, in_frames, H, W)` with `H`
    /// and `W` multiples of 64.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<(CsdnOutput, BnUpdates<T>)> {
        let s = tape.shape(x);
        if s.c != self.config.in_frames {
            return Err(Error::shape(format!("expected {} input frames, got {}", self.config.in_frames, s.c)));
        }
        self.config.check_input(s.h, s.w)?;
        let a = &self.arch;
        let mut f = Forward::new(tape, &self.params, opts);

        let down = downsample(f.tape, x, self.config.downsample_r)?;
        let detail = a.shallow.forward(&mut f, down)?;

        let mut y = a.stem.forward(&mut f, down)?;
        let mut taps = vec![y];
        for stage in &a.stages {
            for layer in stage {
                y = layer.forward(&mut f, y)?;
            }
            taps.push(y);
        }
        let semantic = a.context.forward(&mut f, y)?;

        let d = match &a.detail_proj {
            Some(p) => p.forward(&mut f, detail)?,
            None => detail,
        };
        let sem = match &a.semantic_proj {
            Some(p) => p.forward(&mut f, semantic)?,
            None => semantic,
        };
        let fused = a.fusion.forward(&mut f, d, sem)?;
        let main = a.head.forward(&mut f, fused, s.h, s.w)?;

        let mut aux = Vec::new();
        if opts.aux_heads {
            for (head, &tap) in a.aux.iter().zip(&taps) {
                aux.push(head.forward(&mut f, tap, s.h, s.w)?);
            }
        }
        let trace = Trace { downsampled: down, detail, taps, semantic, fused };
        Ok((CsdnOutput { main, aux, trace }, f.into_updates()))
    }

    pub fn apply_bn_updates(&mut self, updates: BnUpdates<T>) -> Result<()> {
        for (prefix, stats) in updates {
            self.params.set(&format!("{}.running_mean", prefix), stats.mean)?;
            self.params.set(&format!("{}.running_var", prefix), stats.var)?;
        }
        Ok(())
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (out, _) = self.forward(&mut tape, xv, ForwardOptions::eval())?;
        Ok(tape.value(out.main).clone())
    }

    /// Eval-mode per-pixel class predictions.
    pub fn predict_labels(&self, x: &Tensor<T>) -> Result<LabelMap> {
        Ok(LabelMap::argmax(&self.predict(x)?))
    }
}
