//! The assembled network: compensation, encoder, filtered skips, curve
//! proposals and the alternating decoder.

use a2o_tensor::{Bound, Graph, ParamSet, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::asco;
use crate::curve::{self, MinMode, Proposals, M, NUM_CLASSES};
use crate::fosf::{self, FosfMaps, GaborBank};
use crate::illumination::{self, Compensation};
use crate::nn::{self, Init};
use crate::{Error, Result};

/// Which blocks and loss terms are active. The five ablation rows switch
/// these on one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub ifc: bool,
    pub illum_loss: bool,
    pub fosf: bool,
    pub asco: bool,
    pub curve_loss: bool,
}

impl Components {
    pub const FULL: Self = Self {
        ifc: true,
        illum_loss: true,
        fosf: true,
        asco: true,
        curve_loss: true,
    };

    /// Ablation row `1..=5`: baseline, +compensation with its loss, +filtering,
    /// +alternating decoder, +curve loss.
    pub fn ablation(row: usize) -> Result<Self> {
        if !(1..=5).contains(&row) {
            return Err(Error::Config(format!("ablation row {row} outside 1..=5")));
        }
        Ok(Self {
            ifc: row >= 2,
            illum_loss: row >= 2,
            fosf: row >= 3,
            asco: row >= 4,
            curve_loss: row >= 5,
        })
    }
}

impl Default for Components {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of each stride-2 encoder stage; its length is the number of
    /// decoder stages.
    pub enc_channels: Vec<usize>,
    pub num_classes: usize,
    /// Proposals kept per class.
    pub k: usize,
    /// Control points per curve.
    pub m: usize,
    pub orientations: usize,
    pub sigma_raster: f64,
    pub raster_samples: usize,
    pub aux_channel: bool,
    pub components: Components,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            enc_channels: vec![16, 32, 64, 128],
            num_classes: NUM_CLASSES,
            k: 16,
            m: M,
            orientations: 4,
            sigma_raster: 0.02,
            raster_samples: 128,
            aux_channel: false,
            components: Components::FULL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 32×32 two-stage network small enough for exhaustive gradient checks.
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 32,
            enc_channels: vec![4, 8],
            k: 2,
            raster_samples: 16,
            sigma_raster: 0.08,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn input_channels(&self) -> usize {
        3 + usize::from(self.aux_channel)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        let fail = |m: String| Err(Error::Config(m));
        if s == 0 || self.enc_channels.contains(&0) {
            return fail("enc_channels must be non-empty and positive".into());
        }
        let div = 1usize << s;
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(div)
            || !self.width.is_multiple_of(div)
        {
            return fail(format!(
                "input {}x{} must be a positive multiple of {div} for {s} stride-2 stages",
                self.height, self.width
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("num_classes must be {NUM_CLASSES}"));
        }
        if self.m != M {
            return fail(format!("m must be {M}"));
        }
        if self.k == 0 || self.orientations == 0 || self.raster_samples < 2 {
            return fail("k, orientations must be positive and raster_samples at least 2".into());
        }
        let cells = (self.height / div) * (self.width / div);
        if self.components.asco && cells < self.k {
            return fail(format!(
                "k = {} exceeds the {cells} bottleneck cells; reduce k",
                self.k
            ));
        }
        if self.sigma_raster.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail("sigma_raster must be positive".into());
        }
        Ok(())
    }

    fn dec_channels(&self) -> Vec<usize> {
        self.enc_channels.iter().rev().copied().collect()
    }
}

/// Builds every parameter of the configured network.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut init = Init::new(&mut params, cfg.seed);
    let comp = cfg.components;
    if comp.ifc {
        illumination::init_params(&mut init)?;
    }
    let mut cin = cfg.input_channels();
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        init.conv(&format!("enc.{i}.down"), c, cin, 3, true)?;
        init.conv(&format!("enc.{i}.conv"), c, c, 3, true)?;
        if comp.fosf {
            fosf::init_params(&mut init, &format!("fosf.skip{i}"), c, cfg.orientations)?;
        }
        cin = c;
    }
    init.conv("enc.bottleneck", cin, cin, 3, true)?;
    if comp.fosf {
        fosf::init_params(&mut init, "fosf.bneck", cin, cfg.orientations)?;
    }
    if comp.asco {
        curve::init_proposer(&mut init, cin)?;
    }
    let mut prev = cin;
    for (s, &c) in cfg.dec_channels().iter().enumerate() {
        let skip = cfg.enc_channels[cfg.stages() - 1 - s];
        init.conv(&format!("dec.{s}.a"), c, prev + skip, 3, true)?;
        init.conv(&format!("dec.{s}.b"), c, c, 3, true)?;
        if comp.asco {
            asco::init_c2m(&mut init, &format!("dec.{s}.c2m"), c)?;
            asco::init_refine(&mut init, &format!("dec.{s}.refine"), c)?;
            init.conv(&format!("dec.{s}.seg"), NUM_CLASSES, c, 1, true)?;
        }
        prev = c;
    }
    init.conv(
        "head.a",
        cfg.enc_channels[0],
        prev + cfg.input_channels(),
        3,
        true,
    )?;
    init.conv("head.out", NUM_CLASSES, cfg.enc_channels[0], 1, true)?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Soft-min rasterization so curve gradients reach every nearby sample.
    Train,
    /// Exact min rasterization.
    Eval,
}

pub struct Encoded<'g, T: Real> {
    /// Skip `i` is `[1, C_i, H/2^(i+1), W/2^(i+1)]`.
    pub skips: Vec<Var<'g, T>>,
    pub bottleneck: Var<'g, T>,
}

pub fn encoder_forward<'g, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'g, T>,
    x: Var<'g, T>,
) -> Result<Encoded<'g, T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.input_channels() || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::Invalid(format!(
            "encoder expects [1,{},{},{}], got {s:?}",
            cfg.input_channels(),
            cfg.height,
            cfg.width
        )));
    }
    let mut skips = Vec::with_capacity(cfg.stages());
    let mut h = x;
    for i in 0..cfg.stages() {
        h = nn::conv(p, &format!("enc.{i}.down"), h, 2, 1)?.relu();
        h = nn::conv_relu(p, &format!("enc.{i}.conv"), h)?;
        skips.push(h);
    }
    let bottleneck = nn::conv_relu(p, "enc.bottleneck", h)?;
    Ok(Encoded { skips, bottleneck })
}

/// Everything recorded at one decoder stage.
pub struct StageTrace<'g, T: Real> {
    /// Priors `[1, 3, h, w]` injected at this stage, from the incoming curves.
    pub priors: Var<'g, T>,
    /// Per-stage segmentation logits `[1, 3, h, w]`.
    pub logits: Var<'g, T>,
    /// Curves after this stage's refinement.
    pub curves: Proposals<'g, T>,
}

pub struct Forward<'g, T: Real> {
    /// `[1, 3, H, W]`
    pub logits: Var<'g, T>,
    pub compensation: Compensation<'g, T>,
    /// Proposals before any refinement.
    pub proposals: Option<Proposals<'g, T>>,
    pub stages: Vec<StageTrace<'g, T>>,
    /// Filtering intermediates, bottleneck first then skips.
    pub fosf_maps: Vec<FosfMaps<'g, T>>,
}

impl<'g, T: Real> Forward<'g, T> {
    /// Curves after the last stage, or `None` without the curve decoder.
    pub fn final_curves(&self) -> Option<&Proposals<'g, T>> {
        self.stages
            .last()
            .map(|s| &s.curves)
            .or(self.proposals.as_ref())
    }

    /// Proposal sets supervised by the curve loss: the initial proposals and
    /// every stage's output.
    pub fn curve_trace(&self) -> Vec<Proposals<'g, T>> {
        self.proposals
            .iter()
            .copied()
            .chain(self.stages.iter().map(|s| s.curves))
            .collect()
    }
}

/// Runs the full network on `image [3, H, W]` (plus `aux [1, H, W]` when the
/// config asks for it).
pub fn model_forward<'g, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'g, T>,
    g: &'g Graph<T>,
    image: &Tensor<T>,
    aux: Option<&Tensor<T>>,
    mode: Mode,
) -> Result<Forward<'g, T>> {
    let (h, w) = (cfg.height, cfg.width);
    if image.shape() != [3, h, w] {
        return Err(Error::Invalid(format!(
            "model configured for 3x{h}x{w} input, got {:?}",
            image.shape()
        )));
    }
    let comp = cfg.components;
    let img = g.constant(image.clone()).reshape(&[1, 3, h, w])?;
    let compensation = if comp.ifc {
        illumination::compensate(p, img)?
    } else {
        illumination::bypass(g, img)
    };
    let mut input = compensation.image;
    match (cfg.aux_channel, aux) {
        (true, Some(a)) if a.shape() == [1, h, w] => {
            input = g.concat(&[input, g.constant(a.clone()).reshape(&[1, 1, h, w])?], 1)?;
        }
        (true, _) => {
            return Err(Error::Invalid(format!(
                "aux channel of shape [1,{h},{w}] required"
            )))
        }
        (false, _) => {}
    }

    let enc = encoder_forward(cfg, p, input)?;
    let bank = GaborBank::new(cfg.orientations);
    let mut fosf_maps = Vec::new();
    let mut filter = |prefix: &str, x: Var<'g, T>| -> Result<Var<'g, T>> {
        if comp.fosf {
            let (y, maps) = fosf::fosf_forward(p, prefix, &bank, x)?;
            fosf_maps.push(maps);
            Ok(y)
        } else {
            Ok(x)
        }
    };
    let bottleneck = filter("fosf.bneck", enc.bottleneck)?;
    let skips = enc
        .skips
        .iter()
        .enumerate()
        .map(|(i, &s)| filter(&format!("fosf.skip{i}"), s))
        .collect::<Result<Vec<_>>>()?;

    let raster = match mode {
        Mode::Train => MinMode::soft(cfg.sigma_raster),
        Mode::Eval => MinMode::Hard,
    };
    let proposals = if comp.asco {
        Some(curve::propose_curves(p, bottleneck, cfg.k)?)
    } else {
        None
    };
    let mut curves = proposals;
    let mut stages = Vec::new();
    let mut x = bottleneck;
    for s in 0..cfg.stages() {
        let skip = skips[cfg.stages() - 1 - s];
        let ss = skip.shape();
        let (sh, sw) = (ss[2], ss[3]);
        if x.shape()[2..] != ss[2..] {
            x = x.upsample_bilinear(sh, sw)?;
        }
        x = g.concat(&[x, skip], 1)?;
        x = nn::conv_relu(p, &format!("dec.{s}.a"), x)?;
        x = nn::conv_relu(p, &format!("dec.{s}.b"), x)?;
        if let Some(cur) = curves {
            let priors =
                asco::prior_maps(&cur, sh, sw, cfg.sigma_raster, cfg.raster_samples, raster)?;
            x = asco::c2m_fuse(p, &format!("dec.{s}.c2m"), x, priors)?;
            let next = asco::refine_stage(p, &format!("dec.{s}.refine"), x, &cur)?;
            let logits = nn::conv(p, &format!("dec.{s}.seg"), x, 1, 0)?;
            stages.push(StageTrace {
                priors,
                logits,
                curves: next,
            });
            curves = Some(next);
        }
    }
    let x = x.upsample_bilinear(h, w)?;
    let x = g.concat(&[x, input], 1)?;
    let x = nn::conv_relu(p, "head.a", x)?;
    let logits = nn::conv(p, "head.out", x, 1, 0)?;
    Ok(Forward {
        logits,
        compensation,
        proposals,
        stages,
        fosf_maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = ModelConfig {
            height: 120,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn ablation_rows_are_nested() {
        let rows: Vec<Components> = (1..=5).map(|r| Components::ablation(r).unwrap()).collect();
        assert_eq!(rows[4], Components::FULL);
        assert!(!rows[0].ifc && !rows[0].fosf && !rows[0].asco);
        assert!(Components::ablation(6).is_err());
    }
}
