//! Finite-difference checks of every module and of the full objective, in
//! 64-bit arithmetic on small inputs.

use a2o_tensor::suite::{primitive_checks, project, pseudo_random};
use a2o_tensor::{
    grad_check, Bound, GradCheckConfig, GradCheckReport, Graph, ParamSet, Tensor, Var,
};

use crate::curve::{self, BezierCurve, LandmarkClass, MinMode, Proposals, M, NUM_CLASSES};
use crate::fosf::{self, GaborBank};
use crate::model::{self, Mode, ModelConfig};
use crate::nn::Init;
use crate::objectives::{self, CurveLossConfig, LossWeights};
use crate::synth::{gen_scene, SceneSpec, StoredSample};
use crate::train::sample_objective;
use crate::{asco, illumination, Error, Result};

/// Groups accepted by [`run`].
pub const GROUPS: [&str; 8] = [
    "primitives",
    "illumination",
    "fosf",
    "raster",
    "asco",
    "encoder",
    "objectives",
    "model",
];

/// Entries sampled per tensor in the whole-model check.
pub const MODEL_ENTRIES_PER_PARAM: usize = 6;

pub type Named = (String, GradCheckReport);

fn init_f64(f: impl FnOnce(&mut Init<'_>) -> Result<()>) -> Result<ParamSet<f64>> {
    let mut p = ParamSet::<f32>::new();
    f(&mut Init::new(&mut p, 7))?;
    Ok(p.cast())
}

fn check<F>(name: &str, p: &ParamSet<f64>, cfg: &GradCheckConfig, f: F) -> Result<Named>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    Ok((name.to_string(), grad_check(f, p, cfg)?))
}

fn with_input(mut p: ParamSet<f64>, name: &str, t: Tensor<f64>) -> Result<ParamSet<f64>> {
    p.insert(name, t)?;
    Ok(p)
}

fn illumination_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let img = pseudo_random(&[1, 3, 16, 16], 21).map(|v| 0.3 + 0.25 * v);
    let p = with_input(init_f64(illumination::init_params)?, "img", img)?;
    let c = check("illumination", &p, cfg, |_, b| {
        let out = illumination::compensate(b, b.get("img")?)?;
        Ok(project(out.image, 1)?
            .add(project(out.field, 2)?)?
            .add(project(out.gain, 3)?)?)
    })?;
    Ok(vec![c])
}

fn fosf_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let p = init_f64(|i| fosf::init_params(i, "f", 4, 4))?;
    let p = with_input(p, "x", pseudo_random(&[1, 4, 8, 8], 22))?;
    let bank = GaborBank::new(4);
    let c = check("fosf", &p, cfg, |_, b| {
        let (y, maps) = fosf::fosf_forward(b, "f", &bank, b.get("x")?)?;
        Ok(project(y, 1)?.add(project(maps.selected, 2)?)?)
    })?;
    Ok(vec![c])
}

fn raster_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let ctrl = pseudo_random(&[M, 2], 23).map(|v| 0.5 + 0.4 * v);
    let p = with_input(ParamSet::new(), "c", ctrl)?;
    let mut out = Vec::new();
    for (name, mode) in [
        ("raster_soft", MinMode::soft(0.08)),
        ("raster_hard", MinMode::Hard),
    ] {
        out.push(check(name, &p, cfg, |_, b| {
            let s = curve::sample_points(b.get("c")?, 16)?;
            Ok(project(curve::rasterize(s, 12, 12, 0.08, mode)?, 1)?)
        })?);
    }
    Ok(out)
}

fn asco_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let mut p = init_f64(|i| {
        curve::init_proposer(i, 4)?;
        asco::init_c2m(i, "c2m", 4)?;
        asco::init_refine(i, "ref", 4)
    })?;
    // zero-initialized output layers would hide the gradients behind them
    for (name, seed) in [
        ("c2m.o.w", 31),
        ("c2m.o.b", 32),
        ("ref.fc2.w", 33),
        ("ref.fc2.b", 34),
    ] {
        let t = p
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing {name}")))?;
        let shape = t.shape().to_vec();
        *t = pseudo_random(&shape, seed).map(|v| 0.3 * v);
    }
    let p = with_input(p, "x", pseudo_random(&[1, 4, 4, 4], 24))?;
    let p = with_input(
        p,
        "pri",
        pseudo_random(&[1, 3, 4, 4], 25).map(|v| 0.5 + 0.5 * v),
    )?;
    let c2m = check("c2m_fusion", &p, cfg, |_, b| {
        Ok(project(
            asco::c2m_fuse(b, "c2m", b.get("x")?, b.get("pri")?)?,
            1,
        )?)
    })?;
    let refine = check("proposer_and_refinement", &p, cfg, |_, b| {
        let prop = curve::propose_curves(b, b.get("x")?, 2)?;
        let next = asco::refine_stage(b, "ref", b.get("x")?, &prop)?;
        let priors = asco::prior_maps(&next, 6, 6, 0.1, 16, MinMode::soft(0.1))?;
        Ok(project(next.control, 1)?
            .add(project(next.conf_logits, 2)?)?
            .add(project(priors, 3)?)?)
    })?;
    Ok(vec![c2m, refine])
}

fn encoder_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let mcfg = ModelConfig {
        height: 16,
        width: 16,
        ..ModelConfig::toy()
    };
    let params = model::init_params(&mcfg)?.cast::<f64>();
    let mut p = ParamSet::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with("enc.")) {
        p.insert(name, t.clone())?;
    }
    let p = with_input(p, "img", pseudo_random(&[1, 3, 16, 16], 26))?;
    let c = check("encoder", &p, cfg, |_, b| {
        let e = model::encoder_forward(&mcfg, b, b.get("img")?)?;
        let mut t = project(e.bottleneck, 1)?;
        for (i, s) in e.skips.iter().enumerate() {
            t = t.add(project(*s, 10 + i as u64)?)?;
        }
        Ok(t)
    })?;
    Ok(vec![c])
}

fn objective_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let (h, w) = (10, 10);
    let gt = [
        Some(BezierCurve::new(
            LandmarkClass::Ridge,
            [
                [0.2, 0.3],
                [0.35, 0.4],
                [0.5, 0.45],
                [0.65, 0.5],
                [0.8, 0.7],
            ],
        )),
        None,
        Some(BezierCurve::new(
            LandmarkClass::Silhouette,
            [[0.1, 0.1], [0.3, 0.12], [0.5, 0.1], [0.7, 0.15], [0.9, 0.1]],
        )),
    ];
    let mask =
        crate::synth::paint_mask(&gt.iter().flatten().cloned().collect::<Vec<_>>(), h, w, 2.0);
    let k = 2;
    let logits = pseudo_random(&[NUM_CLASSES * k, 2 * M], 27).map(|v| 1.5 * v);
    let mut p = ParamSet::new();
    p.insert("seg", pseudo_random(&[1, NUM_CLASSES, h, w], 28))?;
    p.insert("curve", logits)?;
    p.insert("conf", pseudo_random(&[NUM_CLASSES * k], 29))?;
    p.insert("field", pseudo_random(&[h, w], 30).map(|v| 1.0 + 0.3 * v))?;
    p.insert("gain", pseudo_random(&[h, w], 31).map(|v| 1.5 + 0.6 * v))?;
    let lc = CurveLossConfig {
        sigma: 0.1,
        raster_samples: 16,
        mode: MinMode::soft(0.1),
    };
    let seg = check("seg_loss", &p, cfg, |_, b| {
        objectives::seg_loss(b.get("seg")?, &mask)
    })?;
    let illum = check("illum_loss", &p, cfg, |_, b| {
        objectives::illum_loss(b.get("field")?, b.get("gain")?)
    })?;
    let curve = check("curve_loss", &p, cfg, |g, b| {
        let first = Proposals::from_logits(b.get("curve")?, b.get("conf")?, k);
        let second = Proposals::from_logits(
            b.get("curve")?.mul_scalar(0.9),
            b.get("conf")?.mul_scalar(1.1),
            k,
        );
        objectives::curve_loss(g, &[first, second], &gt, &mask, h, w, lc)
    })?;
    Ok(vec![seg, illum, curve])
}

/// Toy configuration, generated 32×32 scene and 64-bit parameters used by
/// the whole-objective check.
pub fn model_problem() -> Result<(ModelConfig, StoredSample, ParamSet<f64>)> {
    let mcfg = ModelConfig::toy();
    let spec = SceneSpec {
        present: [true; NUM_CLASSES],
        thickness: 3.0,
        ..SceneSpec::random(5, mcfg.height, mcfg.width)
    };
    let sample = gen_scene(&spec)?.stored("toy");
    let mut p = model::init_params(&mcfg)?.cast::<f64>();
    // zero-initialized tensors get values large enough that the gradients
    // behind them rise well above finite-difference round-off
    let names: Vec<String> = p.names().map(String::from).collect();
    for (i, name) in names.iter().enumerate() {
        let t = p.get_mut(name).expect("listed name");
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            *t = pseudo_random(&shape, 100 + i as u64).map(|v| 0.5 * v);
        }
    }
    Ok((mcfg, sample, p))
}

/// Total loss of the toy model in training mode.
pub fn model_loss<'g>(
    mcfg: &ModelConfig,
    sample: &StoredSample,
    g: &'g Graph<f64>,
    b: &Bound<'g, f64>,
) -> Result<Var<'g, f64>> {
    let (total, _, _) = sample_objective(mcfg, LossWeights::default(), b, g, sample, Mode::Train)?;
    Ok(total)
}

/// Whole objective of the toy network on a generated 32×32 scene, checked
/// on a fixed subset of entries per tensor.
fn model_checks(cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let (mcfg, sample, p) = model_problem()?;
    let sampled = GradCheckConfig {
        max_entries_per_param: Some(cfg.max_entries_per_param.unwrap_or(MODEL_ENTRIES_PER_PARAM)),
        ..cfg.clone()
    };
    let c = check("total_loss_toy_model", &p, &sampled, |g, b| {
        model_loss(&mcfg, &sample, g, b)
    })?;
    Ok(vec![c])
}

/// Runs the named group, or every group when `group` is `None`.
pub fn run(group: Option<&str>, cfg: &GradCheckConfig) -> Result<Vec<Named>> {
    let groups: Vec<&str> = match group {
        None | Some("all") => GROUPS.to_vec(),
        Some(g) if GROUPS.contains(&g) => vec![g],
        Some(g) => {
            return Err(Error::Config(format!(
                "unknown gradient-check group `{g}`; expected one of {} or all",
                GROUPS.join(", ")
            )))
        }
    };
    let mut out = Vec::new();
    for g in groups {
        out.extend(match g {
            "primitives" => primitive_checks(cfg)?,
            "illumination" => illumination_checks(cfg)?,
            "fosf" => fosf_checks(cfg)?,
            "raster" => raster_checks(cfg)?,
            "asco" => asco_checks(cfg)?,
            "encoder" => encoder_checks(cfg)?,
            "objectives" => objective_checks(cfg)?,
            _ => model_checks(cfg)?,
        });
    }
    Ok(out)
}
