//! Fourth-order central finite differences against analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collapse::{iterate_collapse, iterate_collapse_backward, AttentionNet, CollapseMode};
use crate::config::{DecoderConfig, ExperimentConfig};
use crate::ctc::{ctc_loss, LabelSeq, LogitSeq};
use crate::error::Result;
use crate::layers::{Blstm, Conv, Direction, Encoder, EncoderConfig, FeatureMap, ImagePlane, Linear, Lstm, MdLstm, Window};
use crate::model::Model;
use crate::optim::Objective;
use crate::tensor::{GradStore, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// entries with vanishing gradients compare absolutely.
    pub floor: f64,
    /// Entries probed per parameter; all when zero.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-3, floor: 1e-6, max_entries: 0, seed: 0 }
    }
}

/// Five-point stencil `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
/// `f` receives the offset to apply.
fn derivative(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Worst relative error per parameter group, worst first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    fn push(&mut self, g: GroupError) {
        self.groups.push(g);
        self.groups.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error).then_with(|| a.group.cmp(&b.group)));
    }

    pub fn merge(&mut self, prefix: &str, other: GradcheckReport) {
        for mut g in other.groups {
            g.group = format!("{prefix}/{}", g.group);
            self.push(g);
        }
    }

    pub fn max_error(&self) -> f64 {
        self.groups.first().map_or(0.0, |g| g.max_rel_error)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn offenders(&self, threshold: f64) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| !(g.max_rel_error < threshold)).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group\tmax_rel_error\tindex\tanalytic\tnumeric\tchecked")?;
        for g in &self.groups {
            writeln!(
                f,
                "{}\t{:.3e}\t{}\t{:.6e}\t{:.6e}\t{}",
                g.group, g.max_rel_error, g.index, g.analytic, g.numeric, g.checked
            )?;
        }
        Ok(())
    }
}

fn probe_indices(len: usize, cfg: &GradcheckConfig, salt: usize) -> Vec<usize> {
    if cfg.max_entries == 0 || len <= cfg.max_entries {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (salt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, len, cfg.max_entries).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares `analytic` with central differences of `loss` around `x`.
pub fn check_slice(
    group: &str,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradcheckConfig,
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GroupError> {
    let mut probe = x.to_vec();
    let mut worst = GroupError { group: group.into(), max_rel_error: 0.0, index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for k in probe_indices(x.len(), cfg, group.len()) {
        let numeric = derivative(cfg.step, |d| {
            probe[k] = x[k] + d;
            loss(&probe)
        })?;
        probe[k] = x[k];
        let err = relative_error(analytic[k], numeric, cfg.floor);
        worst.checked += 1;
        if err > worst.max_rel_error || worst.checked == 1 {
            worst = GroupError { max_rel_error: err, index: k, analytic: analytic[k], numeric, ..worst };
        }
    }
    Ok(worst)
}

/// Checks every parameter of `ps` against `analytic`, perturbing values in
/// place and restoring them afterwards.
pub fn gradcheck(
    ps: &mut ParamStore,
    analytic: &GradStore,
    cfg: &GradcheckConfig,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let ids: Vec<_> = ps.ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        let name = ps.get(id).name.clone();
        let mut worst = GroupError { group: name, max_rel_error: 0.0, index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
        let grads = analytic.get(id);
        for k in probe_indices(grads.len(), cfg, n) {
            let orig = ps.value(id)[k];
            let numeric = derivative(cfg.step, |d| {
                ps.value_mut(id)[k] = orig + d;
                loss(ps)
            });
            ps.value_mut(id)[k] = orig;
            let numeric = numeric?;
            let err = relative_error(grads[k], numeric, cfg.floor);
            worst.checked += 1;
            if err > worst.max_rel_error || worst.checked == 1 {
                worst = GroupError { max_rel_error: err, index: k, analytic: grads[k], numeric, ..worst };
            }
        }
        report.push(worst);
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..r)).collect()
}

fn randomize(ps: &mut ParamStore, rng: &mut ChaCha8Rng, r: f64) {
    for p in ps.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-r..r));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::new(h, w, d, uniform(rng, h * w * d, 1.0)).expect("positive extents")
}

/// Runs the parameter and input checks of one layer whose scalar loss is a
/// fixed random projection of its output.
fn check_layer(
    ps: &mut ParamStore,
    input: &[f64],
    cfg: &GradcheckConfig,
    forward: impl Fn(&ParamStore, &[f64]) -> Result<f64>,
    backward: impl Fn(&ParamStore, &[f64], &mut GradStore) -> Result<Vec<f64>>,
) -> Result<GradcheckReport> {
    let mut gs = ps.zero_grads();
    let dx = backward(ps, input, &mut gs)?;
    let mut report = gradcheck(ps, &gs, cfg, |p| forward(p, input))?;
    let frozen = ps.clone();
    report.push(check_slice("input", input, &dx, cfg, |x| forward(&frozen, x))?);
    Ok(report)
}

/// Checks each layer type on small random instances with parameters drawn
/// from `[-0.1, 0.1]`.
pub fn layer_suite(cfg: &GradcheckConfig) -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "linear", 4, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        let probe = uniform(&mut rng, 3 * 3, 1.0);
        let x = uniform(&mut rng, 3 * 4, 1.0);
        let r = check_layer(
            &mut ps,
            &x,
            cfg,
            |ps, x| Ok(dot(&lin.forward(ps, x)?, &probe)),
            |ps, x, gs| Ok(lin.backward(ps, x, &probe, gs)),
        )?;
        out.push(("linear".to_string(), r));
    }
    {
        let mut ps = ParamStore::new();
        let lstm = Lstm::new(&mut ps, "lstm", 2, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        let x = uniform(&mut rng, 5 * 2, 1.0);
        let probe = uniform(&mut rng, 5 * 3, 1.0);
        for reverse in [false, true] {
            let r = check_layer(
                &mut ps,
                &x,
                cfg,
                |ps, x| Ok(dot(lstm.forward(ps, x, reverse)?.output(), &probe)),
                |ps, x, gs| Ok(lstm.backward(ps, &lstm.forward(ps, x, reverse)?, &probe, gs)),
            )?;
            out.push((if reverse { "lstm-reverse" } else { "lstm" }.to_string(), r));
        }
    }
    {
        let mut ps = ParamStore::new();
        let blstm = Blstm::new(&mut ps, "blstm", 2, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        let x = uniform(&mut rng, 4 * 2, 1.0);
        let probe = uniform(&mut rng, 4 * 6, 1.0);
        let r = check_layer(
            &mut ps,
            &x,
            cfg,
            |ps, x| Ok(dot(blstm.forward(ps, x)?.output(), &probe)),
            |ps, x, gs| Ok(blstm.backward(ps, &blstm.forward(ps, x)?, &probe, gs)),
        )?;
        out.push(("blstm".to_string(), r));
    }
    {
        let mut ps = ParamStore::new();
        let md = MdLstm::new(&mut ps, "mdlstm", 2, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        let x = map(&mut rng, 3, 4, 2);
        let probe = uniform(&mut rng, 3 * 4 * 3, 1.0);
        for dir in Direction::ALL {
            let fm = |x: &[f64]| FeatureMap::new(3, 4, 2, x.to_vec());
            let r = check_layer(
                &mut ps,
                x.data(),
                cfg,
                |ps, x| Ok(dot(md.forward(ps, &fm(x)?, dir)?.output().data(), &probe)),
                |ps, x, gs| Ok(md.backward(ps, &md.forward(ps, &fm(x)?, dir)?, &probe, gs)),
            )?;
            out.push((format!("mdlstm-{}", dir.tag()), r));
        }
    }
    {
        let mut ps = ParamStore::new();
        let conv = Conv::new(&mut ps, "conv", 2, 2, 3, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        // 5x3 input pads to 6x4 for a 3-high, 2-wide kernel
        let maps: Vec<f64> = uniform(&mut rng, 4 * 5 * 3 * 2, 1.0);
        let split = |x: &[f64]| -> Result<Vec<FeatureMap>> {
            x.chunks_exact(5 * 3 * 2).map(|c| FeatureMap::new(5, 3, 2, c.to_vec())).collect()
        };
        let probe = uniform(&mut rng, 2 * 2 * 3, 1.0);
        let r = check_layer(
            &mut ps,
            &maps,
            cfg,
            |ps, x| Ok(dot(conv.forward(ps, &split(x)?)?.output().data(), &probe)),
            |ps, x, gs| Ok(conv.backward(ps, &conv.forward(ps, &split(x)?)?, &probe, gs).concat()),
        )?;
        out.push(("conv".to_string(), r));
    }
    {
        let mut ps = ParamStore::new();
        let ecfg = EncoderConfig {
            tile: Window::new(2, 2),
            mdlstm_units: vec![2, 3],
            conv_filters: vec![3],
            conv_kernels: vec![Window::new(2, 2)],
            final_dim: None,
        };
        let enc = Encoder::new(&mut ps, "encoder", &ecfg, 2, &mut rng)?;
        randomize(&mut ps, &mut rng, 0.1);
        let img = uniform(&mut rng, 8 * 8, 1.0);
        let probe = uniform(&mut rng, 2 * 2 * 2, 1.0);
        let image = |x: &[f64]| ImagePlane::gray(8, 8, x.to_vec());
        let mut gs = ps.zero_grads();
        let (_, cache) = enc.forward(&ps, &image(&img)?)?;
        enc.backward(&ps, &cache, &probe, &mut gs);
        let r = gradcheck(&mut ps, &gs, cfg, |ps| Ok(dot(enc.forward(ps, &image(&img)?)?.0.data(), &probe)))?;
        out.push(("encoder".to_string(), r));
    }
    {
        let mut ps = ParamStore::new();
        let net = AttentionNet::new(&mut ps, "attention", 2, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        let a = map(&mut rng, 4, 4, 2);
        let prev = uniform(&mut rng, 16, 1.0);
        let probe = uniform(&mut rng, 16, 1.0);
        let (_, cache) = net.scores(&ps, &a, &prev)?;
        let mut gs = ps.zero_grads();
        let _ = net.scores_backward(&ps, &cache, &probe, &mut gs);
        let r = gradcheck(&mut ps, &gs, cfg, |ps| Ok(dot(&net.scores(ps, &a, &prev)?.0, &probe)))?;
        out.push(("attention-scores".to_string(), r));
    }
    {
        let mut ps = ParamStore::new();
        let net = AttentionNet::new(&mut ps, "attention", 2, 3, &mut rng);
        randomize(&mut ps, &mut rng, 0.1);
        let a = map(&mut rng, 6, 6, 2);
        let probe = uniform(&mut rng, 2 * 6 * 2, 1.0);
        let fm = |x: &[f64]| FeatureMap::new(6, 6, 2, x.to_vec());
        let r = check_layer(
            &mut ps,
            a.data(),
            cfg,
            |ps, x| Ok(dot(iterate_collapse(ps, &net, &fm(x)?, 2)?.0.data(), &probe)),
            |ps, x, gs| {
                let a = fm(x)?;
                let (_, cache) = iterate_collapse(ps, &net, &a, 2)?;
                Ok(iterate_collapse_backward(ps, &net, &a, &cache, &probe, gs))
            },
        )?;
        out.push(("iterate-collapse".to_string(), r));
    }
    {
        let logits = uniform(&mut rng, 6 * 4, 1.0);
        let target = LabelSeq::new(vec![0, 2, 2], 3)?;
        let (_, grad) = ctc_loss(&LogitSeq::new(6, 4, logits.clone())?, &target)?;
        let mut r = GradcheckReport::default();
        r.push(check_slice("logits", &logits, &grad, cfg, |x| {
            Ok(ctc_loss(&LogitSeq::new(6, 4, x.to_vec())?, &target)?.0)
        })?);
        out.push(("ctc".to_string(), r));
    }
    Ok(out)
}

/// The tiny end-to-end configuration: an 8×16 image, two attention steps,
/// BLSTM decoder and CTC.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        alphabet: "ab ".into(),
        encoder: EncoderConfig {
            tile: Window::new(2, 2),
            mdlstm_units: vec![2, 3],
            conv_filters: vec![4],
            conv_kernels: vec![Window::new(2, 2)],
            final_dim: Some(5),
        },
        attention: crate::config::AttentionConfig { units: 3, steps: Some(2) },
        decoder: DecoderConfig { units: 3, ..DecoderConfig::default() },
        ..ExperimentConfig::default()
    }
}

/// Full-model checks in attention mode (paragraph and per-line losses) and
/// standard mode.
pub fn model_suite(cfg: &GradcheckConfig) -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(&tiny_config(cfg.seed))?;
    let image = ImagePlane::gray(8, 16, uniform(&mut rng, 8 * 16, 1.0))?;
    let target = LabelSeq::new(vec![0, 2, 1], 3)?;
    let lines = vec![LabelSeq::new(vec![0], 3)?, LabelSeq::new(vec![1, 1], 3)?];
    let cases = [
        ("attention", CollapseMode::Attention, Objective::Paragraph),
        ("attention-per-line", CollapseMode::Attention, Objective::Line),
        ("standard", CollapseMode::Standard, Objective::Paragraph),
    ];
    let mut out = Vec::new();
    for (name, mode, objective) in cases {
        model.set_collapse(mode, 2);
        let target = if mode == CollapseMode::Standard { LabelSeq::new(vec![0, 1], 3)? } else { target.clone() };
        let (_, _, gs) = model.loss_and_grad(&image, &target, &lines, objective)?;
        let probe = model.clone();
        let mut ps = model.params().clone();
        let r = gradcheck(&mut ps, &gs, cfg, |ps| {
            let mut m = probe.clone();
            *m.params_mut() = ps.clone();
            Ok(m.loss_and_grad(&image, &target, &lines, objective)?.0)
        })?;
        out.push((format!("model-{name}"), r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for (name, report) in layer_suite(&GradcheckConfig::default()).unwrap() {
            assert!(report.max_error() < 1e-4, "{name}\n{report}");
            if name == "linear" {
                assert!(report.max_error() < 1e-8, "{report}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "linear", 3, 2, &mut rng);
        let x = uniform(&mut rng, 6, 1.0);
        let probe = uniform(&mut rng, 4, 1.0);
        let mut gs = ps.zero_grads();
        lin.backward(&ps, &x, &probe, &mut gs);
        gs.scale(1.01);
        let report = gradcheck(&mut ps, &gs, &GradcheckConfig::default(), |ps| Ok(dot(&lin.forward(ps, &x)?, &probe))).unwrap();
        let e = report.max_error();
        assert!((e - 0.01 / 1.01).abs() < 1e-6, "{report}");
        assert_eq!(report.offenders(1e-4).len(), 2);
    }

    #[test]
    fn report_is_sorted_worst_first() {
        let mut r = GradcheckReport::default();
        for (g, e) in [("a", 1e-9), ("b", 1e-3), ("c", 1e-6)] {
            r.push(GroupError { group: g.into(), max_rel_error: e, index: 0, analytic: 0.0, numeric: 0.0, checked: 1 });
        }
        let order: Vec<&str> = r.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(order, ["b", "c", "a"]);
        assert!(r.to_string().starts_with("group\tmax_rel_error"));
    }
}
