//! Fully resolved CLI runs. A [`Job`] holds every setting of a run so that
//! it can be recorded in a manifest and repeated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, AttackConfig};
use crate::boxdom::{self, BoxTensor};
use crate::deeppoly;
use crate::error::{Error, Result};
use crate::network::{checkpoint, Network};
use crate::sabr;
use crate::tensor::Tensor;
use crate::theory::{self, CentreDistribution, GrowthSource};

use super::analysis::{self, BoundMethod, LossContext, LossSpec, StateMode};
use super::config::RunConfig;
use super::data::{load_mnist, mnist_files, Dataset};

/// Checkpoint plus evaluation samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSource {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub split: String,
    /// First `samples` samples of the split.
    pub samples: usize,
    pub eps: f64,
}

impl EvalSource {
    fn load(&self) -> Result<(Network<f64>, Dataset<f64>)> {
        let net = checkpoint::load(&self.checkpoint)?.cast();
        let data: Dataset<f32> = load_mnist(&self.data_dir, &self.split)?;
        Ok((net, data.head(self.samples).cast()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub config: RunConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackJob {
    pub source: EvalSource,
    pub attack: AttackConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyJob {
    pub source: EvalSource,
    pub method: BoundMethod,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReluStatesJob {
    pub source: EvalSource,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCosineJob {
    pub source: EvalSource,
    pub a: LossSpec,
    pub b: LossSpec,
    pub attack: AttackConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurveJob {
    pub source: EvalSource,
    pub lambdas: Vec<f64>,
    pub method: BoundMethod,
    pub attack: AttackConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossDecompJob {
    pub source: EvalSource,
    pub lambdas: Vec<f64>,
    pub attack: AttackConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthJob {
    pub dist: String,
    pub grid: Vec<f64>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Train(TrainJob),
    Attack(AttackJob),
    Certify(CertifyJob),
    ReluStates(ReluStatesJob),
    GradCosine(GradCosineJob),
    LossCurve(LossCurveJob),
    LossDecomp(LossDecompJob),
    GrowthSim(GrowthJob),
}

pub const CERTIFY_HEADER: &str = "index,label,certified,margin";
pub const ATTACK_HEADER: &str = "index,label,clean_correct,robust";

fn redirect_file(p: &Path, dir: &Path) -> PathBuf {
    dir.join(p.file_name().unwrap_or_default())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn pct(k: usize, n: usize) -> String {
    format!("{k}/{n} ({:.2}%)", 100.0 * k as f64 / n.max(1) as f64)
}

/// `gaussian:<mean>,<std>`, `piecewise:<a>,<b>` or `empirical:<file>` (one
/// number per line).
pub fn parse_distribution(spec: &str) -> Result<CentreDistribution> {
    let (kind, args) = spec
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("distribution `{spec}` needs the form kind:args")))?;
    let nums = || -> Result<Vec<f64>> {
        args.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{s}` in `{spec}`"))))
            .collect()
    };
    match kind {
        "gaussian" => match nums()?[..] {
            [m, s] => CentreDistribution::gaussian(m, s),
            _ => Err(Error::invalid("gaussian takes <mean>,<std>")),
        },
        "piecewise" => match nums()?[..] {
            [a, b] => CentreDistribution::piecewise_uniform(a, b),
            _ => Err(Error::invalid("piecewise takes <a>,<b>")),
        },
        "empirical" => {
            let text = fs::read_to_string(args)?;
            let samples = text
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad sample `{s}` in {args}"))))
                .collect::<Result<Vec<f64>>>()?;
            CentreDistribution::empirical(samples)
        }
        _ => Err(Error::invalid(format!("unknown distribution `{kind}` (gaussian | piecewise | empirical)"))),
    }
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad grid `{spec}`"))))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::invalid(format!("grid `{spec}` must be start:stop:step")));
    };
    if !(step > 0.0) || !(stop >= start) || start < 0.0 {
        return Err(Error::invalid(format!("grid `{spec}` needs 0 <= start <= stop and step > 0")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train(_) => "train",
            Job::Attack(_) => "attack",
            Job::Certify(_) => "certify",
            Job::ReluStates(_) => "relu-states",
            Job::GradCosine(_) => "grad-cosine",
            Job::LossCurve(_) => "loss-curve",
            Job::LossDecomp(_) => "loss-decomp",
            Job::GrowthSim(_) => "growth-sim",
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("job serializes")))
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::Train(j) => j.config.train.seed,
            Job::Attack(j) => j.attack.seed,
            Job::GradCosine(j) => j.attack.seed,
            Job::LossCurve(j) => j.attack.seed,
            Job::LossDecomp(j) => j.attack.seed,
            _ => 0,
        }
    }

    fn source(&self) -> Option<&EvalSource> {
        match self {
            Job::Attack(j) => Some(&j.source),
            Job::Certify(j) => Some(&j.source),
            Job::ReluStates(j) => Some(&j.source),
            Job::GradCosine(j) => Some(&j.source),
            Job::LossCurve(j) => Some(&j.source),
            Job::LossDecomp(j) => Some(&j.source),
            Job::Train(_) | Job::GrowthSim(_) => None,
        }
    }

    /// Files the job reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        if let Some(s) = self.source() {
            v.push(s.checkpoint.clone());
            v.push(checkpoint::manifest_path(&s.checkpoint));
            if let Ok((images, labels)) = mnist_files(&s.data_dir, &s.split) {
                v.extend([images, labels]);
            }
        }
        if let Job::Train(j) = self {
            let (images, labels) = mnist_files(&j.data_dir, "train").expect("train split");
            v.extend([images, labels]);
        }
        if let Job::GrowthSim(j) = self {
            if let Some(path) = j.dist.strip_prefix("empirical:") {
                v.push(PathBuf::from(path));
            }
        }
        v
    }

    /// Files the job writes.
    pub fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Job::Train(j) => {
                let model = j.out_dir.join("model.bin");
                vec![checkpoint::manifest_path(&model), model, j.out_dir.join("metrics.csv")]
            }
            Job::Attack(j) => vec![j.out.clone()],
            Job::Certify(j) => vec![j.out.clone()],
            Job::ReluStates(j) => vec![j.out.clone()],
            Job::GradCosine(j) => vec![j.out.clone()],
            Job::LossCurve(j) => vec![j.out.clone()],
            Job::LossDecomp(j) => vec![j.out.clone()],
            Job::GrowthSim(j) => vec![j.out.clone()],
        }
    }

    /// Where the run manifest goes: `run.json` in the training directory, or
    /// `<out stem>.run.json` beside a single output file.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Job::Train(j) => j.out_dir.join("run.json"),
            _ => self.outputs()[0].with_extension("run.json"),
        }
    }

    /// Same job with every output placed in `dir`.
    pub fn redirect(&self, dir: &Path) -> Job {
        let mut job = self.clone();
        match &mut job {
            Job::Train(j) => j.out_dir = dir.to_path_buf(),
            Job::Attack(j) => j.out = redirect_file(&j.out, dir),
            Job::Certify(j) => j.out = redirect_file(&j.out, dir),
            Job::ReluStates(j) => j.out = redirect_file(&j.out, dir),
            Job::GradCosine(j) => j.out = redirect_file(&j.out, dir),
            Job::LossCurve(j) => j.out = redirect_file(&j.out, dir),
            Job::LossDecomp(j) => j.out = redirect_file(&j.out, dir),
            Job::GrowthSim(j) => j.out = redirect_file(&j.out, dir),
        }
        job
    }

    /// Executes the job and returns a short human-readable summary.
    pub fn run(&self) -> Result<String> {
        match self {
            Job::Train(j) => run_train(j),
            Job::Attack(j) => run_attack(j),
            Job::Certify(j) => run_certify(j),
            Job::ReluStates(j) => run_relu_states(j),
            Job::GradCosine(j) => run_grad_cosine(j),
            Job::LossCurve(j) => run_loss_curve(j),
            Job::LossDecomp(j) => run_loss_decomp(j),
            Job::GrowthSim(j) => run_growth(j),
        }
    }
}

fn run_train(j: &TrainJob) -> Result<String> {
    let cfg = &j.config;
    let train: Dataset<f32> = load_mnist(&j.data_dir, "train")?;
    let train = match cfg.train_samples {
        Some(n) => train.head(n),
        None => train,
    };
    let test: Dataset<f32> = load_mnist(&j.data_dir, "test")?;
    let monitor = test.head(cfg.train.monitor_samples);
    let net = cfg.build_network()?;
    fs::create_dir_all(&j.out_dir)?;
    let metrics_path = j.out_dir.join("metrics.csv");
    let mut rows = Vec::new();
    let out = sabr::train_with(net, &train, &monitor, &cfg.train, |row| {
        rows.push(row.clone());
        if let Err(e) = sabr::write_metrics_csv(&metrics_path, &rows) {
            tracing::warn!("could not write {}: {e}", metrics_path.display());
        }
    })?;
    sabr::write_metrics_csv(&metrics_path, &out.metrics)?;
    checkpoint::save(&out.net, &j.out_dir.join("model.bin"))?;
    let last = out.metrics.last();
    Ok(format!(
        "trained {} for {} epochs; monitor std acc {:.4}, box cert acc {:.4}",
        cfg.arch,
        out.metrics.len(),
        last.map_or(f64::NAN, |m| m.std_acc),
        last.map_or(f64::NAN, |m| m.box_cert_acc)
    ))
}

/// Per-sample attack verdicts in 64-bit.
pub fn attack_verdicts(net: &Network<f64>, data: &Dataset<f64>, eps: f64, cfg: &AttackConfig) -> Result<(Vec<usize>, Vec<bool>)> {
    let clean = sabr::predictions(net, &data.images)?;
    let robust = attack::adversarial_robust(net, &data.images, &data.labels, eps, cfg, 100)?;
    Ok((clean, robust))
}

fn run_attack(j: &AttackJob) -> Result<String> {
    let (net, data) = j.source.load()?;
    let (clean, robust) = attack_verdicts(&net, &data, j.source.eps, &j.attack)?;
    let mut csv = format!("{ATTACK_HEADER}\n");
    for (i, (&p, &r)) in clean.iter().zip(&robust).enumerate() {
        writeln!(csv, "{i},{},{},{}", data.labels[i], u8::from(p == data.labels[i]), u8::from(r)).unwrap();
    }
    write_text(&j.out, &csv)?;
    let std = clean.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let adv = robust.iter().filter(|&&r| r).count();
    Ok(format!("standard {}; adversarial {}", pct(std, data.len()), pct(adv, data.len())))
}

/// Per-sample `(certified, margin)` verdicts in 64-bit.
pub fn certify_dataset(net: &Network<f64>, data: &Dataset<f64>, eps: f64, method: BoundMethod) -> Result<Vec<(bool, f64)>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(250) {
        let idx: Vec<usize> = (start..(start + 250).min(data.len())).collect();
        let x = data.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let regions = BoxTensor::linf_ball(&x, eps)?;
        match method {
            BoundMethod::Box => out.extend(boxdom::certify_box(net, &regions, &labels)?),
            BoundMethod::DeepPoly => {
                for (b, &t) in labels.iter().enumerate() {
                    let shape = &regions.shape()[1..];
                    let region = BoxTensor::new(
                        regions.centre.select_rows(&[b]).reshape(shape)?,
                        regions.radius.select_rows(&[b]).reshape(shape)?,
                    )?;
                    out.push(deeppoly::certify_deeppoly(net, &region, t)?);
                }
            }
        }
    }
    Ok(out)
}

fn run_certify(j: &CertifyJob) -> Result<String> {
    let (net, data) = j.source.load()?;
    let certs = certify_dataset(&net, &data, j.source.eps, j.method)?;
    let mut csv = format!("{CERTIFY_HEADER}\n");
    for (i, (c, m)) in certs.iter().enumerate() {
        writeln!(csv, "{i},{},{},{m:e}", data.labels[i], u8::from(*c)).unwrap();
    }
    write_text(&j.out, &csv)?;
    let k = certs.iter().filter(|c| c.0).count();
    Ok(format!("certified ({:?}) {}", j.method, pct(k, data.len())))
}

fn run_relu_states(j: &ReluStatesJob) -> Result<String> {
    let (net, data) = j.source.load()?;
    let mut csv = String::from("layer,mode,active,inactive,unstable\n");
    let mut summary = String::new();
    for (mode, name) in [(StateMode::Point, "point"), (StateMode::Region, "region")] {
        let s = analysis::relu_state_stats(&net, &data.images, mode, j.source.eps)?;
        for (k, f) in s.per_layer.iter().enumerate() {
            writeln!(csv, "{k},{name},{},{},{}", f.active, f.inactive, f.unstable).unwrap();
        }
        let m = s.mean;
        writeln!(csv, "mean,{name},{},{},{}", m.active, m.inactive, m.unstable).unwrap();
        write!(
            summary,
            "{name}: active {:.3} inactive {:.3} unstable {:.3}; ",
            m.active, m.inactive, m.unstable
        )
        .unwrap();
    }
    write_text(&j.out, &csv)?;
    Ok(summary.trim_end_matches("; ").to_string())
}

fn run_grad_cosine(j: &GradCosineJob) -> Result<String> {
    let (net, data) = j.source.load()?;
    let ctx = LossContext { eps: j.source.eps, attack: j.attack.clone(), shrink: 1.0 };
    let c = analysis::grad_cosine(&net, &j.a, &j.b, &ctx, &data)?;
    write_text(&j.out, &format!("loss_a,loss_b,samples,mean_cosine\n{},{},{},{c}\n", j.a, j.b, data.len()))?;
    Ok(format!("mean cosine({}, {}) = {c:.4}", j.a, j.b))
}

fn run_loss_curve(j: &LossCurveJob) -> Result<String> {
    let (net, data) = j.source.load()?;
    let curve = analysis::loss_curve(&net, &data, j.source.eps, &j.lambdas, j.method, &j.attack)?;
    let mut csv = format!("{}\n", analysis::LOSS_CURVE_HEADER);
    for p in &curve {
        writeln!(csv, "{}", p.csv_row()).unwrap();
    }
    write_text(&j.out, &csv)?;
    let xs: Vec<f64> = curve.iter().map(|p| p.lambda).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.robust_clean).collect();
    Ok(format!("{} points; convex in lambda: {}", curve.len(), analysis::is_convex(&xs, &ys, 1e-9)))
}

fn run_loss_decomp(j: &LossDecompJob) -> Result<String> {
    let (net, data) = j.source.load()?;
    let mut csv = String::from("lambda,mean_margin,mean_delta\n");
    for &l in &j.lambdas {
        let (m, d) = analysis::mean_decomposition(&net, &data, j.source.eps, l, &j.attack)?;
        writeln!(csv, "{l},{m},{d}").unwrap();
    }
    write_text(&j.out, &csv)?;
    Ok(format!("{} lambdas", j.lambdas.len()))
}

fn run_growth(j: &GrowthJob) -> Result<String> {
    let dist = parse_distribution(&j.dist)?;
    let curve = theory::growth_curve(&GrowthSource::Distribution(&dist), &j.grid)?;
    theory::write_curve_csv(&j.out, &curve)?;
    Ok(format!("{} points; super-linear: {}", curve.len(), theory::is_super_linear(&curve)))
}

/// A growth curve for the centres of a network's pre-activations.
pub fn empirical_centres(net: &Network<f64>, inputs: &Tensor<f64>, layer: usize) -> Result<CentreDistribution> {
    let trace = boxdom::propagate_box(net, &BoxTensor::point(inputs), 1.0)?;
    let b = trace
        .boxes
        .get(layer)
        .ok_or(Error::Index { what: "layer", index: layer, len: trace.boxes.len() })?;
    CentreDistribution::empirical(b.centre.data().to_vec())
}
