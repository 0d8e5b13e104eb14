//! Scenario-wise accuracy, comparison baselines, the ablation suite, the
//! top-k sweep and uncertainty dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csmf::{FusionDecision, FusionStrategy};
use crate::dataset::{make_eval_scenarios, scenario_membership, MmhclDataset, MultimodalSample, Scenario, Scenarios};
use crate::numerics::argmax;
use crate::semantic_space::ClassCatalog;
use crate::training::{train, train_fc_baseline, train_unimodal, ModelState, Predictor, TrainConfig, UnimodalModel};
use crate::{Error, Execution, Modality, Result};

/// One prediction of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub dominant: Option<Modality>,
    pub scenarios: Vec<Scenario>,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub scenario: Scenario,
    /// Percentage in `[0, 100]`.
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    #[serde(default)]
    pub fingerprint: String,
    #[serde(default)]
    pub seed: u64,
    /// Non-empty scenarios in canonical order.
    pub scores: Vec<ScenarioScore>,
    /// Scenarios without samples; excluded from `scores`.
    #[serde(default)]
    pub empty: Vec<Scenario>,
}

impl MetricsReport {
    pub fn accuracy(&self, s: Scenario) -> Option<f64> {
        self.scores.iter().find(|x| x.scenario == s).map(|x| x.accuracy)
    }

    pub fn count(&self, s: Scenario) -> usize {
        self.scores.iter().find(|x| x.scenario == s).map_or(0, |x| x.count)
    }

    pub fn with_identity(mut self, fingerprint: &str, seed: u64) -> Self {
        self.fingerprint = fingerprint.to_string();
        self.seed = seed;
        self
    }
}

/// Pure reduction of per-sample records into scenario accuracies.
pub fn aggregate(name: &str, records: &[SampleRecord]) -> MetricsReport {
    let mut tally: BTreeMap<Scenario, (usize, usize)> = Scenario::ALL.iter().map(|s| (*s, (0, 0))).collect();
    for r in records {
        for s in &r.scenarios {
            let t = tally.get_mut(s).expect("every scenario tallied");
            t.0 += usize::from(r.correct());
            t.1 += 1;
        }
    }
    let mut scores = Vec::new();
    let mut empty = Vec::new();
    for (scenario, (correct, count)) in tally {
        if count == 0 {
            empty.push(scenario);
        } else {
            scores.push(ScenarioScore {
                scenario,
                accuracy: 100.0 * correct as f64 / count as f64,
                correct,
                count,
            });
        }
    }
    MetricsReport {
        name: name.to_string(),
        fingerprint: String::new(),
        seed: 0,
        scores,
        empty,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<SampleRecord>,
}

/// Predicts every test sample that belongs to at least one scenario. Samples
/// are processed concurrently under [`Execution::Parallel`]; the reduction is
/// sequential, so both modes give identical reports.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    ds: &MmhclDataset,
    scenarios: &Scenarios,
    exec: Execution,
) -> Result<Evaluation> {
    let mut member: BTreeMap<usize, Vec<Scenario>> = BTreeMap::new();
    for (s, idx) in &scenarios.members {
        for &i in idx {
            member.entry(i).or_default().push(*s);
        }
    }
    let work: Vec<(usize, Vec<Scenario>)> = member.into_iter().collect();
    for (i, _) in &work {
        if *i >= ds.test.len() {
            return Err(Error::InvalidArgument(format!(
                "scenario index {i} beyond {} test samples",
                ds.test.len()
            )));
        }
    }
    for s in scenarios.empty() {
        log::warn!("scenario {s} is empty and omitted from the report");
    }
    let records = exec
        .map(&work, |(i, sc)| {
            let sample = &ds.test[*i];
            predictor.predict_sample(sample).map(|d| SampleRecord {
                id: sample.id.clone(),
                label: sample.label,
                predicted: d.predicted_class,
                dominant: d.dominant,
                scenarios: sc.clone(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report: aggregate(&predictor.name(), &records),
        records,
    })
}

pub fn write_records_csv(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    w.write_record(["id", "label", "predicted", "correct", "dominant", "scenarios"])
        .and_then(|_| {
            for r in records {
                let scen: Vec<&str> = r.scenarios.iter().map(|s| s.name()).collect();
                w.write_record([
                    r.id.clone(),
                    r.label.to_string(),
                    r.predicted.to_string(),
                    u8::from(r.correct()).to_string(),
                    r.dominant.map_or(String::new(), |m| m.to_string()),
                    scen.join(";"),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::load(path, e.to_string()))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        let bad = |what: &str| {
            Error::load(
                path,
                format!("bad {what} in `{}`", rec.iter().collect::<Vec<_>>().join(",")),
            )
        };
        let dominant = match &rec[4] {
            "" => None,
            "A" => Some(Modality::A),
            "B" => Some(Modality::B),
            _ => return Err(bad("dominant")),
        };
        let scenarios = rec[5]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| Scenario::from_name(s).ok_or_else(|| bad("scenario")))
            .collect::<Result<Vec<_>>>()?;
        out.push(SampleRecord {
            id: rec[0].to_string(),
            label: rec[1].parse().map_err(|_| bad("label"))?,
            predicted: rec[2].parse().map_err(|_| bad("prediction"))?,
            dominant,
            scenarios,
        });
    }
    Ok(out)
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Aligned-column table, one row per report, one column per scenario.
pub fn format_reports(reports: &[MetricsReport]) -> String {
    let name_w = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let cols: Vec<Scenario> = Scenario::ALL
        .into_iter()
        .filter(|s| reports.iter().any(|r| r.accuracy(*s).is_some()))
        .collect();
    let widths: Vec<usize> = cols.iter().map(|s| s.name().len().max(6)).collect();
    let mut out = format!("{:<name_w$}", "model");
    for (s, w) in cols.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$}", s.name());
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<name_w$}", r.name);
        for (s, w) in cols.iter().zip(&widths) {
            match r.accuracy(*s) {
                Some(a) => {
                    let _ = write!(out, "  {a:>w$.2}");
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<name_w$}", "n");
    for (s, w) in cols.iter().zip(&widths) {
        let n = reports.first().map_or(0, |r| r.count(*s));
        let _ = write!(out, "  {n:>w$}");
    }
    out.push('\n');
    out
}

/// Mean of the two modalities' mean logits, whatever the model's flags.
pub fn average_fusion_baseline(model: &ModelState, sample: &MultimodalSample) -> Result<FusionDecision> {
    let b = model.bundles(sample)?;
    let half = |v: &[f64]| v.iter().map(|x| x / 2.0).collect::<Vec<_>>();
    FusionDecision::assemble(
        FusionStrategy::Average,
        None,
        half(&b.a.mean_logits),
        half(&b.b.mean_logits),
    )
}

/// [`average_fusion_baseline`] as a [`Predictor`].
pub struct AverageFusion<'a>(pub &'a ModelState);

impl Predictor for AverageFusion<'_> {
    fn name(&self) -> String {
        "average".into()
    }

    fn predict_sample(&self, sample: &MultimodalSample) -> Result<FusionDecision> {
        average_fusion_baseline(self.0, sample)
    }
}

/// Two independently trained single-modality models; the more confident
/// answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMax {
    pub model_a: UnimodalModel,
    pub model_b: UnimodalModel,
}

impl ConfidenceMax {
    pub fn train(ds: &MmhclDataset, catalog: &ClassCatalog, config: &TrainConfig) -> Result<Self> {
        Ok(ConfidenceMax {
            model_a: train_unimodal(ds, catalog, config, Modality::A)?,
            model_b: train_unimodal(ds, catalog, config, Modality::B)?,
        })
    }
}

/// The modality whose `p*` has the larger maximum; ties go to A.
pub fn more_confident(p_a: &[f64], p_b: &[f64]) -> Modality {
    let ca = p_a[argmax(p_a)];
    let cb = p_b[argmax(p_b)];
    if cb > ca {
        Modality::B
    } else {
        Modality::A
    }
}

pub fn confidence_max_baseline(
    model_a: &UnimodalModel,
    model_b: &UnimodalModel,
    sample: &MultimodalSample,
) -> Result<FusionDecision> {
    if model_a.modality() != Modality::A || model_b.modality() != Modality::B {
        return Err(Error::InvalidArgument(
            "confidence-max needs an A model and a B model".into(),
        ));
    }
    let bundle_a = sample
        .feat_a
        .as_deref()
        .map(|x| model_a.predict_bundle(x))
        .transpose()?;
    let bundle_b = sample
        .feat_b
        .as_deref()
        .map(|x| model_b.predict_bundle(x))
        .transpose()?;
    let (chosen, bundle) = match (bundle_a, bundle_b) {
        (Some(a), None) => (Modality::A, a),
        (None, Some(b)) => (Modality::B, b),
        (Some(a), Some(b)) => match more_confident(&a.mean_probs, &b.mean_probs) {
            Modality::A => (Modality::A, a),
            Modality::B => (Modality::B, b),
        },
        (None, None) => {
            return Err(Error::InvalidArgument(format!(
                "sample `{}` has no modality",
                sample.id
            )))
        }
    };
    let zeros = vec![0.0; bundle.mean_logits.len()];
    FusionDecision::assemble(FusionStrategy::ConfidenceMax, Some(chosen), bundle.mean_logits, zeros)
}

impl Predictor for ConfidenceMax {
    fn name(&self) -> String {
        "confidence-max".into()
    }

    fn predict_sample(&self, sample: &MultimodalSample) -> Result<FusionDecision> {
        confidence_max_baseline(&self.model_a, &self.model_b, sample)
    }
}

/// The trained models behind an ablation run, kept so callers can reuse them.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub reports: Vec<MetricsReport>,
    pub model: ModelState,
}

/// `B`, `B+O`, `B+O+D` and `B+O+D+C` on shared data and seed. The three OSRS
/// variants share one trained model and differ only at inference.
pub fn ablation_suite(ds: &MmhclDataset, catalog: &ClassCatalog, base: &TrainConfig) -> Result<Ablation> {
    let scenarios = make_eval_scenarios(ds)?;
    let exec = base.execution;
    let fc = train_fc_baseline(ds, base)?;
    let full_cfg = TrainConfig {
        use_osrs: true,
        use_dmss: true,
        use_csmf: true,
        ..base.clone()
    };
    let model = train(ds, catalog, &full_cfg)?;
    let mut reports = vec![evaluate(&fc, ds, &scenarios, exec)?.report];
    for (dmss, csmf) in [(false, false), (true, false), (true, true)] {
        let variant = model.with_inference(TrainConfig {
            use_dmss: dmss,
            use_csmf: csmf,
            ..full_cfg.clone()
        })?;
        reports.push(evaluate(&variant, ds, &scenarios, exec)?.report);
    }
    Ok(Ablation { reports, model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` is the reference without similarity reweighting.
    pub k: Option<usize>,
    pub report: MetricsReport,
}

/// Re-prunes the similarity matrices for each k; no retraining. Invalid k are
/// skipped with a warning.
pub fn topk_sweep(model: &ModelState, ds: &MmhclDataset, k_values: &[usize]) -> Result<Vec<SweepRow>> {
    let scenarios = make_eval_scenarios(ds)?;
    let exec = model.config.execution;
    let n = model.catalog.len();
    let mut rows = Vec::new();
    let reference = model.with_inference(TrainConfig {
        use_csmf: false,
        use_dmss: true,
        use_osrs: true,
        ..model.config.clone()
    })?;
    let mut report = evaluate(&reference, ds, &scenarios, exec)?.report;
    report.name = "none".into();
    rows.push(SweepRow { k: None, report });
    for &k in k_values {
        if k == 0 || k > n {
            log::warn!("skipping top-k {k}: must lie in 1..={n}");
            continue;
        }
        let variant = model.with_inference(TrainConfig {
            top_k: k,
            use_csmf: true,
            use_dmss: true,
            use_osrs: true,
            ..model.config.clone()
        })?;
        let mut report = evaluate(&variant, ds, &scenarios, exec)?.report;
        report.name = format!("k={k}");
        rows.push(SweepRow { k: Some(k), report });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("k");
    for s in Scenario::ALL {
        out.push(',');
        out.push_str(s.name());
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.k.map_or("none".to_string(), |k| k.to_string()));
        for s in Scenario::ALL {
            out.push(',');
            if let Some(a) = r.report.accuracy(s) {
                out.push_str(&a.to_string());
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub id: String,
    pub label: usize,
    pub present_a: bool,
    pub present_b: bool,
    /// Modality whose seen set contains the label, when exactly one does.
    pub seen_by: Option<Modality>,
    pub u_a: f64,
    pub u_b: f64,
    pub inc_a: f64,
    pub inc_b: f64,
    pub dif_a: f64,
    pub dif_b: f64,
    pub dominant: Modality,
}

fn seen_by(model: &ModelState, label: usize) -> Option<Modality> {
    match (
        model.partition.is_seen(Modality::A, label),
        model.partition.is_seen(Modality::B, label),
    ) {
        (true, false) => Some(Modality::A),
        (false, true) => Some(Modality::B),
        _ => None,
    }
}

pub fn uncertainty_record(model: &ModelState, sample: &MultimodalSample) -> Result<UncertaintyRecord> {
    let b = model.bundles(sample)?;
    let r = crate::dmss::assess(&b.a, &b.b)?;
    Ok(UncertaintyRecord {
        id: sample.id.clone(),
        label: sample.label,
        present_a: sample.has(Modality::A),
        present_b: sample.has(Modality::B),
        seen_by: seen_by(model, sample.label),
        u_a: r.u.a,
        u_b: r.u.b,
        inc_a: r.inc.a,
        inc_b: r.inc.b,
        dif_a: r.dif.a,
        dif_b: r.dif.b,
        dominant: r.dominant,
    })
}

/// `n` samples drawn without replacement by a seeded shuffle; `n` larger than
/// the pool is clamped.
pub fn uncertainty_dump(
    model: &ModelState,
    samples: &[MultimodalSample],
    n: usize,
    seed: u64,
) -> Result<Vec<UncertaintyRecord>> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n > samples.len() {
        log::warn!(
            "requested {n} uncertainty rows but only {} samples exist",
            samples.len()
        );
    }
    idx.truncate(n);
    let exec = model.config.execution;
    exec.map(&idx, |&i| uncertainty_record(model, &samples[i]))
        .into_iter()
        .collect()
}

pub fn write_uncertainty_csv(rows: &[UncertaintyRecord], path: &Path) -> Result<()> {
    let mut out = String::from("id,label,present_A,present_B,seen_by,u_A,u_B,inc_A,inc_B,dif_A,dif_B,dominant\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.label,
            u8::from(r.present_a),
            u8::from(r.present_b),
            r.seen_by.map_or(String::new(), |m| m.to_string()),
            r.u_a,
            r.u_b,
            r.inc_a,
            r.inc_b,
            r.dif_a,
            r.dif_b,
            r.dominant
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceRate {
    pub hits: usize,
    pub considered: usize,
}

impl DominanceRate {
    pub fn fraction(&self) -> f64 {
        if self.considered == 0 {
            0.0
        } else {
            self.hits as f64 / self.considered as f64
        }
    }
}

/// On complete test samples whose label is seen by exactly one modality, how
/// often that modality has the strictly lower uncertainty.
pub fn own_seen_dominance(model: &ModelState, ds: &MmhclDataset) -> Result<DominanceRate> {
    let complete: Vec<&MultimodalSample> = ds.test.iter().filter(|s| s.is_complete()).collect();
    let rows = model
        .config
        .execution
        .map(&complete, |s| uncertainty_record(model, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rate = DominanceRate { hits: 0, considered: 0 };
    for r in rows {
        if let Some(m) = r.seen_by {
            rate.considered += 1;
            let (own, other) = match m {
                Modality::A => (r.u_a, r.u_b),
                Modality::B => (r.u_b, r.u_a),
            };
            rate.hits += usize::from(own < other);
        }
    }
    Ok(rate)
}

/// Scenario memberships recomputed for a single sample, for report checks.
pub fn memberships(ds: &MmhclDataset, sample: &MultimodalSample) -> Vec<Scenario> {
    scenario_membership(sample, &ds.partition)
}
