//! Stage orchestration: synth/ingest, dFNC, training, evaluation, CAMs and
//! the figure report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use stdfnc::dfnc::{dfnc, read_timecourse, sidecar_path, write_dfnc_bin, write_timecourse_bin, DfncSequence, DomainPartition, NetworkTimecourse};
use stdfnc::eval::{classification_metrics, confusion_counts, mean_scores_by_group, paired_ttest, GroupScoreReport, MetricsRecord, TTest};
use stdfnc::graph::Graph;
use stdfnc::interpret::{
    class_activation_map, confidence_fidelity, default_cam_layer, domain_aggregate, mean_map, random_map_fidelity, threshold_difference_map, CamRegistry, DifferenceMap, DomainSaliency,
    SaliencyMap,
};
use stdfnc::model::{AttentionRecord, Mode, Model, ModelParams};
use stdfnc::seed;
use stdfnc::synth::{generate_cohort, labels_csv, verify_planted_effect, EffectTable};
use stdfnc::train::{stratified_kfold, train_fold, FoldPlan, TrainHistory};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::report::{heatmap_svg, metrics_csv, read_metrics_csv, RunDir, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Dfnc,
    Train,
    Eval,
    Cam,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Synth, Stage::Dfnc, Stage::Train, Stage::Eval, Stage::Cam, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Dfnc => "dfnc",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Cam => "cam",
            Stage::Report => "report",
        }
    }
}

pub struct Subject {
    pub id: String,
    pub group: String,
    pub subgroup: String,
    pub label: usize,
    pub timecourse: NetworkTimecourse,
}

/// Subjects on either side of the design, their dFNC and the fold plan.
pub struct Prepared {
    pub subjects: Vec<Subject>,
    pub partition: DomainPartition,
    pub effects: Option<EffectTable>,
    labels_csv: Option<String>,
    pub dfnc: Vec<DfncSequence>,
    pub model: Model,
    pub plan: FoldPlan,
}

impl Prepared {
    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// Subgroup tags in order of first appearance.
    pub fn subgroups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.subjects {
            if !out.contains(&s.subgroup) {
                out.push(s.subgroup.clone());
            }
        }
        out
    }
}

pub fn stage_seed(config: &ExperimentConfig, stage: &str, index: Option<usize>) -> u64 {
    match index {
        Some(i) => seed::derive(config.seed, &[seed::tag(stage), i as u64]),
        None => seed::derive(config.seed, &[seed::tag(stage)]),
    }
}

fn side(config: &ExperimentConfig, group: &str, subgroup: &str) -> Option<usize> {
    let hit = |names: &[String]| names.iter().any(|n| n == group || n == subgroup);
    if hit(&config.design.positive) {
        Some(1)
    } else if hit(&config.design.negative) {
        Some(0)
    } else {
        None
    }
}

fn read_labels(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| CliError::format(path, "empty labels file"))?.split(',').map(str::trim).collect();
    if header.len() < 2 || header[0] != "subject_id" || header[1] != "group" {
        return Err(CliError::format(path, "labels header must start with `subject_id,group`"));
    }
    let sub_col = header.iter().position(|h| *h == "subgroup");
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != header.len() {
            return Err(CliError::format(path, format!("row {} has {} fields, header has {}", i + 2, f.len(), header.len())));
        }
        let sub = sub_col.map(|c| f[c]).unwrap_or(f[1]);
        out.push((f[0].to_string(), f[1].to_string(), sub.to_string()));
    }
    Ok(out)
}

/// Loads or generates the subjects, computes their dFNC and plans the folds.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (subjects, partition, effects, labels) = match &config.data {
        DataSource::Synth { cohort } => {
            let c = generate_cohort(cohort, stage_seed(config, "synth", None))?;
            let effects = verify_planted_effect(&c, &cohort.partition)?;
            let labels = labels_csv(&c);
            let subjects = c
                .subjects
                .into_iter()
                .filter_map(|s| {
                    side(config, &s.group, &s.subgroup).map(|label| Subject { id: s.id, group: s.group, subgroup: s.subgroup, label, timecourse: s.timecourse })
                })
                .collect();
            (subjects, cohort.partition.clone(), Some(effects), Some(labels))
        }
        DataSource::Files { labels, timecourses, tr_seconds, partition } => {
            let mut subjects = Vec::new();
            for (id, group, subgroup) in read_labels(labels)? {
                let Some(label) = side(config, &group, &subgroup) else { continue };
                let csv = timecourses.join(format!("{id}.csv"));
                let path = if csv.exists() { csv } else { timecourses.join(format!("{id}.bin")) };
                let timecourse = read_timecourse(&path, *tr_seconds)?;
                subjects.push(Subject { id, group, subgroup, label, timecourse });
            }
            (subjects, partition.clone(), None, None)
        }
    };
    if subjects.is_empty() {
        return Err(CliError::Config("no subject matches either side of the design".into()));
    }
    let n = partition.n_networks();
    if let Some(s) = subjects.iter().find(|s| s.timecourse.networks() != n) {
        return Err(CliError::Config(format!("subject {} has {} networks, the partition covers {n}", s.id, s.timecourse.networks())));
    }
    let dfnc: Vec<DfncSequence> = subjects.iter().map(|s| dfnc(&s.timecourse, &config.dfnc)).collect::<stdfnc::Result<_>>()?;
    let w = dfnc[0].n_windows();
    if let Some((s, d)) = subjects.iter().zip(&dfnc).find(|(_, d)| d.n_windows() != w) {
        return Err(CliError::Config(format!("subject {} has {} windows, expected {w}; time courses must share a length", s.id, d.n_windows())));
    }
    let model = Model::new(config.model.model_config(n, w, stage_seed(config, "init", None)))?;
    let labels_vec: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let plan = stratified_kfold(&labels_vec, config.folds, stage_seed(config, "folds", None))?;
    Ok(Prepared { subjects, partition, effects, labels_csv: labels, dfnc, model, plan })
}

/// Runs `job(i)` for `0..count` on up to `threads` workers; results come back
/// in index order.
fn parallel<T: Send>(count: usize, threads: usize, job: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = threads.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = job(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

fn checkpoint_rel(fold: usize) -> String {
    format!("checkpoints/fold{}.ckpt", fold + 1)
}

fn rel_of(run: &RunDir, path: &Path) -> String {
    path.strip_prefix(run.root()).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn stage_synth(config: &ExperimentConfig, p: &Prepared, run: &mut RunDir) -> Result<bool> {
    let (Some(labels), Some(effects)) = (&p.labels_csv, &p.effects) else { return Ok(false) };
    run.set_seed("synth", stage_seed(config, "synth", None));
    run.write("synth", "synth/labels.csv", labels)?;
    run.write_json("synth", "synth/effects.json", effects)?;
    for s in &p.subjects {
        let path = run.prepare(&format!("synth/timecourses/{}.bin", s.id))?;
        write_timecourse_bin(&path, &s.timecourse)?;
        let (a, b) = (rel_of(run, &path), rel_of(run, &sidecar_path(&path)));
        run.record("synth", &a);
        run.record("synth", &b);
    }
    Ok(true)
}

fn stage_dfnc(p: &Prepared, run: &mut RunDir) -> Result<()> {
    for (s, d) in p.subjects.iter().zip(&p.dfnc) {
        let path = run.prepare(&format!("dfnc/{}.bin", s.id))?;
        write_dfnc_bin(&path, d)?;
        let (a, b) = (rel_of(run, &path), rel_of(run, &sidecar_path(&path)));
        run.record("dfnc", &a);
        run.record("dfnc", &b);
    }
    Ok(())
}

fn examples<'a>(p: &'a Prepared, idx: &[usize]) -> Vec<(&'a DfncSequence, usize)> {
    idx.iter().map(|&i| (&p.dfnc[i], p.subjects[i].label)).collect()
}

fn stage_train(config: &ExperimentConfig, p: &Prepared, run: &mut RunDir, threads: usize) -> Result<Vec<TrainHistory>> {
    let folds: BTreeMap<String, Vec<String>> =
        (0..p.plan.k()).map(|f| (format!("fold{}", f + 1), p.plan.folds[f].iter().map(|&i| p.subjects[i].id.clone()).collect())).collect();
    run.set_seed("folds", p.plan.seed);
    run.write_json("train", "folds.json", &folds)?;
    let results = parallel(p.plan.k(), threads, |f| {
        let (tr, va) = p.plan.split(f);
        let s = stage_seed(config, "train", Some(f));
        let (params, history) = train_fold(&p.model, &examples(p, &tr), &examples(p, &va), &config.train, s)?;
        Ok((params, history, s))
    })?;
    let mut histories = Vec::new();
    for (f, (params, history, s)) in results.into_iter().enumerate() {
        run.set_seed(&format!("train.fold{}", f + 1), s);
        let mut model_config = p.model.config().clone();
        model_config.seed = seed::derive(s, &[seed::tag("init")]);
        let path = run.prepare(&checkpoint_rel(f))?;
        save_checkpoint(&path, &Checkpoint { config: model_config, params, optimizer: None, seed: s, fold: f })?;
        run.record("train", &checkpoint_rel(f));
        run.write_json("train", &format!("histories/fold{}.json", f + 1), &history)?;
        histories.push(history);
    }
    Ok(histories)
}

fn load_fold(p: &Prepared, run: &RunDir, f: usize) -> Result<(Model, ModelParams)> {
    let ckpt = load_checkpoint(&run.path(&checkpoint_rel(f)))?;
    if ckpt.fold != f {
        return Err(CliError::format(run.path(&checkpoint_rel(f)), format!("holds fold {} instead of {}", ckpt.fold, f)));
    }
    let model = Model::with_normalizer(ckpt.config, p.model.normalizer())?;
    if model.config().n_networks != p.model.config().n_networks || model.config().n_windows != p.model.config().n_windows {
        return Err(CliError::Config("checkpoint extents do not match the data; rerun the train stage".into()));
    }
    Ok((model, ckpt.params))
}

/// Output scores and attention maps for each subject.
pub fn scores_and_attention(model: &Model, params: &ModelParams, inputs: &[&DfncSequence]) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
    let mut scores = Vec::with_capacity(inputs.len());
    let mut records = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(16) {
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g, params);
        let x = g.constant(model.stack_inputs(chunk)?);
        let trace = model.forward_graph(&mut g, &bound, x, &mut Mode::Eval)?;
        scores.extend(g.value(trace.logits).data().iter().map(|&z| stdfnc::model::sigmoid(z)));
        records.extend(model.attention_records(&g, &trace, false));
    }
    Ok((scores, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub fold: usize,
    pub metrics: MetricsRecord,
    pub group_scores: GroupScoreReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAttention {
    pub group: String,
    /// `N x N`.
    pub spatial: Vec<f64>,
    /// `W x W`.
    pub temporal: Vec<f64>,
}

fn stage_eval(config: &ExperimentConfig, p: &Prepared, run: &mut RunDir, threads: usize) -> Result<Vec<FoldEval>> {
    let groups = p.subgroups();
    let per_fold = parallel(p.plan.k(), threads, |f| {
        let (model, params) = load_fold(p, run, f)?;
        let val = &p.plan.folds[f];
        let inputs: Vec<&DfncSequence> = val.iter().map(|&i| &p.dfnc[i]).collect();
        let (scores, attn) = scores_and_attention(&model, &params, &inputs)?;
        Ok((scores, attn))
    })?;

    let mut folds = Vec::new();
    let mut predictions = String::from("fold,subject_id,group,subgroup,label,score,prediction\n");
    for (f, (scores, attn)) in per_fold.iter().enumerate() {
        let val = &p.plan.folds[f];
        let labels: Vec<u8> = val.iter().map(|&i| p.subjects[i].label as u8).collect();
        let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= config.train.threshold)).collect();
        let metrics = classification_metrics(&confusion_counts(&labels, &preds)?)?;
        let tags: Vec<&str> = val.iter().map(|&i| p.subjects[i].subgroup.as_str()).collect();
        let declared: Vec<&str> = groups.iter().map(String::as_str).filter(|g| tags.contains(g)).collect();
        let group_scores = mean_scores_by_group(scores, &tags, &declared)?;
        for (k, &i) in val.iter().enumerate() {
            let s = &p.subjects[i];
            let _ = writeln!(predictions, "{},{},{},{},{},{:.6},{}", f + 1, s.id, s.group, s.subgroup, s.label, scores[k], preds[k]);
        }
        let mut attention = Vec::new();
        for g in &declared {
            let members: Vec<&AttentionRecord> = attn.iter().zip(&tags).filter(|(_, t)| *t == g).map(|(a, _)| a).collect();
            let spatial = mean_map(&members.iter().map(|a| a.attn_s.as_slice()).collect::<Vec<_>>())?;
            let temporal = mean_map(&members.iter().map(|a| a.attn_t.as_slice()).collect::<Vec<_>>())?;
            attention.push(GroupAttention { group: g.to_string(), spatial, temporal });
        }
        run.write_json("eval", &format!("attention/fold{}.json", f + 1), &attention)?;
        folds.push(FoldEval { fold: f, metrics, group_scores });
    }
    let records: Vec<MetricsRecord> = folds.iter().map(|f| f.metrics).collect();
    run.write("eval", "metrics.csv", metrics_csv(&records)?)?;
    run.write("eval", "predictions.csv", predictions)?;
    let group_scores: Vec<&GroupScoreReport> = folds.iter().map(|f| &f.group_scores).collect();
    run.write_json("eval", "group_scores.json", &group_scores)?;

    if let Some(baseline) = &config.baseline_metrics {
        let theirs = read_metrics_csv(baseline)?;
        if theirs.len() != records.len() {
            return Err(CliError::Config(format!("baseline has {} folds, this run has {}", theirs.len(), records.len())));
        }
        let mut tests: BTreeMap<&str, TTest> = BTreeMap::new();
        for (k, name) in ["acc", "f1", "precision", "spec", "sens"].into_iter().enumerate() {
            let a: Vec<f64> = records.iter().map(|r| r.columns()[k]).collect();
            let b: Vec<f64> = theirs.iter().map(|r| r[k]).collect();
            tests.insert(name, paired_ttest(&a, &b)?);
        }
        run.write_json("eval", "ttest.json", &tests)?;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldCam {
    pub fold: usize,
    pub method: String,
    pub layer: usize,
    /// Mean per-subject map of each subgroup, `N x N`.
    pub group_maps: BTreeMap<String, Vec<f64>>,
    /// Negative side minus positive side.
    pub difference: DifferenceMap,
    pub domain_difference: DomainSaliency,
    /// Mean masking fidelity of each registered CAM method.
    pub fidelity: BTreeMap<String, f64>,
    /// Mean fidelity of random maps averaged over the configured seed count.
    pub random_fidelity: f64,
    pub all_zero_maps: usize,
}

fn stage_cam(config: &ExperimentConfig, p: &Prepared, run: &mut RunDir, threads: usize) -> Result<Vec<FoldCam>> {
    let registry = CamRegistry::default();
    let chosen = registry.get(&config.interpret.method)?;
    let s = &config.interpret;
    let n = p.partition.n_networks();
    let cams = parallel(p.plan.k(), threads, |f| {
        let (model, params) = load_fold(p, run, f)?;
        let layer = s.layer.unwrap_or_else(|| default_cam_layer(&model));
        let root = stage_seed(config, "cam", Some(f));
        let val = &p.plan.folds[f];
        let mut maps: Vec<SaliencyMap> = Vec::new();
        let mut fidelity: BTreeMap<String, f64> = BTreeMap::new();
        let mut random = 0.0;
        for (k, &i) in val.iter().enumerate() {
            for name in registry.names() {
                let method = registry.get(&name)?;
                let map = class_activation_map(&model, &params, &p.dfnc[i], layer, s.target, method.as_ref())?;
                *fidelity.entry(name.clone()).or_insert(0.0) += confidence_fidelity(&model, &params, &p.dfnc[i], &map, &s.fidelity_fractions)? / val.len() as f64;
                if name == chosen.name() {
                    maps.push(map);
                }
            }
            let class = maps[k].class;
            random += random_map_fidelity(&model, &params, &p.dfnc[i], class, &s.fidelity_fractions, s.random_maps, seed::derive(root, &[k as u64]))? / val.len() as f64;
        }
        let mut group_maps = BTreeMap::new();
        for g in p.subgroups() {
            let members: Vec<&[f64]> = val.iter().zip(&maps).filter(|(&i, _)| p.subjects[i].subgroup == g).map(|(_, m)| m.values.as_slice()).collect();
            if !members.is_empty() {
                group_maps.insert(g, mean_map(&members)?);
            }
        }
        let side_maps = |label: usize| -> Vec<&[f64]> { val.iter().zip(&maps).filter(|(&i, _)| p.subjects[i].label == label).map(|(_, m)| m.values.as_slice()).collect() };
        let difference = threshold_difference_map(&side_maps(0), &side_maps(1), n, s.difference_threshold)?;
        let domain_difference = domain_aggregate(&difference.normalized, n, &p.partition)?;
        let all_zero_maps = maps.iter().filter(|m| m.all_zero).count();
        Ok(FoldCam { fold: f, method: chosen.name().to_string(), layer, group_maps, difference, domain_difference, fidelity, random_fidelity: random, all_zero_maps })
    })?;
    for (f, cam) in cams.iter().enumerate() {
        run.set_seed(&format!("cam.fold{}", f + 1), stage_seed(config, "cam", Some(f)));
        run.write_json("cam", &format!("cam/fold{}.json", f + 1), cam)?;
    }
    Ok(cams)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

fn file_tag(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn stage_report(p: &Prepared, run: &mut RunDir) -> Result<()> {
    let n = p.partition.n_networks();
    let mut summary = String::from("# Run summary\n\n");
    let metrics = run.path("metrics.csv");
    if metrics.exists() {
        let text = fs::read_to_string(&metrics).map_err(|e| CliError::io(&metrics, e))?;
        summary.push_str("## Cross-validated metrics (%)\n\n```\n");
        summary.push_str(&text);
        summary.push_str("```\n\n");
    }
    for f in 0..p.plan.k() {
        let cam_path = run.path(&format!("cam/fold{}.json", f + 1));
        if cam_path.exists() {
            let cam: FoldCam = read_json(&cam_path)?;
            let shown: Vec<f64> = cam.difference.normalized.iter().zip(&cam.difference.retained).map(|(v, k)| if *k { *v } else { 0.0 }).collect();
            let title = format!("Fold {}: negative minus positive {} (|v| >= {})", f + 1, cam.method, cam.difference.threshold);
            run.write("report", &format!("report/fold{}_difference.svg", f + 1), heatmap_svg(&shown, n, &p.partition, 1.0, &title)?)?;
            for (g, m) in &cam.group_maps {
                let title = format!("Fold {}: mean {} map, {g}", f + 1, cam.method);
                run.write("report", &format!("report/fold{}_cam_{}.svg", f + 1, file_tag(g)), heatmap_svg(m, n, &p.partition, 1.0, &title)?)?;
            }
            let _ = writeln!(summary, "## Fold {} CAM ({})\n", f + 1, cam.method);
            let _ = writeln!(summary, "Top domain pairs of the group difference:\n");
            for (a, b, v) in cam.domain_difference.ranked_pairs().iter().take(3) {
                let _ = writeln!(summary, "- {a}-{b}: {v:.3}");
            }
            let _ = writeln!(summary, "\nMasking fidelity:\n");
            for (m, v) in &cam.fidelity {
                let _ = writeln!(summary, "- {m}: {v:.4}");
            }
            let _ = writeln!(summary, "- random: {:.4}\n", cam.random_fidelity);
        }
        let attn_path = run.path(&format!("attention/fold{}.json", f + 1));
        if attn_path.exists() {
            let groups: Vec<GroupAttention> = read_json(&attn_path)?;
            for g in groups {
                let bound = g.spatial.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
                let title = format!("Fold {}: spatial attention, {}", f + 1, g.group);
                run.write("report", &format!("report/fold{}_attention_{}.svg", f + 1, file_tag(&g.group)), heatmap_svg(&g.spatial, n, &p.partition, bound, &title)?)?;
            }
        }
    }
    run.write("report", "report/summary.md", summary)?;
    Ok(())
}

/// Everything a full run computed.
#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub effects: Option<EffectTable>,
    pub histories: Vec<TrainHistory>,
    pub folds: Vec<FoldEval>,
    pub cams: Vec<FoldCam>,
    pub manifest: RunManifest,
}

/// Runs one stage, recording its outcome in the manifest. Train, eval and
/// cam results are returned through `summary` when given.
pub fn run_stage(config: &ExperimentConfig, p: &Prepared, run: &mut RunDir, stage: Stage, threads: usize, summary: Option<&mut RunSummary>) -> Result<()> {
    let name = stage.name();
    run.begin(name);
    let outcome = (|| -> Result<()> {
        match stage {
            Stage::Synth => {
                if !stage_synth(config, p, run)? {
                    run.skip(name)?;
                }
            }
            Stage::Dfnc => stage_dfnc(p, run)?,
            Stage::Train => {
                let h = stage_train(config, p, run, threads)?;
                if let Some(s) = summary {
                    s.histories = h;
                }
            }
            Stage::Eval => {
                let e = stage_eval(config, p, run, threads)?;
                if let Some(s) = summary {
                    s.folds = e;
                }
            }
            Stage::Cam => {
                let c = stage_cam(config, p, run, threads)?;
                if let Some(s) = summary {
                    s.cams = c;
                }
            }
            Stage::Report => stage_report(p, run)?,
        }
        Ok(())
    })();
    if run.manifest().stages.get(name).is_some_and(|r| r.status == "skipped") && outcome.is_ok() {
        return Ok(());
    }
    run.finish(name, outcome.as_ref().map(|_| ()))?;
    outcome.map_err(|e| CliError::Stage { stage: name.to_string(), source: Box::new(e) })
}

/// The whole pipeline into `config.output`.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<RunSummary> {
    let mut run = RunDir::open(&config.output)?;
    run.set_seed("root", config.seed);
    let p = match prepare(config) {
        Ok(p) => p,
        Err(e) => {
            run.begin("prepare");
            run.finish("prepare", Err(&e))?;
            return Err(CliError::Stage { stage: "prepare".into(), source: Box::new(e) });
        }
    };
    let mut summary = RunSummary { run_dir: config.output.clone(), effects: p.effects.clone(), histories: Vec::new(), folds: Vec::new(), cams: Vec::new(), manifest: RunManifest::default() };
    run.write("config", "config.json", config.to_json() + "\n")?;
    run.finish("config", Ok(()))?;
    for stage in Stage::ALL {
        run_stage(config, &p, &mut run, stage, threads, Some(&mut summary))?;
    }
    summary.manifest = run.manifest().clone();
    Ok(summary)
}
