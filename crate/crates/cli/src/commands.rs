use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vpc_core::cache::{write_frames, write_json};
use vpc_core::codebook::{fit_kmeans, hard_assign, init_codebook, InitKind, KMeansConfig};
use vpc_core::diagnostics::{
    bound_sample, grad_suite_cases, objective_grad_check, random_bound_samples, summarize_bound, BoundSample,
};
use vpc_core::features::{extract_features, load_wav, normalize, FrameSequence, MelConfig, NormStats};
use vpc_core::numerics::{GradCheckConfig, Tensor};
use vpc_core::objectives::{Batch, BatchMask};
use vpc_core::probe::{probe_model, ProbeConfig, ProbeTargets, ProbeTask};
use vpc_core::synthdata::{frame_bayes_error, read_corpus, sample_corpus, write_corpus, CorpusIndex, HmmSpec, LoadedCorpus};
use vpc_core::trainer::{self, compare, load_model, Objective, RunRecord, SecondIterConfig, TrainConfig};
use vpc_core::Error;

use crate::config::{self, lookup, Entry};
use crate::run::{entries, check_seed_key, require_seed, resolve_path, Failure, Run};
use crate::Common;

fn resolved<T: Serialize + for<'de> Deserialize<'de>>(defaults: &T, entries: &[Entry]) -> Result<T, Failure> {
    config::resolve(defaults, entries).map_err(Failure::Config)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn validated(r: vpc_core::Result<()>) -> Result<(), Failure> {
    r.map_err(|e| Failure::config(e.to_string()))
}

fn load_corpus(dir: &Path) -> Result<LoadedCorpus, Failure> {
    Ok(read_corpus(&resolve_path(dir))?)
}

fn all_frames(seqs: &[FrameSequence]) -> vpc_core::Result<Tensor> {
    let refs: Vec<&Tensor> = seqs.iter().map(|s| &s.frames).collect();
    Tensor::vstack(&refs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeaturesConfig {
    mel: MelConfig,
    /// Standardize every dimension with corpus statistics.
    normalize: bool,
}

pub fn features(input: &Path, common: &Common) -> Result<(), Failure> {
    let entries = entries(common)?;
    let cfg = resolved(
        &FeaturesConfig {
            mel: MelConfig::default(),
            normalize: true,
        },
        &entries,
    )?;
    let input = resolve_path(input);
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(&input)
        .map_err(|e| Failure::from(Error::io(&input, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Failure::runtime("io", format!("no .wav files in {}", input.display())));
    }
    let mut run = Run::start("features", common, common.seed, to_value(&cfg))?;
    run.input("audio", &input);
    let result = (|| {
        let mut seqs = Vec::with_capacity(wavs.len());
        for p in &wavs {
            let id = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            seqs.push(extract_features(&load_wav(p)?, &cfg.mel, &id)?);
        }
        if cfg.normalize {
            let stats = NormStats::compute(&seqs)?;
            write_json(&run.out.join("norm_stats.json"), &stats)?;
            seqs = seqs.iter().map(|s| normalize(s, &stats)).collect::<vpc_core::Result<_>>()?;
        }
        let dir = run.out.join("corpus");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let index = CorpusIndex {
            ids: seqs.iter().map(|s| s.source_id.clone()).collect(),
            hmm: None,
            frame_rate_ms: seqs[0].frame_rate_ms,
        };
        write_json(&dir.join("corpus.json"), &index)?;
        for s in &seqs {
            write_frames(&dir, s)?;
        }
        let frames: usize = seqs.iter().map(FrameSequence::len).sum();
        Ok::<_, Error>(format!(
            "features: {} files, {frames} frames of dimension {}\n",
            seqs.len(),
            seqs[0].dim()
        ))
    })();
    run.finish(result.map_err(Failure::from))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SynthConfig {
    sequences: usize,
    min_frames: usize,
    max_frames: usize,
}

pub fn synth(common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "synth")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let cfg = resolved(
        &SynthConfig {
            sequences: 500,
            min_frames: 150,
            max_frames: 250,
        },
        &entries,
    )?;
    let run = Run::start("synth", common, Some(seed), to_value(&cfg))?;
    let result = (|| {
        let spec = HmmSpec::desk_default(seed);
        let corpus = sample_corpus(&spec, cfg.sequences, (cfg.min_frames, cfg.max_frames))?;
        write_corpus(&run.out.join("corpus"), Some(&spec), &corpus)?;
        let frames: usize = corpus.iter().map(|s| s.states.len()).sum();
        Ok::<_, Error>(format!(
            "synth: {} sequences, {frames} frames, {} states, frame Bayes error {:.4}\n",
            corpus.len(),
            spec.n_states,
            frame_bayes_error(&spec, &corpus)
        ))
    })();
    run.finish(result.map_err(Failure::from))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KmeansCmdConfig {
    k: usize,
    init: InitKind,
    lloyd: KMeansConfig,
}

pub fn kmeans(corpus: &Path, common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "kmeans")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let cfg = resolved(
        &KmeansCmdConfig {
            k: 8,
            init: InitKind::KMeansPlusPlus,
            lloyd: KMeansConfig::default(),
        },
        &entries,
    )?;
    let loaded = load_corpus(corpus)?;
    let mut run = Run::start("kmeans", common, Some(seed), to_value(&cfg))?;
    run.input("corpus", &resolve_path(corpus));
    let result = (|| {
        let data = all_frames(&loaded.frames)?;
        let start = init_codebook(&data, cfg.k, cfg.init, seed)?;
        let fit = fit_kmeans(&data, &start, &cfg.lloyd)?;
        let usage = hard_assign(&data, &fit.codebook)?.ids.iter().fold(vec![0usize; cfg.k], |mut c, &i| {
            c[i] += 1;
            c
        });
        write_json(&run.out.join("codebook.json"), &fit.codebook)?;
        write_json(
            &run.out.join("kmeans.json"),
            &json!({"distortions": fit.distortions, "iterations": fit.iterations, "usage": usage}),
        )?;
        Ok::<_, Error>(format!(
            "kmeans: K={} on {} frames, {} iterations, distortion {:.6}\n",
            cfg.k,
            data.rows(),
            fit.iterations,
            fit.distortion()
        ))
    })();
    run.finish(result.map_err(Failure::from))
}

fn parse_objective(raw: &str) -> Result<Objective, Failure> {
    raw.parse().map_err(|e: Error| Failure::config(e.to_string()))
}

fn training_summary(m: &trainer::TrainedModel) -> String {
    let r = &m.record;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "{}: {} steps in {:.1}s, step-0 -ELBO {}, final smoothed -ELBO {}\n",
        r.label,
        r.steps,
        r.wall_clock_secs,
        fmt(r.step0_neg_elbo),
        fmt(r.final_neg_elbo)
    )
}

pub fn pretrain(corpus: &Path, objective: Option<&str>, common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "pretrain")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let objective = match (objective, lookup(&entries, "objective")) {
        (Some(o), _) => parse_objective(o)?,
        (None, Some(Value::String(o))) => parse_objective(o)?,
        (None, Some(v)) => return Err(Failure::config(format!("objective must be a name, got {v}"))),
        (None, None) => Objective::MaskedVpc,
    };
    let loaded = load_corpus(corpus)?;
    let dim = loaded.frames.first().map_or(0, FrameSequence::dim);
    let mut cfg = resolved(&TrainConfig::desk(objective, dim, seed), &entries)?;
    cfg.objective = objective;
    validated(cfg.validate())?;
    let mut run = Run::start("pretrain", common, Some(seed), to_value(&cfg))?;
    run.input("corpus", &resolve_path(corpus));
    let result = trainer::pretrain(&loaded.frames, &cfg, Some(&run.out)).map(|m| training_summary(&m));
    run.finish(result.map_err(Failure::from))
}

pub fn second_iter(corpus: &Path, teacher: &Path, common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "second-iter")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let teacher_dir = resolve_path(teacher);
    let (teacher_store, teacher_cfg) = load_model(&teacher_dir)?;
    let loaded = load_corpus(corpus)?;
    let dim = loaded.frames.first().map_or(0, FrameSequence::dim);
    let mut defaults = TrainConfig::desk(Objective::MaskedVpc, dim, seed);
    defaults.second_iteration = Some(SecondIterConfig {
        teacher: teacher_dir.clone(),
        layer: 1,
        tau: 10.0,
        codebook_init: InitKind::KMeansPlusPlus,
    });
    let cfg = resolved(&defaults, &entries)?;
    validated(cfg.validate())?;
    let mut run = Run::start("second-iter", common, Some(seed), to_value(&cfg))?;
    run.input("corpus", &resolve_path(corpus));
    run.input("teacher", &teacher_dir);
    let result = trainer::second_iteration(&loaded.frames, &teacher_store, &teacher_cfg, &cfg, Some(&run.out))
        .map(|m| training_summary(&m));
    run.finish(result.map_err(Failure::from))
}

pub fn probe(corpus: &Path, checkpoint: &Path, common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "probe")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let cfg = resolved(&ProbeConfig::new(ProbeTask::FrameClassify, seed), &entries)?;
    validated(cfg.validate())?;
    let ck = resolve_path(checkpoint);
    let (store, model_cfg) = load_model(&ck)?;
    let loaded = load_corpus(corpus)?;
    let targets = match (cfg.task, &loaded.states, &loaded.aux) {
        (ProbeTask::FrameClassify, Some(states), _) => ProbeTargets::classes(states.clone()),
        (ProbeTask::FrameRegress, _, Some(aux)) => ProbeTargets::Values(aux.clone()),
        _ => return Err(Failure::runtime("missing_labels", "the corpus has no label sidecars for this task")),
    };
    let mut run = Run::start("probe", common, Some(seed), to_value(&cfg))?;
    run.input("corpus", &resolve_path(corpus));
    run.input("checkpoint", &ck);
    let result = (|| {
        let report = probe_model(&store, &model_cfg.encoder, &loaded.frames, &targets, &cfg)?;
        report.write(&run.out)?;
        let mut s = String::new();
        for l in &report.per_layer {
            let _ = writeln!(s, "layer {}: {:.4}", l.layer, l.error);
        }
        if let Some(b) = report.baseline_error {
            let _ = writeln!(s, "raw features: {b:.4}");
        }
        let _ = writeln!(s, "best layer {} with error {:.4}", report.best_layer, report.best_error);
        Ok::<_, Error>(s)
    })();
    run.finish(result.map_err(Failure::from))
}

pub fn compare(runs: &[PathBuf], common: &Common) -> Result<(), Failure> {
    let entries = entries(common)?;
    let cfg: Value = resolved(&json!({}), &entries)?;
    let mut records: Vec<RunRecord> = Vec::with_capacity(runs.len());
    let mut paths = Vec::with_capacity(runs.len());
    for r in runs {
        let p = resolve_path(r);
        let p = if p.is_dir() { p.join("run.json") } else { p };
        let text = std::fs::read(&p).map_err(|e| Failure::from(Error::io(&p, e)))?;
        records.push(serde_json::from_slice(&text).map_err(|e| Failure::from(Error::format(&p, e.to_string())))?);
        paths.push(p);
    }
    let mut run = Run::start("compare", common, common.seed, cfg)?;
    for (i, p) in paths.iter().enumerate() {
        run.input(&format!("run{i}"), p);
    }
    let result = (|| {
        let cmp = compare::compare_runs(&records)?;
        write_json(&run.out.join("comparison.json"), &cmp)?;
        let csv = run.out.join("comparison.csv");
        std::fs::write(&csv, cmp.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let mut s = String::new();
        for g in &cmp.groups {
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                s,
                "{:<40} runs {}  step-0 {}  final {}",
                g.group,
                g.runs,
                fmt(g.mean_step0_neg_elbo),
                fmt(g.mean_final_neg_elbo)
            );
        }
        for o in &cmp.orderings {
            if o.a_lower == Some(true) {
                let _ = writeln!(s, "{} < {}", o.a, o.b);
            }
        }
        Ok::<_, Error>(s)
    })();
    run.finish(result.map_err(Failure::from))
}

pub fn gradcheck(common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "gradcheck")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let mut cfg = resolved(&GradCheckConfig::default(), &entries)?;
    cfg.seed = seed;
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Failure::config("step and tolerance must be positive"));
    }
    let run = Run::start("gradcheck", common, Some(seed), to_value(&cfg))?;
    let result = (|| {
        let mut reports = Vec::new();
        let mut s = String::new();
        let mut failed = Vec::new();
        for (obj, est) in grad_suite_cases() {
            let r = objective_grad_check(obj, &est, seed, &cfg)?;
            let name = format!("{obj}/{}", est.name());
            let _ = writeln!(
                s,
                "{name:<28} {}  max rel error {:.2e}",
                if r.pass { "pass" } else { "FAIL" },
                r.max_rel_error
            );
            if !r.pass {
                failed.push(name.clone());
            }
            reports.push(json!({"case": name, "report": r}));
        }
        write_json(&run.out.join("gradcheck.json"), &reports)?;
        Ok::<_, Error>((s, failed))
    })();
    let result = match result {
        Ok((s, failed)) if failed.is_empty() => Ok(s),
        Ok((s, failed)) => {
            print!("{s}");
            Err(Failure::runtime("check_failed", format!("gradient check failed for {}", failed.join(", "))))
        }
        Err(e) => Err(e.into()),
    };
    run.finish(result)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BoundConfig {
    /// Random toy models, or batches drawn from the corpus.
    samples: usize,
    max_k: usize,
    max_t: usize,
    batch_size: usize,
    /// Soft-min temperature; the checkpoint's own when unset.
    tau: Option<f64>,
    tolerance: f64,
}

pub fn boundcheck(checkpoint: Option<&Path>, corpus: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let seed = require_seed(common, "boundcheck")?;
    let mut entries = entries(common)?;
    check_seed_key(&mut entries, seed)?;
    let cfg = resolved(
        &BoundConfig {
            samples: if checkpoint.is_some() { 20 } else { 1000 },
            max_k: 8,
            max_t: 16,
            batch_size: 4,
            tau: None,
            tolerance: 1e-9,
        },
        &entries,
    )?;
    if cfg.samples == 0 || cfg.batch_size == 0 || cfg.tau.is_some_and(|t| t <= 0.0) {
        return Err(Failure::config("samples and batch_size must be positive, tau positive when set"));
    }
    let model = match checkpoint {
        Some(ck) => {
            let dir = resolve_path(ck);
            let (store, model_cfg) = load_model(&dir)?;
            let loaded = load_corpus(corpus.expect("clap requires a corpus with a checkpoint"))?;
            Some((dir, store, model_cfg, loaded))
        }
        None => None,
    };
    let mut run = Run::start("boundcheck", common, Some(seed), to_value(&cfg))?;
    if let Some((dir, ..)) = &model {
        run.input("checkpoint", dir);
        run.input("corpus", &resolve_path(corpus.expect("checked")));
    }
    let result = (|| {
        let samples: Vec<BoundSample> = match &model {
            None => random_bound_samples(cfg.samples, cfg.max_k, cfg.max_t, seed)?,
            Some((_, store, model_cfg, loaded)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let seqs: Vec<FrameSequence> = loaded
                    .frames
                    .iter()
                    .map(|s| s.truncated(model_cfg.max_frames_per_utterance))
                    .collect();
                let tau = cfg.tau.unwrap_or(model_cfg.tau);
                (0..cfg.samples)
                    .map(|_| {
                        let pick: Vec<&FrameSequence> =
                            seqs.choose_multiple(&mut rng, cfg.batch_size.min(seqs.len())).collect();
                        let parts: Vec<(&str, &Tensor)> =
                            pick.iter().map(|s| (s.source_id.as_str(), &s.frames)).collect();
                        let batch = Batch::from_sequences(&parts)?;
                        let mask = BatchMask::sample(&batch, &model_cfg.mask, &mut rng)?;
                        bound_sample(store, &model_cfg.encoder, &batch, &mask, tau)
                    })
                    .collect::<vpc_core::Result<_>>()?
            }
        };
        let report = summarize_bound(&samples, cfg.tolerance);
        write_json(&run.out.join("boundcheck.json"), &json!({"report": report, "samples": samples}))?;
        Ok::<_, Error>(report)
    })();
    let result = match result {
        Ok(r) => {
            let s = format!(
                "boundcheck: {} samples, -ELBO - NLL min {:.3e} mean {:.3e}, posterior gap max {:.3e}\n",
                r.samples, r.min_gap, r.mean_gap, r.max_posterior_gap
            );
            if r.pass {
                Ok(s)
            } else {
                print!("{s}");
                Err(Failure::runtime(
                    "check_failed",
                    format!("bound violated: min gap {:e} below -{:e}", r.min_gap, r.tolerance),
                ))
            }
        }
        Err(e) => Err(e.into()),
    };
    run.finish(result)
}
