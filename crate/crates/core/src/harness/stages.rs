//! Individual pipeline stages as run by the CLI. Each stage recomputes its
//! cheap deterministic inputs from the config; the trained network is the
//! only artifact read back from disk.
//!
//! Output layout under the run directory:
//!
//! ```text
//! corpus/{train_K,enroll,calib,eval}/clip_NNN.wav   corpus/summary.json
//! enroll/userNN_sessionS.{wav,json}                 enroll/population.json
//! augment/summary.json                              augment/pairs/*.wav (write_audio)
//! train/net.json  train/meta.json
//! eval/roc_{chirp,playback,watermarked}.csv         eval/summary.json
//! watermark/patches/userNN_clipNNN.json             watermark/summary.json
//! sessions/{scenario}.jsonl  sessions/{scenario}.json
//! report.json  config.toml
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::intrusion::SessionRig;
use super::pipeline::{build_corpora, build_population, enroll, user_id, Prepared};
use super::report::{self, WatermarkStats};
use super::{conditions_of, evaluate_all, load_net, write_net, HarnessError, Scenario, Stager, StageResult, TrainMeta};
use super::ExperimentConfig;
use crate::augment::{self, Corpus};
use crate::rng::{self, label};
use crate::signal;
use crate::sounding::{self, IrSidecar};

fn write_json(path: &Path, value: &impl Serialize) -> StageResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_corpus(dir: &Path, corpus: &Corpus) -> StageResult<()> {
    std::fs::create_dir_all(dir)?;
    for (i, clip) in corpus.clips.iter().enumerate() {
        signal::write_wav(dir.join(format!("clip_{i:03}.wav")), clip)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CorpusSummary {
    name: String,
    kind: augment::CorpusKind,
    clips: usize,
    silence_fraction: Vec<f64>,
}

pub fn synth_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    let corpora = st.run("synth-corpus", || build_corpora(cfg))?;
    st.run("synth-corpus", || {
        let dir = out.join("corpus");
        let mut named: Vec<(String, &Corpus)> =
            corpora.train.iter().enumerate().map(|(k, c)| (format!("train_{k}"), c)).collect();
        named.push(("enroll".into(), &corpora.enroll));
        named.push(("calib".into(), &corpora.calib));
        named.push(("eval".into(), &corpora.eval));
        let mut summary = Vec::new();
        for (name, c) in named {
            write_corpus(&dir.join(&name), c)?;
            summary.push(CorpusSummary { name, kind: c.kind, clips: c.len(), silence_fraction: c.silence_fraction.clone() });
        }
        write_json(&dir.join("summary.json"), &summary)
    })
}

pub fn enroll_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    cfg.validate()?;
    let pop = st.run("enroll", || build_population(cfg))?;
    let enrollment = st.run("enroll", || enroll(cfg, &pop))?;
    st.run("enroll", || {
        let dir = out.join("enroll");
        std::fs::create_dir_all(&dir)?;
        for (u, ests) in enrollment.estimates.iter().enumerate() {
            for (s, est) in ests.iter().enumerate() {
                let sidecar = IrSidecar {
                    user_id: user_id(u),
                    session: s,
                    spec: cfg.sounding.chirp,
                    sample_rate: cfg.sample_rate(),
                    peak_index: est.peak_lag,
                    start_lag: est.start_lag,
                    taps: est.ir.taps.len(),
                    nmse: None,
                };
                sounding::export_ir(&dir.join(format!("{}_session{s}.wav", user_id(u))), est, &sidecar)?;
            }
        }
        write_json(&dir.join("population.json"), &pop.base)
    })
}

pub fn augment_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    cfg.validate()?;
    let p = st.run("augment", || Prepared::new(cfg))?;
    let samples = st.run("augment", || p.training_set())?;
    st.run("augment", || {
        let mut per_user: BTreeMap<String, usize> = BTreeMap::new();
        for s in &samples {
            *per_user.entry(user_id(s.label)).or_default() += 1;
        }
        if cfg.output.write_audio {
            let dir = out.join("augment/pairs");
            std::fs::create_dir_all(&dir)?;
            for (u, ests) in p.enrollment.estimates.iter().enumerate() {
                let seed = rng::derive(cfg.seed, &[label("augment-audio"), u as u64]);
                for (i, pair) in augment::make_pairs(&ests[0].ir, &p.corpora.enroll, p.noise(), seed, &user_id(u), "enroll0")?
                    .iter()
                    .enumerate()
                {
                    signal::write_wav(dir.join(format!("{}_{i:03}_playback.wav", user_id(u))), &pair.playback)?;
                    signal::write_wav(dir.join(format!("{}_{i:03}_response.wav", user_id(u))), &pair.response)?;
                }
            }
        }
        write_json(
            &out.join("augment/summary.json"),
            &serde_json::json!({ "samples": samples.len(), "per_user": per_user, "frames": samples.iter().map(|s| s.features.frames).sum::<usize>() }),
        )
    })
}

pub fn train_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    cfg.validate()?;
    let p = st.run("prepare", || Prepared::new(cfg))?;
    let samples = st.run("training_set", || p.training_set())?;
    let outcome = st.run("train", || p.train(&samples))?;
    st.run("train", || {
        write_net(out, &outcome.params, &TrainMeta { config_hash: cfg.hash(), samples: samples.len(), loss_trace: outcome.loss_trace.clone() })
    })
}

fn trained(cfg: &ExperimentConfig, st: &Stager, out: &Path) -> Result<crate::embedding::NetParams, HarnessError> {
    st.run("load-network", || {
        load_net(out, cfg).map_err(|e| format!("{e} (run `train` first with the same config)").into())
    })
}

pub fn eval_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    cfg.validate()?;
    let net = trained(cfg, &st, out)?;
    let ev = evaluate_all(cfg, &st, Some(net))?;
    st.run("eval", || {
        for (name, scores) in conditions_of(&ev.test) {
            report::write_roc(out, name, scores)?;
        }
        write_json(
            &out.join("eval/summary.json"),
            &serde_json::json!({ "config_hash": cfg.hash(), "calibration": ev.calibration, "conditions": ev.conditions }),
        )
    })
}

pub fn watermark_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    cfg.validate()?;
    let net = trained(cfg, &st, out)?;
    let ev = evaluate_all(cfg, &st, Some(net))?;
    st.run("watermark", || {
        let dir = out.join("watermark");
        std::fs::create_dir_all(dir.join("patches"))?;
        for r in &ev.test.patches {
            std::fs::write(dir.join(format!("patches/{}_clip{:03}.json", user_id(r.user), r.clip)), r.patch.to_json())?;
            if cfg.output.write_audio {
                let clip = &ev.prepared.corpora.eval.clips[r.clip];
                let (played, _) = crate::watermark::apply_patch(clip, &r.patch, &cfg.watermark)?;
                signal::write_wav(dir.join(format!("patches/{}_clip{:03}.wav", user_id(r.user), r.clip)), &played)?;
            }
        }
        write_json(&dir.join("summary.json"), &WatermarkStats::from_evaluations(&[&ev.calib, &ev.test]))
    })
}

pub fn session_stage(cfg: &ExperimentConfig, out: &Path, scenario: Scenario) -> Result<(), HarnessError> {
    let st = Stager::new(cfg);
    cfg.validate()?;
    let net = trained(cfg, &st, out)?;
    let ev = evaluate_all(cfg, &st, Some(net))?;
    st.run("session-sim", || {
        let rig = SessionRig::new(&ev.prepared, &ev.net, &ev.templates, &ev.test, ev.session_config())?;
        let (stats, traces) = rig.simulate(scenario)?;
        report::write_traces(out, scenario, &traces)?;
        write_json(&out.join(format!("sessions/{}.json", scenario.name())), &stats)
    })
}
