//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use matrix_lab::align_losses::{
    evaluate, load_checkpoint, save_checkpoint, train, write_loss_ledger, TrainExample, TrainState,
};
use matrix_lab::analysis::{analyze, clip_seed};
use matrix_lab::curation::{curate, synthetic_fixture, CurationFixture, CurationReport};
use matrix_lab::dit::embed::decode_latent;
use matrix_lab::dit::{AttentionEdits, NoiseSchedule, ToyDit};
use matrix_lab::grounding::{grounding_map, heatmap_svg, AasTable, Variant};
use matrix_lab::guidance::{noun_aas, sample_with_guidance, SampleInputs};
use matrix_lab::intergeneval::{
    default_colors, evaluate_clip, score_sheet, write_summary_csv, AnswerSheet, OracleJudge,
};
use matrix_lab::layer_select::{rank_variant, RankingReport};
use matrix_lab::synthetic_data::{
    generate, read_dataset, write_dataset, write_video, GeneratedClip,
};
use matrix_lab::{LabError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::Run;
use crate::{report, Command};

pub fn run(cfg: RunConfig, command: &Command) -> Result<()> {
    let mut cfg = cfg;
    apply_flags(&mut cfg, command);
    let cfg = cfg.finish()?;
    let dir = cfg.out_dir();
    match command {
        Command::GenData(_) => gen_data(&cfg, Run::start(dir, "gen-data")?),
        Command::Analyze(a) => analyze_cmd(&cfg, a, Run::start(dir, "analyze")?),
        Command::RankLayers(a) => rank_cmd(&cfg, a, Run::start(dir, "rank-layers")?),
        Command::Train(a) => train_cmd(&cfg, a, Run::start(dir, "train")?),
        Command::Sample(a) => sample_cmd(&cfg, a, Run::start(dir, "sample")?),
        Command::ScoreEval(a) => score_cmd(&cfg, a, Run::start(dir, "score-eval")?),
        Command::CurateSim(a) => curate_cmd(&cfg, a, Run::start(dir, "curate-sim")?),
        Command::Report(a) => report::run(&cfg, &a.runs, Run::start(dir, "report")?),
    }
}

/// Module flags override the file; they are folded in before validation so
/// the manifest records what actually ran.
fn apply_flags(cfg: &mut RunConfig, command: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    match command {
        Command::GenData(a) => {
            set(&mut cfg.data.n_clips, &a.n);
            cfg.data.inline_masks |= a.inline_masks;
        }
        Command::Analyze(a) => {
            set(&mut cfg.analysis.timesteps, &a.timesteps);
            if a.layers.is_some() {
                cfg.analysis.layers = a.layers.clone();
            }
        }
        Command::RankLayers(a) => {
            set(&mut cfg.rank.top_k_per_video, &a.top_k);
            set(&mut cfg.rank.select_k, &a.select_k);
        }
        Command::Train(a) => {
            set(&mut cfg.train.steps, &a.steps);
            set(&mut cfg.train.lr, &a.lr);
            set(&mut cfg.train.grounding_layers, &a.g_layers);
            set(&mut cfg.train.propagation_layers, &a.p_layers);
            set(&mut cfg.train.weights.lambda_sga, &a.lambda_sga);
            set(&mut cfg.train.weights.lambda_spa, &a.lambda_spa);
            set(&mut cfg.eval.held_out, &a.held_out);
        }
        Command::Sample(a) => {
            set(&mut cfg.guidance.scale, &a.guidance_scale);
            set(&mut cfg.guidance.cag_layers, &a.cag_layers);
            set(&mut cfg.guidance.cmg_layers, &a.cmg_layers);
            set(&mut cfg.guidance.cmg_strategy, &a.cmg_strategy);
            if a.guide_steps.is_some() {
                cfg.guidance.apply_steps = a.guide_steps.clone();
            }
        }
        Command::ScoreEval(a) => {
            set(&mut cfg.eval.lambda, &a.lambda);
            set(&mut cfg.eval.stride, &a.stride);
        }
        Command::CurateSim(a) => {
            set(&mut cfg.curation.sampled_frames, &a.sampled_frames);
            set(&mut cfg.curation.slots, &a.slots);
        }
        Command::Report(_) => {}
    }
}

/// Order-preserving map over at most `jobs` scoped threads.
fn par_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(run: &mut Run, name: &str, value: &T) -> Result<()> {
    run.write_text(name, &serde_json::to_string_pretty(value)?)
        .map(|_| ())
}

fn load_data(
    run: &mut Run,
    dir: &Path,
    cfg: &RunConfig,
) -> Result<(Vec<GeneratedClip>, Vec<TrainExample>)> {
    run.input(dir);
    let clips = read_dataset(dir)?;
    if clips.is_empty() {
        return Err(LabError::Empty(format!(
            "dataset {} has no clips",
            dir.display()
        )));
    }
    let examples = clips
        .iter()
        .map(|g| TrainExample::from_clip(&g.clip, &g.video, &cfg.model))
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, examples))
}

fn load_model(run: &mut Run, checkpoint: Option<&Path>, cfg: &RunConfig) -> Result<ToyDit> {
    match checkpoint {
        Some(p) => {
            run.input(p);
            let (state, _) = load_checkpoint(p)?;
            if state.model.config() != &cfg.model {
                return Err(LabError::config(
                    "checkpoint model config differs from the run's [model] section",
                ));
            }
            Ok(state.model)
        }
        None => ToyDit::new(cfg.model.clone()),
    }
}

fn gen_data(cfg: &RunConfig, mut run: Run) -> Result<()> {
    let clips = generate(cfg.data.n_clips, cfg.seed, &cfg.model)?;
    let data_dir = run.path("data");
    write_dataset(&data_dir, &clips, cfg.data.inline_masks)?;
    let mut files: Vec<_> = std::fs::read_dir(&data_dir)
        .map_err(|e| LabError::io(&data_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    for f in files {
        run.output(f);
    }
    println!("wrote {} clips to {}", clips.len(), data_dir.display());
    run.finish(cfg).map(|_| ())
}

fn analyze_cmd(cfg: &RunConfig, a: &crate::AnalyzeArgs, mut run: Run) -> Result<()> {
    let (_, examples) = load_data(&mut run, &a.data, cfg)?;
    let model = load_model(&mut run, a.checkpoint.as_deref(), cfg)?;
    let tables = par_map(cfg.jobs, &examples, |ex| {
        analyze(&model, std::slice::from_ref(ex), &cfg.analysis)
    })?;
    let mut table = AasTable::new();
    for t in tables {
        table.extend(t);
    }
    let p = run.path("aas.csv");
    table.write_csv(&p)?;
    run.output(p);
    if a.svg {
        heatmaps(cfg, &model, &examples[0], &mut run)?;
    }
    println!("{} AAS rows", table.rows.len());
    run.finish(cfg).map(|_| ())
}

fn heatmaps(cfg: &RunConfig, model: &ToyDit, ex: &TrainExample, run: &mut Run) -> Result<()> {
    let t = cfg.analysis.timesteps[0];
    let mc = &cfg.model;
    let layers: Vec<usize> = cfg
        .analysis
        .layers
        .clone()
        .unwrap_or_else(|| (0..mc.n_layers).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, &ex.clip_id, t));
    let noise = matrix_lab::align_losses::sample_noise(&mut rng, mc);
    let noisy = NoiseSchedule::linear(mc.timesteps).add_noise(&ex.latent, &noise, t);
    let (_, records) = model.predict(
        &ex.conditions(noisy),
        &ex.prompt,
        t,
        &layers,
        &AttentionEdits::new(),
    )?;
    for rec in &records {
        for spec in ex.specs.iter().filter(|s| s.role.is_noun()) {
            let map = grounding_map(rec, spec)?;
            let title = format!(
                "{} layer {} step {t} {}",
                ex.clip_id,
                rec.layer,
                spec.role.as_str()
            );
            let svg = heatmap_svg(&map, Some(ex.latent_mask(spec.role)), &title);
            run.write_text(
                &format!("heatmaps/layer{}_{}.svg", rec.layer, spec.role.as_str()),
                &svg,
            )?;
        }
    }
    Ok(())
}

fn rank_cmd(cfg: &RunConfig, a: &crate::RankArgs, mut run: Run) -> Result<()> {
    run.input(&a.aas);
    let table = AasTable::read_csv(&a.aas)?;
    let labels: BTreeMap<String, bool> = match &a.data {
        None => BTreeMap::new(),
        Some(d) => {
            run.input(d);
            read_dataset(d)?
                .into_iter()
                .filter_map(|g| g.clip.success.map(|s| (g.clip.clip_id, s)))
                .collect()
        }
    };
    let present: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| table.rows.iter().any(|r| r.variant == *v))
        .collect();
    let mut reports = Vec::new();
    for v in present {
        let r = rank_variant(
            &table,
            v,
            &labels,
            cfg.rank.top_k_per_video,
            cfg.rank.select_k,
        )?;
        let p = run.path(&format!("layer_plot_{}.csv", v.as_str()));
        r.write_plot_csv(&p)?;
        run.output(p);
        println!(
            "{}: influential {:?} dominant {:?}",
            v,
            r.influential,
            r.top(usize::MAX)
        );
        reports.push(r);
    }
    write_json(&mut run, "rankings.json", &reports)?;
    run.finish(cfg).map(|_| ())
}

/// Supervised layers from a rankings file: two grounding, one propagation.
pub fn layers_from_rankings(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let reports: Vec<RankingReport> = serde_json::from_str(&text)?;
    let pick = |v: Variant, n: usize| {
        reports
            .iter()
            .find(|r| r.variant == v)
            .map(|r| r.top(n))
            .filter(|l| !l.is_empty())
            .ok_or_else(|| LabError::data(format!("rankings have no {v} layers")))
    };
    Ok((pick(Variant::NounV2t, 2)?, pick(Variant::NounV2v, 1)?))
}

#[derive(Serialize)]
struct TrainSummary {
    grounding_layers: Vec<usize>,
    propagation_layers: Vec<usize>,
    train_clips: usize,
    held_out_clips: usize,
    before: Option<matrix_lab::align_losses::EvalReport>,
    after: Option<matrix_lab::align_losses::EvalReport>,
}

fn train_cmd(cfg: &RunConfig, a: &crate::TrainArgs, mut run: Run) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(r) = &a.rankings {
        run.input(r);
        let (g, p) = layers_from_rankings(r)?;
        cfg.train.grounding_layers = g;
        cfg.train.propagation_layers = p;
    }
    let (_, examples) = load_data(&mut run, &a.data, &cfg)?;
    let held = cfg.eval.held_out;
    if held >= examples.len() {
        return Err(LabError::config(format!(
            "held_out {held} leaves no training clips"
        )));
    }
    let (train_set, held_set) = examples.split_at(examples.len() - held);
    let tc = &cfg.train;
    let mut state = TrainState::new(
        ToyDit::new(cfg.model.clone())?,
        tc.grounding_layers.clone(),
        tc.propagation_layers.clone(),
        tc.decoder_channels,
        cfg.seed,
    )?;
    let eval = |s: &TrainState| -> Result<Option<_>> {
        if held_set.is_empty() {
            return Ok(None);
        }
        evaluate(s, held_set, &cfg.analysis.timesteps, cfg.seed, &tc.weights).map(Some)
    };
    let before = eval(&state)?;
    let records = train(&mut state, train_set, tc, |r| log::info!("{r:?}"))?;
    let after = eval(&state)?;
    let ckpt = run.path("checkpoint.bin");
    save_checkpoint(&ckpt, &state, records.len())?;
    run.output(ckpt);
    let ledger = run.path("loss_ledger.csv");
    write_loss_ledger(&ledger, &records)?;
    run.output(ledger);
    let summary = TrainSummary {
        grounding_layers: tc.grounding_layers.clone(),
        propagation_layers: tc.propagation_layers.clone(),
        train_clips: train_set.len(),
        held_out_clips: held_set.len(),
        before,
        after,
    };
    if let (Some(b), Some(f)) = (&summary.before, &summary.after) {
        println!(
            "held-out L_SGA {:.4} -> {:.4}, noun v2t AAS {:.4} -> {:.4}",
            b.l_sga, f.l_sga, b.aas_noun_v2t, f.aas_noun_v2t
        );
    }
    write_json(&mut run, "train_summary.json", &summary)?;
    run.finish(&cfg).map(|_| ())
}

#[derive(Serialize)]
struct SampleSummary {
    clip_id: String,
    noun_aas_guided: f64,
    noun_aas_unguided: f64,
    video: String,
}

fn sample_cmd(cfg: &RunConfig, a: &crate::SampleArgs, mut run: Run) -> Result<()> {
    let (clips, examples) = load_data(&mut run, &a.data, cfg)?;
    let model = load_model(&mut run, a.checkpoint.as_deref(), cfg)?;
    let idx = match &a.clip {
        None => 0,
        Some(id) => clips
            .iter()
            .position(|g| &g.clip.clip_id == id)
            .ok_or_else(|| LabError::data(format!("clip {id} not in dataset")))?,
    };
    let ex = &examples[idx];
    let mc = &cfg.model;
    let g = &cfg.guidance;
    let mut capture: Vec<usize> = g.cag_layers.iter().chain(&g.cmg_layers).copied().collect();
    capture.sort_unstable();
    capture.dedup();
    if capture.is_empty() {
        capture = (0..mc.n_layers).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, &ex.clip_id, mc.timesteps));
    let init = matrix_lab::align_losses::sample_noise(&mut rng, mc);
    let inputs = SampleInputs::from_example(ex);
    let guided = sample_with_guidance(&model, g, &init, &inputs, &capture)?;
    let unguided_cfg = matrix_lab::guidance::GuidanceConfig {
        scale: 0.0,
        ..g.clone()
    };
    let unguided = sample_with_guidance(&model, &unguided_cfg, &init, &inputs, &capture)?;
    let video = decode_latent(&guided.latent, mc)?;
    let name = format!("sample_{}.video", ex.clip_id);
    let vp = run.path(&name);
    write_video(&vp, &video)?;
    run.output(vp);
    let summary = SampleSummary {
        clip_id: ex.clip_id.clone(),
        noun_aas_guided: noun_aas(&guided.steps, &ex.specs, &ex.latent_masks)?,
        noun_aas_unguided: noun_aas(&unguided.steps, &ex.specs, &ex.latent_masks)?,
        video: name,
    };
    println!(
        "{}: noun AAS guided {:.4} unguided {:.4}",
        summary.clip_id, summary.noun_aas_guided, summary.noun_aas_unguided
    );
    write_json(&mut run, "sample.json", &summary)?;
    run.finish(cfg).map(|_| ())
}

fn json_files(dir: &Path, suffix: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| LabError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(LabError::Empty(format!(
            "no {suffix} files in {}",
            dir.display()
        )));
    }
    Ok(v)
}

fn score_cmd(cfg: &RunConfig, a: &crate::ScoreArgs, mut run: Run) -> Result<()> {
    let ledgers = if let Some(dir) = &a.answers {
        run.input(dir);
        json_files(dir, ".json")?
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
                let sheet: AnswerSheet = serde_json::from_str(&text)?;
                score_sheet(&sheet, cfg.eval.lambda)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let dir = a
            .data
            .as_deref()
            .expect("clap requires --answers or --data");
        run.input(dir);
        let clips: Vec<_> = read_dataset(dir)?.into_iter().map(|g| g.clip).collect();
        let judge = OracleJudge::new(clips.clone(), cfg.eval.stride);
        let colors = default_colors();
        let scored = par_map(cfg.jobs, &clips, |c| {
            evaluate_clip(c, &judge, &colors, cfg.eval.stride, cfg.eval.lambda)
        })?;
        let questions: Vec<_> = scored
            .iter()
            .map(|(q, l)| (l.clip_id.clone(), q.clone()))
            .collect();
        write_json(&mut run, "questions.json", &questions)?;
        scored.into_iter().map(|(_, l)| l).collect()
    };
    let p = run.path("scores.csv");
    write_summary_csv(&p, &ledgers)?;
    run.output(p);
    write_json(&mut run, "scores.json", &ledgers)?;
    println!("scored {} clips", ledgers.len());
    run.finish(cfg).map(|_| ())
}

#[derive(Serialize)]
struct CurationSummary {
    clips: usize,
    retained: usize,
    verifier_calls: usize,
    naive_calls: usize,
    reports: Vec<CurationReport>,
}

fn curate_cmd(cfg: &RunConfig, a: &crate::CurateArgs, mut run: Run) -> Result<()> {
    let fixtures: Vec<CurationFixture> = if let Some(dir) = &a.fixtures {
        run.input(dir);
        json_files(dir, ".fixture.json")?
            .iter()
            .map(|p| CurationFixture::read(p))
            .collect::<Result<_>>()?
    } else {
        let dir = a
            .data
            .as_deref()
            .expect("clap requires --fixtures or --data");
        run.input(dir);
        read_dataset(dir)?
            .iter()
            .enumerate()
            .map(|(i, g)| {
                synthetic_fixture(
                    &g.clip,
                    cfg.curation.sampled_frames,
                    cfg.curation.slots,
                    cfg.seed.wrapping_add(i as u64),
                )
            })
            .collect::<Result<_>>()?
    };
    let outcomes = par_map(cfg.jobs, &fixtures, |fx| {
        curate(fx, cfg.curation.thresholds, &mut fx.propagator())
    })?;
    let curated = run.path("curated");
    let mut reports = Vec::new();
    for o in outcomes {
        if let Some(clip) = &o.clip {
            let p = clip.write(&curated, true)?;
            run.output(p);
        }
        reports.push(o.report);
    }
    let summary = CurationSummary {
        clips: reports.len(),
        retained: reports.iter().filter(|r| !r.discarded).count(),
        verifier_calls: reports.iter().map(|r| r.verifier_calls).sum(),
        naive_calls: reports.iter().map(|r| r.naive_calls).sum(),
        reports,
    };
    println!(
        "retained {}/{} clips, {} verifier calls (naive {})",
        summary.retained, summary.clips, summary.verifier_calls, summary.naive_calls
    );
    write_json(&mut run, "curation.json", &summary)?;
    run.finish(cfg).map(|_| ())
}
