use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use keyframe_core::io::{
    load_checkpoint, load_embeddings, load_scores, load_selections, save_checkpoint, save_scores,
    save_selections, write_atomic, Checkpoint, ScoreRecord, SelectionRecord,
};
use keyframe_core::scoring::{score_frames, ScorerConfig};
use keyframe_core::selection::{
    coverage, select as select_frames, uniform_select, SelectionConfig,
};
use keyframe_core::training::{label_frames, train as fit, TrainConfig, TrainingExample};
use keyframe_core::Error;
use serde::{Deserialize, Serialize};

use crate::data::{load_pairs, read_annotations};
use crate::{print_resolved, CoverageArgs, ScoreArgs, SelectArgs, Status, TrainArgs};

/// Contents of the `--config` file for `train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scorer: ScorerConfig,
    pub train: TrainConfig,
}

fn loss_log_path(args: &TrainArgs) -> PathBuf {
    args.loss_log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.txt"))
}

pub fn train(args: &TrainArgs) -> anyhow::Result<Status> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let config: RunConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", args.config.display()))?;
    print_resolved("train", args);
    print_resolved("train.run", &config);
    config.scorer.validate()?;
    config.train.validate()?;

    let records = read_annotations(&args.annotations)?;
    let pairs = load_pairs(&args.embeddings, records)?;
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.into_iter().enumerate() {
        let dim = p.query.len();
        if dim != config.scorer.dim {
            bail!(
                "annotation record {i}: embedding width {dim} does not match scorer dim {}",
                config.scorer.dim
            );
        }
        let segments = p.record.evidence_segments()?;
        let mask = label_frames(&segments, p.frames.len(), p.record.fps)?;
        examples.push(TrainingExample::new(p.frames, p.query, mask)?);
    }

    let (params, report) = match fit(&examples, &config.scorer, &config.train) {
        Ok(r) => r,
        Err(e @ Error::NonFinite(_)) => {
            println!("training diverged: {e}");
            return Ok(Status::InvariantFailed);
        }
        Err(e) => return Err(e.into()),
    };

    let mut log = String::new();
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(log, "{} {loss:.12}", epoch + 1)?;
    }
    print!("{log}");
    let log_path = loss_log_path(args);
    write_atomic(&log_path, log.as_bytes())?;
    let ckpt = Checkpoint {
        config: config.scorer.clone(),
        params,
        train_seed: config.train.seed,
    };
    save_checkpoint(&args.out, &ckpt)?;
    println!("usable examples: {}", report.usable);
    println!("skipped examples: {}", report.skipped);
    println!("params sha256: {}", report.params_checksum);
    println!("checkpoint: {}", args.out.display());
    println!("loss log: {}", log_path.display());
    Ok(Status::Ok)
}

fn stem_id(path: &Path, suffix: &str) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_suffix(suffix)
        .or_else(|| name.strip_suffix(".evsb"))
        .unwrap_or(&name)
        .to_string()
}

pub fn score(args: &ScoreArgs) -> anyhow::Result<Status> {
    print_resolved("score", args);
    let ckpt = load_checkpoint(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let dim = ckpt.config.dim;
    let mut records = Vec::new();
    if let (Some(video), Some(query)) = (&args.video_emb, &args.query_emb) {
        let frames = load_embeddings(video)
            .with_context(|| format!("loading video embeddings {}", video.display()))?;
        let q = load_embeddings(query)
            .with_context(|| format!("loading query embedding {}", query.display()))?;
        for (what, m) in [("video", &frames), ("query", &q)] {
            if m.cols() != dim && m.rows() > 0 {
                bail!(
                    "config mismatch: {what} embeddings have width {}, checkpoint dim is {dim}",
                    m.cols()
                );
            }
        }
        let scores = score_frames(
            &frames.frame_embeddings()?,
            &q.query_embedding()?,
            &ckpt.params,
            &ckpt.config,
        )?;
        records.push(ScoreRecord {
            query_id: args
                .query_id
                .clone()
                .unwrap_or_else(|| stem_id(query, ".query.evsb")),
            video_id: args
                .video_id
                .clone()
                .unwrap_or_else(|| stem_id(video, ".evsb")),
            scores: scores.0,
        });
    } else {
        let ann = args.annotations.as_ref().expect("clap enforces one mode");
        let dir = args
            .embeddings
            .as_ref()
            .expect("clap requires --embeddings");
        for p in load_pairs(dir, read_annotations(ann)?)? {
            if p.query.len() != dim {
                bail!(
                    "config mismatch: query {} has width {}, checkpoint dim is {dim}",
                    p.record.query_id,
                    p.query.len()
                );
            }
            let scores = score_frames(&p.frames, &p.query, &ckpt.params, &ckpt.config)?;
            records.push(ScoreRecord {
                query_id: p.record.query_id,
                video_id: p.record.video_id,
                scores: scores.0,
            });
        }
    }
    save_scores(&args.out, &records)?;
    println!("scored {} pairs into {}", records.len(), args.out.display());
    Ok(Status::Ok)
}

pub fn select(args: &SelectArgs) -> anyhow::Result<Status> {
    print_resolved("select", args);
    let config = SelectionConfig::new(args.bins, args.per_bin)?;
    let records = load_scores(&args.scores)
        .with_context(|| format!("loading scores {}", args.scores.display()))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let selection = if args.uniform {
            uniform_select(r.scores.len(), config.budget())
        } else {
            select_frames(&r.scores, &config).with_context(|| {
                format!("selecting for query {} on video {}", r.query_id, r.video_id)
            })?
        };
        let shown: Vec<String> = selection.indices.iter().map(usize::to_string).collect();
        println!("{} {}: [{}]", r.query_id, r.video_id, shown.join(", "));
        out.push(SelectionRecord::new(r.query_id, r.video_id, selection));
    }
    save_selections(&args.out, &out)?;
    Ok(Status::Ok)
}

pub fn eval_coverage(args: &CoverageArgs) -> anyhow::Result<Status> {
    print_resolved("eval-coverage", args);
    let selections = load_selections(&args.selections)
        .with_context(|| format!("loading selections {}", args.selections.display()))?;
    let annotations = read_annotations(&args.annotations)?;
    let by_pair: HashMap<(&str, &str), usize> = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| ((a.query_id.as_str(), a.video_id.as_str()), i))
        .collect();
    if selections.is_empty() {
        bail!("no selections in {}", args.selections.display());
    }
    let mut covered = 0usize;
    for s in &selections {
        let Some(&i) = by_pair.get(&(s.query_id.as_str(), s.video_id.as_str())) else {
            bail!(
                "no annotation for query {} on video {}",
                s.query_id,
                s.video_id
            );
        };
        let a = &annotations[i];
        let segments = a.evidence_segments()?;
        covered += usize::from(coverage(&s.selection(), &segments, a.fps));
    }
    let rate = covered as f64 / selections.len() as f64;
    println!(
        "coverage: {:.2}% ({covered}/{})",
        100.0 * rate,
        selections.len()
    );
    Ok(Status::Ok)
}
