use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use keyframe_core::io::{
    load_annotations, load_embeddings, save_annotations, save_embeddings, AnnotationRecord,
    EmbeddingMatrix,
};
use keyframe_core::numerics::Prng;
use keyframe_core::scoring::{FrameEmbedding, QueryEmbedding};
use keyframe_core::synthetic::{PlantedCorpus, PlantedCorpusConfig};

use crate::{print_resolved, Status, SynthArgs};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

pub fn video_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.evsb"))
}

pub fn query_path(dir: &Path, query_id: &str) -> PathBuf {
    dir.join(format!("{query_id}.query.evsb"))
}

/// An annotation record with its embeddings loaded.
pub struct Pair {
    pub record: AnnotationRecord,
    pub frames: Vec<FrameEmbedding>,
    pub query: QueryEmbedding,
}

pub fn read_annotations(path: &Path) -> anyhow::Result<Vec<AnnotationRecord>> {
    load_annotations(path).with_context(|| format!("loading annotations {}", path.display()))
}

/// Loads every annotated pair, checking frame counts and a common width.
pub fn load_pairs(dir: &Path, records: Vec<AnnotationRecord>) -> anyhow::Result<Vec<Pair>> {
    let mut videos: HashMap<String, Vec<FrameEmbedding>> = HashMap::new();
    let mut pairs = Vec::with_capacity(records.len());
    let mut width: Option<usize> = None;
    for (i, record) in records.into_iter().enumerate() {
        if !videos.contains_key(&record.video_id) {
            let path = video_path(dir, &record.video_id);
            let m = load_embeddings(&path)
                .with_context(|| format!("loading video embeddings {}", path.display()))?;
            videos.insert(record.video_id.clone(), m.frame_embeddings()?);
        }
        let frames = videos[&record.video_id].clone();
        if frames.len() != record.n_frames {
            bail!(
                "annotation record {i}: video {} has {} frames, annotation says {}",
                record.video_id,
                frames.len(),
                record.n_frames
            );
        }
        let path = query_path(dir, &record.query_id);
        let query = load_embeddings(&path)
            .with_context(|| format!("loading query embedding {}", path.display()))?
            .query_embedding()
            .with_context(|| format!("query file {}", path.display()))?;
        for d in frames
            .first()
            .map(|f| f.len())
            .into_iter()
            .chain([query.len()])
        {
            match width {
                None => width = Some(d),
                Some(w) if w != d => bail!(
                    "annotation record {i}: embedding width {d} differs from {w} seen earlier"
                ),
                _ => {}
            }
        }
        pairs.push(Pair {
            record,
            frames,
            query,
        });
    }
    Ok(pairs)
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<Status> {
    print_resolved("synth", args);
    if args.segment_min == 0 || args.segment_min > args.segment_max {
        bail!(
            "segment length range [{}, {}] is empty",
            args.segment_min,
            args.segment_max
        );
    }
    if args.frames == 0 || args.dim == 0 {
        bail!("frames and dim must be positive");
    }
    if !(args.fps > 0.0 && args.fps.is_finite()) {
        bail!("fps must be positive");
    }
    let corpus = PlantedCorpus::new(PlantedCorpusConfig {
        n_frames: args.frames,
        dim: args.dim,
        fps: args.fps,
        segment_frames: (args.segment_min, args.segment_max),
        seed: args.corpus_seed,
        ..PlantedCorpusConfig::default()
    });
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut rng = Prng::new(args.seed);
    let mut records = Vec::with_capacity(args.videos);
    for i in 0..args.videos {
        let video = corpus.video(&mut rng);
        let video_id = format!("v{i:04}");
        let query_id = format!("q{i:04}");
        let rows: Vec<Vec<f64>> = video.frames.iter().map(|f| f.to_vec()).collect();
        save_embeddings(
            &video_path(&args.out, &video_id),
            &EmbeddingMatrix::from_f64_rows(&rows)?,
        )?;
        save_embeddings(
            &query_path(&args.out, &query_id),
            &EmbeddingMatrix::from_f64_rows(&[video.query.to_vec()])?,
        )?;
        records.push(AnnotationRecord {
            query_id,
            video_id,
            fps: video.fps,
            n_frames: video.frames.len(),
            segments: video
                .segments
                .iter()
                .map(|s| [s.start_sec, s.end_sec])
                .collect(),
        });
    }
    let ann = args.out.join(ANNOTATIONS_FILE);
    save_annotations(&ann, &records)?;
    println!("wrote {} videos and {}", records.len(), ann.display());
    Ok(Status::Ok)
}
