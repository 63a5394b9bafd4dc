//! One function per subcommand. Each validates its paths, does the work, and
//! writes artifacts atomically before returning a one-line JSON report.

use std::path::Path;

use gaitmorph::gaitdata::{augment, generate_dataset, load_dataset, normalize, save_dataset, Augmentation};
use gaitmorph::io::write_atomic;
use gaitmorph::quantizer::codebook_usage;
use gaitmorph::transport::{apply_transport_morph_with, cost_matrix, MorphMode};
use gaitmorph::{
    compressed_bits, compute_fgd, learn_transport_maps, train_model, transport_stats, Dataset, Embedder, GaitModel,
    SkeletonSequence, TransportMapSet, VariationLabel,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{require_file, require_output, FgdArgs, FitMapsArgs, GenArgs, MorphArgs, StatsArgs, TrainArgs};
use crate::CliError;

/// Loads a dataset and normalizes every sequence.
pub fn load_normalized(path: &Path) -> Result<Dataset, CliError> {
    let ds = load_dataset(path)?;
    let sequences = ds.sequences.iter().map(normalize).collect::<gaitmorph::Result<Vec<_>>>()?;
    Ok(Dataset::new(sequences, ds.split)?)
}

fn check_shape(model: &GaitModel, ds: &Dataset) -> Result<(), CliError> {
    let cfg = model.config();
    if ds.frames() != cfg.frames || ds.joints() != cfg.joints {
        return Err(CliError::data(format!(
            "dataset walks are {}x{}, the model expects {}x{}",
            ds.frames(),
            ds.joints(),
            cfg.frames,
            cfg.joints
        )));
    }
    Ok(())
}

fn select<'a>(ds: &'a Dataset, label: &VariationLabel) -> Result<Vec<&'a SkeletonSequence>, CliError> {
    let seqs = ds.filter_variation(label);
    if seqs.is_empty() {
        return Err(CliError::data(format!("no sequences with variation {label}")));
    }
    Ok(seqs)
}

#[derive(Debug, Serialize)]
pub struct GenReport {
    pub train_sequences: usize,
    pub test_sequences: usize,
}

pub fn cmd_gen(args: &GenArgs) -> Result<GenReport, CliError> {
    require_output(&args.train_out, "train_out")?;
    require_output(&args.test_out, "test_out")?;
    let (train, test) = generate_dataset(&args.generator)?.split_by_walk(args.test_walks)?;
    save_dataset(&train, &args.train_out)?;
    save_dataset(&test, &args.test_out)?;
    Ok(GenReport {
        train_sequences: train.sequences.len(),
        test_sequences: test.sequences.len(),
    })
}

/// One line of the training metrics stream.
#[derive(Debug, Serialize)]
struct MetricsLine {
    step: u64,
    lr: f64,
    recon_loss: f64,
    commit_loss: f64,
    usage: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub initial_recon_loss: f64,
    pub final_recon_loss: f64,
    pub usage: f64,
    pub fingerprint: String,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport, CliError> {
    require_file(&args.dataset, "dataset")?;
    require_output(&args.checkpoint, "checkpoint")?;
    require_output(&args.metrics, "metrics")?;
    if args.log_every == 0 {
        return Err(CliError::usage("log_every must be positive"));
    }
    let ds = load_normalized(&args.dataset)?;
    if ds.frames() != args.model.frames || ds.joints() != args.model.joints {
        return Err(CliError::usage(format!(
            "model.T/model.J are {}x{} but the dataset walks are {}x{}",
            args.model.frames,
            args.model.joints,
            ds.frames(),
            ds.joints()
        )));
    }

    let mut metrics = Vec::new();
    let mut first = None;
    let mut last = None;
    let model = train_model(&args.model, &args.train, &args.fit, &ds.sequences, |m, _| {
        first.get_or_insert(m.recon_loss);
        last = Some((m.recon_loss, m.usage));
        if m.step % args.log_every == 0 || m.step == args.fit.steps {
            let line = MetricsLine {
                step: m.step,
                lr: m.lr,
                recon_loss: m.recon_loss,
                commit_loss: m.commit_loss,
                usage: m.usage,
            };
            serde_json::to_writer(&mut metrics, &line).expect("metrics serialize");
            metrics.push(b'\n');
        }
    })?;
    model.save(&args.checkpoint)?;
    write_atomic(&args.metrics, &metrics)?;
    let (final_recon, usage) = last.unwrap_or((f64::NAN, 0.0));
    Ok(TrainReport {
        steps: args.fit.steps,
        initial_recon_loss: first.unwrap_or(f64::NAN),
        final_recon_loss: final_recon,
        usage,
        fingerprint: format!("{:016x}", model.codebook.fingerprint()),
    })
}

#[derive(Debug, Serialize)]
pub struct FitMapsReport {
    pub positions: usize,
    pub mean_cost: f64,
    pub max_cost: f64,
    pub source_sequences: usize,
    pub target_sequences: usize,
    pub fingerprint: String,
}

pub fn cmd_fit_maps(args: &FitMapsArgs) -> Result<FitMapsReport, CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.dataset, "dataset")?;
    require_output(&args.maps, "maps")?;
    let model = GaitModel::load(&args.checkpoint)?;
    let ds = load_normalized(&args.dataset)?;
    check_shape(&model, &ds)?;
    let source = select(&ds, &args.source)?;
    let target = select(&ds, &args.target)?;
    let mut maps = learn_transport_maps(&model, &source, &target)?;
    maps.source = args.source.clone();
    maps.target = args.target.clone();
    maps.save(&args.maps)?;
    Ok(FitMapsReport {
        positions: maps.positions(),
        mean_cost: maps.mean_cost(),
        max_cost: maps.maps.iter().map(|m| m.cost).fold(0.0, f64::max),
        source_sequences: source.len(),
        target_sequences: target.len(),
        fingerprint: format!("{:016x}", maps.fingerprint),
    })
}

fn load_maps(path: &Path, model: &GaitModel) -> Result<TransportMapSet, CliError> {
    let maps = TransportMapSet::load(path)?;
    maps.check_codebook(&model.codebook)?;
    let cfg = model.config();
    if maps.latent_frames != cfg.latent_frames() || maps.joints != cfg.joints {
        return Err(CliError::mismatch("maps were fitted for a different latent grid"));
    }
    Ok(maps)
}

fn morph_all(
    model: &GaitModel,
    maps: &TransportMapSet,
    seqs: &[&SkeletonSequence],
    mode: MorphMode,
) -> Result<Vec<SkeletonSequence>, CliError> {
    Ok(seqs
        .par_iter()
        .map(|s| apply_transport_morph_with(model, maps, s, mode))
        .collect::<gaitmorph::Result<Vec<_>>>()?)
}

#[derive(Debug, Serialize)]
pub struct MorphReport {
    pub morphed_sequences: usize,
    pub source: VariationLabel,
    pub target: VariationLabel,
}

pub fn cmd_morph(args: &MorphArgs) -> Result<MorphReport, CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.dataset, "dataset")?;
    match (&args.maps, args.identity) {
        (Some(p), false) => require_file(p, "maps")?,
        (None, true) => {}
        _ => return Err(CliError::usage("set exactly one of `maps` and `identity`")),
    }
    require_output(&args.output, "output")?;
    let model = GaitModel::load(&args.checkpoint)?;
    let ds = load_normalized(&args.dataset)?;
    check_shape(&model, &ds)?;

    let (maps, seqs) = match &args.maps {
        Some(p) => {
            let maps = load_maps(p, &model)?;
            let label = args.source.clone().unwrap_or_else(|| maps.source.clone());
            let seqs = select(&ds, &label)?;
            (maps, seqs)
        }
        None => {
            let seqs = match &args.source {
                Some(label) => select(&ds, label)?,
                None => ds.sequences.iter().collect(),
            };
            (TransportMapSet::identity(&model, seqs[0].variation.clone()), seqs)
        }
    };
    let mode = args.sample_seed.map_or(MorphMode::Argmax, |seed| MorphMode::Sample { seed });
    let mut morphed = morph_all(&model, &maps, &seqs, mode)?;
    if args.identity {
        // Reconstructions keep their own labels.
        for (m, s) in morphed.iter_mut().zip(&seqs) {
            m.variation = s.variation.clone();
        }
    }
    let out = Dataset::new(morphed, ds.split)?;
    save_dataset(&out, &args.output)?;
    Ok(MorphReport {
        morphed_sequences: out.sequences.len(),
        source: maps.source,
        target: maps.target,
    })
}

#[derive(Debug, Serialize)]
pub struct FgdReport {
    pub fgd_source_vs_target: f64,
    pub fgd_morphed_vs_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fgd_augmented_vs_target: Option<f64>,
}

pub fn cmd_fgd(args: &FgdArgs) -> Result<FgdReport, CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.dataset, "dataset")?;
    require_file(&args.maps, "maps")?;
    let augmentations = args
        .augmentations
        .iter()
        .map(|n| Augmentation::from_name(n).map_err(|e| CliError::usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let model = GaitModel::load(&args.checkpoint)?;
    let maps = load_maps(&args.maps, &model)?;
    let ds = load_normalized(&args.dataset)?;
    check_shape(&model, &ds)?;
    let source = select(&ds, &maps.source)?;
    let target = select(&ds, &maps.target)?;

    let embedder = Embedder::new(&model);
    let morphed = morph_all(&model, &maps, &source, MorphMode::Argmax)?;
    let morphed: Vec<&SkeletonSequence> = morphed.iter().collect();
    let augmented = if augmentations.is_empty() {
        None
    } else {
        let seqs = source
            .iter()
            .enumerate()
            .map(|(i, s)| {
                augmentations.iter().enumerate().try_fold((*s).clone(), |acc, (k, aug)| {
                    let seed = args.augment_seed ^ ((i * augmentations.len() + k) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    augment(&acc, aug, seed)
                })
            })
            .collect::<gaitmorph::Result<Vec<_>>>()?;
        let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
        Some(compute_fgd(&embedder, &refs, &target)?)
    };
    Ok(FgdReport {
        fgd_source_vs_target: compute_fgd(&embedder, &source, &target)?,
        fgd_morphed_vs_target: compute_fgd(&embedder, &morphed, &target)?,
        fgd_augmented_vs_target: augmented,
    })
}

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub codebook_size: usize,
    pub positions: u64,
    pub compressed_bits: u64,
    pub usage: Option<f64>,
    pub num_changes: Option<u64>,
    pub avg_moved_distance: Option<f64>,
    pub total_mass: Option<f64>,
}

pub fn cmd_stats(args: &StatsArgs) -> Result<StatsReport, CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    if let Some(p) = &args.dataset {
        require_file(p, "dataset")?;
    }
    if let Some(p) = &args.maps {
        require_file(p, "maps")?;
    }
    let model = GaitModel::load(&args.checkpoint)?;
    let k = model.codebook.size();
    let positions = args.positions.unwrap_or(model.config().latent_positions() as u64);
    let mut report = StatsReport {
        codebook_size: k,
        positions,
        compressed_bits: compressed_bits(positions, k as u64),
        usage: None,
        num_changes: None,
        avg_moved_distance: None,
        total_mass: None,
    };
    let maps = args.maps.as_deref().map(|p| load_maps(p, &model)).transpose()?;
    let Some(path) = &args.dataset else {
        return Ok(report);
    };
    let ds = load_normalized(path)?;
    check_shape(&model, &ds)?;
    let all: Vec<&SkeletonSequence> = ds.sequences.iter().collect();
    report.usage = Some(codebook_usage(&model.tokenize_all(&all)?, k)?);
    if let Some(maps) = maps {
        let grids = model.tokenize_all(&select(&ds, &maps.source)?)?;
        let stats = transport_stats(&maps, &cost_matrix(&model.codebook), &grids)?;
        report.num_changes = Some(stats.num_changes);
        report.avg_moved_distance = Some(stats.avg_moved_distance);
        report.total_mass = Some(stats.total_mass);
    }
    Ok(report)
}
