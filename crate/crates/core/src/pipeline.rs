//! Command-level operations over a [`ConfigDocument`]: analyze, train,
//! infer and synthesize. Each writes its outputs into a directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConfigDocument;
use crate::cost::{self, Comparison, CostReport, EmissionsSpec};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, VolumeData, VolumeFile};
use crate::model::SegResMamba;
use crate::tensor::no_grad;
use crate::train::{argmax_labels, synth_dataset, train_loop, History, VolumeSample};

/// Model initialized from `doc.train.seed`.
pub fn build_model(doc: &ConfigDocument) -> Result<SegResMamba> {
    SegResMamba::new(
        doc.model.clone(),
        &mut ChaCha8Rng::seed_from_u64(doc.train.seed),
    )
}

pub fn dataset(doc: &ConfigDocument) -> Result<Vec<VolumeSample>> {
    synth_dataset(&doc.data, doc.model.num_classes, doc.model.in_channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub report: CostReport,
    pub reference: Vec<Comparison>,
}

/// Cost report at `doc.analyze`, with the emissions section (or `emissions`
/// when given) attached, plus the published-figure comparison.
pub fn analyze(doc: &ConfigDocument, emissions: Option<EmissionsSpec>) -> Result<AnalyzeOutput> {
    let a = &doc.analyze;
    let spec = match emissions {
        Some(s) => Some(s),
        None => doc.emissions.as_ref().map(|e| e.to_spec()).transpose()?,
    };
    let report =
        cost::analyze(&doc.model, a.input_extents, a.batch, a.bytes_per_element)?.with_co2(spec)?;
    Ok(AnalyzeOutput {
        report,
        reference: cost::reference_comparison(&doc.model)?,
    })
}

/// Writes `report.csv`, `report.txt`, `report.json` and `reference.json`.
pub fn write_analysis(out: &AnalyzeOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), cost::render_csv(&out.report)?)?;
    fs::write(dir.join("report.txt"), cost::render_text(&out.report))?;
    fs::write(dir.join("report.json"), cost::render_json(&out.report)?)?;
    let mut refs =
        serde_json::to_string_pretty(&out.reference).map_err(|e| Error::Format(e.to_string()))?;
    refs.push('\n');
    fs::write(dir.join("reference.json"), refs)?;
    Ok(())
}

pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const CHECKPOINT: &str = "checkpoint.srmc";
pub const RESOLVED_CONFIG: &str = "config.json";

/// Trains on the synthetic dataset and writes history, per-eval dice, the
/// final checkpoint and the resolved config into `dir`.
pub fn train(doc: &ConfigDocument, dir: &Path) -> Result<(SegResMamba, History)> {
    doc.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), doc.to_json())?;
    let data = dataset(doc)?;
    let model = build_model(doc)?;
    let history = train_loop(&model, &data, &doc.train)?;
    history.write_csv(BufWriter::new(File::create(dir.join(HISTORY_CSV))?))?;
    history.write_eval_csv(BufWriter::new(File::create(dir.join(EVAL_CSV))?))?;
    history.write_json(BufWriter::new(File::create(dir.join(HISTORY_JSON))?))?;
    Checkpoint::from_model(&model).save(&dir.join(CHECKPOINT))?;
    Ok((model, history))
}

/// Argmax label volume `[D, H, W]` (i32) for an image volume shaped
/// `[C, D, H, W]` or `[1, C, D, H, W]`.
pub fn predict_volume(model: &SegResMamba, image: &VolumeFile) -> Result<VolumeFile> {
    if matches!(image.data, VolumeData::I32(_)) {
        return Err(Error::Format("input volume must hold floats".into()));
    }
    let e = &image.extents;
    let shape = match e.len() {
        4 => vec![1, e[0], e[1], e[2], e[3]],
        5 if e[0] == 1 => e.clone(),
        _ => {
            return Err(Error::Format(format!(
                "input volume must be [C, D, H, W] or [1, C, D, H, W], got {e:?}"
            )))
        }
    };
    if shape[1] != model.config.in_channels {
        return Err(Error::Format(format!(
            "input has {} channels, model expects {}",
            shape[1], model.config.in_channels
        )));
    }
    let spatial = [shape[2], shape[3], shape[4]];
    model.config.validate_extents(spatial)?;
    let x = crate::tensor::Tensor::new(image.to_f64(), &shape)?;
    let logits = no_grad(|| model.forward(&x))?;
    VolumeFile::from_labels(&argmax_labels(&logits), &spatial)
}

pub fn infer(
    doc: &ConfigDocument,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
) -> Result<VolumeFile> {
    let model = SegResMamba::new(doc.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    Checkpoint::load(checkpoint)?.apply_to(&model)?;
    let labels = predict_volume(&model, &VolumeFile::load(input)?)?;
    labels.save(output)?;
    Ok(labels)
}

pub fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{index:03}_image.srmv")),
        dir.join(format!("sample_{index:03}_label.srmv")),
    )
}

/// Image volumes as f64 `[C, D, H, W]`, labels as i32 `[D, H, W]`.
pub fn synth(doc: &ConfigDocument, dir: &Path) -> Result<usize> {
    doc.validate()?;
    fs::create_dir_all(dir)?;
    let data = dataset(doc)?;
    for (i, s) in data.iter().enumerate() {
        let (img, lbl) = sample_paths(dir, i);
        let [d, h, w] = s.extents;
        VolumeFile::new(vec![s.channels, d, h, w], VolumeData::F64(s.image.clone()))?.save(&img)?;
        VolumeFile::from_labels(&s.label, &s.extents)?.save(&lbl)?;
    }
    Ok(data.len())
}
