//! Held-out evaluation of a trained model on loaded sequences.

use std::sync::Arc;

use crate::config::RuntimeConfig;
use crate::error::Result;
use crate::metrics::{evaluate, MetricRow, RegionSpec};
use crate::model::FaceModel;
use crate::runtime::generate_offline;
use crate::synth::Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub id: String,
    pub metrics: MetricRow,
}

/// Generates every sample from its audio and scores it against its motion.
/// Speakers absent from training are scored as the mean over conditioning on
/// each trained style.
pub fn evaluate_samples(
    model: &Arc<FaceModel>,
    samples: &[Sample],
    region: &RegionSpec,
    seed: u64,
    runtime: &RuntimeConfig,
) -> Result<Vec<SequenceScore>> {
    let styles = model.predictor.style.speakers;
    samples
        .iter()
        .map(|s| {
            let speakers: Vec<usize> = if s.spec.speaker < styles { vec![s.spec.speaker] } else { (0..styles).collect() };
            let mut acc = MetricRow { lve: 0.0, fdd: 0.0, mod_: 0.0 };
            for &k in &speakers {
                let (pred, _) = generate_offline(Arc::clone(model), &s.audio, k, seed, runtime)?;
                let m = evaluate(&pred, &s.motion, region)?;
                acc.lve += m.lve;
                acc.fdd += m.fdd;
                acc.mod_ += m.mod_;
            }
            let n = speakers.len() as f64;
            Ok(SequenceScore { id: s.spec.id.clone(), metrics: MetricRow { lve: acc.lve / n, fdd: acc.fdd / n, mod_: acc.mod_ / n } })
        })
        .collect()
}

/// Column means of `scores`.
pub fn mean_scores(scores: &[SequenceScore]) -> MetricRow {
    let n = scores.len().max(1) as f64;
    MetricRow {
        lve: scores.iter().map(|s| s.metrics.lve).sum::<f64>() / n,
        fdd: scores.iter().map(|s| s.metrics.fdd).sum::<f64>() / n,
        mod_: scores.iter().map(|s| s.metrics.mod_).sum::<f64>() / n,
    }
}

/// Same samples with every audio feature set to zero.
pub fn audio_blind(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().map(|s| Sample { audio: s.audio.zeroed(), ..s.clone() }).collect()
}
