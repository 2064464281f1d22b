//! Batch-size ablation at a fixed budget of training pairs.

use serde::Serialize;

use crate::contrastive::PairExample;
use crate::data::pairs_to_retrieval;
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, EmptyQrels};
use crate::index::IndexMode;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub batch_size: usize,
    pub steps: u64,
    pub pairs_seen: u64,
    pub final_loss: f64,
    pub mrr_at_10: f64,
    pub recall_at_1: f64,
}

/// Trains one model per batch size with `steps = pairs_seen / M`, then scores
/// each on retrieval over `heldout` (x as query, y as its only relevant doc).
pub fn batch_size_ablation(
    config: &TrainConfig,
    train_pairs: &[PairExample],
    heldout: &[PairExample],
    batch_sizes: &[usize],
    pairs_seen: u64,
) -> Result<Vec<AblationRow>> {
    if batch_sizes.len() < 2 {
        return Err(Error::invalid("ablation needs at least two batch sizes"));
    }
    if heldout.is_empty() {
        return Err(Error::invalid("ablation needs held-out pairs"));
    }
    for &m in batch_sizes {
        if m == 0 || pairs_seen % m as u64 != 0 || pairs_seen < m as u64 {
            return Err(Error::invalid(format!(
                "pairs_seen {pairs_seen} must be a positive multiple of batch size {m}"
            )));
        }
    }
    let (queries, corpus, qrels) = pairs_to_retrieval(heldout);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &m in batch_sizes {
        let steps = pairs_seen / m as u64;
        let cfg = TrainConfig {
            batch_size: m,
            total_steps: steps,
            ..config.clone()
        };
        log::info!("ablation: M={m}, {steps} steps");
        let (ckpt, metrics) = train(&cfg, train_pairs)?;
        let report = evaluate_retrieval(&ckpt.encoder, &queries, &corpus, &qrels, IndexMode::Flat, EmptyQrels::Skip)?;
        rows.push(AblationRow {
            batch_size: m,
            steps,
            pairs_seen,
            final_loss: metrics.last().map_or(f64::NAN, |s| s.loss),
            mrr_at_10: report.mrr_at_10,
            recall_at_1: report.recall_at_1,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("batch_size\tsteps\tpairs_seen\tfinal_loss\tmrr@10\trecall@1\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.batch_size, r.steps, r.pairs_seen, r.final_loss, r.mrr_at_10, r.recall_at_1
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_pairs, SyntheticSpec};
    use crate::encoder::EncoderConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                max_seq_len: 24,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_single_batch_size_and_uneven_budget() {
        let d = synthetic_pairs(&SyntheticSpec {
            n_pairs: 40,
            ..SyntheticSpec::default()
        });
        assert!(batch_size_ablation(&tiny(), &d[..30], &d[30..], &[4], 16).is_err());
        assert!(batch_size_ablation(&tiny(), &d[..30], &d[30..], &[4, 8], 12).is_err());
    }

    #[test]
    fn equal_pairs_seen_per_row() {
        let d = synthetic_pairs(&SyntheticSpec {
            n_pairs: 40,
            ..SyntheticSpec::default()
        });
        let rows = batch_size_ablation(&tiny(), &d[..30], &d[30..], &[2, 8], 16).unwrap();
        assert_eq!(rows.iter().map(|r| r.steps).collect::<Vec<_>>(), [8, 2]);
        assert!(rows.iter().all(|r| r.pairs_seen == 16 && (0.0..=1.0).contains(&r.mrr_at_10)));
        assert_eq!(ablation_table(&rows).lines().count(), 3);
    }
}
