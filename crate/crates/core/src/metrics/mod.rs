//! Motion-fidelity scoring over tracklets, a block-matching tracker, a
//! shape-class probe and descriptor nearest-neighbour retrieval.

mod probe;
mod tracker;

pub use probe::{edit_fidelity, train_probe, Probe, ProbeConfig, ProbeTrainLog};
pub use tracker::{foreground_mask, track_block_matching, track_with_fallback, Seeding, TrackerConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthvid::TrackletSet;

/// Displacements below this magnitude count as "not moving".
pub const STILL_EPS: f64 = 1e-8;

/// Mean cosine between per-frame displacements of two tracklets.
///
/// A frame where both displacements vanish scores 1; one where exactly one
/// vanishes scores 0.
pub fn tracklet_corr(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("tracklets have {} and {} points", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Data("correlation needs at least 2 frames".into()));
    }
    let mut total = 0.0;
    for (wa, wb) in a.windows(2).zip(b.windows(2)) {
        let (ux, uy) = (wa[1][0] - wa[0][0], wa[1][1] - wa[0][1]);
        let (vx, vy) = (wb[1][0] - wb[0][0], wb[1][1] - wb[0][1]);
        let (nu, nv) = (ux.hypot(uy), vx.hypot(vy));
        total += match (nu < STILL_EPS, nv < STILL_EPS) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => ((ux * vx + uy * vy) / (nu * nv)).clamp(-1.0, 1.0),
        };
    }
    Ok(total / (a.len() - 1) as f64)
}

/// Best match of one tracklet in the other set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMatch {
    /// `"generated"` rows match generated tracklets against the source set, `"source"` rows the reverse.
    pub side: MatchSide,
    pub index: usize,
    pub best: usize,
    pub corr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchSide {
    Generated,
    Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityScore {
    /// Half the sum of the two best-match averages, in `[-1, 1]`.
    pub normalized: f64,
    pub raw: f64,
    pub pairs: Vec<PairMatch>,
}

/// Correlation of every (source, generated) pair, row-major by source.
pub fn correlation_matrix(src: &TrackletSet, gen: &TrackletSet) -> Result<Vec<Vec<f64>>> {
    if src.is_empty() || gen.is_empty() {
        return Err(Error::Data("motion fidelity needs non-empty tracklet sets".into()));
    }
    if src.frames != gen.frames {
        return Err(Error::Data(format!("frame counts differ: {} vs {}", src.frames, gen.frames)));
    }
    src.tracks
        .iter()
        .map(|s| gen.tracks.iter().map(|g| tracklet_corr(s, g)).collect())
        .collect()
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    // first index wins ties
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

pub fn motion_fidelity(src: &TrackletSet, gen: &TrackletSet) -> Result<FidelityScore> {
    let c = correlation_matrix(src, gen)?;
    let (n, m) = (src.len(), gen.len());
    let mut pairs = Vec::with_capacity(n + m);
    let mut gen_side = 0.0;
    for j in 0..m {
        let (best, corr) = argmax((0..n).map(|i| c[i][j]));
        gen_side += corr;
        pairs.push(PairMatch {
            side: MatchSide::Generated,
            index: j,
            best,
            corr,
        });
    }
    let mut src_side = 0.0;
    for (i, row) in c.iter().enumerate() {
        let (best, corr) = argmax(row.iter().copied());
        src_side += corr;
        pairs.push(PairMatch {
            side: MatchSide::Source,
            index: i,
            best,
            corr,
        });
    }
    let raw = gen_side / m as f64 + src_side / n as f64;
    Ok(FidelityScore {
        normalized: 0.5 * raw,
        raw,
        pairs,
    })
}

/// Normalized Motion-Fidelity-Score.
pub fn motion_fidelity_score(src: &TrackletSet, gen: &TrackletSet) -> Result<f64> {
    Ok(motion_fidelity(src, gen)?.normalized)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub motion_fidelity: f64,
    pub motion_fidelity_raw: f64,
    /// Mean probe probability of the target class; absent when no probe was given.
    pub edit_fidelity: Option<f64>,
    pub pairs: Vec<PairMatch>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(score: FidelityScore, edit_fidelity: Option<f64>, config: serde_json::Value) -> Self {
        Self {
            motion_fidelity: score.normalized,
            motion_fidelity_raw: score.raw,
            edit_fidelity,
            pairs: score.pairs,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Corpus entries ranked by L2 distance to `query`, ties by index.
pub fn smm_nearest_frames(query: &[f64], corpus: &[Vec<f64>]) -> Result<Vec<Neighbor>> {
    if corpus.is_empty() {
        return Err(Error::Data("empty retrieval corpus".into()));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for (index, v) in corpus.iter().enumerate() {
        if v.len() != query.len() {
            return Err(Error::Data(format!(
                "descriptor {index} has dimension {}, query has {}",
                v.len(),
                query.len()
            )));
        }
        let distance = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        out.push(Neighbor { index, distance });
    }
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_disp(disp: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut p = vec![[0.0, 0.0]];
        for d in disp {
            let l = *p.last().unwrap();
            p.push([l[0] + d[0], l[1] + d[1]]);
        }
        p
    }

    #[test]
    fn corr_hand_examples() {
        let a = from_disp(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = from_disp(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(tracklet_corr(&a, &b).unwrap(), 0.5);
        let r: Vec<_> = a.iter().map(|p| [-p[0], -p[1]]).collect();
        assert_eq!(tracklet_corr(&a, &r).unwrap(), -1.0);
        assert!(tracklet_corr(&a[..1], &b[..1]).is_err());
    }

    #[test]
    fn still_frames() {
        let still = vec![[1.0, 1.0]; 3];
        let moving = from_disp(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(tracklet_corr(&still, &still).unwrap(), 1.0);
        assert_eq!(tracklet_corr(&still, &moving).unwrap(), 0.0);
    }

    #[test]
    fn nearest_frames_rank_self_first() {
        let corpus = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let r = smm_nearest_frames(&[1.0, 1.0], &corpus).unwrap();
        assert_eq!((r[0].index, r[0].distance), (1, 0.0));
        assert_eq!(r[1].index, 0);
        assert_eq!(smm_nearest_frames(&[0.0], &[vec![5.0]]).unwrap()[0].index, 0);
        assert!(smm_nearest_frames(&[0.0], &[]).is_err());
    }
}
