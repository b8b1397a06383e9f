//! Bidirectional retrieval metrics over a cosine similarity matrix.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Text queries ranked against videos (columns of S^T).
    TextToVideo,
    /// Video queries ranked against texts (rows of S).
    VideoToText,
}

/// `S[q][r]` = cosine of video row `q` and text row `r`.
pub fn similarity_matrix(videos: &Array2<f64>, texts: &Array2<f64>) -> Result<Array2<f64>> {
    if videos.ncols() != texts.ncols() {
        return Err(Error::shape(
            "similarity",
            format!("video dim {} != text dim {}", videos.ncols(), texts.ncols()),
        ));
    }
    let norm = |m: &Array2<f64>| {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        out
    };
    Ok(norm(videos).dot(&norm(texts).t()))
}

/// Rank (1-based) of the true item for each query. Items with equal score
/// and a smaller index rank ahead of the true item.
///
/// `truth[q]` is the true column of text query `q` for text-to-video, or of
/// video query `q` for video-to-text. `S` is always videos x texts.
pub fn ranks(s: &Array2<f64>, truth: &[usize], direction: Direction) -> Vec<usize> {
    let score = |query: usize, item: usize| match direction {
        Direction::TextToVideo => s[[item, query]],
        Direction::VideoToText => s[[query, item]],
    };
    let items = match direction {
        Direction::TextToVideo => s.nrows(),
        Direction::VideoToText => s.ncols(),
    };
    truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let target = score(q, t);
            1 + (0..items)
                .filter(|&i| {
                    let x = score(q, i);
                    x > target || (x == target && i < t)
                })
                .count()
        })
        .collect()
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn median(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return f64::NAN;
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

pub fn recall_at_k(s: &Array2<f64>, truth: &[usize], k: usize, direction: Direction) -> f64 {
    recall_from_ranks(&ranks(s, truth, direction), k)
}

pub fn median_rank(s: &Array2<f64>, truth: &[usize], direction: Direction) -> f64 {
    median(&ranks(s, truth, direction))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
}

impl DirectionMetrics {
    fn from_ranks(ranks: &[usize]) -> Self {
        DirectionMetrics {
            r1: recall_from_ranks(ranks, 1),
            r5: recall_from_ranks(ranks, 5),
            r10: recall_from_ranks(ranks, 10),
            mdr: median(ranks),
        }
    }

    fn recall_sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t2v: DirectionMetrics,
    pub v2t: DirectionMetrics,
    pub r_sum: f64,
    pub count: usize,
}

impl MetricsReport {
    /// Metrics for a videos x texts similarity matrix where text `j` belongs
    /// to video `text_to_video[j]` and the pairing is one-to-one.
    pub fn from_similarity(s: &Array2<f64>, text_to_video: &[usize]) -> Result<Self> {
        if s.ncols() != text_to_video.len() {
            return Err(Error::shape("metrics", "pairing length differs from text count"));
        }
        let mut video_to_text = vec![usize::MAX; s.nrows()];
        for (t, &v) in text_to_video.iter().enumerate() {
            if v >= s.nrows() || video_to_text[v] != usize::MAX {
                return Err(Error::InvalidRecord {
                    id: format!("text #{t}"),
                    reason: "pairing is not one-to-one".into(),
                });
            }
            video_to_text[v] = t;
        }
        if video_to_text.contains(&usize::MAX) {
            return Err(Error::NotSquare { rows: s.nrows(), cols: s.ncols() });
        }
        let t2v = DirectionMetrics::from_ranks(&ranks(s, text_to_video, Direction::TextToVideo));
        let v2t = DirectionMetrics::from_ranks(&ranks(s, &video_to_text, Direction::VideoToText));
        Ok(MetricsReport {
            r_sum: t2v.recall_sum() + v2t.recall_sum(),
            t2v,
            v2t,
            count: text_to_video.len(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<5} {:>7} {:>7} {:>7} {:>7}", "dir", "R@1", "R@5", "R@10", "MdR")?;
        for (name, m) in [("t2v", &self.t2v), ("v2t", &self.v2t)] {
            writeln!(f, "{:<5} {:>7.2} {:>7.2} {:>7.2} {:>7.1}", name, m.r1, m.r5, m.r10, m.mdr)?;
        }
        write!(f, "R@Sum {:.2} over {} pairs", self.r_sum, self.count)
    }
}
