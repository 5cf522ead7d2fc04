//! Ranks of matching pairs in a square image × text similarity matrix.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Each image queries the text gallery (rows).
    ImageToText,
    /// Each text queries the image gallery (columns).
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn name(self) -> &'static str {
        match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "image_to_text" => Ok(Direction::ImageToText),
            "text_to_image" => Ok(Direction::TextToImage),
            _ => Err(Error::invalid(format!("unknown direction {s:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rows index images, columns index texts; pair `i` sits on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub case_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, case_ids: Vec<String>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] != case_ids.len() {
            return Err(Error::shape(
                "similarity",
                format!("{s:?} for {} case ids", case_ids.len()),
            ));
        }
        Ok(SimilarityMatrix { values, case_ids })
    }

    /// Matrix without case ids (ids are the indices).
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        let n = values.shape().first().copied().unwrap_or(0);
        Self::new(values, (0..n).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn get(&self, image: usize, text: usize) -> f64 {
        self.values.data()[image * self.len() + text]
    }

    /// Similarity of query `q` to candidate `c` in `dir`.
    fn score(&self, dir: Direction, q: usize, c: usize) -> f64 {
        match dir {
            Direction::ImageToText => self.get(q, c),
            Direction::TextToImage => self.get(c, q),
        }
    }
}

/// 1-based rank of the match for every query: one plus the candidates scoring
/// strictly higher plus the tied candidates with a smaller index.
pub fn ranks(sim: &SimilarityMatrix, dir: Direction) -> Vec<usize> {
    let n = sim.len();
    (0..n)
        .map(|q| {
            let m = sim.score(dir, q, q);
            1 + (0..n)
                .filter(|&c| {
                    let s = sim.score(dir, q, c);
                    s > m || (s == m && c < q)
                })
                .count()
        })
        .collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} outside 1..={n}")));
    }
    Ok(())
}

/// Fraction of `items` whose rank is at most `k`.
pub fn recall_of(ranks: &[usize], items: &[usize], k: usize) -> f64 {
    items.iter().filter(|&&i| ranks[i] <= k).count() as f64 / items.len() as f64
}

pub fn mean_of(ranks: &[usize], items: &[usize]) -> f64 {
    items.iter().map(|&i| ranks[i] as f64).sum::<f64>() / items.len() as f64
}

/// Median with the two middle values averaged for even counts.
pub fn median_of(ranks: &[usize], items: &[usize]) -> f64 {
    let mut v: Vec<usize> = items.iter().map(|&i| ranks[i]).collect();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, dir: Direction) -> Result<f64> {
    check_k(k, sim.len())?;
    let r = ranks(sim, dir);
    let all: Vec<usize> = (0..r.len()).collect();
    Ok(recall_of(&r, &all, k))
}

/// `(mean rank, median rank)`.
pub fn rank_stats(sim: &SimilarityMatrix, dir: Direction) -> Result<(f64, f64)> {
    if sim.is_empty() {
        return Err(Error::invalid("rank statistics of an empty matrix"));
    }
    let r = ranks(sim, dir);
    let all: Vec<usize> = (0..r.len()).collect();
    Ok((mean_of(&r, &all), median_of(&r, &all)))
}
