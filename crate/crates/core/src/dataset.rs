//! Dataset-level operations that do not touch the filesystem: splits,
//! trimester mixes, and filling ellipse-outline annotations.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::image::{BinaryMask, TrimesterLabel};
use crate::rng;

/// Trimester proportions of the reference population.
pub const TRIMESTER_MIX: [f64; 3] = [0.16, 0.70, 0.14];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("{got} entries cannot provide a train split plus {val_count} validation entries")]
    TooFewEntries { got: usize, val_count: usize },
    #[error("proportions must be non-negative and sum to 1, got {0:?}")]
    BadProportions([f64; 3]),
    #[error("annotation contour is not closed")]
    OpenContour,
    #[error("annotation contour is empty")]
    EmptyContour,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seeded train/test split with validation drawn from the test portion.
///
/// `round(n * train_frac)` ids go to train; of the remainder the first
/// `val_count` (after shuffling) become validation and the rest test.
pub fn split_dataset(
    ids: &[String],
    train_frac: f64,
    val_count: usize,
    seed: u64,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    let n = ids.len();
    let too_few = DatasetError::TooFewEntries { got: n, val_count };
    if n < val_count + 1 {
        return Err(too_few);
    }
    let n_train = libm::round(n as f64 * train_frac.clamp(0.0, 1.0)) as usize;
    if n - n_train < val_count {
        return Err(too_few);
    }
    // sort first so the split depends only on the id set and the seed
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.dedup();
    if order.len() != n {
        // duplicate ids cannot be partitioned
        return Err(too_few);
    }
    let mut r = rng::stream(seed, 0x5917);
    order.shuffle(&mut r);
    let mut out = BTreeMap::new();
    for (i, id) in order.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + val_count {
            Split::Val
        } else {
            Split::Test
        };
        out.insert(id.clone(), split);
    }
    Ok(out)
}

pub fn validate_proportions(p: [f64; 3]) -> Result<(), DatasetError> {
    let ok = p.iter().all(|v| v.is_finite() && *v >= 0.0) && libm::fabs(p.iter().sum::<f64>() - 1.0) <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(DatasetError::BadProportions(p))
    }
}

/// Draw `n` independent trimester labels with the given proportions.
pub fn sample_trimester_mix(n: usize, proportions: [f64; 3], seed: u64) -> Result<Vec<TrimesterLabel>, DatasetError> {
    validate_proportions(proportions)?;
    let mut r = rng::stream(seed, 0x7215);
    // last class with non-zero mass absorbs floating-point slack in the cumulative sum
    let last = (0..3).rev().find(|&i| proportions[i] > 0.0).unwrap_or(0);
    Ok((0..n)
        .map(|_| {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let idx = (0..3)
                .find(|&i| {
                    acc += proportions[i];
                    proportions[i] > 0.0 && u < acc
                })
                .unwrap_or(last);
            TrimesterLabel::ALL[idx]
        })
        .collect())
}

pub fn trimester_counts(labels: &[TrimesterLabel]) -> [usize; 3] {
    let mut c = [0; 3];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |x, y| {
        (y.saturating_sub(1)..=(y + 1).min(h - 1))
            .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| mask.get(xx, yy)))
    })
    .expect("valid dims")
}

fn erode(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |x, y| {
        (y.saturating_sub(1)..=(y + 1).min(h - 1))
            .all(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| mask.get(xx, yy)))
    })
    .expect("valid dims")
}

/// 3×3 morphological closing.
pub fn close(mask: &BinaryMask) -> BinaryMask {
    let closed = erode(&dilate(mask));
    // closing is extensive; keep original pixels that touch the border
    let pixels = closed.pixels().iter().zip(mask.pixels()).map(|(&c, &m)| c | m).collect();
    BinaryMask::new(mask.height(), mask.width(), pixels).expect("valid dims")
}

/// Turn a thin outline annotation into a filled mask: close small gaps, then
/// flood-fill (4-connected) from the outline's centroid.
pub fn fill_contour(contour: &BinaryMask) -> Result<BinaryMask, DatasetError> {
    let (h, w) = (contour.height(), contour.width());
    let closed = close(contour);
    let n = closed.count();
    if n == 0 {
        return Err(DatasetError::EmptyContour);
    }
    let (mut sx, mut sy) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if closed.get(x, y) {
                sx += x;
                sy += y;
            }
        }
    }
    let (cx, cy) = ((sx + n / 2) / n, (sy + n / 2) / n);
    let mut filled = closed.clone();
    if closed.get(cx, cy) {
        // centroid on the outline: nothing enclosed around it
        return Err(DatasetError::OpenContour);
    }
    let mut stack = vec![(cx, cy)];
    filled.set(cx, cy, true);
    while let Some((x, y)) = stack.pop() {
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            return Err(DatasetError::OpenContour);
        }
        for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
            if !filled.get(nx, ny) {
                filled.set(nx, ny, true);
                stack.push((nx, ny));
            }
        }
    }
    Ok(filled)
}
