//! Review queue for extracted masks: enqueue, decide, export selection.
//!
//! Images live outside this state (the store keeps references); masks are
//! never stored, they are re-rasterized from the ellipse each time.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ellipse::{rasterize_filled_ellipse, EllipseError, EllipseParams};
use crate::extraction::ExtractionStatus;
use crate::image::{BinaryMask, TrimesterLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pending => "pending",
            Self::Accepted => "accepted",
            Self::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Pending, Self::Accepted, Self::Rejected].into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReviewItem {
    pub id: String,
    pub trimester: TrimesterLabel,
    pub height: usize,
    pub width: usize,
    pub image_ref: String,
    pub raw_ref: String,
    pub proposed: EllipseParams,
    pub quality: f64,
    pub status: ReviewStatus,
    /// Unix milliseconds.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub decided_at: Option<u64>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub edited_ellipse: Option<EllipseParams>,
}

impl ReviewItem {
    /// The ellipse that defines the item's mask.
    pub fn effective_ellipse(&self) -> EllipseParams {
        self.edited_ellipse.unwrap_or(self.proposed)
    }

    pub fn mask(&self) -> BinaryMask {
        rasterize_filled_ellipse(&self.effective_ellipse(), self.height, self.width)
    }

    pub fn check_invariants(&self) -> bool {
        (self.decided_at.is_some() == (self.status != ReviewStatus::Pending))
            && (self.edited_ellipse.is_none() || self.status == ReviewStatus::Accepted)
    }
}

/// One extractor output offered to the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub trimester: TrimesterLabel,
    pub height: usize,
    pub width: usize,
    pub image_ref: String,
    pub raw_ref: String,
    pub ellipse: Option<EllipseParams>,
    pub quality: f64,
    pub status: ExtractionStatus,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "action", rename_all = "snake_case"))]
pub enum Decision {
    Accept,
    Reject,
    AcceptWithEdit { ellipse: EllipseParams },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurationError {
    #[error("item {0} not found")]
    NotFound(String),
    #[error("item {0} already decided")]
    AlreadyDecided(String),
    #[error("invalid ellipse: {0}")]
    InvalidEllipse(#[from] EllipseError),
    #[error("item {id} has status {status:?}; only needs_review or accepted_auto can be queued")]
    InvalidStatus { id: String, status: ExtractionStatus },
    #[error("item {0} carries no ellipse")]
    MissingEllipse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnqueueReport {
    pub added: usize,
    pub auto_accepted: usize,
    /// Already known ids, skipped.
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurationState {
    pub items: BTreeMap<String, ReviewItem>,
    /// accepted_auto results that skipped review.
    pub auto_accepted: BTreeMap<String, ReviewItem>,
}

impl CurationState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains_key(id) || self.auto_accepted.contains_key(id)
    }

    /// Queue `needs_review` candidates as pending. `accepted_auto` ones go to
    /// the auto-accepted set, or to the queue when `audit` is set. The batch
    /// is checked first; on error nothing is changed.
    pub fn enqueue(&mut self, batch: &[Candidate], audit: bool) -> Result<EnqueueReport, CurationError> {
        for c in batch {
            if c.status == ExtractionStatus::RejectedAuto {
                return Err(CurationError::InvalidStatus {
                    id: c.id.clone(),
                    status: c.status,
                });
            }
            match c.ellipse {
                None => return Err(CurationError::MissingEllipse(c.id.clone())),
                Some(e) => e.validate_in(c.height, c.width)?,
            }
        }
        let mut report = EnqueueReport::default();
        for c in batch {
            if self.contains(&c.id) {
                report.duplicates += 1;
                continue;
            }
            let item = ReviewItem {
                id: c.id.clone(),
                trimester: c.trimester,
                height: c.height,
                width: c.width,
                image_ref: c.image_ref.clone(),
                raw_ref: c.raw_ref.clone(),
                proposed: c.ellipse.expect("checked above"),
                quality: c.quality,
                status: ReviewStatus::Pending,
                decided_at: None,
                edited_ellipse: None,
            };
            if c.status == ExtractionStatus::AcceptedAuto && !audit {
                self.auto_accepted.insert(c.id.clone(), item);
                report.auto_accepted += 1;
            } else {
                self.items.insert(c.id.clone(), item);
                report.added += 1;
            }
        }
        Ok(report)
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.items.get(id).or_else(|| self.auto_accepted.get(id))
    }

    /// Review items with the given status (all when `None`), ordered by id.
    pub fn list(&self, status: Option<ReviewStatus>) -> Vec<&ReviewItem> {
        self.items.values().filter(|i| status.is_none_or(|s| i.status == s)).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for i in self.items.values() {
            out[i.status as usize] += 1;
        }
        out
    }

    /// Apply a decision to a pending item.
    pub fn decide(&mut self, id: &str, decision: &Decision, now_ms: u64) -> Result<ReviewItem, CurationError> {
        let item = self.items.get_mut(id).ok_or_else(|| CurationError::NotFound(id.into()))?;
        if item.status != ReviewStatus::Pending {
            return Err(CurationError::AlreadyDecided(id.into()));
        }
        match decision {
            Decision::Accept => item.status = ReviewStatus::Accepted,
            Decision::Reject => item.status = ReviewStatus::Rejected,
            Decision::AcceptWithEdit { ellipse } => {
                ellipse.validate_in(item.height, item.width)?;
                item.status = ReviewStatus::Accepted;
                item.edited_ellipse = Some(*ellipse);
            }
        }
        item.decided_at = Some(now_ms);
        Ok(item.clone())
    }

    /// Accepted-auto plus human-accepted items, sorted by id.
    pub fn export_selection(&self) -> Vec<&ReviewItem> {
        let mut out: Vec<&ReviewItem> = self
            .auto_accepted
            .values()
            .chain(self.items.values().filter(|i| i.status == ReviewStatus::Accepted))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn cand(i: usize, status: ExtractionStatus) -> Candidate {
        Candidate {
            id: format!("s{i:03}"),
            trimester: TrimesterLabel::Second,
            height: 64,
            width: 64,
            image_ref: format!("images/s{i:03}.png"),
            raw_ref: format!("raw/s{i:03}.png"),
            ellipse: Some(EllipseParams::canonical(32.0, 30.0, 20.0, 12.0, 0.3)),
            quality: 0.8,
            status,
        }
    }

    fn batch(n: usize) -> Vec<Candidate> {
        (0..n).map(|i| cand(i, ExtractionStatus::NeedsReview)).collect()
    }

    #[test]
    fn enqueue_is_idempotent() {
        let mut s = CurationState::new();
        let r = s.enqueue(&batch(10), false).unwrap();
        assert_eq!((r.added, r.duplicates), (10, 0));
        assert_eq!(s.list(Some(ReviewStatus::Pending)).len(), 10);
        let r = s.enqueue(&batch(10), false).unwrap();
        assert_eq!((r.added, r.duplicates), (0, 10));
        assert_eq!(s.items.len(), 10);
    }

    #[test]
    fn rejected_auto_refused_without_side_effects() {
        let mut s = CurationState::new();
        let mut b = batch(3);
        b.push(cand(9, ExtractionStatus::RejectedAuto));
        assert!(matches!(s.enqueue(&b, false), Err(CurationError::InvalidStatus { .. })));
        assert!(s.items.is_empty());
    }

    #[test]
    fn auto_accepted_skip_review_unless_audited() {
        let mut s = CurationState::new();
        let b = [cand(0, ExtractionStatus::AcceptedAuto), cand(1, ExtractionStatus::NeedsReview)];
        let r = s.enqueue(&b, false).unwrap();
        assert_eq!((r.added, r.auto_accepted), (1, 1));
        let mut audited = CurationState::new();
        assert_eq!(audited.enqueue(&b, true).unwrap().added, 2);
    }

    #[test]
    fn state_machine() {
        let mut s = CurationState::new();
        s.enqueue(&batch(3), false).unwrap();
        let a = s.decide("s000", &Decision::Accept, 5).unwrap();
        assert_eq!((a.status, a.decided_at), (ReviewStatus::Accepted, Some(5)));
        assert_eq!(a.mask(), rasterize_filled_ellipse(&a.proposed, 64, 64));
        assert_eq!(s.decide("s000", &Decision::Reject, 6), Err(CurationError::AlreadyDecided("s000".into())));
        assert_eq!(s.decide("nope", &Decision::Accept, 6), Err(CurationError::NotFound("nope".into())));
        let bad = EllipseParams { b: 0.0, ..a.proposed };
        assert!(matches!(
            s.decide("s001", &Decision::AcceptWithEdit { ellipse: bad }, 7),
            Err(CurationError::InvalidEllipse(_))
        ));
        assert_eq!(s.get("s001").unwrap().status, ReviewStatus::Pending);
        let moved = EllipseParams { cx: a.proposed.cx + 5.0, cy: a.proposed.cy + 3.0, ..a.proposed };
        let e = s.decide("s001", &Decision::AcceptWithEdit { ellipse: moved }, 8).unwrap();
        assert_eq!(e.mask(), rasterize_filled_ellipse(&moved, 64, 64));
        s.decide("s002", &Decision::Reject, 9).unwrap();
        assert!(s.items.values().all(ReviewItem::check_invariants));
        assert_eq!(s.counts(), [0, 2, 1]);
    }

    #[test]
    fn export_filters_and_sorts() {
        let mut s = CurationState::new();
        assert!(s.export_selection().is_empty());
        let mut b: Vec<Candidate> = (0..6).rev().map(|i| cand(i, ExtractionStatus::NeedsReview)).collect();
        b.push(cand(7, ExtractionStatus::AcceptedAuto));
        s.enqueue(&b, false).unwrap();
        for id in ["s000", "s002", "s004"] {
            s.decide(id, &Decision::Accept, 1).unwrap();
        }
        s.decide("s001", &Decision::Reject, 1).unwrap();
        s.decide("s003", &Decision::Reject, 1).unwrap();
        let ids: Vec<&str> = s.export_selection().iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["s000", "s002", "s004", "s007"]);
    }
}
