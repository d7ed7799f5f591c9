//! Sliced-inference geometry: overlapping tile plans and the merge of
//! per-tile detections back into frame coordinates.

use crate::geom::BBox;
use crate::ingest::Detection;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TilingError {
    #[error("invalid tiling parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub frame_w: u32,
    pub frame_h: u32,
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap: f64,
    /// Row-major tile rectangles.
    pub tiles: Vec<BBox>,
}

/// Tile origins along one axis. The final tile is shifted inward so that it
/// keeps the full tile size and ends exactly at the frame edge.
fn axis_origins(frame: u32, tile: u32, overlap: f64) -> Vec<u32> {
    let overlap_px = (overlap * tile as f64).floor() as u32;
    let stride = (tile - overlap_px).max(1);
    let mut origins = Vec::new();
    let mut x = 0;
    while x + tile < frame {
        origins.push(x);
        x += stride;
    }
    let last = frame - tile;
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

pub fn plan_tiles(
    frame_w: u32,
    frame_h: u32,
    tile_w: u32,
    tile_h: u32,
    overlap: f64,
) -> Result<TilePlan, TilingError> {
    if tile_w == 0 || tile_w > frame_w {
        return Err(TilingError::Parameter(format!(
            "tile width {tile_w} not in (0, {frame_w}]"
        )));
    }
    if tile_h == 0 || tile_h > frame_h {
        return Err(TilingError::Parameter(format!(
            "tile height {tile_h} not in (0, {frame_h}]"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(TilingError::Parameter(format!(
            "overlap {overlap} not in [0, 1)"
        )));
    }
    let xs = axis_origins(frame_w, tile_w, overlap);
    let ys = axis_origins(frame_h, tile_h, overlap);
    let tiles = ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| BBox {
                x_min: x as f64,
                y_min: y as f64,
                x_max: (x + tile_w) as f64,
                y_max: (y + tile_h) as f64,
            })
        })
        .collect();
    Ok(TilePlan {
        frame_w,
        frame_h,
        tile_w,
        tile_h,
        overlap,
        tiles,
    })
}

/// Suppression order: confidence descending, then lower track id (untracked
/// last), then lexicographic box corners.
fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| match (a.track_id, b.track_id) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| {
            a.bbox
                .as_array()
                .iter()
                .zip(b.bbox.as_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.class_label.cmp(&b.class_label))
}

/// Class-aware greedy non-maximum suppression. Survivors of the same class
/// have pairwise IoU at most `iou_threshold`.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(nms_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_label == det.class_label && k.bbox.iou(&det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Translates tile-local detections into frame coordinates and suppresses
/// duplicates seen by overlapping tiles.
pub fn merge_detections(per_tile: &[(BBox, Vec<Detection>)], iou_threshold: f64) -> Vec<Detection> {
    let global = per_tile
        .iter()
        .flat_map(|(tile, dets)| {
            dets.iter().map(move |d| Detection {
                bbox: d.bbox.translate(tile.x_min, tile.y_min),
                tile: None,
                ..d.clone()
            })
        })
        .collect();
    nms(global, iou_threshold)
}
