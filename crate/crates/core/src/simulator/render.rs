use super::{LaneGeometry, Road, Simulation};
use crate::geom::{BBox, Vec2};
use crate::ingest::{DirFrameStore, FrameManifest, FrameSource, IngestError, PixelRect};
use image::{Rgb, RgbImage};
use std::sync::{Arc, OnceLock};

pub const BACKGROUND: Rgb<u8> = Rgb([72, 104, 64]);
pub const ROAD: Rgb<u8> = Rgb([88, 88, 92]);
const MARKING: Rgb<u8> = Rgb([220, 220, 220]);
const DASH: f64 = 24.0;

pub fn class_color(class: &str) -> Rgb<u8> {
    match class {
        "truck" => Rgb([40, 60, 200]),
        "bus" => Rgb([230, 180, 30]),
        _ => Rgb([200, 40, 40]),
    }
}

/// Road-aligned coordinates `(along, across)` of a pixel centre relative to
/// the road centre line.
fn road_coords(road: &Road, p: Vec2) -> (f64, f64) {
    match road.geometry {
        LaneGeometry::Straight { angle_deg } => {
            let dir = Vec2::new(1.0, 0.0).rotate(angle_deg.to_radians());
            let c = Vec2::new(road.frame_w as f64 / 2.0, road.frame_h as f64 / 2.0);
            let q = p - c;
            (q.dot(dir), q.dot(dir.rot90()))
        }
        LaneGeometry::Arc {
            center,
            radius,
            span_deg,
            ..
        } => {
            let q = p - Vec2::new(center[0], center[1]);
            (
                q.y.atan2(q.x) * radius,
                span_deg.signum() * (radius - q.norm()),
            )
        }
    }
}

fn background_at(road: &Road, lanes: u32, p: Vec2) -> Rgb<u8> {
    let (along, across) = road_coords(road, p);
    let half = lanes as f64 * road.lane_width / 2.0;
    if across.abs() > half + 1.0 {
        return BACKGROUND;
    }
    for k in 0..=lanes {
        let line = k as f64 * road.lane_width - half;
        if (across - line).abs() < 1.0 {
            let edge = k == 0 || k == lanes;
            if edge || along.rem_euclid(2.0 * DASH) < DASH {
                return MARKING;
            }
        }
    }
    if across.abs() > half {
        BACKGROUND
    } else {
        ROAD
    }
}

/// Renders pixels `rect` of a scene: road, lane markings, then the boxes as
/// filled rectangles in order. A pixel belongs to a box when its centre lies
/// strictly inside it.
pub fn paint(road: &Road, lanes: u32, rect: PixelRect, boxes: &[(BBox, Rgb<u8>)]) -> RgbImage {
    let mut img = RgbImage::from_fn(rect.width(), rect.height(), |x, y| {
        background_at(
            road,
            lanes,
            Vec2::new((rect.x0 + x) as f64 + 0.5, (rect.y0 + y) as f64 + 0.5),
        )
    });
    paint_boxes(&mut img, rect, boxes);
    img
}

/// Fills `boxes` into `img`, which holds pixels `rect` of the frame.
fn paint_boxes(img: &mut RgbImage, rect: PixelRect, boxes: &[(BBox, Rgb<u8>)]) {
    for (b, color) in boxes {
        let x0 = (b.x_min - 0.5).ceil().max(rect.x0 as f64) as i64;
        let y0 = (b.y_min - 0.5).ceil().max(rect.y0 as f64) as i64;
        let x1 = (b.x_max - 0.5).floor().min(rect.x1 as f64 - 1.0) as i64;
        let y1 = (b.y_max - 0.5).floor().min(rect.y1 as f64 - 1.0) as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px > b.x_min && px < b.x_max && py > b.y_min && py < b.y_max {
                    img.put_pixel(
                        (x - rect.x0 as i64) as u32,
                        (y - rect.y0 as i64) as u32,
                        *color,
                    );
                }
            }
        }
    }
}

impl Simulation {
    pub fn full_rect(&self) -> PixelRect {
        PixelRect {
            x0: 0,
            y0: 0,
            x1: self.spec.frame_w,
            y1: self.spec.frame_h,
        }
    }

    fn boxes_at(&self, t: u64) -> Vec<(BBox, Rgb<u8>)> {
        self.detections_at(t)
            .iter()
            .map(|d| (d.bbox, class_color(&d.class_label)))
            .collect()
    }

    pub fn render_region(&self, t: u64, rect: PixelRect) -> RgbImage {
        paint(&self.road, self.spec.lanes, rect, &self.boxes_at(t))
    }

    /// The scene without vehicles.
    pub fn background(&self) -> RgbImage {
        paint(&self.road, self.spec.lanes, self.full_rect(), &[])
    }

    pub fn render_frame(&self, t: u64) -> RgbImage {
        self.render_region(t, self.full_rect())
    }
}

/// Copies `rect` out of a full-frame background and paints frame `t`'s boxes.
fn compose(bg: &RgbImage, sim: &Simulation, t: u64, rect: PixelRect) -> RgbImage {
    let (w, stride) = (rect.width() as usize * 3, bg.width() as usize * 3);
    let mut buf = Vec::with_capacity(w * rect.height() as usize);
    for y in rect.y0..rect.y1 {
        let start = y as usize * stride + rect.x0 as usize * 3;
        buf.extend_from_slice(&bg.as_raw()[start..start + w]);
    }
    let mut img =
        RgbImage::from_raw(rect.width(), rect.height(), buf).expect("buffer sized to rect");
    paint_boxes(&mut img, rect, &sim.boxes_at(t));
    img
}

/// Frames rendered on demand. The static background is rendered once and
/// shared by clones; each frame copies it and paints the boxes.
#[derive(Debug, Clone)]
pub struct SimFrames {
    sim: Arc<Simulation>,
    fps: f64,
    background: Arc<OnceLock<RgbImage>>,
}

impl SimFrames {
    pub fn new(sim: Arc<Simulation>, fps: f64) -> Self {
        Self {
            sim,
            fps,
            background: Arc::default(),
        }
    }

    fn render(&self, t: u64, rect: PixelRect) -> RgbImage {
        let bg = self.background.get_or_init(|| self.sim.background());
        compose(bg, &self.sim, t, rect)
    }
}

impl FrameSource for SimFrames {
    fn dims(&self) -> (u32, u32) {
        (self.sim.spec.frame_w, self.sim.spec.frame_h)
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn resolve(&self, frame_index: u64) -> Result<Option<RgbImage>, IngestError> {
        Ok((frame_index < self.sim.spec.duration)
            .then(|| self.render(frame_index, self.sim.full_rect())))
    }

    fn resolve_region(
        &self,
        frame_index: u64,
        region: PixelRect,
    ) -> Result<Option<RgbImage>, IngestError> {
        Ok((frame_index < self.sim.spec.duration).then(|| self.render(frame_index, region)))
    }
}

/// Writes every frame of the simulation into a new frame directory.
pub fn render_frames(
    sim: &Simulation,
    dir: &std::path::Path,
    fps: f64,
) -> Result<DirFrameStore, IngestError> {
    let store = DirFrameStore::create(
        dir,
        FrameManifest {
            width: sim.spec.frame_w,
            height: sim.spec.frame_h,
            fps,
            ext: Some("png".into()),
            frame_count: Some(sim.spec.duration),
        },
    )?;
    let bg = sim.background();
    for t in 0..sim.spec.duration {
        store.write_frame(t, &compose(&bg, sim, t, sim.full_rect()))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, LaneGeometry, ScenarioSpec};

    fn empty_scene() -> Simulation {
        simulate(&ScenarioSpec {
            lanes: 2,
            lane_width: 36.0,
            geometry: LaneGeometry::Straight { angle_deg: 10.0 },
            vehicles: 0,
            nominal_speed: 8.0,
            speed_jitter: 0.0,
            spawn_rate: 1.0,
            duration: 3,
            frame_w: 160,
            frame_h: 120,
            seed: 0,
            anomalies: vec![],
            flow_shift: None,
            warm_start: 0,
            position_noise: 0.0,
            vehicle_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn one_box_changes_exactly_its_pixels() {
        let sim = empty_scene();
        let rect = sim.full_rect();
        let bg = paint(&sim.road, 2, rect, &[]);
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let red = Rgb([255, 0, 255]);
        let img = paint(&sim.road, 2, rect, &[(b, red)]);
        for (x, y, p) in img.enumerate_pixels() {
            let inside = (10..20).contains(&x) && (10..20).contains(&y);
            if inside {
                assert_eq!(*p, red);
            } else {
                assert_eq!(p, bg.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn empty_scene_is_pure_background() {
        let sim = empty_scene();
        let img = sim.render_frame(0);
        let bg = paint(&sim.road, 2, sim.full_rect(), &[]);
        assert_eq!(img, bg);
        assert!(img.pixels().any(|p| *p == ROAD));
        assert!(img.pixels().any(|p| *p == BACKGROUND));
    }

    #[test]
    fn region_render_matches_full_frame_crop() {
        let sim = simulate(&crate::simulator::scenarios::recall_scenario(1)).unwrap();
        let t = sim.frames().iter().position(|f| !f.is_empty()).unwrap() as u64;
        let full = sim.render_frame(t);
        let rect = PixelRect {
            x0: 300,
            y0: 200,
            x1: 700,
            y1: 500,
        };
        let part = sim.render_region(t, rect);
        let cut = image::imageops::crop_imm(&full, 300, 200, 400, 300).to_image();
        assert_eq!(part, cut);
    }

    #[test]
    fn cached_source_matches_direct_render() {
        let sim = Arc::new(simulate(&crate::simulator::scenarios::recall_scenario(2)).unwrap());
        let src = SimFrames::new(sim.clone(), 10.0);
        let rect = PixelRect {
            x0: 100,
            y0: 50,
            x1: 900,
            y1: 600,
        };
        for t in [0, 57, 150] {
            assert_eq!(src.resolve(t).unwrap().unwrap(), sim.render_frame(t));
            assert_eq!(
                src.resolve_region(t, rect).unwrap().unwrap(),
                sim.render_region(t, rect)
            );
        }
        assert!(src.resolve(sim.spec.duration).unwrap().is_none());
    }
}
