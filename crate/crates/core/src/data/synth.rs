//! Procedural silhouette generator: black figures on white, one body blob
//! plus class-defining appendages — radial spikes (class 0, "crab"), one
//! long thin curved tail (class 1, "lion"), two parallel ears (class 2,
//! "hare").
//!
//! Every figure is a union of two signed-distance primitives (wobbly disc,
//! tapered segment) rendered with a one-pixel smoothstep edge. Body size is
//! drawn from the same distribution for all three classes; appendages that
//! would leave the canvas are shortened, never the body, so figure scale
//! carries no class information. Each example draws its own RNG stream from
//! the master seed, making the dataset reproducible image-by-image. Appendage
//! direction is randomized, so class identity survives a training regime
//! that rotates and shifts at will.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{normalize, GrayImage, RawImage};
use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Generator knobs. Lengths and widths are fractions of the body radius.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Examples per class. Each ≥ 1.
    pub counts: [usize; 3],
    /// Canvas side in pixels. ≥ 16 so appendages survive quantization.
    pub size: usize,
    /// Master seed; every image derives its own stream from it.
    pub seed: u64,
    /// Inclusive range of spike (leg) count for class 0. Within 1..=16.
    pub spike_min: usize,
    pub spike_max: usize,
    /// Tail arc length, fraction of body radius. In (0, 3].
    pub tail_len: f64,
    /// Tail half-width at the root, fraction of body radius. In (0, 0.5].
    pub tail_width: f64,
    /// Ear length, fraction of body radius. In (0, 3].
    pub ear_len: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            counts: [100, 100, 105],
            size: 50,
            seed: 0,
            spike_min: 6,
            spike_max: 8,
            tail_len: 2.2,
            tail_width: 0.14,
            ear_len: 0.95,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts.iter().any(|&c| c == 0) {
            return Err(Error::Parameter(format!(
                "per-class counts {:?} must all be at least 1",
                self.counts
            )));
        }
        if self.size < 16 {
            return Err(Error::Parameter(format!(
                "canvas side {} below the 16-pixel minimum",
                self.size
            )));
        }
        if self.spike_min < 1 || self.spike_max > 16 || self.spike_min > self.spike_max {
            return Err(Error::Parameter(format!(
                "spike range {}..={} outside 1..=16",
                self.spike_min, self.spike_max
            )));
        }
        for (name, v, hi) in [
            ("tail_len", self.tail_len, 3.0),
            ("tail_width", self.tail_width, 0.5),
            ("ear_len", self.ear_len, 3.0),
        ] {
            if !v.is_finite() || v <= 0.0 || v > hi {
                return Err(Error::Parameter(format!("{name} {v} outside (0, {hi}]")));
            }
        }
        Ok(())
    }
}

// Distinct stream tags; image streams add class and index.
const TAG_QUERY: u64 = 0x7175_6572_79; // "query"
const TAG_IMAGE_BASE: u64 = 0x1000_0000;

/// Signed-distance primitives. Negative = inside the figure.
#[derive(Clone)]
enum Prim {
    /// Disc of radius `r` around (cx, cy), boundary modulated by three
    /// low-order harmonics (amplitude, phase).
    Blob {
        cx: f64,
        cy: f64,
        r: f64,
        harm: [(f64, f64); 3],
    },
    /// Segment from (x0,y0) to (x1,y1) with half-width lerping w0 → w1.
    Taper {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        w0: f64,
        w1: f64,
    },
}

impl Prim {
    fn sdf(&self, px: f64, py: f64) -> f64 {
        match *self {
            Prim::Blob { cx, cy, r, harm } => {
                let dx = px - cx;
                let dy = py - cy;
                let dist = (dx * dx + dy * dy).sqrt();
                let phi = dy.atan2(dx);
                let mut radius = r;
                for (i, &(amp, phase)) in harm.iter().enumerate() {
                    radius += r * amp * ((i as f64 + 1.0) * phi + phase).sin();
                }
                dist - radius
            }
            Prim::Taper { x0, y0, x1, y1, w0, w1 } => {
                let ex = x1 - x0;
                let ey = y1 - y0;
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 0.0 {
                    (((px - x0) * ex + (py - y0) * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let qx = px - (x0 + t * ex);
                let qy = py - (y0 + t * ey);
                (qx * qx + qy * qy).sqrt() - (w0 + (w1 - w0) * t)
            }
        }
    }
}

/// Half-width of the smoothstep band at the figure boundary, pixels.
const EDGE: f64 = 1.0;

fn render(prims: &[Prim], size: usize) -> RawImage {
    let mut px = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut d = f64::INFINITY;
            for p in prims {
                d = d.min(p.sdf(x as f64, y as f64));
            }
            // inside (d ≤ -EDGE) → 0 black; outside (d ≥ EDGE) → 255 white
            let t = ((d + EDGE) / (2.0 * EDGE)).clamp(0.0, 1.0);
            px[y * size + x] = (t * 255.0).round() as u8;
        }
    }
    RawImage::new(size, size, px).expect("render dimensions are positive")
}

fn body_blob(cx: f64, cy: f64, r: f64, rng: &mut ChaCha8Rng) -> Prim {
    // boundary jitter: low-order harmonics with small random amplitude
    let harm = [
        (rng.gen_range(0.02..0.08), rng.gen_range(0.0..std::f64::consts::TAU)),
        (rng.gen_range(0.02..0.08), rng.gen_range(0.0..std::f64::consts::TAU)),
        (rng.gen_range(0.01..0.05), rng.gen_range(0.0..std::f64::consts::TAU)),
    ];
    Prim::Blob { cx, cy, r, harm }
}

/// Straight appendage from `(x0,y0)` along `ang`, shortened if the tip would
/// leave the disc of radius `limit` around the canvas center.
fn capped_taper(
    c: f64,
    x0: f64,
    y0: f64,
    ang: f64,
    len: f64,
    w0: f64,
    w1: f64,
    limit: f64,
) -> Prim {
    let root_dist = (x0 - c).hypot(y0 - c);
    let len = len.min((limit - w1 - root_dist).max(0.0));
    let (sin, cos) = ang.sin_cos();
    Prim::Taper {
        x0,
        y0,
        x1: x0 + len * cos,
        y1: y0 + len * sin,
        w0,
        w1,
    }
}

/// Class 0: body plus `spike_min..=spike_max` tapered radial legs.
fn draw_crab(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Prim> {
    let c = cfg.size as f64 / 2.0;
    let limit = c - 2.0;
    let r = base_radius(cfg) * rng.gen_range(0.8..1.2);
    let rot = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut prims = vec![body_blob(c, c, r, rng)];
    let n = rng.gen_range(cfg.spike_min..=cfg.spike_max);
    for i in 0..n {
        let ang = rot
            + std::f64::consts::TAU * i as f64 / n as f64
            + rng.gen_range(-0.15..0.15);
        let len = r * rng.gen_range(0.9..1.3);
        let start = 0.70 * r;
        let (sin, cos) = ang.sin_cos();
        prims.push(capped_taper(
            c,
            c + start * cos,
            c + start * sin,
            ang,
            len,
            r * rng.gen_range(0.16..0.22),
            r * 0.05,
            limit,
        ));
    }
    prims
}

/// A tail: circular arc starting at the body edge with a radial tangent,
/// flattened to tapered segments thinning along the arc. The curl keeps a
/// long tail close to the body; segments stop at the canvas margin if the
/// arc still escapes. Returns the segments and the flattened centerline.
fn tail_prims(
    c: f64,
    r: f64,
    ang: f64,
    arc_len: f64,
    root_w: f64,
    sweep: f64,
    curl: f64,
    limit: f64,
) -> (Vec<Prim>, Vec<(f64, f64)>) {
    const SEGS: usize = 16;
    let (sin, cos) = ang.sin_cos();
    let x0 = c + 0.85 * r * cos;
    let y0 = c + 0.85 * r * sin;
    // center of curvature sits perpendicular to the outward tangent
    let rho = arc_len / sweep;
    let ox = x0 - curl * rho * sin;
    let oy = y0 + curl * rho * cos;
    let start_ang = (y0 - oy).atan2(x0 - ox);
    let w_at = |t: f64| root_w * (1.0 - 0.55 * t);
    let mut prims = Vec::with_capacity(SEGS);
    let mut pts = vec![(x0, y0)];
    let mut prev = (x0, y0);
    for s in 1..=SEGS {
        let t = s as f64 / SEGS as f64;
        let a = start_ang + curl * sweep * t;
        let nx = ox + rho * a.cos();
        let ny = oy + rho * a.sin();
        let w = w_at(t);
        if (nx - c).hypot(ny - c) + w > limit {
            break;
        }
        prims.push(Prim::Taper {
            x0: prev.0,
            y0: prev.1,
            x1: nx,
            y1: ny,
            w0: w_at((s - 1) as f64 / SEGS as f64),
            w1: w,
        });
        pts.push((nx, ny));
        prev = (nx, ny);
    }
    (prims, pts)
}

/// Class 1: body plus one long thin curved tail.
fn draw_lion(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Prim> {
    let c = cfg.size as f64 / 2.0;
    let limit = c - 2.0;
    let r = base_radius(cfg) * rng.gen_range(0.8..1.2);
    let rot = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut prims = vec![body_blob(c, c, r, rng)];
    let arc = cfg.tail_len * r * rng.gen_range(0.9..1.1);
    let root_w = cfg.tail_width * r * rng.gen_range(0.85..1.15);
    let sweep = rng.gen_range(1.4..2.3);
    let curl = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let (tail, _) = tail_prims(c, r, rot, arc, root_w, sweep, curl, limit);
    prims.extend(tail);
    prims
}

/// Class 2: body plus two parallel elongated ears.
fn draw_hare(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Prim> {
    let c = cfg.size as f64 / 2.0;
    let limit = c - 2.0;
    let r = base_radius(cfg) * rng.gen_range(0.8..1.2);
    let rot = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut prims = vec![body_blob(c, c, r, rng)];
    let len = cfg.ear_len * r * rng.gen_range(0.9..1.15);
    let gap = r * rng.gen_range(0.42..0.58);
    let w = r * rng.gen_range(0.15..0.20);
    let (sin, cos) = rot.sin_cos();
    // lateral offsets perpendicular to the shared ear direction
    for side in [-0.5, 0.5] {
        let off = side * gap;
        let bx = c - off * sin + 0.80 * r * cos;
        let by = c + off * cos + 0.80 * r * sin;
        prims.push(capped_taper(c, bx, by, rot, len, w, w * 0.75, limit));
    }
    prims
}

fn base_radius(cfg: &SynthConfig) -> f64 {
    cfg.size as f64 * 0.20
}

fn render_example(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> RawImage {
    let prims = match label {
        0 => draw_crab(cfg, rng),
        1 => draw_lion(cfg, rng),
        _ => draw_hare(cfg, rng),
    };
    render(&prims, cfg.size)
}

/// Names for the three generated classes, in label order.
pub const CLASS_NAMES: [&str; 3] = ["crab", "lion", "hare"];

/// Generates the full dataset: `counts[c]` examples of each class, ordered
/// by class then index. Each image is drawn from its own derived stream, so
/// regeneration with the same config is byte-identical.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut examples = Vec::with_capacity(cfg.counts.iter().sum());
    for (label, &count) in cfg.counts.iter().enumerate() {
        for idx in 0..count {
            let tag = TAG_IMAGE_BASE + ((label as u64) << 32) + idx as u64;
            let mut rng = stream_rng(cfg.seed, tag);
            let raw = render_example(cfg, label, &mut rng);
            examples.push(LabeledExample { image: normalize(&raw), label });
        }
    }
    Dataset::new(examples, CLASS_NAMES.iter().map(|s| s.to_string()).collect())
}

/// Fraction of pixels darker than mid-gray.
pub fn foreground_fraction(img: &RawImage) -> f64 {
    let dark = img.pixels().iter().filter(|&&p| p < 128).count();
    dark as f64 / img.pixels().len() as f64
}

/// Query figure parts: shared base (body + subdued ears), tail primitives,
/// and the tail centerline for locating the ablated region.
fn build_query(cfg: &SynthConfig) -> (Vec<Prim>, Vec<Prim>, Vec<(f64, f64)>) {
    let mut rng = stream_rng(cfg.seed, TAG_QUERY);
    let c = cfg.size as f64 / 2.0;
    let limit = c - 2.0;
    let r = base_radius(cfg);
    let mut base = vec![body_blob(c, c, r, &mut rng)];

    // subdued ears: shorter than the class-2 archetype, enough to read
    // "hare" once the tail is gone
    let ear_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let ear_len = 0.85 * cfg.ear_len * r;
    let gap = 0.5 * r;
    let (esin, ecos) = ear_dir.sin_cos();
    for side in [-0.5, 0.5] {
        let off = side * gap;
        let bx = c - off * esin + 0.80 * r * ecos;
        let by = c + off * ecos + 0.80 * r * esin;
        base.push(capped_taper(
            c,
            bx,
            by,
            ear_dir,
            ear_len,
            r * 0.16,
            r * 0.12,
            limit,
        ));
    }

    // prominent tail on the opposite side
    let tail_dir = ear_dir + std::f64::consts::PI;
    let (tail, pts) = tail_prims(
        c,
        r,
        tail_dir,
        cfg.tail_len * r,
        cfg.tail_width * r,
        1.8,
        1.0,
        limit,
    );
    (base, tail, pts)
}

/// The rotated-query probe: a lion-style figure whose tail is the deciding
/// feature. `full` carries body, two subdued ears, and a prominent tail;
/// `ablated` is the identical render without the tail. The pair differs
/// only where the tail sits.
pub fn make_query_pair(cfg: &SynthConfig) -> Result<(GrayImage, GrayImage)> {
    cfg.validate()?;
    let (base, tail, _) = build_query(cfg);
    let mut full = base.clone();
    full.extend(tail);
    let full_img = normalize(&render(&full, cfg.size));
    let ablated_img = normalize(&render(&base, cfg.size));
    Ok((full_img, ablated_img))
}

/// Axis-aligned bounding box of the pixels where two same-size images
/// differ, as (min_x, min_y, max_x, max_y); None when identical.
pub fn diff_bbox(a: &GrayImage, b: &GrayImage) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (a.width(), a.height());
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if a.get(y, x) != b.get(y, x) {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    bbox
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::quantize;

    #[test]
    fn default_config_yields_305_examples() {
        let ds = gen_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(ds.len(), 305);
        assert_eq!(ds.class_names(), &["crab", "lion", "hare"]);
        let mut counts = [0usize; 3];
        for ex in ds.examples() {
            counts[ex.label] += 1;
            assert_eq!(ex.image.width(), 50);
            assert_eq!(ex.image.height(), 50);
        }
        assert_eq!(counts, [100, 100, 105]);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig { counts: [5, 5, 5], ..Default::default() };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        for (ea, eb) in a.examples().iter().zip(b.examples()) {
            assert_eq!(quantize(&ea.image), quantize(&eb.image));
        }
        let c = gen_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap();
        let same = a
            .examples()
            .iter()
            .zip(c.examples())
            .all(|(x, y)| x.image == y.image);
        assert!(!same, "different seeds should differ somewhere");
    }

    #[test]
    fn foreground_fraction_within_bounds_for_every_image() {
        let ds = gen_synthetic(&SynthConfig::default()).unwrap();
        for (i, ex) in ds.examples().iter().enumerate() {
            let f = foreground_fraction(&quantize(&ex.image));
            assert!(
                (0.05..=0.60).contains(&f),
                "example {i} (class {}) foreground {f:.3}",
                ex.label
            );
        }
    }

    #[test]
    fn bodies_are_size_matched_across_classes() {
        // appendage fitting must not shrink bodies: per-class mean foreground
        // stays in one moderate band and no class collapses
        let cfg = SynthConfig { counts: [40, 40, 40], ..Default::default() };
        let ds = gen_synthetic(&cfg).unwrap();
        let mut mean = [0.0f64; 3];
        for ex in ds.examples() {
            mean[ex.label] += foreground_fraction(&quantize(&ex.image)) / 40.0;
        }
        for c in 0..3 {
            assert!(mean[c] > 0.08 && mean[c] < 0.40, "class {c} mean {}", mean[c]);
        }
        let spreadmax = mean.iter().fold(0.0f64, |a, &b| a.max(b));
        let spreadmin = mean.iter().fold(1.0f64, |a, &b| a.min(b));
        assert!(
            spreadmax / spreadmin < 2.5,
            "class foreground means too far apart: {mean:?}"
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SynthConfig { counts: [0, 1, 1], ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { size: 8, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { spike_min: 0, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { spike_min: 9, spike_max: 8, ..ok.clone() }
            .validate()
            .is_err());
        assert!(SynthConfig { tail_len: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { tail_width: 0.9, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { ear_len: f64::NAN, ..ok }.validate().is_err());
    }

    #[test]
    fn query_pair_differs_only_near_the_tail_centerline() {
        let cfg = SynthConfig::default();
        let (full, ablated) = make_query_pair(&cfg).unwrap();
        let (_, _, pts) = build_query(&cfg);
        assert!(pts.len() > 4, "tail too short: {} points", pts.len());
        let r = base_radius(&cfg);
        // differing pixels lie within the tail's influence: root half-width
        // plus the smoothstep band plus segment-sampling slack
        let margin = cfg.tail_width * r + EDGE + 2.0;
        for y in 0..cfg.size {
            for x in 0..cfg.size {
                if full.get(y, x) != ablated.get(y, x) {
                    let d = pts
                        .iter()
                        .map(|&(px, py)| (px - x as f64).hypot(py - y as f64))
                        .fold(f64::INFINITY, f64::min);
                    assert!(d <= margin, "pixel ({x},{y}) differs {d:.2} from tail");
                }
            }
        }
    }

    #[test]
    fn query_ablation_strictly_brightens() {
        let (full, ablated) = make_query_pair(&SynthConfig::default()).unwrap();
        for (pf, pa) in full.pixels().iter().zip(ablated.pixels()) {
            // erasing the tail can only brighten pixels
            assert!(pa >= pf, "ablated pixel darker than full");
        }
        let ff = foreground_fraction(&quantize(&full));
        let fa = foreground_fraction(&quantize(&ablated));
        assert!(ff > fa, "full {ff} vs ablated {fa}");
    }

    #[test]
    fn query_pair_is_deterministic() {
        let cfg = SynthConfig::default();
        let (f1, a1) = make_query_pair(&cfg).unwrap();
        let (f2, a2) = make_query_pair(&cfg).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(a1, a2);
    }
}
